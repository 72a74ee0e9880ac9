"""Image file I/O and colour/luminance conversion.

Images are plain numpy arrays: colour images are ``(H, W, 3)`` linear radiance,
luminance images are ``(H, W)``.  Readers return float32 data (the precision of
both on-disk formats); everything else preserves the dtype it is given.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

REC709 = np.array([0.2126, 0.7152, 0.0722])
LOG_EPS = 1e-6


class RadianceFormatError(ValueError):
    """Malformed Radiance file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class RadianceHeaderError(RadianceFormatError):
    pass


class TruncatedScanlineError(RadianceFormatError):
    pass


class UnsupportedPixelOrderError(RadianceFormatError):
    pass


class PFMFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Radiance RGBE


def rgbe_to_float(rgbe: np.ndarray) -> np.ndarray:
    """Decode ``(..., 4)`` uint8 RGBE quadruples to linear float32 RGB.

    value = mantissa / 256 * 2**(E - 128); E == 0 is exact black.
    """
    rgbe = np.asarray(rgbe, dtype=np.uint8)
    exp = rgbe[..., 3].astype(np.int32)
    scale = np.where(exp > 0, np.ldexp(1.0, exp - 128 - 8), 0.0)
    return (rgbe[..., :3].astype(np.float64) * scale[..., None]).astype(np.float32)


def float_to_rgbe(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if np.any(rgb < 0) or not np.all(np.isfinite(rgb)):
        raise ValueError("RGBE encoding needs finite non-negative values")
    brightest = rgb.max(axis=-1)
    frac, exp = np.frexp(brightest)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    # below the smallest representable exponent the pixel becomes black
    ok = (brightest > 0) & (exp > -128)
    if np.any(exp[ok] > 127):
        raise ValueError("value too large for RGBE")
    scale = np.zeros_like(brightest)
    scale[ok] = frac[ok] * 256.0 / brightest[ok]
    mant = np.floor(rgb * scale[..., None])
    out[..., :3] = np.clip(mant, 0, 255).astype(np.uint8)
    out[..., 3] = np.where(ok, exp + 128, 0).astype(np.uint8)
    return out


def _read_line(buf: bytes, pos: int) -> tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise RadianceHeaderError("unterminated header line", pos)
    return buf[pos:end].decode("latin-1"), end + 1


_RES_RE = re.compile(r"^([-+])([XY]) (\d+) ([-+])([XY]) (\d+)$")


def _read_rle_scanline(buf: bytes, pos: int, width: int) -> tuple[np.ndarray, int]:
    line = np.empty((4, width), dtype=np.uint8)
    pos += 4
    for ch in range(4):
        x = 0
        while x < width:
            if pos >= len(buf):
                raise TruncatedScanlineError("scanline ends inside run data", pos)
            count = buf[pos]
            pos += 1
            if count > 128:
                count -= 128
                if x + count > width or pos >= len(buf):
                    raise TruncatedScanlineError("bad run length", pos - 1)
                line[ch, x:x + count] = buf[pos]
                pos += 1
            else:
                if count == 0 or x + count > width:
                    raise TruncatedScanlineError("bad literal count", pos - 1)
                if pos + count > len(buf):
                    raise TruncatedScanlineError("scanline ends inside literal data", len(buf))
                line[ch, x:x + count] = np.frombuffer(buf, np.uint8, count, pos)
                pos += count
            x += count
    return line.T, pos


def decode_radiance(buf: bytes) -> np.ndarray:
    """Parse the bytes of a Radiance ``.hdr`` file into ``(H, W, 3)`` float32."""
    if not buf.startswith(b"#?"):
        raise RadianceHeaderError("missing #? magic", 0)
    magic, pos = _read_line(buf, 0)
    if magic[2:].split()[:1] not in (["RADIANCE"], ["RGBE"]):
        raise RadianceHeaderError(f"unknown program type {magic!r}", 0)
    while True:
        start = pos
        line, pos = _read_line(buf, pos)
        if line == "":
            break
        if line.startswith("FORMAT=") and line != "FORMAT=32-bit_rle_rgbe":
            raise RadianceHeaderError(f"unsupported {line}", start)
    start = pos
    res, pos = _read_line(buf, pos)
    m = _RES_RE.match(res.strip())
    if m is None:
        raise RadianceHeaderError(f"bad resolution line {res!r}", start)
    if (m.group(1), m.group(2), m.group(4), m.group(5)) != ("-", "Y", "+", "X"):
        raise UnsupportedPixelOrderError(f"pixel order {res.strip()!r}", start)
    height, width = int(m.group(3)), int(m.group(6))

    rgbe = np.empty((height, width, 4), dtype=np.uint8)
    for y in range(height):
        if pos + 4 > len(buf):
            raise TruncatedScanlineError(f"scanline {y} missing", pos)
        head = buf[pos:pos + 4]
        if 8 <= width < 32768 and head[0] == 2 and head[1] == 2 and not head[2] & 0x80:
            if (head[2] << 8 | head[3]) != width:
                raise TruncatedScanlineError(f"scanline {y} width mismatch", pos)
            rgbe[y], pos = _read_rle_scanline(buf, pos, width)
        else:
            n = 4 * width
            if pos + n > len(buf):
                raise TruncatedScanlineError(f"flat scanline {y} truncated", len(buf))
            rgbe[y] = np.frombuffer(buf, np.uint8, n, pos).reshape(width, 4)
            pos += n
    return rgbe_to_float(rgbe)


def read_radiance_hdr(path) -> np.ndarray:
    return decode_radiance(Path(path).read_bytes())


def _rle_channel(values: np.ndarray) -> bytes:
    out = bytearray()
    n = len(values)
    i = 0
    while i < n:
        run = 1
        while i + run < n and run < 127 and values[i + run] == values[i]:
            run += 1
        if run >= 4:
            out += bytes((128 + run, values[i]))
            i += run
            continue
        j = i
        # literal span stops where a run of 4 starts
        while j < n and j - i < 128:
            if j + 3 < n and values[j] == values[j + 1] == values[j + 2] == values[j + 3]:
                break
            j += 1
        out.append(j - i)
        out += bytes(values[i:j])
        i = j
    return bytes(out)


def encode_radiance(img: np.ndarray, rle: bool = True) -> bytes:
    img = np.asarray(img)
    height, width = img.shape[:2]
    rgbe = float_to_rgbe(img)
    parts = [b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n", f"-Y {height} +X {width}\n".encode()]
    use_rle = rle and 8 <= width < 32768
    for y in range(height):
        if use_rle:
            parts.append(bytes((2, 2, width >> 8, width & 0xFF)))
            parts.extend(_rle_channel(rgbe[y, :, c]) for c in range(4))
        else:
            parts.append(rgbe[y].tobytes())
    return b"".join(parts)


def write_radiance_hdr(path, img: np.ndarray, rle: bool = True) -> None:
    Path(path).write_bytes(encode_radiance(img, rle=rle))


# ---------------------------------------------------------------------------
# PFM


def read_pfm(path) -> np.ndarray:
    """Read a PFM file as an ``(H, W, 3)`` float32 image; ``Pf`` is replicated to RGB."""
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    # magic, width, height, scale: whitespace separated, single byte after scale
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(buf) and not buf[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise PFMFormatError("truncated PFM header")
        tokens.append(buf[pos:end].decode("latin-1"))
        pos = end
    pos += 1
    magic = tokens[0]
    if magic not in ("PF", "Pf"):
        raise PFMFormatError(f"bad PFM magic {magic!r}")
    try:
        width, height = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
    except ValueError as exc:
        raise PFMFormatError(f"bad PFM header: {exc}") from None
    if width <= 0 or height <= 0 or scale == 0:
        raise PFMFormatError("bad PFM dimensions or scale")
    channels = 3 if magic == "PF" else 1
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    count = width * height * channels
    if len(buf) - pos != count * 4:
        raise PFMFormatError(
            f"dimension mismatch: header says {count} floats, file holds {(len(buf) - pos) / 4:g}")
    data = np.frombuffer(buf, dtype, count, pos).reshape(height, width, channels)
    data = data[::-1].astype(np.float32)
    if channels == 1:
        data = np.repeat(data, 3, axis=2)
    return np.ascontiguousarray(data)


def write_pfm(path, img: np.ndarray, little_endian: bool = True) -> None:
    """Write ``(H, W, 3)`` as ``PF`` or ``(H, W)`` as ``Pf``."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 3:
        magic = "PF"
    elif img.ndim == 2:
        magic = "Pf"
    else:
        raise PFMFormatError(f"cannot store array of shape {img.shape} as PFM")
    dtype = "<f4" if little_endian else ">f4"
    scale = -1.0 if little_endian else 1.0
    header = f"{magic}\n{img.shape[1]} {img.shape[0]}\n{scale}\n".encode()
    Path(path).write_bytes(header + np.ascontiguousarray(img[::-1], dtype=dtype).tobytes())


def read_image(path) -> np.ndarray:
    """Dispatch on extension: ``.hdr``/``.pic`` Radiance, otherwise PFM."""
    if Path(path).suffix.lower() in (".hdr", ".pic", ".rgbe"):
        return read_radiance_hdr(path)
    return read_pfm(path)


# ---------------------------------------------------------------------------
# PNG


def quantize8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(img)) or img.min(initial=0.0) < 0 or img.max(initial=0.0) > 1:
        raise ValueError("PNG output must lie in [0, 1]; clamp before writing")
    # round half away from zero; values are non-negative
    return np.floor(255.0 * img + 0.5).astype(np.uint8)


def write_png8(path, img: np.ndarray) -> None:
    q = quantize8(img)
    if q.ndim == 2:
        Image.fromarray(q, mode="L").save(path)
    elif q.ndim == 3 and q.shape[2] == 3:
        Image.fromarray(q, mode="RGB").save(path)
    else:
        raise ValueError(f"unsupported image shape {q.shape}")


# ---------------------------------------------------------------------------
# colour


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    return img @ REC709.astype(img.dtype if img.dtype.kind == "f" else np.float64)


@dataclass(frozen=True)
class ColorRecoveryParams:
    s: float = 0.6

    def __post_init__(self):
        if not 0 < self.s <= 1:
            raise ValueError(f"saturation exponent must lie in (0, 1], got {self.s}")


def recover_color(hdr: np.ndarray, h: np.ndarray, l: np.ndarray,
                  params: ColorRecoveryParams = ColorRecoveryParams()) -> np.ndarray:
    """Reattach colour to a tone-mapped luminance: ``out_c = (hdr_c / h)**s * l``."""
    hdr = np.asarray(hdr)
    h = np.asarray(h)
    l = np.asarray(l)
    if hdr.shape[:2] != h.shape or h.shape != l.shape:
        raise ValueError(f"shape mismatch: hdr {hdr.shape}, h {h.shape}, l {l.shape}")
    safe = np.where(h > 0, h, 1.0)
    ratio = hdr / safe[..., None]
    out = ratio ** params.s * l[..., None]
    return np.where((h > 0)[..., None], out, 0.0)


# ---------------------------------------------------------------------------
# normalisation


@dataclass(frozen=True)
class NormalizationRecord:
    mode: str
    lo: float
    hi: float
    eps: float = LOG_EPS

    def invert(self, img: np.ndarray) -> np.ndarray:
        if self.mode == "linear":
            return img * self.hi
        t = img * (np.log(self.hi + self.eps) - np.log(self.lo + self.eps)) + np.log(self.lo + self.eps)
        return np.exp(t) - self.eps


def normalize_luminance(img: np.ndarray, mode: str = "log") -> tuple[np.ndarray, NormalizationRecord]:
    img = np.asarray(img)
    if img.dtype.kind != "f":
        img = img.astype(np.float64)
    hi = float(img.max())
    if hi <= 0:
        raise ValueError("cannot normalise an all-zero image")
    if mode == "linear":
        return img / hi, NormalizationRecord("linear", 0.0, hi)
    if mode != "log":
        raise ValueError(f"unknown normalisation mode {mode!r}")
    lo = float(img.min())
    rec = NormalizationRecord("log", lo, hi)
    den = np.log(hi + LOG_EPS) - np.log(lo + LOG_EPS)
    if den == 0:
        return np.ones_like(img), rec
    out = (np.log(img + LOG_EPS) - np.log(lo + LOG_EPS)) / den
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False), rec
