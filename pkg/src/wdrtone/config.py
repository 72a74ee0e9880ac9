"""JSON run configuration with strict key checking."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .losses import FineTuneLossWeights, LossWeights
from .training import TrainConfig


@dataclass
class RunConfig:
    """Every :class:`TrainConfig` field plus data and display settings.

    With ``data_dir`` unset, training data is synthesised in memory from
    ``synth_count`` images of ``synth_size`` pixels.
    """

    train: TrainConfig = field(default_factory=TrainConfig)
    data_dir: str | None = None
    synth_count: int = 32
    synth_size: int = 64
    dyn_range: float = 1e4
    eval_count: int = 8
    s: float = 0.6
    threads: int = 1

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "train"}
        t = asdict(self.train)
        t["patch_frac_range"] = list(t["patch_frac_range"])
        d.update(t)
        return d


_RUN_KEYS = [f.name for f in fields(RunConfig) if f.name != "train"]
_NESTED = {"loss": LossWeights, "finetune_loss": FineTuneLossWeights}


def config_from_dict(raw: dict) -> RunConfig:
    train_keys = set(TrainConfig.field_names())
    unknown = sorted(set(raw) - train_keys - set(_RUN_KEYS))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    train_kw = {}
    for k, v in raw.items():
        if k not in train_keys:
            continue
        if k in _NESTED:
            allowed = {f.name for f in fields(_NESTED[k])}
            bad = sorted(set(v) - allowed)
            if bad:
                raise ValueError(f"unknown keys in {k}: {', '.join(bad)}")
            v = _NESTED[k](**v)
        elif k == "patch_frac_range":
            v = tuple(v)
        train_kw[k] = v
    run_kw = {k: raw[k] for k in _RUN_KEYS if k in raw}
    return RunConfig(train=TrainConfig(**train_kw), **run_kw)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError("config must be a JSON object")
    return config_from_dict(raw)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def with_n(cfg: RunConfig, n: int) -> RunConfig:
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, n=n))
