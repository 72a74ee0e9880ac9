"""Print the finite-difference gradient suite as a table."""
import sys
import time

from wdrtone.gradsuite import run_suite


def main():
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
    start = time.perf_counter()
    results = run_suite(seed)
    print(f"{'case':28s} {'max rel err':>12s} {'coords':>7s} {'tol':>7s}")
    for r in results:
        flag = "" if r.passed else "  FAIL"
        print(f"{r.name:28s} {r.report.max_rel_error:12.2e} {r.report.checked:7d} {r.tolerance:7.0e}{flag}")
    print(f"{time.perf_counter() - start:.1f}s")
    return 0 if all(r.passed for r in results) else 1


if __name__ == "__main__":
    sys.exit(main())
