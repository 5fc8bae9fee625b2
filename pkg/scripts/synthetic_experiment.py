"""Run the full synthetic development experiment through the CLI and print the report.

Generates the 15-class corpus, caches both branch inputs, cross-validates the
CNN and GBM branches with every fusion rule, evaluates on the held-out
synthetic split, and writes everything under the output directory.

    python scripts/synthetic_experiment.py [--config configs/synthetic_desk.ini] [--out DIR] [--trials N]
"""
import argparse
import sys
import time
from pathlib import Path

from ascfusion.cli import main as cli

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "synthetic_desk.ini"))
    ap.add_argument("--out", default=None, help="output directory (default: the config's output.dir)")
    ap.add_argument("--trials", type=int, default=1, help="independent seeds for the CV step")
    ap.add_argument("--skip-eval", action="store_true", help="development CV only")
    args = ap.parse_args()

    common = ["--config", args.config, "--threads", "1"]
    if args.out:
        common += ["--out", args.out]
    steps = [["gen-synthetic"], ["extract", "mel"], ["extract", "features"],
             ["evaluate", "cv", "--evaluation.n_trials", str(args.trials)]]
    if not args.skip_eval:
        steps.append(["evaluate", "eval"])
    steps.append(["report"])
    for step in steps:
        t0 = time.perf_counter()
        code = cli(step + common)
        print(f"# {' '.join(step)}: exit {code}, {time.perf_counter() - t0:.0f} s", file=sys.stderr)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
