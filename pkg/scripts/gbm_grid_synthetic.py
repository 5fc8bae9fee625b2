"""GBM hyperparameter search (optionally with LDA) on the synthetic corpus.

Needs ``gen-synthetic`` and ``extract features`` to have run in the output
directory (``scripts/synthetic_experiment.py`` does both).

    python scripts/gbm_grid_synthetic.py --out runs/synthetic_desk [--lda]
"""
import argparse
import sys
from pathlib import Path

from ascfusion.cli import main as cli

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "synthetic_desk.ini"))
    ap.add_argument("--out", default=None)
    ap.add_argument("--lda", action="store_true", help="also search the LDA dimension")
    args = ap.parse_args()
    argv = ["grid-search", "gbm", "--config", args.config, "--threads", "1",
            "--grid.use_lda", "true" if args.lda else "false"]
    if args.out:
        argv += ["--out", args.out]
    code = cli(argv)
    if code == 0:
        code = cli(["report"] + argv[2:])
    return code


if __name__ == "__main__":
    sys.exit(main())
