"""The full desk study: synthesize, backtest four forecasters, compare.

Runs ``synth`` and ``evaluate`` with ``configs/desk.ini`` in a scratch
directory (about eight minutes on one core) and prints the summary table
next to the persistence reference. The same run from the shell::

    geoincidence synth --config configs/desk.ini
    geoincidence evaluate --config configs/desk.ini

    python demos/03_desk_study.py [workdir]
"""
import csv
import shutil
import sys
import tempfile
from pathlib import Path

from geoincidence.pipeline import cmd_evaluate, cmd_synth, load_config

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"


def main(workdir=None):
    root = Path(workdir or tempfile.mkdtemp(prefix="desk_"))
    root.mkdir(parents=True, exist_ok=True)
    shutil.copy(DESK, root / "desk.ini")
    cfg = load_config(root / "desk.ini")
    print("synthesizing into", cmd_synth(cfg))
    out = cmd_evaluate(cfg)
    print("evaluation written to", out)
    for name in ("summary.csv", "reference_summary.csv"):
        with open(out / name) as fh:
            for row in csv.DictReader(fh):
                print(f"  {row['model']:<12} h={row['horizon']:<3} "
                      f"rmse {float(row['rmse_mean']):8.1f} +- {float(row['rmse_std']):7.1f}   "
                      f"smape {float(row['smape_mean']):.3f}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
