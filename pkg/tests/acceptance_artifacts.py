"""Builds (or reuses) the trained approximators the acceptance suite needs.

Artifacts live in ``$TAXIPLAY_CACHE`` (default ``<repo>/.acceptance_cache``) and are
produced through the command line so that they can be rebuilt by hand:

    taxiplay gen-labels --demand table:<label> --count 22000 --trajectories 1024 --seed <s> --out <label>.npz
    taxiplay train --labels <label>.npz --label <label> --seed <s> --out <label>.bin
"""

import os
import sys
from pathlib import Path

from taxiplay import cli
from taxiplay.demand import save_model, table_model

LABELS = 22_000
TRAJECTORIES = 1024
SEEDS = {"low": 11, "medium": 12, "high": 13}


def cache_dir() -> Path:
    root = Path(__file__).resolve().parent.parent
    path = Path(os.environ.get("TAXIPLAY_CACHE", root / ".acceptance_cache"))
    path.mkdir(parents=True, exist_ok=True)
    return path


def ensure(label: str) -> Path:
    """Path of the weights file for ``label``, building labels and weights when missing."""
    out = cache_dir()
    labels, weights, model = out / f"{label}.npz", out / f"{label}.bin", out / f"{label}.model"
    seed = str(SEEDS[label])
    if not model.exists():
        with model.open("w") as f:
            save_model(table_model(label, 25), f)
    if not labels.exists():
        tmp = out / f"{label}.partial.npz"
        if cli.main(["gen-labels", "--demand", f"table:{label}", "--count", str(LABELS), "--trajectories",
                     str(TRAJECTORIES), "--seed", seed, "--out", str(tmp)]) != 0:
            raise RuntimeError(f"label generation for {label} failed")
        tmp.rename(labels)
    if not weights.exists():
        log = out / f"{label}.train.txt"
        stdout = sys.stdout
        with log.open("w") as sys.stdout:
            code = cli.main(["train", "--labels", str(labels), "--label", label, "--seed", seed,
                             "--out", str(weights)])
        sys.stdout = stdout
        if code != 0:
            raise RuntimeError(f"training for {label} failed")
    return weights


def manifest(labels=("low", "high")) -> Path:
    path = cache_dir() / ("library-" + "-".join(labels) + ".txt")
    path.write_text("".join(f"{k} {k}.model {k}.bin\n" for k in labels))
    return path


if __name__ == "__main__":
    for name in sys.argv[1:] or list(SEEDS):
        print(name, ensure(name), flush=True)
