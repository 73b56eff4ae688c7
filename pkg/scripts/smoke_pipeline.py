#!/usr/bin/env python3
"""End-to-end smoke run on two tiny scenes: simulate -> genqueries -> train
-> eval -> report. Finishes in about a minute on a laptop CPU.

Usage: python scripts/smoke_pipeline.py [workdir]
"""

import json
import sys
import tempfile
from pathlib import Path

from occ4d.cli import main

OVERRIDES = {
    "suite": {"n_scenes": 2, "n_future": 6, "future_dt": 0.5, "d_raw": 12},
    "pca": {"d": 8, "fit_subset": 8000},
    "sampler": {"n_occ_pos": 2000, "n_occ_neg": 2000, "n_feat": 300, "n_ego_pos": 60, "n_ego_neg": 60},
    "field": {"channels": 16, "head_hidden": 32},
    "train": {"total_steps": 300, "warmup_steps": 30, "lr_max": 2e-3},
    "eval": {"step": 0.4, "times": [0.6, 1.8, 3.0]},
}


def run(workdir: Path) -> int:
    workdir.mkdir(parents=True, exist_ok=True)
    cfg = workdir / "config.json"
    cfg.write_text(json.dumps(OVERRIDES, indent=1))
    args = ["--config", str(cfg)]
    steps = [
        ["simulate", *args, "--out", str(workdir / "data")],
        ["genqueries", *args, "--dataset", str(workdir / "data"), "--out", str(workdir / "queries")],
        ["train", *args, "--queries", str(workdir / "queries"), "--out", str(workdir / "run")],
        [
            "eval",
            *args,
            "--checkpoint",
            str(workdir / "run" / "checkpoint.bin"),
            "--dataset",
            str(workdir / "data"),
            "--out",
            str(workdir / "report.json"),
            "--rasters",
            str(workdir / "rasters"),
        ],
        ["report", str(workdir / "report.json"), "--out", str(workdir / "report.md")],
    ]
    for argv in steps:
        code = main(argv)
        if code != 0:
            print(f"step {argv[0]} failed with exit code {code}", file=sys.stderr)
            return code
    print(f"\nsmoke pipeline complete under {workdir}")
    return 0


if __name__ == "__main__":
    target = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="occ4d-smoke-"))
    sys.exit(run(target))
