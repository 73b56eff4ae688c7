#!/usr/bin/env python3
"""Desk-scale scaling study: pre-train on {1, 4, 16, 64} samples, evaluate
held-out exact-oracle R@P70 and ego-path AP per sample count.

Drives the occ4d CLI with a pre-training suite of 64 scenes plus a held-out
suite, then renders the scaling table. Expect roughly 20-30 minutes on a
laptop CPU.

Usage: python scripts/scaling_study.py [workdir]
"""

import json
import sys
import tempfile
from pathlib import Path

from occ4d.cli import main

PRETRAIN = {
    "suite": {"n_scenes": 64, "scene_seed_base": 2000, "n_boxes": [4, 8]},
    "sampler": {"n_feat": 500},
    "train": {"lr_max": 2e-3},
    "scaling": {"sample_counts": [1, 4, 16, 64], "seeds": [0, 1, 2], "total_steps": 800, "warmup_steps": 50},
    "eval": {"step": 0.4, "z": [0.2, 2.6]},
}
HELDOUT = {
    "suite": {"n_scenes": 6, "scene_seed_base": 9000, "n_boxes": [4, 8]},
    "sampler": {"n_feat": 500},
    "train": {"lr_max": 2e-3},
    "scaling": {"sample_counts": [1, 4, 16, 64], "seeds": [0, 1, 2], "total_steps": 800, "warmup_steps": 50},
    "eval": {"step": 0.4, "z": [0.2, 2.6]},
}


def run(workdir: Path) -> int:
    workdir.mkdir(parents=True, exist_ok=True)
    cfg_pre = workdir / "config_pretrain.json"
    cfg_pre.write_text(json.dumps(PRETRAIN, indent=1))
    cfg_held = workdir / "config_heldout.json"
    cfg_held.write_text(json.dumps(HELDOUT, indent=1))
    steps = [
        ["simulate", "--config", str(cfg_pre), "--out", str(workdir / "pretrain_data"), "--workers", "4"],
        ["simulate", "--config", str(cfg_held), "--out", str(workdir / "heldout_data")],
        [
            "genqueries",
            "--config",
            str(cfg_pre),
            "--dataset",
            str(workdir / "pretrain_data"),
            "--out",
            str(workdir / "queries"),
            "--workers",
            "4",
        ],
        [
            "scaling",
            "--config",
            str(cfg_pre),
            "--queries",
            str(workdir / "queries"),
            "--eval-dataset",
            str(workdir / "heldout_data"),
            "--out",
            str(workdir / "scaling"),
        ],
        ["report", str(workdir / "scaling" / "scaling.json"), "--out", str(workdir / "scaling.md")],
    ]
    for argv in steps:
        code = main(argv)
        if code != 0:
            print(f"step {argv[0]} failed with exit code {code}", file=sys.stderr)
            return code
    print(f"\nscaling study complete under {workdir}")
    return 0


if __name__ == "__main__":
    target = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="occ4d-scaling-"))
    sys.exit(run(target))
