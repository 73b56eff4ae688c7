"""Run configuration: one JSON document drives every pipeline stage.

The canonical-JSON sha256 of the fully-merged config is the run digest;
every artifact embeds it, and eval refuses checkpoints whose digest does
not match its own config unless forced.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

from .evaluation import EvalGrid
from .field import FieldConfig
from .geom import AugmentConfig
from .queries import Roi4, SamplerConfig
from .training import TrainConfig

import math

DEFAULT_CONFIG = {
    "seed": 0,
    "suite": {
        "n_scenes": 4,
        "scene_seed_base": 1000,
        "n_boxes": [3, 6],
        "speed_max": 2.5,
        "ego_speed": [2.0, 3.5],
        "yaw_rate_max": 0.12,
        "region_half": 12.0,
        "ground_range": [0.0, 0.0],
        "d_raw": 24,
        "past_offsets": [-1.0, -0.5, 0.0],
        "future_dt": 0.3,
        "n_future": 10,
        "image_times": [0.0, 0.6, 1.2, 1.8, 2.4, 3.0],
    },
    "pca": {"d": 16, "fit_subset": 50000},
    "sampler": {
        "delta": 0.1,
        "n_occ_pos": 9000,
        "n_occ_neg": 9000,
        "n_feat": 1000,
        "n_ego_pos": 100,
        "n_ego_neg": 100,
        "w_ego": 1.0,
        "jitter_tau": 1.0,
        "missing_ray_min_run": 5,
        "missing_ray_samples_per_ray": 2,
        "depth_tol": 0.2,
        "roi": {"x": [-14.0, 14.0], "y": [-14.0, 14.0], "z": [-0.4, 3.0], "t_max": 3.0},
    },
    "augment": {
        "theta_min_deg": -20.0,
        "theta_max_deg": 20.0,
        "rotation_enabled": True,
        "jitter_enabled": False,
        "jitter_tau": 1.0,
    },
    "field": {
        "x_range": [-18.0, 18.0],
        "y_range": [-18.0, 18.0],
        "cell": 0.5,
        "channels": 32,
        "z_range": [-0.4, 3.0],
        "t_max": 3.0,
        "n_freqs": 4,
        "head_hidden": 64,
        "k_past": 3,
        "leaky_slope": 0.1,
    },
    "train": {
        "lambda_occ": 1.0,
        "lambda_dino": 0.5,
        "lambda_ego": 0.1,
        "lr_max": 4e-4,
        "warmup_steps": 100,
        "total_steps": 2000,
        "batch_occ": 512,
        "batch_feat": 128,
        "batch_ego": 64,
        "mode": "amortized",
        "freeze_encoder": False,
        "per_term_average": True,
    },
    "eval": {
        "x": [-16.0, 16.0],
        "y": [-16.0, 16.0],
        "z": [-0.4, 2.8],
        "step": 0.2,
        "times": [0.6, 1.2, 1.8, 2.4, 3.0],
        "raytrace": True,
        "ego_bev_step": 0.5,
        "thresholds": {},
    },
    "scaling": {"sample_counts": [1, 4, 16, 64], "seeds": [0], "total_steps": 800, "warmup_steps": 50},
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in out:
            raise KeyError(f"unknown config key: {k!r}")
        if isinstance(v, dict) and isinstance(out[k], dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as f:
            try:
                user = json.load(f)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
        try:
            cfg = _deep_merge(cfg, user)
        except KeyError as e:
            raise ValueError(f"{path}: {e.args[0]}") from None
    if overrides:
        cfg = _deep_merge(cfg, overrides)
    return cfg


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def sampler_from(cfg: dict, seed: int | None = None) -> SamplerConfig:
    s = cfg["sampler"]
    return SamplerConfig(
        delta=s["delta"],
        n_occ_pos=s["n_occ_pos"],
        n_occ_neg=s["n_occ_neg"],
        n_feat=s["n_feat"],
        n_ego_pos=s["n_ego_pos"],
        n_ego_neg=s["n_ego_neg"],
        w_ego=s["w_ego"],
        roi=Roi4(
            x=tuple(s["roi"]["x"]), y=tuple(s["roi"]["y"]), z=tuple(s["roi"]["z"]), t_max=s["roi"]["t_max"]
        ),
        jitter_tau=s["jitter_tau"],
        missing_ray_min_run=s["missing_ray_min_run"],
        missing_ray_samples_per_ray=s["missing_ray_samples_per_ray"],
        depth_tol=s["depth_tol"],
        seed=cfg["seed"] if seed is None else seed,
    )


def augment_from(cfg: dict) -> AugmentConfig:
    a = cfg["augment"]
    return AugmentConfig(
        theta_min=math.radians(a["theta_min_deg"]),
        theta_max=math.radians(a["theta_max_deg"]),
        jitter_tau=a["jitter_tau"],
        rotation_enabled=a["rotation_enabled"],
        jitter_enabled=a["jitter_enabled"],
    )


def field_from(cfg: dict) -> FieldConfig:
    f = cfg["field"]
    return FieldConfig(
        x_range=tuple(f["x_range"]),
        y_range=tuple(f["y_range"]),
        cell=f["cell"],
        channels=f["channels"],
        z_range=tuple(f["z_range"]),
        t_max=f["t_max"],
        n_freqs=f["n_freqs"],
        head_hidden=f["head_hidden"],
        d_feat=cfg["pca"]["d"],
        k_past=f["k_past"],
        leaky_slope=f["leaky_slope"],
    )


def train_from(cfg: dict, seed: int | None = None, **overrides) -> TrainConfig:
    t = dict(cfg["train"])
    t.update(overrides)
    return TrainConfig(
        lambda_occ=t["lambda_occ"],
        lambda_dino=t["lambda_dino"],
        lambda_ego=t["lambda_ego"],
        lr_max=t["lr_max"],
        warmup_steps=t["warmup_steps"],
        total_steps=t["total_steps"],
        batch_occ=t["batch_occ"],
        batch_feat=t["batch_feat"],
        batch_ego=t["batch_ego"],
        seed=cfg["seed"] if seed is None else seed,
        mode=t["mode"],
        freeze_encoder=t["freeze_encoder"],
        per_term_average=t["per_term_average"],
    )


def evalgrid_from(cfg: dict) -> EvalGrid:
    e = cfg["eval"]
    return EvalGrid(
        x=tuple(e["x"]), y=tuple(e["y"]), z=tuple(e["z"]), step=e["step"], times=tuple(e["times"])
    )


# ---------------------------------------------------------------------------
# artifact manifests


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, stage: str, digest: str, extra: dict | None = None) -> Path:
    """List every file under out_dir with size + sha256; written last so its
    presence marks the stage complete."""
    out_dir = Path(out_dir)
    files = []
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files.append(
                {
                    "path": p.relative_to(out_dir).as_posix(),
                    "bytes": p.stat().st_size,
                    "sha256": file_sha256(p),
                }
            )
    doc = {"stage": stage, "config_digest": digest, "files": files}
    if extra:
        doc.update(extra)
    path = out_dir / "manifest.json"
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")
    return path


def read_manifest(out_dir) -> dict:
    with open(Path(out_dir) / "manifest.json") as f:
        return json.load(f)


import contextlib
import shutil


@contextlib.contextmanager
def staged_output(path, force: bool = False):
    """Stage a directory atomically: work in a temp sibling, rename into
    place on success, clean up on failure."""
    out = Path(path)
    if out.exists() and not force:
        raise FileExistsError(f"output directory {out} already exists (use --force to overwrite)")
    tmp = out.parent / f".{out.name}.tmp-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    os.replace(tmp, out)


def env_default(name: str):
    return os.environ.get(f"OCC4D_{name.upper()}")
