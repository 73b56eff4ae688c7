"""Pipeline entry points: simulate | genqueries | train | eval | scaling | report.

Exit codes: 0 ok, 1 configured acceptance threshold failed, 2 usage error.
Every stage writes a manifest embedding the run-config digest; ``--workers``
parallelizes the per-scene/per-sample stages (outputs are worker-count
independent by construction).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import math
import sys
from pathlib import Path

import numpy as np

from .config import (
    augment_from,
    config_digest,
    env_default,
    evalgrid_from,
    field_from,
    load_config,
    sampler_from,
    staged_output,
    train_from,
    write_manifest,
)
from .evaluation import eval_4d_occupancy, eval_ego_path, write_pgm, write_report_json
from .field import MODE_AMORTIZED, MODE_FIT_PER_SCENE
from .geom import per_ray_rng
from .pca import fit_pca, load_pca, save_pca
from .queries import assemble_sample, load_encoder_input, load_queryset, save_encoder_input, save_queryset
from .scene import (
    camera_pose_at,
    cast_lidar_scan,
    lidar_pose_at,
    load_feature_image,
    load_scan,
    load_scene_json,
    random_scene,
    render_feature_image,
    save_feature_image,
    save_scan,
    save_scene_json,
)
from .training import TrainSample, load_checkpoint, save_checkpoint, train, write_loss_csv

_PCA_SUBSET_STREAM = 0xF17


def _scan_name(scene_idx: int, t: float) -> str:
    return f"scene{scene_idx:03d}_t{round(t * 1000):+06d}.bin"


def _scene_times(cfg: dict):
    suite = cfg["suite"]
    past = list(suite["past_offsets"])
    future = [round(suite["future_dt"] * (i + 1), 9) for i in range(suite["n_future"])]
    return past, future, list(suite["image_times"])


def _simulate_scene(args):
    cfg, out, idx = args
    suite = cfg["suite"]
    scene = random_scene(
        seed=suite["scene_seed_base"] + idx,
        n_boxes=tuple(suite["n_boxes"]),
        speed_max=suite["speed_max"],
        ego_speed=tuple(suite["ego_speed"]),
        yaw_rate_max=suite["yaw_rate_max"],
        region_half=suite["region_half"],
        ground_range=tuple(suite["ground_range"]),
    )
    out = Path(out)
    save_scene_json(scene, out / "scenes" / f"scene{idx:03d}.json")
    past, future, image_times = _scene_times(cfg)
    for t in past + future:
        scan = cast_lidar_scan(scene, lidar_pose_at(scene, t), scene.rig.lidar_pattern, t)
        save_scan(scan, out / "scans" / _scan_name(idx, t))
    for t in image_times:
        img = render_feature_image(scene, camera_pose_at(scene, t), scene.rig.camera, t, suite["d_raw"])
        save_feature_image(img, out / "images" / _scan_name(idx, t))
    return idx


def cmd_simulate(cfg: dict, out_dir, workers: int = 1, force: bool = False) -> int:
    digest = config_digest(cfg)
    n = cfg["suite"]["n_scenes"]
    with staged_output(out_dir, force) as tmp:
        for sub in ("scenes", "scans", "images"):
            (tmp / sub).mkdir()
        jobs = [(cfg, str(tmp), i) for i in range(n)]
        if workers > 1 and n > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
                list(pool.map(_simulate_scene, jobs))
        else:
            for job in jobs:
                _simulate_scene(job)
        write_manifest(tmp, "simulate", digest, {"n_scenes": n})
    print(f"simulate: {n} scenes -> {out_dir}")
    return 0


def _load_dataset_scene(dataset: Path, cfg: dict, idx: int):
    scene = load_scene_json(dataset / "scenes" / f"scene{idx:03d}.json")
    past_t, future_t, image_t = _scene_times(cfg)
    past = [load_scan(dataset / "scans" / _scan_name(idx, t)) for t in past_t]
    future = [load_scan(dataset / "scans" / _scan_name(idx, t)) for t in future_t]
    images = [load_feature_image(dataset / "images" / _scan_name(idx, t)) for t in image_t]
    return scene, past, future, images


def _dataset_scene_indices(dataset: Path):
    return sorted(int(p.stem[5:8]) for p in (dataset / "scenes").glob("scene*.json"))


def _fit_dataset_pca(cfg: dict, dataset: Path, indices):
    pool = []
    for idx in indices:
        _, _, image_t = _scene_times(cfg)
        for t in image_t:
            img = load_feature_image(dataset / "images" / _scan_name(idx, t))
            pool.append(img.features.reshape(-1, img.d_raw))
    vectors = np.concatenate(pool)
    subset = cfg["pca"]["fit_subset"]
    if len(vectors) > subset:
        gen = per_ray_rng(cfg["seed"], 0, _PCA_SUBSET_STREAM)
        keep = np.sort(gen.choice(len(vectors), size=subset, replace=False))
        vectors = vectors[keep]
    return fit_pca(vectors, cfg["pca"]["d"])


def _genqueries_sample(args):
    cfg, dataset, out, idx = args
    dataset, out = Path(dataset), Path(out)
    scene, past, future, images = _load_dataset_scene(dataset, cfg, idx)
    pca = load_pca(out / "pca.bin")
    sampler = sampler_from(cfg, seed=cfg["seed"] + idx)
    aug = augment_from(cfg)
    enc, qs, meta = assemble_sample(past, future, images, scene, sampler, aug, pca=pca)
    save_queryset(qs, out / f"sample{idx:03d}.bin")
    save_encoder_input(enc, out / f"sample{idx:03d}.enc.bin")
    doc = meta.to_dict()
    doc["scene"] = idx
    doc["config_digest"] = config_digest(cfg)
    with open(out / f"sample{idx:03d}.meta.json", "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
    return idx


def cmd_genqueries(cfg: dict, dataset_dir, out_dir, workers: int = 1, force: bool = False) -> int:
    dataset = Path(dataset_dir)
    if not (dataset / "manifest.json").exists():
        raise FileNotFoundError(f"dataset {dataset} is missing manifest.json (run simulate first)")
    digest = config_digest(cfg)
    indices = _dataset_scene_indices(dataset)
    with staged_output(out_dir, force) as tmp:
        pca = _fit_dataset_pca(cfg, dataset, indices)
        save_pca(pca, tmp / "pca.bin")
        jobs = [(cfg, str(dataset), str(tmp), i) for i in indices]
        if workers > 1 and len(jobs) > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
                list(pool.map(_genqueries_sample, jobs))
        else:
            for job in jobs:
                _genqueries_sample(job)
        write_manifest(tmp, "genqueries", digest, {"n_samples": len(indices)})
    print(f"genqueries: {len(indices)} samples -> {out_dir}")
    return 0


def _load_samples(queries_dir: Path, limit: int | None = None):
    samples = []
    paths = sorted(queries_dir.glob("sample*.bin"))
    paths = [p for p in paths if not p.name.endswith(".enc.bin")]
    if limit is not None:
        paths = paths[:limit]
    for p in paths:
        qs = load_queryset(p)
        enc_path = p.parent / (p.stem + ".enc.bin")
        enc = load_encoder_input(enc_path) if enc_path.exists() else None
        samples.append(TrainSample(queries=qs, enc_input=enc))
    return samples


def cmd_train(cfg: dict, queries_dir, out_dir, resume=None, force: bool = False) -> int:
    queries = Path(queries_dir)
    if not (queries / "manifest.json").exists():
        raise FileNotFoundError(f"queries dir {queries} is missing manifest.json (run genqueries first)")
    digest = config_digest(cfg)
    samples = _load_samples(queries)
    field_cfg = field_from(cfg)
    tcfg = train_from(cfg)
    if tcfg.mode == MODE_FIT_PER_SCENE and len(samples) > 1:
        samples = samples[:1]
    init = state = None
    start_step = 0
    if resume is not None:
        init, state, start_step, ckpt_meta = load_checkpoint(resume)
        if ckpt_meta.get("config_digest") not in (None, digest):
            raise ValueError("resume checkpoint was produced by a different config")
    result = train(samples, field_cfg, tcfg, init=init, adam_state=state, start_step=start_step)
    with staged_output(out_dir, force) as tmp:
        save_checkpoint(
            tmp / "checkpoint.bin",
            result.params,
            result.adam_state,
            step=result.last_step,
            meta={"config_digest": digest, "best_loss": result.best_loss},
        )
        save_checkpoint(
            tmp / "checkpoint_best.bin",
            result.best_params,
            step=result.last_step,
            meta={"config_digest": digest, "best_loss": result.best_loss},
        )
        write_loss_csv(result.history, tmp / "loss.csv")
        write_manifest(tmp, "train", digest, {"steps": result.last_step})
    final = result.history[-1][2] if result.history else math.nan
    print(f"train: {result.last_step} steps, final loss {final:.4f}, best {result.best_loss:.4f} -> {out_dir}")
    return 0


def _check_thresholds(report: dict, thresholds: dict) -> list:
    failures = []
    for key, minimum in thresholds.items():
        value = report.get(key)
        if value is None or value < minimum:
            failures.append(f"{key}={value} < {minimum}")
    return failures


def cmd_eval(cfg: dict, checkpoint_path, dataset_dir, out_path, rasters=None, force: bool = False) -> int:
    digest = config_digest(cfg)
    fp, _, _, meta = load_checkpoint(checkpoint_path)
    ckpt_digest = meta.get("config_digest")
    if ckpt_digest is not None and ckpt_digest != digest and not force:
        raise ValueError(
            f"checkpoint config digest {ckpt_digest[:12]}... != current {digest[:12]}... (use --force)"
        )
    dataset = Path(dataset_dir)
    scenes = [load_scene_json(dataset / "scenes" / f"scene{i:03d}.json") for i in _dataset_scene_indices(dataset)]
    if fp.mode == MODE_FIT_PER_SCENE:
        scenes = scenes[:1]
    grid = evalgrid_from(cfg)
    report = eval_4d_occupancy(fp, scenes, grid, raytrace=cfg["eval"]["raytrace"])
    ego = eval_ego_path(fp, scenes, sampler_from(cfg), bev_step=cfg["eval"]["ego_bev_step"])
    report["ap_ego"] = ego["ap_ego"]
    report["ego_base_rate"] = ego["ego_base_rate"]
    report["config_digest"] = digest
    report["n_scenes"] = len(scenes)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_report_json(report, out_path)
    if rasters:
        rdir = Path(rasters)
        rdir.mkdir(parents=True, exist_ok=True)
        for i, raster in enumerate(ego["rasters"]):
            write_pgm(raster, rdir / f"ego_path_scene{i:03d}.pgm")
    failures = _check_thresholds(report, cfg["eval"].get("thresholds", {}))
    line = ", ".join(
        f"{k}={report[k]:.4f}" for k in ("r_at_p70", "r_at_p70_exact", "ap_occ_exact", "soft_iou", "ap_ego") if k in report
    )
    print(f"eval: {line} -> {out_path}")
    if failures:
        print("acceptance thresholds failed: " + "; ".join(failures), file=sys.stderr)
        return 1
    return 0


def cmd_scaling(cfg: dict, queries_dir, eval_dataset_dir, out_dir, force: bool = False) -> int:
    """Train amortized fields on nested sample subsets and evaluate each on
    the held-out suite with the exact oracle (fast path, no ray trace)."""
    digest = config_digest(cfg)
    queries = Path(queries_dir)
    eval_dataset = Path(eval_dataset_dir)
    counts = cfg["scaling"]["sample_counts"]
    seeds = cfg["scaling"]["seeds"]
    all_samples = _load_samples(queries)
    if len(all_samples) < max(counts):
        raise ValueError(f"need >= {max(counts)} pretrain samples, found {len(all_samples)}")
    scenes = [
        load_scene_json(eval_dataset / "scenes" / f"scene{i:03d}.json")
        for i in _dataset_scene_indices(eval_dataset)
    ]
    field_cfg = field_from(cfg)
    grid = evalgrid_from(cfg)
    sampler = sampler_from(cfg)
    rows = []
    for seed in seeds:
        for count in counts:
            tcfg = train_from(
                cfg,
                seed=seed,
                mode=MODE_AMORTIZED,
                total_steps=cfg["scaling"]["total_steps"],
                warmup_steps=cfg["scaling"]["warmup_steps"],
            )
            result = train(all_samples[:count], field_cfg, tcfg)
            report = eval_4d_occupancy(result.params, scenes, grid, raytrace=False)
            ego = eval_ego_path(result.params, scenes, sampler)
            rows.append(
                {
                    "n_samples": count,
                    "seed": seed,
                    "r_at_p70": report["r_at_p70_exact"],
                    "ap_ego": ego["ap_ego"],
                }
            )
            print(
                f"scaling: n={count} seed={seed} r_at_p70_exact={rows[-1]['r_at_p70']:.4f} "
                f"ap_ego={rows[-1]['ap_ego']:.4f}"
            )
    with staged_output(out_dir, force) as tmp:
        with open(tmp / "scaling.csv", "w") as f:
            f.write("n_samples,seed,r_at_p70,ap_ego\n")
            for r in rows:
                f.write(f"{r['n_samples']},{r['seed']},{r['r_at_p70']!r},{r['ap_ego']!r}\n")
        with open(tmp / "scaling.json", "w") as f:
            json.dump({"config_digest": digest, "rows": rows}, f, sort_keys=True, indent=1)
            f.write("\n")
        write_manifest(tmp, "scaling", digest)
    print(f"scaling: {len(rows)} runs -> {out_dir}")
    return 0


def cmd_report(inputs, out_path=None) -> int:
    lines = []
    for path in inputs:
        doc = json.loads(Path(path).read_text())
        lines.append(f"## {path}")
        if "rows" in doc:  # scaling table
            lines.append("| n_samples | seed | R@P70 (exact) | ego AP |")
            lines.append("|---:|---:|---:|---:|")
            for r in doc["rows"]:
                lines.append(f"| {r['n_samples']} | {r['seed']} | {r['r_at_p70']:.4f} | {r['ap_ego']:.4f} |")
        else:
            keys = [
                "r_at_p70",
                "r_at_p70_exact",
                "ap_occ",
                "ap_occ_exact",
                "soft_iou",
                "ap_ego",
                "ego_base_rate",
                "n_probes",
                "n_scenes",
            ]
            lines.append("| metric | value |")
            lines.append("|---|---:|")
            for k in keys:
                if k in doc:
                    v = doc[k]
                    lines.append(f"| {k} | {v:.4f} |" if isinstance(v, float) else f"| {k} | {v} |")
            pc = doc.get("probe_counts")
            if pc:
                lines.append(f"| probes free/occ/unknown | {pc['free']}/{pc['occupied']}/{pc['unknown']} |")
        lines.append("")
    text = "\n".join(lines)
    print(text)
    if out_path:
        Path(out_path).write_text(text + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="occ4d",
        description="Desk-scale 4D occupancy pre-training pipeline: simulate scenes, "
        "generate supervision queries, train the field, evaluate, and run the scaling study.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=env_default("config"), help="run config JSON (defaults apply)")
        p.add_argument("--workers", type=int, default=1, help="worker processes (1 = reproducibility mode)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs / skip digest check")

    p = sub.add_parser("simulate", help="generate a scene suite with scans and feature images")
    add_common(p)
    p.add_argument("--out", default=env_default("dataset"), required=env_default("dataset") is None)

    p = sub.add_parser("genqueries", help="produce query sets and the PCA model from a dataset")
    add_common(p)
    p.add_argument("--dataset", default=env_default("dataset"), required=env_default("dataset") is None)
    p.add_argument("--out", default=env_default("queries"), required=env_default("queries") is None)

    p = sub.add_parser("train", help="train the field on generated query sets")
    add_common(p)
    p.add_argument("--queries", default=env_default("queries"), required=env_default("queries") is None)
    p.add_argument("--out", default=env_default("run"), required=env_default("run") is None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a scene suite")
    add_common(p)
    p.add_argument("--checkpoint", default=env_default("checkpoint"), required=env_default("checkpoint") is None)
    p.add_argument("--dataset", default=env_default("dataset"), required=env_default("dataset") is None)
    p.add_argument("--out", default=env_default("report"), required=env_default("report") is None)
    p.add_argument("--rasters", default=None, help="directory for ego-path PGM rasters")

    p = sub.add_parser("scaling", help="train at growing sample counts and tabulate held-out metrics")
    add_common(p)
    p.add_argument("--queries", default=env_default("queries"), required=env_default("queries") is None)
    p.add_argument("--eval-dataset", default=env_default("eval_dataset"), required=env_default("eval_dataset") is None)
    p.add_argument("--out", default=env_default("scaling"), required=env_default("scaling") is None)

    p = sub.add_parser("report", help="render eval/scaling JSON artifacts as a markdown table")
    p.add_argument("inputs", nargs="+", help="report.json / scaling.json paths")
    p.add_argument("--out", default=None, help="write the table to this file as well")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.inputs, args.out)
        cfg = load_config(args.config)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.out, workers=args.workers, force=args.force)
        if args.command == "genqueries":
            return cmd_genqueries(cfg, args.dataset, args.out, workers=args.workers, force=args.force)
        if args.command == "train":
            return cmd_train(cfg, args.queries, args.out, resume=args.resume, force=args.force)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.dataset, args.out, rasters=args.rasters, force=args.force)
        if args.command == "scaling":
            return cmd_scaling(cfg, args.queries, args.eval_dataset, args.out, force=args.force)
        parser.error(f"unknown command {args.command}")
    except (ValueError, FileNotFoundError, FileExistsError) as e:
        print(f"occ4d {args.command}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
