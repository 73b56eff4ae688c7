"""Training loop: Adam with warmup + cosine decay, checkpoints, loss CSV.

Batch composition at step s is a pure function of (seed, s) through
counter-based streams, so resuming from a checkpoint reproduces the
uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass

import numpy as np

from .field import (
    Batch,
    FieldConfig,
    FieldParams,
    MODE_AMORTIZED,
    MODE_FIT_PER_SCENE,
    init_params,
    loss_and_grads,
)
from .geom import per_ray_rng
from .queries import EncoderInput, OCCUPANCY_TAGS, QuerySet, TAG_EGO_NEG, TAG_EGO_POS, TAG_FEATURE

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_STREAM_SAMPLE_SEL = 0x5E1
_STREAM_BATCH_IDX = 0xB1D

_CKPT_MAGIC = b"OC4DCKPT"
_CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        self.step = step
        super().__init__(f"non-finite loss {value} at step {step}")


@dataclass(frozen=True)
class TrainConfig:
    """Loss weights and schedule. lambda defaults and the 4e-4 peak learning
    rate follow the published regime; step counts are desk scale."""

    lambda_occ: float = 1.0
    lambda_dino: float = 0.5
    lambda_ego: float = 0.1
    lr_max: float = 4e-4
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_occ: int = 512
    batch_feat: int = 128
    batch_ego: int = 64
    seed: int = 0
    mode: str = MODE_AMORTIZED
    freeze_encoder: bool = False
    per_term_average: bool = True

    def __post_init__(self):
        if min(self.lambda_occ, self.lambda_dino, self.lambda_ego) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not (0 <= self.warmup_steps <= self.total_steps):
            raise ValueError("warmup_steps must lie in [0, total_steps]")

    @property
    def weights(self) -> tuple:
        return (self.lambda_occ, self.lambda_dino, self.lambda_ego)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_max at step == warmup_steps, then cosine to 0 at
    the final step. ``step`` is 1-based."""
    if step < 1:
        raise ValueError("step is 1-based")
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.lr_max * step / cfg.warmup_steps
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    progress = (step - cfg.warmup_steps) / span
    return cfg.lr_max * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


@dataclass
class AdamState:
    m: dict
    v: dict

    @staticmethod
    def zeros(params: dict) -> "AdamState":
        return AdamState(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState, step_index: int, lr: float) -> None:
    """Standard bias-corrected Adam update, in place. step_index is 1-based."""
    bc1 = 1.0 - ADAM_BETA1 ** step_index
    bc2 = 1.0 - ADAM_BETA2 ** step_index
    for k, p in params.items():
        g = grads[k]
        state.m[k] = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * g
        state.v[k] = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * (g * g)
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        p -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class TrainSample:
    queries: QuerySet
    enc_input: EncoderInput | None = None


@dataclass
class TrainResult:
    params: FieldParams
    best_params: FieldParams
    best_loss: float
    history: list            # rows (step, lr, total, occ, dino, ego)
    adam_state: "AdamState"
    last_step: int


def _subset_indices(qs: QuerySet):
    return {
        "occ": qs.indices_for(*OCCUPANCY_TAGS),
        "feat": qs.indices_for(TAG_FEATURE),
        "ego": qs.indices_for(TAG_EGO_POS, TAG_EGO_NEG),
    }


def _step_gen(seed: int, stream: int, step: int) -> np.random.Generator:
    return per_ray_rng(seed, step, stream)


def draw_batch(sample: TrainSample, subsets: dict, cfg: TrainConfig, step: int) -> Batch:
    """Batch composition for one step: with-replacement draws per query kind,
    from a stream keyed only by (seed, step)."""
    gen = _step_gen(cfg.seed, _STREAM_BATCH_IDX, step)
    picked = []
    for kind, want in (("occ", cfg.batch_occ), ("feat", cfg.batch_feat), ("ego", cfg.batch_ego)):
        pool = subsets[kind]
        if want > 0 and len(pool) > 0:
            picked.append(pool[gen.integers(0, len(pool), size=want)])
    if not picked:
        raise ValueError("batch composition selected no queries")
    return Batch.from_queryset(sample.queries, np.concatenate(picked))


def train(
    samples: list,
    field_cfg: FieldConfig,
    cfg: TrainConfig,
    init: FieldParams | None = None,
    adam_state: AdamState | None = None,
    start_step: int = 0,
    stop_step: int | None = None,
    on_step=None,
) -> TrainResult:
    """Optimize the field on pre-generated samples.

    fit_per_scene mode requires exactly one sample and learns the grid
    directly; amortized mode re-encodes the selected sample each step.
    ``start_step``/``stop_step`` resume and interrupt a run without changing
    the schedule, so a resumed run reproduces the uninterrupted one exactly.
    Non-finite losses abort with the failing step index.
    """
    if not samples:
        raise ValueError("dataset must contain at least one sample")
    if cfg.mode == MODE_FIT_PER_SCENE and len(samples) != 1:
        raise ValueError("fit_per_scene expects exactly one sample")
    if cfg.mode == MODE_AMORTIZED and any(s.enc_input is None for s in samples):
        raise ValueError("amortized mode needs encoder inputs")

    fp = init.copy() if init is not None else init_params(field_cfg, cfg.seed, cfg.mode)
    if fp.mode != cfg.mode:
        raise ValueError(f"parameter mode {fp.mode!r} != train mode {cfg.mode!r}")
    state = adam_state if adam_state is not None else AdamState.zeros(fp.params)
    subsets = [_subset_indices(s.queries) for s in samples]

    history = []
    best_loss = math.inf
    best_params = fp.copy()
    last = cfg.total_steps if stop_step is None else min(stop_step, cfg.total_steps)
    for step in range(start_step + 1, last + 1):
        sel = int(_step_gen(cfg.seed, _STREAM_SAMPLE_SEL, step).integers(0, len(samples)))
        batch = draw_batch(samples[sel], subsets[sel], cfg, step)
        terms, grads = loss_and_grads(
            fp,
            batch,
            enc_input=samples[sel].enc_input if cfg.mode == MODE_AMORTIZED else None,
            weights=cfg.weights,
            per_term_average=cfg.per_term_average,
            freeze_encoder=cfg.freeze_encoder,
        )
        if not math.isfinite(terms.total):
            raise TrainingDiverged(step, terms.total)
        lr = lr_schedule(step, cfg)
        adam_step(fp.params, grads, state, step, lr)
        history.append((step, lr, terms.total, terms.occ, terms.feat, terms.ego))
        if terms.total < best_loss:
            best_loss = terms.total
            best_params = fp.copy()
        if on_step is not None:
            on_step(step, terms)
    return TrainResult(fp, best_params, best_loss, history, state, last)


# ---------------------------------------------------------------------------
# artifacts


def write_loss_csv(history, path, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as f:
        w = csv.writer(f)
        if not append:
            w.writerow(["step", "lr", "total", "occ", "dino", "ego"])
        for row in history:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def _write_section(f, name: str, arr: np.ndarray) -> None:
    enc = name.encode()
    f.write(struct.pack("<H", len(enc)))
    f.write(enc)
    arr = np.ascontiguousarray(arr, dtype="<f8")
    f.write(struct.pack("<B", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


def save_checkpoint(path, fp: FieldParams, state: AdamState | None = None, step: int = 0, meta: dict | None = None) -> None:
    """Versioned binary checkpoint: JSON metadata followed by named f64
    row-major tensor sections (parameters, then optional Adam moments)."""
    import json

    cfg = fp.config
    doc = {
        "mode": fp.mode,
        "step": step,
        "field_config": {
            "x_range": list(cfg.x_range),
            "y_range": list(cfg.y_range),
            "cell": cfg.cell,
            "channels": cfg.channels,
            "z_range": list(cfg.z_range),
            "t_max": cfg.t_max,
            "n_freqs": cfg.n_freqs,
            "head_hidden": cfg.head_hidden,
            "d_feat": cfg.d_feat,
            "k_past": cfg.k_past,
            "leaky_slope": cfg.leaky_slope,
        },
        "meta": meta or {},
    }
    payload = json.dumps(doc, sort_keys=True).encode()
    sections = list(fp.params.items())
    if state is not None:
        sections += [(f"adam.m.{k}", v) for k, v in state.m.items()]
        sections += [(f"adam.v.{k}", v) for k, v in state.v.items()]
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(payload)))
        f.write(payload)
        f.write(struct.pack("<I", len(sections)))
        for name, arr in sections:
            _write_section(f, name, arr)


def load_checkpoint(path):
    """Returns (FieldParams, AdamState | None, step, meta dict)."""
    import json

    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", raw, 8)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    doc = json.loads(raw[off : off + meta_len].decode())
    off += meta_len
    (n_sections,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = {}
    for _ in range(n_sections):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += arr.nbytes
        tensors[name] = arr
    fc = doc["field_config"]
    cfg = FieldConfig(
        x_range=tuple(fc["x_range"]),
        y_range=tuple(fc["y_range"]),
        cell=fc["cell"],
        channels=fc["channels"],
        z_range=tuple(fc["z_range"]),
        t_max=fc["t_max"],
        n_freqs=fc["n_freqs"],
        head_hidden=fc["head_hidden"],
        d_feat=fc["d_feat"],
        k_past=fc["k_past"],
        leaky_slope=fc["leaky_slope"],
    )
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    fp = FieldParams(cfg, doc["mode"], params)
    state = None
    moments_m = {k[len("adam.m.") :]: t for k, t in tensors.items() if k.startswith("adam.m.")}
    moments_v = {k[len("adam.v.") :]: t for k, t in tensors.items() if k.startswith("adam.v.")}
    if moments_m:
        state = AdamState(moments_m, moments_v)
    return fp, state, int(doc["step"]), doc.get("meta", {})
