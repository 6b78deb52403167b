"""Normalization, patch sampling, training, stitched inference and the two-arm experiment."""

from __future__ import annotations

import csv
import io as _io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from . import io
from . import metrics as mt
from .errors import ConfigError, ShapeError, TrainingFault
from .losses import LossWeights, gdl_loss, l1_loss, lip_loss
from .network import UNetConfig, UNetParams, forward, init_params, params_from_entries, params_to_entries
from .phantom import SamplePair
from .projector import make_angle_set

log = logging.getLogger(__name__)

ARMS = ("im", "lip")
LOSS_COLUMNS = ("step", "epoch", "l1", "gdl", "lip", "total", "lr")


@dataclass(frozen=True)
class NormalizationConfig:
    sigma: float = 5.0
    mu_scale: float = 0.15

    def __post_init__(self):
        if not (self.sigma > 0 and self.mu_scale > 0):
            raise ConfigError("sigma and mu_scale must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    patches_per_epoch: int = 2000
    patch_extent: int = 32
    batch_size: int = 16
    learning_rate: float = 1e-3
    lr_decay: float = 0.99
    lambda1: float = 1.0
    lambda2: float = 0.02
    angle_count: int = 4
    seed: int = 0
    arm: str = "lip"
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("epochs", "patches_per_epoch", "patch_extent", "batch_size", "angle_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.arm not in ARMS:
            raise ConfigError(f"arm must be one of {ARMS}, got {self.arm!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        LossWeights(self.lambda1, self.lambda2)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2)

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------
# normalization
# ----------------------------------------------------------------------

def normalize(pair: SamplePair, cfg: NormalizationConfig = NormalizationConfig()):
    """Return (``[2, *spatial]`` network input, ``[1, *spatial]`` normalized truth)."""
    lam = np.tanh(np.asarray(pair.lambda_input, dtype=np.float64) / cfg.sigma)
    mu = np.asarray(pair.mu_input, dtype=np.float64) / cfg.mu_scale
    truth = np.asarray(pair.mu_truth, dtype=np.float64) / cfg.mu_scale
    return np.stack([lam, mu]), truth[None]


def denormalize(pred, cfg: NormalizationConfig = NormalizationConfig()) -> np.ndarray:
    """Back to cm^-1, clamped at zero."""
    pred = pred.data if isinstance(pred, ad.Tensor) else np.asarray(pred)
    return np.maximum(pred.astype(np.float64) * cfg.mu_scale, 0.0)


# ----------------------------------------------------------------------
# patches
# ----------------------------------------------------------------------

MAX_REJECTIONS = 100


def _extent(extent, shape) -> tuple[int, ...]:
    ext = (extent,) * len(shape) if isinstance(extent, int) else tuple(extent)
    if len(ext) != len(shape):
        raise ShapeError(f"patch extent {ext} does not match volume rank {len(shape)}")
    if any(e > n for e, n in zip(ext, shape)):
        raise ShapeError(f"patch extent {ext} exceeds volume {shape}")
    return ext


def sample_patches(volumes: Sequence[tuple[np.ndarray, np.ndarray]], count: int, extent,
                   seed) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``count`` random (input, truth) patches.

    ``volumes`` holds normalized (``[C, *spatial]``, ``[1, *spatial]``) pairs.
    A patch whose truth is all air is redrawn, at most ``MAX_REJECTIONS``
    times; the last draw is then accepted as is.
    """
    if not volumes:
        raise ConfigError("no volumes to sample from")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    spatial = [v[1].shape[1:] for v in volumes]
    exts = [_extent(extent, s) for s in spatial]
    for _ in range(count):
        for attempt in range(MAX_REJECTIONS + 1):
            k = int(rng.integers(len(volumes)))
            corner = [int(rng.integers(n - e + 1)) for n, e in zip(spatial[k], exts[k])]
            sl = (slice(None),) + tuple(slice(c, c + e) for c, e in zip(corner, exts[k]))
            truth = volumes[k][1][sl]
            if np.any(truth != 0) or attempt == MAX_REJECTIONS:
                break
        yield volumes[k][0][sl], truth


# ----------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, names: Sequence[str] | None = None) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"#{i}"
            raise TrainingFault(f"non-finite gradient in parameter {label}")
        if g.shape != params[i].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[i].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    return cfg.learning_rate * cfg.lr_decay ** epoch


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------

@dataclass
class TrainResult:
    params: UNetParams
    rows: list[dict[str, float]] = field(default_factory=list)

    def loss_csv(self) -> str:
        return loss_rows_to_csv(self.rows)


def loss_rows_to_csv(rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_COLUMNS)
    for r in rows:
        w.writerow([r["step"], r["epoch"]] + [mt.format_value(r[c]) for c in LOSS_COLUMNS[2:]])
    return buf.getvalue()


def checkpoint_meta(train_cfg: TrainConfig, epoch: int) -> dict[str, float]:
    return {"arm": float(ARMS.index(train_cfg.arm)), "epoch": float(epoch),
            "lambda1": train_cfg.lambda1, "lambda2": train_cfg.lambda2, "train_seed": float(train_cfg.seed)}


def save_checkpoint(path, params: UNetParams, meta: dict[str, float] | None = None) -> None:
    io.write_tensors(path, params_to_entries(params, meta))


def load_checkpoint(path) -> tuple[UNetParams, dict[str, float]]:
    return params_from_entries(io.read_tensors(path))


def training_step(params: UNetParams, state: AdamState, x: np.ndarray, y: np.ndarray,
                  cfg: TrainConfig, lr: float, dropout_rng, angles=None) -> dict[str, float]:
    """Forward, loss, backward and Adam update on one batch; returns the loss terms."""
    angles = make_angle_set(cfg.angle_count) if angles is None else angles
    rank = params.config.spatial_rank
    out = forward(params, ad.Tensor(x), "train", dropout_rng)
    l1 = l1_loss(out, y)
    gdl = gdl_loss(out, y, rank)
    im = l1 + gdl * cfg.lambda1
    if cfg.arm == "lip":
        lip = lip_loss(out, y, angles)
        total = im + lip * cfg.lambda2
    else:
        with ad.no_grad():
            lip = lip_loss(out.detach(), y, angles)
        total = im
    terms = {"l1": l1.item(), "gdl": gdl.item(), "lip": lip.item(), "total": total.item()}
    if not math.isfinite(terms["total"]):
        raise TrainingFault(f"loss became non-finite: {terms}")
    tensors = params.parameters()
    grads = ad.backward(total, tensors)
    adam_step([t.data for t in tensors], grads, state, lr, list(params.tensors))
    return terms


def train(dataset: Sequence[SamplePair], net_cfg: UNetConfig, train_cfg: TrainConfig,
          norm_cfg: NormalizationConfig = NormalizationConfig(), out_dir=None,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Train one arm.  With ``out_dir`` a checkpoint is written every epoch plus a loss CSV.

    On a non-finite loss or gradient a TrainingFault is raised whose
    ``last_good`` holds the parameters from before the failing step.
    """
    if not dataset:
        raise ConfigError("empty training set")
    dtype = np.dtype(train_cfg.dtype)
    volumes = [tuple(a.astype(dtype) for a in normalize(p, norm_cfg)) for p in dataset]
    params = init_params(net_cfg, train_cfg.seed, dtype)
    state = AdamState.zeros_like([t.data for t in params.parameters()])
    patch_rng = np.random.default_rng([train_cfg.seed, 1])
    dropout_rng = np.random.default_rng([train_cfg.seed, 2])
    angles = make_angle_set(train_cfg.angle_count)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(params)
    step = 0
    for epoch in range(train_cfg.epochs):
        lr = learning_rate(train_cfg, epoch)
        patches = sample_patches(volumes, train_cfg.patches_per_epoch, train_cfg.patch_extent, patch_rng)
        while True:
            batch = [p for _, p in zip(range(train_cfg.batch_size), patches)]
            if not batch:
                break
            x = np.stack([b[0] for b in batch])
            y = np.stack([b[1] for b in batch])
            snapshot = params.copy()
            try:
                terms = training_step(params, state, x, y, train_cfg, lr, dropout_rng, angles)
            except TrainingFault as exc:
                if out is not None:
                    save_checkpoint(out / "checkpoint.lipt", snapshot, checkpoint_meta(train_cfg, epoch))
                raise TrainingFault(f"step {step}: {exc}", last_good=snapshot) from exc
            row = {"step": step, "epoch": epoch, **terms, "lr": lr}
            result.rows.append(row)
            if progress is not None:
                progress(row)
            step += 1
        log.info("epoch %d lr %.3g last total %.5g", epoch, lr, result.rows[-1]["total"])
        if out is not None:
            save_checkpoint(out / "checkpoint.lipt", params, checkpoint_meta(train_cfg, epoch + 1))
            (out / "loss.csv").write_text(result.loss_csv())
    return result


# ----------------------------------------------------------------------
# stitched inference
# ----------------------------------------------------------------------

def _positions(n: int, patch: int, stride: int) -> list[int]:
    pos = list(range(0, n - patch + 1, stride))
    if pos[-1] + patch < n:
        pos.append(n - patch)
    return pos


def stitch(model: Callable[[np.ndarray], np.ndarray], inputs: np.ndarray, patch, stride) -> np.ndarray:
    """Tile ``inputs[C, *spatial]`` and average overlapping model outputs with equal weights."""
    spatial = inputs.shape[1:]
    ext = _extent(patch, spatial)
    strides = (stride,) * len(spatial) if isinstance(stride, int) else tuple(stride)
    if len(strides) != len(spatial) or any(s < 1 or s > e for s, e in zip(strides, ext)):
        raise ConfigError(f"stride {strides} must be in [1, patch extent] per axis")
    acc = None
    count = np.zeros(spatial)
    grids = [_positions(n, e, s) for n, e, s in zip(spatial, ext, strides)]
    for corner in np.ndindex(*[len(g) for g in grids]):
        start = [g[i] for g, i in zip(grids, corner)]
        sl = tuple(slice(s, s + e) for s, e in zip(start, ext))
        y = np.asarray(model(inputs[(slice(None),) + sl]), dtype=np.float64)
        if acc is None:
            acc = np.zeros((y.shape[0],) + tuple(spatial))
        acc[(slice(None),) + sl] += y
        count[sl] += 1
    return acc / count


def model_from_params(params: UNetParams) -> Callable[[np.ndarray], np.ndarray]:
    dtype = next(iter(params.tensors.values())).dtype

    def run(patch: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return forward(params, ad.Tensor(patch.astype(dtype)), "eval").data
    return run


def infer_stitched(model, pair, patch=None, stride=None,
                   norm_cfg: NormalizationConfig = NormalizationConfig()) -> np.ndarray:
    """Predict mu (cm^-1) for a whole volume; ``model`` is UNetParams or a callable."""
    if isinstance(model, UNetParams):
        model = model_from_params(model)
    inputs = normalize(pair, norm_cfg)[0] if isinstance(pair, SamplePair) else np.asarray(pair)
    spatial = inputs.shape[1:]
    patch = tuple(spatial) if patch is None else patch
    stride = patch if stride is None else stride
    pred = stitch(model, inputs, patch, stride)
    return denormalize(pred[0], norm_cfg)


# ----------------------------------------------------------------------
# experiment
# ----------------------------------------------------------------------

@dataclass
class ArmResult:
    arm: str
    seed: int
    report: mt.MetricsReport
    train: TrainResult


def evaluate_params(params: UNetParams, test: Sequence[SamplePair], angle_count: int = 4,
                    norm_cfg: NormalizationConfig = NormalizationConfig(), patch=None,
                    stride=None) -> mt.MetricsReport:
    model = model_from_params(params)
    preds = [infer_stitched(model, p, patch, stride, norm_cfg) for p in test]
    truths = [p.mu_truth for p in test]
    return mt.evaluate_report(preds, truths, make_angle_set(angle_count), test[0].voxel_width,
                              ids=[p.seed for p in test])


def run_arms(train_set: Sequence[SamplePair], test_set: Sequence[SamplePair], net_cfg: UNetConfig,
             train_cfg: TrainConfig, seed: int, eval_angles: int = 4,
             norm_cfg: NormalizationConfig = NormalizationConfig()) -> dict[str, ArmResult]:
    """Train the IM and IM+LIP arms from one seed and evaluate both on ``test_set``."""
    out = {}
    for arm in ARMS:
        cfg = replace(train_cfg, arm=arm, seed=seed)
        res = train(train_set, net_cfg, cfg, norm_cfg)
        report = evaluate_params(res.params, test_set, eval_angles, norm_cfg)
        log.info("seed %d arm %s: linmae %.5f nmae %.5f", seed, arm,
                 report.mean["linmae"], report.mean["nmae"])
        out[arm] = ArmResult(arm, seed, report, res)
    return out


def relative_reduction(im: float, lip: float) -> float:
    """Fractional error reduction of the LIP arm relative to the IM arm."""
    return (im - lip) / im


def summarize(results: Sequence[dict[str, ArmResult]]) -> dict[str, float]:
    """Per-seed LINMAE reductions and NMAE increases of the LIP arm.

    ``pooled_nmae_increase`` compares the NMAE of both arms averaged over seeds.
    """
    lin = [relative_reduction(r["im"].report.mean["linmae"], r["lip"].report.mean["linmae"]) for r in results]
    nm = [r["lip"].report.mean["nmae"] / r["im"].report.mean["nmae"] - 1 for r in results]
    return {
        "median_linmae_reduction": float(np.median(lin)),
        "median_nmae_increase": float(np.median(nm)),
        "mean_nmae_increase": float(np.mean(nm)),
        "pooled_nmae_increase": float(np.mean([r["lip"].report.mean["nmae"] for r in results])
                                      / np.mean([r["im"].report.mean["nmae"] for r in results]) - 1),
        "linmae_reductions": lin,
        "nmae_increases": nm,
    }
