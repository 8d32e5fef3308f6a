"""Optimization recipe, the training loop and evaluation."""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data.dataset import PoseDataset
from .data.transforms import (DatasetStats, fit_pixel_stats, mirror, mirror_keypoints, normalize_basic,
                              normalize_pixel)
from .models import Model, save_checkpoint
from .numerics import ShapeError, Tensor
from .protocols import MetricReport, occurrence

LOG_FIELDS = ("epoch", "lr", "train_loss", "wall_seconds")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    decay: float = 0.95
    epochs: int = 80
    batch_size: int = 1024
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bias_correction: bool = True
    seed: int = 0
    flip: bool = True
    precision: str = "float32"
    normalization: str = "basic"

    def __post_init__(self):
        errs = []
        if not self.lr > 0:
            errs.append(f"lr must be > 0, got {self.lr}")
        if not 0 < self.decay <= 1:
            errs.append(f"decay must lie in (0, 1], got {self.decay}")
        if self.batch_size < 2:
            errs.append(f"batch_size must be >= 2 for batch-norm, got {self.batch_size}")
        if self.epochs < 0:
            errs.append(f"epochs must be >= 0, got {self.epochs}")
        if self.precision not in ("float32", "float64"):
            errs.append(f"precision must be float32 or float64, got {self.precision!r}")
        if self.normalization not in ("basic", "pixel"):
            errs.append(f"normalization must be basic or pixel, got {self.normalization!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            errs.append("need 0 <= beta1, beta2 < 1 and eps > 0")
        if errs:
            raise ValueError("; ".join(errs))

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at_epoch(epoch: int, lr0: float = 1e-3, decay: float = 0.95) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return lr0 * decay ** epoch


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute difference over every coordinate of the batch."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    return nx.reduce_mean(nx.absolute(nx.sub(pred, target)))


class AMSGrad:
    """Adam with a running elementwise maximum of the second moment."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 bias_correction: bool = True):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.bias_correction = bias_correction
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]
        self.vhat = [np.zeros_like(p.data) for _, p in self.params]

    def step(self, lr: float) -> None:
        for name, p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {name}; step aborted")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t if self.bias_correction else 1.0
        c2 = 1.0 - b2 ** self.t if self.bias_correction else 1.0
        for (_, p), m, v, vhat in zip(self.params, self.m, self.v, self.vhat):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            np.maximum(vhat, v, out=vhat)
            p.data -= (lr * (m / c1) / (np.sqrt(vhat / c2) + self.eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# inputs and targets
# ---------------------------------------------------------------------------

def fit_normalization(train_set: PoseDataset, kind: str) -> dict:
    if kind == "basic":
        return {"kind": "basic"}
    if kind == "pixel":
        return {"kind": "pixel", **fit_pixel_stats(train_set.keypoints_2d).to_dict()}
    raise ValueError(f"unknown normalization {kind!r}")


def normalize_inputs(keypoints_2d, image_size, normalization: dict) -> np.ndarray:
    """Normalized network inputs [M, 2N] from pixel keypoints [M, N, 2]."""
    kp = np.asarray(keypoints_2d, dtype=np.float64)
    if normalization["kind"] == "basic":
        z = normalize_basic(kp, image_size[:, 0], image_size[:, 1])
    else:
        z = normalize_pixel(kp, DatasetStats.from_dict(normalization))
    return z.reshape(len(kp), -1)


def prepare(dataset: PoseDataset, normalization: dict, flipped: bool = False):
    """Inputs [M, 2N] and mm targets [M, 3N], optionally for the mirrored images."""
    kp, pose = dataset.keypoints_2d, dataset.pose_3d
    if flipped:
        kp = mirror_keypoints(kp, dataset.image_size[:, 0], dataset.skeleton)
        pose = mirror(pose, dataset.skeleton)
    return normalize_inputs(kp, dataset.image_size, normalization), pose.reshape(len(pose), -1)


def window_index(dataset: PoseDataset, frames: int) -> np.ndarray:
    """[M, frames] row indices of the window centred on each frame, clamped at clip ends."""
    half = (frames - 1) // 2
    out = np.empty((len(dataset), frames), dtype=np.intp)
    offsets = np.arange(-half, half + 1)
    for clip in dataset.clips():
        pos = np.clip(np.arange(len(clip))[:, None] + offsets, 0, len(clip) - 1)
        out[clip.indices] = clip.indices[pos]
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    log: list[dict]


def write_log(path, log: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for row in log:
            w.writerow([row["epoch"], repr(row["lr"]), repr(row["train_loss"]), f"{row['wall_seconds']:.3f}"])


def train(model: Model, train_set: PoseDataset, config: TrainConfig, out_dir=None,
          normalization: dict | None = None, progress=None) -> TrainResult:
    """Train in place with the configured recipe; returns the model and per-epoch log.

    When ``out_dir`` is given a checkpoint and the log are rewritten there after
    every epoch.
    """
    if len(train_set) < 2:
        raise ValueError("training needs at least two samples")
    if train_set.skeleton.n_joints != model.n_joints:
        raise ShapeError(f"model expects {model.n_joints} joints, dataset has {train_set.skeleton.n_joints}")
    dtype = np.dtype(config.precision)
    model.astype(dtype)
    norm = normalization or fit_normalization(train_set, config.normalization)
    model.normalization = norm
    X, Y = prepare(train_set, norm)
    Xf, Yf = prepare(train_set, norm, flipped=True) if config.flip else (None, None)
    X, Y = X.astype(dtype), Y.astype(dtype)
    if config.flip:
        Xf, Yf = Xf.astype(dtype), Yf.astype(dtype)
    windows = window_index(train_set, model.receptive_frames) if model.config.temporal else None

    rng = np.random.default_rng(config.seed)
    opt = AMSGrad(model.named_parameters(), config.beta1, config.beta2, config.eps, config.bias_correction)
    out_dir = Path(out_dir) if out_dir is not None else None
    log: list[dict] = []
    M, B = len(X), config.batch_size
    start = time.perf_counter()
    for epoch in range(config.epochs):
        lr = lr_at_epoch(epoch, config.lr, config.decay)
        perm = rng.permutation(M)
        flips = rng.random(M) < 0.5 if config.flip else None
        total, count = 0.0, 0
        for b, lo in enumerate(range(0, M, B)):
            idx = perm[lo:lo + B]
            if len(idx) < 2:
                break
            if windows is not None:
                rows = windows[idx]
                xb = X[rows]
                if flips is not None:
                    fl = flips[idx]
                    xb[fl] = Xf[rows[fl]]
            else:
                xb = X[idx]
                if flips is not None:
                    fl = flips[idx]
                    xb[fl] = Xf[idx[fl]]
            yb = Y[idx]
            if flips is not None:
                yb[fl] = Yf[idx[fl]]
            model.zero_grad()
            loss = l1_loss(model(Tensor(xb), training=True), Tensor(yb))
            value = float(loss.data)
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            opt.step(lr)
            total += value * len(idx)
            count += len(idx)
        row = {"epoch": epoch, "lr": lr, "train_loss": total / max(count, 1),
               "wall_seconds": time.perf_counter() - start}
        log.append(row)
        if progress is not None:
            progress(row)
        if out_dir is not None:
            save_checkpoint(out_dir / "model.ckpt", model, extra={"epoch": epoch, "train": config.to_dict()})
            write_log(out_dir / "train_log.csv", log)
    return TrainResult(model, log)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict(model: Model, dataset: PoseDataset, flipped: bool = False, chunk: int = 4096) -> np.ndarray:
    """Root-relative predictions [M, N, 3] in mm (un-mirrored when ``flipped``)."""
    if model.normalization is None:
        raise ValueError("model carries no normalization record; train it or load a checkpoint")
    X, _ = prepare(dataset, model.normalization, flipped=flipped)
    X = X.astype(model.dtype)
    N = model.n_joints
    if model.config.temporal is not None:
        R = model.receptive_frames
        windows = window_index(dataset, R)
        out = np.concatenate([model.predict(X[windows[a:a + chunk // R + 1]])
                              for a in range(0, len(X), chunk // R + 1)])
    else:
        out = np.concatenate([model.predict(X[a:a + chunk]) for a in range(0, len(X), chunk)])
    out = out.astype(np.float64).reshape(len(X), N, 3)
    return mirror(out, dataset.skeleton) if flipped else out


def evaluate(model: Model, test_set: PoseDataset, flip_test: bool = False,
             normalization: str | None = None, sigma=None, pa_scale: bool = True):
    """Metric report over the test set, with per-action and rareness-decile slices.

    ``normalization`` names the scheme the caller expects; it must match the
    one the model was trained with.
    """
    if len(test_set) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    if model.normalization is None:
        raise ValueError("model carries no normalization record")
    trained = model.normalization.get("kind")
    if normalization is not None and normalization != trained:
        raise ValueError(f"normalization mismatch: model was trained with {trained!r}, "
                         f"evaluation requested {normalization!r}")
    pred = predict(model, test_set)
    if flip_test:
        pred = 0.5 * (pred + predict(model, test_set, flipped=True))
    occ = None
    if sigma is not None:
        occ = occurrence(test_set.pose_3d, test_set.pose_3d, sigma)
    report = MetricReport.from_predictions(pred, test_set.pose_3d, test_set.action, occ, pa_scale)
    return report, pred
