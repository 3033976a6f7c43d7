"""Patch datasets, per-channel normalization, the MAE + L2 objective, Adam and the fit loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import Model, parse_kv

log = logging.getLogger(__name__)

PATCH = 15
CENTER = PATCH // 2
LOG_FIELDS = ("iteration", "split", "loss", "mae", "mbe")


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-5
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    iterations: int = 500_000
    epoch_sample: int = 64_000
    val_fraction: float = 0.2
    val_interval: int = 1000
    val_max: int = 4096
    log_interval: int = 100
    init_head_bias: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        for name in ("batch_size", "learning_rate", "beta1", "beta2", "adam_eps", "epoch_sample",
                     "val_interval", "log_interval", "val_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.iterations < 0:
            raise ValueError("weight_decay and iterations must be non-negative")

    @classmethod
    def from_text(cls, text: str, **overrides) -> TrainConfig:
        kv = parse_kv(text)
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in kv:
                raw = kv.pop(f.name)
                if f.type in ("bool", bool):
                    kwargs[f.name] = raw.lower() in ("1", "true", "yes")
                elif f.type in ("int", int):
                    kwargs[f.name] = int(raw)
                else:
                    kwargs[f.name] = float(raw)
        if kv:
            raise ValueError(f"unknown training config keys: {sorted(kv)}")
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))


@dataclass
class PatchSample:
    x: np.ndarray          # (C, 15, 15) band values (+ DTM as the last channel)
    y_mean: float
    y_max: float
    location: int
    year: int


@dataclass
class PatchSet:
    """Stacked patches: ``x`` is ``(M, C, 15, 15)``, ``y`` is ``(M, 2)``."""

    x: np.ndarray
    y: np.ndarray
    location: np.ndarray
    year: np.ndarray

    def __len__(self):
        return len(self.y)

    @classmethod
    def from_samples(cls, samples: list[PatchSample]) -> PatchSet:
        if not samples:
            raise ValueError("no patch samples")
        return cls(np.stack([s.x for s in samples]).astype(np.float32),
                   np.array([[s.y_mean, s.y_max] for s in samples], dtype=np.float32),
                   np.array([s.location for s in samples], dtype=np.int64),
                   np.array([s.year for s in samples], dtype=np.int64))

    @classmethod
    def concat(cls, sets: list[PatchSet]) -> PatchSet:
        return cls(*(np.concatenate([getattr(s, f) for s in sets]) for f in ("x", "y", "location", "year")))

    def subset(self, idx) -> PatchSet:
        return PatchSet(self.x[idx], self.y[idx], self.location[idx], self.year[idx])


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_text(self) -> str:
        return (f"mean={','.join(repr(float(v)) for v in self.mean)}\n"
                f"std={','.join(repr(float(v)) for v in self.std)}\n")

    @classmethod
    def from_text(cls, text: str) -> NormStats:
        kv = parse_kv(text)
        return cls(np.array([float(v) for v in kv["mean"].split(",")]),
                   np.array([float(v) for v in kv["std"].split(",")]))


def compute_norm_stats(x: np.ndarray) -> NormStats:
    """Per-channel mean and standard deviation over every pixel of ``(M, C, H, W)``."""
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("empty training set")
    flat = np.moveaxis(x, 1, 0).reshape(x.shape[1], -1).astype(np.float64)
    mean = flat.mean(axis=1)
    std = flat.std(axis=1)
    zero = np.flatnonzero(~(std > 0))
    if zero.size:
        raise ValueError(f"zero-variance input channel(s) {zero.tolist()}")
    return NormStats(mean, std)


def apply_norm(x: np.ndarray, stats: NormStats) -> np.ndarray:
    """Standardize channel axis 1 of ``(M, C, H, W)`` (or axis 0 of ``(C, H, W)``)."""
    x = np.asarray(x)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (-1, 1, 1)
    return ((x - stats.mean.reshape(shape)) / stats.std.reshape(shape)).astype(np.float32)


def loss(pred, target, params, lam: float) -> float:
    """Mean absolute error over samples and both heads plus ``lam * ||params||^2``."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    penalty = sum(float(np.sum(np.asarray(p, dtype=np.float64) ** 2)) for p in params)
    return float(np.abs(pred - target).mean()) + lam * penalty


class Adam:
    """Adam with bias-corrected moments; state is one (m, v) pair per parameter."""

    def __init__(self, params: list, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.value -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)


def split_by_location(locations: np.ndarray, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays (train, val) such that no location appears in both."""
    uniq = np.unique(locations)
    if len(uniq) < 2:
        raise ValueError("need at least two distinct locations to split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(uniq)
    n_val = min(len(uniq) - 1, max(1, int(round(val_fraction * len(uniq)))))
    val_locs = perm[:n_val]
    is_val = np.isin(locations, val_locs)
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)


def predict_centers(model: Model, x: np.ndarray, batch: int = 512) -> np.ndarray:
    """Eval-mode prediction at the center pixel of normalized ``(M, C, 15, 15)`` patches.

    Patches are cropped to the receptive field of the center, which leaves its value
    unchanged in eval mode.
    """
    r = min(CENTER, model.config.receptive_radius)
    xc = x[:, :, CENTER - r:CENTER + r + 1, CENTER - r:CENTER + r + 1]
    out = np.empty((len(x), model.config.out_channels), dtype=np.float64)
    for i in range(0, len(x), batch):
        xb = ad.Tensor(np.ascontiguousarray(xc[i:i + batch].transpose(0, 2, 3, 1), dtype=model.dtype))
        out[i:i + batch] = model.apply(xb, training=False).value[:, r, r, :]
    return out


@dataclass
class FitResult:
    model: Model
    norm: NormStats
    log: list[dict] = field(default_factory=list)
    best_iteration: int = 0
    best_val_mae: float = float("nan")
    train_index: np.ndarray | None = None
    val_index: np.ndarray | None = None


def _val_metrics(model, xv, yv, lam) -> dict:
    pred = predict_centers(model, xv)
    err = pred - yv
    penalty = lam * sum(float(np.sum(p.value.astype(np.float64) ** 2)) for p in model.params.trainable())
    mae = float(np.abs(err).mean())
    return {"loss": mae + penalty, "mae": mae, "mbe": float(err.mean())}


def fit(model: Model, patches: PatchSet, config: TrainConfig) -> FitResult:
    """Train on a location-disjoint 80:20 split, keeping the best validation state."""
    train_idx, val_idx = split_by_location(patches.location, config.val_fraction, config.seed)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ValueError("empty train or validation split")
    norm = compute_norm_stats(patches.x[train_idx])
    x_all = apply_norm(patches.x, norm)
    y_all = patches.y.astype(np.float64)
    rng = np.random.default_rng(config.seed)
    if len(val_idx) > config.val_max:
        val_idx = np.sort(rng.choice(val_idx, config.val_max, replace=False))
    x_tr = np.ascontiguousarray(x_all[train_idx].transpose(0, 2, 3, 1), dtype=model.dtype)
    y_tr = y_all[train_idx].astype(model.dtype)
    x_val, y_val = x_all[val_idx], y_all[val_idx]

    result = FitResult(model, norm, [], 0, float("nan"), train_idx, val_idx)
    if config.iterations == 0:
        return result
    if config.init_head_bias:
        model.params["head.conv2.bias"].value[:] = y_tr.mean(axis=0)

    params = model.params.trainable()
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    lam = config.weight_decay

    def validate(it):
        row = {"iteration": it, "split": "val", **_val_metrics(model, x_val, y_val, lam)}
        result.log.append(row)
        if not row["mae"] >= result.best_val_mae:  # also true while best is NaN
            result.best_val_mae = row["mae"]
            result.best_iteration = it
            best_state[0] = model.params.state()
        log.info("iter %d val mae %.4f mbe %.4f", it, row["mae"], row["mbe"])

    best_state = [None]
    validate(0)
    acc = {"loss": 0.0, "mae": 0.0, "mbe": 0.0, "n": 0}
    order = np.empty(0, dtype=np.int64)
    pos = 0
    for it in range(1, config.iterations + 1):
        if pos + config.batch_size > len(order):
            size = config.epoch_sample
            order = rng.choice(len(train_idx), size=size, replace=size > len(train_idx))
            pos = 0
        bi = order[pos:pos + config.batch_size]
        pos += config.batch_size
        tape = ad.Tape()
        out = model.apply(ad.Tensor(x_tr[bi]), training=True, tape=tape)
        center = ad.pixel(out, CENTER, CENTER, tape)
        data_term = ad.mean_abs_error(center, y_tr[bi], tape)
        total = ad.add_scalars(data_term, ad.l2_penalty(params, lam, tape), tape)
        model.params.zero_grad()
        tape.backward(total)
        opt.step()
        err = center.value.astype(np.float64) - y_tr[bi]
        acc["loss"] += float(total.value)
        acc["mae"] += float(np.abs(err).mean())
        acc["mbe"] += float(err.mean())
        acc["n"] += 1
        if it % config.log_interval == 0 or it == config.iterations:
            n = acc.pop("n")
            result.log.append({"iteration": it, "split": "train", **{k: v / n for k, v in acc.items()}})
            acc = {"loss": 0.0, "mae": 0.0, "mbe": 0.0, "n": 0}
        if it % config.val_interval == 0 or it == config.iterations:
            validate(it)
    if best_state[0] is not None:
        model.params.load_state(best_state[0])
    return result


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r["iteration"], r["split"], f"{r['loss']:.6g}", f"{r['mae']:.6g}", f"{r['mbe']:.6g}"])


def save_norm(norm: NormStats, path) -> None:
    Path(path).write_text(norm.to_text())


def load_norm(path) -> NormStats:
    return NormStats.from_text(Path(path).read_text())
