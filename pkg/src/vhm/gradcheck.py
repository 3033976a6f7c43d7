"""Central finite-difference check of the analytic gradients of the training objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import Model, build, tiny_config

KINDS = ("conv1x1", "conv3x3", "bias", "bn_scale", "bn_shift")


@dataclass
class GradcheckResult:
    max_rel_error: float
    checked: dict[str, int]
    skipped_kinks: int
    worst: tuple[str, tuple, float, float] = field(default=("", (), 0.0, 0.0))

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def _objective(model: Model, x: np.ndarray, target: np.ndarray, lam: float, tape=None):
    c = x.shape[1] // 2
    out = model.apply(ad.Tensor(x), training=False, tape=tape)
    pred = ad.pixel(out, c, c, tape)
    data = ad.mean_abs_error(pred, target, tape)
    return ad.add_scalars(data, ad.l2_penalty(model.params.trainable(), lam, tape), tape)


def randomize_running_stats(model: Model, rng: np.random.Generator) -> None:
    """Give eval-mode batch norm non-trivial statistics."""
    for p in model.params:
        if p.name.endswith(".running_mean"):
            p.value[...] = rng.normal(0, 0.2, p.value.shape)
        elif p.name.endswith(".running_var"):
            p.value[...] = rng.uniform(0.5, 2.0, p.value.shape)
        elif p.kind in ("bn_scale", "bn_shift", "bias"):
            p.value[...] += rng.normal(0, 0.1, p.value.shape)


def check_gradients(objective, params, eps: float = 1e-4, per_kind: int = 256,
                    rng: np.random.Generator | None = None) -> GradcheckResult:
    """Central differences of ``objective(tape)`` against backprop for sampled entries of ``params``.

    Parameters are grouped by ``kind``; up to ``per_kind`` entries are drawn from each group.
    A draw whose perturbation flips any ReLU is replaced by another one.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    params = list(params)
    for p in params:
        p.grad[...] = 0
    tape = ad.Tape()
    tape.backward(objective(tape))

    def f(param, idx, delta):
        old = param.value[idx]
        param.value[idx] = old + delta
        with ad.record_relu_masks() as masks:
            val = float(objective(None).value)
        param.value[idx] = old
        return val, masks

    by_kind: dict[str, list] = {}
    for p in params:
        by_kind.setdefault(p.kind, []).append(p)
    worst = ("", (), 0.0, 0.0)
    max_err, skipped = 0.0, 0
    checked = {}
    for kind, group in by_kind.items():
        slots = [(p, i) for p in group for i in range(p.value.size)]
        done = 0
        for j in rng.permutation(len(slots)):
            if done >= per_kind:
                break
            p, flat = slots[j]
            idx = np.unravel_index(flat, p.value.shape)
            fp, mp = f(p, idx, eps)
            fm, mm = f(p, idx, -eps)
            if any((a != b).any() for a, b in zip(mp, mm)):
                skipped += 1
                continue
            num = (fp - fm) / (2 * eps)
            ana = float(p.grad[idx])
            err = rel_error(ana, num)
            if err > max_err:
                max_err, worst = err, (p.name, tuple(int(i) for i in idx), ana, num)
            done += 1
        checked[kind] = done
    return GradcheckResult(max_err, checked, skipped, worst)


def gradcheck(seed: int = 0, eps: float = 1e-4, per_kind: int = 256, batch: int = 2,
              lam: float = 1e-3, model: Model | None = None) -> GradcheckResult:
    """Check the training objective of a float64 model with eval-mode batch norm.

    Targets sit far above the predictions so the L1 term stays on one side of its kink.
    """
    rng = np.random.default_rng(seed)
    if model is None:
        model = build(tiny_config(), seed=seed, dtype=np.float64)
        randomize_running_stats(model, rng)
    model.astype(np.float64)
    size = 2 * model.config.receptive_radius + 1
    x = rng.normal(0, 1, (batch, size, size, model.config.in_channels))
    target = _objective_pred(model, x) + 10.0
    params = [p for p in model.params.trainable() if p.kind in KINDS]
    return check_gradients(lambda tape: _objective(model, x, target, lam, tape), params, eps, per_kind, rng)


def _objective_pred(model: Model, x: np.ndarray) -> np.ndarray:
    c = x.shape[1] // 2
    return model.apply(ad.Tensor(x), training=False).value[:, c, c, :]
