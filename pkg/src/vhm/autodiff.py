"""Tape-based reverse-mode differentiation for the layer set of the height regressor.

Activations are stored channels-last, ``(N, H, W, C)``, so that 1x1 convolutions are a
single GEMM. Convolution weights keep the conventional ``(C_out, C_in / groups, k, k)``
layout. Passing ``tape=None`` to an op runs it without recording (inference), which
also lets 3x3 convolutions stream over row bands to bound memory.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
_BAND_BYTES = 48 * 2**20
# BLAS picks kernels by matrix height, so inference multiplies in fixed-height blocks;
# a pixel's result then does not depend on the image size it was computed in
_GEMM_ROWS = 4096
_relu_probes: list[list[np.ndarray]] = []


class Tensor:
    """A value in the graph with an optional gradient buffer."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype})"


class Param(Tensor):
    """Named learnable (or buffer) array owned by a :class:`ParamStore`."""

    __slots__ = ("name", "trainable", "kind")

    def __init__(self, name: str, value, trainable: bool = True, kind: str = ""):
        super().__init__(value)
        self.name = name
        self.trainable = trainable
        self.kind = kind
        self.grad = np.zeros_like(self.value)

    def accumulate(self, g) -> None:
        if self.trainable:
            self.grad += g


class ParamStore:
    """Insertion-ordered registry of parameters and running statistics."""

    def __init__(self):
        self._params: OrderedDict[str, Param] = OrderedDict()

    def add(self, name: str, value, trainable: bool = True, kind: str = "") -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Param(name, value, trainable, kind)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self) -> list[Param]:
        return [p for p in self._params.values() if p.trainable]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0

    def astype(self, dtype) -> None:
        for p in self._params.values():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)

    @property
    def dtype(self):
        return next(iter(self._params.values())).value.dtype

    def count(self, trainable_only: bool = True) -> int:
        return sum(p.value.size for p in self._params.values() if p.trainable or not trainable_only)

    def state(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((n, p.value.copy()) for n, p in self._params.items())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, p in self._params.items():
            v = np.asarray(state[n])
            if v.shape != p.value.shape:
                raise ValueError(f"{n}: shape {v.shape} != {p.value.shape}")
            p.value = v.astype(p.value.dtype, copy=True)
            p.grad = np.zeros_like(p.value)


class Tape:
    """Records ops of one forward pass; ``backward`` replays them in reverse."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
        self.nodes.append((out, inputs, backward))
        return out

    def backward(self, loss: Tensor, grad=None) -> None:
        if not self.nodes:
            raise RuntimeError("backward called before any forward op was recorded")
        seed = np.ones_like(loss.value) if grad is None else np.asarray(grad, dtype=loss.value.dtype)
        loss.grad = np.array(seed, copy=True)
        for out, inputs, fn in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for t, g in zip(inputs, grads):
                if g is not None:
                    t.accumulate(g)
            if out is not loss:
                out.grad = None
        self.nodes.clear()


def backward(tape: Tape, loss: Tensor, loss_gradient=None) -> None:
    tape.backward(loss, loss_gradient)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# convolution


def _im2col3(x: np.ndarray, groups: int, r0: int = 0, r1: int | None = None) -> np.ndarray:
    """Patches of output rows ``[r0, r1)`` as ``(N * rows * W, groups, 9 * C/groups)``."""
    n, h, w, c = x.shape
    r1 = h if r1 is None else r1
    rows = r1 - r0
    cg = c // groups
    cols = np.empty((n, rows, w, groups, 9, cg), dtype=x.dtype)
    cols[:, :, 0, :, 0::3, :] = 0
    cols[:, :, -1, :, 2::3, :] = 0
    if r0 == 0:
        cols[:, 0, :, :, 0:3, :] = 0
    if r1 == h:
        cols[:, -1, :, :, 6:9, :] = 0
    for dy in range(3):
        # output row r reads input row r + dy - 1
        src_lo, src_hi = r0 + dy - 1, r1 + dy - 1
        lo, hi = max(src_lo, 0), min(src_hi, h)
        if hi <= lo:
            continue
        o_lo = lo - src_lo
        o_hi = o_lo + (hi - lo)
        for dx in range(3):
            k = dy * 3 + dx
            c_lo, c_hi = max(dx - 1, 0), min(w + dx - 1, w)
            oc_lo = c_lo - (dx - 1)
            oc_hi = oc_lo + (c_hi - c_lo)
            cols[:, o_lo:o_hi, oc_lo:oc_hi, :, k, :] = (
                x[:, lo:hi, c_lo:c_hi, :].reshape(n, hi - lo, c_hi - c_lo, groups, cg))
    return cols.reshape(n * rows * w, groups, 9 * cg)


def _col2im3(dcols: np.ndarray, shape, groups: int) -> np.ndarray:
    n, h, w, c = shape
    cg = c // groups
    d6 = dcols.reshape(n, h, w, groups, 9, cg)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for dy in range(3):
        for dx in range(3):
            dxp[:, dy:dy + h, dx:dx + w, :] += d6[:, :, :, :, dy * 3 + dx, :].reshape(n, h, w, c)
    return dxp[:, 1:-1, 1:-1, :]


def _matmul_fixed(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    m = a.shape[0]
    full = m - m % _GEMM_ROWS
    for r0 in range(0, full, _GEMM_ROWS):
        np.matmul(a[r0:r0 + _GEMM_ROWS], b, out=out[r0:r0 + _GEMM_ROWS])
    if full < m:
        pad = np.zeros((_GEMM_ROWS, a.shape[1]), dtype=a.dtype)
        pad[:m - full] = a[full:]
        out[full:] = (pad @ b)[:m - full]


def _group_weights(w: np.ndarray, groups: int) -> list[np.ndarray]:
    """Per-group GEMM matrices ``(k*k*C_in/g, C_out/g)`` ordered like the im2col columns."""
    cout, cin_g, k, _ = w.shape
    cog = cout // groups
    return [np.ascontiguousarray(w[g * cog:(g + 1) * cog].transpose(2, 3, 1, 0).reshape(k * k * cin_g, cog))
            for g in range(groups)]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, groups: int = 1,
           tape: Tape | None = None) -> Tensor:
    """Stride-1 grouped cross-correlation; 3x3 kernels are zero-padded by one pixel."""
    x = _as_tensor(x)
    xv, wv = x.value, weight.value
    n, h, w, cin = xv.shape
    cout, cin_g, k, k2 = wv.shape
    if k != k2 or k not in (1, 3):
        raise ValueError(f"unsupported kernel {k}x{k2}")
    if groups < 1 or cin % groups or cout % groups:
        raise ValueError(f"channels ({cin} -> {cout}) not divisible by groups={groups}")
    if cin // groups != cin_g:
        raise ValueError(f"weight expects {cin_g * groups} input channels, got {cin}")
    cg, cog = cin // groups, cout // groups
    mats = _group_weights(wv, groups)
    npix = n * h * w
    fixed = tape is None and npix >= _GEMM_ROWS

    def gemm(cols2):
        # cols2: (P, C_in) for 1x1 or (P, groups, 9 * C_in/groups) for 3x3
        if groups == 1 and not fixed:
            return cols2.reshape(cols2.shape[0], -1) @ mats[0]
        res = np.empty((cols2.shape[0], cout), dtype=np.result_type(xv, wv))
        mult = _matmul_fixed if fixed else np.matmul
        for g in range(groups):
            a = cols2.reshape(cols2.shape[0], -1) if groups == 1 else (
                cols2[:, g * cg:(g + 1) * cg] if k == 1 else cols2[:, g, :])
            mult(a, mats[g], out=res[:, g * cog:(g + 1) * cog])
        return res

    if k == 1:
        cols = xv.reshape(npix, cin)
        out = gemm(cols)
    elif tape is None:
        rows = max(1, min(h, _BAND_BYTES // max(1, n * w * 9 * cin * xv.itemsize)))
        if rows >= h:
            out = gemm(_im2col3(xv, groups))
        else:
            out = np.empty((n, h, w, cout), dtype=np.result_type(xv, wv))
            for r0 in range(0, h, rows):
                r1 = min(h, r0 + rows)
                out[:, r0:r1] = gemm(_im2col3(xv, groups, r0, r1)).reshape(n, r1 - r0, w, cout)
            out = out.reshape(npix, cout)
        cols = None
    else:
        cols = _im2col3(xv, groups)
        out = gemm(cols)
    if bias is not None:
        out += bias.value
    result = Tensor(out.reshape(n, h, w, cout))
    if tape is None:
        return result

    def back(dout):
        d2 = dout.reshape(npix, cout)
        dw = np.empty_like(wv)
        if k == 1:
            src = xv.reshape(npix, cin)
            if groups == 1:
                dw[:, :, 0, 0] = d2.T @ src
                dx = d2 @ mats[0].T
            else:
                dx = np.empty((npix, cin), dtype=xv.dtype)
                for g in range(groups):
                    dg = d2[:, g * cog:(g + 1) * cog]
                    dw[g * cog:(g + 1) * cog, :, 0, 0] = dg.T @ src[:, g * cg:(g + 1) * cg]
                    np.matmul(dg, mats[g].T, out=dx[:, g * cg:(g + 1) * cg])
            dx = dx.reshape(xv.shape)
        else:
            dcols = np.empty_like(cols)
            for g in range(groups):
                dg = d2[:, g * cog:(g + 1) * cog]
                gw = cols[:, g, :].T @ dg
                dw[g * cog:(g + 1) * cog] = gw.reshape(3, 3, cg, cog).transpose(3, 2, 0, 1)
                np.matmul(dg, mats[g].T, out=dcols[:, g, :])
            dx = _col2im3(dcols, xv.shape, groups)
        db = d2.sum(axis=0) if bias is not None else None
        return dx, dw, db

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return tape.record(result, inputs, back if bias is not None else (lambda d: back(d)[:2]))


# ---------------------------------------------------------------------------
# normalization and pointwise ops


def batchnorm(x: Tensor, scale: Tensor, shift: Tensor, running_mean: Param, running_var: Param,
              training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS,
              tape: Tape | None = None, inplace: bool = False) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Training mode normalizes with batch statistics and updates the running statistics
    (variance update uses the unbiased estimate); eval mode is the fixed affine map
    given by the running statistics.
    """
    x = _as_tensor(x)
    xv = x.value
    c = xv.shape[-1]
    if scale.value.shape != (c,) or running_mean.value.shape != (c,):
        raise ValueError(f"batchnorm parameters do not match {c} channels")
    gamma, beta = scale.value, shift.value
    if training:
        x2 = xv.reshape(-1, c)
        m = x2.shape[0]
        mu = x2.mean(axis=0)
        var = np.maximum(np.einsum("ij,ij->j", x2, x2) / m - mu * mu, 0)
        invstd = 1.0 / np.sqrt(var + eps)
        a = gamma * invstd
        out = x2 * a
        out += beta - mu * a
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean.value = ((1 - momentum) * running_mean.value + momentum * mu).astype(running_mean.value.dtype)
        running_var.value = ((1 - momentum) * running_var.value + momentum * unbiased).astype(running_var.value.dtype)
        result = Tensor(out.reshape(xv.shape))
        if tape is None:
            return result

        def back(dy):
            d2 = dy.reshape(-1, c)
            dbeta = d2.sum(axis=0)
            dgamma = (np.einsum("ij,ij->j", d2, x2) - mu * dbeta) * invstd
            # dx = a * (dy - mean(dy) - xhat * mean(dy * xhat)), expanded per channel
            k1 = -a * invstd * dgamma / m
            k0 = -a * dbeta / m - mu * k1
            dx = d2 * a
            dx += x2 * k1
            dx += k0
            return dx.reshape(xv.shape), dgamma, dbeta

        return tape.record(result, (x, scale, shift), back)

    invstd = 1.0 / np.sqrt(running_var.value + eps)
    a = (gamma * invstd).astype(xv.dtype)
    b = (beta - running_mean.value * gamma * invstd).astype(xv.dtype)
    if inplace and tape is None:
        xv *= a
        xv += b
        return x
    result = Tensor(xv * a + b)
    if tape is None:
        return result
    mean = running_mean.value

    def back_eval(dy):
        return dy * a, (dy * (xv - mean) * invstd).sum(axis=(0, 1, 2)), dy.sum(axis=(0, 1, 2))

    return tape.record(result, (x, scale, shift), back_eval)


@contextmanager
def record_relu_masks():
    """Collect the ``x > 0`` mask of every ReLU evaluated inside the block."""
    masks: list[np.ndarray] = []
    _relu_probes.append(masks)
    try:
        yield masks
    finally:
        _relu_probes.pop()


def relu(x: Tensor, tape: Tape | None = None, inplace: bool = False) -> Tensor:
    x = _as_tensor(x)
    if _relu_probes:
        _relu_probes[-1].append(x.value > 0)
    if inplace and tape is None:
        np.maximum(x.value, 0, out=x.value)
        return x
    out = np.maximum(x.value, 0)
    result = Tensor(out)
    if tape is None:
        return result
    on = out > 0

    def back(dy):
        np.multiply(dy, on, out=dy)
        return (dy,)

    return tape.record(result, (x,), back)


def add(a: Tensor, b: Tensor, tape: Tape | None = None, inplace: bool = False) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.shape != b.value.shape:
        raise ValueError(f"shape mismatch {a.value.shape} vs {b.value.shape}")
    if inplace and tape is None:
        a.value += b.value
        return a
    result = Tensor(a.value + b.value)
    if tape is None:
        return result
    return tape.record(result, (a, b), lambda dy: (dy, dy))


def concat(tensors: list[Tensor], tape: Tape | None = None) -> Tensor:
    """Concatenate along channels."""
    tensors = [_as_tensor(t) for t in tensors]
    result = Tensor(np.concatenate([t.value for t in tensors], axis=-1))
    if tape is None:
        return result
    edges = np.cumsum([0] + [t.value.shape[-1] for t in tensors])

    def back(dy):
        return tuple(dy[..., edges[i]:edges[i + 1]] for i in range(len(tensors)))

    return tape.record(result, tuple(tensors), back)


def pixel(x: Tensor, row: int, col: int, tape: Tape | None = None) -> Tensor:
    """Values at one spatial position, shape ``(N, C)``."""
    x = _as_tensor(x)
    result = Tensor(x.value[:, row, col, :].copy())
    if tape is None:
        return result
    shape = x.value.shape

    def back(dy):
        dx = np.zeros(shape, dtype=dy.dtype)
        dx[:, row, col, :] = dy
        return (dx,)

    return tape.record(result, (x,), back)


# ---------------------------------------------------------------------------
# scalar objective terms


def mean_abs_error(pred: Tensor, target, tape: Tape | None = None) -> Tensor:
    """Mean of ``|pred - target|`` over every element; subgradient 0 at 0."""
    target = np.asarray(target, dtype=pred.value.dtype)
    if target.shape != pred.value.shape:
        raise ValueError(f"target shape {target.shape} != prediction shape {pred.value.shape}")
    diff = pred.value - target
    result = Tensor(np.abs(diff).mean())
    if tape is None:
        return result
    sign = np.sign(diff) / diff.size
    return tape.record(result, (pred,), lambda dy: (dy * sign,))


def l2_penalty(params: Iterable[Param], lam: float, tape: Tape | None = None) -> Tensor:
    params = tuple(params)
    dtype = params[0].value.dtype if params else np.float64
    total = sum(float(np.dot(p.value.ravel(), p.value.ravel())) for p in params)
    result = Tensor(np.asarray(lam * total, dtype=dtype))
    if tape is None or not params:
        return result
    return tape.record(result, params, lambda dy: tuple(2 * lam * dy * p.value for p in params))


def add_scalars(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    result = Tensor(a.value + b.value)
    if tape is None:
        return result
    return tape.record(result, (a, b), lambda dy: (dy, dy))


# ---------------------------------------------------------------------------
# VHMW parameter checkpoints

CKPT_MAGIC = b"VHMW"
CKPT_VERSION = 1


class CheckpointFormatError(OSError):
    """Raised when a VHMW file is malformed."""


def save_params(store: ParamStore | dict, path) -> None:
    items = store.state().items() if isinstance(store, ParamStore) else store.items()
    items = list(items)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(items)))
        for name, value in items:
            raw = name.encode("utf-8")
            arr = np.array(value, dtype="<f4", order="C")  # keeps rank 0
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_params(path) -> OrderedDict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointFormatError(f"{path}: truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    version, count = struct.unpack("<HI", take(6))
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).copy()
    if pos != len(blob):
        raise CheckpointFormatError(f"{path}: trailing bytes after {count} parameters")
    return out
