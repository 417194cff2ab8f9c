"""Dense-tensor numerics with tape-based reverse-mode differentiation.

Everything the segmentation engine needs and nothing more: 3D convolution,
pointwise (1x1x1) convolution, linear maps, activations, pooling, masked
binary cross-entropy, and a finite-difference gradient checker.

Conventions:
  * volumes are channel-first (C, D, W, H); vectors are 1-D
  * no broadcasting at the op level; all shapes explicit
  * f32 is the training dtype, f64 the verification dtype (finite-difference
    checks are only meaningful in f64)
  * ops record onto the active ``Tape`` (entered as a context manager); with
    no active tape they are plain forward computations
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

BCE_EPS = 1e-7


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class MaskError(ValueError):
    """A loss mask left nothing to average over."""


_TLS = threading.local()


def active_tape():
    return getattr(_TLS, "tape", None)


class Tensor:
    """A dense array with an optional gradient slot.

    ``requires_grad`` marks leaf parameters. Tensors produced by ops on an
    active tape are tracked automatically so gradients can flow through them.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_on_tape")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d shape, unlike unconditional copy
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._on_tape = False
        if self.data.dtype == np.float64 and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in tensor {name or '<anon>'}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def tracked(self) -> bool:
        return self.requires_grad or self._on_tape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, name={self.name!r})"


class Tape:
    """Ordered record of primitive applications.

    ``backward`` zeroes every gradient slot the tape touches, seeds the
    output gradient with 1, and replays the records in exact reverse order,
    accumulating into ``.grad``. Replaying the same tape twice produces
    bitwise-identical gradients.
    """

    def __init__(self):
        # each record: (out, inputs, needs, backward_fn)
        self._records: list[tuple] = []

    def __enter__(self):
        if active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _TLS.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _TLS.tape = None
        return False

    def record(self, out: Tensor, inputs: Sequence[Tensor], needs: Sequence[bool],
               backward_fn: Callable):
        out._on_tape = True
        self._records.append((out, tuple(inputs), tuple(needs), backward_fn))

    def backward(self, out: Tensor):
        if out.data.shape != ():
            raise ShapeError(f"backward needs a scalar output, got shape {out.data.shape}")
        seen: set[int] = set()
        for rec_out, inputs, needs, _ in self._records:
            for t in (rec_out, *inputs):
                if id(t) not in seen and t.tracked():
                    seen.add(id(t))
                    t.grad = np.zeros_like(t.data)
        if out.grad is None or id(out) not in seen:
            out.grad = np.zeros_like(out.data)
        out.grad = np.ones_like(out.data)
        for rec_out, inputs, needs, backward_fn in reversed(self._records):
            grads = backward_fn(rec_out.grad)
            for t, need, g in zip(inputs, needs, grads):
                if need and g is not None:
                    t.grad += g


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable,
            name: str = "") -> Tensor:
    out = Tensor(data, name=name)
    tape = active_tape()
    if tape is not None:
        needs = tuple(t.tracked() for t in inputs)
        if any(needs):
            tape.record(out, inputs, needs, backward_fn)
    return out


def _check_vol(x: Tensor, op: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects a (C, D, W, H) volume, got shape {x.data.shape}")


# ---------------------------------------------------------------------------
# convolution

def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of a (C_in, D, W, H) volume with (C_out, C_in, k, k, k)
    kernels. Output extent per axis is floor((N + 2p - k)/s) + 1.

    The sum over kernel offsets runs as k^3 vectorized partial products, which
    keeps memory flat while spending all time in BLAS.
    """
    _check_vol(x, "conv3d")
    if w.data.ndim != 5 or w.data.shape[2] != w.data.shape[3] or w.data.shape[3] != w.data.shape[4]:
        raise ShapeError(f"conv3d kernel must be (C_out, C_in, k, k, k), got {w.data.shape}")
    if w.data.shape[1] != x.data.shape[0]:
        raise ShapeError(
            f"conv3d channel mismatch: input {x.data.shape} vs kernel {w.data.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv3d invalid stride={stride} padding={padding}")
    k = w.data.shape[2]
    s = stride
    xd, wd = x.data, w.data
    if padding:
        p = padding
        xp = np.pad(xd, ((0, 0), (p, p), (p, p), (p, p)))
    else:
        xp = xd
    out_sp = tuple((xp.shape[i + 1] - k) // s + 1 for i in range(3))
    if min(out_sp) < 1:
        raise ShapeError(
            f"conv3d spatial extent too small: input {x.data.shape}, kernel {w.data.shape}, "
            f"stride {stride}, padding {padding}")
    c_out = wd.shape[0]
    out = np.zeros((c_out, *out_sp), dtype=xd.dtype)
    spans = tuple(s * (o - 1) + 1 for o in out_sp)
    for a in range(k):
        for bb in range(k):
            for c in range(k):
                win = xp[:, a:a + spans[0]:s, bb:bb + spans[1]:s, c:c + spans[2]:s]
                out += np.tensordot(wd[:, :, a, bb, c], win, axes=(1, 0))
    if b is not None:
        if b.data.shape != (c_out,):
            raise ShapeError(f"conv3d bias must be ({c_out},), got {b.data.shape}")
        out += b.data[:, None, None, None]

    pad = padding
    in_sp = xd.shape[1:]

    def backward(g):
        gx = gw = gb = None
        if needs[0]:
            gxp = np.zeros_like(xp)
            for a in range(k):
                for bb in range(k):
                    for c in range(k):
                        gxp[:, a:a + spans[0]:s, bb:bb + spans[1]:s, c:c + spans[2]:s] += \
                            np.tensordot(wd[:, :, a, bb, c], g, axes=(0, 0))
            if pad:
                gx = np.ascontiguousarray(
                    gxp[:, pad:pad + in_sp[0], pad:pad + in_sp[1], pad:pad + in_sp[2]])
            else:
                gx = gxp
        if needs[1]:
            gw = np.empty_like(wd)
            for a in range(k):
                for bb in range(k):
                    for c in range(k):
                        win = xp[:, a:a + spans[0]:s, bb:bb + spans[1]:s, c:c + spans[2]:s]
                        gw[:, :, a, bb, c] = np.tensordot(g, win, axes=([1, 2, 3], [1, 2, 3]))
        if b is not None and needs[2]:
            gb = g.sum(axis=(1, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    needs = tuple(t.tracked() for t in inputs)
    return _result(out, inputs, backward)


def pointwise_conv(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-voxel affine map: (C_in, D, W, H) x (C_out, C_in) -> (C_out, D, W, H).

    Equivalent to conv3d with a 1x1x1 kernel.
    """
    _check_vol(x, "pointwise_conv")
    if w.data.ndim != 2 or w.data.shape[1] != x.data.shape[0]:
        raise ShapeError(
            f"pointwise_conv weights must be (C_out, {x.data.shape[0]}), got {w.data.shape}")
    xd, wd = x.data, w.data
    out = np.tensordot(wd, xd, axes=(1, 0))
    if b is not None:
        if b.data.shape != (wd.shape[0],):
            raise ShapeError(f"pointwise_conv bias must be ({wd.shape[0]},), got {b.data.shape}")
        out = out + b.data[:, None, None, None]

    def backward(g):
        gx = gw = gb = None
        if needs[0]:
            gx = np.tensordot(wd, g, axes=(0, 0))
        if needs[1]:
            gw = np.tensordot(g, xd, axes=([1, 2, 3], [1, 2, 3]))
        if b is not None and needs[2]:
            gb = g.sum(axis=(1, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    needs = tuple(t.tracked() for t in inputs)
    return _result(out, inputs, backward)


# ---------------------------------------------------------------------------
# dense / activations / pooling

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map of a 1-D vector: (n,) x (m, n) -> (m,)."""
    if x.data.ndim != 1 or w.data.ndim != 2 or w.data.shape[1] != x.data.shape[0]:
        raise ShapeError(f"linear shape mismatch: x {x.data.shape}, w {w.data.shape}")
    xd, wd = x.data, w.data
    out = wd @ xd
    if b is not None:
        if b.data.shape != (wd.shape[0],):
            raise ShapeError(f"linear bias must be ({wd.shape[0]},), got {b.data.shape}")
        out = out + b.data

    def backward(g):
        gx = wd.T @ g if needs[0] else None
        gw = np.outer(g, xd) if needs[1] else None
        gb = g if (b is not None and needs[2]) else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    needs = tuple(t.tracked() for t in inputs)
    return _result(out, inputs, backward)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0)

    def backward(g):
        return (g * (xd > 0),)

    return _result(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function with output kept strictly inside (0, 1).

    Saturated values are nudged off 0/1 by one machine epsilon so downstream
    log-losses stay finite regardless of clamping there.
    """
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    tiny = np.finfo(xd.dtype).eps
    np.clip(out, tiny, 1.0 - tiny, out=out)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(C, D, W, H) -> (C,) mean over all voxels of each channel."""
    _check_vol(x, "global_avg_pool")
    xd = x.data
    n = xd.shape[1] * xd.shape[2] * xd.shape[3]
    out = xd.reshape(xd.shape[0], n).sum(axis=1) / n

    def backward(g):
        return (np.broadcast_to((g / n)[:, None, None, None], xd.shape),)

    return _result(out, (x,), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat every voxel ``factor`` times along each spatial axis."""
    _check_vol(x, "upsample_nearest")
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    xd = x.data
    out = xd.repeat(factor, axis=1).repeat(factor, axis=2).repeat(factor, axis=3)
    c, d, wdim, h = xd.shape

    def backward(g):
        return (g.reshape(c, d, factor, wdim, factor, h, factor).sum(axis=(2, 4, 6)),)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# small structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        return (g, g)

    return _result(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g * bd, g * ad)

    return _result(ad * bd, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return _result(x.data * c, (x,), backward)


def concat1d(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError(f"concat1d needs 1-D inputs, got {a.data.shape} and {b.data.shape}")
    n = a.data.shape[0]

    def backward(g):
        return (g[:n], g[n:])

    return _result(np.concatenate([a.data, b.data]), (a, b), backward)


def slice1d(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 1 or not (0 <= start <= stop <= x.data.shape[0]):
        raise ShapeError(f"slice1d [{start}:{stop}] invalid for shape {x.data.shape}")
    size = x.data.shape[0]

    def backward(g):
        gx = np.zeros(size, dtype=g.dtype)
        gx[start:stop] = g
        return (gx,)

    return _result(x.data[start:stop].copy(), (x,), backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    orig = x.data.shape

    def backward(g):
        return (g.reshape(orig),)

    return _result(x.data.reshape(shape).copy(), (x,), backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar linear functional sum(x * weights); weights are constant."""
    wd = np.asarray(weights, dtype=x.data.dtype)
    if wd.shape != x.data.shape:
        raise ShapeError(f"weighted_sum shape mismatch: {x.data.shape} vs {wd.shape}")

    def backward(g):
        return (g * wd,)

    return _result(np.asarray((x.data * wd).sum(), dtype=x.data.dtype), (x,), backward)


def mean_scalars(xs: Sequence[Tensor]) -> Tensor:
    """Mean of scalar tensors, recorded as one primitive."""
    if not xs:
        raise MaskError("mean_scalars over an empty sequence")
    for t in xs:
        if t.data.shape != ():
            raise ShapeError(f"mean_scalars needs scalars, got shape {t.data.shape}")
    n = len(xs)
    total = xs[0].data.copy()
    for t in xs[1:]:
        total = total + t.data
    out = total / n

    def backward(g):
        return tuple(g / n for _ in range(n))

    return _result(np.asarray(out), tuple(xs), backward)


# ---------------------------------------------------------------------------
# loss

def bce(p: Tensor, y: np.ndarray | Tensor, weight: np.ndarray | None = None) -> Tensor:
    """Binary cross-entropy, mean over unmasked elements.

    Probabilities are clamped to [BCE_EPS, 1 - BCE_EPS] before the logs;
    where the clamp is active the local derivative is exactly zero, matching
    the computed forward value. Targets and weights are constants.

    weight, if given, is a {0,1} array of the same shape; elements with
    weight 0 contribute nothing to the loss or any gradient.
    """
    yd = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=p.data.dtype)
    if yd.shape != p.data.shape:
        raise ShapeError(f"bce target shape {yd.shape} != prediction shape {p.data.shape}")
    pd = p.data
    eps = BCE_EPS
    pc = np.clip(pd, eps, 1.0 - eps)
    terms = -(yd * np.log(pc) + (1.0 - yd) * np.log1p(-pc))
    if weight is None:
        n = pd.size
        loss = terms.sum() / n
        wd = None
    else:
        wd = np.asarray(weight, dtype=pd.dtype)
        if wd.shape != pd.shape:
            raise ShapeError(f"bce weight shape {wd.shape} != prediction shape {pd.shape}")
        n = int(np.count_nonzero(wd))
        if n == 0:
            raise MaskError("bce: every element is masked out")
        loss = (terms * wd).sum() / n

    def backward(g):
        inside = (pd > eps) & (pd < 1.0 - eps)
        gp = np.where(inside, (pc - yd) / (pc * (1.0 - pc)), 0.0)
        if wd is not None:
            gp = gp * wd
        return (gp * (g / n),)

    return _result(np.asarray(loss, dtype=pd.dtype), (p,), backward)


# ---------------------------------------------------------------------------
# verification

def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                      eps: float = 1e-5, max_coords: int | None = None) -> float:
    """Max relative error of tape gradients against central finite differences.

    ``loss_fn`` must rebuild the scalar loss from the current parameter
    values on every call. Error per coordinate is
    |analytic - central| / max(1, |central|); the max over all checked
    coordinates is returned. Run in f64: f32 differences are too noisy.

    ``max_coords`` deterministically subsamples coordinates per parameter
    (evenly strided) when a parameter is large; None checks every one.
    """
    with Tape() as tape:
        out = loss_fn()
        tape.backward(out)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        idx = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            stride = flat.size // max_coords
            idx = range(0, flat.size, stride)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_fn().data)
            flat[i] = orig - eps
            f_minus = float(loss_fn().data)
            flat[i] = orig
            central = (f_plus - f_minus) / (2.0 * eps)
            err = abs(float(gflat[i]) - central) / max(1.0, abs(central))
            if err > worst:
                worst = err
    return worst
