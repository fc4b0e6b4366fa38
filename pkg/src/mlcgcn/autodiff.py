"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations executed while a Tape is active append adjoint closures to it;
`backward` replays the tape in reverse execution order and accumulates
gradients into the `.grad` buffers of every tensor that requires them.
All computation is 64-bit so finite-difference gradient oracles stay tight.
"""

import threading
import warnings
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, OracleError, ShapeError

LAYERNORM_EPS = 1e-5
LOG_FLOOR = 1e-12

_TLS = threading.local()


class Tensor:
    """A dense float64 array with an optional same-shape gradient buffer.

    Data is treated as immutable once the tensor has participated in a taped
    operation; only `grad` mutates afterwards (filled by `backward`).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class Tape:
    """Ordered record of executed operations, replayable in reverse.

    Each record holds (output, inputs, pull) where `pull(grad_out, acc)`
    pushes gradient contributions to the inputs. Clearing the tape drops all
    recorded intermediates.
    """

    __slots__ = ("records",)

    def __init__(self):
        self.records = []

    def __len__(self):
        return len(self.records)

    def clear(self):
        self.records.clear()


def active_tape():
    return getattr(_TLS, "tape", None)


@contextmanager
def recording(tape=None):
    """Activate a tape for the current thread; yields the tape."""
    tape = tape if tape is not None else Tape()
    prev = getattr(_TLS, "tape", None)
    _TLS.tape = tape
    try:
        yield tape
    finally:
        _TLS.tape = prev


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out, inputs, pull):
    tape = getattr(_TLS, "tape", None)
    if tape is not None and out.requires_grad:
        tape.records.append((out, inputs, pull))


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)
    if out.requires_grad:
        ash, bsh = a.data.shape, b.data.shape

        def pull(g, acc):
            if a.requires_grad:
                acc(a, _unbroadcast(g, ash))
            if b.requires_grad:
                acc(b, _unbroadcast(g, bsh))

        _record(out, (a, b), pull)
    return out


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad)
    if out.requires_grad:
        ash, bsh = a.data.shape, b.data.shape

        def pull(g, acc):
            if a.requires_grad:
                acc(a, _unbroadcast(g, ash))
            if b.requires_grad:
                acc(b, _unbroadcast(-g, bsh))

        _record(out, (a, b), pull)
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad)
    if out.requires_grad:
        ad, bd = a.data, b.data

        def pull(g, acc):
            if a.requires_grad:
                acc(a, _unbroadcast(g * bd, ad.shape))
            if b.requires_grad:
                acc(b, _unbroadcast(g * ad, bd.shape))

        _record(out, (a, b), pull)
    return out


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data / b.data, a.requires_grad or b.requires_grad)
    if out.requires_grad:
        ad, bd = a.data, b.data

        def pull(g, acc):
            if a.requires_grad:
                acc(a, _unbroadcast(g / bd, ad.shape))
            if b.requires_grad:
                acc(b, _unbroadcast(-g * ad / (bd * bd), bd.shape))

        _record(out, (a, b), pull)
    return out


def neg(x):
    x = _as_tensor(x)
    out = Tensor(-x.data, x.requires_grad)
    if out.requires_grad:

        def pull(g, acc):
            acc(x, -g)

        _record(out, (x,), pull)
    return out


def scale(x, c):
    """Multiply by a plain Python/NumPy scalar constant."""
    x = _as_tensor(x)
    c = float(c)
    out = Tensor(x.data * c, x.requires_grad)
    if out.requires_grad:

        def pull(g, acc):
            acc(x, g * c)

        _record(out, (x,), pull)
    return out


def relu(x):
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0), x.requires_grad)
    if out.requires_grad:
        mask = x.data > 0

        def pull(g, acc):
            acc(x, g * mask)

        _record(out, (x,), pull)
    return out


def log(x):
    x = _as_tensor(x)
    out = Tensor(np.log(x.data), x.requires_grad)
    if out.requires_grad:
        xd = x.data

        def pull(g, acc):
            acc(x, g / xd)

        _record(out, (x,), pull)
    return out


def clamp_min(x, floor):
    """Elementwise max(x, floor); gradient flows only where x > floor."""
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, floor), x.requires_grad)
    if out.requires_grad:
        mask = x.data > floor

        def pull(g, acc):
            acc(x, g * mask)

        _record(out, (x,), pull)
    return out


def clamp(x, lo, hi):
    """Elementwise clip to [lo, hi]; gradient passes inside the open interval."""
    x = _as_tensor(x)
    out = Tensor(np.clip(x.data, lo, hi), x.requires_grad)
    if out.requires_grad:
        mask = (x.data > lo) & (x.data < hi)

        def pull(g, acc):
            acc(x, g * mask)

        _record(out, (x,), pull)
    return out


# ---------------------------------------------------------------------------
# shape manipulation


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul expects [p x q] @ [q x r], got {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)
    if out.requires_grad:
        ad, bd = a.data, b.data

        def pull(g, acc):
            if a.requires_grad:
                acc(a, g @ bd.T)
            if b.requires_grad:
                acc(b, ad.T @ g)

        _record(out, (a, b), pull)
    return out


def transpose(x):
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {x.data.shape}")
    out = Tensor(x.data.T.copy(), x.requires_grad)
    if out.requires_grad:

        def pull(g, acc):
            acc(x, g.T)

        _record(out, (x,), pull)
    return out


def reshape(x, shape):
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape), x.requires_grad)
    if out.requires_grad:
        orig = x.data.shape

        def pull(g, acc):
            acc(x, g.reshape(orig))

        _record(out, (x,), pull)
    return out


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty sequence")
    out = Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        any(t.requires_grad for t in tensors),
    )
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def pull(g, acc):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    acc(t, g[tuple(idx)])

        _record(out, tuple(tensors), pull)
    return out


def slice_axis(x, start, stop, axis=1):
    x = _as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    out = Tensor(x.data[tuple(idx)].copy(), x.requires_grad)
    if out.requires_grad:
        shape = x.data.shape
        sel = tuple(idx)

        def pull(g, acc):
            gx = np.zeros(shape)
            gx[sel] = g
            acc(x, gx)

        _record(out, (x,), pull)
    return out


def stack_rows(rows):
    """Stack 1-D tensors of equal length into a [N x d] matrix."""
    rows = [_as_tensor(r) for r in rows]
    if not rows:
        raise ContractError("stack_rows of an empty sequence")
    out = Tensor(np.stack([r.data for r in rows]), any(r.requires_grad for r in rows))
    if out.requires_grad:

        def pull(g, acc):
            for i, r in enumerate(rows):
                if r.requires_grad:
                    acc(r, g[i])

        _record(out, tuple(rows), pull)
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_all(x):
    x = _as_tensor(x)
    out = Tensor(x.data.sum(), x.requires_grad)
    if out.requires_grad:
        shape = x.data.shape

        def pull(g, acc):
            acc(x, np.broadcast_to(g, shape).copy())

        _record(out, (x,), pull)
    return out


def sum_axis(x, axis, keepdims=False):
    x = _as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims), x.requires_grad)
    if out.requires_grad:
        shape = x.data.shape

        def pull(g, acc):
            gg = g if keepdims else np.expand_dims(g, axis)
            acc(x, np.broadcast_to(gg, shape).copy())

        _record(out, (x,), pull)
    return out


def mean_axis(x, axis, keepdims=False):
    x = _as_tensor(x)
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims), x.requires_grad)
    if out.requires_grad:
        shape = x.data.shape
        k = shape[axis]

        def pull(g, acc):
            gg = g if keepdims else np.expand_dims(g, axis)
            acc(x, np.broadcast_to(gg / k, shape).copy())

        _record(out, (x,), pull)
    return out


# ---------------------------------------------------------------------------
# neural-network kernels


def softmax_rows(x):
    """Row-wise softmax along the last axis, stabilized by max-subtraction."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, x.requires_grad)
    if out.requires_grad:

        def pull(g, acc):
            acc(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

        _record(out, (x,), pull)
    return out


def layer_norm(x, gain, shift, eps=LAYERNORM_EPS):
    """Normalize the last axis to mean 0 / variance 1, then apply gain+shift."""
    x, gain, shift = _as_tensor(x), _as_tensor(gain), _as_tensor(shift)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or shift.data.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/shift must have shape ({d},), got "
            f"{gain.data.shape} and {shift.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + shift.data, x.requires_grad or gain.requires_grad or shift.requires_grad)
    if out.requires_grad:
        gd = gain.data

        def pull(g, acc):
            if shift.requires_grad:
                acc(shift, g.reshape(-1, d).sum(axis=0))
            if gain.requires_grad:
                acc(gain, (g * xhat).reshape(-1, d).sum(axis=0))
            if x.requires_grad:
                gx = g * gd
                acc(
                    x,
                    inv
                    * (
                        gx
                        - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
                    ),
                )

        _record(out, (x, gain, shift), pull)
    return out


def conv1d_same(x, kernels, bias):
    """Convolve each row of x [n x L] with each kernel [m x t], zero padded.

    Output is [n x m x L]; stride 1, odd t only, so the length stays L.
    """
    x, kernels, bias = _as_tensor(x), _as_tensor(kernels), _as_tensor(bias)
    if x.data.ndim != 2:
        raise ShapeError(f"conv1d_same expects a 2-D input, got shape {x.data.shape}")
    n, L = x.data.shape
    if n == 0 or L == 0:
        raise ShapeError("conv1d_same on an empty series")
    if kernels.data.ndim != 2:
        raise ShapeError(f"kernels must be [m x t], got shape {kernels.data.shape}")
    m, t = kernels.data.shape
    if t % 2 == 0:
        raise ConfigError(f"conv1d_same kernel size must be odd, got t={t}")
    if bias.data.shape != (m,):
        raise ShapeError(f"bias must have shape ({m},), got {bias.data.shape}")
    pad = (t - 1) // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad)))
    win = sliding_window_view(xp, t, axis=1)  # [n, L, t]
    out_data = np.einsum("nlt,mt->nml", win, kernels.data) + bias.data[None, :, None]
    out = Tensor(out_data, x.requires_grad or kernels.requires_grad or bias.requires_grad)
    if out.requires_grad:
        kd = kernels.data

        def pull(g, acc):
            if bias.requires_grad:
                acc(bias, g.sum(axis=(0, 2)))
            if kernels.requires_grad:
                acc(kernels, np.einsum("nml,nlt->mt", g, win))
            if x.requires_grad:
                dwin = np.einsum("nml,mt->nlt", g, kd)
                dxp = np.zeros_like(xp)
                for off in range(t):
                    dxp[:, off : off + L] += dwin[:, :, off]
                acc(x, dxp[:, pad : pad + L])

        _record(out, (x, kernels, bias), pull)
    return out


def avgpool1d_same(x, window):
    """Moving average of size `window` along the last axis, replicate-padded.

    Edge padding repeats the boundary values so the output keeps the input
    length and constant inputs stay constant.
    """
    x = _as_tensor(x)
    t = int(window)
    if t < 1:
        raise ConfigError(f"avgpool1d_same window must be >= 1, got {window}")
    L = x.data.shape[-1]
    pl = (t - 1) // 2
    pr = t - 1 - pl
    parts = []
    if pl:
        parts.append(np.repeat(x.data[..., :1], pl, axis=-1))
    parts.append(x.data)
    if pr:
        parts.append(np.repeat(x.data[..., -1:], pr, axis=-1))
    xp = np.concatenate(parts, axis=-1) if len(parts) > 1 else x.data
    win = sliding_window_view(xp, t, axis=-1)  # [..., L, t]
    out = Tensor(win.mean(axis=-1), x.requires_grad)
    if out.requires_grad:

        def pull(g, acc):
            gp = g / t
            dxp = np.zeros(xp.shape)
            for off in range(t):
                dxp[..., off : off + L] += gp
            dx = dxp[..., pl : pl + L].copy()
            if pl:
                dx[..., 0] += dxp[..., :pl].sum(axis=-1)
            if pr:
                dx[..., -1] += dxp[..., pl + L :].sum(axis=-1)
            acc(x, dx)

        _record(out, (x,), pull)
    return out


def dropout(x, rate, training, rng=None):
    """Zero elements with probability `rate`, scaling survivors by 1/(1-rate).

    Identity when training is false or rate is 0.
    """
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a seeded rng")
    keep = rng.random(x.data.shape) >= rate
    s = 1.0 / (1.0 - rate)
    out = Tensor(x.data * keep * s, x.requires_grad)
    if out.requires_grad:

        def pull(g, acc):
            acc(x, g * keep * s)

        _record(out, (x,), pull)
    return out


def l2_normalize_rows(x):
    """Scale each row of a 2-D tensor to unit L2 norm.

    Zero rows are left as zeros (with a warning) rather than dividing by zero.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects 2-D, got shape {x.data.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1))
    zero = norms < 1e-150
    if zero.any():
        warnings.warn(
            f"l2_normalize_rows: {int(zero.sum())} zero-norm row(s) left as zeros",
            stacklevel=2,
        )
    safe = np.where(zero, 1.0, norms)
    y = x.data / safe[:, None]
    out = Tensor(y, x.requires_grad)
    if out.requires_grad:

        def pull(g, acc):
            d = (g - y * (g * y).sum(axis=1, keepdims=True)) / safe[:, None]
            if zero.any():
                d[zero] = 0.0
            acc(x, d)

        _record(out, (x,), pull)
    return out


# ---------------------------------------------------------------------------
# reverse pass and the finite-difference oracle


def backward(loss, tape=None):
    """Populate `.grad` for every requires-grad tensor reachable on the tape.

    The adjoint of the scalar `loss` is seeded with 1.0 and the tape is
    replayed once in reverse execution order. Gradients accumulate into any
    pre-existing `.grad` buffers, so replaying twice doubles them. Tensors on
    the tape that require gradients but receive none are zero-filled.
    """
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise ContractError("backward requires an active tape")
    if not isinstance(loss, Tensor) or loss.data.shape != ():
        raise ContractError("backward expects a scalar tensor produced on the tape")

    adjoints = {id(loss): np.ones((), dtype=np.float64)}

    def acc(t, g):
        if not t.requires_grad:
            return
        key = id(t)
        prev = adjoints.get(key)
        adjoints[key] = g if prev is None else prev + g

    for out, _inputs, pull in reversed(tape.records):
        g = adjoints.get(id(out))
        if g is None:
            continue
        pull(g, acc)

    deposited = set()
    for out, inputs, _pull in tape.records:
        for t in (*inputs, out):
            key = id(t)
            if not t.requires_grad or key in deposited:
                continue
            deposited.add(key)
            g = adjoints.get(key)
            contrib = np.zeros_like(t.data) if g is None else np.broadcast_to(g, t.data.shape)
            t.grad = contrib.copy() if t.grad is None else t.grad + contrib


def finite_diff_check(f, params, eps=1e-5, eps_floor=1e-5):
    """Max relative disagreement between reverse-mode and central differences.

    `f` must be a scalar-valued function of the single tensor `params`.
    Returns max over coordinates of |analytic - central| normalized by
    (|analytic| + |central| + eps_floor); the floor absorbs central-difference
    rounding noise (about machine epsilon times |f| / eps) on coordinates
    whose true gradient is zero.
    """
    if eps <= 0:
        raise ConfigError(f"finite_diff_check eps must be > 0, got {eps}")
    if not isinstance(params, Tensor) or not params.requires_grad:
        raise ContractError("finite_diff_check params must be a requires-grad tensor")

    params.grad = None
    if not params.data.flags.c_contiguous:
        params.data = np.ascontiguousarray(params.data)  # ravel below must be a view
    with recording():
        out = f(params)
        if not isinstance(out, Tensor) or out.data.shape != ():
            raise ContractError("finite_diff_check f must return a scalar tensor")
        backward(out)
    analytic = params.grad if params.grad is not None else np.zeros_like(params.data)

    flat = params.data.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(params).data)
        flat[i] = orig - eps
        fm = float(f(params).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite objective at perturbed coordinate {i}")
        numeric[i] = (fp - fm) / (2.0 * eps)
    numeric = numeric.reshape(params.data.shape)
    denom = np.abs(analytic) + np.abs(numeric) + eps_floor
    return float(np.max(np.abs(analytic - numeric) / denom))


def zero_grads(params):
    """Reset the grad buffers of a name->Tensor mapping."""
    for p in params.values():
        p.grad = None
