"""Dense tensors with reverse-mode automatic differentiation.

Small, single-threaded tape engine backed by numpy arrays. Feature maps are
channel-last (H, W, C). f32 is the training dtype, f64 the verification
dtype used by gradient checks. Broadcasting is deliberately restricted to
trailing-dimension bias addition (and leading batch dims inside matmul);
every other elementwise op requires exactly matching shapes.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Tape", "tensor", "backward", "no_grad", "finite_diff_check",
    "matmul", "softmax", "log_softmax", "sigmoid", "relu", "gelu",
    "conv2d", "pool2d", "concat", "gather_rows", "upsample_bilinear",
    "cosine_similarity_matrix", "layer_norm",
    "ShapeError", "ConfigError", "NumericError", "ContractError",
]

DTYPES = {"f32": np.float32, "f64": np.float64}

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ConfigError(ValueError):
    """A structural parameter (groups, kernel, factor, k, ...) is invalid."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the contract forbids it."""


class ContractError(ValueError):
    """An operation precondition was violated."""


class Tape:
    """Op records in construction order; inputs always precede consumers."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Tensor] = []


_tape: Tape | None = None
_grad_enabled = True


class no_grad:
    """Context manager that suppresses tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _reset_tape():
    global _tape
    _tape = None


class Tensor:
    """A dense array plus optional tape bookkeeping.

    Immutable after construction except for ``grad``, which accumulates one
    buffer per backward pass (summed across passes until cleared).
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: int | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def tensor(data, dtype: str = "f32", requires_grad: bool = False) -> Tensor:
    """Wrap ``data`` as a Tensor of the named dtype ('f32' or 'f64')."""
    if dtype not in DTYPES:
        raise ConfigError(f"unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}")
    return Tensor(np.asarray(data, dtype=DTYPES[dtype]), requires_grad=requires_grad)


def _record(out: Tensor, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    global _tape
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        return out
    if _tape is None:
        _tape = Tape()
    out.requires_grad = True
    out._parents = parents
    out._grad_fn = grad_fn
    out._node = len(_tape.nodes)
    _tape.nodes.append(out)
    return out


def _check_same_dtype(*tensors: Tensor):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"mixed dtypes {sorted(str(d) for d in dtypes)}; cast explicitly")


def _as_scalar(x, dtype):
    return np.asarray(x, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    """Elementwise sum. ``b`` may be a scalar or a 1-D bias matching a's
    trailing dimension; any other shape must equal a's exactly."""
    if not isinstance(b, Tensor):
        out = Tensor(a.data + _as_scalar(b, a.data.dtype))
        return _record(out, (a,), lambda g: (g,))
    _check_same_dtype(a, b)
    if a.shape == b.shape:
        out = Tensor(a.data + b.data)
        return _record(out, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        out = Tensor(a.data + b.data)
        lead = tuple(range(a.ndim - 1))
        return _record(out, (a, b), lambda g: (g, g.sum(axis=lead)))
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not match "
                     "(only trailing-dim bias broadcast is supported)")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = Tensor(a.data - _as_scalar(b, a.data.dtype))
        return _record(out, (a,), lambda g: (g,))
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not match")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` is a scalar or a Tensor of identical shape."""
    if not isinstance(b, Tensor):
        s = _as_scalar(b, a.data.dtype)
        out = Tensor(a.data * s)
        return _record(out, (a,), lambda g: (g * s,))
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not match")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return _record(out, (a, b), lambda g: (g * bd, g * ad))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading dimensions.

    Gradients: dA = dOut @ B^T, dB = A^T @ dOut, with broadcast leading dims
    summed back to each operand's shape.
    """
    _check_same_dtype(a, b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul requires at least 1-D operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    ad, bd = a.data, b.data

    def grad_fn(g):
        if bd.ndim == 1:
            da = np.multiply.outer(g, bd) if g.ndim else g * bd
        else:
            da = np.matmul(g, np.swapaxes(bd, -1, -2))
        if ad.ndim == 1:
            db = np.multiply.outer(ad, g) if g.ndim else ad * g
        else:
            db = np.matmul(np.swapaxes(ad, -1, -2), g)
        return (_unbroadcast(da, ad.shape), _unbroadcast(db, bd.shape))

    return _record(out, (a, b), grad_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g over leading/broadcast dims so it matches ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# reductions and rearrangements
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None) -> Tensor:
    out = Tensor(x.data.sum(axis=axis))
    shape = x.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(shape) for ax in axes)
        ge = np.expand_dims(g, axes)
        return (np.broadcast_to(ge, shape).astype(g.dtype, copy=True),)

    return _record(out, (x,), grad_fn)


def tmean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= x.shape[ax]
    s = tsum(x, axis)
    return mul(s, 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    orig = x.shape
    return _record(out, (x,), lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes))
    return _record(out, (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty sequence")
    _check_same_dtype(*tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tuple(tensors), grad_fn)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[m, ...] = x[idx[m, ...], ...]; the index carries no gradient.

    Backward scatter-adds into the source rows, so repeated indices
    accumulate their multiplicity.
    """
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("gather_rows requires an integer index array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ContractError(f"gather index out of range for axis of extent {x.shape[0]}")
    out = Tensor(x.data[idx])
    src_shape = x.shape

    def grad_fn(g):
        dx = np.zeros(src_shape, dtype=g.dtype)
        np.add.at(dx, idx, g)
        return (dx,)

    return _record(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``; outputs are positive and sum to 1."""
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    ax = axis % x.ndim if x.ndim else 0
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=ax, keepdims=True)
    out = Tensor(out_data)

    def grad_fn(g):
        dot = (g * out_data).sum(axis=ax, keepdims=True)
        return (out_data * (g - dot),)

    return _record(out, (x,), grad_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("log_softmax received NaN input")
    ax = axis % x.ndim if x.ndim else 0
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out_data = shifted - lse
    out = Tensor(out_data)
    sm = np.exp(out_data)

    def grad_fn(g):
        return (g - sm * g.sum(axis=ax, keepdims=True),)

    return _record(out, (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out_data = np.empty_like(xd)
    pos = xd >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out = Tensor(out_data)
    return _record(out, (x,), lambda g: (g * out_data * (1.0 - out_data),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0).astype(x.data.dtype))
    return _record(out, (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = Tensor((xd * phi).astype(xd.dtype))

    def grad_fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (phi + xd * pdf),)

    return _record(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# spatial ops (channel-last)
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           pad: int = 0, groups: int = 1) -> Tensor:
    """2-D convolution of an (H, W, Cin) map with a (k, k, Cin/groups, Cout)
    kernel. Depth-wise when groups == Cin == Cout."""
    _check_same_dtype(x, w)
    if x.ndim != 3:
        raise ShapeError(f"conv2d expects an (H, W, C) input, got {x.shape}")
    if w.ndim != 4 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d expects a square (k, k, Cin/g, Cout) kernel, got {w.shape}")
    k = w.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"conv2d kernel extent must be odd, got {k}")
    H, W, cin = x.shape
    cout = w.shape[3]
    if cin % groups != 0 or cout % groups != 0:
        raise ConfigError(f"groups={groups} does not divide channels ({cin} in, {cout} out)")
    if w.shape[2] != cin // groups:
        raise ShapeError(f"kernel input channels {w.shape[2]} != {cin}/{groups}")
    ho = (H + 2 * pad - k) // stride + 1
    wo = (W + 2 * pad - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output would be empty for input {x.shape} with k={k}, "
                         f"stride={stride}, pad={pad}")

    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols = np.empty((ho, wo, k, k, cin), dtype=x.data.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj, :] = xp[ki:ki + stride * ho:stride,
                                       kj:kj + stride * wo:stride, :]

    depthwise = groups == cin and cout == cin
    if groups == 1:
        out_data = np.tensordot(cols, w.data, axes=([2, 3, 4], [0, 1, 2]))
    elif depthwise:
        out_data = np.einsum("hwijc,ijc->hwc", cols, w.data[:, :, 0, :])
    else:
        out_data = np.empty((ho, wo, cout), dtype=x.data.dtype)
        cg, og = cin // groups, cout // groups
        for gi in range(groups):
            out_data[:, :, gi * og:(gi + 1) * og] = np.tensordot(
                cols[:, :, :, :, gi * cg:(gi + 1) * cg],
                w.data[:, :, :, gi * og:(gi + 1) * og],
                axes=([2, 3, 4], [0, 1, 2]))
    if b is not None:
        _check_same_dtype(x, b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {b.shape} != ({cout},)")
        out_data = out_data + b.data
    out = Tensor(out_data)
    wd = w.data

    def grad_fn(g):
        if groups == 1:
            dcols = np.tensordot(g, wd, axes=([2], [3]))
            dw = np.tensordot(cols, g, axes=([0, 1], [0, 1]))
        elif depthwise:
            dcols = np.einsum("hwc,ijc->hwijc", g, wd[:, :, 0, :])
            dw = np.einsum("hwijc,hwc->ijc", cols, g)[:, :, None, :]
        else:
            dcols = np.empty_like(cols)
            dw = np.empty_like(wd)
            cg, og = cin // groups, cout // groups
            for gi in range(groups):
                gs = g[:, :, gi * og:(gi + 1) * og]
                dcols[:, :, :, :, gi * cg:(gi + 1) * cg] = np.tensordot(
                    gs, wd[:, :, :, gi * og:(gi + 1) * og], axes=([2], [3]))
                dw[:, :, :, gi * og:(gi + 1) * og] = np.tensordot(
                    cols[:, :, :, :, gi * cg:(gi + 1) * cg], gs, axes=([0, 1], [0, 1]))
        dxp = np.zeros((H + 2 * pad, W + 2 * pad, cin), dtype=g.dtype)
        for ki in range(k):
            for kj in range(k):
                dxp[ki:ki + stride * ho:stride, kj:kj + stride * wo:stride, :] += \
                    dcols[:, :, ki, kj, :]
        dx = dxp[pad:pad + H, pad:pad + W, :] if pad else dxp
        db = g.sum(axis=(0, 1)) if b is not None else None
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return _record(out, parents, grad_fn)


def pool2d(x: Tensor, mode: str, k: int, stride: int | None = None) -> Tensor:
    """Non-overlapping average or max pooling (kernel == stride).

    Max pooling routes the gradient to the window argmax only; ties go to
    the lowest linear index inside the window.
    """
    stride = k if stride is None else stride
    if stride != k:
        raise ConfigError(f"pool2d is non-overlapping only (k={k}, stride={stride})")
    if mode not in ("avg", "max"):
        raise ConfigError(f"pool2d mode must be 'avg' or 'max', got {mode!r}")
    if x.ndim != 3:
        raise ShapeError(f"pool2d expects an (H, W, C) input, got {x.shape}")
    H, W, C = x.shape
    if H % k or W % k:
        raise ShapeError(f"pool2d: extents ({H}, {W}) not divisible by {k}")
    ho, wo = H // k, W // k
    windows = x.data.reshape(ho, k, wo, k, C).transpose(0, 2, 1, 3, 4).reshape(ho, wo, k * k, C)

    if mode == "avg":
        out = Tensor(windows.mean(axis=2))

        def grad_fn(g):
            gw = np.broadcast_to(g[:, :, None, :] / (k * k), windows.shape)
            return (gw.reshape(ho, wo, k, k, C).transpose(0, 2, 1, 3, 4).reshape(H, W, C).copy(),)

        return _record(out, (x,), grad_fn)

    amax = windows.argmax(axis=2)
    out = Tensor(np.take_along_axis(windows, amax[:, :, None, :], axis=2).squeeze(axis=2))

    def grad_fn(g):
        gw = np.zeros_like(windows, dtype=g.dtype)
        np.put_along_axis(gw, amax[:, :, None, :], g[:, :, None, :], axis=2)
        return (gw.reshape(ho, wo, k, k, C).transpose(0, 2, 1, 3, 4).reshape(H, W, C).copy(),)

    return _record(out, (x,), grad_fn)


def upsample_bilinear(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Bilinear resize of an (h, w, C) map to (H, W, C), half-pixel centers."""
    if x.ndim != 3:
        raise ShapeError(f"upsample_bilinear expects an (h, w, C) input, got {x.shape}")
    h, w, C = x.shape
    H, W = out_hw

    def axis_coords(n_in, n_out):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        i0f = np.floor(c)
        t = c - i0f
        i0 = np.clip(i0f, 0, n_in - 1).astype(np.int64)
        i1 = np.clip(i0f + 1, 0, n_in - 1).astype(np.int64)
        return i0, i1, t.astype(x.data.dtype)

    r0, r1, tr = axis_coords(h, H)
    c0, c1, tc = axis_coords(w, W)
    w00 = np.outer(1 - tr, 1 - tc)[:, :, None]
    w01 = np.outer(1 - tr, tc)[:, :, None]
    w10 = np.outer(tr, 1 - tc)[:, :, None]
    w11 = np.outer(tr, tc)[:, :, None]
    xd = x.data
    out_data = (w00 * xd[np.ix_(r0, c0)] + w01 * xd[np.ix_(r0, c1)]
                + w10 * xd[np.ix_(r1, c0)] + w11 * xd[np.ix_(r1, c1)])
    out = Tensor(out_data.astype(xd.dtype))

    def grad_fn(g):
        dx = np.zeros((h, w, C), dtype=g.dtype)
        R0, C0 = np.meshgrid(r0, c0, indexing="ij")
        R1, C1 = np.meshgrid(r1, c1, indexing="ij")
        np.add.at(dx, (R0, C0), g * w00)
        np.add.at(dx, (R0, C1), g * w01)
        np.add.at(dx, (R1, C0), g * w10)
        np.add.at(dx, (R1, C1), g * w11)
        return (dx,)

    return _record(out, (x,), grad_fn)


def cosine_similarity_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Column-wise cosine similarities: out[i, j] = cos(a[:, i], b[:, j]).

    A zero-norm column yields similarity 0 against everything (and a zero
    gradient for those pairs).
    """
    _check_same_dtype(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"cosine_similarity_matrix expects (N, Ca) and (N, Cb), "
                         f"got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=0))
    nb = np.sqrt((bd * bd).sum(axis=0))
    inner = ad.T @ bd
    denom = np.outer(na, nb)
    nz = denom > 0
    sim = np.zeros_like(inner)
    np.divide(inner, denom, out=sim, where=nz)
    out = Tensor(sim)
    inv = np.zeros_like(denom)
    np.divide(1.0, denom, out=inv, where=nz)

    def grad_fn(g):
        gw = g * inv
        ca = (g * sim).sum(axis=1)
        cb = (g * sim).sum(axis=0)
        na2 = np.where(na > 0, na * na, 1.0)
        nb2 = np.where(nb > 0, nb * nb, 1.0)
        da = bd @ gw.T - ad * (ca / na2)
        db = ad @ gw - bd * (cb / nb2)
        return (da, db)

    return _record(out, (a, b), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing dimension, then apply the affine pair."""
    _check_same_dtype(x, gamma, beta)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ConfigError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} != ({C},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor((xhat * gamma.data + beta.data).astype(xd.dtype))
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gg = g * gd
        dx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        return (dx.astype(g.dtype), dgamma, dbeta)

    return _record(out, (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss.

    Accumulates into each requires_grad leaf's ``grad`` buffer and returns
    a map ``id(leaf) -> gradient contributed by this pass``. The tape is
    freed afterwards.
    """
    global _tape
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if _tape is None or loss._node is None:
        raise ContractError("backward called with an empty tape (loss was never recorded)")
    tape = _tape
    grads: list[np.ndarray | None] = [None] * (loss._node + 1)
    grads[loss._node] = np.ones_like(loss.data)
    leaf_grads: dict[int, np.ndarray] = {}
    leaf_refs: dict[int, Tensor] = {}

    for node in reversed(tape.nodes[:loss._node + 1]):
        g = grads[node._node]
        if g is None:
            continue
        parent_grads = node._grad_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is not None and parent._node < len(grads):
                prev = grads[parent._node]
                grads[parent._node] = pg if prev is None else prev + pg
            else:
                key = id(parent)
                if key in leaf_grads:
                    leaf_grads[key] = leaf_grads[key] + pg
                else:
                    leaf_grads[key] = pg
                    leaf_refs[key] = parent
        grads[node._node] = None

    for key, g in leaf_grads.items():
        leaf = leaf_refs[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    for node in tape.nodes:
        node._node = None
        node._parents = ()
        node._grad_fn = None
    _tape = None
    return leaf_grads


def finite_diff_check(f, theta: Tensor, eps: float = 1e-5,
                      coords: np.ndarray | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the parameter tensor to a scalar Tensor and must be
    deterministic. ``coords`` optionally restricts the probe to a subset of
    flat coordinates. Relative error uses a max(|a|, |n|, 1e-12) denominator.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ConfigError(f"eps={eps} outside [1e-6, 1e-3]")
    if not theta.requires_grad:
        raise ContractError("finite_diff_check needs a requires_grad parameter")

    _reset_tape()
    theta.zero_grad()
    y = f(theta)
    if not np.isfinite(y.data).all():
        raise NumericError("objective returned a non-finite value")
    backward(y)
    analytic = (theta.grad if theta.grad is not None
                else np.zeros_like(theta.data)).reshape(-1)

    flat = theta.data.reshape(-1)
    probe = np.arange(flat.size) if coords is None else np.asarray(coords)
    worst = 0.0
    with no_grad():
        for c in probe:
            orig = flat[c]
            flat[c] = orig + eps
            fp = f(theta).item()
            flat[c] = orig - eps
            fm = f(theta).item()
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("objective returned a non-finite value during probing")
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[c]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, rel)
    return worst
