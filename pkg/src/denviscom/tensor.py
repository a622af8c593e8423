"""Dense tensors with reverse-mode automatic differentiation.

Everything the correspondence model needs is built from the primitives in
this module: elementwise arithmetic, batched matmul, depthwise convolutions,
layer norm, masked softmax, and a few custom kernels (the state-space scan,
bilinear resize).  Each operation records a closure; ``Tensor.backward``
replays them in reverse topological order, so gradient accumulation follows
a single deterministic order.

Values are float64 by default so finite-difference checks have headroom;
float32 tensors are accepted for inference-style use and every op preserves
the input dtype.  Any operation that produces NaN or Inf raises
``NonFiniteError`` naming the op -- non-finite values are never silent.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ConfigError(ValueError):
    """A structural parameter (kernel size, head count, ...) is invalid."""


class ContractError(ValueError):
    """An operation precondition was violated."""


class DegenerateSliceError(ValueError):
    """A softmax slice had every entry masked to -inf."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense real array plus an optional slot on the gradient tape.

    ``data`` is a numpy array (float64 unless the caller asked for float32).
    Tensors are treated as immutable once created; the only sanctioned
    in-place mutation is an optimizer updating a leaf's ``data`` between
    graph builds.  ``grad`` accumulates across ``backward`` calls until the
    caller resets it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else np.float64)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("Tensor: constructed with non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- conveniences -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """The underlying array (a view -- do not mutate)."""
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{req})"

    # -- operator sugar -----------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    # -- reverse pass -------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable requires_grad tensor.

        The loss must be a scalar (a single element).  Traversal order is
        a deterministic reverse topological sort of the recorded tape.
        """
        if self.data.size != 1:
            raise ContractError(f"backward: loss must be scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def parameter(data, dtype=None) -> Tensor:
    """A leaf tensor that participates in gradient accumulation."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _all_finite(data: np.ndarray) -> bool:
    # One-pass reduction; NaN/Inf cannot cancel back to finite through IEEE
    # addition, so a finite sum implies finite entries.  A non-finite sum may
    # still be overflow of finite entries, hence the exact fallback.
    with np.errstate(over="ignore", invalid="ignore"):
        s = data.sum()
    return bool(np.isfinite(s)) or bool(np.isfinite(data).all())


def _result(data: np.ndarray, parents: tuple, backward, op: str, check: bool = True) -> Tensor:
    """Wrap an op result, attaching the tape record when tracking is on."""
    if check and not _all_finite(data):
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = backward if track else None
    return out


def _accum(t: Tensor, g: np.ndarray, shared: bool = False) -> None:
    """Add ``g`` into ``t.grad``.

    On first accumulation the array is adopted by reference when safe;
    ``shared=True`` forces a copy (callers pass it when ``g`` is an object a
    sibling parent also receives, e.g. the identity gradient of add).
    """
    if t.requires_grad:
        if t.grad is None:
            if shared or not g.flags.writeable or g.dtype != t.data.dtype:
                t.grad = np.array(g, dtype=t.data.dtype)
            else:
                t.grad = g
        else:
            t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------------


def _binary(a, b, fwd, grad_a, grad_b, op: str) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            data = fwd(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{op}: operands with shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            res = _unbroadcast(grad_a(g, a.data, b.data), a.shape)
            _accum(a, res, shared=res is g)
        if b.requires_grad:
            res = _unbroadcast(grad_b(g, a.data, b.data), b.shape)
            _accum(b, res, shared=res is g)

    return _result(data, (a, b), backward, op)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def div(a, b) -> Tensor:
    return _binary(a, b, np.divide, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y), "div")


def _unary(t, fwd, dfdx, op: str, check: bool = True) -> Tensor:
    t = _as_tensor(t)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        data = fwd(t.data)

    def backward(g):
        _accum(t, g * dfdx(t.data, data))

    return _result(data, (t,), backward, op, check=check)


def neg(t) -> Tensor:
    return _unary(t, np.negative, lambda x, y: -np.ones_like(x), "neg")


def texp(t) -> Tensor:
    return _unary(t, np.exp, lambda x, y: y, "exp")


def tlog(t) -> Tensor:
    return _unary(t, np.log, lambda x, y: 1.0 / x, "log")


def tsqrt(t) -> Tensor:
    return _unary(t, np.sqrt, lambda x, y: 0.5 / y, "sqrt")


def tabs(t) -> Tensor:
    return _unary(t, np.abs, lambda x, y: np.sign(x), "abs")


def relu(t) -> Tensor:
    return _unary(t, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(x.dtype), "relu")


def sigmoid(t) -> Tensor:
    return _unary(t, expit, lambda x, y: y * (1.0 - y), "sigmoid")


def silu(t) -> Tensor:
    """x * sigmoid(x)."""

    def dfdx(x, y):
        s = expit(x)
        return s * (1.0 + x * (1.0 - s))

    return _unary(t, lambda x: x * expit(x), dfdx, "silu")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(t) -> Tensor:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""

    def fwd(x):
        return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))

    def dfdx(x, y):
        phi = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        return cdf + x * phi

    return _unary(t, fwd, dfdx, "gelu")


def _softplus_fwd(x: np.ndarray) -> np.ndarray:
    # stable log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    out = np.log1p(np.exp(-np.abs(x)))
    out += np.maximum(x, 0.0)
    return out


def softplus(t) -> Tensor:
    return _unary(t, _softplus_fwd, lambda x, y: expit(x), "softplus")


def _phi_zoh(z: np.ndarray) -> np.ndarray:
    """(e^z - 1) / z with the removable singularity filled by its series."""
    z = np.asarray(z, dtype=np.float64)
    out = np.asarray(np.expm1(z))
    small = np.abs(z) < 1e-8
    if small.any():
        out = np.asarray(out / np.where(small, 1.0, z))
        out[small] = 1.0 + 0.5 * z[small]
    else:
        out /= z
    return out


def _phi_zoh_prime(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < 1e-4
    if small.any():
        z_safe = np.where(small, 1.0, z)
        direct = np.asarray((np.exp(z_safe) * (z_safe - 1.0) + 1.0) / (z_safe * z_safe))
        zs = z[small]
        direct[small] = 0.5 + zs / 3.0 + zs * zs / 8.0 + zs * zs * zs / 30.0
        return direct
    return (np.exp(z) * (z - 1.0) + 1.0) / (z * z)


def zoh_phi(t) -> Tensor:
    """Elementwise (e^z - 1)/z, the hold factor in exact ZOH discretization."""
    return _unary(t, _phi_zoh, lambda x, y: _phi_zoh_prime(x), "zoh_phi")


# -- shape manipulation -------------------------------------------------------


def getitem(t: Tensor, idx) -> Tensor:
    t = _as_tensor(t)
    data = t.data[idx]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data)

    def backward(g):
        buf = np.zeros_like(t.data)
        buf[idx] = g
        _accum(t, buf)

    return _result(data, (t,), backward, "getitem", check=False)


def reshape(t, shape) -> Tensor:
    t = _as_tensor(t)
    try:
        data = t.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {t.shape} as {tuple(shape)}")

    def backward(g):
        _accum(t, g.reshape(t.shape))

    return _result(data, (t,), backward, "reshape", check=False)


def transpose(t, axes) -> Tensor:
    t = _as_tensor(t)
    axes = tuple(axes)
    data = t.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(t, g.transpose(inv))

    return _result(data, (t,), backward, "transpose", check=False)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _result(data, tuple(tensors), backward, "concat", check=False)


def tensor_sum(t, axis=None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(t)
    data = t.data.sum(axis=axis, keepdims=keepdims)
    if not isinstance(data, np.ndarray):
        data = np.asarray(data)

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(t, np.broadcast_to(gg, t.shape))

    return _result(data, (t,), backward, "sum", check=False)


def tensor_mean(t, axis=None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(t)
    data = t.data.mean(axis=axis, keepdims=keepdims)
    if not isinstance(data, np.ndarray):
        data = np.asarray(data)
    count = t.data.size // max(data.size, 1)

    def backward(g):
        gg = g / count
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(t, np.broadcast_to(gg, t.shape))

    return _result(data, (t,), backward, "mean", check=False)


# -- core linear algebra ------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product; leading dims must agree or broadcast from 1."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} vs {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions do not broadcast: {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(data, (a, b), backward, "matmul")


def linear(x, w, b=None) -> Tensor:
    """Affine map over the last dimension: x @ w (+ b)."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def masked_fill(t, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by ``value`` (may be -inf)."""
    t = _as_tensor(t)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), t.shape)
    data = np.where(mask, np.asarray(value, dtype=t.dtype), t.data)

    def backward(g):
        _accum(t, np.where(mask, 0.0, g))

    return _result(data, (t,), backward, "masked_fill", check=False)


def softmax_lastdim(t) -> Tensor:
    """Softmax along the last dimension, max-subtracted for stability.

    Entries equal to -inf get exactly zero probability.  A slice whose
    entries are all -inf has no distribution and raises
    ``DegenerateSliceError``.
    """
    t = _as_tensor(t)
    if t.shape[-1] < 1:
        raise ShapeError("softmax_lastdim: last dimension must be >= 1")
    m = np.max(t.data, axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateSliceError("softmax_lastdim: a slice is fully masked (all -inf)")
    e = np.exp(t.data - m)
    denom = e.sum(axis=-1, keepdims=True)
    y = e / denom

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accum(t, y * (g - inner))

    return _result(y, (t,), backward, "softmax_lastdim")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to mean 0, population variance 1, then affine."""
    if eps <= 0:
        raise ContractError(f"layer_norm: eps must be > 0, got {eps}")
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: affine params {gamma.shape}/{beta.shape} do not match last dim of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gamma.data * xhat + beta.data

    def backward(g):
        if x.requires_grad:
            dxhat = g * gamma.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * term)
        reduce_axes = tuple(range(x.ndim - 1))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=reduce_axes))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=reduce_axes))

    return _result(y, (x, gamma, beta), backward, "layer_norm")


def depthwise_conv1d(x, kernel, bias=None) -> Tensor:
    """Per-channel correlation along the last axis with symmetric zero padding.

    ``x`` is [..., C, L], ``kernel`` is [C, K] with K odd, ``bias`` is [C].
    Output length equals input length (non-causal, pad (K-1)/2 each side).
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if kernel.ndim != 2:
        raise ShapeError(f"depthwise_conv1d: kernel must be [C, K], got {kernel.shape}")
    c, k = kernel.shape
    if k % 2 == 0:
        raise ConfigError(f"depthwise_conv1d: kernel length must be odd, got {k}")
    if x.ndim < 2 or x.shape[-2] != c:
        raise ShapeError(f"depthwise_conv1d: input {x.shape} does not carry {c} channels")
    bias_t = _as_tensor(bias) if bias is not None else None
    if bias_t is not None and bias_t.shape != (c,):
        raise ShapeError(f"depthwise_conv1d: bias {bias_t.shape} does not match {c} channels")
    pad = (k - 1) // 2
    pad_spec = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    xp = np.pad(x.data, pad_spec)
    win = sliding_window_view(xp, k, axis=-1)  # [..., C, L, K]
    y = np.einsum("...clk,ck->...cl", win, kernel.data)
    if bias_t is not None:
        y = y + bias_t.data[:, None]

    def backward(g):
        if x.requires_grad:
            gp = np.pad(g, pad_spec)
            gwin = sliding_window_view(gp, k, axis=-1)
            _accum(x, np.einsum("...clk,ck->...cl", gwin, kernel.data[:, ::-1]))
        if kernel.requires_grad:
            dk = np.einsum("...clk,...cl->...ck", win, g)
            _accum(kernel, dk.reshape(-1, c, k).sum(axis=0))
        if bias_t is not None and bias_t.requires_grad:
            axes = tuple(range(g.ndim - 2)) + (g.ndim - 1,)
            _accum(bias_t, g.sum(axis=axes))

    parents = (x, kernel) if bias_t is None else (x, kernel, bias_t)
    return _result(y, parents, backward, "depthwise_conv1d")


def conv2d(x, w, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation: x [..., Cin, H, W], w [Cout, Cin, K, K].

    Implemented as im2col + matrix product so the heavy lifting runs in BLAS.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    cout, cin, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"conv2d: square kernels only, got {w.shape}")
    if x.ndim < 3 or x.shape[-3] != cin:
        raise ShapeError(f"conv2d: input {x.shape} does not carry {cin} channels")
    bias_t = _as_tensor(bias) if bias is not None else None
    pad_spec = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    xp = np.pad(x.data, pad_spec)
    win = sliding_window_view(xp, (k, k), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    # [..., Cin, Ho, Wo, K, K] -> [..., Ho, Wo, Cin, K, K] -> (rows, Cin*K*K)
    cols = np.ascontiguousarray(np.moveaxis(win, -5, -3))
    batch = cols.shape[: x.ndim - 3]
    h_out, w_out = cols.shape[x.ndim - 3], cols.shape[x.ndim - 2]
    mat = cols.reshape(-1, cin * k * k)
    wmat = w.data.reshape(cout, -1)
    y2 = mat @ wmat.T
    if bias_t is not None:
        y2 = y2 + bias_t.data
    y = np.moveaxis(y2.reshape(batch + (h_out, w_out, cout)), -1, -3)

    def backward(g):
        g2 = np.ascontiguousarray(np.moveaxis(g, -3, -1)).reshape(-1, cout)
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(batch + (h_out, w_out, cin, k, k))
            dxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    tap = np.moveaxis(dcols[..., ki, kj], -1, -3)  # [..., Cin, Ho, Wo]
                    dxp[..., ki : ki + stride * h_out : stride, kj : kj + stride * w_out : stride] += tap
            sl = [slice(None)] * (x.ndim - 2) + [slice(pad, pad + x.shape[-2]), slice(pad, pad + x.shape[-1])]
            _accum(x, dxp[tuple(sl)])
        if w.requires_grad:
            _accum(w, (g2.T @ mat).reshape(w.shape))
        if bias_t is not None and bias_t.requires_grad:
            _accum(bias_t, g2.sum(axis=0))

    parents = (x, w) if bias_t is None else (x, w, bias_t)
    return _result(y, parents, backward, "conv2d")


# -- custom kernels -----------------------------------------------------------


def ssm_scan(a_bar, b_bar, c_t, x) -> Tensor:
    """Linear state recurrence h_t = A_t h_{t-1} + B_t x_t, y_t = <C_t, h_t>.

    Shapes (anything broadcastable to the full [..., C, N, L] layout):
      a_bar, b_bar : [..., C, N, L]  per-channel diagonal transition / input
      c_t          : [..., C, N, L]-broadcastable readout (e.g. [..., 1, N, L]
                     for a readout shared across channels, or [C, N, 1] for a
                     time-invariant per-channel readout)
      x            : [..., C, L]
    Returns y with the shape of x.  The per-step loop is the only sequential
    part; everything inside a step is vectorized.
    """
    a_bar, b_bar, c_t, x = (_as_tensor(v) for v in (a_bar, b_bar, c_t, x))
    if x.ndim < 2:
        raise ShapeError(f"ssm_scan: x must be [..., C, L], got {x.shape}")
    channels, length = x.shape[-2], x.shape[-1]
    try:
        full = np.broadcast_shapes(
            a_bar.shape, b_bar.shape, c_t.shape, x.shape[:-2] + (channels, 1, length)
        )
    except ValueError:
        raise ShapeError(
            f"ssm_scan: a_bar {a_bar.shape} / b_bar {b_bar.shape} / c_t {c_t.shape} "
            f"do not broadcast with x {x.shape}"
        )
    n_state = full[-2]
    batch = full[:-3]

    # Materialize step-major copies so the loop slices contiguously.
    ab = np.ascontiguousarray(np.moveaxis(np.broadcast_to(a_bar.data, full), -1, 0))
    bb = np.ascontiguousarray(np.moveaxis(np.broadcast_to(b_bar.data, full), -1, 0))
    ct = np.ascontiguousarray(np.moveaxis(np.broadcast_to(c_t.data, full), -1, 0))
    xs = np.ascontiguousarray(
        np.moveaxis(np.broadcast_to(x.data, batch + (channels, length)), -1, 0)
    )

    hs = np.empty((length,) + batch + (channels, n_state), dtype=ab.dtype)
    ys = np.empty((length,) + batch + (channels,), dtype=ab.dtype)
    h = np.zeros(batch + (channels, n_state), dtype=ab.dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(length):
            h = ab[t] * h + bb[t] * xs[t][..., None]
            hs[t] = h
            ys[t] = (h * ct[t]).sum(axis=-1)
    if not np.isfinite(hs).all():
        bad = int(np.where(~np.isfinite(hs).reshape(length, -1).all(axis=1))[0][0])
        raise NonFiniteError(f"ssm_scan: non-finite state at step {bad}")

    y = np.moveaxis(ys, 0, -1)

    def backward(g):
        gs = np.ascontiguousarray(np.moveaxis(np.broadcast_to(g, batch + (channels, length)), -1, 0))
        dab = np.empty_like(ab)
        dbb = np.empty_like(bb)
        dct = np.empty_like(ct)
        dxs = np.empty_like(xs)
        dh_next = np.zeros(batch + (channels, n_state), dtype=ab.dtype)
        zero_h = np.zeros(batch + (channels, n_state), dtype=ab.dtype)
        for t in range(length - 1, -1, -1):
            gt_col = gs[t][..., None]
            dct[t] = hs[t] * gt_col
            dh = gt_col * ct[t] + dh_next
            h_prev = hs[t - 1] if t > 0 else zero_h
            dab[t] = dh * h_prev
            dbb[t] = dh * xs[t][..., None]
            dxs[t] = (bb[t] * dh).sum(axis=-1)
            dh_next = ab[t] * dh
        if a_bar.requires_grad:
            _accum(a_bar, _unbroadcast(np.moveaxis(dab, 0, -1), a_bar.shape))
        if b_bar.requires_grad:
            _accum(b_bar, _unbroadcast(np.moveaxis(dbb, 0, -1), b_bar.shape))
        if c_t.requires_grad:
            _accum(c_t, _unbroadcast(np.moveaxis(dct, 0, -1), c_t.shape))
        if x.requires_grad:
            _accum(x, _unbroadcast(np.moveaxis(dxs, 0, -1), x.shape))

    return _result(y, (a_bar, b_bar, c_t, x), backward, "ssm_scan", check=False)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic 1-D linear interpolation matrix (align-corners)."""
    m = np.zeros((n_out, n_in))
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.clip(np.floor(src).astype(int), 0, max(n_in - 2, 0))
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    m[rows, i0] += 1.0 - frac
    m[rows, i1] += frac
    return m


def bilinear_resize(t, out_hw: tuple[int, int]) -> Tensor:
    """Bilinear resample of the last two axes (align-corners convention).

    With align-corners sampling a linear ramp is reproduced exactly, which is
    what field upsampling relies on.  Separable: y = Ry x Rx^T with 1-D
    interpolation matrices, so forward and backward are plain matmuls.
    """
    t = _as_tensor(t)
    h_in, w_in = t.shape[-2], t.shape[-1]
    h_out, w_out = out_hw
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"bilinear_resize: invalid output size {out_hw}")
    ry = _interp_matrix(h_in, h_out)
    rx = _interp_matrix(w_in, w_out)
    y = ry @ t.data @ rx.T

    def backward(g):
        _accum(t, ry.T @ g @ rx)

    return _result(y, (t,), backward, "bilinear_resize", check=False)


# -- gradient verification ----------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of an analytic-vs-central-difference comparison."""

    max_rel_dev: float
    tol: float
    step: float
    worst_index: tuple[int, ...]
    passed: bool

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return (
            f"grad_check {verdict}: max relative deviation {self.max_rel_dev:.3e} "
            f"(tol {self.tol:.1e}, step {self.step:.1e}, worst at {self.worst_index})"
        )


def grad_check(f, x: Tensor, step: float = 1e-5, tol: float = 1e-3) -> GradCheckReport:
    """Compare the tape gradient of ``f`` at ``x`` with central differences.

    ``f`` maps a Tensor to a scalar Tensor.  Returns the per-element maximum
    relative deviation; the check passes iff it is <= ``tol``.  Relative
    deviation uses a small floor so near-zero gradients do not amplify
    finite-difference noise.
    """
    if step <= 0:
        raise ContractError(f"grad_check: step must be > 0, got {step}")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ContractError("grad_check: function must produce a scalar")
    out.backward()
    analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)

    numeric = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(leaf).item()
            flat[i] = orig - step
            lo = f(leaf).item()
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel, tol, step, worst, max_rel <= tol)
