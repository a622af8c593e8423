"""State-space sequence machinery: ZOH discretization, linear and selective scans.

A diagonal state-space layer maps an input sequence x_1..x_M to an output
sequence through a hidden state h of size N per channel:

    h_t = Abar h_{t-1} + Bbar x_t,      y_t = <C, h_t>,      h_0 = 0.

``Abar``/``Bbar`` come from zero-order-hold discretization of a continuous
diagonal system (A, B) with timescale delta:

    Abar = exp(delta * A)
    Bbar = phi(delta * A) * delta * B,   phi(z) = (e^z - 1) / z,  phi(0) = 1.

Time-invariant parameters admit an equivalent convolution with the kernel
(C Bbar, C Abar Bbar, ..., C Abar^{M-1} Bbar); ``lti_kernel``/``lti_convolve``
provide that second route so the recurrence can be cross-checked against it.
The selective variant derives delta, B and C from the input at every step,
which is what the block mixer uses in production.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor, _phi_zoh


def zoh_discretize(a, b, delta):
    """Exact zero-order-hold discretization of a diagonal system.

    ``a`` holds the diagonal entries (any broadcastable shape), ``b`` the
    input projection, ``delta`` the positive timescale.  Near delta*a == 0
    the hold factor is evaluated by its series, whose limit is Bbar =
    delta*b.  Accepts numpy arrays or Tensors; Tensor inputs stay on the
    gradient tape.
    """
    tensor_mode = any(isinstance(v, Tensor) for v in (a, b, delta))
    delta_arr = delta.data if isinstance(delta, Tensor) else np.asarray(delta, dtype=np.float64)
    if not (delta_arr > 0).all():
        raise ContractError(f"zoh_discretize: delta must be > 0, got min {delta_arr.min()}")
    if tensor_mode:
        a, b, delta = T._as_tensor(a), T._as_tensor(b), T._as_tensor(delta)
        z = T.mul(delta, a)
        a_bar = T.texp(z)
        b_bar = T.mul(T.mul(T.zoh_phi(z), delta), b)
        return a_bar, b_bar
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    z = delta_arr * a
    return np.exp(z), _phi_zoh(z) * delta_arr * b


@dataclass
class SsmParams:
    """Continuous diagonal SSM parameters, one row of N entries per channel.

    ``a`` is the diagonal of the state matrix (negative-leaning at init for
    stability), ``b`` and ``c`` the input/output projections, ``delta`` the
    per-channel timescale.
    """

    a: np.ndarray  # (C, N)
    b: np.ndarray  # (C, N)
    c: np.ndarray  # (C, N)
    delta: np.ndarray  # (C,)

    def __post_init__(self):
        self.a = np.atleast_2d(np.asarray(self.a, dtype=np.float64))
        self.b = np.atleast_2d(np.asarray(self.b, dtype=np.float64))
        self.c = np.atleast_2d(np.asarray(self.c, dtype=np.float64))
        self.delta = np.atleast_1d(np.asarray(self.delta, dtype=np.float64))
        if not (self.delta > 0).all():
            raise ContractError(f"SsmParams: delta must be > 0, got min {self.delta.min()}")

    def discretize(self) -> tuple[np.ndarray, np.ndarray]:
        return zoh_discretize(self.a, self.b, self.delta[:, None])

    @classmethod
    def random(cls, rng: np.random.Generator, channels: int, n_state: int) -> "SsmParams":
        return cls(
            a=-rng.uniform(0.05, 2.0, size=(channels, n_state)),
            b=rng.normal(size=(channels, n_state)),
            c=rng.normal(size=(channels, n_state)),
            delta=rng.uniform(0.05, 1.0, size=channels),
        )


def _canon_lti(arr, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64) if not isinstance(arr, Tensor) else arr.data
    if out.ndim == 0:
        out = out.reshape(1, 1)
    elif out.ndim == 1:
        out = out[None, :]
    if out.ndim != 2:
        raise T.ShapeError(f"{name} must be scalar, (N,) or (C, N), got shape {out.shape}")
    return out


def scan_recurrence(a_bar, b_bar, c_out, x):
    """Run the discretized recurrence over a sequence (the production scan path).

    ``a_bar``/``b_bar``/``c_out`` are time-invariant, shaped (C, N) (scalars
    and (N,) are promoted); ``x`` is [..., C, L] or (L,).  Returns a Tensor of
    the same shape as ``x``; differentiable end-to-end when given Tensors.
    """
    squeeze = False
    if not isinstance(x, Tensor) and np.asarray(x).ndim == 1:
        x = np.asarray(x, dtype=np.float64)[None, :]
        squeeze = True
    ab = _canon_lti(a_bar, "a_bar")
    bb = _canon_lti(b_bar, "b_bar")
    cc = _canon_lti(c_out, "c_out")
    xt = T._as_tensor(x)
    if xt.shape[-1] < 1:
        raise ContractError("scan_recurrence: sequence length must be >= 1")
    y = T.ssm_scan(
        T._as_tensor(ab[:, :, None]),
        T._as_tensor(bb[:, :, None]),
        T._as_tensor(cc[:, :, None]),
        xt,
    )
    return T.reshape(y, (y.shape[-1],)) if squeeze else y


def lti_kernel(a_bar, b_bar, c_out, length: int) -> np.ndarray:
    """Structured convolution kernel (C Bbar, C Abar Bbar, ..., C Abar^{M-1} Bbar).

    Returns shape (C, length) for (C, N) parameters, or (length,) when the
    inputs describe a single channel.
    """
    if length < 1:
        raise ContractError(f"lti_kernel: length must be >= 1, got {length}")
    single = np.asarray(a_bar).ndim <= 1 and not isinstance(a_bar, Tensor)
    ab = _canon_lti(a_bar, "a_bar")
    bb = _canon_lti(b_bar, "b_bar")
    cc = _canon_lti(c_out, "c_out")
    powers = ab[:, :, None] ** np.arange(length)  # (C, N, M)
    kernel = np.einsum("cn,cnm->cm", cc * bb, powers)
    return kernel[0] if single else kernel


def lti_convolve(x, kernel) -> np.ndarray:
    """Causal convolution y_t = sum_tau kernel[tau] * x_{t-tau}.

    ``x`` is [..., C, L] (or (L,) against a (M,) kernel).  Kernels longer
    than the sequence are truncated to the sequence length.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
        kernel = np.atleast_2d(kernel)
    length = x.shape[-1]
    y = np.zeros_like(x)
    for tau in range(min(kernel.shape[-1], length)):
        y[..., tau:] += kernel[..., tau, None] * x[..., : length - tau]
    return y[0] if squeeze else y


@dataclass
class SelectiveScanWeights:
    """Learned projections for the input-dependent scan over C channels.

    The state diagonal is parameterized as A = -exp(a_log) so it stays
    negative however training moves it.  delta goes through softplus for
    positivity.  B/C projections carry biases so the layer can be frozen to
    a time-invariant configuration (zero weights, constant biases), which is
    also what the ``lti`` switch uses.
    """

    a_log: Tensor  # (C, N)
    w_delta: Tensor  # (C, C)
    b_delta: Tensor  # (C,)
    w_b: Tensor  # (C, N)
    b_b: Tensor  # (N,)
    w_c: Tensor  # (C, N)
    b_c: Tensor  # (N,)

    @property
    def channels(self) -> int:
        return self.a_log.shape[0]

    @property
    def n_state(self) -> int:
        return self.a_log.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, n_state: int) -> "SelectiveScanWeights":
        """Standard real diagonal init: A = -(1..N) per channel, delta in [1e-3, 1e-1]."""
        a_log = np.tile(np.log(np.arange(1, n_state + 1, dtype=np.float64)), (channels, 1))
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=channels))
        b_delta = np.log(np.expm1(dt))  # softplus inverse
        scale = 1.0 / np.sqrt(channels)
        return cls(
            a_log=T.parameter(a_log),
            w_delta=T.parameter(rng.normal(0.0, scale, size=(channels, channels))),
            b_delta=T.parameter(b_delta),
            w_b=T.parameter(rng.normal(0.0, scale, size=(channels, n_state))),
            b_b=T.parameter(np.zeros(n_state)),
            w_c=T.parameter(rng.normal(0.0, scale, size=(channels, n_state))),
            b_c=T.parameter(np.zeros(n_state)),
        )


def selective_scan(x, weights: SelectiveScanWeights, lti: bool = False) -> Tensor:
    """Input-dependent scan: delta_t, B_t, C_t are projections of x_t.

    ``x`` is [..., C, L].  With ``lti=True`` the projections are ignored and
    only the (constant) biases drive the recurrence, which reduces the layer
    exactly to ``scan_recurrence`` semantics while exercising the same kernel.
    """
    x = T._as_tensor(x)
    if x.ndim < 2:
        raise T.ShapeError(f"selective_scan: x must be [..., C, L], got {x.shape}")
    channels, n = weights.channels, weights.n_state
    if x.shape[-2] != channels:
        raise T.ShapeError(f"selective_scan: x carries {x.shape[-2]} channels, weights expect {channels}")
    batch = x.shape[:-2]
    length = x.shape[-1]

    a_diag = T.neg(T.texp(weights.a_log))  # (C, N), always negative

    if lti:
        delta = T.reshape(T.softplus(weights.b_delta), (channels, 1, 1))
        bt = T.reshape(weights.b_b, (1, n, 1))
        ct = T.reshape(weights.b_c, (1, n, 1))
    else:
        perm = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
        xt = T.transpose(x, perm)  # [..., L, C]
        delta_lc = T.softplus(T.linear(xt, weights.w_delta, weights.b_delta))
        bt_ln = T.linear(xt, weights.w_b, weights.b_b)
        ct_ln = T.linear(xt, weights.w_c, weights.b_c)
        delta = T.reshape(T.transpose(delta_lc, perm), batch + (channels, 1, length))
        bt = T.reshape(T.transpose(bt_ln, perm), batch + (1, n, length))
        ct = T.reshape(T.transpose(ct_ln, perm), batch + (1, n, length))

    z = T.mul(delta, T.reshape(a_diag, (channels, n, 1)))
    a_bar = T.texp(z)
    b_bar = T.mul(T.mul(T.zoh_phi(z), delta), bt)
    return T.ssm_scan(a_bar, b_bar, ct, x)
