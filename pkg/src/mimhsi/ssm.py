"""Selective state-space (S6) kernels.

Three routes to the same recurrence h_t = Abar_t h_{t-1} + Bbar_t x_t,
y_t = C_t . h_t + D x_t:

  * a differentiable sequential scan (the training path),
  * a Blelloch prefix scan over the associative combine rule (must match the
    sequential route to 1e-10),
  * a frozen-parameter convolution kernel (LTI cross-check only).

A is diagonal per channel and kept strictly negative via A = -exp(A_log),
so |exp(delta * A)| < 1 whenever delta > 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _expm1_over_x_np


@dataclass
class SsmParams:
    """Per-layer S6 parameters; D model channels, N states per channel."""

    a_log: Tensor     # [D, N], A = -exp(a_log)
    w_b: Tensor       # [D, N] input -> B_t projection
    w_c: Tensor       # [D, N] input -> C_t projection
    w_dt: Tensor      # [D, 1] input -> timescale projection
    dt_bias: Tensor   # [D]
    d_skip: Tensor    # [D]
    conv_taps: Tensor # [K, D] depthwise causal taps (applied by the encoder)

    @property
    def d(self):
        return self.a_log.shape[0]

    @property
    def n(self):
        return self.a_log.shape[1]

    def named(self, prefix):
        for field in ("a_log", "w_b", "w_c", "w_dt", "dt_bias", "d_skip", "conv_taps"):
            yield f"{prefix}.{field}", getattr(self, field)


def init_ssm_params(rng, d, n=16, k=4):
    """A initialized to -(1..N) per channel; timescales start in [1e-3, 1e-1]."""
    a_log = np.log(np.tile(np.arange(1, n + 1, dtype=np.float64), (d, 1)))
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=d))
    dt_bias = np.log(np.expm1(dt))  # softplus inverse
    s = d ** -0.5
    return SsmParams(
        a_log=Tensor(a_log, requires_grad=True),
        w_b=Tensor(rng.normal(0.0, s, size=(d, n)), requires_grad=True),
        w_c=Tensor(rng.normal(0.0, s, size=(d, n)), requires_grad=True),
        w_dt=Tensor(rng.normal(0.0, s, size=(d, 1)), requires_grad=True),
        dt_bias=Tensor(dt_bias, requires_grad=True),
        d_skip=Tensor(np.ones(d), requires_grad=True),
        conv_taps=Tensor(rng.uniform(-(k ** -0.5), k ** -0.5, size=(k, d)), requires_grad=True),
    )


# -- zero-order hold ----------------------------------------------------------


def zoh_discretize(a, b, delta):
    """Exact ZOH of a diagonal system: Abar = exp(delta a), Bbar = phi(delta a) * delta b
    with phi(z) = (e^z - 1)/z (two-term Taylor below |z| = 1e-6).

    a: [D, N] (negative); b: [..., L, N]; delta: [..., L, D] (> 0).
    Returns (Abar, Bbar), both [..., L, D, N]. Pure-array helper.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("delta must be strictly positive")
    z = delta[..., None] * a
    a_bar = np.exp(z)
    b_bar = _expm1_over_x_np(z) * (delta[..., None] * b[..., None, :])
    return a_bar, b_bar


# -- associative scan ---------------------------------------------------------


def combine(e1, e2):
    """Compose two linear-recurrence elements (a, b): e1 applied first."""
    a1, b1 = e1
    a2, b2 = e2
    return a1 * a2, a2 * b1 + b2


def scan_sequential(a, u):
    """h_t = a_t h_{t-1} + u_t with h_0 prior = 0; a, u shaped [L, ...]."""
    h = np.zeros_like(u[0])
    out = np.empty_like(u)
    for t in range(u.shape[0]):
        h = a[t] * h + u[t]
        out[t] = h
    return out


def scan_parallel(a, u):
    """Blelloch work-efficient prefix scan over the combine rule above.

    The tree order is fixed, so results are bit-deterministic. Matches
    scan_sequential to floating-point noise for any L, including non-powers
    of two (padded with the identity element a=1, u=0).
    """
    length = a.shape[0]
    size = 1
    while size < length:
        size *= 2
    av = np.ones((size,) + a.shape[1:], dtype=np.float64)
    uv = np.zeros((size,) + u.shape[1:], dtype=np.float64)
    av[:length] = a
    uv[:length] = u

    offset = 1
    while offset < size:
        right = np.arange(2 * offset - 1, size, 2 * offset)
        left = right - offset
        uv[right] = av[right] * uv[left] + uv[right]
        av[right] = av[right] * av[left]
        offset *= 2

    # down-sweep turns the tree into an exclusive prefix
    av[size - 1] = 1.0
    uv[size - 1] = 0.0
    offset = size // 2
    while offset >= 1:
        right = np.arange(2 * offset - 1, size, 2 * offset)
        left = right - offset
        ta = av[left].copy()
        tu = uv[left].copy()
        av[left] = av[right]
        uv[left] = uv[right]
        uv[right] = ta * uv[left] + tu
        av[right] = av[left] * ta
        offset //= 2

    # inclusive h_t = a_t * exclusive_t + u_t
    return a * uv[:length] + u


# -- S6 ------------------------------------------------------------------------


def s6_project(x, params):
    """Input-dependent (B_t, C_t, delta_t) from x: linear maps to the state
    space plus softplus(bias + projection) for the timescale.

    x: Tensor [..., L, D] -> B_t, C_t [..., L, N]; delta [..., L, D] > 0.
    """
    b_t = ad.matmul(x, params.w_b)
    c_t = ad.matmul(x, params.w_c)
    delta = ad.softplus(ad.add(ad.matmul(x, params.w_dt), params.dt_bias))
    return b_t, c_t, delta


def _scan_core(a_bar, drive, c_t, x, d_skip):
    """Fused recurrence + readout primitive with a hand-written BPTT backward.

    a_bar, drive: [B, L, D, N]; c_t: [B, L, N]; x: [B, L, D]; d_skip: [D].
    """
    a = a_bar.data
    u = drive.data
    c = c_t.data
    xd = x.data
    bsz, length, d, n = a.shape
    hs = np.empty_like(a)
    h = np.zeros((bsz, d, n))
    for t in range(length):
        h = a[:, t] * h + u[:, t]
        hs[:, t] = h
    y = np.einsum("bldn,bln->bld", hs, c, optimize=True) + d_skip.data * xd

    def backward(g):
        gh = np.zeros((bsz, d, n))
        ga = np.empty_like(a)
        gu = np.empty_like(u)
        for t in range(length - 1, -1, -1):
            gh = gh + g[:, t, :, None] * c[:, t, None, :]
            ga[:, t] = gh * (hs[:, t - 1] if t > 0 else 0.0)
            gu[:, t] = gh
            gh = gh * a[:, t]
        gc = np.einsum("bld,bldn->bln", g, hs, optimize=True)
        gx = g * d_skip.data
        gd = (g * xd).sum(axis=(0, 1))
        return [ga, gu, gc, gx, gd]

    return ad.record("selective_scan", y, (a_bar, drive, c_t, x, d_skip), backward)


def _discretize_tape(x, params):
    """Tape-recorded ZOH pieces for the selective scan: (a_bar, drive, c_t)."""
    b_t, c_t, delta = s6_project(x, params)
    a = ad.neg(ad.exp(params.a_log))                      # [D, N], strictly negative
    delta_e = ad.reshape(delta, delta.shape + (1,))       # [B, L, D, 1]
    z = ad.mul(delta_e, a)                                # [B, L, D, N]
    a_bar = ad.exp(z)
    b_e = ad.reshape(b_t, b_t.shape[:-1] + (1, b_t.shape[-1]))  # [B, L, 1, N]
    x_e = ad.reshape(x, x.shape + (1,))                   # [B, L, D, 1]
    drive = ad.mul(ad.mul(ad.expm1_over_x(z), ad.mul(delta_e, b_e)), x_e)
    return a_bar, drive, c_t


def _ensure_batched(x):
    if x.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise ValueError("selective scan expects [L, D] or [B, L, D]")


def selective_scan_sequential(x, params):
    """Differentiable S6 forward: project, discretize, run the recurrence."""
    xb, squeeze = _ensure_batched(x)
    a_bar, drive, c_t = _discretize_tape(xb, params)
    y = _scan_core(a_bar, drive, c_t, xb, params.d_skip)
    return ad.reshape(y, y.shape[1:]) if squeeze else y


def selective_scan_parallel(x, params):
    """Same values as the sequential route via the Blelloch prefix scan.

    Evaluation-only (no tape); exists to cross-validate the recurrence.
    """
    with ad.no_grad():
        xb, squeeze = _ensure_batched(x)
        a_bar, drive, c_t = _discretize_tape(xb, params)
        # scan runs over the step axis, so move L in front
        a = np.moveaxis(a_bar.data, 1, 0)
        u = np.moveaxis(drive.data, 1, 0)
        hs = np.moveaxis(scan_parallel(a, u), 0, 1)
        y = np.einsum("bldn,bln->bld", hs, c_t.data, optimize=True)
        y = y + params.d_skip.data * xb.data
    if not np.all(np.isfinite(y)):
        raise ad.NumericError("non-finite value in selective_scan_parallel")
    return Tensor(y[0] if squeeze else y)


def lti_scan_sequential(x, a_bar, b_bar, c, d_skip=None):
    """Frozen-parameter recurrence (array path): the oracle for the kernel mode.

    x: [L, D]; a_bar, b_bar: [D, N]; c: [N]; d_skip: [D] or None.
    """
    x = np.asarray(x, dtype=np.float64)
    length = x.shape[0]
    a = np.broadcast_to(a_bar, (length,) + a_bar.shape)
    u = b_bar * x[..., None]
    hs = scan_sequential(a, u)
    y = np.einsum("ldn,n->ld", hs, c)
    if d_skip is not None:
        y = y + d_skip * x
    return y


def ssm_kernel_conv(x, a_bar, b_bar, c, d_skip=None):
    """LTI convolution form: K_l = C Abar^l Bbar, y = x (*) K (+ D x).

    Only valid when the parameters are time-invariant; a_bar must be [D, N].
    """
    a_bar = np.asarray(a_bar, dtype=np.float64)
    if a_bar.ndim != 2:
        raise ValueError("ssm_kernel_conv needs time-invariant [D, N] parameters")
    x = np.asarray(x, dtype=np.float64)
    length, d = x.shape
    kern = np.empty((length, d))
    w = np.asarray(b_bar, dtype=np.float64).copy()
    for l in range(length):
        kern[l] = w @ np.asarray(c, dtype=np.float64)
        w = w * a_bar
    y = np.zeros_like(x)
    for t in range(length):
        # y_t = sum_{l<=t} K_l x_{t-l}
        y[t] = np.einsum("ld,ld->d", kern[: t + 1], x[t::-1])
    if d_skip is not None:
        y = y + np.asarray(d_skip) * x
    return y
