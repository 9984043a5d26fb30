"""Discrete linear state-space filters.

A filter maps a scalar input sequence ``u`` to a scalar output ``y`` through
a hidden state ``x``::

    x[k+1] = A x[k] + B u[k]
    y[k]   = Re(C x[k]) + D u[k]

With ``x[0] = 0`` the same map is a causal convolution with the kernel
``F[j] = Re(C A^j B)`` delayed by one step, plus the ``D`` feedthrough.
Both evaluation routes live here, along with the stable reparameterization
used for training and fused differentiable ops for a bank of filters.

``A`` is either a full ``d x d`` matrix or a length-``d`` diagonal (possibly
complex).  Outputs are always real: complex modes are projected with ``Re``,
which is equivalent to carrying each mode together with its conjugate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.fft

from .autodiff import Tensor, make_node

STABILITY_MARGIN = 0.01


class StabilityError(ValueError):
    """Raised when a state matrix has spectral radius >= 1."""


@dataclass
class SsmParams:
    A: np.ndarray  # shape (d,) diagonal or (d, d) full
    B: np.ndarray  # shape (d,)
    C: np.ndarray  # shape (d,)
    D: float = 0.0

    def __post_init__(self):
        self.A = np.asarray(self.A)
        self.B = np.asarray(self.B).reshape(-1)
        self.C = np.asarray(self.C).reshape(-1)
        if self.A.ndim == 0:
            self.A = self.A.reshape(1)
        d = self.B.shape[0]
        if self.C.shape[0] != d:
            raise ValueError(f"B has {d} entries but C has {self.C.shape[0]}")
        if self.A.ndim == 1 and self.A.shape[0] != d:
            raise ValueError(f"diagonal A has {self.A.shape[0]} entries, state dim is {d}")
        if self.A.ndim == 2 and self.A.shape != (d, d):
            raise ValueError(f"full A has shape {self.A.shape}, expected ({d}, {d})")
        if self.A.ndim > 2:
            raise ValueError("A must be a diagonal vector or a square matrix")

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @property
    def diagonal(self) -> bool:
        return self.A.ndim == 1

    def spectral_radius(self) -> float:
        if self.diagonal:
            return float(np.abs(self.A).max())
        return float(np.abs(np.linalg.eigvals(self.A)).max())

    def as_full(self) -> "SsmParams":
        """The same system with its diagonal embedded in a dense matrix."""
        if not self.diagonal:
            return self
        return SsmParams(np.diag(self.A), self.B, self.C, self.D)


@dataclass
class Kernel:
    F: np.ndarray

    @property
    def L(self) -> int:
        return self.F.shape[0]


# ---------------------------------------------------------------------------
# Recurrent view
# ---------------------------------------------------------------------------

def ssm_step(p: SsmParams, x: np.ndarray, u: float):
    """One recurrence step; returns ``(x_next, y)``."""
    x = np.asarray(x)
    if x.shape != (p.d,):
        raise ValueError(f"state has shape {x.shape}, expected ({p.d},)")
    Ax = p.A * x if p.diagonal else p.A @ x
    x_next = Ax + p.B * u
    y = float(np.real(p.C @ x)) + p.D * u
    return x_next, y


def ssm_scan(p: SsmParams, u, x0: Optional[np.ndarray] = None) -> np.ndarray:
    """Unroll the recurrence over ``u`` starting from ``x0`` (zero by default)."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if u.shape[0] < 1:
        raise ValueError("input sequence must have at least one sample")
    dtype = np.result_type(p.A, p.B, p.C, np.float64)
    x = np.zeros(p.d, dtype=dtype) if x0 is None else np.asarray(x0, dtype=dtype)
    y = np.empty(u.shape[0])
    for k, uk in enumerate(u):
        x, y[k] = ssm_step(p, x, uk)
    return y


# ---------------------------------------------------------------------------
# Convolutional view
# ---------------------------------------------------------------------------

def materialize_kernel(p: SsmParams, L: int) -> Kernel:
    """``F[j] = Re(C A^j B)`` for ``j < L``."""
    if L < 1:
        raise ValueError(f"kernel length must be >= 1, got {L}")
    if p.spectral_radius() >= 1.0:
        raise StabilityError(f"spectral radius {p.spectral_radius():.6g} is not < 1")
    if p.diagonal:
        powers = _diag_powers(p.A.astype(np.complex128), L)  # (d, L)
        F = np.real((p.C * p.B) @ powers)
    else:
        F = np.empty(L)
        v = p.B.astype(np.result_type(p.A, p.B, np.float64))
        for j in range(L):
            F[j] = np.real(p.C @ v)
            v = p.A @ v
    return Kernel(np.asarray(F, dtype=np.float64))


def _diag_powers(A: np.ndarray, L: int) -> np.ndarray:
    """``A[..., None] ** arange(L)`` by running product (exact for dyadic and zero modes)."""
    steps = np.broadcast_to(A[..., None], A.shape + (L,)).copy()
    steps[..., 0] = 1.0
    return np.cumprod(steps, axis=-1)


def ssm_convolve(k: Kernel, u, D: float = 0.0, method: str = "direct") -> np.ndarray:
    """Causal convolution with a one-step delay: ``y[k] = sum_{j<k} F[k-1-j] u[j] + D u[k]``."""
    u = np.asarray(u)
    if u.ndim != 1 or u.shape[0] != k.L:
        raise ValueError(f"input length {u.shape} does not match kernel length {k.L}")
    L = k.L
    F = k.F.astype(u.dtype if u.dtype.kind == "f" else np.float64, copy=False)
    if method == "direct":
        y = np.zeros(L, dtype=F.dtype)
        for t in range(1, L):
            y[t] = np.dot(F[t - 1 :: -1][:t], u[:t])
    elif method == "fft":
        shifted = np.concatenate([[0.0], F[:-1]]).astype(F.dtype)
        y = causal_fft_conv(shifted, u)
    else:
        raise ValueError(f"unknown convolution method {method!r}")
    return y + D * u


def causal_fft_conv(kernel: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``y[t] = sum_{s<=t} kernel[t-s] u[s]`` along the last axis via zero-padded FFT."""
    L = u.shape[-1]
    n = scipy.fft.next_fast_len(2 * L, real=True)
    spec = scipy.fft.rfft(kernel, n=n, axis=-1) * scipy.fft.rfft(u, n=n, axis=-1)
    return scipy.fft.irfft(spec, n=n, axis=-1)[..., :L].astype(u.dtype, copy=False)


# ---------------------------------------------------------------------------
# Stable parameterization
# ---------------------------------------------------------------------------

@dataclass
class RawSsmParams:
    """Unconstrained diagonal-mode parameters of one filter."""

    mag_logit: np.ndarray  # (d,)
    phase: np.ndarray  # (d,)
    B: np.ndarray  # (d,) complex
    C: np.ndarray  # (d,) complex
    D: float = 0.0


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def mode_magnitude(mag_logit, margin: float = STABILITY_MARGIN):
    return _sigmoid(mag_logit) * (1.0 - margin)


def stabilize(raw: RawSsmParams, margin: float = STABILITY_MARGIN) -> SsmParams:
    """Map raw parameters to a diagonal system with every ``|A_i| < 1``."""
    A = mode_magnitude(raw.mag_logit, margin) * np.exp(1j * np.asarray(raw.phase, dtype=np.float64))
    return SsmParams(A, raw.B, raw.C, raw.D)


def init_raw_params(d: int, rng: np.random.Generator, margin: float = STABILITY_MARGIN) -> RawSsmParams:
    """Random initialization: slow-decaying modes with phases spread over [0, pi).

    The sigmoid fraction of each mode is drawn from U[0.90, 0.999], so
    ``|A_i|`` lands in ``[0.90, 0.999] * (1 - margin)``.
    """
    frac = rng.uniform(0.90, 0.999, size=d)
    scale = 1.0 / np.sqrt(d)
    return RawSsmParams(
        mag_logit=np.log(frac / (1.0 - frac)),
        phase=np.pi * np.arange(d) / d,
        B=(rng.standard_normal(d) + 1j * rng.standard_normal(d)) * scale / np.sqrt(2.0),
        C=(rng.standard_normal(d) + 1j * rng.standard_normal(d)) * scale / np.sqrt(2.0),
        D=float(rng.standard_normal()),
    )


# ---------------------------------------------------------------------------
# Differentiable filter bank
# ---------------------------------------------------------------------------

def kernel_bank(mag_logit: Tensor, phase: Tensor, b_re: Tensor, b_im: Tensor,
                c_re: Tensor, c_im: Tensor, L: int, margin: float = STABILITY_MARGIN) -> Tensor:
    """Kernels ``[H, L]`` for ``H`` diagonal filters given ``[H, d]`` raw parameters.

    The backward rule differentiates the per-mode geometric progression in
    closed form, so no ``[H, d, L]`` intermediate is kept beyond the forward.
    """
    dtype = mag_logit.data.dtype
    a = mag_logit.data.astype(np.float64)
    th = phase.data.astype(np.float64)
    sig = _sigmoid(a)
    m = sig * (1.0 - margin)
    A = m * np.exp(1j * th)
    Bc = b_re.data + 1j * b_im.data.astype(np.float64)
    Cc = c_re.data + 1j * c_im.data.astype(np.float64)
    W = Cc * Bc  # (H, d)
    P = _diag_powers(A, L)  # (H, d, L)
    F = np.real(np.einsum("hd,hdl->hl", W, P))

    def bw(g):
        g = g.astype(np.float64)
        S = np.einsum("hl,hdl->hd", g, P)  # sum_j g_j A^j
        jg = g[:, 1:] * np.arange(1, L)
        # holomorphic derivative of F w.r.t. A: W * sum_j j g_j A^{j-1}
        Q = W * np.einsum("hl,hdl->hd", jg, P[:, :, : L - 1]) if L > 1 else np.zeros_like(W)
        gW = np.conj(S)  # d loss/d Re W + i d loss/d Im W
        gC = gW * np.conj(Bc)
        gB = gW * np.conj(Cc)
        e = np.exp(1j * th)
        g_m = np.real(Q * e)
        g_th = -np.imag(Q * A)
        g_a = g_m * (1.0 - margin) * sig * (1.0 - sig)
        return tuple(x.astype(dtype) for x in (
            g_a, g_th, gB.real, gB.imag, gC.real, gC.imag))

    return make_node(F.astype(dtype), (mag_logit, phase, b_re, b_im, c_re, c_im), bw)


def ssm_conv(F: Tensor, D: Tensor, u: Tensor) -> Tensor:
    """Apply ``H`` filters to ``u[batch, L, H]``: delayed causal conv plus feedthrough."""
    if u.ndim != 3 or F.ndim != 2 or u.shape[2] != F.shape[0] or u.shape[1] != F.shape[1]:
        raise ValueError(f"ssm_conv shape mismatch: F {F.shape}, u {u.shape}")
    L = u.shape[1]
    dtype = u.data.dtype
    n = scipy.fft.next_fast_len(2 * L, real=True)
    ud = u.data.transpose(0, 2, 1)  # (batch, H, L)
    shifted = np.zeros_like(F.data)
    shifted[:, 1:] = F.data[:, :-1]
    Kf = scipy.fft.rfft(shifted, n=n, axis=-1)
    Uf = scipy.fft.rfft(ud, n=n, axis=-1)
    conv = scipy.fft.irfft(Kf * Uf, n=n, axis=-1)[..., :L]
    y = conv.transpose(0, 2, 1) + D.data * u.data

    def bw(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 1))
        Gf = scipy.fft.rfft(gt, n=n, axis=-1)
        gu = scipy.fft.irfft(np.conj(Kf) * Gf, n=n, axis=-1)[..., :L]
        gu = gu.transpose(0, 2, 1) + g * D.data
        gK = scipy.fft.irfft((Gf * np.conj(Uf)).sum(axis=0), n=n, axis=-1)[:, :L]
        gF = np.zeros_like(F.data)
        gF[:, :-1] = gK[:, 1:]
        gD = (g * u.data).sum(axis=(0, 1))
        return gF, gD.astype(dtype), gu.astype(dtype)

    return make_node(np.ascontiguousarray(y.astype(dtype, copy=False)), (F, D, u), bw)
