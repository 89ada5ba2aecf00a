"""2-D discrete Fourier analysis of feature maps and Gaussian low-pass filtering.

All transforms act on the last two axes, so C×H×W feature maps and N×C×H×W
batches are handled alike. The forward transform is unnormalised and the
inverse carries the 1/(HW) factor. Computation is in float64 regardless of
the input precision.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Literal

import numpy as np

from .errors import ConfigError, ContractError, ShapeError, SymmetryError
from .tensorcore import Tensor, apply_op

FilterKind = Literal["gaussian", "allpass"]

# absolute floor for the imaginary-residue check; scaled by the input magnitude
SYMMETRY_TOL = 1e-6


@dataclass(frozen=True)
class Spectrum:
    data: np.ndarray  # complex128, (..., H, W)
    layout: Literal["natural", "centered"] = "natural"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def centered(self) -> "Spectrum":
        if self.layout == "centered":
            return self
        return Spectrum(np.fft.fftshift(self.data, axes=(-2, -1)), "centered")

    def natural(self) -> "Spectrum":
        if self.layout == "natural":
            return self
        return Spectrum(np.fft.ifftshift(self.data, axes=(-2, -1)), "natural")


@dataclass(frozen=True)
class FreqFilter:
    values: np.ndarray  # float64, (H, W), natural layout
    d0: float
    beta: float
    kind: FilterKind

    @property
    def shape(self) -> tuple:
        return self.values.shape


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def _fft2_raw(x: np.ndarray) -> np.ndarray:
    return np.fft.fft2(np.asarray(x, dtype=np.float64), axes=(-2, -1))


def _ifft2_raw(s: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(s, axes=(-2, -1))


@lru_cache(maxsize=None)
def _dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    m = np.exp(-2j * np.pi * np.outer(k, k) / n)
    m.setflags(write=False)
    return m


def naive_dft2(x: np.ndarray) -> np.ndarray:
    """Direct evaluation of the DFT sums, one DFT matrix per axis (O(HW(H+W)))."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    return np.einsum("va,...ab,ub->...vu", _dft_matrix(h), x, _dft_matrix(w))


def _check_real(z: np.ndarray, scale: float) -> np.ndarray:
    if z.size:
        resid = float(np.max(np.abs(z.imag)))
        if resid >= SYMMETRY_TOL * max(1.0, scale):
            raise SymmetryError(f"inverse DFT imaginary residue {resid:.3g} is not negligible")
    return z.real


# ---------------------------------------------------------------------------
# public transforms
# ---------------------------------------------------------------------------

def dft2(x, method: Literal["fast", "naive"] = "fast") -> Spectrum:
    """Per-channel unnormalised 2-D DFT over the last two axes.

    ``fast`` is an O(HW log HW) FFT; ``naive`` evaluates the defining sums
    directly and is kept as an independent reference.
    """
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if arr.ndim < 2 or min(arr.shape[-2:]) < 1:
        raise ShapeError(f"dft2 needs at least a H x W array, got {arr.shape}")
    if method == "naive":
        return Spectrum(naive_dft2(arr))
    return Spectrum(_fft2_raw(arr))


def idft2(s, check: bool = True) -> np.ndarray:
    """Inverse of ``dft2``; returns the real part after checking the imaginary residue."""
    if isinstance(s, Spectrum):
        if s.layout != "natural":
            raise ContractError("idft2 needs a natural-layout spectrum")
        data = s.data
    else:
        data = np.asarray(s, dtype=np.complex128)
    z = _ifft2_raw(data)
    if not check:
        return z.real
    scale = float(np.abs(data).max()) / (data.shape[-1] * data.shape[-2]) if data.size else 0.0
    return _check_real(z, scale)


# ---------------------------------------------------------------------------
# filters
# ---------------------------------------------------------------------------

def radial_distance(h: int, w: int) -> np.ndarray:
    """Wrap-around distance of every natural-layout bin from the zero-frequency bin."""
    u = np.arange(h)
    v = np.arange(w)
    du = np.minimum(u, h - u).astype(np.float64)
    dv = np.minimum(v, w - v).astype(np.float64)
    return np.sqrt(du[:, None] ** 2 + dv[None, :] ** 2)


def cutoff_radius(h: int, w: int, beta: float) -> float:
    return beta * float(np.hypot(h / 2.0, w / 2.0))


@lru_cache(maxsize=256)
def _filter_cached(h: int, w: int, beta: float, kind: str) -> FreqFilter:
    if kind == "allpass":
        vals = np.ones((h, w))
        d0 = float("inf")
    elif kind == "gaussian":
        d0 = cutoff_radius(h, w, beta)
        vals = np.exp(-(radial_distance(h, w) / (2.0 * d0)) ** 2)
        # keep the mask strictly positive when the tail underflows
        vals = np.maximum(vals, np.finfo(np.float64).tiny)
    else:
        raise ConfigError(f"unknown filter kind {kind!r}")
    vals.setflags(write=False)
    return FreqFilter(vals, d0, beta, kind)  # type: ignore[arg-type]


def make_filter(h: int, w: int, beta: float, kind: FilterKind = "gaussian") -> FreqFilter:
    """Gaussian low-pass mask ``exp(-(D / 2 d0)^2)`` with ``d0 = beta * hypot(h/2, w/2)``."""
    if h < 1 or w < 1:
        raise ShapeError(f"filter size must be positive, got {h}x{w}")
    if not beta > 0:
        raise ConfigError(f"beta must be > 0, got {beta}")
    return _filter_cached(int(h), int(w), float(beta), kind)


# ---------------------------------------------------------------------------
# band splitting
# ---------------------------------------------------------------------------

def lowpass(x: np.ndarray, f: FreqFilter) -> np.ndarray:
    """Real low band ``idft2(dft2(x) * H)`` of an array, same dtype as ``x``."""
    if tuple(x.shape[-2:]) != f.shape:
        raise ShapeError(f"filter {f.shape} does not match spatial dims {x.shape[-2:]}")
    h, w = f.shape
    # the mask is symmetric under (u, v) -> (-u, -v), so the half spectrum suffices
    half = np.fft.rfft2(np.asarray(x, dtype=np.float64), axes=(-2, -1))
    low = np.fft.irfft2(half * f.values[:, : w // 2 + 1], s=(h, w), axes=(-2, -1))
    return low.astype(x.dtype, copy=False)


def filter_tensor(x: Tensor, f: FreqFilter) -> Tensor:
    """Differentiable low-pass filtering.

    The mask is real and symmetric under (u, v) -> (-u, -v), so the operator
    is self-adjoint and the backward pass reuses the same filter.
    """
    out = lowpass(x.data, f)
    return apply_op(out, (x,), lambda g: (lowpass(g, f),), "spectral_filter")


def band_split(x, f: FreqFilter):
    """Split into (low, high) with ``high = x - low``.

    Accepts an ndarray or a Tensor; with a Tensor both bands stay on the graph.
    """
    if isinstance(x, Tensor):
        low = filter_tensor(x, f)
        return low, x - low
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    low = lowpass(x, f)
    return low, x - low


def high_freq_norm(x, beta: float, kind: FilterKind = "gaussian") -> float:
    """Frobenius norm of the high band over all channels of a C×H×W map."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    f = make_filter(arr.shape[-2], arr.shape[-1], beta, kind)
    _, high = band_split(arr, f)
    return float(np.sqrt(np.sum(high * high)))
