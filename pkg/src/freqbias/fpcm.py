"""Frequency Preference Control Module.

A feature map is split into a Gaussian low band and the residual high band,
then recombined per channel as ``alpha * low + (1 - alpha) * high``. The
channel weights are either a fixed constant or learned from the globally
pooled input and squashed into [0.5, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .spectral import FilterKind, filter_tensor, make_filter
from .tensorcore import (
    Tensor, circular_conv1d, matmul, no_grad, reduce_mean, relu, scale_channels, sigmoid,
)

AlphaMode = Literal["fixed", "conv", "mlp"]


@dataclass
class FpcmParams:
    channels: int
    mode: AlphaMode = "conv"
    alpha: float = 0.75
    kernel: int = 3
    hidden: int = 16
    weights: dict = field(default_factory=dict)
    # treat alpha as a constant during backprop (diagnostics only)
    detached: bool = False

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.mode == "fixed":
            if not 0.0 <= self.alpha <= 1.0:
                raise ConfigError(f"fixed alpha must lie in [0, 1], got {self.alpha}")
        elif self.mode == "conv":
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise ConfigError(f"conv kernel must be a positive odd int, got {self.kernel}")
        elif self.mode == "mlp":
            if self.hidden < 1:
                raise ConfigError(f"mlp hidden width must be >= 1, got {self.hidden}")
        else:
            raise ConfigError(f"unknown FPCM mode {self.mode!r}")

    @classmethod
    def fixed(cls, channels: int, alpha: float) -> "FpcmParams":
        return cls(channels, "fixed", alpha=alpha)

    @classmethod
    def conv(cls, channels: int, kernel: int = 3, rng: Optional[np.random.Generator] = None,
             dtype=np.float32) -> "FpcmParams":
        p = cls(channels, "conv", kernel=kernel)
        bound = 1.0 / np.sqrt(kernel)
        w = rng.uniform(-bound, bound, kernel) if rng is not None else np.zeros(kernel)
        p.weights = {"w": Tensor(w.astype(dtype), requires_grad=True)}
        return p

    @classmethod
    def mlp(cls, channels: int, hidden: int = 16, rng: Optional[np.random.Generator] = None,
            dtype=np.float32) -> "FpcmParams":
        p = cls(channels, "mlp", hidden=hidden)
        if rng is not None:
            w1 = rng.uniform(-1, 1, (channels, hidden)) / np.sqrt(channels)
            w2 = rng.uniform(-1, 1, (hidden, channels)) / np.sqrt(hidden)
        else:
            w1 = np.zeros((channels, hidden))
            w2 = np.zeros((hidden, channels))
        p.weights = {"w1": Tensor(w1.astype(dtype), requires_grad=True),
                     "w2": Tensor(w2.astype(dtype), requires_grad=True)}
        return p

    @property
    def learnable(self) -> bool:
        return self.mode != "fixed"


@dataclass
class CutoffState:
    current_beta: float = 0.5
    kind: FilterKind = "gaussian"

    def __post_init__(self):
        self.set(self.current_beta)

    def set(self, beta: float) -> None:
        if not 0.0 < beta <= 1.0:
            raise ConfigError(f"cutoff beta must lie in (0, 1], got {beta}")
        self.current_beta = float(beta)


def fpcm_param_count(p: FpcmParams) -> int:
    if p.mode == "fixed":
        return 0
    if p.mode == "conv":
        return p.kernel
    return 2 * p.channels * p.hidden


def _to_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    return Tensor(arr if arr.dtype in (np.float32, np.float64) else arr.astype(np.float64))


def _as_batch(x) -> tuple[Tensor, bool]:
    t = _to_tensor(x)
    if t.ndim == 3:
        return t.reshape((1,) + t.shape), True
    if t.ndim != 4:
        raise ShapeError(f"feature map must be C x H x W or N x C x H x W, got {t.shape}")
    return t, False


def alpha_tensor(x: Tensor, p: FpcmParams) -> Tensor:
    """Differentiable N×C channel weights for a batched N×C×H×W input."""
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"expected {p.channels} channels, got input {x.shape}")
    n = x.shape[0]
    if p.mode == "fixed":
        return Tensor(np.full((n, p.channels), p.alpha, dtype=x.dtype))
    pooled = reduce_mean(x, axis=(2, 3))
    if p.mode == "conv":
        pre = circular_conv1d(pooled, p.weights["w"])
    else:
        pre = matmul(relu(matmul(pooled, p.weights["w1"])), p.weights["w2"])
    return sigmoid(pre) * 0.5 + 0.5


def alpha_weights(x, p: FpcmParams) -> np.ndarray:
    """Channel weights as a plain array: (C,) for one map, (N, C) for a batch."""
    xb, single = _as_batch(x)
    with no_grad():
        a = alpha_tensor(xb, p).data
    return a[0] if single else a


def fpcm_forward(x, p: FpcmParams, c: CutoffState):
    """Blend the low and high bands of ``x`` with per-channel weights.

    Uses ``alpha*low + (1-alpha)*(x-low) == (2*alpha-1)*low + (1-alpha)*x``,
    which keeps alpha = 0.5 and alpha = 1 exact. Returns a Tensor for Tensor
    input and an ndarray otherwise.
    """
    if not isinstance(x, Tensor):
        with no_grad():
            return fpcm_forward(_to_tensor(x), p, c).data
    xb, single = _as_batch(x)
    if xb.shape[1] != p.channels:
        raise ShapeError(f"expected {p.channels} channels, got input {x.shape}")
    f = make_filter(xb.shape[2], xb.shape[3], c.current_beta, c.kind)
    low = filter_tensor(xb, f)
    if p.mode == "fixed":
        out = low * (2.0 * p.alpha - 1.0) + xb * (1.0 - p.alpha)
    else:
        a = alpha_tensor(xb, p)
        if p.detached:
            a = a.detach()
        out = scale_channels(low, a * 2.0 - 1.0) + scale_channels(xb, 1.0 - a)
    return out.reshape(out.shape[1:]) if single else out


class Fpcm:
    """Stateful FPCM layer used inside a model; remembers the last emitted alpha."""

    def __init__(self, params: FpcmParams, cutoff: CutoffState):
        self.params = params
        self.cutoff = cutoff
        self.record_alpha = False
        self.last_alpha: Optional[np.ndarray] = None

    def __call__(self, x: Tensor) -> Tensor:
        if self.record_alpha and self.params.learnable:
            self.last_alpha = alpha_weights(x, self.params).copy()
        return fpcm_forward(x, self.params, self.cutoff)

    def named_parameters(self, prefix: str = ""):
        for name, t in self.params.weights.items():
            yield prefix + name, t

    def param_count(self) -> int:
        return fpcm_param_count(self.params)
