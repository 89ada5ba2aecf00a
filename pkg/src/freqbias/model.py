"""Desk-scale residual CNN with optional FPCM layers at stage boundaries."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigError, ShapeError
from .fpcm import CutoffState, Fpcm, FpcmParams, fpcm_param_count
from .tensorcore import Tensor, batch_norm, conv2d, linear, no_grad, reduce_mean, relu

PLACEMENTS = ("none", "per_stage_end", "after_stage_end", "custom")


@dataclass
class ModelConfig:
    stages: list = field(default_factory=lambda: [[16, 2], [32, 2], [64, 2]])
    in_shape: list = field(default_factory=lambda: [3, 32, 32])
    classes: int = 10
    norm: str = "batch"  # "batch" or "affine" (per-channel scale/shift, no statistics)
    fpcm_placement: str = "none"
    # used with "custom": FPCM goes before global block i; i == n_blocks means after the last block
    fpcm_sites: list = field(default_factory=list)
    fpcm_mode: str = "conv"
    fpcm_alpha: float = 0.75
    fpcm_kernel: int = 3
    fpcm_hidden: int = 16
    fpcm_filter: str = "gaussian"
    fpcm_beta: float = 0.5
    fpcm_detached: bool = False

    def __post_init__(self):
        self.stages = [list(map(int, s)) for s in self.stages]
        self.in_shape = [int(v) for v in self.in_shape]
        self.fpcm_sites = [int(v) for v in self.fpcm_sites]
        if not self.stages:
            raise ConfigError("at least one stage is required")
        for ch, blocks in self.stages:
            if ch < 1 or blocks < 1:
                raise ConfigError(f"stage needs channels >= 1 and blocks >= 1, got {[ch, blocks]}")
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if len(self.in_shape) != 3:
            raise ConfigError(f"in_shape must be [C, H, W], got {self.in_shape}")
        if self.norm not in ("batch", "affine"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.fpcm_placement not in PLACEMENTS:
            raise ConfigError(f"unknown fpcm_placement {self.fpcm_placement!r}")
        n = self.n_blocks
        if self.fpcm_placement == "custom":
            if len(set(self.fpcm_sites)) != len(self.fpcm_sites):
                raise ConfigError(f"duplicate FPCM sites {self.fpcm_sites}")
            bad = [s for s in self.fpcm_sites if not 0 <= s <= n]
            if bad:
                raise ConfigError(f"FPCM sites {bad} outside [0, {n}]")

    @property
    def n_blocks(self) -> int:
        return sum(b for _, b in self.stages)

    def site_list(self) -> list[int]:
        ends = np.cumsum([b for _, b in self.stages])
        if self.fpcm_placement == "none":
            return []
        if self.fpcm_placement == "per_stage_end":
            return [int(e) - 1 for e in ends]
        if self.fpcm_placement == "after_stage_end":
            return [int(e) for e in ends]
        return sorted(self.fpcm_sites)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class LayerTap:
    index: int
    name: str
    kind: str  # "stem", "block" or "fpcm"
    stage: int  # -1 for the stem
    is_stage_end: bool
    feature: np.ndarray


class Model:
    """Parameters live in ``self.params`` (name -> Tensor), BN statistics in ``self.buffers``."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = cfg
        self.seed = seed
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = False
        # when False, training-mode BN uses batch statistics but leaves running stats alone
        self.update_stats = True
        self.cutoff = CutoffState(cfg.fpcm_beta, cfg.fpcm_filter)

        backbone_ss, fpcm_ss = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(backbone_ss)
        frng = np.random.default_rng(fpcm_ss)
        c_in = cfg.in_shape[0]
        c0 = cfg.stages[0][0]
        self._conv("stem.conv", c_in, c0, 3, rng)
        self._norm("stem.bn", c0)

        self.blocks: list[dict] = []
        sites = set(cfg.site_list())
        self.fpcms: dict[int, Fpcm] = {}
        prev = c0
        g = 0
        for s, (ch, nb) in enumerate(cfg.stages):
            for b in range(nb):
                stride = 2 if (s > 0 and b == 0) else 1
                if g in sites:
                    self.fpcms[g] = self._fpcm(prev, frng)
                name = f"s{s}.b{b}"
                self._conv(f"{name}.conv1", prev, ch, 3, rng)
                self._norm(f"{name}.bn1", ch)
                self._conv(f"{name}.conv2", ch, ch, 3, rng)
                self._norm(f"{name}.bn2", ch)
                proj = stride != 1 or prev != ch
                if proj:
                    self._conv(f"{name}.short", prev, ch, 1, rng)
                    self._norm(f"{name}.short_bn", ch)
                self.blocks.append(dict(name=name, stage=s, stride=stride, proj=proj,
                                        stage_end=(b == nb - 1)))
                prev = ch
                g += 1
        if g in sites:
            self.fpcms[g] = self._fpcm(prev, frng)
        for site, layer in self.fpcms.items():
            for pname, t in layer.named_parameters(f"fpcm{site}."):
                self.params[pname] = t
        bound = 1.0 / np.sqrt(prev)
        self.params["head.w"] = self._leaf(rng.uniform(-bound, bound, (prev, cfg.classes)))
        self.params["head.b"] = self._leaf(rng.uniform(-bound, bound, cfg.classes))

    # -- construction helpers ------------------------------------------------
    def _leaf(self, arr) -> Tensor:
        return Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True)

    def _conv(self, name, c_in, c_out, k, rng):
        std = np.sqrt(2.0 / (c_in * k * k))
        self.params[name] = self._leaf(rng.normal(0.0, std, (c_out, c_in, k, k)))

    def _norm(self, name, c):
        self.params[name + ".g"] = self._leaf(np.ones(c))
        self.params[name + ".b"] = self._leaf(np.zeros(c))
        if self.config.norm == "batch":
            self.buffers[name + ".mean"] = np.zeros(c)
            self.buffers[name + ".var"] = np.ones(c)

    def _fpcm(self, channels, rng) -> Fpcm:
        cfg = self.config
        if cfg.fpcm_mode == "fixed":
            p = FpcmParams.fixed(channels, cfg.fpcm_alpha)
        elif cfg.fpcm_mode == "conv":
            p = FpcmParams.conv(channels, cfg.fpcm_kernel, rng, self.dtype)
        elif cfg.fpcm_mode == "mlp":
            p = FpcmParams.mlp(channels, cfg.fpcm_hidden, rng, self.dtype)
        else:
            raise ConfigError(f"unknown fpcm_mode {cfg.fpcm_mode!r}")
        p.detached = cfg.fpcm_detached
        return Fpcm(p, self.cutoff)

    # -- mode / state --------------------------------------------------------
    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def set_beta(self, beta: float) -> None:
        self.cutoff.set(beta)

    @property
    def beta(self) -> float:
        return self.cutoff.current_beta

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.params.items()

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def fpcm_param_count(self) -> int:
        return sum(fpcm_param_count(f.params) for f in self.fpcms.values())

    def fpcm_stage(self, site: int) -> int:
        """Stage an FPCM site belongs to (a site after a stage's last block counts for that stage)."""
        if site >= len(self.blocks):
            return self.blocks[-1]["stage"]
        if site > 0 and self.blocks[site]["stage"] != self.blocks[site - 1]["stage"] \
                and self.config.fpcm_placement == "after_stage_end":
            return self.blocks[site - 1]["stage"]
        return self.blocks[site]["stage"]

    # -- forward -------------------------------------------------------------
    def _bn(self, name: str, x: Tensor) -> Tensor:
        g, b = self.params[name + ".g"], self.params[name + ".b"]
        if self.config.norm == "affine":
            c = x.shape[1]
            return batch_norm(x, g, b, (np.zeros(c), np.ones(c)), training=False, eps=0.0)
        running = (self.buffers[name + ".mean"], self.buffers[name + ".var"])
        return batch_norm(x, g, b, running, training=self.training, update_stats=self.update_stats)

    def _block(self, blk: dict, x: Tensor) -> Tensor:
        n, st = blk["name"], blk["stride"]
        h = relu(self._bn(n + ".bn1", conv2d(x, self.params[n + ".conv1"], st, 1, floor=True)))
        h = self._bn(n + ".bn2", conv2d(h, self.params[n + ".conv2"], 1, 1))
        if blk["proj"]:
            sc = self._bn(n + ".short_bn", conv2d(x, self.params[n + ".short"], st, 0, floor=True))
        else:
            sc = x
        return relu(h + sc)

    def forward(self, x, taps: bool = False):
        """Logits for an N×C×H×W batch; with ``taps`` also returns a list of LayerTap."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if x.ndim != 4 or list(x.shape[1:]) != self.config.in_shape:
            raise ShapeError(f"expected N x {self.config.in_shape}, got {x.shape}")
        record: list[LayerTap] = []

        def tap(name, kind, stage, end, t):
            if taps:
                record.append(LayerTap(len(record), name, kind, stage, end, t.data.copy()))

        h = relu(self._bn("stem.bn", conv2d(x, self.params["stem.conv"], 1, 1)))
        tap("stem", "stem", -1, False, h)
        for g, blk in enumerate(self.blocks):
            if g in self.fpcms:
                h = self.fpcms[g](h)
                tap(f"fpcm{g}", "fpcm", self.fpcm_stage(g), False, h)
            h = self._block(blk, h)
            tap(blk["name"], "block", blk["stage"], blk["stage_end"], h)
        g = len(self.blocks)
        if g in self.fpcms:
            h = self.fpcms[g](h)
            tap(f"fpcm{g}", "fpcm", self.fpcm_stage(g), False, h)
        pooled = reduce_mean(h, axis=(2, 3))
        logits = linear(pooled, self.params["head.w"], self.params["head.b"])
        return (logits, record) if taps else logits

    __call__ = forward

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(x), batch_size):
                out.append(np.argmax(self.forward(x[i:i + batch_size]).data, axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    return Model(cfg, seed)
