"""Measurement instruments: W-Robust, layer-wise high-frequency profiles,
frequency-banded noise sweeps and statistics of learned FPCM weights."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .advtrain import AttackConfig, evaluate
from .data import Dataset
from .errors import ContractError
from .spectral import lowpass, make_filter
from .tensorcore import Tensor, no_grad


def w_robust(clean: float, robust: float, pi_nat: float = 0.5, pi_adv: float = 0.5) -> float:
    """Weighted robust accuracy ``pi_nat * clean + pi_adv * robust``."""
    if pi_nat < 0 or pi_adv < 0:
        raise ContractError(f"weights must be >= 0, got {pi_nat}, {pi_adv}")
    return pi_nat * clean + pi_adv * robust


def config_hash(cfg) -> str:
    d = cfg.to_dict() if hasattr(cfg, "to_dict") else cfg
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# robustness report
# ---------------------------------------------------------------------------

@dataclass
class RobustnessReport:
    clean_acc: float
    robust_acc: dict  # attack name -> accuracy
    w_robust: float
    pi_nat: float = 0.5
    pi_adv: float = 0.5
    primary_attack: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        accs = [self.clean_acc, *self.robust_acc.values()]
        if any(not 0.0 <= a <= 1.0 for a in accs):
            raise ContractError(f"accuracies must lie in [0, 1], got {accs}")

    def recompute_w_robust(self) -> float:
        return w_robust(self.clean_acc, self.robust_acc[self.primary_attack], self.pi_nat, self.pi_adv)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_robustness(model, data: Dataset, attack: AttackConfig, seed: int = 0, beta: float = 0.125,
                        pi_nat: float = 0.5, pi_adv: float = 0.5, model_id: str = "") -> RobustnessReport:
    """Clean and PGD-k accuracy at the evaluation cutoff, plus W-Robust."""
    prev = getattr(model, "beta", None)
    if hasattr(model, "set_beta"):
        model.set_beta(beta)
    try:
        clean, robust = evaluate(model, data, attack, np.random.default_rng(seed))
    finally:
        if prev is not None:
            model.set_beta(prev)
    name = f"pgd{attack.steps}"
    cfg = getattr(model, "config", None)
    meta = {"model_id": model_id, "config_hash": config_hash(cfg) if cfg is not None else "",
            "seed": seed, "eval_beta": beta, "epsilon": attack.epsilon, "step_size": attack.step_size,
            "samples": len(data)}
    return RobustnessReport(clean, {name: robust}, w_robust(clean, robust, pi_nat, pi_adv),
                            pi_nat, pi_adv, name, meta)


# ---------------------------------------------------------------------------
# layer-wise frequency profile
# ---------------------------------------------------------------------------

@dataclass
class ProfileRow:
    layer: int
    name: str
    stage: int
    is_stage_end: bool
    high_freq_norm: float


@dataclass
class FreqProfile:
    rows: list
    beta: float

    def to_dict(self) -> dict:
        return {"beta": self.beta, "rows": [asdict(r) for r in self.rows]}

    def stage_rows(self, stage: int) -> list:
        return [r for r in self.rows if r.stage == stage]


def _high_norms(batch: np.ndarray, beta: float) -> np.ndarray:
    """Per-sample Frobenius norm of the high band of an N×C×H×W stack."""
    feats = np.asarray(batch, dtype=np.float64)
    f = make_filter(feats.shape[-2], feats.shape[-1], beta)
    high = feats - lowpass(feats, f)
    return np.sqrt(np.sum(high * high, axis=(1, 2, 3)))


def layer_freq_profile(model, batch, beta: float = 0.125) -> FreqProfile:
    """High-frequency norm of every tapped layer, averaged over the samples of ``batch``."""
    x = np.asarray(batch.images if isinstance(batch, Dataset) else batch)
    if x.ndim != 4 or len(x) == 0:
        raise ContractError("layer_freq_profile needs a non-empty N x C x H x W batch")
    with no_grad():
        _, taps = model.forward(x, taps=True)
    rows = []
    for i, t in enumerate(taps):
        feat = np.asarray(t.feature)
        if feat.ndim == 3:
            feat = feat[None]
        rows.append(ProfileRow(i, t.name, int(t.stage), bool(t.is_stage_end),
                               float(np.mean(_high_norms(feat, beta)))))
    return FreqProfile(rows, beta)


# ---------------------------------------------------------------------------
# frequency-banded noise sweep
# ---------------------------------------------------------------------------

@dataclass
class NoiseSweepReport:
    betas: list
    success_rate: list
    epsilon: float
    draws: int
    seed: int
    evaluated: int  # initially-correct samples

    @property
    def cutoff_factor(self) -> list:
        return [1.0 / b for b in self.betas]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cutoff_factor"] = self.cutoff_factor
        return d


def banded_noise(delta: np.ndarray, beta: float, eps: float) -> np.ndarray:
    """Low-pass ``delta`` through H(beta) and rescale each sample back to max-abs ``eps``."""
    f = make_filter(delta.shape[-2], delta.shape[-1], beta)
    low = lowpass(np.asarray(delta, dtype=np.float64), f)
    peak = np.abs(low).max(axis=tuple(range(1, low.ndim)), keepdims=True)
    return np.where(peak > 0, low * (eps / np.where(peak > 0, peak, 1.0)), 0.0)


def _predict(model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    if hasattr(model, "predict"):
        return model.predict(x, batch_size)
    with no_grad():
        return np.argmax(model(Tensor(x)).data, axis=1)


def freq_noise_sweep(model, data: Dataset, betas: Sequence[float], eps: float, draws: int = 1,
                     seed: int = 0) -> NoiseSweepReport:
    """Attack success rate of random noise restricted to the band passed by H(beta).

    Each draw samples one uniform delta for the whole dataset and reuses it at
    every beta, so sweep points differ only in spectral content.
    """
    betas = [float(b) for b in betas]
    if not betas:
        raise ContractError("betas must be non-empty")
    steps = np.diff(betas)
    if len(betas) > 1 and not (np.all(steps > 0) or np.all(steps < 0)):
        raise ContractError(f"betas must be strictly monotone, got {betas}")
    if draws < 1:
        raise ContractError(f"draws must be >= 1, got {draws}")
    if eps < 0:
        raise ContractError(f"eps must be >= 0, got {eps}")
    if hasattr(model, "eval"):
        model.eval()
    x, y = data.images, data.labels
    ok = _predict(model, x) == y
    xc, yc = x[ok], y[ok]
    n = len(yc)
    flips = np.zeros(len(betas))
    rng = np.random.default_rng(seed)
    for _ in range(draws):
        delta = rng.uniform(-eps, eps, xc.shape)
        if n == 0 or eps == 0:
            continue
        for j, b in enumerate(betas):
            xn = np.clip(xc + banded_noise(delta, b, eps), 0.0, 1.0).astype(np.float32)
            flips[j] += np.sum(_predict(model, xn) != yc)
    rates = [float(f / (n * draws)) if n else 0.0 for f in flips]
    return NoiseSweepReport(betas, rates, float(eps), draws, seed, int(n))


# ---------------------------------------------------------------------------
# learned alpha statistics
# ---------------------------------------------------------------------------

@dataclass
class AlphaStageStats:
    stage: int
    max: float
    min: float
    mean: float
    var: float
    # across-sample variance of each channel's alpha, summarised over channels
    sample_var_mean: float
    sample_var_max: float


def alpha_stats(model, batch) -> list[AlphaStageStats]:
    """Per-stage max / min / mean / var of the alphas emitted on ``batch``."""
    fpcms = getattr(model, "fpcms", {})
    learn = {s: f for s, f in fpcms.items() if f.params.learnable}
    if not learn:
        raise ContractError("model has no learnable FPCM")
    x = np.asarray(batch.images if isinstance(batch, Dataset) else batch)
    if x.ndim != 4 or len(x) == 0:
        raise ContractError("alpha_stats needs a non-empty N x C x H x W batch")
    was_training = getattr(model, "training", False)
    model.eval()
    for f in learn.values():
        f.record_alpha, f.last_alpha = True, None
    try:
        with no_grad():
            model.forward(x)
        per_stage: dict[int, list] = {}
        for site in sorted(learn):
            a = learn[site].last_alpha
            if a is None or np.any(a < 0.5) or np.any(a > 1.0) or not np.all(np.isfinite(a)):
                raise ContractError(f"FPCM at site {site} emitted alpha outside [0.5, 1]")
            per_stage.setdefault(model.fpcm_stage(site), []).append(np.asarray(a, dtype=np.float64))
    finally:
        for f in learn.values():
            f.record_alpha = False
        if was_training:
            model.train()
    out = []
    for stage in sorted(per_stage):
        mats = per_stage[stage]
        flat = np.concatenate([m.ravel() for m in mats])
        svar = np.concatenate([m.var(axis=0) for m in mats])
        out.append(AlphaStageStats(stage, float(flat.max()), float(flat.min()), float(flat.mean()),
                                   float(flat.var()), float(svar.mean()), float(svar.max())))
    return out


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------

def write_json(obj, path) -> None:
    d = obj.to_dict() if hasattr(obj, "to_dict") else obj
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def profile_csv(p: FreqProfile, path) -> None:
    write_csv(path, ["layer", "high_freq_norm", "name", "stage", "is_stage_end"],
              [(r.layer, r.high_freq_norm, r.name, r.stage, int(r.is_stage_end)) for r in p.rows])


def sweep_csv(r: NoiseSweepReport, path) -> None:
    write_csv(path, ["beta", "success_rate", "cutoff_factor"],
              [(b, s, 1.0 / b) for b, s in zip(r.betas, r.success_rate)])


def alpha_csv(stats: list[AlphaStageStats], path) -> None:
    write_csv(path, ["stage", "max", "min", "mean", "var", "sample_var_mean", "sample_var_max"],
              [(s.stage, s.max, s.min, s.mean, s.var, s.sample_var_mean, s.sample_var_max) for s in stats])
