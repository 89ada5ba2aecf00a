"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the summary block at
the end of the session lists all twelve results.
"""
import cmath
import math
import struct
import time
import zlib

import numpy as np
import pytest

from freqbias import persist
from freqbias.advtrain import AttackConfig, TrainConfig, cutoff_schedule, train
from freqbias.analysis import freq_noise_sweep, layer_freq_profile, w_robust
from freqbias.cli import main
from freqbias.data import SynthSpec, synth_dataset
from freqbias.desk import DeskRecipe, at_pair, vanilla_model
from freqbias.errors import ChecksumError, FormatError, VersionError
from freqbias.fpcm import CutoffState, FpcmParams, alpha_weights, fpcm_forward
from freqbias.model import Model, ModelConfig
from freqbias.spectral import band_split, dft2, filter_tensor, idft2, make_filter, naive_dft2
from freqbias.tensorcore import Tensor, conv2d, no_grad

from gradcheck import GRAD_CASES, TOL, check, kink_free
from test_analysis import SHARPEN, TwoLayer, scalar_high_norm
from test_cli import TINY

SEEDS = (0, 1, 2)
SWEEP_BETAS = [0.0625, 0.125, 0.25, 0.5, 1.0]
SWEEP_EPS = 128 / 255


# -- 1. spectral oracle suite --------------------------------------------------

def loop_dft2(x):
    h, w = x.shape
    return np.array([[sum(x[a, b] * cmath.exp(-2j * math.pi * (u * a / h + v * b / w))
                          for a in range(h) for b in range(w)) for v in range(w)] for u in range(h)])


def test_c01_spectral_oracle(record):
    rng = np.random.default_rng(1)
    # the matrix reference is itself pinned to the scalar double sum
    for h, w in [(1, 1), (3, 5), (7, 4)]:
        x = rng.standard_normal((h, w))
        assert np.max(np.abs(naive_dft2(x) - loop_dft2(x))) < 1e-9
    start = time.perf_counter()
    worst_fast = worst_parseval = worst_round = 0.0
    for h in range(1, 17):
        for w in range(1, 17):
            x = rng.standard_normal((2, h, w))
            s = dft2(x).data
            worst_fast = max(worst_fast, float(np.max(np.abs(s - naive_dft2(x)))))
            energy = np.sum(x * x)
            worst_parseval = max(worst_parseval, abs(np.sum(np.abs(s) ** 2) / (h * w) - energy) / energy)
            worst_round = max(worst_round, float(np.max(np.abs(idft2(dft2(x)) - x))))
    elapsed = time.perf_counter() - start
    ok = worst_fast < 1e-6 and worst_parseval < 1e-5 and worst_round < 1e-6 and elapsed < 10
    detail = (f"(fast-naive {worst_fast:.1e}, parseval {worst_parseval:.1e}, "
              f"round trip {worst_round:.1e}, {elapsed:.2f}s)")
    assert record(1, "fast DFT matches naive oracle on {1..16}^2", ok, detail)


# -- 2. filter formula ------------------------------------------------------------

def test_c02_filter_formula(record):
    rng = np.random.default_rng(2)
    worst = 0.0
    centres = []
    for _ in range(5):
        h, w = int(rng.integers(1, 33)), int(rng.integers(1, 33))
        beta = float(rng.uniform(0.05, 1.0))
        f = make_filter(h, w, beta).values
        d0 = beta * math.sqrt((h / 2) ** 2 + (w / 2) ** 2)
        for u in range(h):
            for v in range(w):
                d = math.hypot(min(u, h - u), min(v, w - v))
                worst = max(worst, abs(f[u, v] - math.exp(-((d / (2 * d0)) ** 2))))
        centres.append(f[0, 0])
    ok = worst < 1e-9 and all(c == 1.0 for c in centres)
    assert record(2, "Gaussian low-pass matches scalar formula", ok, f"(max err {worst:.1e})")


# -- 3. FPCM identities -----------------------------------------------------------

def test_c03_fpcm_identities(record):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 6, 9, 7))
    half = np.max(np.abs(fpcm_forward(x, FpcmParams.fixed(6, 0.5), CutoffState(0.25)) - 0.5 * x))
    p = FpcmParams.conv(6, 3, rng, np.float64)
    allpass = np.max(np.abs(fpcm_forward(x, p, CutoffState(0.5, "allpass"))
                            - alpha_weights(x, p)[:, :, None, None] * x))
    low, high = band_split(x, make_filter(9, 7, 0.2))
    split = np.max(np.abs(low + high - x))
    in_range = True
    for trial in range(200):
        scale = [1.0, 1e3, 1e6][trial % 3]
        c = int(rng.integers(1, 9))
        xs = rng.standard_normal((2, c, 5, 5)) * scale
        q = FpcmParams.conv(c, 3, rng, np.float64) if trial % 2 else FpcmParams.mlp(c, 4, rng, np.float64)
        a = alpha_weights(xs, q)
        in_range &= bool(np.all((a >= 0.5) & (a <= 1.0)))
    ok = half < 1e-7 and allpass < 1e-6 and split < 1e-7 and in_range
    detail = f"(half {half:.1e}, allpass {allpass:.1e}, split {split:.1e}, alpha in range {in_range})"
    assert record(3, "FPCM algebraic identities", ok, detail)


# -- 4. gradients -----------------------------------------------------------------

def test_c04_gradients(record):
    worst = {}
    for name, (fn, shapes) in GRAD_CASES.items():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        worst[name] = check(fn, [kink_free(s, rng) for s in shapes], probes=100, seed=1)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 4, 5, 6))
    cut = CutoffState(0.3)

    def layer(mode):
        def fn(xt, *ws):
            p = FpcmParams(4, mode, kernel=3, hidden=3)
            p.weights = dict(zip(["w"] if mode == "conv" else ["w1", "w2"], ws))
            return fpcm_forward(xt, p, cut)
        return fn

    worst["fpcm_conv"] = check(layer("conv"), [x, rng.uniform(-1, 1, 3)], probes=120)
    worst["fpcm_mlp"] = check(layer("mlp"), [x, rng.uniform(-1, 1, (4, 3)), rng.uniform(-1, 1, (3, 4))],
                              probes=120)
    f = make_filter(5, 6, 0.3)
    worst["filter_tensor"] = check(lambda t: filter_tensor(t, f), [x], probes=100)
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < TOL
    assert record(4, f"finite-difference gradients over {len(worst)} ops", ok, f"(worst {name} {err:.1e})")


# -- 5. schedule ------------------------------------------------------------------

def test_c05_schedule(record):
    ends = all(cutoff_schedule(0, T) == 0.5 and cutoff_schedule(T, T) == 0.125 for T in (1, 7, 20, 110))
    mono = all(cutoff_schedule(t + 1, T) <= cutoff_schedule(t, T) for T in (1, 7, 20, 110) for t in range(T))
    assert record(5, "cutoff schedule endpoints 1/2 -> 1/8, non-increasing", ends and mono)


# -- 6. W-Robust ------------------------------------------------------------------

def test_c06_w_robust(record):
    v = w_robust(0.8515, 0.5518, 0.5, 0.5)
    ok = abs(v - 0.70165) < 1e-12 and f"{100 * v:.2f}" == "70.17"
    assert record(6, "W-Robust reference row", ok, f"({100 * v:.2f})")


# -- 7. degradation to baseline ---------------------------------------------------

def test_c07_degrades_to_baseline(record):
    d = synth_dataset(SynthSpec(per_class=6, size=16, seed=0))
    base = dict(stages=[[8, 1], [16, 1], [32, 1]], in_shape=[3, 16, 16])
    variants = [dict(fpcm_placement="none"),
                dict(fpcm_placement="per_stage_end", fpcm_filter="allpass", fpcm_mode="fixed", fpcm_alpha=1.0)]
    losses = []
    for kw in variants:
        m = Model(ModelConfig(**base, **kw), seed=0)
        res = train(m, d, TrainConfig(epochs=1, batch_size=16, seed=0), AttackConfig(steps=3))
        losses.append(np.array(res.step_losses))
    gap = float(np.max(np.abs(losses[0] - losses[1])))
    ok = len(losses[0]) == len(losses[1]) > 0 and gap < 1e-4
    assert record(7, "allpass + alpha=1 reproduces no-FPCM loss trajectory", ok,
                  f"({len(losses[0])} steps, max gap {gap:.1e})")


# -- 8. desk-scale directional AT experiment --------------------------------------

@pytest.mark.slow
def test_c08_fpcm_not_below_baseline(record):
    r = DeskRecipe()
    rows = {s: at_pair(r, s) for s in SEEDS}
    wins = sum(rows[s]["fpcm"]["robust"] >= rows[s]["baseline"]["robust"] - 0.005 for s in SEEDS)
    detail = "(" + ", ".join(f"seed {s}: fpcm {rows[s]['fpcm']['robust']:.3f} vs base "
                             f"{rows[s]['baseline']['robust']:.3f}" for s in SEEDS) + ")"
    assert record(8, f"FPCM PGD-20 robust >= baseline - 0.5pp in {wins}/3 seeds", wins >= 2, detail)


# -- 9 / 10. vanilla desk models ---------------------------------------------------

@pytest.fixture(scope="module")
def vanilla():
    r = DeskRecipe()
    return {s: vanilla_model(r, s) for s in SEEDS}


@pytest.mark.slow
def test_c09_frequency_bias_profile(record, vanilla):
    rng = np.random.default_rng(9)
    img = rng.random((1, 1, 8, 8))
    prof = layer_freq_profile(TwoLayer(), img, beta=0.25)
    l2 = conv2d(Tensor(img), Tensor(SHARPEN[None, None]), 1, 1).data[0, 0]
    oracle = max(abs(prof.rows[0].high_freq_norm - scalar_high_norm(img[0, 0], 0.25)),
                 abs(prof.rows[1].high_freq_norm - scalar_high_norm(l2, 0.25)))
    per_seed = []
    for s, (m, te) in vanilla.items():
        p = layer_freq_profile(m, te.images[:128], 0.125)
        stages = sorted({row.stage for row in p.rows if row.stage >= 0})
        up = 0
        for st in stages:
            rows = p.stage_rows(st)
            end = next(row for row in rows if row.is_stage_end)
            up += end.high_freq_norm > rows[0].high_freq_norm
        per_seed.append(up)
    ok = oracle < 1e-4 and all(u >= 2 for u in per_seed)
    assert record(9, "stage-end high-frequency norm exceeds stage start", ok,
                  f"(stages rising per seed {per_seed}, oracle err {oracle:.1e})")


@pytest.mark.slow
def test_c10_noise_sweep(record, vanilla):
    rates = []
    replay = True
    for s, (m, te) in vanilla.items():
        a = freq_noise_sweep(m, te, SWEEP_BETAS, SWEEP_EPS, draws=2, seed=s)
        b = freq_noise_sweep(m, te, SWEEP_BETAS, SWEEP_EPS, draws=2, seed=s)
        replay &= a.success_rate == b.success_rate and a.evaluated == b.evaluated
        rates.append(a.success_rate)
    mean = np.mean(rates, axis=0)
    ok = mean[-1] > mean[0] and replay
    assert record(10, "noise success rises with passed high frequency", ok,
                  f"(mean rate beta={SWEEP_BETAS[0]}: {mean[0]:.3f}, beta={SWEEP_BETAS[-1]}: {mean[-1]:.3f}, "
                  f"replay identical {replay})")


# -- 11. persistence --------------------------------------------------------------

def test_c11_persistence(record, tmp_path):
    m = Model(ModelConfig(stages=[[4, 1], [6, 1]], in_shape=[3, 8, 8], classes=4,
                          fpcm_placement="per_stage_end"), seed=11)
    rng = np.random.default_rng(11)
    for t in m.params.values():
        t.data += rng.standard_normal(t.shape).astype(t.dtype) * 0.01
    m.set_beta(0.25)
    path = tmp_path / "m.fqb"
    persist.save(m, {"epoch": 3}, path)
    loaded, _ = persist.load(path)
    same = all(loaded.params[k].data.tobytes() == t.data.tobytes() for k, t in m.params.items())
    same &= all(loaded.buffers[k].tobytes() == b.tobytes() for k, b in m.buffers.items())
    x = rng.random((2, 3, 8, 8)).astype(np.float32)
    m.eval()
    with no_grad():
        same &= m(x).data.tobytes() == loaded(x).data.tobytes()
    raw = path.read_bytes()
    hlen = struct.unpack_from("<8sIQ32s", raw)[2]
    positions = sorted({*rng.choice(len(raw), 150, replace=False).tolist(), 0, 9, 30, 52 + hlen // 2, len(raw) - 1})
    caught = 0
    for pos in positions:
        bad = bytearray(raw)
        bad[pos] ^= 0x01
        try:
            persist.decode(bytes(bad))
        except (ChecksumError, FormatError, VersionError):
            caught += 1
    ok = same and caught == len(positions)
    assert record(11, "checkpoint round trip bit-identical, corruption detected", ok,
                  f"({caught}/{len(positions)} single-byte flips caught)")


# -- 12. determinism --------------------------------------------------------------

def test_c12_cli_train_deterministic(record, tmp_path):
    logs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", *TINY, "--out", str(out), "--seed", "12"]) == 0
        logs.append((out / "epoch_log.jsonl").read_bytes())
    ok = logs[0] == logs[1] and len(logs[0]) > 0
    assert record(12, "CLI train twice yields byte-identical epoch log", ok, f"({len(logs[0])} bytes)")
