import csv
import json

import numpy as np
import pytest

from freqbias.cli import RunConfig, main, resolve_config
from freqbias.errors import ConfigError

TINY = ["--set", "epochs=1", "--set", "batch_size=50", "--set", "synth_per_class=6",
        "--set", "synth_eval_per_class=4", "--set", "model_stages=[[4,1],[8,1]]",
        "--set", "train_steps=2", "--set", "eval_steps=2", "--set", "sweep_draws=1",
        "--set", "profile_samples=8", "--set", "alpha_samples=8", "--set", "synth_size=12",
        "--set", "synth_classes=4"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", *TINY, "--out", str(out), "--seed", "3"]) == 0
    return out


def test_resolve_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 4, "lr": 0.1, "model_stages": [[2, 1]]}))
    rc = resolve_config(str(cfg), ["lr=0.5", "augment=true"], seed=9)
    assert (rc.epochs, rc.lr, rc.augment, rc.seed, rc.model_stages) == (4, 0.5, True, 9, [[2, 1]])
    with pytest.raises(ConfigError, match="nope"):
        resolve_config(None, ["nope=1"], None)
    with pytest.raises(ConfigError, match="epochs"):
        resolve_config(None, ["epochs=abc"], None)
    with pytest.raises(ConfigError):
        resolve_config(str(tmp_path / "missing.json"), [], None)


def test_train_outputs(trained):
    assert (trained / "checkpoint.fqb").is_file()
    lines = (trained / "epoch_log.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["epoch"] == 0
    snap = json.loads((trained / "resolved_config.json").read_text())
    assert snap["seed"] == 3 and snap["epochs"] == 1 and snap["command"] == "train"
    rc = RunConfig(**{k: v for k, v in snap.items() if k != "command"})
    assert rc.model_stages == [[4, 1], [8, 1]]


def test_train_log_is_byte_identical_on_rerun(trained, tmp_path):
    assert main(["train", *TINY, "--out", str(tmp_path), "--seed", "3"]) == 0
    assert (tmp_path / "epoch_log.jsonl").read_bytes() == (trained / "epoch_log.jsonl").read_bytes()


def test_eval_report(trained, tmp_path):
    ckpt = trained / "checkpoint.fqb"
    before = ckpt.read_bytes()
    assert main(["eval", *TINY, "--out", str(tmp_path), "--checkpoint", str(ckpt)]) == 0
    rep = json.loads((tmp_path / "robustness.json").read_text())
    robust = rep["robust_acc"][rep["primary_attack"]]
    assert rep["w_robust"] == pytest.approx(0.5 * rep["clean_acc"] + 0.5 * robust)
    assert robust <= rep["clean_acc"]
    assert rep["metadata"]["eval_beta"] == 0.125
    assert ckpt.read_bytes() == before


def test_attack_outputs(trained, tmp_path):
    assert main(["attack", *TINY, "--out", str(tmp_path), "--checkpoint", str(trained / "checkpoint.fqb")]) == 0
    rep = json.loads((tmp_path / "attack.json").read_text())
    assert rep["max_linf"] <= rep["epsilon"] + 1e-6
    adv = np.load(tmp_path / "adversarial.npy")
    assert adv.shape[0] == rep["samples"]


def test_profile_sweep_alpha(trained, tmp_path):
    ck = ["--checkpoint", str(trained / "checkpoint.fqb")]
    for cmd in ("profile", "sweep", "alpha-stats"):
        assert main([cmd, *TINY, "--out", str(tmp_path / cmd), *ck]) == 0
    prof = json.loads((tmp_path / "profile" / "profile.json").read_text())
    rows = list(csv.reader(open(tmp_path / "profile" / "profile.csv")))
    assert len(rows) - 1 == len(prof["rows"]) == 1 + 2 + 2
    sweep = list(csv.reader(open(tmp_path / "sweep" / "sweep.csv")))
    xs = [float(r[0]) for r in sweep[1:]]
    assert all(b > a for a, b in zip(xs, xs[1:]))
    stats = json.loads((tmp_path / "alpha-stats" / "alpha_stats.json").read_text())
    assert len(stats["stages"]) == 2
    # rerun with the same seed reproduces the sweep CSV byte for byte
    assert main(["sweep", *TINY, "--out", str(tmp_path / "again"), *ck]) == 0
    assert (tmp_path / "again" / "sweep.csv").read_bytes() == (tmp_path / "sweep" / "sweep.csv").read_bytes()


def test_exit_codes(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1
    assert main(["train", "--set", "bogus=1", "--out", str(tmp_path)]) == 1
    assert "bogus" in capsys.readouterr().err
    assert main(["nonsense"]) == 1
    assert main(["eval", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "none.fqb")]) == 2
    bad = tmp_path / "bad.fqb"
    bad.write_bytes(b"garbage")
    assert main(["profile", "--out", str(tmp_path), "--checkpoint", str(bad)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_error_exit_code(tmp_path):
    args = [a if a != "epochs=1" else "epochs=2" for a in TINY]
    code = main(["train", *args, "--set", "lr=1e30", "--set", "objective=standard", "--set", "weight_decay=0",
                 "--out", str(tmp_path)])
    assert code == 2
