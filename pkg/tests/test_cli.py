import csv
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from dropping import training
from dropping.cli import EXIT_DIVERGED, EXIT_USAGE, main
from dropping.data import SynthSpec, load_pairs, synth_task
from dropping.encoders import load_model
from dropping.losses import evaluate


def synth(size, seed, **kw):
    extra = "".join(f",{k}={v}" for k, v in kw.items())
    return f"synth:size={size},seed={seed}{extra}"


SMALL = ["--data.train", synth(200, 1), "--data.dev", synth(60, 2), "--data.test", synth(200, 3),
         "--model.embed_dim", "6", "--model.hidden_size", "6", "--model.num_layers", "1",
         "--train.lr", "0.01", "--train.batch_size", "32", "--train.epochs", "2",
         "--train.eval_every", "5"]


def metrics(out):
    with open(out / "metrics.csv", newline="") as fh:
        return {(r["phase"], r["split"]): (float(r["accuracy"]), float(r["log_loss"]))
                for r in csv.DictReader(fh)}


def report_value(out, key):
    for line in (out / "report.txt").read_text().splitlines():
        if line.startswith(f"{key} = "):
            return line.split(" = ", 1)[1]
    raise KeyError(key)


def test_zero_epoch_run_is_chance(tmp_path):
    argv = ["train-single", "--data.train", synth(400, 1), "--data.dev", synth(100, 2),
            "--data.test", synth(1000, 3), "--train.epochs", "0", "--seed", "0",
            "--out", str(tmp_path)]
    assert main(argv) == 0
    m = metrics(tmp_path)
    acc, ll = m[("train-single", "test")]
    assert abs(acc - 50) <= 5
    assert abs(ll - math.log(2)) < 0.01
    assert set(m) == {("train-single", "train"), ("train-single", "test")}
    raw = (tmp_path / "metrics.csv").read_bytes()
    assert raw.startswith(b"phase,split,accuracy,log_loss\r\n")


def test_same_config_and_seed_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["train-single", *SMALL, "--seed", "4", "--out", str(tmp_path / name)]) == 0
    for f in ("metrics.csv", "curve.csv", "model/model.ckpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    a, b = (tmp_path / "a" / "report.txt").read_text(), (tmp_path / "b" / "report.txt").read_text()
    assert a.replace(str(tmp_path / "a"), "") == b.replace(str(tmp_path / "b"), "")


def test_config_file_then_flags(tmp_path, monkeypatch):
    ini = tmp_path / "run.ini"
    ini.write_text("[model]\nhidden_size = 5\nembed_dim = 4\nnum_layers = 1\n"
                   "[train]\nlr = 0.02\nepochs = 1\n")
    monkeypatch.setenv("DROPPING_OUTPUT_DIR", str(tmp_path / "envout"))
    argv = ["train-single", "-c", str(ini), "--model.hidden_size", "7",
            "--data.train", synth(100, 1), "--data.dev", synth(40, 2), "--data.test", synth(40, 3)]
    assert main(argv) == 0
    out = tmp_path / "envout"
    assert report_value(out, "hidden_size") == "7"     # flag beats config
    assert report_value(out, "embed_dim") == "4"       # config beats default
    assert report_value(out, "lr") == "0.02"
    assert report_value(out, "dropout") == "0.5"       # default
    assert (out / "curve.csv").is_file() and (out / "model" / "vocab.txt").is_file()


@pytest.mark.parametrize("bad", [
    ["--model.hidden_size", "x"],
    ["--model.attention", "bogus"],
    ["--train.lr", "-1"],
    ["--data.train", "missing.tsv"],
    ["--data.train", "synth:size=100,colour=red"],
    ["--bag.averaging", "median"],
])
def test_invalid_config_is_usage_error_before_training(tmp_path, capsys, bad):
    out = tmp_path / "out"
    assert main(["train-ensemble", *SMALL, *bad, "--out", str(out)]) == EXIT_USAGE
    assert "usage error" in capsys.readouterr().err
    assert not out.exists()


def test_unknown_ini_key_and_missing_split(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[model]\nhiden_size = 5\n")
    assert main(["train-single", "-c", str(ini), *SMALL]) == EXIT_USAGE
    assert main(["train-single", "--data.train", synth(50, 1), "--out", str(tmp_path)]) == \
        EXIT_USAGE


def test_divergence_exits_nonzero_with_curve(tmp_path, monkeypatch, capsys):
    real = training.cross_entropy
    calls = []

    def poisoned(pred, gold):
        calls.append(1)
        return real(pred, gold) * (float("nan") if len(calls) > 12 else 1.0)

    monkeypatch.setattr(training, "cross_entropy", poisoned)
    assert main(["train-single", *SMALL, "--out", str(tmp_path)]) == EXIT_DIVERGED
    assert "diverged_curve.csv" in capsys.readouterr().err
    rows = (tmp_path / "diverged_curve.csv").read_text().splitlines()
    assert rows[0] == "iteration,error,smoothed,delta,gamma" and len(rows) == 3


def test_synth_file_round_trip_and_inputs_untouched(tmp_path):
    path = tmp_path / "task.tsv"
    assert main(["synth", "--synth.size", "120", "--synth.shift", "0.2", "--synth.seed", "9",
                 "--synth.output", str(path)]) == 0
    ds = load_pairs(path)
    ref = synth_task(SynthSpec(size=120, shift=0.2), np.random.default_rng(9))
    assert [(x.sentence1, x.sentence2, ref.label_names[x.label]) for x in ref.instances] == \
        [(x.sentence1, x.sentence2, ds.label_names[x.label]) for x in ds.instances]
    before = path.read_bytes()
    argv = ["train-single", "--data.train", str(path), "--data.dev", str(path),
            "--data.test", str(path), "--train.epochs", "1", "--out", str(tmp_path / "run")]
    assert main(argv) == 0
    assert path.read_bytes() == before


V80 = dict(vocab_size=80)
MODEL = ["--model.embed_dim", "16", "--model.hidden_size", "24", "--model.num_layers", "1",
         "--model.bidirectional", "true"]
TARGET = ["--data.train", synth(150, 300, shift=0.1, **V80),
          "--data.dev", synth(200, 301, shift=0.1, **V80),
          "--data.test", synth(500, 302, shift=0.1, **V80)]
FEW = [*MODEL, "--train.lr", "0.01", "--train.batch_size", "16", "--train.max_iterations", "400",
       "--train.eval_every", "20", "--train.patience", "none"]


@pytest.fixture(scope="module")
def cli_source(tmp_path_factory):
    out = tmp_path_factory.mktemp("source")
    argv = ["train-ensemble", *MODEL, "--data.train", synth(3000, 100, **V80),
            "--data.dev", synth(300, 101, **V80), "--data.test", synth(300, 102, **V80),
            "--bag.n_members", "3", "--train.lr", "0.01", "--train.batch_size", "64",
            "--train.epochs", "10", "--train.eval_every", "20", "--train.patience", "5",
            "--out", str(out)]
    assert main(argv) == 0
    return out


def test_ensemble_then_few_shot_beats_target_only(cli_source, tmp_path):
    ens = cli_source / "ensemble"
    before = {f.name: f.read_bytes() for f in ens.iterdir()}
    few, base = tmp_path / "few", tmp_path / "base"
    assert main(["transfer-few", *TARGET, *FEW, "--transfer.sources", str(ens),
                 "--out", str(few)]) == 0
    assert main(["transfer-few", *TARGET, *FEW, "--transfer.sources", str(ens),
                 "--schedule.mode", "constant", "--schedule.gamma", "0", "--out", str(base)]) == 0
    acc = metrics(few)[("transfer-few", "test")][0]
    baseline = metrics(base)[("transfer-few", "test")][0]
    assert acc >= baseline
    assert {f.name: f.read_bytes() for f in ens.iterdir()} == before

    assert main(["plot", "--plot.input", str(few / "curve.csv")]) == 0
    svg = ET.parse(few / "curve.svg").getroot()
    assert len(svg.findall(".//{http://www.w3.org/2000/svg}polyline")) == 3


def test_eval_and_zero_shot_on_saved_ensemble(cli_source, tmp_path):
    ens = cli_source / "ensemble"
    src_test = ["--data.train", synth(3000, 100, **V80), "--data.test", synth(300, 102, **V80)]
    assert main(["eval", "--eval.checkpoint", str(ens), *src_test, "--out", str(tmp_path)]) == 0
    trained = metrics(cli_source)
    evaluated = metrics(tmp_path)
    assert evaluated[("eval", "test")] == trained[("train-ensemble", "test")]
    assert evaluated[("eval", "train")] == trained[("train-ensemble", "train")]

    zero, one = tmp_path / "zero", tmp_path / "gamma1"
    assert main(["transfer-zero", *TARGET, "--transfer.alpha_mode", "fixed",
                 "--transfer.sources", str(ens), "--out", str(zero)]) == 0
    assert main(["transfer-few", *TARGET, *FEW, "--transfer.alpha_mode", "fixed",
                 "--transfer.sources", str(ens), "--schedule.mode", "constant",
                 "--schedule.gamma", "1", "--out", str(one)]) == 0
    assert metrics(zero)[("transfer-zero", "test")] == metrics(one)[("transfer-few", "test")]

    member = tmp_path / "member"
    assert main(["eval", "--eval.checkpoint", str(ens / "member_000.ckpt"), *TARGET,
                 "--out", str(member)]) == 0
    test = synth_task(SynthSpec(size=500, shift=0.1, **V80), np.random.default_rng(302))
    s1, s2, y = test.encoded()
    want = evaluate(load_model(ens / "member_000.ckpt").predict_proba(s1, s2), y)
    assert metrics(member)[("eval", "test")] == (want["accuracy"], want["log_loss"])


def test_parameter_transfer_baselines(cli_source, tmp_path):
    member = cli_source / "ensemble" / "member_001.ckpt"
    for kind in ("hard_full", "freeze_lower"):
        out = tmp_path / kind
        code = main(["transfer-few", *TARGET, *FEW, "--transfer.baseline", kind,
                     "--transfer.source_model", str(member), "--out", str(out)])
        if kind == "freeze_lower":
            assert code == EXIT_USAGE  # single-layer source has nothing to freeze
        else:
            assert code == 0 and (out / "target" / "model.ckpt").is_file()
