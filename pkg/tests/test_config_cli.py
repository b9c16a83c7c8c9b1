from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from rffkit.cli import _k_range, main
from rffkit.config import load_config, parse_config
from rffkit.errors import SpecError
from rffkit.models import load_checkpoint
from rffkit.synth import read_rffd

SMALL = {"seed": 3, "population": {"bursts_per_emitter": 30, "burst_len": 64, "snr_db": 20.0},
         "model": {"embed_dim": 8}, "train": {"epochs": 2},
         "task": {"gamma": 400}, "eval": {"ks": [2, 3, 4]}}


def test_defaults_are_filled():
    cfg = parse_config({})
    assert cfg.population.preset == "four-emitters-easy"
    assert cfg.model.kind == "FCN" and cfg.train.batch_size == 512
    rfec = parse_config({"task": {"kind": "RFEC"}})
    assert rfec.model.kind == "simpleAE" and rfec.train.batch_size == 128
    assert parse_config({"task": {"kind": "EDA"}}).train.batch_size == 128


def test_digest_stable_and_sensitive():
    a, b = parse_config({}), parse_config({"seed": 0})
    assert a.digest() == b.digest()
    assert a.digest() != parse_config({"seed": 1}).digest()
    assert a.canonical()["model"]["kind"] == "FCN"


@pytest.mark.parametrize("doc", [
    {"bogus": 1},
    {"task": {"kind": "XYZ"}},
    {"task": {"kind": "RFEC"}, "model": {"kind": "FCN"}},
    {"task": {"kind": "SEI"}, "model": {"kind": "simpleAE"}},
    {"population": {"preset": "four-emitters-easy", "emitters": [{"emitter_id": 1}, {"emitter_id": 2}]}},
    {"population": {"preset": None, "emitters": [{"emitter_id": 1}, {"emitter_id": 1}]}},
    {"population": {"burst_len": 65}},
    {"osr": {"proportions": [0.0, 0.5]}},
    {"task": {"proportion": 1.5}},
])
def test_invalid_configs(doc):
    with pytest.raises(SpecError):
        parse_config(doc)


def test_load_config_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(SMALL))
    cfg = load_config(p, {"train.epochs": 5, "task.alpha": None})
    assert cfg.train.epochs == 5 and cfg.task.alpha == 0.5
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(SpecError):
        load_config(tmp_path / "bad.json")


def test_k_range():
    assert _k_range("2..5") == [2, 3, 4, 5]
    assert _k_range("2,4") == [2, 4]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["--config", str(cfg), "--quiet", "synth", str(d / "data.rffd")]) == 0
    return d, cfg


def _run(d, cfg, *args):
    return main(["--config", str(cfg), "--out", str(d), "--quiet", *args])


def _only(d, pattern):
    hits = sorted(d.glob(pattern))
    assert len(hits) == 1, hits
    return hits[0]


def test_synth_byte_identical(workspace, tmp_path):
    d, cfg = workspace
    assert main(["--config", str(cfg), "--quiet", "synth", str(tmp_path / "again.rffd")]) == 0
    assert (tmp_path / "again.rffd").read_bytes() == (d / "data.rffd").read_bytes()
    ds = read_rffd(d / "data.rffd")
    assert ds.census() == {1: 30, 2: 30, 3: 30, 4: 30} and ds.burst_len == 64


def test_train_and_eval_sei(workspace, tmp_path):
    d, cfg = workspace
    out = tmp_path / "sei"
    assert _run(out, cfg, "train", str(d / "data.rffd"), "--task", "SEI") == 0
    ck = _only(out, "*.checkpoint.json")
    man = json.loads(_only(out, "*.manifest.json").read_text())
    assert man["best_epoch"] >= 1 and "accuracy" in man["metrics"]
    with open(_only(out, "*history.csv")) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "train_loss", "valid_loss"] and len(rows) == 4
    ev = tmp_path / "ev"
    assert _run(ev, cfg, "eval", str(ck), str(d / "data.rffd"), "--k", "2..3") == 0
    man = json.loads(_only(ev, "*.manifest.json").read_text())
    assert 0 <= man["metrics"]["accuracy"] <= 1
    names = " ".join(man["artifacts"])
    for art in ("confusion", "embeddings", "silhouette", "msp"):
        assert art in names
    assert _run(ev, cfg, "eval", str(ck), str(d / "data.rffd"), "--artifacts", "reconstruction") == 2


def test_train_is_bitwise_reproducible(workspace, tmp_path):
    d, cfg = workspace
    for sub in ("a", "b"):
        assert _run(tmp_path / sub, cfg, "train", str(d / "data.rffd"), "--task", "SEI") == 0
    a, b = _only(tmp_path / "a", "*.checkpoint.json"), _only(tmp_path / "b", "*.checkpoint.json")
    assert a.name == b.name and a.read_bytes() == b.read_bytes()
    ha, hb = _only(tmp_path / "a", "*history.csv"), _only(tmp_path / "b", "*history.csv")
    assert ha.read_bytes() == hb.read_bytes()


def test_eda_with_pair_file_and_sweep(workspace, tmp_path):
    d, cfg = workspace
    assert _run(tmp_path, cfg, "pairs", str(d / "data.rffd"), "--gamma", "300") == 0
    pf = tmp_path / "data.pairs.json"
    assert len(json.loads(pf.read_text())["entries"]) == 300
    out = tmp_path / "eda"
    assert _run(out, cfg, "train", str(d / "data.rffd"), "--task", "EDA", "--pairs", str(pf)) == 0
    ck = _only(out, "*.checkpoint.json")
    model = load_checkpoint(ck)
    assert model.head is None or not model.spec.n_classes
    sw = tmp_path / "sw"
    assert _run(sw, cfg, "sweep-snr", str(ck), "--snr", "0,20") == 0
    with open(_only(sw, "*snr.csv")) as fh:
        rows = list(csv.reader(fh))
    assert [r[0] for r in rows[1:]] == ["0.0", "20.0"]
    assert _run(tmp_path, cfg, "train", str(d / "data.rffd"), "--task", "SEI", "--pairs", str(pf)) == 2


def test_rfec_train_eval(workspace, tmp_path):
    d, cfg = workspace
    out = tmp_path / "rfec"
    assert _run(out, cfg, "train", str(d / "data.rffd"), "--task", "RFEC") == 0
    ck = _only(out, "*.checkpoint.json")
    assert load_checkpoint(ck).spec.kind == "simpleAE"
    assert _run(out, cfg, "eval", str(ck), str(d / "data.rffd")) == 0
    assert _run(out, cfg, "sweep-snr", str(ck)) == 2


def test_osr_command(workspace, tmp_path):
    d, cfg = workspace
    assert _run(tmp_path, cfg, "osr", str(d / "data.rffd"), "--heldout", "4", "--proportions", "1,0.5") == 0
    summary = _only(tmp_path, "*.summary.csv")
    with open(summary) as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["proportion"]) for r in rows] == [1.0, 0.5]
    assert all(0 <= float(r["auc"]) <= 1 for r in rows)
    assert _run(tmp_path, cfg, "osr", str(d / "data.rffd"), "--heldout", "9", "--proportions", "1") == 2
    assert _run(tmp_path, cfg, "osr", str(d / "data.rffd"), "--heldout", "4", "--proportions", "0,1") == 2


def test_exit_codes(workspace, tmp_path):
    d, cfg = workspace
    assert main(["bogus"]) == 2
    assert _run(tmp_path, cfg, "train", str(tmp_path / "missing.rffd")) == 3
    trunc = tmp_path / "t.rffd"
    trunc.write_bytes((d / "data.rffd").read_bytes()[:100])
    assert _run(tmp_path, cfg, "train", str(trunc)) == 3
    dup = tmp_path / "dup.json"
    dup.write_text(json.dumps({"population": {"preset": None,
                                              "emitters": [{"emitter_id": 1}, {"emitter_id": 1}]}}))
    assert main(["--config", str(dup), "--quiet", "synth", str(tmp_path / "x.rffd")]) == 2
    assert _run(tmp_path, cfg, "train", str(d / "data.rffd"), "--task", "SEI", "--proportion", "0") == 2


def test_flags_after_subcommand(workspace, tmp_path):
    d, cfg = workspace
    assert main(["synth", str(tmp_path / "a.rffd"), "--config", str(cfg), "--seed", "9", "--quiet"]) == 0
    assert read_rffd(tmp_path / "a.rffd").meta["seed"] == 9
    assert not np.array_equal(read_rffd(tmp_path / "a.rffd").x, read_rffd(d / "data.rffd").x)
