import csv
import json
import math
import struct

import numpy as np
import pytest

from lorax.cli import main
from lorax.similarity import module_similarity
from lorax.tensor_store import TensorBundle, read_bundle, write_bundle


@pytest.fixture
def pair(tmp_path_factory):
    out = tmp_path_factory.mktemp("pair")
    assert main(["synth-pair", "--m", "16", "--n", "16", "--r", "4", "--modules", "4", "--theta", "pi/4",
                 "--steps", "100", "--out", str(out)]) == 0
    return out


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def test_inspect_table(capsys, pair):
    code, out, _ = run(capsys, "inspect", pair / "source.safetensors")
    assert code == 0 and "4 tensors" in out and "db.0.attentions.0.tb.0.to_q" in out


def test_inspect_svd(capsys, tmp_path):
    p = tmp_path / "w.safetensors"
    write_bundle(TensorBundle.from_arrays({"w": np.array([[3.0, 0.0], [4.0, 5.0]])}), p)
    code, out, _ = run(capsys, "inspect", p, "--svd")
    assert code == 0 and "6.7082, 2.2361" in out


def test_inspect_corrupt_header(capsys, tmp_path):
    p = tmp_path / "bad.safetensors"
    p.write_bytes(struct.pack("<Q", 6) + b'{"a": ')
    code, _, err = run(capsys, "inspect", p)
    assert code == 2 and "FormatError" in err and "byte offset" in err


def test_inspect_missing_file(capsys, tmp_path):
    code, _, err = run(capsys, "inspect", tmp_path / "nope.safetensors")
    assert code == 2 and err


def test_similarity_self(capsys, pair, tmp_path):
    out_json = tmp_path / "sim.json"
    src = pair / "source.safetensors"
    code, out, _ = run(capsys, "similarity", src, src, "--rank", "4", "--out", out_json)
    assert code == 0
    rows = json.loads(out_json.read_text())
    valid = [r for r in rows if r["valid"]]
    assert valid and all(abs(r["left"] - 1) < 1e-9 and abs(r["right"] - 1) < 1e-9
                         for r in valid if r["source_key"] == r["target_key"])
    with open(out_json.with_suffix(".csv")) as fh:
        assert len(list(csv.DictReader(fh))) == len(rows)


def test_similarity_matches_library(capsys, pair, tmp_path):
    out_json = tmp_path / "sim.json"
    code, _, _ = run(capsys, "similarity", pair / "source.safetensors", pair / "target.safetensors",
                     "--rank", "4", "--candidates", "positional", "--out", out_json)
    assert code == 0
    s, t = read_bundle(pair / "source.safetensors"), read_bundle(pair / "target.safetensors")
    for r in json.loads(out_json.read_text()):
        ref = module_similarity(s.matrix(r["source_key"]), t.matrix(r["target_key"]), rank_limit=4)
        assert r["left"] == pytest.approx(ref.left, abs=1e-12)
        assert r["left"] == pytest.approx(0.5, abs=1e-6)


def test_similarity_disjoint(capsys, tmp_path, caplog):
    a, b = tmp_path / "a.safetensors", tmp_path / "b.safetensors"
    write_bundle(TensorBundle.from_arrays({"db.0.attentions.0.tb.0.to_q": np.eye(3)}), a)
    write_bundle(TensorBundle.from_arrays({"up.0.attentions.0.tb.0.to_k": np.eye(3)}), b)
    code, out, _ = run(capsys, "similarity", a, b, "--candidates", "all")
    assert code == 0 and "0 valid / 1 scored" in out
    assert "no valid module pair" in caplog.text


def test_transfer_identity_verify(capsys, pair, tmp_path):
    src = pair / "source.safetensors"
    out = tmp_path / "moved.safetensors"
    code, stdout, _ = run(capsys, "transfer", src, pair / "adapter.safetensors", src, "--out", out, "--verify")
    assert code == 0 and "verify:" in stdout
    report = json.loads((tmp_path / "moved.safetensors.report.json").read_text())
    assert all(m["action"] == "transferred" for m in report["modules"])
    assert read_bundle(out).metadata["base_model_hash"] == read_bundle(src).content_hash()


def test_transfer_verify_failure_exit(capsys, pair):
    code, _, err = run(capsys, "transfer", pair / "source.safetensors", pair / "adapter.safetensors",
                       pair / "target.safetensors", "--verify", "--verify-tol", "1e-9")
    assert code == 3 and "verify failed" in err


def test_transfer_modes_differ(capsys, pair, tmp_path):
    reports = {}
    for mode in ("project", "copy_sigma"):
        rp = tmp_path / f"{mode}.json"
        code, _, _ = run(capsys, "transfer", pair / "source.safetensors", pair / "adapter.safetensors",
                         pair / "target.safetensors", "--mode", mode, "--out", tmp_path / f"{mode}.st",
                         "--report", rp)
        assert code == 0
        reports[mode] = json.loads(rp.read_text())
    assert reports["project"] != reports["copy_sigma"]
    for a, b in zip(reports["project"]["modules"], reports["copy_sigma"]["modules"]):
        assert a["frobenius_ratio"] <= 1 + 1e-12


def test_transfer_filter_blocks(capsys, pair, tmp_path):
    fb = tmp_path / "filter.txt"
    key = "db.0.attentions.0.tb.0.to_k"
    fb.write_text(key + "\n")
    out = tmp_path / "moved.safetensors"
    code, _, _ = run(capsys, "transfer", pair / "source.safetensors", pair / "adapter.safetensors",
                     pair / "target.safetensors", "--filter-blocks", fb, "--out", out, "--threshold", "0")
    assert code == 0
    assert not any(k.startswith(key) for k in read_bundle(out))
    report = json.loads((tmp_path / "moved.safetensors.report.json").read_text())
    rec = [m for m in report["modules"] if m["target_key"] == key]
    assert len(rec) == 1 and rec[0]["action"] == "filtered"


def test_transfer_hash_mismatch(capsys, pair):
    code, _, err = run(capsys, "transfer", pair / "target.safetensors", pair / "adapter.safetensors",
                       pair / "source.safetensors")
    assert code == 2 and "BasisMismatch" in err
    assert read_bundle(pair / "target.safetensors").content_hash() in err


def test_atc_self_and_invalid(capsys, pair, tmp_path):
    src = pair / "source.safetensors"
    out = tmp_path / "atc.json"
    code, stdout, _ = run(capsys, "atc", src, src, "--rank", "4", "--out", out, "--include-plan")
    assert code == 0
    res = json.loads(out.read_text())
    assert [r["side"] for r in res] == ["left", "right"]
    assert all(abs(r["atc"]) < 1e-9 and r["S"] == 4 and "plan" in r for r in res)

    a, b = tmp_path / "a.safetensors", tmp_path / "b.safetensors"
    write_bundle(TensorBundle.from_arrays({"db.0.attentions.0.tb.0.to_q": np.eye(3)}), a)
    write_bundle(TensorBundle.from_arrays({"db.0.attentions.0.tb.0.to_k": np.eye(3),
                                           "up.0.attentions.0.tb.0.to_q": np.eye(3)}), b)
    code, _, _ = run(capsys, "atc", a, b, "--side", "left", "--out", out)
    assert code == 0 and json.loads(out.read_text())["atc"] == pytest.approx(1.0)


def test_atc_synth_value(capsys, pair, tmp_path):
    out = tmp_path / "atc.json"
    code, _, _ = run(capsys, "atc", pair / "source.safetensors", pair / "target.safetensors", "--rank", "4",
                     "--side", "left", "--out", out)
    assert code == 0
    # every matched pair sits at cos^2(pi/4) = 0.5
    assert json.loads(out.read_text())["atc"] == pytest.approx(0.5, abs=1e-6)


def test_synth_bench_single(capsys, tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"m": 16, "n": 16, "r": 4, "modules": 2}))
    code, _, _ = run(capsys, "synth-bench", "--spec", spec, "--seeds", 1, "--theta-grid", "0",
                     "--modes", "project", "--out", tmp_path / "b")
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "b" / "sweep.csv")))
    assert len(rows) == 1 and float(rows[0]["degradation"]) <= 1e-6
    summary = json.loads((tmp_path / "b" / "summary.json").read_text())
    assert summary["theta0_max_degradation"] <= 1e-6


def test_synth_bench_grid(capsys, tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"m": 16, "n": 16, "r": 4, "modules": 1}))
    code, _, _ = run(capsys, "synth-bench", "--spec", spec, "--seeds", 2, "--theta-grid", "0,pi/8,pi/4,pi/2",
                     "--steps", 200, "--out", tmp_path / "b")
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "b" / "sweep.csv")))
    assert len(rows) == 2 * 4 * 2
    assert {float(r["theta"]) for r in rows} == {0.0, math.pi / 8, math.pi / 4, math.pi / 2}


def test_config_override(capsys, tmp_path):
    p = tmp_path / "w.safetensors"
    write_bundle(TensorBundle.from_arrays({"w": np.array([[3.0, 0.0], [4.0, 5.0]])}), p)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"svd": True, "top": 1}))
    code, out, _ = run(capsys, "--config", cfg, "inspect", p)
    assert code == 0 and "6.7082" in out and "2.2361" not in out


def test_deterministic(capsys, pair, tmp_path):
    outs = []
    for i in range(2):
        o = tmp_path / f"s{i}.json"
        run(capsys, "similarity", pair / "source.safetensors", pair / "target.safetensors", "--rank", "4",
            "--out", o, "--jobs", str(1 + 3 * i))
        outs.append(o.read_bytes())
    assert outs[0] == outs[1]
