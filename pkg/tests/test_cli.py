import json

import numpy as np
import pytest

from modquant import load_checkpoint, load_container, read_container
from modquant.cli import main

FOUR_QUESTION_FIXTURE = [
    {"question_id": 1, "passes": [["A", "A"]]},
    {"question_id": 2, "passes": [["B", "B"], ["C", "C"]]},
    {"question_id": 3, "passes": [["A", "B"]]},
    {"question_id": 4, "passes": [["A", "A"], ["D", "C"]]},
]


@pytest.fixture
def workspace(tmp_path):
    model = tmp_path / "model.bin"
    cv = tmp_path / "cv.bin"
    cm = tmp_path / "cm.bin"
    assert main(["gen-model", "--vision-layers", "1", "--crossmodal-layers", "1",
                 "--dim", "32", "--seed", "1", "--out", str(model)]) == 0
    assert main(["gen-calib", "--module", "vision", "--dim", "32",
                 "--samples", "2", "--seqlen", "8", "--seed", "2",
                 "--out", str(cv)]) == 0
    assert main(["gen-calib", "--module", "crossmodal", "--dim", "32",
                 "--samples", "2", "--seqlen", "8", "--seed", "3",
                 "--out", str(cm)]) == 0
    return tmp_path


def test_eval_circular_fixture(tmp_path, capsys):
    rec = tmp_path / "rec.json"
    rec.write_text(json.dumps(FOUR_QUESTION_FIXTURE))
    assert main(["eval-circular", "--records", str(rec)]) == 0
    assert capsys.readouterr().out.strip() == "0.5"


def test_eval_circular_malformed_json(tmp_path):
    rec = tmp_path / "rec.json"
    rec.write_text("{not json")
    assert main(["eval-circular", "--records", str(rec)]) == 3


def test_unknown_flag_is_usage_error(capsys):
    assert main(["eval-circular", "--no-such-flag", "x"]) == 2


def test_unknown_command_is_usage_error():
    assert main(["frobnicate"]) == 2


def test_quantize_and_size(workspace, capsys):
    out = workspace / "ckpt.bin"
    rc = main(["quantize", "--model", str(workspace / "model.bin"),
               "--calib-v", str(workspace / "cv.bin"),
               "--calib-m", str(workspace / "cm.bin"),
               "--bits", "4", "--groupsize", "16", "--out", str(out)])
    assert rc == 0
    ckpt = load_checkpoint(out)
    assert len(ckpt.layers) == 9  # 1 vision + 8 cross-modal members
    report = json.loads((workspace / "ckpt.bin.report.json").read_text())
    assert report["schema_version"] == 1

    capsys.readouterr()
    assert main(["size", "--model", str(workspace / "model.bin"),
                 "--bits", "4", "--groupsize", "16"]) == 0
    sizes = json.loads(capsys.readouterr().out)
    assert sizes["quantized_bytes"] == sum(
        e["bytes"]["total"] for e in report["layers"]
    )


def test_quantize_rejects_bits_3(workspace):
    rc = main(["quantize", "--model", str(workspace / "model.bin"),
               "--calib-v", str(workspace / "cv.bin"),
               "--calib-m", str(workspace / "cm.bin"),
               "--bits", "3", "--out", str(workspace / "x.bin")])
    assert rc == 4


def test_quantize_missing_model(workspace):
    rc = main(["quantize", "--model", str(workspace / "nope.bin"),
               "--calib-v", str(workspace / "cv.bin"),
               "--calib-m", str(workspace / "cm.bin"),
               "--bits", "4", "--out", str(workspace / "x.bin")])
    assert rc == 4


def test_quantize_bad_container(workspace):
    bad = workspace / "bad.bin"
    bad.write_bytes(b"XXXX" + bytes(32))
    rc = main(["quantize", "--model", str(bad),
               "--calib-v", str(workspace / "cv.bin"),
               "--calib-m", str(workspace / "cm.bin"),
               "--bits", "4", "--out", str(workspace / "x.bin")])
    assert rc == 3


def test_pack_roundtrip_command(capsys):
    assert main(["pack-roundtrip", "--bits", "4", "--seed", "7"]) == 0
    assert "ok" in capsys.readouterr().out


def test_bench_with_trace(workspace, capsys):
    cfgs = workspace / "cfgs.json"
    cfgs.write_text(json.dumps([
        {"block_m": 8, "block_d": 8, "block_k": 8},
        {"block_m": 16, "block_d": 16, "block_k": 16},
    ]))
    trace = workspace / "trace.json"
    rc = main(["bench", "--m", "16", "--k", "32", "--d", "16", "--bits", "4",
               "--configs", str(cfgs), "--runs", "3", "--trace", str(trace)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "median_ns" in out and "*" in out
    spans = json.loads(trace.read_text())
    assert sum(s["label"] == "forward" for s in spans) == 1
    assert any(s["label"] == "tile" for s in spans)


def test_bench_malformed_configs(workspace):
    cfgs = workspace / "cfgs.json"
    cfgs.write_text("{}")
    assert main(["bench", "--m", "8", "--k", "16", "--d", "8",
                 "--configs", str(cfgs)]) == 3


def test_gen_model_deterministic(tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    args = ["gen-model", "--vision-layers", "1", "--crossmodal-layers", "1",
            "--dim", "16", "--seed", "5"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_model_container_rereads_bit_exactly(workspace):
    path = workspace / "model.bin"
    first = read_container(path)
    second = read_container(path)
    for name in first:
        assert first[name].tobytes() == second[name].tobytes()
    _, attrs = load_container(path)
    assert attrs["schema"] == "synthetic-model/1"
