import re

import numpy as np

from efayolo.detector import ModelConfig, build_model, iou
from efayolo.formats import print_config, write_ppm, write_weights
from efayolo.toytrain import gen_dataset

from conftest import parse_kv, run_cli

LINE = re.compile(r"^\d+ \d\.\d{4}( -?\d+\.\d){4}$")


def test_analyze_default():
    code, out, err = run_cli("analyze")
    kv = parse_kv(out)
    assert code == 0 and err == ""
    assert kv["params_m"] == "1.4" and kv["precision"] == "fp16" and kv["input_size"] == "640"
    assert int(kv["layers"]) == 23


def test_analyze_input_size_scales_flops(tmp_path):
    full = int(parse_kv(run_cli("analyze")[1])["flops"])
    half = int(parse_kv(run_cli("analyze", "--input-size", 320)[1])["flops"])
    assert abs(half / full - 0.25) < 0.01
    code, out, _ = run_cli("analyze", "--table", "--precision", "fp32", "--out", tmp_path / "r.txt")
    assert code == 0 and out.splitlines()[0].split()[:2] == ["name", "params"]
    assert "precision = fp32" in (tmp_path / "r.txt").read_text()


def test_analyze_reads_config(tmp_path):
    (tmp_path / "c.cfg").write_text("width_mult = 0.5\ninput_size = 320\n")
    kv = parse_kv(run_cli("analyze", "--config", tmp_path / "c.cfg")[1])
    assert kv["input_size"] == "320" and float(kv["params_m"]) < 1.0


def test_config_errors_exit_1(tmp_path):
    code, out, err = run_cli("analyze", "--config", tmp_path / "missing.cfg")
    assert code == 1 and out == "" and str(tmp_path / "missing.cfg") in err and err.startswith("error: ")
    (tmp_path / "bad.cfg").write_text("input_size = 100\n")
    code, _, err = run_cli("analyze", "--config", tmp_path / "bad.cfg")
    assert code == 1 and "line 1: " in err


def test_usage_errors_exit_2():
    assert run_cli()[0] == 2
    assert run_cli("nope")[0] == 2
    assert run_cli("analyze", "--bogus")[0] == 2
    assert run_cli("analyze", "--precision", "int8")[0] == 2
    assert run_cli("bench", "--iters", "x")[0] == 2


def test_infer_blank_image_high_conf(tmp_path):
    cfg = ModelConfig(input_size=64, width_mult=0.25)
    write_weights(build_model(cfg), tmp_path / "w.efaw")
    (tmp_path / "w.cfg").write_text(print_config(cfg))
    write_ppm(tmp_path / "blank.ppm", np.zeros((30, 50, 3)))
    code, out, err = run_cli("infer", "--weights", tmp_path / "w.efaw", "--image", tmp_path / "blank.ppm", "--conf", 0.999)
    assert (code, out, err) == (0, "", "")
    code, out, _ = run_cli("infer", "--weights", tmp_path / "w.efaw", "--image", tmp_path / "blank.ppm", "--conf", 0.001)
    assert code == 0 and out and all(LINE.match(line) for line in out.splitlines())


def test_infer_bad_files(tmp_path):
    (tmp_path / "junk").write_bytes(b"not a file format")
    write_ppm(tmp_path / "i.ppm", np.zeros((4, 4, 3)))
    code, _, err = run_cli("infer", "--weights", tmp_path / "junk", "--image", tmp_path / "i.ppm")
    assert code == 1 and "bad-magic" in err
    code, _, err = run_cli("infer", "--weights", tmp_path / "nope.efaw", "--image", tmp_path / "i.ppm")
    assert code == 1 and "nope.efaw" in err


def test_infer_with_trained_toy_weights(toy_run, tmp_path):
    hits = 0
    samples = [s for s in gen_dataset(4242, 40) if len(s.boxes) == 1][:5]
    for k, s in enumerate(samples):
        path = tmp_path / f"blob{k}.ppm"
        write_ppm(path, s.image.transpose(1, 2, 0))
        code, out, err = run_cli("infer", "--weights", toy_run["dir"] / "weights.efaw", "--image", path)
        assert code == 0, err
        boxes = [tuple(map(float, line.split()[2:])) for line in out.splitlines()]
        hits += any(iou(b, s.boxes[0]) >= 0.5 for b in boxes)
    assert hits >= 4


def test_bench_reports_and_hash_is_stable():
    code, out, _ = run_cli("bench", "--iters", 1, "--warmup", 0, "--input-size", 64)
    kv = parse_kv(out)
    assert code == 0 and kv["iters"] == "1" and kv["mean_ms"] == kv["p50_ms"]
    assert out.splitlines()[0].startswith("config_hash = ")
    kv2 = parse_kv(run_cli("bench", "--iters", 3, "--warmup", 1, "--input-size", 64)[1])
    assert kv2["config_hash"] == kv["config_hash"]
    assert float(kv2["min_ms"]) <= float(kv2["mean_ms"]) <= float(kv2["max_ms"])
    assert run_cli("bench", "--iters", 0)[0] == 1


def test_gradcheck_and_selftest():
    code, out, _ = run_cli("gradcheck")
    assert code == 0
    rows = out.splitlines()
    assert rows[0].split() == ["block", "checked", "max_rel_error", "result"]
    assert [r.split()[0] for r in rows[1:6]] == ["CBS", "SPPF", "EAConv", "EADown", "Head"]
    assert all(r.split()[3] == "pass" for r in rows[1:6])
    code, out, err = run_cli("selftest")
    assert code == 0, out + err


def test_train_toy_artifacts(toy_run):
    d = toy_run["dir"]
    assert (d / "loss.csv").read_text().startswith("step,loss\n")
    assert len((d / "loss.csv").read_text().splitlines()) == 201
    assert (d / "weights.efaw").read_bytes()[:4] == b"EFAW"
    assert "input_size = 64" in (d / "weights.cfg").read_text()
    rep = toy_run["report"]
    assert rep["steps"] == "200" and 0 <= float(rep["heldout_recall"]) <= 1
