import json

import numpy as np
import pytest

from regiontok.cli import main, parse_values, UsageError
from regiontok.config import RunConfig
from regiontok.sweep import UnknownSweepParameter, format_table, sweep

TINY = ["--set", "batch_size=2", "--set", "points_per_image=4", "--set", "warmup=1"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def last_json(text):
    return json.loads([l for l in text.splitlines() if l.startswith("{")][-1])


# ---- sweep driver ----

def test_tau_mask_zero_merges_to_one_token_per_frame():
    rows = sweep("tau_mask", [0.0], "parse", items=2, T=3)
    assert rows[0].tokens == 1.0


def test_token_counts_non_decreasing_in_tau_mask():
    rows = sweep("tau_mask", [0.0, 0.3, 0.6, 0.9, 1.0], "parse", items=2, T=2)
    counts = [r.tokens for r in rows]
    assert counts == sorted(counts)


def test_track_counts_non_decreasing_in_tau_track():
    rows = sweep("tau_track", [0.1, 0.4, 0.65, 0.9, 0.99], "parse", items=2, T=4)
    counts = [r.extra["tracks"] for r in rows]
    assert counts == sorted(counts)


def test_grid_size_and_k_sweeps():
    rows = sweep("grid_size", [4, 8], "ovss", items=1)
    assert [r.tokens for r in rows] == [4 * 4 * 3, 8 * 8 * 3]
    rows = sweep("k", [1, 2], "ovss", items=1)
    assert [r.tokens for r in rows] == [64, 128]


def test_unknown_sweep_parameter():
    with pytest.raises(UnknownSweepParameter):
        sweep("heads", [1], "parse")
    with pytest.raises(UnknownSweepParameter):
        sweep("tau_mask", [1], "detect")


def test_format_table_shape():
    rows = sweep("tau_mask", parse_values("0,0.1,...,0.9"), "parse", items=1, T=2)
    lines = format_table("tau_mask", "parse", rows).splitlines()
    assert lines[0].split("\t") == ["tau_mask", "parse", "tokens", "tracks"]
    assert [l.split("\t")[0] for l in lines[1:]] == ["0", "0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8", "0.9"]


def test_parse_values():
    assert parse_values("0,0.1,...,0.9") == [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    assert parse_values("0.5, 0.7") == [0.5, 0.7]
    assert parse_values("16,24,...,32") == [16, 24, 32]
    with pytest.raises(UsageError):
        parse_values("0,...,1")
    with pytest.raises(UsageError):
        parse_values("a,b")


# ---- command line ----

def test_gen_data_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "gen-data", "--seed", "7", "--count", "2", "--out", str(tmp_path / name))[0] == 0
    files_a = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files_a == sorted(p.name for p in (tmp_path / "b").iterdir())
    assert "scene_000.feat" in files_a and "vocab.json" in files_a
    for f in files_a:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_gen_data_video(tmp_path, capsys):
    assert run(capsys, "gen-data", "--kind", "video", "--frames", "3", "--out", str(tmp_path))[0] == 0
    desc = json.loads((tmp_path / "video_000.json").read_text())
    assert len(desc["frames"]) == 3
    assert sorted(p.name for p in (tmp_path / "video_000").iterdir()) == [f"frame_00{i}.feat" for i in (1, 2, 3)]


def test_usage_errors_exit_1(capsys):
    assert run(capsys, "no-such-command")[0] == 1
    assert run(capsys, "grad-check", "--bogus")[0] == 1
    code, _, err = run(capsys)
    assert code == 1 and "usage" in err


def test_validation_errors_exit_1(tmp_path, capsys):
    assert run(capsys, "gen-data", "--set", "tau_mask=2")[0] == 1
    cfg = tmp_path / "run.cfg"
    cfg.write_text("unknown_key=1\n")
    assert run(capsys, "gen-data", "--config", str(cfg))[0] == 1
    assert run(capsys, "sweep", "--param", "heads", "--values", "1", "--task", "parse")[0] == 1


def test_format_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOPE" + bytes(20))
    assert run(capsys, "inspect", str(bad))[0] == 2
    assert run(capsys, "inspect", str(tmp_path / "missing"))[0] == 2
    assert run(capsys, "gen-data", "--config", str(tmp_path / "missing.cfg"))[0] == 2
    run(capsys, "gen-data", "--out", str(tmp_path / "d"))
    feat = tmp_path / "d" / "scene_000.feat"
    data = bytearray(feat.read_bytes())
    data[4] = 9  # version
    feat.write_bytes(bytes(data))
    assert run(capsys, "inspect", str(feat))[0] == 2
    feat.write_bytes(bytes(data[:30]))
    assert run(capsys, "inspect", str(feat))[0] == 2


def test_train_encode_merge_track_chain(tmp_path, capsys):
    d = tmp_path
    assert run(capsys, "gen-data", "--kind", "video", "--frames", "2", "--out", str(d / "data"))[0] == 0
    code, out, _ = run(capsys, "train", *TINY, "--steps", "2", "--log", str(d / "log.jsonl"),
                       "--out", str(d / "m.renw"))
    assert code == 0 and last_json(out)["steps"] == 2
    recs = [json.loads(l) for l in (d / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [1, 2]
    assert {"lr", "visual_contrastive", "text_contrastive", "distillation", "attention"} <= set(recs[0])
    for t in (1, 2):
        assert run(capsys, "encode", "--weights", str(d / "m.renw"), "--features",
                   str(d / "data" / "video_000" / f"frame_00{t}.feat"), "--frame", str(t),
                   "--out", str(d / f"r{t}.rtok"))[0] == 0
        assert run(capsys, "merge", "--tokens", str(d / f"r{t}.rtok"), "--out", str(d / f"m{t}.rtok"))[0] == 0
    code, out, _ = run(capsys, "track", "--tokens", str(d / "m1.rtok"), str(d / "m2.rtok"), "--out", str(d / "t.rtok"))
    assert code == 0
    code, out, _ = run(capsys, "inspect", str(d / "t.rtok"))
    assert code == 0 and "RTOK" in out
    code, out, _ = run(capsys, "inspect", str(d / "m.renw"))
    assert code == 0 and "RENW" in out


def test_train_is_bit_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "train", *TINY, "--steps", "2", "--threads", "1", "--seed", "3",
                   "--out", str(tmp_path / f"{name}.renw"))[0] == 0
    assert (tmp_path / "a.renw").read_bytes() == (tmp_path / "b.renw").read_bytes()


def test_checkpoint_dimension_mismatch_exits_1(tmp_path, capsys):
    run(capsys, "train", *TINY, "--steps", "1", "--out", str(tmp_path / "m.renw"))
    run(capsys, "gen-data", "--set", "d=16", "--out", str(tmp_path / "d16"))
    code = run(capsys, "encode", "--weights", str(tmp_path / "m.renw"),
               "--features", str(tmp_path / "d16" / "scene_000.feat"))[0]
    assert code == 1


@pytest.mark.parametrize("cmd", ["eval-ovss", "eval-haystack", "eval-localize", "eval-parse"])
def test_oracle_evaluations(cmd, capsys):
    code, out, _ = run(capsys, cmd, "--oracle", "--count", "5")
    assert code == 0
    rec = last_json(out)
    score = {"eval-ovss": "miou", "eval-haystack": "accuracy", "eval-localize": "recall",
             "eval-parse": "miou"}[cmd]
    assert rec[score] == 1.0


def test_grad_check_command(capsys):
    code, out, _ = run(capsys, "grad-check", "--batches", "2")
    assert code == 0
    for name in ("visual_contrastive", "text_contrastive", "distillation", "attention"):
        assert name in out


def test_sweep_command_table(capsys):
    code, out, _ = run(capsys, "sweep", "--param", "tau_mask", "--values", "0,0.1,...,0.9", "--task", "parse",
                       "--count", "1", "--frames", "2")
    assert code == 0
    rows = [l.split("\t") for l in out.strip().splitlines() if "\t" in l]
    assert rows[0][:3] == ["tau_mask", "parse", "tokens"] and len(rows) == 11
    assert float(rows[1][2]) == 1.0


def test_plot_data_flag(capsys):
    code, out, _ = run(capsys, "sweep", "--param", "tau_track", "--values", "0.2,0.8", "--task", "parse",
                       "--count", "1", "--frames", "2", "--plot-data")
    assert code == 0
    pairs = [l.split() for l in out.splitlines() if l and "\t" not in l and not l.startswith("{")]
    assert [p[0] for p in pairs] == ["0.2", "0.8"]
