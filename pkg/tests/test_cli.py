import csv
import io

import numpy as np
import pytest

from egokit import cli
from egokit.data.generate import GeneratorConfig, generate
from egokit.data.io import load_sequence, save_cpf, save_observations, save_sequence
from egokit.data.hands import Corruption, synthesize_hand_observations
from egokit.scene import save_point_cloud, synthetic_floor_cloud

TINY = ["--width", "16", "--blocks", "1", "--batch-size", "4"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("gen", "--out", out, "--count", 30, "--seed", 7) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    assert run("train", "--data", dataset, "--out", path, "--steps", 200, "--seed", 1, *TINY) == 0
    return path


def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_gen_writes_files_and_manifest(dataset):
    rows = read_csv(dataset / "manifest.csv")
    assert len(rows) == 30
    assert all((dataset / r["file"]).exists() for r in rows)
    assert {r["split"] for r in rows} <= {"train", "test"}
    assert load_sequence(dataset / rows[0]["file"]).id == rows[0]["id"]


def test_gen_rerun_is_identical(dataset, tmp_path):
    assert run("gen", "--out", tmp_path, "--count", 30, "--seed", 7) == 0
    for r in read_csv(dataset / "manifest.csv"):
        assert (dataset / r["file"]).read_bytes() == (tmp_path / r["file"]).read_bytes()


def test_gen_family_histogram(tmp_path, capsys):
    assert run("gen", "--out", tmp_path, "--count", 10, "--families", "walk,squat") == 0
    families = [r["family"] for r in read_csv(tmp_path / "manifest.csv")]
    assert families.count("walk") == 5 and families.count("squat") == 5
    assert "walk" in capsys.readouterr().out


def test_train_loss_decreases_and_is_deterministic(dataset, checkpoint, tmp_path):
    losses = [float(r["loss"]) for r in read_csv(str(checkpoint) + ".loss.csv")]
    assert len(losses) == 200
    assert np.mean(losses[-20:]) < np.mean(losses[:20])
    again = tmp_path / "again.ckpt"
    assert run("train", "--data", dataset, "--out", again, "--steps", 200, "--seed", 1, *TINY) == 0
    assert again.read_bytes() == checkpoint.read_bytes()


def test_config_file_and_flag_precedence(dataset, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# toy\ntrain.steps=3\ntrain.width=16\ntrain.blocks=1\ntrain.batch_size=4\n"
                   f"common.seed=2\ntrain.data={dataset}\n")
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    assert run("--config", cfg, "train", "--out", a) == 0
    assert len(read_csv(str(a) + ".loss.csv")) == 3
    assert run("--config", cfg, "train", "--out", b, "--steps", 5) == 0
    assert len(read_csv(str(b) + ".loss.csv")) == 5


def test_config_unknown_key_is_usage_error(dataset, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("train.stepz=3\n")
    assert run("--config", cfg, "train", "--data", dataset, "--out", tmp_path / "x.ckpt") == 1
    assert "stepz" in capsys.readouterr().err
    cfg.write_text("nosuch.steps=3\n")
    assert run("--config", cfg, "train", "--data", dataset, "--out", tmp_path / "x.ckpt") == 1


def test_usage_errors(tmp_path):
    assert run("frobnicate") == 1
    assert run("train", "--steps", "many") == 1
    assert run("train", "--out", tmp_path / "x.ckpt") == 1  # no data
    assert run("estimate", "--checkpoint", tmp_path / "missing.ckpt", "--cpf", tmp_path / "missing.txt",
               "--out", tmp_path / "o.jsonl") == 1
    assert run("floor", "--points", tmp_path / "missing.txt") == 1


def test_runtime_errors(tmp_path, checkpoint):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    cpf = tmp_path / "c.txt"
    cpf.write_text("1 0 0 0 1 0 0 0 1 0 0 1.6\n")
    assert run("estimate", "--checkpoint", bad, "--cpf", cpf, "--out", tmp_path / "o.jsonl") == 2
    cpf.write_text("1 0 0 0 1 0 0 0 1 0 0\n")
    assert run("estimate", "--checkpoint", checkpoint, "--cpf", cpf, "--out", tmp_path / "o.jsonl") == 2
    pts = tmp_path / "pts.txt"
    pts.write_text("0 0 0 1\n")
    assert run("floor", "--points", pts) == 2


def test_estimate_single_window_with_metrics(checkpoint, dataset, tmp_path, capsys):
    seq = generate(GeneratorConfig(seed=11, duration=(4.3, 4.3)), 1)[0]
    assert seq.length == 129
    seq = seq.crop(0, 128)
    save_sequence(seq, tmp_path / "gt.jsonl")
    out = tmp_path / "est.jsonl"
    assert run("estimate", "--checkpoint", checkpoint, "--sequence", tmp_path / "gt.jsonl", "--out", out,
               "--metrics", tmp_path / "m.csv") == 0
    assert "1 window(s)" in capsys.readouterr().out
    assert load_sequence(out).length == 128
    rows = read_csv(tmp_path / "m.csv")
    assert [r["metric"] for r in rows] == ["mpjpe", "pampjpe", "gnd", "t_head"]
    assert all(np.isfinite(float(r["value"])) for r in rows)


def test_estimate_three_windows_is_deterministic(checkpoint, tmp_path, capsys):
    seq = generate(GeneratorConfig(seed=12, duration=(10.0, 10.0)), 1)[0]
    assert seq.length == 300
    save_cpf(*seq.cpf(), tmp_path / "c.txt")
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run("estimate", "--checkpoint", checkpoint, "--cpf", tmp_path / "c.txt", "--out", a) == 0
    assert "3 window(s)" in capsys.readouterr().out
    assert run("estimate", "--checkpoint", checkpoint, "--cpf", tmp_path / "c.txt", "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()


def test_estimate_with_guidance_and_floor(checkpoint, tmp_path, capsys):
    seq = generate(GeneratorConfig(seed=13, families=("reach",)), 1)[0].crop(0, 32)
    seq.root_pos[:, 2] += 0.3
    save_sequence(seq, tmp_path / "gt.jsonl")
    save_observations(synthesize_hand_observations(seq, Corruption(noise_px=1.0)), tmp_path / "o.txt")
    save_point_cloud(synthetic_floor_cloud(np.random.default_rng(0), floor_z=0.3), tmp_path / "p.txt")
    assert run("estimate", "--checkpoint", checkpoint, "--sequence", tmp_path / "gt.jsonl",
               "--observations", tmp_path / "o.txt", "--points", tmp_path / "p.txt", "--guided-steps", 2,
               "--lm-iterations", 2, "--lambda-reproj", 0.5, "--out", tmp_path / "e.jsonl") == 0
    out = capsys.readouterr().out
    assert "guidance on" in out
    assert abs(float(out.split("floor z=")[1].split(",")[0]) - 0.3) < 0.01
    assert "mpjpe," in out


def test_metrics_flag_needs_sequence(checkpoint, tmp_path):
    (tmp_path / "c.txt").write_text("1 0 0 0 1 0 0 0 1 0 0 1.6\n")
    assert run("estimate", "--checkpoint", checkpoint, "--cpf", tmp_path / "c.txt", "--out", tmp_path / "e.jsonl",
               "--metrics", tmp_path / "m.csv") == 1


def test_quick_ablation(dataset, tmp_path):
    out = tmp_path / "abl"
    assert run("ablate", "--data", dataset, "--out-dir", out, "--quick", 1, "--steps", 5, "--batch-size", 4,
               "--seqlens", "32", "--max-test", 2) == 0
    rows = read_csv(out / "ablation.csv")
    assert list(rows[0]) == cli.ABLATION_COLUMNS
    assert [r["variant"] for r in rows] == ["egoallo", "absolute"]
    assert (out / "ablation.svg").read_text().lstrip().startswith("<?xml")
    assert (out / "egoallo.ckpt").exists() and (out / "absolute.ckpt").exists()


def test_eval_writes_summary(dataset, checkpoint, capsys):
    assert run("eval", "--checkpoint", checkpoint, "--data", dataset, "--seqlens", "32", "--max-test", 2) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 1 and rows[0]["seqlen"] == "32"


def test_floor_command(tmp_path, capsys):
    save_point_cloud(synthetic_floor_cloud(np.random.default_rng(3), floor_z=-0.2), tmp_path / "p.txt")
    assert run("floor", "--points", tmp_path / "p.txt") == 0
    out = capsys.readouterr().out.split()
    assert out[0] == "floor_z" and abs(float(out[1]) + 0.2) < 0.01


def test_skeleton_dump(capsys):
    assert run("skeleton-dump") == 0
    assert len(capsys.readouterr().out.splitlines()) >= 52


def test_thread_env(monkeypatch, capsys):
    monkeypatch.setenv("EGOKIT_THREADS", "1")
    assert run("skeleton-dump") == 0
    monkeypatch.setenv("EGOKIT_THREADS", "zero")
    assert run("skeleton-dump") == 1
