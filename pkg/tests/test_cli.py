import csv
import subprocess
import sys

import pytest
import torch

from recurformer.attention import AttentionConfig
from recurformer.cli import main
from recurformer.model import ModelConfig, RecurFormer, load_checkpoint, save_checkpoint
from recurformer.ssm import MambaConfig
from recurformer.tasks import CharTokenizer


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture
def base_ckpt(tmp_path):
    cfg = ModelConfig(2, AttentionConfig(32, 8, 4), 60, MambaConfig(1, d_state=4))
    return save_checkpoint(RecurFormer(cfg, seed=3), tmp_path / "base")


def test_help_and_unknown_command(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    assert "cache-report" in capsys.readouterr().out
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run(
        [sys.executable, "-m", "recurformer", "cache-report", "--out", str(tmp_path)], capture_output=True, text=True
    )
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "fractions.csv").exists()


def test_cache_report_default_table(tmp_path):
    assert main(["cache-report", "--out", str(tmp_path)]) == 0
    table = rows(tmp_path / "fractions.csv")
    assert table[0][0] == "beta"
    by_beta = {float(r[0]): [float(x) for x in r[1:]] for r in table[1:]}
    assert by_beta[0.0] == [1.0, 1.0]
    assert abs(by_beta[0.5][1] - 0.5) <= 0.005
    assert "[cache-report]" in (tmp_path / "config.txt").read_text()


def test_cache_report_measure_toy(tmp_path):
    args = ["cache-report", "--out", str(tmp_path), "--measure", "true", "--n-layers", "2", "--n-heads", "8",
            "--n-kv-heads", "4", "--d-head", "16", "--betas", "0,0.5,1", "--generate", "8", "--prompt-length", "8"]
    assert main(args) == 0
    assert len(rows(tmp_path / "measured_beta0.50.csv")) == 10
    assert main(args[:2] + [str(tmp_path / "big"), "--measure", "true"]) == 2


def test_usage_errors(tmp_path):
    assert main(["cache-report", "--out", str(tmp_path), "--betas", "1.5"]) == 2
    assert main(["cache-report", "--out", str(tmp_path), "--lengths", "abc"]) == 2
    cfg = tmp_path / "c.ini"
    cfg.write_text("[cache-report]\nno_such_key = 1\n")
    assert main(["cache-report", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    cfg.write_text("[nonsense]\nseed = 1\n")
    assert main(["cache-report", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert main(["cache-report", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path)]) == 2
    assert main(["analyze", "--out", str(tmp_path)]) == 2


def test_config_file_then_flags(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(f"[global]\nout = {tmp_path / 'a'}\n\n[cache-report]\nbetas = 0,1\nlengths = 100\n")
    assert main(["cache-report", "--config", str(cfg), "--lengths", "200"]) == 0
    table = rows(tmp_path / "a" / "fractions.csv")
    assert len(table) == 3 and table[0] == ["beta", "cs_200"]
    echoed = (tmp_path / "a" / "config.txt").read_text()
    assert "betas = 0.0,1.0" in echoed and "lengths = 200" in echoed


def test_bad_checkpoint_is_data_error(tmp_path):
    (tmp_path / "ck").mkdir()
    (tmp_path / "ck" / "manifest.txt").write_text("garbage\n")
    assert main(["eval-mqar", "--checkpoint", str(tmp_path / "ck"), "--out", str(tmp_path / "o")]) == 3
    assert main(["eval-mqar", "--checkpoint", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 3


def test_analyze_then_convert(tmp_path, base_ckpt):
    out = tmp_path / "an"
    assert main(["analyze", "--checkpoint", str(base_ckpt), "--out", str(out), "--n-samples", "3", "--length", "20"]) == 0
    rai = rows(out / "rai.csv")
    assert rai[0] == ["layer", "head", "ra_index"] and len(rai) == 1 + 16
    assert all(0 <= int(r[2]) <= 3 for r in rai[1:])
    assert (out / "rr_config.json").exists() and (out / "contribution.csv").exists()
    for beta, n_m in (("0", 0), ("1", 16), ("0.5", 8)):
        o = tmp_path / f"cv{beta}"
        assert main(["convert", "--checkpoint", str(base_ckpt), "--report", str(out / "rai.csv"),
                     "--beta", beta, "--out", str(o)]) == 0
        assert load_checkpoint(o / "model").assignment.n_replaced == n_m
    bad = tmp_path / "bad.csv"
    bad.write_text("layer,head,ra_index\n0,0,1\n")
    assert main(["convert", "--checkpoint", str(base_ckpt), "--report", str(bad), "--out", str(tmp_path / "x")]) == 3


def test_analyze_rejects_bad_samples(tmp_path, base_ckpt):
    s = tmp_path / "s.txt"
    s.write_text("1 2 3\n")
    args = ["analyze", "--checkpoint", str(base_ckpt), "--out", str(tmp_path / "o"), "--samples", str(s),
            "--n-samples", "1", "--length", "5"]
    assert main(args) == 3
    s.write_text("1 2 3 4 999\n")
    assert main(args) == 3
    s.write_text("1 2 3 4 5\n")
    assert main(args) == 0


def test_gen_task_is_byte_identical(tmp_path):
    for task in ("mqar", "hashhop"):
        outs = []
        for run in ("a", "b"):
            o = tmp_path / f"{task}{run}"
            assert main(["gen-task", "--task", task, "--out", str(o), "--seed", "9"]) == 0
            outs.append({p.name: p.read_bytes() for p in sorted(o.iterdir()) if p.name != "config.txt"})
        assert outs[0] == outs[1]
        assert len([n for n in outs[0] if n.startswith(task + "_")]) == 4
    assert main(["gen-task", "--task", "mqar", "--n-pairs", "40", "--out", str(tmp_path / "e")]) == 2


def test_eval_hashhop_echo_scores_one(tmp_path):
    assert main(["eval-hashhop", "--answerer", "echo", "--out", str(tmp_path)]) == 0
    table = rows(tmp_path / "hashhop.csv")
    assert table[-1] == ["mean", "1.0"] and len(table) == 10


def test_eval_hashhop_with_model(tmp_path):
    cfg = ModelConfig(1, AttentionConfig(16, 2, 2), CharTokenizer().vocab_size)
    ck = save_checkpoint(RecurFormer(cfg, seed=0), tmp_path / "m")
    assert main(["eval-hashhop", "--checkpoint", str(ck), "--n-instances", "1", "--out", str(tmp_path / "o")]) == 0
    score = float(rows(tmp_path / "o" / "hashhop.csv")[-1][1])
    assert 0.0 <= score <= 1.0


def test_train_and_eval_mqar_deterministic(tmp_path):
    args = ["train-mqar", "--betas", "0,1", "--steps", "3", "--warmup-steps", "1", "--batch-size", "2",
            "--d-model", "16", "--n-heads", "2", "--n-kv-heads", "1", "--n-layers", "1", "--mamba-d-state", "2",
            "--train-lengths", "16,24", "--train-pairs", "2,4", "--test-pairs", "4", "--test-lengths", "32",
            "--eval-samples", "2", "--eval-batch", "2", "--curriculum-steps", "1"]
    outs = []
    for run in ("a", "b"):
        o = tmp_path / run
        assert main(args + ["--out", str(o)]) == 0
        outs.append((o / "accuracy.csv").read_text() + (o / "trace_beta1.00.csv").read_text())
    assert outs[0] == outs[1]
    o = tmp_path / "ev"
    assert main(["eval-mqar", "--checkpoint", str(tmp_path / "a" / "model_beta0.00"), "--test-pairs", "4",
                 "--test-lengths", "32", "--eval-samples", "2", "--out", str(o)]) == 0
    assert rows(o / "accuracy.csv")[0] == ["n_pairs", "length", "accuracy"]


def test_continual_train_pretrain_then_hybrid(tmp_path):
    common = ["--steps", "2", "--warmup-steps", "0", "--batch-size", "2", "--d-model", "16", "--n-heads", "4",
              "--n-kv-heads", "2", "--corpus-docs", "4", "--seq-len", "16", "--mamba-d-state", "2"]
    assert main(["continual-train", "--out", str(tmp_path / "pre")] + common) == 0
    base = tmp_path / "pre" / "model"
    ra = tmp_path / "rai.csv"
    ra.write_text("layer,head,ra_index\n" + "".join(f"{l},{h},{h}\n" for l in range(2) for h in range(4)))
    assert main(["convert", "--checkpoint", str(base), "--report", str(ra), "--out", str(tmp_path / "cv")]) == 0
    assert main(["continual-train", "--base", str(base), "--hybrid", str(tmp_path / "cv" / "model"),
                 "--out", str(tmp_path / "ct")] + common) == 0
    trace = rows(tmp_path / "ct" / "trace.csv")
    assert trace[0] == ["step", "loss", "metric", "base_loss"] and len(trace) == 3
    assert main(["continual-train", "--hybrid", str(tmp_path / "cv" / "model"), "--out", str(tmp_path / "z")]) == 2


def test_divergence_exit_code(tmp_path, monkeypatch):
    import recurformer.cli as cli
    from recurformer.training import TrainingDiverged

    def boom(*a, **k):
        raise TrainingDiverged("non-finite loss nan at step 0")

    monkeypatch.setattr(cli, "train_mqar_ablation", boom)
    assert main(["train-mqar", "--out", str(tmp_path)]) == 4
