import subprocess
import sys

import pytest

from miqa import cli
from miqa import harness as H
from miqa import taskgen as tg

TINY_INI = """
[experiment]
seeds = 0
held_out = darken
[backbone]
conv_layers = 4x3x2, 8x3x2
hidden = 8
[meta]
alpha = 1e-3
beta = 1.0
epochs = 2
[finetune]
alpha_f = 1e-4
[tasks]
bases = 4
"""


@pytest.fixture
def conf(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_train_tune_evaluate_saliency(tmp_path, conf, capsys):
    out = tmp_path / "out"
    assert run("meta-train", "--config", conf, "--out", out, "--held-out", "darken") == 0
    prior = out / "prior.ckpt"
    assert prior.exists()
    assert run("fine-tune", "--config", conf, "--out", out, "--checkpoint", prior,
               "--held-out", "darken") == 0
    assert (out / "finetuned.ckpt").exists()
    capsys.readouterr()
    assert run("evaluate", "--config", conf, "--checkpoint", out / "finetuned.ckpt",
               "--held-out", "darken") == 0
    assert "srocc=" in capsys.readouterr().out
    assert run("saliency", "--config", conf, "--out", out, "--checkpoint", prior,
               "--family", "gaussian-noise") == 0
    img = tg.read_pnm(out / "saliency.pgm")
    assert img.shape == (32, 32, 1) and img.max() == 1.0


def test_global_flags_before_subcommand(tmp_path, conf):
    out = tmp_path / "o2"
    assert run("--config", conf, "--out", out, "--seed", 3, "meta-train") == 0
    ck = H.read_checkpoint(out / "prior.ckpt", H.load_config(conf).backbone)
    assert ck.epoch == 2


def test_gen_tasks(tmp_path, conf):
    out = tmp_path / "tasks"
    assert run("gen-tasks", "--config", conf, "--out", out) == 0
    rows = tg.read_manifest(out / "scores.csv")
    assert len(rows) == 8 * 4 * 5


def test_protocol_commands(tmp_path, conf, capsys):
    assert run("lodo", "--config", conf, "--out", tmp_path / "l") == 0
    assert "results:" in capsys.readouterr().out
    recs = H.read_results(tmp_path / "l" / "results.csv")
    assert {r["unit"] for r in recs} == {"darken", "mean"}
    assert run("sweep", "--config", conf, "--out", tmp_path / "s", "--k", "1,2",
               "--S", "1") == 0
    recs = H.read_results(tmp_path / "s" / "results.csv")
    assert {r["run_id"] for r in recs} == {"sweep/k1-S1", "sweep/k2-S1"}


def test_exit_codes(tmp_path, conf):
    assert run("bogus") == cli.EXIT_USAGE
    bad = tmp_path / "bad.ini"
    bad.write_text("[meta]\nnope = 1\n")
    assert run("lodo", "--config", bad) == cli.EXIT_USAGE
    assert run("lodo", "--config", tmp_path / "missing.ini") == cli.EXIT_USAGE
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"MIQA\x01")
    assert run("evaluate", "--config", conf, "--checkpoint", junk,
               "--held-out", "darken") == cli.EXIT_CHECKPOINT
    assert run("evaluate", "--config", conf, "--checkpoint", tmp_path / "none.ckpt",
               "--held-out", "darken") == cli.EXIT_CHECKPOINT
    assert run("evaluate", "--config", conf, "--checkpoint", junk,
               "--held-out", "sepia") in (cli.EXIT_USAGE, cli.EXIT_CHECKPOINT)


def test_exit_code_mapping():
    from miqa import evaluate as E
    from miqa import metalearn as ML
    assert cli.exit_code_for(H.FingerprintMismatch()) == cli.EXIT_CHECKPOINT
    assert cli.exit_code_for(tg.TaskGenError()) == cli.EXIT_DATA
    assert cli.exit_code_for(ML.MetaError()) == cli.EXIT_TRAINING
    assert cli.exit_code_for(E.EvalError()) == cli.EXIT_EVALUATION
    assert cli.exit_code_for(PermissionError()) == cli.EXIT_IO
    assert cli.exit_code_for(KeyError()) == 1


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "miqa", "--version"], capture_output=True,
                         text=True)
    assert out.returncode == 0 and out.stdout.startswith("miqa ")
