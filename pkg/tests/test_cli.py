import numpy as np
import pytest

from binmask import cli
from binmask.model import TransformerConfig
from binmask.persistence import load_checkpoint, load_maskfile, parse_report, save_checkpoint

from conftest import tiny_pretrained

SMALL = TransformerConfig(num_blocks=2, hidden=16, ff=32, heads=2, vocab_size=128, max_len=32)


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def ws(tmp_path, monkeypatch):
    """Working directory with a small pretrained checkpoint and a reference-style task."""
    monkeypatch.chdir(tmp_path)
    save_checkpoint(tiny_pretrained(0, SMALL), tmp_path / "pre.mwck")
    assert run("gen-data", "--out", "task", "--train", 40, "--dev", 20, "--test", 20) == 0
    return tmp_path


def report(path):
    return parse_report(open(path).read())


def test_usage_errors_exit_1(ws, capsys):
    assert run("no-such-command") == 1
    assert run("train", "--bogus") == 1
    assert run("eval", "--pretrained", "pre.mwck", "--model", "missing.mskb", "--data", "task") == 1
    assert "error" in capsys.readouterr().err
    (ws / "junk.bin").write_bytes(b"JUNKJUNK")
    assert run("analyze", "--masks", "junk.bin") == 1
    # a task checkpoint is not a pretrained checkpoint
    assert run("train", "--pretrained", "pre.mwck", "--data", "task", "--regime", "finetune",
               "--lr", 1e-3, "--epochs", 1, "--patience", 1, "--out", "ft.mwck") == 0
    assert run("train", "--pretrained", "ft.mwck", "--data", "task", "--regime", "finetune",
               "--lr", 1e-3, "--out", "x.mwck") == 1
    assert run("connect", "--linear", "--pretrained", "pre.mwck", "--a", "ft.mwck", "--b", "ft.mwck",
               "--data", "task", "--points", 1) == 1


def test_internal_error_exit_2(ws, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("boom")

    monkeypatch.setattr(cli.A, "memory_report", boom)
    assert run("memory") == 2


def test_memory_command_goldens(ws, capsys):
    assert run("memory", "--report", "mem.txt") == 0
    fields, tables = report("mem.txt")
    assert fields["pretrained_params"] == "109482240"
    assert fields["pretrained_kb"] == "437928.96"
    assert fields["mask_bits_per_task"] == "71368704"
    assert fields["mask_kb_per_task"] == "8921.088"
    assert fields["command"] == "memory" and "version" in fields and fields["arg.arch"] == "bert-base"
    assert "memory" in tables


def test_train_eval_roundtrip(ws):
    assert run("train", "--pretrained", "pre.mwck", "--data", "task", "--regime", "mask", "--lr", 3e-3,
               "--epochs", 2, "--mask-blocks", "top:1", "--save-scores", "--out", "m.mskb") == 0
    f, t = report("m.mskb.report.txt")
    art = load_maskfile("m.mskb")
    assert art.plan["blocks"] == [1]
    assert set(load_checkpoint("m.mskb.scores").params) == set(art.masks)
    assert run("eval", "--pretrained", "pre.mwck", "--model", "m.mskb", "--data", "task", "--report", "ev.txt") == 0
    _, et = report("ev.txt")
    assert float(et["eval"][1][0][-1]) == float(f["best_dev"]) == art.meta["dev_metric"]
    assert run("analyze", "--masks", "m.mskb", "m.mskb", "--report", "an.txt") == 0
    assert report("an.txt")[1]["pairwise"][1][0][2] == "0.0"
    assert run("dump-embeddings", "--pretrained", "pre.mwck", "--model", "m.mskb", "--data", "task",
               "--out", "emb.tsv") == 0
    assert len(open("emb.tsv").read().splitlines()) == 20


def test_sweeps_and_grid(ws):
    assert run("sweep-layers", "--pretrained", "pre.mwck", "--data", "task", "--seeds", "1",
               "--report", "sl.txt") == 0
    _, t = report("sl.txt")
    rows = t["runs"][1]
    assert [(r[0], r[1], r[2]) for r in rows] == [("bottom", "2", "0-1"), ("top", "2", "0-1")]
    assert run("sweep-sparsity", "--pretrained", "pre.mwck", "--data", "task", "--seeds", "1,2",
               "--sparsities", "0.05,0.5", "--report", "ss.txt") == 0
    assert len(report("ss.txt")[1]["runs"][1]) == 4
    assert run("grid-search", "--pretrained", "pre.mwck", "--data", "task", "--regime", "finetune",
               "--grid", "1e-3,3e-3,5e-3", "--report", "gs.txt") == 0
    assert "best_lr" in report("gs.txt")[0]


def test_ensemble_and_connect(ws):
    for s in (1, 2):
        assert run("train", "--pretrained", "pre.mwck", "--data", "task", "--regime", "finetune", "--lr", 1e-3,
                   "--seed", s, "--epochs", 1, "--patience", 1, "--out", f"f{s}.mwck") == 0
    assert run("train", "--pretrained", "pre.mwck", "--data", "task", "--regime", "mask", "--lr", 1e-3,
               "--epochs", 1, "--patience", 1, "--out", "m.mskb") == 0
    assert run("ensemble", "--pretrained", "pre.mwck", "--models", "f1.mwck", "f2.mwck", "m.mskb",
               "--data", "task", "--report", "en.txt") == 0
    assert [r[0] for r in report("en.txt")[1]["ensemble"][1]] == ["labels", "logits", "probs"]
    assert run("connect", "--linear", "--pretrained", "pre.mwck", "--a", "f1.mwck", "--b", "m.mskb",
               "--data", "task", "--report", "ln.txt") == 0
    assert len(report("ln.txt")[1]["path"][1]) == 11
    assert run("connect", "--bezier", "--pretrained", "pre.mwck", "--a", "f1.mwck", "--b", "m.mskb",
               "--data", "task", "--points", 5, "--report", "bz.txt") == 0
    assert len(report("bz.txt")[1]["curve"][1]) == 5


def _pipeline(d):
    assert run("gen-data", "--out", "t", "--train", 30, "--dev", 10, "--test", 10, "--seed", 4) == 0
    assert run("gen-data", "--kind", "corpus", "--out", "c", "--train", 40, "--length", 10) == 0
    assert run("pretrain", "--corpus", "c", "--out", "p.mwck", "--epochs", 1, "--patience", 1,
               "--blocks", 1, "--hidden", 16, "--ff", 32, "--heads", 2) == 0
    assert run("train", "--pretrained", "p.mwck", "--data", "t", "--regime", "mask", "--lr", 1e-3,
               "--epochs", 2, "--out", "m.mskb") == 0
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_cli_runs_bitwise_deterministic(tmp_path, monkeypatch):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        monkeypatch.chdir(d)
        outs.append(_pipeline(d))
    assert outs[0].keys() == outs[1].keys() and len(outs[0]) > 8
    for k in outs[0]:
        assert outs[0][k] == outs[1][k], k
