"""End-to-end tests for the command-line interface.

Commands run in-process through cli.run so the suite stays fast; every
artifact lands in a per-session temporary workspace.
"""

import io
import json
import sys

import pytest

from duetrank import cli

TINY_TRAIN = [
    "--model-dim", "16", "--n-layers", "1", "--n-heads", "2", "--ffn-dim", "32",
    "--projection-dim", "12", "--dropout", "0.0", "--epochs", "1",
    "--batch-size", "8", "--delta-r", "4", "--lr", "1e-3",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Generate a corpus, train mutually, and build an index once."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus.jsonl"
    out_dir = root / "run"
    rc = cli.run([
        "gen-corpus", "--out", str(corpus), "--seed", "3",
        "--n-examples", "24", "--n-topics", "3", "--vocab-size", "60",
        "--candidates", "6", "--out-dir", str(out_dir),
    ])
    assert rc == 0
    rc = cli.run([
        "train", "--mode", "mutual", "--corpus", str(corpus),
        "--out-dir", str(out_dir), "--seed", "0", *TINY_TRAIN,
    ])
    assert rc == 0
    rc = cli.run([
        "build-index", "--corpus", str(corpus),
        "--retriever", str(out_dir / "retriever.ckpt"),
        "--vocab", str(out_dir / "vocab.txt"),
        "--out", str(root / "index.bin"), "--out-dir", str(out_dir),
    ])
    assert rc == 0
    return {
        "root": root,
        "corpus": corpus,
        "out_dir": out_dir,
        "index": root / "index.bin",
        "vocab": out_dir / "vocab.txt",
        "retriever": out_dir / "retriever.ckpt",
        "selector": out_dir / "selector.ckpt",
    }


def eval_args(ws, out_dir, extra=()):
    return [
        "eval", "--corpus", str(ws["corpus"]), "--vocab", str(ws["vocab"]),
        "--index", str(ws["index"]), "--retriever", str(ws["retriever"]),
        "--selector", str(ws["selector"]), "--system", "two-stage",
        "--n-r", "4", "--ks", "1,5", "--out-dir", str(out_dir), *extra,
    ]


class TestUsageAndErrors:
    def test_no_arguments_exits_2(self, capsys):
        assert cli.run([]) == 2
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_subcommand_exits_2(self, capsys):
        assert cli.run(["frobnicate"]) == 2
        capsys.readouterr()

    def test_missing_file_exits_1(self, tmp_path, capsys):
        rc = cli.run([
            "train", "--corpus", str(tmp_path / "nope.jsonl"),
            "--out-dir", str(tmp_path), *TINY_TRAIN,
        ])
        assert rc == 1
        assert "error" in capsys.readouterr().err


class TestGenCorpus:
    def test_artifacts(self, workspace, capsys):
        assert workspace["corpus"].exists()
        logged = json.loads((workspace["out_dir"] / "gen_corpus_config.json").read_text())
        assert logged["n_examples"] == 24
        assert logged["command"] == "gen-corpus"

    def test_same_seed_same_file(self, workspace, tmp_path, capsys):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for out in (a, b):
            cli.run([
                "gen-corpus", "--out", str(out), "--seed", "3",
                "--n-examples", "24", "--n-topics", "3", "--vocab-size", "60",
                "--candidates", "6", "--out-dir", str(tmp_path / "run"),
            ])
        capsys.readouterr()
        assert a.read_bytes() == b.read_bytes()


class TestTrain:
    def test_artifacts(self, workspace):
        assert workspace["retriever"].exists()
        assert workspace["selector"].exists()
        assert workspace["vocab"].exists()
        lines = (workspace["out_dir"] / "train_report.jsonl").read_text().strip().splitlines()
        records = [json.loads(line) for line in lines]
        assert any(r.get("record") == "epoch" for r in records)
        assert any("retriever_nll" in r for r in records)

    def test_seed_reproducibility(self, workspace, tmp_path, capsys):
        dirs = [tmp_path / "r1", tmp_path / "r2"]
        for d in dirs:
            rc = cli.run([
                "train", "--mode", "single-bi", "--corpus", str(workspace["corpus"]),
                "--out-dir", str(d), "--seed", "7", *TINY_TRAIN,
            ])
            assert rc == 0
        capsys.readouterr()
        assert (dirs[0] / "retriever.ckpt").read_bytes() == (dirs[1] / "retriever.ckpt").read_bytes()


class TestEval:
    def test_report_and_determinism(self, workspace, tmp_path, capsys):
        outs = [tmp_path / "e1", tmp_path / "e2"]
        texts = []
        for out in outs:
            rc = cli.run(eval_args(workspace, out))
            assert rc == 0
            texts.append(capsys.readouterr().out)
            metrics = json.loads((out / "metrics.json").read_text())
            assert 0.0 <= metrics["hits@1"] <= metrics["hits@5"] <= 1.0
            assert metrics["n_examples"] == 24
        assert texts[0] == texts[1]
        assert (outs[0] / "metrics.json").read_bytes() == (outs[1] / "metrics.json").read_bytes()

    def test_config_precedence(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "opts.cfg"
        cfg.write_text("n-r = 2\nstrategy = ensemble  # comment\n")
        out = tmp_path / "ecfg"
        # File overrides the default; the explicit flag overrides the file.
        rc = cli.run([
            "eval", "--corpus", str(workspace["corpus"]), "--vocab", str(workspace["vocab"]),
            "--index", str(workspace["index"]), "--retriever", str(workspace["retriever"]),
            "--selector", str(workspace["selector"]), "--config", str(cfg),
            "--n-r", "3", "--ks", "1", "--out-dir", str(out),
        ])
        assert rc == 0
        capsys.readouterr()
        logged = json.loads((out / "eval_config.json").read_text())
        assert logged["n_r"] == 3  # flag wins
        assert logged["strategy"] == "ensemble"  # file beats default

    def test_default_without_file_or_flag(self, workspace, tmp_path, capsys):
        out = tmp_path / "edef"
        rc = cli.run([
            "eval", "--corpus", str(workspace["corpus"]), "--vocab", str(workspace["vocab"]),
            "--index", str(workspace["index"]), "--retriever", str(workspace["retriever"]),
            "--selector", str(workspace["selector"]), "--ks", "1", "--out-dir", str(out),
        ])
        capsys.readouterr()
        assert rc == 0
        logged = json.loads((out / "eval_config.json").read_text())
        assert logged["n_r"] == 100  # built-in default


class TestBench:
    def test_rows_and_files(self, workspace, tmp_path, capsys):
        out = tmp_path / "bench"
        rc = cli.run([
            "bench", "--corpus", str(workspace["corpus"]), "--vocab", str(workspace["vocab"]),
            "--index", str(workspace["index"]), "--retriever", str(workspace["retriever"]),
            "--selector", str(workspace["selector"]), "--n-r-values", "2,4",
            "--out-dir", str(out),
        ])
        assert rc == 0
        stdout = capsys.readouterr().out
        assert "two_stage_nr2" in stdout
        assert "two_stage_nr4" in stdout
        rows = json.loads((out / "bench.json").read_text())
        assert {r["variant"] for r in rows} >= {"cross_full", "bi_only", "two_stage_nr2"}
        assert (out / "bench.csv").exists()


class TestChat:
    def chat(self, workspace, tmp_path, monkeypatch, capsys, lines, extra=()):
        monkeypatch.setattr(sys, "stdin", io.StringIO("\n".join(lines) + "\n"))
        rc = cli.run([
            "chat", "--corpus", str(workspace["corpus"]), "--vocab", str(workspace["vocab"]),
            "--index", str(workspace["index"]), "--retriever", str(workspace["retriever"]),
            "--selector", str(workspace["selector"]), "--n-r", "4",
            "--out-dir", str(tmp_path / "chat"), *extra,
        ])
        assert rc == 0
        return capsys.readouterr().out

    def test_one_response_per_prompt(self, workspace, tmp_path, monkeypatch, capsys):
        out = self.chat(workspace, tmp_path, monkeypatch, capsys, ["hello there", ":quit"])
        lines = [l for l in out.splitlines() if l.strip()]
        assert len(lines) == 1

    def test_reset_restores_first_turn_reply(self, workspace, tmp_path, monkeypatch, capsys):
        first = self.chat(workspace, tmp_path, monkeypatch, capsys, ["hello there", ":quit"])
        resumed = self.chat(
            workspace, tmp_path, monkeypatch, capsys,
            ["hello there", "and more words", ":reset", "hello there", ":quit"],
        )
        lines = [l for l in resumed.splitlines() if l.strip()]
        assert "(context cleared)" in lines
        assert lines[-1] == first.strip()

    def test_determinism(self, workspace, tmp_path, monkeypatch, capsys):
        a = self.chat(workspace, tmp_path, monkeypatch, capsys, ["hi", "ok then", ":quit"])
        b = self.chat(workspace, tmp_path, monkeypatch, capsys, ["hi", "ok then", ":quit"])
        assert a == b

    def test_verbose_candidate_lines(self, workspace, tmp_path, monkeypatch, capsys):
        out = self.chat(
            workspace, tmp_path, monkeypatch, capsys, ["hello there", ":quit"],
            extra=["--verbose"],
        )
        cand = [l for l in out.splitlines() if l.startswith("  [g=")]
        assert len(cand) == 4  # min(5, n_r) with n_r = 4
