import math

import numpy as np
import pytest

from curricle import cli, neighbors, schedules, trainer


def corpus_file(path, n_lines, seed):
    rng = np.random.default_rng(seed)
    lines = [" ".join(f"w{i}" for i in rng.integers(0, 25, 12)) for _ in range(n_lines)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def run_files(tmp_path):
    train = corpus_file(tmp_path / "train.txt", 80, 0)
    valid = corpus_file(tmp_path / "valid.txt", 30, 1)
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        f"train = {train}\nvalid = {valid}\ntest = {valid}\nout = {tmp_path / 'out'}\n"
        "epochs = 2  # short\nd_emb = 8\nhidden = 8\nbatch_size = 4\neval_batch_size = 4\n"
        "bptt_len = 8\nlr0 = 5\nsource = tprs\nss.kind = linear\nss.end = 0.5\n"
        "nnrs.kind = linear\nnnrs.end = 0.2\n",
        encoding="utf-8",
    )
    return tmp_path, cfg


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("trained")
    train = corpus_file(d / "train.txt", 80, 0)
    valid = corpus_file(d / "valid.txt", 30, 1)
    code = cli.main(["train", "--train", str(train), "--valid", str(valid), "--out",
                     str(d / "out"), "--epochs", "2", "--d_emb", "8", "--hidden", "8",
                     "--batch_size", "4", "--eval_batch_size", "4", "--bptt_len", "8"])
    assert code == 0
    return d


class TestTrain:
    def test_valid_config(self, run_files, capsys):
        d, cfg = run_files
        assert cli.main(["train", str(cfg)]) == 0
        line = capsys.readouterr().out.strip().splitlines()[-1]
        assert line.startswith("best_valid=") and " test=" in line
        rows = (d / "out" / "reports.csv").read_bytes().split(b"\n")
        assert rows[0] == b",".join(f.encode() for f in trainer.REPORT_FIELDS)
        assert rows[-1] == b"" and len(rows) - 2 == 2
        assert b"\r" not in (d / "out" / "reports.csv").read_bytes()

    def test_deterministic(self, run_files):
        d, cfg = run_files
        assert cli.main(["train", str(cfg), "--out", str(d / "a")]) == 0
        assert cli.main(["train", str(cfg), "--out", str(d / "b")]) == 0
        assert (d / "a" / "reports.csv").read_bytes() == (d / "b" / "reports.csv").read_bytes()

    def test_start_above_end(self, run_files, capsys):
        d, cfg = run_files
        code = cli.main(["train", str(cfg), "--ss.start", "0.8"])
        assert code == 2
        assert "ss.start" in capsys.readouterr().err
        assert not (d / "out").exists()

    @pytest.mark.parametrize("key,value", [
        ("epochs", "0"), ("ss.kind", "cubic"), ("source", "bigram"), ("tau0", "0"),
        ("lr0", "abc"), ("nnrs.end", "1.5"), ("ss.feedback", "beam"),
    ])
    def test_bad_values_name_the_key(self, run_files, capsys, key, value):
        d, cfg = run_files
        assert cli.main(["train", str(cfg), f"--{key}", value]) == 2
        assert key in capsys.readouterr().err
        assert not (d / "out").exists()

    def test_unknown_key(self, run_files, capsys):
        d, cfg = run_files
        cfg.write_text(cfg.read_text() + "dropout = 0.5\n")
        assert cli.main(["train", str(cfg)]) == 2
        assert "dropout" in capsys.readouterr().err

    def test_nnrs_without_embeddings(self, run_files, capsys):
        d, cfg = run_files
        assert cli.main(["train", str(cfg), "--source", "nnrs"]) == 2
        assert "embeddings" in capsys.readouterr().err
        assert not (d / "out").exists()

    def test_seed_precedence(self, run_files, monkeypatch):
        d, cfg = run_files
        monkeypatch.setenv("CURRICLE_SEED", "7")
        assert cli.main(["train", str(cfg), "--out", str(d / "env")]) == 0
        assert cli.main(["train", str(cfg), "--out", str(d / "flag"), "--seed", "7"]) == 0
        monkeypatch.delenv("CURRICLE_SEED")
        assert cli.main(["train", str(cfg), "--out", str(d / "file")]) == 0
        env = (d / "env" / "reports.csv").read_bytes()
        assert env == (d / "flag" / "reports.csv").read_bytes()
        assert env != (d / "file" / "reports.csv").read_bytes()

    def test_help_lists_every_key(self, capsys):
        assert cli.main(["train", "--help"]) == 0
        out = capsys.readouterr().out
        for key in cli.KEYS:
            assert f"--{key}" in out


class TestEvalGenerate:
    def test_eval_matches_training(self, trained, capsys):
        ckpt = trained / "out" / "best.ckpt"
        assert cli.main(["eval", "--checkpoint", str(ckpt),
                         "--corpus", str(trained / "valid.txt")]) == 0
        ppl = float(capsys.readouterr().out.strip().split("=")[1])
        best = min(r.valid_ppl for r in trainer.read_reports(trained / "out" / "reports.csv"))
        assert abs(ppl - best) <= 1e-9

    def test_eval_missing_checkpoint(self, trained):
        assert cli.main(["eval", "--checkpoint", str(trained / "nope.ckpt"),
                         "--corpus", str(trained / "valid.txt")]) == 2

    def test_generate_greedy_repeatable(self, trained, capsys):
        argv = ["generate", "--checkpoint", str(trained / "out" / "best.ckpt"),
                "--prefix", "w1 w2", "--max-len", "6"]
        assert cli.main(argv) == 0
        first = capsys.readouterr().out
        assert cli.main(argv) == 0
        assert capsys.readouterr().out == first
        tokens, score = first.strip().splitlines()
        assert 1 <= len(tokens.split()) <= 6
        assert math.isfinite(float(score.split("=")[1]))

    def test_generate_one_token(self, trained, capsys):
        assert cli.main(["generate", "--checkpoint", str(trained / "out" / "best.ckpt"),
                         "--prefix", "w3", "--max-len", "1"]) == 0
        assert len(capsys.readouterr().out.splitlines()[0].split()) == 1

    def test_generate_empty_prefix(self, trained):
        assert cli.main(["generate", "--checkpoint", str(trained / "out" / "best.ckpt"),
                         "--prefix", " "]) == 2


class TestBuildNeighbors:
    def test_three_words(self, write, tmp_path, capsys):
        emb = write("e.txt", "a 1 0\nb 0 1\nc 1 1\n")
        vocab = write("v.txt", "a\nb\nc\n")
        out = tmp_path / "t.nnrs"
        assert cli.main(["build-neighbors", "--embeddings", str(emb), "--vocab", str(vocab),
                         "--k", "1", "--out", str(out)]) == 0
        assert capsys.readouterr().out.strip() == "coverage=1.0000 k=1"
        table = neighbors.load_table(out)
        assert table.neighbor_ids[:, 0].tolist() == [2, 2, 0]
        assert table == neighbors.build_neighbor_table(np.array([[1.0, 0], [0, 1], [1, 1]]), 1)

    def test_default_k(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        words = [f"t{i}" for i in range(1024)]
        (tmp_path / "v.txt").write_text("\n".join(words) + "\n")
        (tmp_path / "e.txt").write_text(
            "".join(f"{w} {' '.join(map(str, rng.normal(size=3)))}\n" for w in words[:600]))
        assert cli.main(["build-neighbors", "--embeddings", str(tmp_path / "e.txt"),
                         "--vocab", str(tmp_path / "v.txt"), "--out",
                         str(tmp_path / "t.nnrs")]) == 0
        out = capsys.readouterr().out
        assert "k=10" in out and "coverage=0.5859" in out

    @pytest.mark.parametrize("k", ["3", "4"])
    def test_k_too_large(self, write, tmp_path, k):
        emb = write("e.txt", "a 1 0\nb 0 1\nc 1 1\n")
        vocab = write("v.txt", "a\nb\nc\n")
        assert cli.main(["build-neighbors", "--embeddings", str(emb), "--vocab", str(vocab),
                         "--k", k, "--out", str(tmp_path / "t.nnrs")]) == 2
        assert not (tmp_path / "t.nnrs").exists()

    def test_bad_embedding_file(self, write, tmp_path, capsys):
        emb = write("e.txt", "a 1 0\nb 0 1 2\n")
        vocab = write("v.txt", "a\nb\nc\n")
        assert cli.main(["build-neighbors", "--embeddings", str(emb), "--vocab", str(vocab),
                         "--out", str(tmp_path / "t.nnrs")]) == 2
        assert "e.txt:2" in capsys.readouterr().err
        assert not (tmp_path / "t.nnrs").exists()


class TestInspectSchedule:
    def rows(self, capsys, *argv):
        assert cli.main(["inspect-schedule", *argv]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "epoch,rate"
        return [float(l.split(",")[1]) for l in lines[1:]]

    def test_linear(self, capsys):
        rates = self.rows(capsys, "--kind", "linear", "--start", "0", "--end", "1",
                          "--epochs", "4")
        assert rates == pytest.approx([0, 0.25, 0.5, 0.75, 1.0], abs=1e-12)

    def test_static(self, capsys):
        rates = self.rows(capsys, "--kind", "static", "--end", "0.2", "--epochs", "10")
        assert rates == [0.2] * 11

    def test_exp_increase_midpoint(self, capsys):
        rates = self.rows(capsys, "--kind", "exp_increase", "--start", "0", "--end", "1",
                          "--epochs", "40")
        assert rates[20] == pytest.approx(2 / (math.exp(5) + 1), abs=1e-15)
        assert rates[0] < 1e-4 and rates[40] == 1.0

    def test_unknown_kind(self):
        assert cli.main(["inspect-schedule", "--kind", "cubic"]) == 2


class TestGrid:
    def test_emits_every_row_and_curve(self, write, tmp_path):
        base = write("base.cfg", "train = t.txt\nvalid = v.txt\nepochs = 20\n")
        out = tmp_path / "grid"
        assert cli.main(["grid", "--base", str(base), "--out-dir", str(out)]) == 0
        files = sorted(out.glob("*.cfg"))
        assert len(files) == len(cli.GRID_ROWS) * len(schedules.KINDS)
        raw = cli.read_config(out / "ss-nnrs-3_static.cfg")
        assert raw["ss.end"] == "0.5" and raw["nnrs.end"] == "0.2"
        assert raw["source"] == "nnrs" and raw["epochs"] == "20"
        for f in files:
            cli.resolve_config(cli.read_config(f))

    def test_bad_base(self, write, tmp_path):
        base = write("base.cfg", "colour = blue\n")
        assert cli.main(["grid", "--base", str(base), "--out-dir", str(tmp_path / "g")]) == 2
        assert not (tmp_path / "g").exists()
