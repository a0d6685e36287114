import math
import time

import numpy as np
import pytest

from curricle import corpus, neighbors, seqmodel, trainer
from curricle.schedules import RatePair, ScheduleSpec
from curricle.trainer import (
    MIXED_NEIGHBOR, MIXED_PREDICTION, NEIGHBOR, PREDICTION, TEACHER, TrainConfig,
    TrainState, cosine_lr, evaluate, select_input, select_inputs, train_epoch,
)


def branch_probs(eps, gam):
    return {
        "teacher": (1 - eps) * (1 - gam),
        "prediction": eps * (1 - gam) + eps * gam / 2,
        "neighbor": (1 - eps) * gam + eps * gam / 2,
    }


def small_table():
    vecs = np.random.default_rng(0).normal(size=(12, 4))
    return neighbors.build_neighbor_table(vecs, k=3)


def make_vocab(n):
    """``n`` tokens including the two specials."""
    return corpus.Vocabulary([corpus.EOS, corpus.UNK] + [f"w{i}" for i in range(n - 2)])


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def random_corpus(path, n_tokens, vocab_size, seed):
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in rng.integers(0, vocab_size, n_tokens)]
    return write_lines(path, [" ".join(words[i:i + 20]) for i in range(0, n_tokens, 20)])


class TestSelectInput:
    def test_teacher_only(self, rng):
        for _ in range(200):
            assert select_input(3, 7, 0.0, 0.0, rng) == (3, "teacher")

    def test_prediction_only(self, rng):
        for _ in range(200):
            assert select_input(3, 7, 1.0, 0.0, rng) == (7, "prediction")

    def test_neighbor_only_draws_from_row(self, rng):
        table = small_table()
        row = set(table.row(5)[0].tolist())
        for _ in range(200):
            tok, tag = select_input(5, 7, 0.0, 1.0, rng, table, 0.5)
            assert tag == "neighbor" and tok in row

    def test_both_on_is_a_fair_coin(self, rng):
        table = small_table()
        row = set(table.row(2)[0].tolist())
        n, pred = 100_000, 0
        for _ in range(n):
            tok, tag = select_input(2, 99, 1.0, 1.0, rng, table, 0.5)
            assert tag == "mixed"
            if tok == 99:
                pred += 1
            else:
                assert tok in row
        assert abs(pred / n - 0.5) <= 0.02

    @pytest.mark.parametrize("eps,gam", [(0.5, 0.2), (0.3, 0.3), (1.0, 1.0)])
    def test_vectorized_branch_rates(self, eps, gam):
        rng = np.random.default_rng(7)
        sampler = neighbors.NeighborSampler(small_table(), 0.3)
        counts = np.zeros(5)
        y = np.arange(1000) % 12
        for _ in range(100):
            _, codes = select_inputs(y, y, eps, gam, rng, sampler)
            counts += np.bincount(codes, minlength=5)
        frac = counts / counts.sum()
        want = branch_probs(eps, gam)
        assert abs(frac[TEACHER] - want["teacher"]) <= 0.02
        assert abs(frac[PREDICTION] + frac[MIXED_PREDICTION] - want["prediction"]) <= 0.02
        assert abs(frac[NEIGHBOR] + frac[MIXED_NEIGHBOR] - want["neighbor"]) <= 0.02

    def test_vectorized_feeds_the_chosen_source(self, rng):
        table = small_table()
        sampler = neighbors.NeighborSampler(table, 0.3)
        y = np.arange(600) % 12
        yhat = y + 100
        ids, codes = select_inputs(y, yhat, 0.5, 0.5, rng, sampler)
        for yi, out, c in zip(y, ids, codes):
            if c == TEACHER:
                assert out == yi
            elif c in (PREDICTION, MIXED_PREDICTION):
                assert out == yi + 100
            else:
                assert out in table.row(yi)[0]

    def test_neighbor_without_table(self, rng):
        with pytest.raises(ValueError):
            select_inputs(np.zeros(50, int), np.zeros(50, int), 0.0, 1.0, rng)


class TestPredictedIds:
    def test_greedy(self, rng):
        logits = rng.normal(size=(6, 9))
        assert np.array_equal(trainer.predicted_ids(logits, "greedy", rng), logits.argmax(1))

    def test_sample_follows_softmax(self, rng):
        logits = np.log(np.array([[0.1, 0.6, 0.3]]))
        draws = np.concatenate([
            trainer.predicted_ids(np.repeat(logits, 1000, 0), "sample", rng) for _ in range(100)
        ])
        np.testing.assert_allclose(np.bincount(draws, minlength=3) / draws.size,
                                   [0.1, 0.6, 0.3], atol=0.01)

    def test_feedback_mode_validated(self):
        with pytest.raises(ValueError):
            TrainConfig(feedback="beam")


class TestCosineLR:
    def test_examples(self):
        assert cosine_lr(20, 0, 0, 40) == 20
        assert cosine_lr(20, 0, 40, 40) == pytest.approx(0, abs=1e-12)
        assert cosine_lr(20, 2, 20, 40) == pytest.approx(11)

    def test_non_increasing(self):
        lrs = [cosine_lr(20, 0.5, e, 37) for e in range(38)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        assert lrs[-1] == pytest.approx(0.5, abs=1e-12)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(20, 0, 41, 40)


def reference_teacher_forced(params, batches, lr, clip):
    """Plain truncated-BPTT SGD, written without the trainer."""
    h = seqmodel.zero_state(params, batches.batch_size)
    for x, y in batches.windows():
        _, grads, h = seqmodel.loss_and_grads(params, x, y, h)
        grads = seqmodel.clip_gradients(grads, clip)
        for p, g in zip(params.arrays(), grads.arrays()):
            p -= lr * g
    return params


def test_reduction_to_teacher_forcing(rng):
    ids = rng.integers(0, 30, 3000)
    stream = corpus.TokenStream(ids, make_vocab(30))
    batches = corpus.batchify(stream, 4, 10)
    cfg = TrainConfig(total_epochs=2, d_emb=8, hidden=8)
    p0 = seqmodel.init_params(30, 8, 8, np.random.default_rng(5))
    a = p0.copy()
    state = TrainState(lr=3.0, rng=np.random.default_rng(9))
    for _ in range(2):
        train_epoch(a, batches, state, cfg, RatePair(0.0, 0.0))
    b = p0.copy()
    for _ in range(2):
        reference_teacher_forced(b, batches, 3.0, cfg.clip)
    for x, y in zip(a.arrays(), b.arrays()):
        assert np.array_equal(x, y)


def test_alternating_corpus_is_learned():
    vocab = make_vocab(2)
    stream = corpus.TokenStream(np.arange(2000) % 2, vocab)
    batches = corpus.batchify(stream, 4, 10)
    cfg = TrainConfig(total_epochs=20, d_emb=8, hidden=8)
    params = seqmodel.init_params(2, 8, 8, np.random.default_rng(0))
    state = TrainState(lr=1.0, rng=np.random.default_rng(0))
    ppl = math.inf
    for i in range(20):
        state.lr = cosine_lr(cfg.lr0, cfg.lr_min, i, 20)
        params, ppl = train_epoch(params, batches, state, cfg)
    assert ppl < 1.1


def test_epoch_rate_audit():
    rng = np.random.default_rng(2)
    V = 40
    stream = corpus.TokenStream(rng.integers(0, V, 20_000),
                                make_vocab(V))
    batches = corpus.batchify(stream, 20, 25)
    table = neighbors.build_neighbor_table(rng.normal(size=(V, 6)))
    cfg = TrainConfig(d_emb=6, hidden=6, replacement_source="nnrs")
    params = seqmodel.init_params(V, 6, 6, np.random.default_rng(0))
    counts = np.zeros(5)
    state = TrainState(lr=1.0, rng=np.random.default_rng(3))
    while counts.sum() < 100_000:
        train_epoch(params, batches, state, cfg, RatePair(0.5, 0.2),
                    neighbors.NeighborSampler(table, 0.4))
        counts += state.replacement_stats
    frac = counts / counts.sum()
    want = branch_probs(0.5, 0.2)
    assert abs(frac[TEACHER] - want["teacher"]) <= 0.02
    assert abs(frac[PREDICTION] + frac[MIXED_PREDICTION] - want["prediction"]) <= 0.02
    assert abs(frac[NEIGHBOR] + frac[MIXED_NEIGHBOR] - want["neighbor"]) <= 0.02
    t, p, n, m = trainer.fractions(state.replacement_stats)
    assert t + p + n + m == pytest.approx(1.0)


def test_nan_loss_reports_context(rng):
    stream = corpus.TokenStream(rng.integers(0, 10, 500),
                                make_vocab(10))
    params = seqmodel.init_params(10, 4, 4, rng)
    params.b_out[0] = np.nan
    state = TrainState(lr=1.0, rng=rng)
    with pytest.raises(FloatingPointError, match="batch 0"):
        train_epoch(params, corpus.batchify(stream, 2, 5), state, TrainConfig(d_emb=4, hidden=4))


class TestEvaluate:
    def test_untrained_bounds(self, rng):
        V = 50
        stream = corpus.TokenStream(rng.integers(0, V, 3000),
                                    make_vocab(V))
        params = seqmodel.init_params(V, 8, 8, rng)
        assert 25 <= evaluate(params, corpus.batchify(stream, 5, 20)) <= 100

    def test_deterministic_and_improves_with_training(self, rng):
        V = 20
        stream = corpus.TokenStream(np.tile(rng.integers(0, V, 50), 40),
                                    make_vocab(V))
        batches = corpus.batchify(stream, 4, 10)
        params = seqmodel.init_params(V, 16, 16, np.random.default_rng(0))
        before = evaluate(params, batches)
        assert evaluate(params, batches) == before
        state = TrainState(lr=5.0, rng=np.random.default_rng(0))
        for _ in range(10):
            train_epoch(params, batches, state, TrainConfig(d_emb=16, hidden=16))
        assert evaluate(params, batches) < before


class TestConfig:
    def test_neighbor_rate_needs_source(self):
        with pytest.raises(ValueError):
            TrainConfig(nnrs_schedule=ScheduleSpec("static", 0, 0.2))

    def test_schedules_follow_epochs(self):
        cfg = TrainConfig(total_epochs=7, ss_schedule=ScheduleSpec("linear", 0, 0.5, 40))
        assert cfg.ss_schedule.total_epochs == 7
        assert cfg.nnrs_schedule.is_off


@pytest.fixture
def small_run(tmp_path):
    train = random_corpus(tmp_path / "train.txt", 1000, 30, 0)
    valid = random_corpus(tmp_path / "valid.txt", 400, 30, 1)
    test = random_corpus(tmp_path / "test.txt", 400, 30, 2)
    return train, valid, test


def small_cfg(**kw):
    base = dict(total_epochs=3, d_emb=16, hidden=16, batch_size=4, eval_batch_size=4,
                bptt_len=10, lr0=5.0)
    base.update(kw)
    return TrainConfig(**base)


class TestRunTraining:
    def test_smoke_speed_and_outputs(self, small_run, tmp_path):
        t0 = time.perf_counter()
        r = trainer.run_training(small_cfg(), *small_run, out_dir=tmp_path / "out")
        assert time.perf_counter() - t0 < 10
        assert len(r.reports) == 3
        assert [x.epoch for x in r.reports] == [1, 2, 3]
        assert r.best_valid == min(x.valid_ppl for x in r.reports)
        assert math.isfinite(r.test_ppl)
        for name in ("reports.csv", "best.ckpt", "last.ckpt"):
            assert (tmp_path / "out" / name).is_file()
        assert r.reports[-1].lr == cosine_lr(5.0, 0.0, 2, 3)

    def test_reports_are_byte_identical(self, small_run, tmp_path):
        cfg = small_cfg(replacement_source="tprs", ss_schedule=ScheduleSpec("static", 0, 0.5),
                        nnrs_schedule=ScheduleSpec("static", 0, 0.2))
        trainer.run_training(cfg, *small_run, out_dir=tmp_path / "a")
        trainer.run_training(cfg, *small_run, out_dir=tmp_path / "b")
        a = (tmp_path / "a" / "reports.csv").read_bytes()
        assert a == (tmp_path / "b" / "reports.csv").read_bytes()
        assert a.splitlines()[0] == b",".join(f.encode() for f in trainer.REPORT_FIELDS)

    def test_tau_follows_validation(self, small_run):
        r = trainer.run_training(small_cfg(total_epochs=4), *small_run[:2])
        taus = [x.tau for x in r.reports]
        assert taus[0] == 0.1
        prev = math.inf
        for x, nxt in zip(r.reports, taus[1:]):
            assert nxt == neighbors.update_temperature(x.tau, x.valid_ppl, prev)
            prev = x.valid_ppl

    def test_tau_rises_while_validation_improves(self, tmp_path):
        train = write_lines(tmp_path / "tr.txt", ["a b c d"] * 300)
        valid = write_lines(tmp_path / "va.txt", ["a b c d"] * 60)
        r = trainer.run_training(small_cfg(total_epochs=5, lr0=1.0), train, valid)
        vs = [x.valid_ppl for x in r.reports]
        assert all(a > b for a, b in zip(vs, vs[1:]))
        taus = [x.tau for x in r.reports]
        assert all(a < b <= 1 for a, b in zip(taus, taus[1:]))

    def test_resume_matches_uninterrupted(self, small_run, tmp_path, monkeypatch):
        cfg = small_cfg(total_epochs=4, replacement_source="tprs",
                        ss_schedule=ScheduleSpec("linear", 0, 0.5),
                        nnrs_schedule=ScheduleSpec("linear", 0, 0.3))
        full = trainer.run_training(cfg, *small_run, out_dir=tmp_path / "full")

        real, calls = trainer.train_epoch, []

        def interrupted(*a, **kw):
            calls.append(1)
            if len(calls) == 3:
                raise KeyboardInterrupt
            return real(*a, **kw)

        monkeypatch.setattr(trainer, "train_epoch", interrupted)
        with pytest.raises(KeyboardInterrupt):
            trainer.run_training(cfg, *small_run, out_dir=tmp_path / "part")
        monkeypatch.setattr(trainer, "train_epoch", real)
        assert len(trainer.read_reports(tmp_path / "part" / "reports.csv")) == 2

        resumed = trainer.run_training(cfg, *small_run, out_dir=tmp_path / "part", resume=True)
        assert ((tmp_path / "part" / "reports.csv").read_bytes()
                == (tmp_path / "full" / "reports.csv").read_bytes())
        for x, y in zip(full.final_params.arrays(), resumed.final_params.arrays()):
            assert np.array_equal(x, y)
        assert resumed.best_valid == full.best_valid
        assert resumed.test_ppl == full.test_ppl

    def test_nnrs_requires_embeddings(self, small_run):
        cfg = small_cfg(replacement_source="nnrs", nnrs_schedule=ScheduleSpec("static", 0, 0.2))
        with pytest.raises(ValueError, match="embedding"):
            trainer.run_training(cfg, *small_run)

