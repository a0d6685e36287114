"""Training loop with scheduled prediction feedback and neighbour replacement.

At every step the gold previous token may be swapped for the model's own
previous prediction (rate epsilon), for a sampled neighbour of the gold token
(rate gamma), or, when both fire, for one of the two picked by a fair coin.
Losses are always taken against the true targets.
"""

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corpus, neighbors, schedules, seqmodel
from .schedules import RatePair, ScheduleSpec

log = logging.getLogger(__name__)

SOURCES = ("none", "nnrs", "tprs")
FEEDBACK = ("greedy", "sample")

# selection codes; the mixed branch records which of its two options was fed
TEACHER, PREDICTION, NEIGHBOR, MIXED_PREDICTION, MIXED_NEIGHBOR = range(5)
TAGS = {
    TEACHER: "teacher",
    PREDICTION: "prediction",
    NEIGHBOR: "neighbor",
    MIXED_PREDICTION: "mixed",
    MIXED_NEIGHBOR: "mixed",
}

REPORT_FIELDS = [
    "epoch", "train_ppl", "valid_ppl", "lr", "epsilon", "gamma", "tau",
    "frac_teacher", "frac_pred", "frac_neigh", "frac_mixed",
]


@dataclass
class TrainConfig:
    lr0: float = 20.0
    lr_min: float = 0.0
    total_epochs: int = 40
    batch_size: int = 30
    eval_batch_size: int = 10
    bptt_len: int = 35
    clip: float = 0.5
    ss_schedule: ScheduleSpec = None
    nnrs_schedule: ScheduleSpec = None
    replacement_source: str = "none"
    seed: int = 0
    d_emb: int = 200
    hidden: int = 200
    n_layers: int = 2
    tied: bool = True
    k: int = None
    tau0: float = 0.1
    min_count: int = 1
    feedback: str = "greedy"  # how a fed-back prediction is read off the logits

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        # schedules always span the configured number of epochs
        for name in ("ss_schedule", "nnrs_schedule"):
            spec = getattr(self, name) or ScheduleSpec("static", 0.0, 0.0)
            if spec.total_epochs != self.total_epochs:
                spec = dataclasses.replace(spec, total_epochs=self.total_epochs)
            setattr(self, name, spec)
        if not self.lr0 > self.lr_min >= 0:
            raise ValueError("need lr0 > lr_min >= 0")
        for name in ("batch_size", "eval_batch_size", "bptt_len", "d_emb", "hidden",
                     "n_layers", "min_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.replacement_source not in SOURCES:
            raise ValueError(f"replacement_source must be one of {SOURCES}")
        if self.replacement_source == "none" and self.nnrs_schedule.end > 0:
            raise ValueError("a nonzero neighbour rate needs replacement_source nnrs or tprs")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 < self.tau0 <= 1:
            raise ValueError("tau0 must lie in (0, 1]")
        if self.feedback not in FEEDBACK:
            raise ValueError(f"feedback must be one of {FEEDBACK}")


@dataclass
class TrainState:
    epoch: int = 0
    tau: float = 0.1
    lr: float = 20.0
    valid_ppl_history: list = field(default_factory=list)
    rng: np.random.Generator = None
    # selection-code histogram of the last epoch, indexed by TEACHER..MIXED_NEIGHBOR
    replacement_stats: np.ndarray = field(default_factory=lambda: np.zeros(5, dtype=np.int64))


@dataclass
class EpochReport:
    epoch: int
    train_ppl: float
    valid_ppl: float
    lr: float
    epsilon: float
    gamma: float
    tau: float
    frac_teacher: float
    frac_pred: float
    frac_neigh: float
    frac_mixed: float

    def row(self):
        return [repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
                for v in dataclasses.astuple(self)]


def cosine_lr(lr0, lr_min, epoch, total_epochs):
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))


def select_input(y_prev, yhat_prev, eps, gam, rng, table=None, tau=None):
    """Pick the input for one step. Returns ``(token_id, tag)``.

    Draws pi1 then pi2; a neighbour is only sampled when that branch is taken.
    """
    pi1, pi2 = rng.random(), rng.random()
    if eps > pi1 and gam > pi2:
        if rng.random() < 0.5:
            return yhat_prev, "mixed"
        return neighbors.sample_neighbor(y_prev, table, tau, rng), "mixed"
    if eps > pi1:
        return yhat_prev, "prediction"
    if gam > pi2:
        return neighbors.sample_neighbor(y_prev, table, tau, rng), "neighbor"
    return y_prev, "teacher"


def select_inputs(y_prev, yhat_prev, eps, gam, rng, sampler=None):
    """Vectorized selection for a batch column. Returns ``(ids, codes)``.

    Consumes exactly four uniform vectors per call, in the order pi1, pi2,
    coin, neighbour draw, so the random stream does not depend on outcomes.
    """
    B = len(y_prev)
    pi1 = rng.random(B)
    pi2 = rng.random(B)
    coin = rng.random(B)
    u = rng.random(B)
    if yhat_prev is None:
        yhat_prev = y_prev
    use_pred = eps > pi1
    use_neigh = gam > pi2
    both = use_pred & use_neigh
    codes = np.full(B, TEACHER, dtype=np.int64)
    codes[use_neigh] = NEIGHBOR
    codes[use_pred] = PREDICTION
    codes[both & (coin < 0.5)] = MIXED_PREDICTION
    codes[both & (coin >= 0.5)] = MIXED_NEIGHBOR
    out = np.array(y_prev, dtype=np.int64)
    pred = (codes == PREDICTION) | (codes == MIXED_PREDICTION)
    out[pred] = np.asarray(yhat_prev)[pred]
    neigh = (codes == NEIGHBOR) | (codes == MIXED_NEIGHBOR)
    if neigh.any():
        if sampler is None:
            raise ValueError("neighbour replacement requested without a neighbour table")
        repl, _ = sampler.sample(y_prev, u)
        out[neigh] = repl[neigh]
    return out, codes


def predicted_ids(logits, mode, rng):
    """Token ids read off ``[B, V]`` logits: argmax, or one draw per row."""
    if mode == "greedy":
        return logits.argmax(axis=1)
    p = seqmodel.softmax(logits)
    u = rng.random(len(p))
    idx = (np.cumsum(p, axis=1) <= u[:, None]).sum(axis=1)
    return np.minimum(idx, logits.shape[1] - 1)


def sgd_step(params, grads, lr):
    for p, g in zip(params.arrays(), grads.arrays()):
        p -= lr * g


def train_epoch(params, batches, state, cfg, rates=RatePair(0.0, 0.0), sampler=None):
    """One pass over ``batches``; updates ``params`` in place.

    Returns ``(params, train_ppl)`` and leaves the per-code selection counts in
    ``state.replacement_stats``.
    """
    h = seqmodel.zero_state(params, batches.batch_size)
    feedback = rates.epsilon > 0 or rates.gamma > 0
    counts = np.zeros(5, dtype=np.int64)
    yhat_carry = None
    total_nll, total_tokens = 0.0, 0
    for bi, (x, y) in enumerate(batches.windows()):
        if feedback:
            def select(t, prev_logits):
                nonlocal counts
                if t == 0:
                    prev = yhat_carry
                else:
                    prev = predicted_ids(prev_logits, cfg.feedback, state.rng)
                ids, codes = select_inputs(
                    x[:, t], prev, rates.epsilon, rates.gamma, state.rng, sampler
                )
                counts += np.bincount(codes, minlength=5)
                return ids
            logits, h, cache = seqmodel.forward(params, x, h, select)
            yhat_carry = predicted_ids(logits[:, -1], cfg.feedback, state.rng)
        else:
            logits, h, cache = seqmodel.forward(params, x, h)
            counts[TEACHER] += x.size
        loss, dlogits = seqmodel.nll(logits, y)
        if not math.isfinite(loss):
            raise FloatingPointError(
                f"non-finite loss at epoch {state.epoch + 1}, batch {bi}, lr {state.lr}"
            )
        grads = seqmodel.clip_gradients(seqmodel.backward(params, cache, dlogits), cfg.clip)
        sgd_step(params, grads, state.lr)
        total_nll += loss * x.size
        total_tokens += x.size
    state.replacement_stats = counts
    return params, seqmodel.perplexity(total_nll / total_tokens)


def fractions(counts):
    """``(teacher, prediction, neighbour, mixed)`` shares of a code histogram."""
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    if n == 0:
        return 0.0, 0.0, 0.0, 0.0
    return (
        counts[TEACHER] / n,
        counts[PREDICTION] / n,
        counts[NEIGHBOR] / n,
        (counts[MIXED_PREDICTION] + counts[MIXED_NEIGHBOR]) / n,
    )


def evaluate(params, batches):
    """Teacher-forced perplexity with state carried across windows."""
    h = seqmodel.zero_state(params, batches.batch_size)
    total, n = 0.0, 0
    for x, y in batches.windows():
        loss, h = seqmodel.mean_nll(params, x, y, h)
        total += loss * x.size
        n += x.size
    return seqmodel.perplexity(total / n)


@dataclass
class TrainResult:
    params: seqmodel.ModelParams        # best-validation parameters
    final_params: seqmodel.ModelParams
    reports: list
    vocab: corpus.Vocabulary
    best_valid: float
    test_ppl: float = None


def build_table(cfg, train_stream, embedding_path=None):
    """Replacement table for ``cfg.replacement_source`` (``None`` for "none")."""
    V = len(train_stream.vocab)
    k = cfg.k if cfg.k is not None else neighbors.default_k(V)
    if cfg.replacement_source == "nnrs":
        if embedding_path is None:
            raise ValueError("replacement_source nnrs needs an embedding file")
        emb = neighbors.load_embeddings(embedding_path, train_stream.vocab, seed=cfg.seed)
        log.info("embedding coverage %.3f of %d words", emb.coverage, V)
        return neighbors.build_neighbor_table(emb, k)
    if cfg.replacement_source == "tprs":
        return neighbors.build_transition_table(train_stream, k)
    return None


def _state_dict(state, cfg, vocab):
    return {
        "epoch": state.epoch,
        "tau": state.tau,
        "lr": state.lr,
        "seed": cfg.seed,
        "eval_batch_size": cfg.eval_batch_size,
        "bptt_len": cfg.bptt_len,
        "valid_ppl_history": state.valid_ppl_history,
        "rng_state": state.rng.bit_generator.state,
        "vocab": vocab.id_to_token,
    }


def write_reports(path, reports):
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for r in reports:
            w.writerow(r.row())


def read_reports(path):
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    return [
        EpochReport(int(r["epoch"]), *(float(r[k]) for k in REPORT_FIELDS[1:]))
        for r in rows
    ]


def run_training(cfg, train_path, valid_path, test_path=None, embedding_path=None,
                 out_dir=None, resume=False):
    """Full protocol: schedules, feedback training, validation, annealing.

    Each epoch ``i`` (0-based) trains at rates ``rate(spec, i)`` and learning
    rate ``cosine_lr(lr0, lr_min, i, total)``, then validates and adapts the
    neighbour temperature. With ``out_dir`` the run writes ``reports.csv``,
    ``best.ckpt`` (lowest validation perplexity) and ``last.ckpt``; ``resume``
    continues from ``last.ckpt``.
    """
    train = corpus.load_corpus(train_path, min_count=cfg.min_count)
    vocab = train.vocab
    valid = corpus.load_corpus(valid_path, vocab)
    train_b = corpus.batchify(train, cfg.batch_size, cfg.bptt_len)
    valid_b = corpus.batchify(valid, cfg.eval_batch_size, cfg.bptt_len)
    test_b = None
    if test_path is not None:
        test_b = corpus.batchify(corpus.load_corpus(test_path, vocab), cfg.eval_batch_size,
                                 cfg.bptt_len)
    table = build_table(cfg, train, embedding_path)

    init_seq, sample_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    params = seqmodel.init_params(len(vocab), cfg.d_emb, cfg.hidden,
                                  np.random.default_rng(init_seq), cfg.n_layers, cfg.tied)
    state = TrainState(tau=cfg.tau0, lr=cfg.lr0, rng=np.random.default_rng(sample_seq))
    reports = []
    best_params, best_valid = params.copy(), math.inf

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and (out / "last.ckpt").exists():
            params, saved = seqmodel.load_checkpoint(out / "last.ckpt")
            state.epoch = saved["epoch"]
            state.tau = saved["tau"]
            state.lr = saved["lr"]
            state.valid_ppl_history = list(saved["valid_ppl_history"])
            state.rng.bit_generator.state = saved["rng_state"]
            reports = read_reports(out / "reports.csv")[: state.epoch]
            best_params, saved_best = seqmodel.load_checkpoint(out / "best.ckpt")
            best_valid = min(saved_best["valid_ppl_history"])
            log.info("resuming after epoch %d", state.epoch)

    for i in range(state.epoch, cfg.total_epochs):
        rates = schedules.rate_pair(cfg.ss_schedule, cfg.nnrs_schedule, i)
        state.lr = cosine_lr(cfg.lr0, cfg.lr_min, i, cfg.total_epochs)
        sampler = neighbors.NeighborSampler(table, state.tau) if table is not None else None
        tau_used = state.tau
        params, train_ppl = train_epoch(params, train_b, state, cfg, rates, sampler)
        valid_ppl = evaluate(params, valid_b)
        prev = state.valid_ppl_history[-1] if state.valid_ppl_history else math.inf
        state.tau = neighbors.update_temperature(state.tau, valid_ppl, prev)
        state.valid_ppl_history.append(valid_ppl)
        state.epoch = i + 1
        fr = fractions(state.replacement_stats)
        reports.append(EpochReport(i + 1, train_ppl, valid_ppl, state.lr, rates.epsilon,
                                   rates.gamma, tau_used, *fr))
        log.info("epoch %d train %.2f valid %.2f lr %.3f eps %.3f gam %.3f tau %.3f",
                 i + 1, train_ppl, valid_ppl, state.lr, rates.epsilon, rates.gamma, tau_used)
        if valid_ppl < best_valid:
            best_valid, best_params = valid_ppl, params.copy()
            if out is not None:
                seqmodel.save_checkpoint(out / "best.ckpt", best_params,
                                         _state_dict(state, cfg, vocab))
        if out is not None:
            write_reports(out / "reports.csv", reports)
            seqmodel.save_checkpoint(out / "last.ckpt", params, _state_dict(state, cfg, vocab))

    test_ppl = evaluate(best_params, test_b) if test_b is not None else None
    return TrainResult(best_params, params, reports, vocab, best_valid, test_ppl)
