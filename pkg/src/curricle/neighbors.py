"""Replacement candidates for the gold previous token.

Two sources fill the same table layout: cosine nearest neighbours in a
pretrained embedding space, and the most likely successors in the corpus
bigram matrix. Either way a word's candidates are sampled through a
temperature softmax truncated to its top k entries.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

MAGIC = "NNRS1"


class EmbeddingFormatError(ValueError):
    pass


def default_k(vocab_size):
    return max(1, int(round(math.log2(vocab_size))))


def cosine_similarity(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


@dataclass
class Embeddings:
    vectors: np.ndarray  # [|V|, d]
    covered: np.ndarray  # bool [|V|], rows read from the file

    @property
    def dim(self):
        return self.vectors.shape[1]

    @property
    def coverage(self):
        return float(self.covered.mean()) if len(self.covered) else 0.0


def load_embeddings(path, vocab, seed=0):
    """Read word vectors in the ``<token> <v1> ... <vd>`` text format.

    An optional ``<count> <dim>`` header line is skipped. Vocabulary words the
    file does not cover get small uniform random vectors in
    ``[-0.5/d, 0.5/d]`` drawn from ``seed``; tokens outside the vocabulary are
    ignored.
    """
    rows = {}
    dim = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            if len(parts) < 2:
                raise EmbeddingFormatError(f"{path}:{lineno}: expected a token and a vector")
            try:
                vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            except ValueError as e:
                raise EmbeddingFormatError(f"{path}:{lineno}: {e}") from None
            if not np.all(np.isfinite(vec)):
                raise EmbeddingFormatError(f"{path}:{lineno}: non-finite value")
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: dimension {len(vec)} differs from {dim}"
                )
            if parts[0] in vocab:
                rows[vocab.token_to_id[parts[0]]] = vec
    if dim is None:
        raise EmbeddingFormatError(f"{path}: no vectors found")
    rng = np.random.default_rng(seed)
    vectors = rng.uniform(-0.5 / dim, 0.5 / dim, size=(len(vocab), dim))
    covered = np.zeros(len(vocab), dtype=bool)
    for i, vec in rows.items():
        vectors[i] = vec
        covered[i] = True
    return Embeddings(vectors, covered)


@dataclass
class NeighborTable:
    """Per-word candidate ids and their scores, best first.

    Rows shorter than ``k`` are padded with id -1 and score 0; ``lengths``
    holds the real row sizes. Scores are cosine similarities for embedding
    tables and successor probabilities for transition tables.
    """

    neighbor_ids: np.ndarray  # int [|V|, k]
    scores: np.ndarray        # float [|V|, k]
    lengths: np.ndarray       # int [|V|]

    @property
    def k(self):
        return self.neighbor_ids.shape[1]

    @property
    def similarities(self):
        return self.scores

    @property
    def probs(self):
        return self.scores

    def __len__(self):
        return self.neighbor_ids.shape[0]

    def row(self, word_id):
        n = self.lengths[word_id]
        return self.neighbor_ids[word_id, :n], self.scores[word_id, :n]

    def __eq__(self, other):
        if not isinstance(other, NeighborTable):
            return NotImplemented
        return (
            np.array_equal(self.neighbor_ids, other.neighbor_ids)
            and np.array_equal(self.scores, other.scores)
            and np.array_equal(self.lengths, other.lengths)
        )


def build_neighbor_table(vectors, k=None, block=64):
    """Top-k cosine neighbours of every row, excluding the row itself.

    Ties are broken by the lower id. Every pair's dot product is reduced the
    same way (no BLAS kernel whose rounding depends on tile position), so
    identical rows tie exactly and ``block`` does not change the result.
    """
    vectors = np.asarray(getattr(vectors, "vectors", vectors), dtype=np.float64)
    n = vectors.shape[0]
    if k is None:
        k = default_k(n)
    if not 1 <= k < n:
        raise ValueError(f"k={k} must satisfy 1 <= k < |V|={n}")
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise ValueError(f"row {bad} is a zero vector; cosine similarity is undefined")
    unit = vectors / norms[:, None]
    ids = np.empty((n, k), dtype=np.int64)
    sims = np.empty((n, k), dtype=np.float64)
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        s = (unit[lo:hi, None, :] * unit[None, :, :]).sum(axis=-1)
        np.clip(s, -1.0, 1.0, out=s)
        s[np.arange(hi - lo), np.arange(lo, hi)] = -np.inf
        order = np.argsort(-s, axis=1, kind="stable")[:, :k]
        ids[lo:hi] = order
        sims[lo:hi] = np.take_along_axis(s, order, axis=1)
    return NeighborTable(ids, sims, np.full(n, k, dtype=np.int64))


def transition_matrix(stream, vocab_size=None):
    """Row-normalized bigram successor probabilities as a CSR matrix."""
    ids = np.asarray(getattr(stream, "ids", stream), dtype=np.int64)
    if vocab_size is None:
        vocab = getattr(stream, "vocab", None)
        vocab_size = len(vocab) if vocab is not None else int(ids.max()) + 1
    counts = sp.coo_matrix(
        (np.ones(max(len(ids) - 1, 0)), (ids[:-1], ids[1:])),
        shape=(vocab_size, vocab_size),
    ).tocsr()
    counts.sum_duplicates()
    totals = np.asarray(counts.sum(axis=1)).ravel()
    scale = np.divide(1.0, totals, out=np.zeros_like(totals), where=totals > 0)
    return sp.diags(scale) @ counts


def build_transition_table(stream, k=None, vocab_size=None):
    """Top-k successors of every word by bigram probability.

    Words that never precede another token get an empty row.
    """
    probs = transition_matrix(stream, vocab_size).tocsr()
    n = probs.shape[0]
    if k is None:
        k = default_k(n)
    if k < 1:
        raise ValueError("k must be >= 1")
    ids = np.full((n, k), -1, dtype=np.int64)
    scores = np.zeros((n, k), dtype=np.float64)
    lengths = np.zeros(n, dtype=np.int64)
    for w in range(n):
        lo, hi = probs.indptr[w], probs.indptr[w + 1]
        if lo == hi:
            continue
        cols = probs.indices[lo:hi]
        vals = probs.data[lo:hi]
        order = np.lexsort((cols, -vals))[:k]
        m = len(order)
        ids[w, :m] = cols[order]
        scores[w, :m] = vals[order]
        lengths[w] = m
    return NeighborTable(ids, scores, lengths)


def truncated_softmax(scores, tau):
    """``exp(s/tau)`` normalized over the given (already truncated) scores."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"temperature {tau} outside (0, 1]")
    z = np.asarray(scores, dtype=np.float64) / tau
    e = np.exp(z - z.max())
    return e / e.sum()


class NeighborSampler:
    """Vectorized draws from a table at a fixed temperature.

    The cumulative distributions are computed once, so a sampler should be
    rebuilt whenever the temperature changes (once per epoch in training).
    Words with an empty row map to themselves.
    """

    def __init__(self, table, tau):
        self.table = table
        self.tau = tau
        k = table.k
        valid = np.arange(k)[None, :] < table.lengths[:, None]
        z = np.where(valid, table.scores / tau, -np.inf)
        zmax = np.where(table.lengths > 0, z.max(axis=1, initial=-np.inf), 0.0)
        e = np.where(valid, np.exp(z - zmax[:, None]), 0.0)
        total = e.sum(axis=1, keepdims=True)
        cdf = np.cumsum(np.divide(e, total, out=np.zeros_like(e), where=total > 0), axis=1)
        last = np.maximum(table.lengths - 1, 0)
        cdf[np.arange(len(table)), last] = 1.0
        self.cdf = cdf
        self.empty = table.lengths == 0

    def sample(self, word_ids, u):
        """Map ``word_ids`` to replacements using uniforms ``u`` in [0, 1).

        Returns ``(replacement_ids, fallback_mask)``.
        """
        word_ids = np.asarray(word_ids, dtype=np.int64)
        cdf = self.cdf[word_ids]
        idx = (cdf <= np.asarray(u)[..., None]).sum(axis=-1)
        idx = np.minimum(idx, np.maximum(self.table.lengths[word_ids] - 1, 0))
        out = np.take_along_axis(self.table.neighbor_ids[word_ids], idx[..., None], axis=-1)[..., 0]
        fallback = self.empty[word_ids]
        return np.where(fallback, word_ids, out), fallback


def sample_neighbor(word_id, table, tau, rng):
    """Draw one replacement for ``word_id``; an empty row returns the word itself."""
    n = table.lengths[word_id]
    if n == 0:
        return int(word_id)
    p = truncated_softmax(table.scores[word_id, :n], tau)
    j = int(np.searchsorted(np.cumsum(p)[:-1], rng.random(), side="right"))
    return int(table.neighbor_ids[word_id, j])


def update_temperature(tau, p_curr, p_prev):
    """Per-epoch temperature step driven by validation perplexity.

    Lower perplexity than the previous epoch counts as an improvement and
    widens the neighbour distribution by ``tau - (2**tau - 1)``; anything
    else shrinks it to ``2**tau - 1``. Both maps fix 1 and keep tau in (0, 1].
    """
    ln2 = math.log(2.0)
    if p_curr < p_prev and tau < 1.0:
        # on (0, 1) the step is 2*tau - 2**tau + 1; in terms of the gap to 1 it
        # is gap -> 2*(gap + expm1(-gap*ln2)), which shrinks by ~0.61 a step
        # but only reaches 0 in the limit, so snap once it is below one ulp
        gap = 1.0 - tau
        gap = 2.0 * (gap + math.expm1(-gap * ln2))
        new = 1.0 if gap < np.finfo(float).epsneg else 1.0 - gap
    else:
        new = math.expm1(tau * ln2)
    return min(max(new, np.finfo(float).tiny), 1.0)


def save_table(table, path):
    """Text cache: magic line, then ``<id> <n> (<neighbor> <score>)*n`` per word."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(MAGIC + "\n")
        for w in range(len(table)):
            ids, scores = table.row(w)
            fields = [str(w), str(len(ids))]
            for j, s in zip(ids.tolist(), scores.tolist()):
                fields += [str(j), repr(s)]
            f.write(" ".join(fields) + "\n")


def load_table(path):
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise ValueError(f"{path}: not a {MAGIC} neighbour table")
    rows = []
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split()
        if not parts:
            continue
        w, n = int(parts[0]), int(parts[1])
        if len(parts) != 2 + 2 * n or w != len(rows):
            raise ValueError(f"{path}:{lineno}: malformed row")
        rows.append(([int(x) for x in parts[2::2]], [float(x) for x in parts[3::2]]))
    k = max((len(r[0]) for r in rows), default=0)
    ids = np.full((len(rows), k), -1, dtype=np.int64)
    scores = np.zeros((len(rows), k), dtype=np.float64)
    lengths = np.zeros(len(rows), dtype=np.int64)
    for w, (r_ids, r_scores) in enumerate(rows):
        ids[w, : len(r_ids)] = r_ids
        scores[w, : len(r_ids)] = r_scores
        lengths[w] = len(r_ids)
    return NeighborTable(ids, scores, lengths)
