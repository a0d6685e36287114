"""Synthetic word-level corpora and co-occurrence word vectors for desk runs.

The generator is a class-based Markov chain: each sentence walks a sparse
chain over word classes and emits a Zipf-distributed member of each class.
Members of one class are interchangeable in context, so they make natural
replacement neighbours.
"""

from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg  # noqa: F401  (registers sp.linalg)


def make_corpus(n_tokens, n_classes=25, words_per_class=40, fanout=4, mean_len=18,
                seed=0):
    """List of sentences (lists of word strings) totalling about ``n_tokens`` words."""
    rng = np.random.default_rng(seed)
    succ = np.zeros((n_classes, n_classes))
    for c in range(n_classes):
        nxt = rng.choice(n_classes, size=fanout, replace=False)
        succ[c, nxt] = rng.dirichlet(np.ones(fanout))
    ranks = np.arange(1, words_per_class + 1)
    member_p = (1.0 / ranks) / (1.0 / ranks).sum()
    sentences, total = [], 0
    while total < n_tokens:
        length = max(3, int(rng.geometric(1.0 / mean_len)))
        c = int(rng.integers(n_classes))
        words = []
        for _ in range(length):
            w = int(rng.choice(words_per_class, p=member_p))
            words.append(f"c{c}w{w}")
            c = int(rng.choice(n_classes, p=succ[c]))
        sentences.append(words)
        total += len(words) + 1
    return sentences


def write_corpus(sentences, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in sentences:
            f.write(" ".join(s) + "\n")


def write_splits(out_dir, n_train=200_000, n_valid=20_000, n_test=20_000, seed=0, **kw):
    """Write train/valid/test files drawn from one generator; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sents = make_corpus(n_train + n_valid + n_test, seed=seed, **kw)
    paths, pos = {}, 0
    for name, n in (("train", n_train), ("valid", n_valid), ("test", n_test)):
        chunk, total = [], 0
        while pos < len(sents) and total < n:
            chunk.append(sents[pos])
            total += len(sents[pos]) + 1
            pos += 1
        paths[name] = out_dir / f"{name}.txt"
        write_corpus(chunk, paths[name])
    return paths


def cooccurrence_vectors(sentences, dim=32, window=2, min_count=1):
    """PPMI + truncated SVD word vectors; returns ``(words, matrix)``."""
    counts = {}
    for s in sentences:
        for w in s:
            counts[w] = counts.get(w, 0) + 1
    words = sorted((w for w, n in counts.items() if n >= min_count),
                   key=lambda w: (-counts[w], w))
    index = {w: i for i, w in enumerate(words)}
    rows, cols = [], []
    for s in sentences:
        ids = [index.get(w, -1) for w in s]
        for i, a in enumerate(ids):
            if a < 0:
                continue
            for j in range(max(0, i - window), min(len(ids), i + window + 1)):
                if j != i and ids[j] >= 0:
                    rows.append(a)
                    cols.append(ids[j])
    n = len(words)
    m = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    m.sum_duplicates()
    total = m.sum()
    row = np.asarray(m.sum(axis=1)).ravel()
    col = np.asarray(m.sum(axis=0)).ravel()
    m = m.tocoo()
    pmi = np.log(m.data * total / (row[m.row] * col[m.col]))
    keep = pmi > 0
    ppmi = sp.csr_matrix((pmi[keep], (m.row[keep], m.col[keep])), shape=(n, n))
    k = min(dim, n - 1)
    u, s, _ = sp.linalg.svds(ppmi, k=k, random_state=0)
    order = np.argsort(-s)
    vecs = u[:, order] * np.sqrt(s[order])
    return words, vecs


def write_vectors(words, vecs, path, header=True):
    """Word-vector text file, optionally led by a ``<count> <dim>`` line."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        if header:
            f.write(f"{len(words)} {vecs.shape[1]}\n")
        for w, v in zip(words, vecs):
            f.write(w + " " + " ".join(f"{x:.8g}" for x in v) + "\n")
