"""Word-level corpora: vocabularies, token streams and BPTT batches."""

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EOS = "<eos>"
UNK = "<unk>"


@dataclass
class Vocabulary:
    """Token <-> id maps.

    Vocabularies built from a corpus always hold ``<eos>`` and ``<unk>``; a
    loaded list (e.g. one that only indexes an embedding file) need not, and
    then cannot encode out-of-vocabulary tokens.
    """

    id_to_token: list
    token_to_id: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.token_to_id:
            self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def eos_id(self):
        return self.token_to_id.get(EOS)

    @property
    def unk_id(self):
        return self.token_to_id.get(UNK)

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def encode(self, tokens):
        unk = self.unk_id
        ids = [self.token_to_id.get(t, unk) for t in tokens]
        if unk is None and None in ids:
            bad = next(t for t, i in zip(tokens, ids) if i is None)
            raise ValueError(f"token {bad!r} not in vocabulary and no {UNK} entry")
        return ids

    def decode(self, ids):
        return [self.id_to_token[i] for i in ids]

    def save(self, path):
        """Write one token per line; the line number is the id."""
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for tok in self.id_to_token:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f]
        if tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens)


def read_tokens(path):
    """Raw tokens of a corpus file, with an eos marker closing every line."""
    tokens = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            tokens.extend(line.split())
            tokens.append(EOS)
    return tokens


def build_vocab(tokens, min_count=1):
    """Frequency-ordered vocabulary.

    Ids go by descending count, ties by first occurrence. Tokens seen fewer
    than ``min_count`` times are left out and will encode as ``<unk>``.
    ``<eos>`` and ``<unk>`` are always present; if the corpus contains them
    they keep their frequency rank, otherwise they are appended.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(tokens)
    first_seen = {}
    for i, tok in enumerate(tokens):
        first_seen.setdefault(tok, i)
    kept = [t for t in counts if counts[t] >= min_count or t in (EOS, UNK)]
    kept.sort(key=lambda t: (-counts[t], first_seen[t]))
    for special in (EOS, UNK):
        if special not in kept:
            kept.append(special)
    return Vocabulary(kept)


@dataclass
class TokenStream:
    ids: np.ndarray
    vocab: Vocabulary

    def __len__(self):
        return len(self.ids)

    def tokens(self):
        return self.vocab.decode(self.ids.tolist())


def load_corpus(path, vocab=None, min_count=1):
    """Read a corpus file into token ids.

    Without ``vocab`` a vocabulary is built from the file itself.
    """
    tokens = read_tokens(Path(path))
    if vocab is None:
        vocab = build_vocab(tokens, min_count)
    return TokenStream(np.asarray(vocab.encode(tokens), dtype=np.int64), vocab)


@dataclass
class BatchSet:
    inputs: np.ndarray   # [batch_size, steps]
    targets: np.ndarray  # [batch_size, steps]
    bptt_len: int

    @property
    def batch_size(self):
        return self.inputs.shape[0]

    @property
    def n_tokens(self):
        return self.inputs.size

    def windows(self):
        """Yield consecutive ``(inputs, targets)`` column windows of at most bptt_len steps."""
        steps = self.inputs.shape[1]
        for start in range(0, steps, self.bptt_len):
            stop = min(start + self.bptt_len, steps)
            yield self.inputs[:, start:stop], self.targets[:, start:stop]

    def __len__(self):
        return -(-self.inputs.shape[1] // self.bptt_len)


def batchify(stream, batch_size, bptt_len):
    """Cut a stream into ``batch_size`` contiguous stripes.

    Stripe ``b`` covers tokens ``[b*n, (b+1)*n)`` with ``n = len // batch_size``;
    the tail that does not fill a stripe is dropped. The last token of each
    stripe only ever appears as a target.
    """
    if batch_size < 1 or bptt_len < 1:
        raise ValueError("batch_size and bptt_len must be >= 1")
    stream = np.asarray(getattr(stream, "ids", stream), dtype=np.int64)
    n = len(stream) // batch_size
    if n < 2:
        raise ValueError(
            f"stream of {len(stream)} tokens is too short for batch_size={batch_size}"
        )
    stripes = stream[: n * batch_size].reshape(batch_size, n)
    return BatchSet(
        inputs=np.ascontiguousarray(stripes[:, :-1]),
        targets=np.ascontiguousarray(stripes[:, 1:]),
        bptt_len=bptt_len,
    )
