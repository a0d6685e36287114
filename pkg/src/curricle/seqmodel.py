"""A stacked LSTM language model with explicit forward and backward passes.

Gate blocks are laid out (input, forget, cell, output) along the first axis
of every weight matrix. With tied weights the output projection reuses the
embedding matrix, so the embedding gradient collects both the input lookup
and the softmax contributions.
"""

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class ModelParams:
    embedding: np.ndarray                 # [V, d]
    W: list                               # per layer [4h, in]
    U: list                               # per layer [4h, h]
    b: list                               # per layer [4h]
    b_out: np.ndarray                     # [V]
    decoder: np.ndarray = None            # [V, h], only when untied

    @property
    def tied(self):
        return self.decoder is None

    @property
    def vocab_size(self):
        return self.embedding.shape[0]

    @property
    def d_emb(self):
        return self.embedding.shape[1]

    @property
    def hidden(self):
        return self.U[0].shape[1]

    @property
    def n_layers(self):
        return len(self.W)

    @property
    def output_weights(self):
        return self.embedding if self.tied else self.decoder

    def named(self):
        """``(name, array)`` pairs in declaration order; arrays are live views."""
        out = [("embedding", self.embedding)]
        for i in range(self.n_layers):
            out += [(f"W{i}", self.W[i]), (f"U{i}", self.U[i]), (f"b{i}", self.b[i])]
        if not self.tied:
            out.append(("decoder", self.decoder))
        out.append(("b_out", self.b_out))
        return out

    def arrays(self):
        return [a for _, a in self.named()]

    def n_params(self):
        return sum(a.size for a in self.arrays())

    def map(self, fn):
        return ModelParams(
            embedding=fn(self.embedding),
            W=[fn(w) for w in self.W],
            U=[fn(u) for u in self.U],
            b=[fn(x) for x in self.b],
            b_out=fn(self.b_out),
            decoder=None if self.tied else fn(self.decoder),
        )

    def copy(self):
        return self.map(np.copy)

    def zeros_like(self):
        return self.map(np.zeros_like)


def init_params(vocab_size, d_emb, hidden, rng, n_layers=2, tied=True, scale=0.1):
    """Weights uniform in ``[-scale, scale]``, biases zero."""
    if min(vocab_size, d_emb, hidden, n_layers) < 1:
        raise ValueError("all sizes must be >= 1")
    if tied and d_emb != hidden:
        raise ValueError("tied weights need d_emb == hidden")

    def u(*shape):
        return rng.uniform(-scale, scale, size=shape)

    embedding = u(vocab_size, d_emb)
    W, U, b = [], [], []
    for layer in range(n_layers):
        n_in = d_emb if layer == 0 else hidden
        W.append(u(4 * hidden, n_in))
        U.append(u(4 * hidden, hidden))
        b.append(np.zeros(4 * hidden))
    decoder = None if tied else u(vocab_size, hidden)
    return ModelParams(embedding, W, U, b, np.zeros(vocab_size), decoder)


@dataclass
class HiddenState:
    h: list  # per layer [batch, hidden]
    c: list

    def copy(self):
        return HiddenState([x.copy() for x in self.h], [x.copy() for x in self.c])


def zero_state(params, batch_size):
    z = lambda: np.zeros((batch_size, params.hidden))
    return HiddenState([z() for _ in range(params.n_layers)], [z() for _ in range(params.n_layers)])


@dataclass
class StepCache:
    ids: np.ndarray                                  # ids actually fed, [B, T]
    layer_in: list = field(default_factory=list)     # per layer [B, T, in]
    acts: list = field(default_factory=list)         # per layer gate values [B, T, 4h]
    c: list = field(default_factory=list)            # per layer [B, T, h]
    tanh_c: list = field(default_factory=list)
    h: list = field(default_factory=list)
    h0: list = field(default_factory=list)
    c0: list = field(default_factory=list)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _gates(pre, hidden):
    a = np.empty_like(pre)
    a[:, : 2 * hidden] = _sigmoid(pre[:, : 2 * hidden])
    a[:, 2 * hidden : 3 * hidden] = np.tanh(pre[:, 2 * hidden : 3 * hidden])
    a[:, 3 * hidden :] = _sigmoid(pre[:, 3 * hidden :])
    return a


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def forward(params, input_ids, h0=None, select=None):
    """Run the model over a ``[batch, steps]`` window.

    ``select(t, prev_logits)`` may override the input of step ``t``; it gets
    the ``[B, V]`` logits of step ``t-1`` (``None`` at ``t == 0``) and returns
    the ids to feed. With a selector the window is unrolled one step at a time,
    otherwise whole-window matrix products are used.

    Returns ``(logits [B, T, V], final HiddenState, StepCache)``.
    """
    input_ids = np.asarray(input_ids, dtype=np.int64)
    B, T = input_ids.shape
    V, H = params.vocab_size, params.hidden
    if input_ids.size and (input_ids.min() < 0 or input_ids.max() >= V):
        raise IndexError(f"token id out of range [0, {V})")
    if h0 is None:
        h0 = zero_state(params, B)
    L = params.n_layers
    out_w = params.output_weights

    cache = StepCache(ids=input_ids.copy() if select is not None else input_ids)
    for layer in range(L):
        n_in = params.W[layer].shape[1]
        cache.layer_in.append(np.empty((B, T, n_in)))
        cache.acts.append(np.empty((B, T, 4 * H)))
        cache.c.append(np.empty((B, T, H)))
        cache.tanh_c.append(np.empty((B, T, H)))
        cache.h.append(np.empty((B, T, H)))
        cache.h0.append(h0.h[layer])
        cache.c0.append(h0.c[layer])

    h = list(h0.h)
    c = list(h0.c)

    def cell(layer, t, x):
        cache.layer_in[layer][:, t] = x
        pre = x @ params.W[layer].T + h[layer] @ params.U[layer].T + params.b[layer]
        a = _gates(pre, H)
        c_new = a[:, H : 2 * H] * c[layer] + a[:, :H] * a[:, 2 * H : 3 * H]
        tc = np.tanh(c_new)
        h_new = a[:, 3 * H :] * tc
        cache.acts[layer][:, t] = a
        cache.c[layer][:, t] = c_new
        cache.tanh_c[layer][:, t] = tc
        cache.h[layer][:, t] = h_new
        h[layer], c[layer] = h_new, c_new
        return h_new

    if select is None:
        x_seq = params.embedding[input_ids]
        for layer in range(L):
            cache.layer_in[layer][:] = x_seq
            xw = x_seq @ params.W[layer].T + params.b[layer]
            U_T = params.U[layer].T
            for t in range(T):
                a = _gates(xw[:, t] + h[layer] @ U_T, H)
                c_new = a[:, H : 2 * H] * c[layer] + a[:, :H] * a[:, 2 * H : 3 * H]
                tc = np.tanh(c_new)
                h_new = a[:, 3 * H :] * tc
                cache.acts[layer][:, t] = a
                cache.c[layer][:, t] = c_new
                cache.tanh_c[layer][:, t] = tc
                cache.h[layer][:, t] = h_new
                h[layer], c[layer] = h_new, c_new
            x_seq = cache.h[layer]
        logits = cache.h[-1] @ out_w.T + params.b_out
    else:
        logits = np.empty((B, T, V))
        prev = None
        for t in range(T):
            ids_t = np.asarray(select(t, prev), dtype=np.int64)
            cache.ids[:, t] = ids_t
            x = params.embedding[ids_t]
            for layer in range(L):
                x = cell(layer, t, x)
            logits[:, t] = x @ out_w.T + params.b_out
            prev = logits[:, t]

    return logits, HiddenState(h, c), cache


def backward(params, cache, dlogits):
    """Gradients of a scalar loss given its gradient w.r.t. the logits."""
    grads = params.zeros_like()
    B, T, V = dlogits.shape
    H = params.hidden
    N = B * T
    dl2 = dlogits.reshape(N, V)
    top = cache.h[-1].reshape(N, H)
    grads.b_out[:] = dl2.sum(axis=0)
    out_w = params.output_weights
    d_out_w = dl2.T @ top
    if params.tied:
        grads.embedding += d_out_w
    else:
        grads.decoder[:] = d_out_w
    dh_seq = (dl2 @ out_w).reshape(B, T, H)

    for layer in reversed(range(params.n_layers)):
        acts = cache.acts[layer]
        c_seq = cache.c[layer]
        tc_seq = cache.tanh_c[layer]
        U = params.U[layer]
        dgates = np.empty((B, T, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in reversed(range(T)):
            a = acts[:, t]
            i, f, g, o = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
            tc = tc_seq[:, t]
            c_prev = c_seq[:, t - 1] if t > 0 else cache.c0[layer]
            dh = dh_seq[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dg = dgates[:, t]
            dg[:, :H] = dc * g * i * (1.0 - i)
            dg[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
            dg[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
            dg[:, 3 * H :] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dg @ U
        h_prev = np.concatenate([cache.h0[layer][:, None, :], cache.h[layer][:, :-1]], axis=1)
        dg2 = dgates.reshape(N, 4 * H)
        x2 = cache.layer_in[layer].reshape(N, -1)
        grads.W[layer][:] = dg2.T @ x2
        grads.U[layer][:] = dg2.T @ h_prev.reshape(N, H)
        grads.b[layer][:] = dg2.sum(axis=0)
        dh_seq = (dg2 @ params.W[layer]).reshape(B, T, -1)

    np.add.at(grads.embedding, cache.ids.reshape(-1), dh_seq.reshape(N, -1))
    return grads


def nll(logits, target_ids):
    """Mean negative log-likelihood of ``target_ids`` and its logit gradient."""
    target_ids = np.asarray(target_ids, dtype=np.int64)[..., None]
    B, T, V = logits.shape
    d = logits - logits.max(axis=-1, keepdims=True)
    picked = np.take_along_axis(d, target_ids, axis=-1)
    np.exp(d, out=d)
    s = d.sum(axis=-1, keepdims=True)
    loss = float(np.mean(np.log(s) - picked))
    d /= s
    np.put_along_axis(d, target_ids, np.take_along_axis(d, target_ids, axis=-1) - 1.0, axis=-1)
    d /= B * T
    return loss, d


def loss_and_grads(params, input_ids, target_ids, h0=None, select=None):
    """Mean token NLL over the window, exact gradients, and the carried state.

    The loss is always taken against ``target_ids``, whatever ``select`` feeds
    in as inputs.
    """
    logits, hT, cache = forward(params, input_ids, h0, select)
    loss, dlogits = nll(logits, target_ids)
    return loss, backward(params, cache, dlogits), hT


def mean_nll(params, input_ids, target_ids, h0=None):
    logits, hT, _ = forward(params, input_ids, h0)
    target_ids = np.asarray(target_ids, dtype=np.int64)
    lp = log_softmax(logits)
    return float(-np.take_along_axis(lp, target_ids[..., None], axis=-1).mean()), hT


def global_norm(grads):
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.arrays()))


def clip_gradients(grads, threshold=0.5):
    """Rescale all gradients together when their global L2 norm exceeds ``threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    norm = global_norm(grads)
    if norm > threshold:
        scale = threshold / norm
        return grads.map(lambda g: g * scale)
    return grads


def perplexity(mean_nll):
    return math.exp(mean_nll)


@dataclass
class GenerationConfig:
    max_len: int = 50
    alpha: float = 1.0
    mode: str = "greedy"
    eos_id: int = None

    def __post_init__(self):
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.mode not in ("greedy", "sample"):
            raise ValueError(f"unknown generation mode {self.mode!r}")


def length_normalized_score(logprobs, alpha):
    """Sum of token log-probabilities divided by ``T**alpha``."""
    T = len(logprobs)
    if T == 0:
        return 0.0
    return float(np.sum(logprobs)) / T**alpha


def generate(params, prefix_ids, cfg, rng=None):
    """Continue ``prefix_ids`` from the model's own outputs.

    Stops after emitting ``cfg.eos_id`` or ``cfg.max_len`` tokens. Returns the
    emitted ids and their length-normalized log-probability.
    """
    prefix = np.asarray(prefix_ids, dtype=np.int64)
    if prefix.size == 0:
        raise ValueError("prefix must be nonempty")
    if cfg.mode == "sample" and rng is None:
        raise ValueError("sampling mode needs a random generator")
    logits, state, _ = forward(params, prefix[None, :])
    last = logits[0, -1]
    out, logps = [], []
    for _ in range(cfg.max_len):
        lp = log_softmax(last)
        if cfg.mode == "greedy":
            tok = int(lp.argmax())
        else:
            p = np.exp(lp)
            tok = int(rng.choice(len(p), p=p / p.sum()))
        out.append(tok)
        logps.append(float(lp[tok]))
        if cfg.eos_id is not None and tok == cfg.eos_id:
            break
        logits, state, _ = forward(params, np.array([[tok]]), state)
        last = logits[0, -1]
    return out, length_normalized_score(logps, cfg.alpha)


CHECKPOINT_MAGIC = b"CURL1"
_HEADER = struct.Struct("<5Q")
_LEN = struct.Struct("<Q")


def save_checkpoint(path, params, state=None):
    """Binary checkpoint.

    Layout: magic ``CURL1``; five little-endian uint64 (vocab size, d_emb,
    hidden, layers, tied); every tensor of ``params.named()`` as little-endian
    float64; then a uint64 length and a UTF-8 JSON object with training state.
    """
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(_HEADER.pack(params.vocab_size, params.d_emb, params.hidden,
                             params.n_layers, int(params.tied)))
        for a in params.arrays():
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        blob = json.dumps(state or {}, sort_keys=True).encode("utf-8")
        f.write(_LEN.pack(len(blob)))
        f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, state_dict)``."""
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a CURL1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    V, d, H, L, tied = _HEADER.unpack_from(data, pos)
    pos += _HEADER.size
    shell = init_params(V, d, H, np.random.default_rng(0), n_layers=L, tied=bool(tied))
    for a in shell.arrays():
        n = a.size * 8
        a[...] = np.frombuffer(data, dtype="<f8", count=a.size, offset=pos).reshape(a.shape)
        pos += n
    (n,) = _LEN.unpack_from(data, pos)
    pos += _LEN.size
    state = json.loads(data[pos : pos + n].decode("utf-8"))
    return shell, state
