"""Region caption decoder: image encoder, word embedding, two LSTM layers, word decoder.

Time step 0 consumes the encoded region feature, step 1 the ``<start>``
embedding, and every later step the previous word. Outputs from step 1 on
predict the caption tokens, the last being ``<end>``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Value

PREFIX = "lm."


@dataclass
class DecoderState:
    h: list[Value]
    c: list[Value]


def init_params(store: ParamStore, d: int, vocab_size: int, embed_dim: int, hidden: int,
                rng: np.random.Generator):
    store.add("lm.enc.W", rng.normal(scale=np.sqrt(1.0 / d), size=(embed_dim, d)))
    store.add("lm.enc.b", np.zeros(embed_dim))
    store.add("lm.embed", rng.normal(scale=0.1, size=(vocab_size, embed_dim)))
    for layer, n_in in ((0, embed_dim), (1, hidden)):
        s = 1.0 / np.sqrt(hidden)
        store.add(f"lm.lstm{layer}.Wx", rng.uniform(-s, s, size=(4 * hidden, n_in)))
        store.add(f"lm.lstm{layer}.Wh", rng.uniform(-s, s, size=(4 * hidden, hidden)))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget gate bias
        store.add(f"lm.lstm{layer}.b", b)
    store.add("lm.dec.W", rng.normal(scale=np.sqrt(1.0 / hidden), size=(vocab_size, hidden)))
    store.add("lm.dec.b", np.zeros(vocab_size))


def initial_state(n: int, hidden: int) -> DecoderState:
    z = np.zeros((n, hidden))
    return DecoderState([Value(z), Value(z)], [Value(z), Value(z)])


def recurrent_step(store: ParamStore, layer: int, x: Value, h: Value, c: Value):
    """One LSTM cell update; gate order is input, forget, output, candidate."""
    Wx, Wh, b = (store[f"lm.lstm{layer}.{n}"] for n in ("Wx", "Wh", "b"))
    H = Wh.shape[1]
    z = ad.add(ad.add(ad.linear(x, Wx), ad.linear(h, Wh)), b)
    i = ad.sigmoid(z[..., 0:H])
    f = ad.sigmoid(z[..., H:2 * H])
    o = ad.sigmoid(z[..., 2 * H:3 * H])
    g = ad.tanh(z[..., 3 * H:4 * H])
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def _step(store: ParamStore, x: Value, state: DecoderState) -> tuple[Value, DecoderState]:
    h0, c0 = recurrent_step(store, 0, x, state.h[0], state.c[0])
    h1, c1 = recurrent_step(store, 1, h0, state.h[1], state.c[1])
    logits = ad.linear(h1, store["lm.dec.W"], store["lm.dec.b"])
    return logits, DecoderState([h0, h1], [c0, c1])


def encode_image(store: ParamStore, x_cap: Value) -> Value:
    return ad.linear(ad.relu(x_cap), store["lm.enc.W"], store["lm.enc.b"])


def caption_loss(store: ParamStore, x_cap, token_seqs: Sequence[Sequence[int]],
                 start_id: int) -> Value:
    """Teacher-forced mean cross-entropy over all predicted positions.

    ``x_cap`` is ``[n, D]`` (or a single ``D`` vector with one sequence).
    """
    x_cap = ad.as_value(x_cap)
    if x_cap.data.ndim == 1:
        x_cap = ad.reshape(x_cap, (1, -1))
    token_seqs = [list(t) for t in token_seqs]
    if len(token_seqs) != x_cap.shape[0]:
        raise ValueError(f"{len(token_seqs)} sequences for {x_cap.shape[0]} caption features")
    if not token_seqs or any(len(t) == 0 for t in token_seqs):
        raise ValueError("caption loss needs non-empty token sequences")
    n = len(token_seqs)
    L = max(len(t) for t in token_seqs)
    hidden = store["lm.lstm0.Wh"].shape[1]
    emb = store["lm.embed"]

    _, state = _step(store, encode_image(store, x_cap), initial_state(n, hidden))
    prev = np.full(n, start_id, dtype=np.int64)
    logits_all, labels, weights = [], [], []
    for t in range(L):
        logits, state = _step(store, ad.take_rows(emb, prev), state)
        lab = np.array([seq[t] if t < len(seq) else 0 for seq in token_seqs])
        w = np.array([1.0 if t < len(seq) else 0.0 for seq in token_seqs])
        logits_all.append(logits)
        labels.append(lab)
        weights.append(w)
        prev = lab
    return ad.softmax_cross_entropy(ad.concat(logits_all, axis=0), np.concatenate(labels),
                                    np.concatenate(weights))


def decode_greedy(store: ParamStore, x_cap, max_len: int, start_id: int,
                  end_id: int) -> list[tuple[list[int], float]]:
    """Argmax decoding for each row of ``x_cap``.

    Returns ``(tokens, score)`` per row; ``tokens`` excludes ``<end>`` and
    ``score`` is the mean log-probability of the emitted steps.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    x_cap = ad.as_value(np.asarray(getattr(x_cap, "data", x_cap), dtype=np.float64))
    if x_cap.data.ndim == 1:
        x_cap = ad.reshape(x_cap, (1, -1))
    n = x_cap.shape[0]
    if n == 0:
        return []
    hidden = store["lm.lstm0.Wh"].shape[1]
    emb = store["lm.embed"].data
    const = _ConstStore(store)
    _, state = _step(const, encode_image(const, x_cap), initial_state(n, hidden))
    prev = np.full(n, start_id, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    out = [[] for _ in range(n)]
    logp = [[] for _ in range(n)]
    for _ in range(max_len):
        logits, state = _step(const, Value(emb[prev]), state)
        lsm = ad.log_softmax(logits.data)
        nxt = lsm.argmax(axis=1)
        for r in range(n):
            if done[r]:
                continue
            logp[r].append(float(lsm[r, nxt[r]]))
            if nxt[r] == end_id:
                done[r] = True
            else:
                out[r].append(int(nxt[r]))
        if done.all():
            break
        prev = nxt
    return [(toks, float(np.mean(lp))) for toks, lp in zip(out, logp)]


class _ConstStore:
    """Read-only view of a store whose values carry no gradient tape."""

    def __init__(self, store: ParamStore):
        self._store = store

    def __getitem__(self, name):
        return Value(self._store[name].data)
