"""Transformer caption decoder: one or more post-norm layers of masked
self-attention, cross-attention over the visual tokens and an FFN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


@dataclass
class CaptionBatch:
    """Padded id matrix ``[B, N_max]``; every row is ``BOS ... EOS PAD*``."""

    ids: np.ndarray
    lengths: np.ndarray

    @classmethod
    def from_sequences(cls, seqs: list[list[int]], max_len: int | None = None) -> "CaptionBatch":
        width = max(len(s) for s in seqs) if max_len is None else max_len
        ids = np.full((len(seqs), width), PAD, dtype=np.int64)
        for i, s in enumerate(seqs):
            if len(s) > width:
                raise ValueError(f"sequence {i} has {len(s)} tokens, more than {width}")
            if len(s) < 2 or s[0] != BOS or s[-1] != EOS:
                raise ValueError(f"sequence {i} must start with BOS and end with EOS")
            ids[i, : len(s)] = s
        return cls(ids, np.array([len(s) for s in seqs], dtype=np.int64))

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]

    def inputs(self) -> np.ndarray:
        return self.ids[:, :-1]

    def targets(self) -> np.ndarray:
        return self.ids[:, 1:]

    def target_mask(self) -> np.ndarray:
        return self.mask[:, 1:]


class Attention(Module):
    """Single-head scaled dot-product attention with output projection."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.q = Linear(d, d, rng)
        # a key bias shifts every logit of a row equally, which softmax ignores
        self.k = Linear(d, d, rng, bias=False)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    def forward(self, x: Tensor, memory: Tensor, mask: np.ndarray | None = None) -> Tensor:
        q, k, v = self.q(x), self.k(memory), self.v(memory)
        logits = T.scale(T.matmul(q, k.swapaxes(-1, -2)), 1.0 / np.sqrt(q.shape[-1]))
        attn = T.softmax_lastdim(logits) if mask is None else T.masked_softmax(logits, mask)
        return self.o(T.matmul(attn, v))


class DecoderLayer(Module):
    def __init__(self, d: int, ffn_hidden: int, rng: np.random.Generator):
        self.self_attn = Attention(d, rng)
        self.norm1 = LayerNorm(d)
        self.cross_attn = Attention(d, rng)
        self.norm2 = LayerNorm(d)
        self.fc1 = Linear(d, ffn_hidden, rng)
        self.fc2 = Linear(ffn_hidden, d, rng)
        self.norm3 = LayerNorm(d)

    def forward(self, x: Tensor, visual: Tensor, causal: np.ndarray) -> Tensor:
        x = self.norm1(x + self.self_attn(x, x, causal))
        x = self.norm2(x + self.cross_attn(x, visual))
        return self.norm3(x + self.fc2(T.relu(self.fc1(x))))


class DecoderParams(Module):
    def __init__(
        self, vocab_size: int, d: int, rng: np.random.Generator, n_layers: int = 1, max_len: int = 24, ffn_hidden: int | None = None
    ):
        if n_layers < 1:
            raise ValueError("decoder depth must be >= 1")
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.token_emb = T.param(rng.normal(0.0, 0.1, size=(vocab_size, d)))
        self.pos_emb = T.param(rng.normal(0.0, 0.1, size=(max_len, d)))
        self.layers = [DecoderLayer(d, ffn_hidden or 4 * d, rng) for _ in range(n_layers)]
        self.out = Linear(d, vocab_size, rng)

    def forward(self, visual: Tensor, ids: np.ndarray) -> Tensor:
        return decoder_forward(visual, ids, self)


def decoder_forward(visual: Tensor, ids, p: DecoderParams) -> Tensor:
    """Next-token logits ``[B, N, V]`` for id prefixes ``[B, N]`` given visual tokens ``[B, L, D]``.

    Position ``n`` sees tokens ``0..n`` only.
    """
    ids = np.asarray(ids.inputs() if isinstance(ids, CaptionBatch) else ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    b, n = ids.shape
    if ids.size and (ids.min() < 0 or ids.max() >= p.vocab_size):
        raise ValueError(f"token id out of range [0, {p.vocab_size})")
    if n > p.max_len:
        raise ValueError(f"sequence length {n} exceeds the positional table ({p.max_len})")
    if visual.ndim == 2:
        visual = visual.reshape((1,) + visual.shape)
    if visual.shape[0] != b:
        raise T.ShapeError(f"{visual.shape[0]} visual inputs for {b} captions")
    d = p.token_emb.shape[1]
    x = p.token_emb[ids] + p.pos_emb[:n].expand((b, n, d))
    causal = np.tril(np.ones((n, n), dtype=bool))
    for layer in p.layers:
        x = layer(x, visual, causal)
    return p.out(x)


def caption_loss(logits: Tensor, targets: CaptionBatch) -> Tensor:
    """Mean token cross-entropy over non-pad target positions.

    ``logits`` must come from ``decoder_forward(visual, targets.inputs())``.
    """
    return T.cross_entropy(logits, targets.targets(), targets.target_mask())


def generate_greedy(visual: Tensor, p: DecoderParams, max_len: int | None = None) -> list[list[int]]:
    """Beam-1 decoding from BOS until EOS or ``max_len`` generated tokens.

    Returns one id list per visual input, without BOS and EOS. PAD and BOS are
    never emitted. Ties in the
    argmax go to the smaller id.
    """
    max_len = min(max_len or p.max_len - 1, p.max_len - 1)
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if visual.ndim == 2:
        visual = visual.reshape((1,) + visual.shape)
    b = visual.shape[0]
    seqs = np.full((b, 1), BOS, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    with T.no_grad():
        for _ in range(max_len):
            logits = decoder_forward(visual, seqs, p).data[:, -1, :].copy()
            logits[:, [PAD, BOS]] = -np.inf
            nxt = np.argmax(logits, axis=-1)
            nxt = np.where(done, PAD, nxt)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
    out = []
    for row in seqs[:, 1:]:
        toks = []
        for t in row:
            if t in (EOS, PAD):
                break
            toks.append(int(t))
        out.append(toks)
    return out
