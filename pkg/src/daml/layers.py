"""HAN feature extractor and MLP heads built on :mod:`daml.autodiff`.

All sequence ops are batched: a batch of ``N`` padded sequences of length
``T`` is an ``(N, T, dim)`` node plus an ``(N, T)`` boolean mask. Padding is
right-aligned and never enters a pooled result.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ShapeError
from .corpus import Batch, Document, pad_documents

INIT_SCALE = 0.1


def _uniform(rng: np.random.Generator, shape, dtype) -> Node:
    return ad.param(rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape), dtype=dtype)


def _named(obj, prefix: str) -> dict[str, Node]:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}.{f.name}" if prefix else f.name
        if isinstance(v, Node):
            out[key] = v
        elif hasattr(v, "named_parameters"):
            out.update(v.named_parameters(key))
    return out


@dataclass
class EmbeddingTable:
    weights: Node

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.weights.shape[1]

    def named_parameters(self, prefix=""):
        return _named(self, prefix)


@dataclass
class GruParams:
    """Update (z), reset (r) and candidate (n) gates, each ``(H, I + H)``."""

    wz: Node
    bz: Node
    wr: Node
    br: Node
    wn: Node
    bn: Node

    @property
    def hidden_dim(self) -> int:
        return self.wz.shape[0]

    @property
    def input_dim(self) -> int:
        return self.wz.shape[1] - self.wz.shape[0]

    def named_parameters(self, prefix=""):
        return _named(self, prefix)


@dataclass
class AttentionParams:
    w: Node
    b: Node
    omega: Node

    def named_parameters(self, prefix=""):
        return _named(self, prefix)


@dataclass
class ExtractorParams:
    embedding: EmbeddingTable
    word_fwd: GruParams
    word_bwd: GruParams
    word_att: AttentionParams
    sent_fwd: GruParams
    sent_bwd: GruParams
    sent_att: AttentionParams

    @property
    def output_dim(self) -> int:
        return 2 * self.sent_fwd.hidden_dim

    def named_parameters(self, prefix=""):
        return _named(self, prefix)


@dataclass
class HeadParams:
    weights: list
    biases: list
    final: str  # "softmax" or "sigmoid"

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def named_parameters(self, prefix=""):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out


# --- initialisation ---------------------------------------------------------


def init_gru(rng, input_dim: int, hidden_dim: int, dtype=np.float64) -> GruParams:
    cols = input_dim + hidden_dim
    return GruParams(
        wz=_uniform(rng, (hidden_dim, cols), dtype), bz=_uniform(rng, (hidden_dim,), dtype),
        wr=_uniform(rng, (hidden_dim, cols), dtype), br=_uniform(rng, (hidden_dim,), dtype),
        wn=_uniform(rng, (hidden_dim, cols), dtype), bn=_uniform(rng, (hidden_dim,), dtype),
    )


def init_attention(rng, input_dim: int, proj_dim: int | None = None, dtype=np.float64) -> AttentionParams:
    proj_dim = proj_dim or input_dim
    return AttentionParams(
        w=_uniform(rng, (proj_dim, input_dim), dtype),
        b=_uniform(rng, (proj_dim,), dtype),
        omega=_uniform(rng, (proj_dim,), dtype),
    )


def init_extractor(rng, vocab_size: int, embed_dim: int, word_hidden: int, sent_hidden: int,
                   attn_dim: int | None = None, dtype=np.float64,
                   embedding: EmbeddingTable | None = None) -> ExtractorParams:
    """Draws happen in a fixed order so one rng seed gives one parameter set.

    Passing ``embedding`` shares an existing table instead of drawing a new one.
    """
    table = embedding or EmbeddingTable(_uniform(rng, (vocab_size, embed_dim), dtype))
    word_fwd = init_gru(rng, embed_dim, word_hidden, dtype)
    word_bwd = init_gru(rng, embed_dim, word_hidden, dtype)
    wa = init_attention(rng, 2 * word_hidden, attn_dim, dtype)
    sent_fwd = init_gru(rng, 2 * word_hidden, sent_hidden, dtype)
    sent_bwd = init_gru(rng, 2 * word_hidden, sent_hidden, dtype)
    sa = init_attention(rng, 2 * sent_hidden, attn_dim, dtype)
    return ExtractorParams(table, word_fwd, word_bwd, wa, sent_fwd, sent_bwd, sa)


def init_head(rng, input_dim: int, output_dim: int, hidden_layers: int = 1,
              hidden_dim: int | None = None, final: str = "softmax", dtype=np.float64) -> HeadParams:
    if final not in ("softmax", "sigmoid"):
        raise ValueError(f"unknown head activation {final!r}")
    hidden_dim = hidden_dim or input_dim
    dims = [input_dim] + [hidden_dim] * hidden_layers + [output_dim]
    ws, bs = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        ws.append(_uniform(rng, (d_out, d_in), dtype))
        bs.append(_uniform(rng, (d_out,), dtype))
    return HeadParams(ws, bs, final)


# --- forward ops ------------------------------------------------------------


def _gru_direction(x: Node, p: GruParams, mask: np.ndarray, reverse: bool) -> Node:
    n_seq, steps, in_dim = x.shape
    hid = p.hidden_dim
    if p.input_dim != in_dim:
        raise ShapeError("gru", x.shape, p.wz.shape, detail="input dim does not match gate weights")
    xcols, hcols = (slice(None), slice(0, in_dim)), (slice(None), slice(in_dim, None))
    w_in = ad.concat([ad.index(p.wz, xcols), ad.index(p.wr, xcols), ad.index(p.wn, xcols)], axis=0)
    w_hid = ad.concat([ad.index(p.wz, hcols), ad.index(p.wr, hcols), ad.index(p.wn, hcols)], axis=0)
    bias = ad.concat([p.bz, p.br, p.bn], axis=0)
    # time-major so the scan slices contiguous (N, 3H) blocks
    xt = ad.reshape(ad.transpose(x, (1, 0, 2)), (steps * n_seq, in_dim))
    proj = ad.reshape(ad.matmul(xt, ad.transpose(w_in)) + bias, (steps, n_seq, 3 * hid))
    return ad.gru_scan(proj, ad.transpose(w_hid), mask, reverse)


def bigru_encode(inputs: Node, fwd: GruParams, bwd: GruParams, mask) -> Node:
    """Bidirectional GRU over ``(N, T, I)`` inputs; returns ``(N, T, 2H)``.

    Masked steps carry the previous state through unchanged, so with right
    padding the backward direction starts from a zero state at the last
    real token.
    """
    mask = np.asarray(mask, dtype=bool)
    if inputs.value.ndim == 2:
        inputs = ad.reshape(inputs, (1,) + inputs.shape)
        mask = mask.reshape(1, -1)
    if inputs.shape[1] == 0:
        raise ValueError("bigru_encode: empty sequence")
    if mask.shape != inputs.shape[:2]:
        raise ShapeError("bigru_encode", inputs.shape, mask.shape)
    f = _gru_direction(inputs, fwd, mask, reverse=False)
    b = _gru_direction(inputs, bwd, mask, reverse=True)
    return ad.concat([f, b], axis=-1)


def attention_pool(states: Node, params: AttentionParams, mask) -> tuple[Node, Node]:
    """Additive attention pooling over axis 1 of ``(N, T, D)`` states.

    Returns the pooled ``(N, D)`` node and the ``(N, T)`` weights.
    """
    mask = np.asarray(mask, dtype=bool)
    n_seq, steps, dim = states.shape
    if mask.shape != (n_seq, steps):
        raise ShapeError("attention_pool", states.shape, mask.shape)
    if not mask.any(axis=1).all():
        raise ValueError("attention_pool: sequence with every position masked")
    flat = ad.reshape(states, (n_seq * steps, dim))
    u = ad.tanh(ad.matmul(flat, ad.transpose(params.w)) + params.b)
    scores = ad.reshape(ad.matmul(u, params.omega), (n_seq, steps))
    weights = ad.masked_softmax(scores, mask)
    pooled = ad.sum(ad.reshape(weights, (n_seq, steps, 1)) * states, axis=1)
    return pooled, weights


def extract(batch: Batch | Document, params: ExtractorParams) -> Node:
    """Document vectors ``(B, 2 * sent_hidden)`` for a padded batch."""
    if isinstance(batch, Document):
        batch = pad_documents([batch])
    tokens, wmask, smask = batch.tokens, batch.word_mask, batch.sent_mask
    n_docs, n_sents, n_words = tokens.shape
    if tokens.size and tokens.max() >= params.embedding.vocab_size:
        raise IndexError(f"token id {int(tokens.max())} >= vocab size {params.embedding.vocab_size}")
    real = np.flatnonzero(smask.reshape(-1))
    if not smask.any(axis=1).all():
        raise ValueError("extract: document without sentences")
    tok = tokens.reshape(-1, n_words)[real]
    wm = wmask.reshape(-1, n_words)[real]
    if not wm.any(axis=1).all():
        raise ValueError("extract: sentence without tokens")

    emb = ad.take_rows(params.embedding.weights, tok)
    words = bigru_encode(emb, params.word_fwd, params.word_bwd, wm)
    sent_vecs, _ = attention_pool(words, params.word_att, wm)
    grid = ad.scatter_rows(sent_vecs, real, n_docs * n_sents)
    grid = ad.reshape(grid, (n_docs, n_sents, sent_vecs.shape[1]))
    sents = bigru_encode(grid, params.sent_fwd, params.sent_bwd, smask)
    doc_vecs, _ = attention_pool(sents, params.sent_att, smask)
    return doc_vecs


def head_forward(d: Node, params: HeadParams) -> Node:
    """``(B, F)`` features to ``(B, K)`` probabilities (softmax) or ``(B,)`` scores (sigmoid)."""
    squeeze = d.value.ndim == 1
    if squeeze:
        d = ad.reshape(d, (1, -1))
    if d.shape[1] != params.input_dim:
        raise ShapeError("head_forward", d.shape, params.weights[0].shape)
    h = d
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = ad.matmul(h, ad.transpose(w)) + b
        if i < last:
            h = ad.tanh(h)
    if params.final == "softmax":
        out = ad.softmax(h)
    else:
        out = ad.reshape(ad.sigmoid(h), (h.shape[0],))
    if squeeze:
        out = ad.index(out, 0)
    return out


def load_embeddings(path: str | Path, vocab, table: EmbeddingTable) -> int:
    """Overwrite rows of ``table`` from a ``token v1 v2 ...`` text file.

    Tokens missing from ``vocab`` are skipped; vocab entries missing from the
    file keep their random initialisation. Returns the number of rows set.
    """
    dim = table.embed_dim
    loaded = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            idx = vocab.get(parts[0])
            if idx is None:
                continue
            table.weights.value[idx] = np.array(parts[1:], dtype=float)
            loaded += 1
    return loaded
