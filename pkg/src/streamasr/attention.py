"""Scaled dot-product and multi-head attention over boolean masks.

Supports three variants used by the encoders and decoder:

* plain multi-head attention (absolute positions handled by the caller),
* relative-position multi-head self-attention (Transformer-XL style logit
  decomposition: content-content, content-position, bias-content,
  bias-position),
* dual-source attention, where each (query, key) pair may draw its key and
  value from one of two parallel input sequences.

Masked logits use an additive ``LOG_ZERO`` surrogate; softmax underflows it
to exactly 0 in float64, so masking is exact at the output level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import LOG_ZERO, Parameter, RngStream, Tensor


class MaskedRowError(ValueError):
    """A query row with no allowed keys cannot be normalized."""


@dataclass(frozen=True)
class AttentionMask:
    """Boolean visibility matrix: allow[q, k] means key k is visible to query q."""

    allow: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "allow", np.asarray(self.allow, dtype=bool))
        if self.allow.ndim != 2:
            raise ValueError("attention mask must be 2-D")

    @property
    def n_queries(self) -> int:
        return self.allow.shape[0]

    @property
    def n_keys(self) -> int:
        return self.allow.shape[1]

    def require_nonempty_rows(self) -> None:
        if not self.allow.any(axis=1).all():
            bad = int(np.flatnonzero(~self.allow.any(axis=1))[0])
            raise MaskedRowError(f"query row {bad} has no allowed keys")


def as_mask(mask) -> AttentionMask:
    if isinstance(mask, AttentionMask):
        return mask
    return AttentionMask(np.asarray(mask))


def full_mask(n_queries: int, n_keys: int | None = None) -> AttentionMask:
    if n_keys is None:
        n_keys = n_queries
    return AttentionMask(np.ones((n_queries, n_keys), dtype=bool))


def causal_mask(n: int) -> AttentionMask:
    return AttentionMask(np.tril(np.ones((n, n), dtype=bool)))


@dataclass(frozen=True)
class KvSourceTable:
    """Per-(query, key) choice between two key/value streams.

    ``use_first[q, k]`` selects the primary stream; False selects the
    alternate stream.  Entries outside the companion mask are ignored.
    """

    use_first: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "use_first", np.asarray(self.use_first, dtype=bool))


@dataclass
class MhaParams:
    """Projection weights for multi-head attention.

    The per-head query/key/value projections are stored concatenated along
    the output axis: column block i*d_head..(i+1)*d_head belongs to head i.
    """

    w_q: Parameter
    w_k: Parameter
    w_v: Parameter
    w_out: Parameter
    n_heads: int

    @property
    def d_model(self) -> int:
        return self.w_q.data.shape[0]

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @staticmethod
    def create(name: str, d_model: int, n_heads: int, rng: RngStream) -> "MhaParams":
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by head count {n_heads}")
        mk = lambda tag: Parameter(
            nm.glorot(rng, (d_model, d_model), d_model, d_model), f"{name}.{tag}")
        return MhaParams(mk("wq"), mk("wk"), mk("wv"), mk("wout"), n_heads)

    def parameters(self) -> list[Parameter]:
        return [self.w_q, self.w_k, self.w_v, self.w_out]


@dataclass
class RelPosParams:
    """Relative-position extras: projected sinusoid embeddings plus the two
    global bias vectors added to queries for the content and position terms."""

    w_pos: Parameter                # d_model x d_model, no bias
    content_bias: Parameter         # (n_heads, d_head)
    position_bias: Parameter        # (n_heads, d_head)

    @staticmethod
    def create(name: str, d_model: int, n_heads: int, rng: RngStream) -> "RelPosParams":
        d_head = d_model // n_heads
        return RelPosParams(
            Parameter(nm.glorot(rng, (d_model, d_model), d_model, d_model), f"{name}.wpos"),
            Parameter(np.zeros((n_heads, d_head)), f"{name}.content_bias"),
            Parameter(np.zeros((n_heads, d_head)), f"{name}.position_bias"),
        )

    def parameters(self) -> list[Parameter]:
        return [self.w_pos, self.content_bias, self.position_bias]


def sinusoid_encoding(positions, d_model: int) -> np.ndarray:
    """Canonical interleaved sin/cos encoding; positions may be negative."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = np.arange(0, d_model, 2, dtype=np.float64)
    div = np.exp(-np.log(10000.0) * half / d_model)
    enc = np.zeros((positions.shape[0], d_model))
    enc[:, 0::2] = np.sin(positions * div)
    enc[:, 1::2] = np.cos(positions * div)
    return enc


def scaled_dot_attention(q, k, v, mask) -> Tensor:
    """Softmax(q kᵀ / sqrt(d_k)) v with masked logits forced to LOG_ZERO."""
    q, k, v = nm.as_tensor(q), nm.as_tensor(k), nm.as_tensor(v)
    mask = as_mask(mask)
    if mask.allow.shape != (q.shape[0], k.shape[0]):
        raise ValueError("mask shape does not match query/key lengths")
    mask.require_nonempty_rows()
    d_k = q.shape[-1]
    logits = nm.mul(nm.matmul(q, nm.transpose(k)), 1.0 / np.sqrt(d_k))
    logits = nm.where(mask.allow, logits, nm.as_tensor(LOG_ZERO))
    return nm.matmul(nm.softmax(logits, axis=-1), v)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    n, d = x.shape
    return nm.reshape(x, (n, n_heads, d // n_heads))


def _select_kv(primary: Tensor, alternate: Tensor, sources: KvSourceTable) -> Tensor:
    # (n_q, n_k, heads, d_head) selection from two (n_k, heads, d_head) streams
    cond = sources.use_first[:, :, None, None]
    n_q = sources.use_first.shape[0]
    a = nm.reshape(primary, (1,) + primary.shape)
    b = nm.reshape(alternate, (1,) + alternate.shape)
    return nm.where(np.broadcast_to(cond, (n_q,) + primary.shape),
                    a, b)


def multi_head_attention(x_q, x_kv, params: MhaParams, mask,
                         alt_kv=None, kv_sources: KvSourceTable | None = None) -> Tensor:
    """Multi-head attention; optional per-(query, key) dual-source keys/values.

    When ``alt_kv``/``kv_sources`` are given, the key and value seen by query
    i at position j come from ``x_kv`` where ``kv_sources.use_first[i, j]``
    and from ``alt_kv`` otherwise.  Both streams share the projections.
    """
    x_q, x_kv = nm.as_tensor(x_q), nm.as_tensor(x_kv)
    mask = as_mask(mask)
    mask.require_nonempty_rows()
    h, d_head = params.n_heads, params.d_head
    scale = 1.0 / np.sqrt(d_head)

    q = _split_heads(nm.matmul(x_q, params.w_q), h)
    k = _split_heads(nm.matmul(x_kv, params.w_k), h)
    v = _split_heads(nm.matmul(x_kv, params.w_v), h)

    if kv_sources is None:
        logits = nm.mul(nm.einsum2("qhd,khd->hqk", q, k), scale)
        logits = nm.where(mask.allow[None, :, :], logits, nm.as_tensor(LOG_ZERO))
        ctx = nm.einsum2("hqk,khd->qhd", nm.softmax(logits, axis=-1), v)
    else:
        if alt_kv is None:
            raise ValueError("kv_sources given without the alternate stream")
        alt_kv = nm.as_tensor(alt_kv)
        if alt_kv.shape[0] != x_kv.shape[0]:
            raise ValueError("both key/value streams must share the same length")
        k2 = _split_heads(nm.matmul(alt_kv, params.w_k), h)
        v2 = _split_heads(nm.matmul(alt_kv, params.w_v), h)
        k_sel = _select_kv(k, k2, kv_sources)
        v_sel = _select_kv(v, v2, kv_sources)
        logits = nm.mul(nm.einsum2("qhd,qkhd->hqk", q, k_sel), scale)
        logits = nm.where(mask.allow[None, :, :], logits, nm.as_tensor(LOG_ZERO))
        ctx = nm.einsum2("hqk,qkhd->qhd", nm.softmax(logits, axis=-1), v_sel)

    n_q = x_q.shape[0]
    return nm.matmul(nm.reshape(ctx, (n_q, h * d_head)), params.w_out)


def relative_mha(x, params: MhaParams, rel: RelPosParams, mask,
                 alt_kv=None, kv_sources: KvSourceTable | None = None,
                 offsets: np.ndarray | None = None) -> Tensor:
    """Self-attention with relative positional encoding.

    Logits decompose as (q + content_bias)·k + (q + position_bias)·r(i-j),
    scaled by 1/sqrt(d_head), where r projects a sinusoid embedding of the
    relative offset.  ``offsets[i, j]`` overrides the default offset i - j
    (used when sequence positions are not contiguous).
    """
    x = nm.as_tensor(x)
    mask = as_mask(mask)
    mask.require_nonempty_rows()
    n = x.shape[0]
    n_k = mask.n_keys
    h, d_head = params.n_heads, params.d_head
    scale = 1.0 / np.sqrt(d_head)

    if offsets is None:
        offsets = np.arange(n)[:, None] - np.arange(n_k)[None, :]
    offsets = np.asarray(offsets, dtype=np.int64)
    off_min, off_max = int(offsets.min()), int(offsets.max())
    off_values = np.arange(off_min, off_max + 1)
    sin_table = sinusoid_encoding(off_values, params.d_model)

    q = _split_heads(nm.matmul(x, params.w_q), h)
    k = _split_heads(nm.matmul(x, params.w_k), h)
    v = _split_heads(nm.matmul(x, params.w_v), h)
    r = _split_heads(nm.matmul(nm.as_tensor(sin_table), rel.w_pos), h)

    q_content = nm.add(q, nm.reshape(rel.content_bias, (1, h, d_head)))
    q_position = nm.add(q, nm.reshape(rel.position_bias, (1, h, d_head)))

    if kv_sources is None:
        content = nm.einsum2("qhd,khd->hqk", q_content, k)
    else:
        if alt_kv is None:
            raise ValueError("kv_sources given without the alternate stream")
        alt = nm.as_tensor(alt_kv)
        k2 = _split_heads(nm.matmul(alt, params.w_k), h)
        v2 = _split_heads(nm.matmul(alt, params.w_v), h)
        k_sel = _select_kv(k, k2, kv_sources)
        v = _select_kv(v, v2, kv_sources)
        content = nm.einsum2("qhd,qkhd->hqk", q_content, k_sel)

    # (heads, n_q, n_offsets) position scores, then gathered per (i, j)
    pos_all = nm.einsum2("qhd,ohd->hqo", q_position, r)
    head_idx = np.broadcast_to(np.arange(h)[:, None, None], (h, n, n_k))
    query_idx = np.broadcast_to(np.arange(n)[None, :, None], (h, n, n_k))
    offset_idx = np.broadcast_to((offsets - off_min)[None, :, :], (h, n, n_k))
    position = nm.slice_(pos_all, (head_idx, query_idx, offset_idx))

    logits = nm.mul(nm.add(content, position), scale)
    logits = nm.where(mask.allow[None, :, :], logits, nm.as_tensor(LOG_ZERO))
    attn = nm.softmax(logits, axis=-1)
    if kv_sources is None:
        ctx = nm.einsum2("hqk,khd->qhd", attn, v)
    else:
        ctx = nm.einsum2("hqk,qkhd->qhd", attn, v)
    return nm.matmul(nm.reshape(ctx, (n, h * d_head)), params.w_out)
