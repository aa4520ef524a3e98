"""Attention plans for streaming encoders and their latency arithmetic.

Three restricted plans are provided next to full-sequence attention:

* ``rsa`` — every layer sees a fixed look-ahead band, so the receptive field
  (and hence delay) grows linearly with depth.
* ``csa`` — the utterance is cut into 50%-overlapping chunks; every frame is
  computed inside its assigned chunk, attending to the whole chunk plus the
  first halves of all previous chunks.  Realized over an *expanded* sequence
  holding one copy of each frame per chunk it appears in, with a final
  selection that forwards exactly one copy per frame.
* ``dcn`` — two parallel streams, causal (zero look-ahead) and non-causal
  (L look-ahead), with keys/values interchanged so that neither stream ever
  attends to information beyond its own horizon.  Depth does not grow the
  look-ahead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionMask, KvSourceTable

PLAN_KINDS = ("full", "rsa", "csa", "dcn")


@dataclass(frozen=True)
class LookaheadSpec:
    """Per-layer look-ahead and optional past-context limit (None = unlimited)."""

    lookahead: int
    past_context: int | None = None

    def __post_init__(self):
        if self.lookahead < 0:
            raise ValueError("lookahead must be >= 0")
        if self.past_context is not None and self.past_context < 0:
            raise ValueError("past_context must be >= 0 when limited")


@dataclass(frozen=True)
class ChunkSpec:
    """Chunk size for 50%-hop chunked attention; must be even."""

    chunk_size: int

    def __post_init__(self):
        if self.chunk_size <= 0 or self.chunk_size % 2 != 0:
            raise ValueError("chunk_size must be a positive even integer")

    @property
    def hop(self) -> int:
        return self.chunk_size // 2


@dataclass
class StreamPlan:
    """Masks (and, per kind, source tables or chunk bookkeeping) for one utterance.

    The same masks are reused at every encoder layer.  For ``csa`` the masks
    live in the expanded index space; ``expanded_orig`` maps expanded
    positions back to original frames and ``forward_select`` names the
    expanded copy forwarded for each original frame after the last layer.
    """

    kind: str
    length: int
    mask: AttentionMask | None = None
    # dcn
    noncausal_mask: AttentionMask | None = None
    causal_mask: AttentionMask | None = None
    noncausal_sources: KvSourceTable | None = None
    causal_sources: KvSourceTable | None = None
    lookahead: LookaheadSpec | None = None
    # csa
    chunk: ChunkSpec | None = None
    chunk_starts: list[int] = field(default_factory=list)
    expanded_orig: np.ndarray | None = None
    expanded_chunk: np.ndarray | None = None
    forward_select: np.ndarray | None = None
    forward_chunk: np.ndarray | None = None


@dataclass
class LatencyReport:
    """Algorithmic-delay arithmetic plus exact receptive-field bounds.

    ``total_frames``/``total_ms`` are None for full-sequence attention (the
    delay is the whole utterance).  ``receptive_hi[t]`` is the largest input
    frame index that can influence output frame t after ``n_layers`` layers;
    ``receptive_lo[t]`` the smallest.
    """

    kind: str
    n_layers: int
    frame_ms: float
    lookahead_per_layer: int | None
    total_frames: int | None
    total_ms: float | None
    receptive_lo: np.ndarray
    receptive_hi: np.ndarray
    chunk_size: int | None = None
    hop: int | None = None
    worst_case_lookahead: int | None = None


def build_full_mask(length: int) -> AttentionMask:
    return AttentionMask(np.ones((length, length), dtype=bool))


def build_rsa_mask(length: int, spec: LookaheadSpec) -> AttentionMask:
    """Band mask: query t sees keys p <= t + L (and t - p <= past limit)."""
    if length < 1:
        raise ValueError("length must be >= 1")
    t = np.arange(length)[:, None]
    p = np.arange(length)[None, :]
    allow = p <= t + spec.lookahead
    if spec.past_context is not None:
        allow &= (t - p) <= spec.past_context
    return AttentionMask(allow)


def build_csa_plan(length: int, spec: ChunkSpec) -> StreamPlan:
    """Chunked plan over the expanded (one copy per chunk) sequence.

    Chunks start at multiples of the hop; the last chunk is the earliest one
    whose end reaches the utterance end.  A frame is forwarded from the chunk
    in whose first half it lies (tail frames from the last chunk), so the
    forwarded copies cover each original frame exactly once.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    c, hop = spec.chunk_size, spec.hop
    if length <= c:
        starts = [0]
    else:
        n_hops = -(-(length - c) // hop)  # ceil division
        starts = [i * hop for i in range(n_hops + 1)]
    n_chunks = len(starts)

    expanded_orig: list[int] = []
    expanded_chunk: list[int] = []
    offsets = []
    for ci, s in enumerate(starts):
        offsets.append(len(expanded_orig))
        for p in range(s, min(s + c, length)):
            expanded_orig.append(p)
            expanded_chunk.append(ci)
    expanded_orig = np.asarray(expanded_orig)
    expanded_chunk = np.asarray(expanded_chunk)
    n_exp = len(expanded_orig)

    # current chunk fully visible; previous chunks contribute their first half
    first_half = expanded_orig - np.asarray(starts)[expanded_chunk] < hop
    same = expanded_chunk[:, None] == expanded_chunk[None, :]
    past = (expanded_chunk[None, :] < expanded_chunk[:, None]) & first_half[None, :]
    allow = same | past

    forward_select = np.empty(length, dtype=np.int64)
    forward_chunk = np.empty(length, dtype=np.int64)
    for t in range(length):
        ci = min(t // hop, n_chunks - 1)
        forward_select[t] = offsets[ci] + (t - starts[ci])
        forward_chunk[t] = ci

    return StreamPlan(
        kind="csa", length=length, mask=AttentionMask(allow), chunk=spec,
        chunk_starts=starts, expanded_orig=expanded_orig,
        expanded_chunk=expanded_chunk, forward_select=forward_select,
        forward_chunk=forward_chunk,
    )


def build_dcn_plan(length: int, spec: LookaheadSpec) -> StreamPlan:
    """Dual causal/non-causal plan: masks plus per-(query, key) stream sources.

    Non-causal queries take look-ahead keys (t < p <= t+L) from the causal
    stream; causal queries take distant-past keys (p <= t-L) from the
    non-causal stream.  The boundary key p = t-L is taken from the non-causal
    stream: its information horizon is p+L = t, which is causally safe.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    lh = spec.lookahead
    t = np.arange(length)[:, None]
    p = np.arange(length)[None, :]

    nc_allow = p <= t + lh
    c_allow = p <= t
    if spec.past_context is not None:
        nc_allow &= (t - p) <= spec.past_context
        c_allow &= (t - p) <= spec.past_context

    nc_from_own = p <= t          # look-ahead keys come from the causal stream
    c_from_other = p <= t - lh    # distant past comes from the non-causal stream

    return StreamPlan(
        kind="dcn", length=length, lookahead=spec,
        noncausal_mask=AttentionMask(nc_allow),
        causal_mask=AttentionMask(c_allow),
        noncausal_sources=KvSourceTable(nc_from_own),
        causal_sources=KvSourceTable(~c_from_other),
    )


def build_plan(kind: str, length: int, *, lookahead: int = 0,
               past_context: int | None = None, chunk_size: int = 0) -> StreamPlan:
    """Dispatch plan construction by kind name."""
    if kind == "full":
        return StreamPlan(kind="full", length=length, mask=build_full_mask(length))
    if kind == "rsa":
        spec = LookaheadSpec(lookahead, past_context)
        return StreamPlan(kind="rsa", length=length, lookahead=spec,
                          mask=build_rsa_mask(length, spec))
    if kind == "csa":
        return build_csa_plan(length, ChunkSpec(chunk_size))
    if kind == "dcn":
        return build_dcn_plan(length, LookaheadSpec(lookahead, past_context))
    raise ValueError(f"unknown plan kind {kind!r}; expected one of {PLAN_KINDS}")


def _compose_reach(allow: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    new_lo = np.empty_like(lo)
    new_hi = np.empty_like(hi)
    for q in range(allow.shape[0]):
        keys = np.flatnonzero(allow[q])
        new_lo[q] = lo[keys].min()
        new_hi[q] = hi[keys].max()
    return new_lo, new_hi


def compute_latency(plan: StreamPlan, n_layers: int, frame_ms: float) -> LatencyReport:
    """Delay conventions per plan kind plus exact mask-composed receptive fields.

    Reported totals: rsa = layers x lookahead (delays add up per layer),
    dcn = lookahead (constant in depth), csa = chunk size (the chunk-size
    convention; hop and worst-case per-frame look-ahead C-1 are reported
    alongside), full = unbounded (None).
    """
    if n_layers < 1:
        raise ValueError("layer count must be >= 1")
    if frame_ms <= 0:
        raise ValueError("frame_ms must be positive")
    t_idx = np.arange(plan.length)

    if plan.kind == "full":
        lo = np.zeros(plan.length, dtype=np.int64)
        hi = np.full(plan.length, plan.length - 1, dtype=np.int64)
        return LatencyReport("full", n_layers, frame_ms, None, None, None, lo, hi)

    if plan.kind == "rsa":
        lh = plan.lookahead.lookahead
        lo, hi = t_idx.copy(), t_idx.copy()
        for _ in range(n_layers):
            lo, hi = _compose_reach(plan.mask.allow, lo, hi)
        total = n_layers * lh
        return LatencyReport("rsa", n_layers, frame_ms, lh, total,
                             total * frame_ms, lo, hi)

    if plan.kind == "dcn":
        lh = plan.lookahead.lookahead
        lo_nc, hi_nc = t_idx.copy(), t_idx.copy()
        lo_c, hi_c = t_idx.copy(), t_idx.copy()
        for _ in range(n_layers):
            new = []
            for allow, src in ((plan.noncausal_mask.allow, plan.noncausal_sources),
                               (plan.causal_mask.allow, plan.causal_sources)):
                nlo = np.empty_like(lo_nc)
                nhi = np.empty_like(hi_nc)
                for q in range(plan.length):
                    keys = np.flatnonzero(allow[q])
                    own = src.use_first[q, keys]
                    lo_mix = np.where(own, lo_nc[keys], lo_c[keys])
                    hi_mix = np.where(own, hi_nc[keys], hi_c[keys])
                    nlo[q] = lo_mix.min()
                    nhi[q] = hi_mix.max()
                new.append((nlo, nhi))
            (lo_nc, hi_nc), (lo_c, hi_c) = new
        return LatencyReport("dcn", n_layers, frame_ms, lh, lh,
                             lh * frame_ms, lo_nc, hi_nc)

    if plan.kind == "csa":
        c = plan.chunk.chunk_size
        n_exp = len(plan.expanded_orig)
        lo = plan.expanded_orig.astype(np.int64).copy()
        hi = plan.expanded_orig.astype(np.int64).copy()
        for _ in range(n_layers):
            lo, hi = _compose_reach(plan.mask.allow, lo, hi)
        sel = plan.forward_select
        return LatencyReport("csa", n_layers, frame_ms, None, c, c * frame_ms,
                             lo[sel], hi[sel], chunk_size=c, hop=plan.chunk.hop,
                             worst_case_lookahead=c - 1)

    raise ValueError(f"unknown plan kind {plan.kind!r}")


def decoder_latency_ms(decoder_lookahead: int, frame_ms: float) -> float:
    """Algorithmic delay of a trigger-driven decoder with fixed look-ahead."""
    if decoder_lookahead < 0:
        raise ValueError("decoder lookahead must be >= 0")
    return decoder_lookahead * frame_ms


def settled_frame_count(kind: str, available: int, *, n_layers: int = 1,
                        lookahead: int = 0, chunk_size: int = 0) -> int:
    """Count of leading frames whose encoder outputs are already final.

    Frames [0, count) computed from ``available`` input frames equal the
    full-utterance computation regardless of how many frames follow.
    """
    if available <= 0:
        return 0
    if kind == "rsa":
        return max(0, available - n_layers * lookahead)
    if kind == "dcn":
        return max(0, available - lookahead)
    if kind == "csa":
        hop = chunk_size // 2
        count = 0
        for t in range(available):
            if (t // hop) * hop + chunk_size <= available:
                count += 1
            else:
                break
        return count
    if kind == "full":
        return 0
    raise ValueError(f"unknown plan kind {kind!r}")
