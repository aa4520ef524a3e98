"""Transformer label decoder with optional per-step source visibility bounds.

The decoder predicts the next label from a start-symbol-prefixed label
sequence and the (layer-normalized) encoder output.  Output class 0 is the
end-of-sequence symbol; classes 1..V are the labels, matching their CTC ids.
Trigger-driven training passes per-step visibility bounds so that step l only
attends to the leading encoder frames available at its trigger time plus a
fixed look-ahead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .attention import (AttentionMask, MhaParams, causal_mask, full_mask,
                        multi_head_attention, sinusoid_encoding)
from .encoder import FeedForward, LayerNorm, Linear
from .numerics import Parameter, RngStream, Tensor

EOS_CLASS = 0
START_TOKEN = 0  # embedding row 0; label tokens use their own ids 1..V


@dataclass
class DecoderConfig:
    n_blocks: int = 2
    d_model: int = 32
    d_ff: int = 128
    n_heads: int = 4
    vocab_size: int = 12
    decoder_lookahead: int = 4

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.decoder_lookahead < 0:
            raise ValueError("decoder_lookahead must be >= 0")

    @property
    def n_classes(self) -> int:
        return self.vocab_size + 1


class DecoderBlock:
    def __init__(self, name: str, cfg: DecoderConfig, rng: RngStream):
        d = cfg.d_model
        self.ln1 = LayerNorm(f"{name}.ln1", d)
        self.ln2 = LayerNorm(f"{name}.ln2", d)
        self.ln3 = LayerNorm(f"{name}.ln3", d)
        self.self_mha = MhaParams.create(f"{name}.self", d, cfg.n_heads, rng)
        self.src_mha = MhaParams.create(f"{name}.src", d, cfg.n_heads, rng)
        self.ff = FeedForward(f"{name}.ff", d, cfg.d_ff, rng)

    def parameters(self) -> list[Parameter]:
        return (self.ln1.parameters() + self.ln2.parameters() + self.ln3.parameters()
                + self.self_mha.parameters() + self.src_mha.parameters()
                + self.ff.parameters())


class Decoder:
    def __init__(self, config: DecoderConfig, rng: RngStream):
        self.config = config
        d, v = config.d_model, config.vocab_size
        self.embed = Parameter(rng.normal((v + 1, d), scale=d ** -0.5), "dec.embed")
        self.blocks = [DecoderBlock(f"dec.b{i}", config, rng)
                       for i in range(config.n_blocks)]
        self.enc_ln = LayerNorm("dec.enc_ln", d)
        self.out_ln = LayerNorm("dec.out_ln", d)
        self.out = Linear("dec.out", d, config.n_classes, rng)

    def parameters(self) -> list[Parameter]:
        ps = [self.embed]
        for b in self.blocks:
            ps += b.parameters()
        return ps + self.enc_ln.parameters() + self.out_ln.parameters() + self.out.parameters()

    def _check_labels(self, labels) -> list[int]:
        labels = [int(y) for y in labels]
        for y in labels:
            if not 1 <= y <= self.config.vocab_size:
                raise ValueError(f"label {y} outside 1..{self.config.vocab_size}")
        return labels

    def normalized_encoder(self, enc_out) -> Tensor:
        return self.enc_ln(nm.as_tensor(enc_out))

    def forward(self, prefix, enc_out, source_bounds=None) -> Tensor:
        """Per-step label log-distributions for a teacher-forced prefix.

        Step l (1-based) consumes tokens (start, y_1..y_{l-1}) and, when
        ``source_bounds`` is given, attends only to encoder frames
        [0, source_bounds[l-1]).  Returns (len(prefix)+1, vocab+1) log-probs.
        """
        prefix = self._check_labels(prefix)
        enc = nm.as_tensor(enc_out)
        n_frames = enc.shape[0]
        if n_frames < 1:
            raise ValueError("encoder output is empty")
        tokens = [START_TOKEN] + prefix
        steps = len(tokens)

        if source_bounds is None:
            src_mask = full_mask(steps, n_frames)
        else:
            bounds = [int(b) for b in source_bounds]
            if len(bounds) != steps:
                raise ValueError("need one source bound per decoder step")
            if min(bounds) < 1:
                raise ValueError("empty source context: bound < 1")
            if max(bounds) > n_frames:
                raise ValueError("source bound exceeds encoder length")
            allow = np.arange(n_frames)[None, :] < np.asarray(bounds)[:, None]
            src_mask = AttentionMask(allow)

        z = nm.add(nm.take_rows(self.embed, tokens),
                   sinusoid_encoding(np.arange(steps), self.config.d_model))
        enc_normed = self.normalized_encoder(enc)
        self_mask = causal_mask(steps)
        for blk in self.blocks:
            zh = blk.ln1(z)
            z = nm.add(z, multi_head_attention(zh, zh, blk.self_mha, self_mask))
            z = nm.add(z, multi_head_attention(blk.ln2(z), enc_normed,
                                               blk.src_mha, src_mask))
            z = nm.add(z, blk.ff(blk.ln3(z), 0.0, None, False))
        return nm.log_softmax(self.out(self.out_ln(z)), axis=-1)

    def start_session(self, enc_out) -> "DecoderSession":
        return DecoderSession(self, enc_out)


class DecoderSession:
    """Incremental decoder evaluation with per-block cached states.

    Each ``step`` appends one input token, computes that step's output
    distribution with its own source-visibility bound, and caches the
    normalized hidden state for later self-attention.  ``fork`` snapshots the
    state so beam-search hypotheses can branch cheaply.
    """

    def __init__(self, decoder: Decoder, enc_out, _fork_from=None):
        self.decoder = decoder
        if _fork_from is not None:
            self.enc_normed = _fork_from.enc_normed
            self.cache = [list(c) for c in _fork_from.cache]
            self.n_steps = _fork_from.n_steps
            return
        self.enc_normed = decoder.normalized_encoder(nm.as_tensor(enc_out))
        self.cache: list[list[Tensor]] = [[] for _ in decoder.blocks]
        self.n_steps = 0

    def fork(self) -> "DecoderSession":
        return DecoderSession(self.decoder, None, _fork_from=self)

    def step(self, token: int, visible: int) -> np.ndarray:
        """Feed one input token; return the (vocab+1,) output log-probs."""
        dec = self.decoder
        n_frames = self.enc_normed.shape[0]
        if not 1 <= visible <= n_frames:
            raise ValueError(f"visible frame count {visible} outside 1..{n_frames}")
        if not 0 <= token <= dec.config.vocab_size:
            raise ValueError(f"token {token} outside embedding table")

        pos = sinusoid_encoding([self.n_steps], dec.config.d_model)
        z = nm.add(nm.take_rows(dec.embed, [token]), pos)
        enc_visible = self.enc_normed[:visible]
        for blk, cached in zip(dec.blocks, self.cache):
            zh = blk.ln1(z)
            keys = nm.concat(cached + [zh], axis=0) if cached else zh
            cached.append(zh)
            z = nm.add(z, multi_head_attention(zh, keys, blk.self_mha,
                                               full_mask(1, keys.shape[0])))
            z = nm.add(z, multi_head_attention(blk.ln2(z), enc_visible,
                                               blk.src_mha, full_mask(1, visible)))
            z = nm.add(z, blk.ff(blk.ln3(z), 0.0, None, False))
        self.n_steps += 1
        logp = nm.log_softmax(dec.out(dec.out_ln(z)), axis=-1)
        return logp.data[0]


def smoothed_nll(logp: Tensor, targets, smoothing: float) -> Tensor:
    """Label-smoothed negative log-likelihood summed over steps.

    The smoothing mass is spread uniformly over the non-target classes.
    """
    steps, n_classes = logp.shape
    targets = np.asarray([int(t) for t in targets])
    if len(targets) != steps:
        raise ValueError("one target per step required")
    picked = nm.sum_(nm.take_pairs(logp, np.arange(steps), targets))
    if smoothing == 0.0:
        return nm.mul(picked, -1.0)
    total = nm.sum_(logp)
    rest = nm.sub(total, picked)
    return nm.mul(nm.add(nm.mul(picked, 1.0 - smoothing),
                         nm.mul(rest, smoothing / (n_classes - 1))), -1.0)


def attention_loss(labels, enc_out, decoder: Decoder,
                   smoothing: float = 0.1) -> Tensor:
    """Teacher-forced cross entropy over (labels, eos) with label smoothing."""
    labels = decoder._check_labels(labels)
    if not labels:
        raise ValueError("label sequence must be nonempty")
    logp = decoder.forward(labels, enc_out)
    return smoothed_nll(logp, labels + [EOS_CLASS], smoothing)


def ta_loss(labels, enc_out, trigger_frames, decoder: Decoder,
            lookahead: int | None = None, smoothing: float = 0.1) -> Tensor:
    """Trigger-bounded decoder loss.

    Step l attends to encoder frames [0, min(trigger_l + 1 + lookahead, T));
    the final end-of-sequence step sees the whole sequence.  Triggers are
    0-based frames and must be strictly increasing.
    """
    labels = decoder._check_labels(labels)
    if not labels:
        raise ValueError("label sequence must be nonempty")
    triggers = [int(t) for t in trigger_frames]
    if len(triggers) != len(labels):
        raise ValueError("need one trigger frame per label")
    if any(b <= a for a, b in zip(triggers, triggers[1:])):
        raise ValueError("trigger frames must be strictly increasing")
    if lookahead is None:
        lookahead = decoder.config.decoder_lookahead
    enc = nm.as_tensor(enc_out)
    n_frames = enc.shape[0]
    bounds = [min(t + 1 + lookahead, n_frames) for t in triggers] + [n_frames]
    logp = decoder.forward(labels, enc, source_bounds=bounds)
    return smoothed_nll(logp, labels + [EOS_CLASS], smoothing)
