"""CNN frontend and transformer/conformer encoder stacks.

A single implementation serves four attention plans: full-sequence,
restricted (rsa), chunked (csa, computed over the plan's expanded sequence)
and dual causal/non-causal (dcn).  For dcn the encoder runs every block on
two parallel streams that share all weights except normalization parameters;
self-attention interchanges keys/values between the streams per the plan's
source tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .attention import (MhaParams, RelPosParams, multi_head_attention,
                        relative_mha, sinusoid_encoding)
from .numerics import BatchNormState, Parameter, RngStream, Tensor
from .streaming import PLAN_KINDS, StreamPlan, build_plan

FRONTEND_KERNEL = 3
FRONTEND_STRIDE = 2
FRONTEND_MIN_INPUT = 7  # receptive field of the first output frame


@dataclass
class EncoderConfig:
    architecture: str = "transformer"       # "transformer" | "conformer"
    n_blocks: int = 4
    d_model: int = 32
    d_ff: int = 128
    n_heads: int = 4
    d_input: int = 8
    plan_kind: str = "full"
    lookahead: int = 0
    past_context: int | None = None
    chunk_size: int = 4
    conv_window: str = "symmetric"          # "symmetric" | "causal"
    conv_size: int | None = None            # defaults: symmetric 31, causal 17
    dropout: float = 0.1

    def __post_init__(self):
        if self.architecture not in ("transformer", "conformer"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.plan_kind not in PLAN_KINDS:
            raise ValueError(f"unknown plan kind {self.plan_kind!r}")
        if self.conv_window not in ("symmetric", "causal"):
            raise ValueError(f"unknown conv window {self.conv_window!r}")
        if self.conv_size is None:
            self.conv_size = 31 if self.conv_window == "symmetric" else 17
        if self.architecture == "conformer" and self.plan_kind != "full" \
                and self.conv_window != "causal":
            raise ValueError("streaming plans require a causal convolution window")

    @property
    def stream_names(self) -> tuple[str, ...]:
        if self.plan_kind == "dcn":
            return ("noncausal", "causal")
        return ("main",)


class LayerNorm:
    def __init__(self, name: str, dim: int):
        self.gain = Parameter(np.ones(dim), f"{name}.gain")
        self.bias = Parameter(np.zeros(dim), f"{name}.bias")

    def __call__(self, x) -> Tensor:
        return nm.layer_norm(x, self.gain, self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.gain, self.bias]


class Linear:
    def __init__(self, name: str, d_in: int, d_out: int, rng: RngStream):
        self.w = Parameter(nm.glorot(rng, (d_in, d_out), d_in, d_out), f"{name}.w")
        self.b = Parameter(np.zeros(d_out), f"{name}.b")

    def __call__(self, x) -> Tensor:
        return nm.add(nm.matmul(x, self.w), self.b)

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]


class FeedForward:
    """Two linear layers with ReLU in between; dropout after each layer."""

    def __init__(self, name: str, d_model: int, d_ff: int, rng: RngStream):
        self.lin1 = Linear(f"{name}.lin1", d_model, d_ff, rng)
        self.lin2 = Linear(f"{name}.lin2", d_ff, d_model, rng)

    def __call__(self, x, p_drop: float, rng, training: bool) -> Tensor:
        h = nm.dropout(nm.relu(self.lin1(x)), p_drop, rng, training)
        return nm.dropout(self.lin2(h), p_drop, rng, training)

    def parameters(self) -> list[Parameter]:
        return self.lin1.parameters() + self.lin2.parameters()


def _per_stream_norms(name: str, dim: int, streams: tuple[str, ...]) -> dict[str, LayerNorm]:
    if len(streams) == 1:
        return {streams[0]: LayerNorm(name, dim)}
    return {s: LayerNorm(f"{name}.{s}", dim) for s in streams}


def _other(streams: dict, s: str) -> str:
    return next(k for k in streams if k != s)


class ConvModule:
    """Pointwise conv + GLU, depthwise conv, batch norm, Swish, pointwise conv."""

    def __init__(self, name: str, d_model: int, window: str, size: int,
                 streams: tuple[str, ...], rng: RngStream):
        self.window = window
        self.pw1 = Linear(f"{name}.pw1", d_model, 2 * d_model, rng)
        self.kernel = Parameter(
            nm.glorot(rng, (size, d_model), size, size), f"{name}.depthwise")
        if len(streams) == 1:
            names = {streams[0]: name}
        else:
            names = {s: f"{name}.{s}" for s in streams}
        self.bn_gain = {s: Parameter(np.ones(d_model), f"{n}.bn.gain")
                        for s, n in names.items()}
        self.bn_bias = {s: Parameter(np.zeros(d_model), f"{n}.bn.bias")
                        for s, n in names.items()}
        self.bn_state = {s: BatchNormState(d_model) for s in streams}
        self.pw2 = Linear(f"{name}.pw2", d_model, d_model, rng)

    def __call__(self, x, stream: str, training: bool,
                 segments: list[tuple[int, int]] | None = None) -> Tensor:
        h = nm.glu(self.pw1(x))
        if segments is None:
            h = nm.depthwise_conv1d(h, self.kernel, self.window)
        else:
            parts = [nm.depthwise_conv1d(h[lo:hi], self.kernel, self.window)
                     for lo, hi in segments]
            h = nm.concat(parts, axis=0)
        h = nm.batch_norm(h, self.bn_gain[stream], self.bn_bias[stream],
                          self.bn_state[stream], training)
        return self.pw2(nm.swish(h))

    def parameters(self) -> list[Parameter]:
        ps = self.pw1.parameters() + [self.kernel] + self.pw2.parameters()
        for s in self.bn_gain:
            ps += [self.bn_gain[s], self.bn_bias[s]]
        return ps

    def buffers(self) -> dict[str, BatchNormState]:
        return self.bn_state


@dataclass
class BlockContext:
    """Per-utterance inputs shared by every block forward."""

    masks: dict
    sources: dict | None = None
    rel_offsets: np.ndarray | None = None
    segments: list[tuple[int, int]] | None = None
    training: bool = False
    rng: RngStream | None = None


class TransformerBlock:
    def __init__(self, name: str, cfg: EncoderConfig, rng: RngStream):
        streams = cfg.stream_names
        self.ln1 = _per_stream_norms(f"{name}.ln1", cfg.d_model, streams)
        self.ln2 = _per_stream_norms(f"{name}.ln2", cfg.d_model, streams)
        self.mha = MhaParams.create(f"{name}.mha", cfg.d_model, cfg.n_heads, rng)
        self.ff = FeedForward(f"{name}.ff", cfg.d_model, cfg.d_ff, rng)
        self.p_drop = cfg.dropout

    def forward(self, xs: dict, ctx: BlockContext) -> dict:
        normed = {s: self.ln1[s](x) for s, x in xs.items()}
        out = {}
        for s, x in xs.items():
            if ctx.sources is not None:
                att = multi_head_attention(
                    normed[s], normed[s], self.mha, ctx.masks[s],
                    alt_kv=normed[_other(xs, s)], kv_sources=ctx.sources[s])
            else:
                att = multi_head_attention(normed[s], normed[s], self.mha, ctx.masks[s])
            h = nm.add(x, nm.dropout(att, self.p_drop, ctx.rng, ctx.training))
            out[s] = nm.add(h, self.ff(self.ln2[s](h), self.p_drop, ctx.rng, ctx.training))
        return out

    def parameters(self) -> list[Parameter]:
        ps = []
        for norms in (self.ln1, self.ln2):
            for ln in norms.values():
                ps += ln.parameters()
        return ps + self.mha.parameters() + self.ff.parameters()

    def buffers(self) -> dict:
        return {}


class ConformerBlock:
    def __init__(self, name: str, cfg: EncoderConfig, rng: RngStream):
        streams = cfg.stream_names
        d = cfg.d_model
        self.ln1 = _per_stream_norms(f"{name}.ln1", d, streams)
        self.ln2 = _per_stream_norms(f"{name}.ln2", d, streams)
        self.ln3 = _per_stream_norms(f"{name}.ln3", d, streams)
        self.ln4 = _per_stream_norms(f"{name}.ln4", d, streams)
        self.ff1 = FeedForward(f"{name}.ff1", d, cfg.d_ff, rng)
        self.ff2 = FeedForward(f"{name}.ff2", d, cfg.d_ff, rng)
        self.mha = MhaParams.create(f"{name}.mha", d, cfg.n_heads, rng)
        self.rel = RelPosParams.create(f"{name}.relpos", d, cfg.n_heads, rng)
        self.conv = ConvModule(f"{name}.conv", d, cfg.conv_window, cfg.conv_size,
                               streams, rng)
        self.p_drop = cfg.dropout

    def forward(self, xs: dict, ctx: BlockContext) -> dict:
        half = {s: nm.add(x, nm.mul(self.ff1(self.ln1[s](x), self.p_drop,
                                             ctx.rng, ctx.training), 0.5))
                for s, x in xs.items()}
        normed = {s: self.ln2[s](x) for s, x in half.items()}
        out = {}
        for s in xs:
            if ctx.sources is not None:
                att = relative_mha(normed[s], self.mha, self.rel, ctx.masks[s],
                                   alt_kv=normed[_other(xs, s)],
                                   kv_sources=ctx.sources[s],
                                   offsets=ctx.rel_offsets)
            else:
                att = relative_mha(normed[s], self.mha, self.rel, ctx.masks[s],
                                   offsets=ctx.rel_offsets)
            h = nm.add(half[s], nm.dropout(att, self.p_drop, ctx.rng, ctx.training))
            conv = self.conv(self.ln3[s](h), s, ctx.training, ctx.segments)
            h = nm.add(h, nm.dropout(conv, self.p_drop, ctx.rng, ctx.training))
            out[s] = nm.add(h, nm.mul(self.ff2(self.ln4[s](h), self.p_drop,
                                               ctx.rng, ctx.training), 0.5))
        return out

    def parameters(self) -> list[Parameter]:
        ps = []
        for norms in (self.ln1, self.ln2, self.ln3, self.ln4):
            for ln in norms.values():
                ps += ln.parameters()
        return (ps + self.ff1.parameters() + self.ff2.parameters()
                + self.mha.parameters() + self.rel.parameters()
                + self.conv.parameters())

    def buffers(self) -> dict:
        return {f"conv.{s}": st for s, st in self.conv.buffers().items()}


class Frontend:
    """Two strided conv layers with ReLU: x4 temporal subsampling to d_model."""

    def __init__(self, name: str, d_input: int, d_model: int, rng: RngStream):
        k = FRONTEND_KERNEL
        self.lin1 = Linear(f"{name}.conv1", k * d_input, d_model, rng)
        self.lin2 = Linear(f"{name}.conv2", k * d_model, d_model, rng)

    @staticmethod
    def output_length(n_input: int) -> int:
        k, s = FRONTEND_KERNEL, FRONTEND_STRIDE
        t1 = (n_input - k) // s + 1
        return (t1 - k) // s + 1

    def _layer(self, x: Tensor, lin: Linear) -> Tensor:
        k, s = FRONTEND_KERNEL, FRONTEND_STRIDE
        t_in, d = x.shape
        t_out = (t_in - k) // s + 1
        idx = (s * np.arange(t_out)[:, None] + np.arange(k)[None, :]).ravel()
        windows = nm.reshape(nm.take_rows(x, idx), (t_out, k * d))
        return nm.relu(lin(windows))

    def __call__(self, features) -> Tensor:
        x = nm.as_tensor(features)
        if x.ndim != 2:
            raise ValueError("frontend expects a (frames, features) input")
        if x.shape[0] < FRONTEND_MIN_INPUT:
            raise ValueError(
                f"input of {x.shape[0]} frames is shorter than the frontend "
                f"receptive field ({FRONTEND_MIN_INPUT})")
        return self._layer(self._layer(x, self.lin1), self.lin2)

    def parameters(self) -> list[Parameter]:
        return self.lin1.parameters() + self.lin2.parameters()


@dataclass
class EncodeResult:
    output: Tensor                       # forwarded sequence (non-causal for dcn)
    causal_output: Tensor | None         # dcn only
    plan: StreamPlan
    n_frames: int


class Encoder:
    def __init__(self, config: EncoderConfig, rng: RngStream):
        self.config = config
        self.frontend = Frontend("enc.frontend", config.d_input, config.d_model, rng)
        cls = TransformerBlock if config.architecture == "transformer" else ConformerBlock
        self.blocks = [cls(f"enc.b{i}", config, rng) for i in range(config.n_blocks)]

    def parameters(self) -> list[Parameter]:
        ps = self.frontend.parameters()
        for b in self.blocks:
            ps += b.parameters()
        return ps

    def buffers(self) -> dict[str, BatchNormState]:
        out = {}
        for i, b in enumerate(self.blocks):
            for key, st in b.buffers().items():
                out[f"enc.b{i}.{key}"] = st
        return out

    def build_plan(self, n_frames: int) -> StreamPlan:
        cfg = self.config
        return build_plan(cfg.plan_kind, n_frames, lookahead=cfg.lookahead,
                          past_context=cfg.past_context, chunk_size=cfg.chunk_size)

    def encode(self, features, *, training: bool = False,
               rng: RngStream | None = None) -> EncodeResult:
        cfg = self.config
        if training and cfg.dropout > 0 and rng is None:
            raise ValueError("training-mode encode requires an rng stream")
        x0 = self.frontend(features)
        n = x0.shape[0]
        plan = self.build_plan(n)

        if cfg.architecture == "transformer":
            x0 = nm.add(x0, sinusoid_encoding(np.arange(n), cfg.d_model))

        ctx = BlockContext(masks={}, training=training, rng=rng)
        if plan.kind == "dcn":
            xs = {"noncausal": x0, "causal": x0}
            ctx.masks = {"noncausal": plan.noncausal_mask, "causal": plan.causal_mask}
            ctx.sources = {"noncausal": plan.noncausal_sources,
                           "causal": plan.causal_sources}
        elif plan.kind == "csa":
            orig = plan.expanded_orig
            xs = {"main": nm.take_rows(x0, orig)}
            ctx.masks = {"main": plan.mask}
            ctx.rel_offsets = orig[:, None] - orig[None, :]
            bounds = np.flatnonzero(np.diff(plan.expanded_chunk)) + 1
            edges = [0, *bounds.tolist(), len(orig)]
            ctx.segments = list(zip(edges[:-1], edges[1:]))
        else:
            xs = {"main": x0}
            ctx.masks = {"main": plan.mask}

        for block in self.blocks:
            xs = block.forward(xs, ctx)

        if plan.kind == "dcn":
            return EncodeResult(xs["noncausal"], xs["causal"], plan, n)
        if plan.kind == "csa":
            return EncodeResult(nm.take_rows(xs["main"], plan.forward_select),
                                None, plan, n)
        return EncodeResult(xs["main"], None, plan, n)


def kd_loss(student, teacher) -> Tensor:
    """Mean squared error pulling the causal (student) sequence toward the
    non-causal (teacher) sequence; the teacher is treated as a constant."""
    student, teacher = nm.as_tensor(student), nm.as_tensor(teacher)
    if student.shape != teacher.shape:
        raise ValueError("student/teacher shapes differ")
    diff = nm.sub(student, teacher.detach())
    return nm.mean(nm.mul(diff, diff))


def distinct_parameter_count(encoder: Encoder) -> int:
    return len({id(p) for p in encoder.parameters()})
