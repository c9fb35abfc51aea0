"""The dual-branch counting network.

Skim branch: shallow encoder + tiny correlation decoder over the contextual
view, producing a per-frame confidence map from which instructive frames are
sampled.  Focus branch: full encoder over the instructive frames (pooled
into a guidance vector) and each fine-grained view, a long-short adaptive
guidance block, and a correlation decoder that emits the per-view density
map.  Density sums are counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, concat, relu, sigmoid, where_mask
from .data import AnnotatedSequence, ViewConfig, decompose
from .nn import (
    ParamStore,
    apply_mask,
    attention_similarity,
    conv1d_temporal,
    layer_norm,
    linear,
    max_pool_time,
    multi_head_self_attention,
)
from .sampling import InstructiveFrames, sample_instructive


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 16
    d: int = 64
    heads: int = 4
    ffn_mult: int = 2
    conv_k: int = 3
    encoder_blocks: int = 3  # focus encoder depth; skim encoder uses the first block count
    skim_blocks: int = 1
    lsag_blocks: int = 3  # B
    bottleneck_ratio: int = 4  # r
    downsample_rate: int = 4  # R
    context_len: int = 256  # N_S
    n_instructive: int = 32  # N_C
    view_len: int = 64  # N_F
    sampling: str = "top_nc"
    skim_enabled: bool = True
    lsag_enabled: bool = True
    feature_adaption_enabled: bool = True
    long_short_enabled: bool = True

    def view_config(self) -> ViewConfig:
        return ViewConfig(
            downsample_rate=self.downsample_rate,
            context_len=self.context_len,
            view_len=self.view_len,
        )


def full_config(d_in: int) -> ModelConfig:
    """Paper-scale hyperparameters (heavy; mostly for reference)."""
    return ModelConfig(d_in=d_in, d=512)


def desk_config(d_in: int) -> ModelConfig:
    """Small preset that trains in minutes on one CPU."""
    return ModelConfig(
        d_in=d_in,
        d=64,
        encoder_blocks=2,
        lsag_blocks=2,
        downsample_rate=2,
        context_len=128,
        n_instructive=8,
        view_len=32,
    )


class _Module:
    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def _add(self, name, shape, rng, **kwargs):
        self.store.create(f"{self.prefix}.{name}", shape, rng, **kwargs)

    def p(self, name) -> Tensor:
        return self.store[f"{self.prefix}.{name}"]


class LayerNormP(_Module):
    def __init__(self, store, prefix, rng, d):
        super().__init__(store, prefix)
        self._add("gamma", (d,), rng, init="ones")
        self._add("beta", (d,), rng, init="zeros")

    def __call__(self, x, mask):
        return layer_norm(x, self.p("gamma"), self.p("beta"), mask)


class Attention(_Module):
    def __init__(self, store, prefix, rng, d, heads):
        super().__init__(store, prefix)
        self.heads = heads
        for name in ("wq", "wk", "wv", "wo"):
            self._add(name, (d, d), rng, fan_in=d)

    def __call__(self, x, mask):
        return multi_head_self_attention(
            x, self.p("wq"), self.p("wk"), self.p("wv"), self.p("wo"), mask, self.heads
        )


class Conv(_Module):
    def __init__(self, store, prefix, rng, d_in, d_out, k):
        super().__init__(store, prefix)
        self._add("w", (k, d_in, d_out), rng, fan_in=k * d_in)
        self._add("b", (d_out,), rng, init="zeros")

    def __call__(self, x, mask):
        return conv1d_temporal(x, self.p("w"), self.p("b"), mask)


class FeedForward(_Module):
    def __init__(self, store, prefix, rng, d, mult):
        super().__init__(store, prefix)
        self._add("w1", (d, mult * d), rng, fan_in=d)
        self._add("b1", (mult * d,), rng, init="zeros")
        self._add("w2", (mult * d, d), rng, fan_in=mult * d)
        self._add("b2", (d,), rng, init="zeros")

    def __call__(self, x, mask):
        h = relu(linear(x, self.p("w1"), self.p("b1")))
        return apply_mask(linear(h, self.p("w2"), self.p("b2")), mask)


class TransformerLayer(_Module):
    """Post-norm transformer layer: attention + residual, FFN + residual."""

    def __init__(self, store, prefix, rng, d, heads, ffn_mult):
        super().__init__(store, prefix)
        self.attn = Attention(store, f"{prefix}.attn", rng, d, heads)
        self.ln1 = LayerNormP(store, f"{prefix}.ln1", rng, d)
        self.ffn = FeedForward(store, f"{prefix}.ffn", rng, d, ffn_mult)
        self.ln2 = LayerNormP(store, f"{prefix}.ln2", rng, d)

    def __call__(self, x, mask):
        x = self.ln1(x + self.attn(x, mask), mask)
        return self.ln2(x + self.ffn(x, mask), mask)


class EncoderBlock(_Module):
    """Temporal conv (short-range) then self-attention (long-range)."""

    def __init__(self, store, prefix, rng, d, heads, k):
        super().__init__(store, prefix)
        self.conv = Conv(store, f"{prefix}.conv", rng, d, d, k)
        self.ln1 = LayerNormP(store, f"{prefix}.ln1", rng, d)
        self.attn = Attention(store, f"{prefix}.attn", rng, d, heads)
        self.ln2 = LayerNormP(store, f"{prefix}.ln2", rng, d)

    def __call__(self, x, mask):
        x = self.ln1(x + relu(self.conv(x, mask)), mask)
        return self.ln2(x + self.attn(x, mask), mask)


class Encoder(_Module):
    """Per-frame linear projection followed by a stack of encoder blocks."""

    def __init__(self, store, prefix, rng, d_in, d, heads, k, n_blocks):
        super().__init__(store, prefix)
        self._add("proj.w", (d_in, d), rng, fan_in=d_in)
        self._add("proj.b", (d,), rng, init="zeros")
        self.blocks = [
            EncoderBlock(store, f"{prefix}.block{i}", rng, d, heads, k) for i in range(n_blocks)
        ]

    def __call__(self, frames, mask) -> Tensor:
        x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames))
        x = apply_mask(linear(x, self.p("proj.w"), self.p("proj.b")), mask)
        for block in self.blocks:
            x = block(x, mask)
        return x


class CorrelationDecoder(_Module):
    """Frame-correlation decoder: per-head attention similarity matrices,
    a linear projection of each frame's stacked similarity rows, one
    transformer layer, then a scalar head per frame (identity output)."""

    def __init__(self, store, prefix, rng, d, heads, t_len, ffn_mult):
        super().__init__(store, prefix)
        self.heads = heads
        self._add("sim.wq", (d, d), rng, fan_in=d)
        self._add("sim.wk", (d, d), rng, fan_in=d)
        self._add("proj.w", (heads * t_len, d), rng, fan_in=heads * t_len)
        self._add("proj.b", (d,), rng, init="zeros")
        self.tlayer = TransformerLayer(store, f"{prefix}.tlayer", rng, d, heads, ffn_mult)
        self._add("head.w", (d, 1), rng, fan_in=d)
        self._add("head.b", (1,), rng, init="zeros")

    def __call__(self, x, mask) -> Tensor:
        sim = attention_similarity(x, self.p("sim.wq"), self.p("sim.wk"), mask, self.heads)
        y = apply_mask(linear(sim, self.p("proj.w"), self.p("proj.b")), mask)
        y = self.tlayer(y, mask)
        out = linear(y, self.p("head.w"), self.p("head.b")).reshape(x.shape[0])
        return where_mask(mask, out, 0.0)


class Lsag(_Module):
    """Long-short adaptive guidance.

    Stage 1 (feature adaption): the guidance vector is repeated along time
    and concatenated to the view embedding; a bottleneck MLP with sigmoid
    output gates the channels, then a temporal conv with a shortcut mixes
    the gated features.  Stage 2: B blocks of self-attention (long-term)
    and temporal conv (short-term), each with residual + layer norm.
    """

    def __init__(self, store, prefix, rng, d, ratio, k, n_blocks, heads):
        super().__init__(store, prefix)
        hidden = max(2 * d // ratio, 1)
        self._add("adapt.w1", (2 * d, hidden), rng, fan_in=2 * d)
        self._add("adapt.b1", (hidden,), rng, init="zeros")
        self._add("adapt.w2", (hidden, d), rng, fan_in=hidden)
        self._add("adapt.b2", (d,), rng, init="zeros")
        # The gate starts as a feature-intersection kernel instead of neutral
        # noise: hidden triplets compute relu(x+z) - relu(x-z) - relu(z),
        # which equals min(x, z) for non-negative activations, so frames that
        # resemble the guidance vector open the gate from the first step and
        # training only has to refine the matching, not discover it.
        w1 = self.p("adapt.w1").data
        w2 = self.p("adapt.w2").data
        w1 *= 0.1
        w2 *= 0.1
        q = min(hidden // 3, d)
        beta = 4.0 / max(q, 1)
        for i in range(q):
            w1[i, 3 * i] += 1.0
            w1[d + i, 3 * i] += 1.0  # relu(x + z)
            w1[i, 3 * i + 1] += 1.0
            w1[d + i, 3 * i + 1] -= 1.0  # relu(x - z)
            w1[d + i, 3 * i + 2] += 1.0  # relu(z)
            w2[3 * i, :] += beta
            w2[3 * i + 1, :] -= beta
            w2[3 * i + 2, :] -= beta
        # Anti-identity conv start: with conv(x) ~= -beta*x the adaption
        # output is x*(1 - beta*a), which drives frames near the closed-gate
        # level to ~zero norm.  Per-frame layer norms downstream erase any
        # magnitude contrast, so this is the one visible channel: annihilated
        # frames renormalize to residual noise and lose the mutual similarity
        # coherence the correlation decoder counts, while frames matching the
        # guidance keep theirs.  beta sits so the closed-gate level (~0.45)
        # lands at the zero crossing and the open level (~0.64) survives.
        self.adapt_conv = Conv(store, f"{prefix}.adapt.conv", rng, d, d, k)
        w = self.adapt_conv.p("w").data
        w *= 0.3
        w[k // 2] -= 2.2 * np.eye(d, dtype=np.float32)
        self.blocks = []
        for i in range(n_blocks):
            attn = Attention(store, f"{prefix}.ls{i}.attn", rng, d, heads)
            ln1 = LayerNormP(store, f"{prefix}.ls{i}.ln1", rng, d)
            conv = Conv(store, f"{prefix}.ls{i}.conv", rng, d, d, k)
            ln2 = LayerNormP(store, f"{prefix}.ls{i}.ln2", rng, d)
            self.blocks.append((attn, ln1, conv, ln2))

    def __call__(self, x, z, mask, feature_adaption=True, long_short=True) -> Tensor:
        t_len, d = x.shape
        if z.shape != (d,):
            raise ValueError(f"guidance width mismatch: z {z.shape} vs embedding {x.shape}")
        if feature_adaption:
            z_rep = z.reshape(1, d) * np.ones((t_len, 1), dtype=x.dtype)
            x_cat = concat([x, z_rep], axis=1)  # (T, 2d)
            gate = sigmoid(linear(relu(linear(x_cat, self.p("adapt.w1"), self.p("adapt.b1"))), self.p("adapt.w2"), self.p("adapt.b2")))
            x = self.adapt_conv(x * gate, mask) + x
            x = apply_mask(x, mask)
        if long_short:
            for attn, ln1, conv, ln2 in self.blocks:
                x = ln1(x + attn(x, mask), mask)
                x = ln2(x + conv(x, mask), mask)
        return apply_mask(x, mask)


class ConvBlock(_Module):
    """Plain temporal CNN block, the stand-in when adaptive guidance is off."""

    def __init__(self, store, prefix, rng, d, k):
        super().__init__(store, prefix)
        self.conv = Conv(store, f"{prefix}.conv", rng, d, d, k)
        self.ln = LayerNormP(store, f"{prefix}.ln", rng, d)

    def __call__(self, x, mask):
        return self.ln(x + relu(self.conv(x, mask)), mask)


@dataclass
class SkimOutput:
    confidence: Tensor  # (N_S,), masked positions are exactly 0
    mask: np.ndarray
    embedding: Tensor  # (N_S x d) skim encoder features


@dataclass
class CountResult:
    count: float  # clamped at 0 for reporting
    raw_sum: float
    per_view_sums: list
    view_densities: list  # per-view np arrays (N_F,)
    skim_confidence: np.ndarray | None
    instructive: InstructiveFrames | None
    plan: object


class SkimFocusNet:
    """Both branches over one shared parameter store."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        c = cfg
        self.skim_encoder = Encoder(self.store, "skim.encoder", rng, c.d_in, c.d, c.heads, c.conv_k, c.skim_blocks)
        self.skim_decoder = CorrelationDecoder(self.store, "skim.decoder", rng, c.d, c.heads, c.context_len, c.ffn_mult)
        self.focus_encoder = Encoder(self.store, "focus.encoder", rng, c.d_in, c.d, c.heads, c.conv_k, c.encoder_blocks)
        self.lsag = Lsag(self.store, "focus.lsag", rng, c.d, c.bottleneck_ratio, c.conv_k, c.lsag_blocks, c.heads)
        self.plain_block = ConvBlock(self.store, "focus.plain", rng, c.d, c.conv_k)
        self.focus_decoder = CorrelationDecoder(self.store, "focus.decoder", rng, c.d, c.heads, c.view_len, c.ffn_mult)
        self.skim_calls = 0  # instrumentation: one skim pass per video expected

    # -- skim branch --------------------------------------------------------

    def skim_forward(self, ctx_features, mask) -> SkimOutput:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("empty view")
        ctx_features = np.asarray(ctx_features)
        if ctx_features.shape != (self.cfg.context_len, self.cfg.d_in):
            raise ValueError(
                f"skim input shape mismatch: {ctx_features.shape} vs "
                f"({self.cfg.context_len}, {self.cfg.d_in})"
            )
        self.skim_calls += 1
        embedding = self.skim_encoder(ctx_features, mask)
        confidence = self.skim_decoder(embedding, mask)
        return SkimOutput(confidence=confidence, mask=mask, embedding=embedding)

    # -- focus branch --------------------------------------------------------

    def encode(self, frames, mask) -> Tensor:
        return self.focus_encoder(frames, mask)

    def pool_guidance(self, x_c: Tensor, mask) -> Tensor:
        return max_pool_time(x_c, mask)

    def guidance_from(self, ctx_features, ctx_mask, sample_seed: int = 0):
        """Run the skim branch once and pool guidance from the instructive
        frames.  Returns (z, skim_output, instructive_frames)."""
        skim_out = self.skim_forward(ctx_features, ctx_mask)
        instructive = sample_instructive(
            skim_out.confidence.data,
            skim_out.mask,
            np.asarray(ctx_features),
            self.cfg.sampling,
            self.cfg.n_instructive,
            seed=sample_seed,
        )
        c_mask = np.ones(len(instructive.indices), dtype=bool)
        x_c = self.encode(instructive.features, c_mask)
        z = self.pool_guidance(x_c, c_mask)
        return z, skim_out, instructive

    def zero_guidance(self) -> Tensor:
        return Tensor(np.zeros(self.cfg.d, dtype=np.float32))

    def view_density(self, view_features, view_mask, z: Tensor) -> Tensor:
        """Density map for one fine-grained view under guidance z."""
        x_f = self.encode(view_features, view_mask)
        if self.cfg.lsag_enabled:
            x_cf = self.lsag(
                x_f,
                z,
                view_mask,
                feature_adaption=self.cfg.feature_adaption_enabled,
                long_short=self.cfg.long_short_enabled,
            )
        else:
            x_cf = self.plain_block(x_f, view_mask)
        return self.focus_decoder(x_cf, view_mask)


def gather_view(seq: AnnotatedSequence, indices, mask) -> np.ndarray:
    """Raw-input rows for a view; padded rows are zeros."""
    rows = np.zeros((len(indices), seq.d_in), dtype=np.float32)
    rows[mask] = seq.features[np.asarray(indices)[mask]]
    return rows


def count_video(
    model: SkimFocusNet,
    seq: AnnotatedSequence,
    mode: str = "standard",
    exemplar: AnnotatedSequence | None = None,
    sample_seed: int = 0,
    skim_per_view: bool = False,
) -> CountResult:
    """Full-video inference: skim once, reuse guidance across all M views,
    sum the per-view density maps, clamp the reported count at 0.

    In specified mode the skim branch reads the exemplar's contextual view
    instead of the video's own.  skim_per_view=True re-runs the skim pass
    for every view (a deliberately wasteful baseline for efficiency
    comparisons only).
    """
    if mode not in ("standard", "specified"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "specified" and exemplar is None:
        raise ValueError("missing exemplar")

    view_cfg = model.cfg.view_config()
    plan = decompose(seq, view_cfg)
    source = exemplar if mode == "specified" else seq
    src_plan = decompose(source, view_cfg) if source is not seq else plan
    ctx_rows = gather_view(source, src_plan.contextual_indices, src_plan.pad_mask_context)

    skim_conf = None
    instructive = None
    if not model.cfg.skim_enabled:
        z = model.zero_guidance()
    elif not skim_per_view:
        z, skim_out, instructive = model.guidance_from(ctx_rows, src_plan.pad_mask_context, sample_seed)
        skim_conf = skim_out.confidence.data.copy()

    per_view_sums, view_densities = [], []
    for indices, mask in zip(plan.fine_views, plan.pad_mask_fine):
        if skim_per_view and model.cfg.skim_enabled:
            z, skim_out, instructive = model.guidance_from(ctx_rows, src_plan.pad_mask_context, sample_seed)
            skim_conf = skim_out.confidence.data.copy()
        rows = gather_view(seq, indices, mask)
        density = model.view_density(rows, mask, z)
        values = density.data
        view_densities.append(values.copy())
        per_view_sums.append(float(values[mask].sum()))

    raw_sum = float(sum(per_view_sums))
    return CountResult(
        count=max(0.0, raw_sum),
        raw_sum=raw_sum,
        per_view_sums=per_view_sums,
        view_densities=view_densities,
        skim_confidence=skim_conf,
        instructive=instructive,
        plan=plan,
    )
