"""Pixel-space denoising diffusion with a small transformer backbone.

Training follows the standard noise-prediction recipe; sampling is the
deterministic eta = 0 variety over an evenly spaced subset of the training
schedule, with two forward passes per step combined by classifier-free
guidance. Every self-attention layer in the backbone can be routed through
batch-consistent attention at sampling time, which is the whole point: the
batch axis carries one story, and sharing sampled key/value tokens across
it keeps the depicted character stable from frame to frame.

Sampling-time self-attention always runs one image at a time so that the
consistent path at sampling rate zero reproduces the plain path bit for
bit (both reduce to the same per-image attention call sequence).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionWeights,
    TransformerBlockParams,
    block_parameters,
    cross_attention,
    init_transformer_block,
    self_attention,
)
from .consistent_attention import CsaConfig, TokenBatch, consistent_self_attention
from .rng import RngStream
from .tensor import (
    ContractError,
    DimensionError,
    Parameter,
    Tensor,
    add,
    add_broadcast,
    backward,
    gather,
    gelu,
    layernorm,
    linear,
    mean_all,
    mul,
    no_grad,
    reshape,
    scale,
    sub,
    transpose,
    zero_grads,
)

__all__ = [
    "DiffusionSchedule",
    "make_schedule",
    "forward_diffuse",
    "DenoiserConfig",
    "PromptEmbedding",
    "DenoiserParams",
    "init_denoiser",
    "denoiser_parameters",
    "parameter_count",
    "time_features",
    "image_to_patches",
    "patches_to_image",
    "denoiser_forward",
    "apply_prompt_dropout",
    "train_step",
    "train_denoiser",
    "cfg_epsilon",
    "ddim_timesteps",
    "ddim_sample",
]


@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise schedule tables; length-T vectors indexed by timestep."""

    timesteps: int
    betas: Tensor
    alphas: Tensor
    alpha_bars: Tensor

    def __post_init__(self) -> None:
        t = self.timesteps
        if t < 2:
            raise ContractError(f"schedule needs at least 2 timesteps, got {t}")
        for name, tab in (
            ("betas", self.betas),
            ("alphas", self.alphas),
            ("alpha_bars", self.alpha_bars),
        ):
            if tab.shape != (t,):
                raise DimensionError(f"{name} must have shape ({t},), got {tab.shape}")
        b = self.betas.data
        if not ((b > 0.0) & (b < 1.0)).all():
            raise ContractError("betas must lie strictly inside (0, 1)")
        ab = self.alpha_bars.data
        if not (np.diff(ab) < 0.0).all():
            raise ContractError("alpha_bars must be strictly decreasing")
        if ab[0] < 0.99:
            raise ContractError(f"alpha_bars[0] too far from 1: {ab[0]}")


def make_schedule(
    timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2
) -> DiffusionSchedule:
    """Linear beta ramp; cumulative products taken in float64 before storage."""
    if timesteps < 2:
        raise ContractError(f"schedule needs at least 2 timesteps, got {timesteps}")
    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return DiffusionSchedule(
        timesteps=timesteps,
        betas=Tensor(betas.astype(np.float32)),
        alphas=Tensor(alphas.astype(np.float32)),
        alpha_bars=Tensor(alpha_bars.astype(np.float32)),
    )


def forward_diffuse(x0: Tensor, t: int, noise: Tensor, sched: DiffusionSchedule) -> Tensor:
    """sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise."""
    if not 0 <= t < sched.timesteps:
        raise ContractError(f"timestep {t} outside [0, {sched.timesteps})")
    if x0.shape != noise.shape:
        raise DimensionError(f"noise shape {noise.shape} != image shape {x0.shape}")
    abar = float(sched.alpha_bars.data[t])
    return add(scale(x0, math.sqrt(abar)), scale(noise, math.sqrt(1.0 - abar)))


# --- Denoiser backbone -----------------------------------------------------


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 64
    heads: int = 4
    depth: int = 4
    patch_size: int = 4
    image_size: int = 16
    vocab_size: int = 23

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ContractError(
                f"patch {self.patch_size} must divide image size {self.image_size}"
            )
        if self.channels % self.heads != 0:
            raise ContractError(
                f"heads {self.heads} must divide channels {self.channels}"
            )
        if self.depth < 1 or self.vocab_size < 2:
            raise ContractError("depth >= 1 and vocab_size >= 2 required")

    @property
    def tokens(self) -> int:
        g = self.image_size // self.patch_size
        return g * g

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


@dataclass
class PromptEmbedding:
    """Token lookup table; row null_id conditions the unconditional pass."""

    table: Tensor
    null_id: int = 0

    def embed(self, prompt_ids: np.ndarray) -> Tensor:
        ids = np.asarray(prompt_ids, dtype=np.int64)
        if ids.ndim != 2:
            raise DimensionError(f"prompt ids must be [B, P], got {ids.shape}")
        rows = gather(self.table, ids.ravel())
        return reshape(rows, (ids.shape[0], ids.shape[1], self.table.shape[1]))


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    patch_w: Tensor
    patch_b: Tensor
    pos_emb: Tensor
    time_w1: Tensor
    time_b1: Tensor
    time_w2: Tensor
    time_b2: Tensor
    prompt: PromptEmbedding
    blocks: list[TransformerBlockParams] = field(default_factory=list)
    head_w: Tensor = None
    head_b: Tensor = None


def init_denoiser(config: DenoiserConfig, rng: RngStream) -> DenoiserParams:
    """Weights at scale 0.02; the output head starts at exactly zero.

    A zero head makes the freshly initialized model the literal zero
    denoiser, which the sampler analytics lean on, and is the usual safe
    start for residual prediction heads anyway.
    """
    c = config.channels
    blocks = [
        init_transformer_block(c, config.heads, rng.child(10 + i), with_cross=True)
        for i in range(config.depth)
    ]
    return DenoiserParams(
        config=config,
        patch_w=Tensor(rng.child(0).normal((config.patch_dim, c)) * 0.02),
        patch_b=Tensor(np.zeros(c, dtype=np.float32)),
        pos_emb=Tensor(rng.child(1).normal((config.tokens, c)) * 0.02),
        time_w1=Tensor(rng.child(2).normal((c, c)) * 0.02),
        time_b1=Tensor(np.zeros(c, dtype=np.float32)),
        time_w2=Tensor(rng.child(3).normal((c, c)) * 0.02),
        time_b2=Tensor(np.zeros(c, dtype=np.float32)),
        prompt=PromptEmbedding(Tensor(rng.child(4).normal((config.vocab_size, c)) * 0.02)),
        blocks=blocks,
        head_w=Tensor(np.zeros((c, config.patch_dim), dtype=np.float32)),
        head_b=Tensor(np.zeros(config.patch_dim, dtype=np.float32)),
    )


def denoiser_parameters(params: DenoiserParams) -> list[Parameter]:
    out = [
        Parameter("patch.w", params.patch_w),
        Parameter("patch.b", params.patch_b),
        Parameter("pos_emb", params.pos_emb),
        Parameter("time.w1", params.time_w1),
        Parameter("time.b1", params.time_b1),
        Parameter("time.w2", params.time_w2),
        Parameter("time.b2", params.time_b2),
        Parameter("prompt.table", params.prompt.table),
    ]
    for i, blk in enumerate(params.blocks):
        out += block_parameters(blk, f"block{i}")
    out += [Parameter("head.w", params.head_w), Parameter("head.b", params.head_b)]
    return out


def parameter_count(params: DenoiserParams) -> int:
    return sum(p.tensor.data.size for p in denoiser_parameters(params))


def time_features(t: np.ndarray, channels: int) -> np.ndarray:
    """Fixed sinusoidal features [B, channels] for integer timesteps."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = channels // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    feats = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if feats.shape[1] < channels:
        feats = np.concatenate([feats, np.zeros((len(t), 1))], axis=1)
    return feats.astype(np.float32)


def image_to_patches(images: Tensor, patch: int) -> Tensor:
    """[B, S, S, 3] -> [B, (S/patch)^2, patch*patch*3], row-major grid."""
    b, s = images.shape[0], images.shape[1]
    g = s // patch
    x = reshape(images, (b, g, patch, g, patch, 3))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (b, g * g, patch * patch * 3))


def patches_to_image(tokens: Tensor, patch: int, image_size: int) -> Tensor:
    b = tokens.shape[0]
    g = image_size // patch
    x = reshape(tokens, (b, g, g, patch, patch, 3))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (b, image_size, image_size, 3))


def _block_forward(x, blk, context, self_attn_fn, layer):
    h = layernorm(x, blk.ln1_gain, blk.ln1_bias)
    if self_attn_fn is None:
        a = self_attention(h, blk.attn)
    else:
        a = self_attn_fn(h, blk.attn, layer)
    x = add(x, a)
    hc = layernorm(x, blk.lnc_gain, blk.lnc_bias)
    x = add(x, cross_attention(hc, context, blk.cross))
    h2 = layernorm(x, blk.ln2_gain, blk.ln2_bias)
    h2 = linear(gelu(linear(h2, blk.mlp_w1, blk.mlp_b1)), blk.mlp_w2, blk.mlp_b2)
    return add(x, h2)


def denoiser_features(
    params: DenoiserParams,
    images: Tensor,
    t,
    context: Tensor,
    self_attn_fn=None,
) -> Tensor:
    """Token features [B, N, C] just before the output head.

    context is the cross-attention source, [B, Nc, C] with any Nc >= 1; the
    video decoder feeds frame-specific contexts here and mixes the returned
    tokens across frames before calling denoiser_head.
    """
    cfg = params.config
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise DimensionError(
            f"images must be [B, {cfg.image_size}, {cfg.image_size}, 3], got {images.shape}"
        )
    b = images.shape[0]
    if context.ndim != 3 or context.shape[0] != b or context.shape[2] != cfg.channels:
        raise DimensionError(
            f"context must be [{b}, Nc, {cfg.channels}], got {context.shape}"
        )
    t_vec = np.broadcast_to(np.asarray(t, dtype=np.int64).reshape(-1), (b,)) \
        if np.ndim(t) == 0 else np.asarray(t, dtype=np.int64)
    if t_vec.shape != (b,):
        raise DimensionError(f"t must be scalar or length {b}, got shape {np.shape(t)}")

    x = linear(image_to_patches(images, cfg.patch_size), params.patch_w, params.patch_b)
    x = add_broadcast(x, reshape(params.pos_emb, (1, cfg.tokens, cfg.channels)))
    temb = Tensor(time_features(t_vec, cfg.channels))
    temb = linear(gelu(linear(temb, params.time_w1, params.time_b1)),
                  params.time_w2, params.time_b2)
    x = add_broadcast(x, reshape(temb, (b, 1, cfg.channels)))
    for layer, blk in enumerate(params.blocks):
        x = _block_forward(x, blk, context, self_attn_fn, layer)
    return x


def denoiser_head(params: DenoiserParams, tokens: Tensor) -> Tensor:
    """Project token features back to a per-pixel noise estimate."""
    out = linear(tokens, params.head_w, params.head_b)
    return patches_to_image(out, params.config.patch_size, params.config.image_size)


def denoiser_forward(
    params: DenoiserParams,
    images: Tensor,
    t,
    prompt_ids: np.ndarray,
    self_attn_fn=None,
) -> Tensor:
    """Predict per-pixel noise for a batch of noisy images.

    t may be a scalar (shared timestep, the sampling case) or a length-B
    vector (per-example timesteps, the training case). self_attn_fn, when
    given, replaces the fused self-attention in every block; it receives
    (tokens [B, N, C], weights, layer_index).
    """
    cfg = params.config
    b = images.shape[0] if images.ndim else 0
    ids = np.asarray(prompt_ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[0] != b:
        raise DimensionError(f"prompt ids must be [{b}, P], got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ContractError("prompt id outside the vocabulary")
    context = params.prompt.embed(ids)
    return denoiser_head(
        params, denoiser_features(params, images, t, context, self_attn_fn)
    )


# --- Training --------------------------------------------------------------


def apply_prompt_dropout(
    prompt_ids: np.ndarray, rng: RngStream, null_id: int, p: float = 0.1
) -> np.ndarray:
    """Replace each example's prompt with the null token with probability p."""
    ids = np.array(prompt_ids, dtype=np.int64, copy=True)
    drops = rng.uniform(ids.shape[0]) < p
    ids[drops] = null_id
    return ids


def train_step(
    images: np.ndarray,
    prompt_ids: np.ndarray,
    sched: DiffusionSchedule,
    params: DenoiserParams,
    optimizer,
    rng: RngStream,
) -> float:
    """One noise-prediction step: sample t and noise, fit, apply the update.

    Draw order per call is fixed (timesteps, then noise, then conditioning
    dropout) so a seeded stream reproduces the step exactly.
    """
    x0 = np.asarray(images, dtype=np.float32)
    b = x0.shape[0]
    t_vec = np.array([rng.randint_below(sched.timesteps) for _ in range(b)])
    noise = rng.normal(x0.shape)
    ids = apply_prompt_dropout(prompt_ids, rng, params.prompt.null_id)

    ab = sched.alpha_bars.data.astype(np.float64)[t_vec]
    x_t = (np.sqrt(ab)[:, None, None, None] * x0
           + np.sqrt(1.0 - ab)[:, None, None, None] * noise).astype(np.float32)

    eps_hat = denoiser_forward(params, Tensor(x_t), t_vec, ids)
    diff = sub(eps_hat, Tensor(noise))
    loss = mean_all(mul(diff, diff))
    backward(loss)
    optimizer.step()
    zero_grads(optimizer.params)
    return float(loss.data)


def train_denoiser(
    images: np.ndarray,
    prompt_ids: np.ndarray,
    sched: DiffusionSchedule,
    params: DenoiserParams,
    optimizer,
    steps: int,
    batch_size: int,
    rng: RngStream,
) -> list[float]:
    """Minibatch loop over a fixed dataset; returns the loss trace."""
    n = len(images)
    if n < 1 or batch_size < 1:
        raise ContractError("need a non-empty dataset and batch size")
    losses = []
    for step in range(steps):
        st = rng.child(step)
        idx = np.array([st.randint_below(n) for _ in range(batch_size)])
        losses.append(
            train_step(images[idx], prompt_ids[idx], sched, params, optimizer,
                       st.child(1_000_003))
        )
    return losses


# --- Sampling --------------------------------------------------------------


def cfg_epsilon(eps_uncond: Tensor, eps_cond: Tensor, s: float) -> Tensor:
    """eps_uncond + s * (eps_cond - eps_uncond), combined in float64.

    The double-precision combine makes the s = 0 and s = 1 identities exact
    after the single rounding back to storage precision.
    """
    if eps_uncond.shape != eps_cond.shape:
        raise DimensionError(
            f"guidance operands differ: {eps_uncond.shape} vs {eps_cond.shape}"
        )
    u = eps_uncond.data.astype(np.float64)
    c = eps_cond.data.astype(np.float64)
    return Tensor((u + s * (c - u)).astype(np.float32))


def ddim_timesteps(total: int, steps: int) -> np.ndarray:
    """Evenly spaced increasing subset of [0, total), endpoints included."""
    if not 2 <= steps <= total:
        raise ContractError(f"steps must be in [2, {total}], got {steps}")
    ts = np.round(np.linspace(0.0, total - 1, steps)).astype(np.int64)
    if len(np.unique(ts)) != steps:
        raise ContractError(f"cannot space {steps} distinct steps over {total}")
    return ts


def _per_image_self_attention(tokens: Tensor, w: AttentionWeights, layer: int) -> Tensor:
    outs = [self_attention(Tensor(tokens.data[i]), w) for i in range(tokens.shape[0])]
    return Tensor(np.stack([o.data for o in outs]))


def _csa_self_attention_fn(csa: CsaConfig, step_stream: RngStream):
    def fn(tokens: Tensor, w: AttentionWeights, layer: int) -> Tensor:
        out = consistent_self_attention(
            TokenBatch(tokens), w, csa, rng=step_stream.child(layer)
        )
        return out.data

    return fn


def ddim_sample(
    prompts,
    sched: DiffusionSchedule,
    params: DenoiserParams,
    csa: CsaConfig | None = None,
    steps: int = 50,
    s: float = 5.0,
    rng: RngStream | None = None,
    csa_on_uncond: bool = True,
) -> np.ndarray:
    """Deterministic reverse process; returns images [B, 16, 16, 3].

    Each retained step runs the conditional pass then the null-prompt pass
    and mixes them with cfg_epsilon. With a consistent-attention config the
    self-attention of every block routes through the batch-wide consistent
    op; both guidance passes reuse the same per-(step, layer) stream, so
    they share the same sampled token indices. The state update is a single
    fused multiply-add per step computed in float64 and stored once.
    """
    ids = np.asarray(prompts, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[0] < 1:
        raise DimensionError(f"prompts must be [B, P], got {ids.shape}")
    if rng is None:
        rng = RngStream(0)
    b = ids.shape[0]
    cfg = params.config
    x = rng.normal((b, cfg.image_size, cfg.image_size, 3))
    null_ids = np.full_like(ids, params.prompt.null_id)
    ts = ddim_timesteps(sched.timesteps, steps)
    ab = sched.alpha_bars.data.astype(np.float64)
    csa_root = RngStream(csa.seed) if csa is not None else None

    with no_grad():
        for k in range(len(ts) - 1, 0, -1):
            t_hi, t_lo = int(ts[k]), int(ts[k - 1])
            if csa is not None:
                step_stream = csa_root.child(k)
                fn_cond = _csa_self_attention_fn(csa, step_stream)
                fn_uncond = fn_cond if csa_on_uncond else _per_image_self_attention
            else:
                fn_cond = fn_uncond = _per_image_self_attention
            eps_c = denoiser_forward(params, Tensor(x.astype(np.float32)), t_hi, ids,
                                     self_attn_fn=fn_cond)
            eps_u = denoiser_forward(params, Tensor(x.astype(np.float32)), t_hi,
                                     null_ids, self_attn_fn=fn_uncond)
            eps = cfg_epsilon(eps_u, eps_c, s).data.astype(np.float64)
            coef_x = math.sqrt(ab[t_lo] / ab[t_hi])
            coef_e = math.sqrt(1.0 - ab[t_lo]) - coef_x * math.sqrt(1.0 - ab[t_hi])
            x = (coef_x * x.astype(np.float64) + coef_e * eps).astype(np.float32)
    return x.astype(np.float32)
