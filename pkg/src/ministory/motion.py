"""Transition clips between two keyframes.

Three parts: a frozen random-feature encoder that maps frames to compact
vectors, a small sequence model that turns the linear interpolation of the
endpoint vectors into per-frame embeddings, and a video decoder that runs
the image denoiser per frame (each frame's cross-attention context carries
its embedding) with one temporal attention block mixing token features
across frames.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    TransformerBlockParams,
    block_parameters,
    init_transformer_block,
    transformer_block,
)
from .diffusion import (
    DenoiserConfig,
    DenoiserParams,
    DiffusionSchedule,
    apply_prompt_dropout,
    cfg_epsilon,
    ddim_timesteps,
    denoiser_features,
    denoiser_head,
    denoiser_parameters,
    image_to_patches,
    init_denoiser,
)
from .rng import RngStream
from .tensor import (
    ContractError,
    DimensionError,
    Parameter,
    Tensor,
    add,
    add_broadcast,
    backward,
    concat,
    gather,
    linear,
    mean_all,
    mul,
    no_grad,
    reshape,
    scale,
    stack,
    sub,
    transpose,
    zero_grads,
)

import math

__all__ = [
    "EmbeddingSequence",
    "MotionModel",
    "PredictorParams",
    "SemanticEncoder",
    "VideoDecoderParams",
    "condition_context",
    "encode_frame",
    "encode_frames",
    "encoder_checksum",
    "encoder_parameters",
    "generate_transition",
    "hard_cut_baseline",
    "init_motion_model",
    "init_predictor",
    "init_semantic_encoder",
    "init_video_decoder",
    "interpolate_embeddings",
    "motion_parameters",
    "predict_transition_embeddings",
    "train_motion_model",
    "video_denoiser_forward",
]


# --- Frozen frame encoder ---------------------------------------------------


@dataclass
class SemanticEncoder:
    """Fixed random feature map from frames to vectors.

    Parameters are drawn once from a seeded stream and never handed to an
    optimizer; a frozen map into a well-spread vector space is all the
    downstream predictor needs.
    """

    patch_w: Tensor
    patch_b: Tensor
    pos_emb: Tensor
    blocks: list[TransformerBlockParams]
    out_w: Tensor
    out_b: Tensor
    patch: int = 4
    image_size: int = 16

    @property
    def embed_dim(self) -> int:
        return self.out_w.shape[1]

    @property
    def channels(self) -> int:
        return self.patch_w.shape[1]


def init_semantic_encoder(
    rng: RngStream, channels: int = 64, heads: int = 4, depth: int = 2,
    embed_dim: int = 64,
) -> SemanticEncoder:
    patch_dim = 4 * 4 * 3
    tokens = 16
    # wider than the trained nets: random features need enough spread to
    # keep distinct frames apart after mean pooling
    w = 0.2
    return SemanticEncoder(
        patch_w=Tensor(rng.child(0).normal((patch_dim, channels)) * w),
        patch_b=Tensor(np.zeros(channels, dtype=np.float32)),
        pos_emb=Tensor(rng.child(1).normal((tokens, channels)) * w),
        blocks=[
            init_transformer_block(channels, heads, rng.child(10 + i), w_scale=w)
            for i in range(depth)
        ],
        out_w=Tensor(rng.child(2).normal((channels, embed_dim)) * w),
        out_b=Tensor(np.zeros(embed_dim, dtype=np.float32)),
    )


def encoder_parameters(enc: SemanticEncoder) -> list[Parameter]:
    """Named encoder tensors, for checkpoints and checksums only.

    Never hand these to an optimizer; the encoder stays frozen.
    """
    out = [
        Parameter("enc.patch_w", enc.patch_w),
        Parameter("enc.patch_b", enc.patch_b),
        Parameter("enc.pos_emb", enc.pos_emb),
    ]
    for i, blk in enumerate(enc.blocks):
        out += block_parameters(blk, f"enc.block{i}")
    out += [Parameter("enc.out_w", enc.out_w), Parameter("enc.out_b", enc.out_b)]
    return out


def encoder_checksum(enc: SemanticEncoder) -> str:
    """Digest of every encoder tensor; training must leave it unchanged."""
    h = hashlib.sha256()
    for p in encoder_parameters(enc):
        h.update(p.name.encode())
        h.update(p.tensor.data.tobytes())
    return h.hexdigest()


def encode_frame(frame, enc: SemanticEncoder) -> np.ndarray:
    """One frame [16, 16, 3] -> one vector [embed_dim], deterministic."""
    img = np.asarray(frame, dtype=np.float32)
    if img.shape != (enc.image_size, enc.image_size, 3):
        raise DimensionError(
            f"expected a {enc.image_size}x{enc.image_size}x3 frame, got {img.shape}"
        )
    with no_grad():
        x = linear(image_to_patches(Tensor(img[None]), enc.patch),
                   enc.patch_w, enc.patch_b)
        x = add_broadcast(x, reshape(enc.pos_emb, (1,) + enc.pos_emb.shape))
        for blk in enc.blocks:
            x = transformer_block(x, blk)
        pooled = Tensor(x.data.mean(axis=1))
        out = linear(pooled, enc.out_w, enc.out_b)
    return out.data[0].copy()


def encode_frames(f_s, f_e, enc: SemanticEncoder) -> tuple[np.ndarray, np.ndarray]:
    """Two independent applications of encode_frame."""
    return encode_frame(f_s, enc), encode_frame(f_e, enc)


# --- Embedding sequences ----------------------------------------------------


_SEQUENCE_KINDS = ("interpolated", "predicted")


@dataclass
class EmbeddingSequence:
    """Per-frame embedding rows [L, D] tagged by how they were produced."""

    vectors: Tensor
    kind: str

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2:
            raise DimensionError(f"sequence must be [L, D], got {self.vectors.shape}")
        if self.vectors.shape[0] < 2:
            raise ContractError(f"a sequence needs L >= 2, got {self.vectors.shape[0]}")
        if self.kind not in _SEQUENCE_KINDS:
            raise ContractError(f"unknown sequence kind {self.kind!r}")

    @property
    def length(self) -> int:
        return self.vectors.shape[0]


def interpolate_embeddings(k_s, k_e, length: int) -> EmbeddingSequence:
    """Evenly spaced line from k_s to k_e; the endpoints are assigned, not
    recomputed, so rows 0 and L-1 equal the inputs bit for bit."""
    a = np.asarray(k_s, dtype=np.float32)
    b = np.asarray(k_e, dtype=np.float32)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"endpoint shapes differ: {a.shape} vs {b.shape}")
    if length < 2:
        raise ContractError(f"interpolation needs length >= 2, got {length}")
    w = np.arange(length, dtype=np.float64)[:, None] / (length - 1)
    rows = (a.astype(np.float64)[None]
            + w * (b.astype(np.float64) - a.astype(np.float64))[None])
    rows = rows.astype(np.float32)
    rows[0] = a
    rows[-1] = b
    return EmbeddingSequence(Tensor(rows), "interpolated")


# --- Sequence predictor -----------------------------------------------------


@dataclass
class PredictorParams:
    """Projection in, positional rows, self-attention blocks, projection out."""

    in_w: Tensor
    in_b: Tensor
    seq_emb: Tensor
    blocks: list[TransformerBlockParams]
    out_w: Tensor
    out_b: Tensor

    @property
    def l_max(self) -> int:
        return self.seq_emb.shape[0]


def init_predictor(
    rng: RngStream, embed_dim: int = 64, channels: int = 64, heads: int = 4,
    depth: int = 2, l_max: int = 16,
) -> PredictorParams:
    if l_max < 2:
        raise ContractError(f"l_max must be >= 2, got {l_max}")
    return PredictorParams(
        in_w=Tensor(rng.child(0).normal((embed_dim, channels)) * 0.02),
        in_b=Tensor(np.zeros(channels, dtype=np.float32)),
        seq_emb=Tensor(rng.child(1).normal((l_max, channels)) * 0.02),
        blocks=[
            init_transformer_block(channels, heads, rng.child(10 + i))
            for i in range(depth)
        ],
        # zero output projection: the fresh predictor emits the zero sequence
        out_w=Tensor(np.zeros((channels, embed_dim), dtype=np.float32)),
        out_b=Tensor(np.zeros(embed_dim, dtype=np.float32)),
    )


def predictor_parameters(p: PredictorParams) -> list[Parameter]:
    out = [
        Parameter("pred.in_w", p.in_w),
        Parameter("pred.in_b", p.in_b),
        Parameter("pred.seq_emb", p.seq_emb),
    ]
    for i, blk in enumerate(p.blocks):
        out += block_parameters(blk, f"pred.block{i}")
    out += [Parameter("pred.out_w", p.out_w), Parameter("pred.out_b", p.out_b)]
    return out


def predict_transition_embeddings(
    seq: EmbeddingSequence, p: PredictorParams
) -> EmbeddingSequence:
    """Refine an interpolated sequence into per-frame embeddings [L, D]."""
    length = seq.length
    if not 2 <= length <= p.l_max:
        raise ContractError(f"sequence length {length} outside [2, {p.l_max}]")
    if seq.vectors.shape[1] != p.in_w.shape[0]:
        raise DimensionError(
            f"sequence dim {seq.vectors.shape[1]} != projection in-dim {p.in_w.shape[0]}"
        )
    c = p.in_w.shape[1]
    x = linear(seq.vectors, p.in_w, p.in_b)
    x = add(x, gather(p.seq_emb, np.arange(length)))
    x = reshape(x, (1, length, c))
    for blk in p.blocks:
        x = transformer_block(x, blk)
    out = linear(reshape(x, (length, c)), p.out_w, p.out_b)
    return EmbeddingSequence(out, "predicted")


# --- Video decoder ----------------------------------------------------------


@dataclass
class VideoDecoderParams:
    """Frame-wise denoiser plus the only inter-frame coupling: one temporal
    block that attends across the L frames at each token position."""

    denoiser: DenoiserParams
    ctx_w: Tensor
    ctx_b: Tensor
    temporal: TransformerBlockParams


def init_video_decoder(
    config: DenoiserConfig, rng: RngStream, embed_dim: int = 64
) -> VideoDecoderParams:
    return VideoDecoderParams(
        denoiser=init_denoiser(config, rng.child(0)),
        ctx_w=Tensor(rng.child(1).normal((embed_dim, config.channels)) * 0.02),
        ctx_b=Tensor(np.zeros(config.channels, dtype=np.float32)),
        temporal=init_transformer_block(config.channels, config.heads, rng.child(2)),
    )


def condition_context(t_tokens: Tensor, p_i, w: Tensor, b: Tensor) -> Tensor:
    """Text rows [Nt, C] plus one projected embedding row -> [Nt+1, C].

    The projected row is always last; cross-attention reads the frame's
    embedding exactly there.
    """
    if t_tokens.ndim != 2 or t_tokens.shape[1] != w.shape[1]:
        raise DimensionError(
            f"text rows must be [Nt, {w.shape[1]}], got {t_tokens.shape}"
        )
    vec = p_i if isinstance(p_i, Tensor) else Tensor(np.asarray(p_i, dtype=np.float32))
    if vec.ndim != 1 or vec.shape[0] != w.shape[0]:
        raise DimensionError(f"embedding must be [{w.shape[0]}], got {vec.shape}")
    row = linear(reshape(vec, (1, vec.shape[0])), w, b)
    return concat([t_tokens, row], axis=0)


def _frame_contexts(
    prompt_ids: np.ndarray, p_seq: Tensor, dec: VideoDecoderParams
) -> Tensor:
    """Per-frame contexts [L, Nt+1, C] sharing the text rows."""
    ids = np.asarray(prompt_ids, dtype=np.int64).reshape(1, -1)
    text = dec.denoiser.prompt.embed(ids)
    text = reshape(text, (ids.shape[1], dec.denoiser.config.channels))
    d = p_seq.shape[1]
    rows = []
    for i in range(p_seq.shape[0]):
        p_i = reshape(gather(p_seq, np.array([i])), (d,))
        rows.append(condition_context(text, p_i, dec.ctx_w, dec.ctx_b))
    return stack(rows)


def video_denoiser_forward(
    dec: VideoDecoderParams, frames: Tensor, t, contexts: Tensor
) -> Tensor:
    """Noise estimate for all L frames of one clip.

    Per-frame passes are independent (self-attention stays within a frame,
    cross-attention reads that frame's context row); the temporal block then
    attends across the L frames at each token position, after which the
    shared head maps back to pixels.
    """
    feats = denoiser_features(dec.denoiser, frames, t, contexts)
    across = transpose(feats, (1, 0, 2))
    across = transformer_block(across, dec.temporal)
    return denoiser_head(dec.denoiser, transpose(across, (1, 0, 2)))


# --- Full model -------------------------------------------------------------


@dataclass
class MotionModel:
    encoder: SemanticEncoder
    predictor: PredictorParams
    decoder: VideoDecoderParams


def init_motion_model(
    rng: RngStream,
    config: DenoiserConfig | None = None,
    embed_dim: int = 64,
    l_max: int = 16,
) -> MotionModel:
    config = config if config is not None else DenoiserConfig()
    return MotionModel(
        encoder=init_semantic_encoder(
            rng.child(0), channels=config.channels, heads=config.heads,
            embed_dim=embed_dim,
        ),
        predictor=init_predictor(
            rng.child(1), embed_dim=embed_dim, channels=config.channels,
            heads=config.heads, l_max=l_max,
        ),
        decoder=init_video_decoder(config, rng.child(2), embed_dim=embed_dim),
    )


def motion_parameters(model: MotionModel) -> list[Parameter]:
    """Everything trainable: predictor, context projection, decoder.

    The encoder is deliberately absent; it stays frozen.
    """
    out = predictor_parameters(model.predictor)
    out += [
        Parameter("dec.ctx_w", model.decoder.ctx_w),
        Parameter("dec.ctx_b", model.decoder.ctx_b),
    ]
    out += denoiser_parameters(model.decoder.denoiser)
    out += block_parameters(model.decoder.temporal, "dec.temporal")
    return out


# --- Training ---------------------------------------------------------------


def _clip_loss(
    clip_frames: np.ndarray,
    prompt_ids: np.ndarray,
    k_s: np.ndarray,
    k_e: np.ndarray,
    model: MotionModel,
    sched: DiffusionSchedule,
    rng: RngStream,
    direct_regression: bool,
) -> Tensor:
    # draw order per clip is fixed: timestep, noise, conditioning dropout
    t = rng.randint_below(sched.timesteps)
    noise = rng.normal(clip_frames.shape)
    ids = apply_prompt_dropout(
        np.asarray(prompt_ids, dtype=np.int64).reshape(1, -1), rng,
        model.decoder.denoiser.prompt.null_id,
    )[0]

    length = clip_frames.shape[0]
    p_seq = predict_transition_embeddings(
        interpolate_embeddings(k_s, k_e, length), model.predictor
    ).vectors
    contexts = _frame_contexts(ids, p_seq, model.decoder)

    ab = float(sched.alpha_bars.data.astype(np.float64)[t])
    x_t = (np.sqrt(ab) * clip_frames.astype(np.float64)
           + np.sqrt(1.0 - ab) * noise).astype(np.float32)
    eps_hat = video_denoiser_forward(model.decoder, Tensor(x_t), t, contexts)
    if direct_regression:
        x0_hat = scale(sub(Tensor(x_t), scale(eps_hat, math.sqrt(1.0 - ab))),
                       1.0 / math.sqrt(ab))
        diff = sub(x0_hat, Tensor(clip_frames.astype(np.float32)))
    else:
        diff = sub(eps_hat, Tensor(noise))
    return mean_all(mul(diff, diff))


def train_motion_model(
    clips,
    prompts,
    model: MotionModel,
    sched: DiffusionSchedule,
    optimizer,
    steps: int,
    batch_size: int,
    rng: RngStream,
    direct_regression: bool = False,
) -> list[float]:
    """Noise-prediction training over transition clips; returns the loss trace.

    The frame encoder is frozen, so endpoint embeddings are computed once up
    front. Each step draws batch_size clips with replacement; each clip gets
    its own timestep and noise. Prompt dropout nulls only the text tokens;
    the per-frame embedding row always stays in the context.
    """
    n = len(clips)
    if n < 1 or batch_size < 1:
        raise ContractError("need a non-empty clip dataset and batch size")
    if len(prompts) != n:
        raise ContractError(f"got {n} clips but {len(prompts)} prompts")
    endpoint_k = [
        encode_frames(c.frames[0], c.frames[-1], model.encoder) for c in clips
    ]
    losses = []
    for step in range(steps):
        st = rng.child(step)
        idx = [st.randint_below(n) for _ in range(batch_size)]
        srng = st.child(1_000_003)
        total = None
        for pos, j in enumerate(idx):
            k_s, k_e = endpoint_k[j]
            term = _clip_loss(
                np.asarray(clips[j].frames, dtype=np.float32), prompts[j],
                k_s, k_e, model, sched, srng.child(pos), direct_regression,
            )
            total = term if total is None else add(total, term)
        total = scale(total, 1.0 / batch_size)
        backward(total)
        optimizer.step()
        zero_grads(optimizer.params)
        losses.append(float(total.data))
    return losses


# --- Sampling and baselines -------------------------------------------------


def generate_transition(
    f_s,
    f_e,
    prompt_ids,
    length: int,
    model: MotionModel,
    sched: DiffusionSchedule,
    steps: int = 50,
    s: float = 7.5,
    rng: RngStream | None = None,
    use_predictor: bool = True,
) -> np.ndarray:
    """Decode an L-frame transition between two keyframes, [L, 16, 16, 3].

    Encode endpoints, interpolate, refine with the predictor (skipped when
    use_predictor is false, which is the no-predictor baseline), then run
    the guided reverse process with the temporal block active. All frames
    share one starting noise tensor; the guidance null pass drops only the
    text rows and keeps each frame's embedding row.
    """
    if not 2 <= length <= model.predictor.l_max:
        raise ContractError(
            f"clip length {length} outside [2, {model.predictor.l_max}]"
        )
    if rng is None:
        rng = RngStream(0)
    ids = np.asarray(prompt_ids, dtype=np.int64).reshape(-1)
    k_s, k_e = encode_frames(f_s, f_e, model.encoder)
    seq = interpolate_embeddings(k_s, k_e, length)
    size = model.decoder.denoiser.config.image_size
    with no_grad():
        if use_predictor:
            seq = predict_transition_embeddings(seq, model.predictor)
        null_ids = np.full_like(ids, model.decoder.denoiser.prompt.null_id)
        ctx_cond = _frame_contexts(ids, seq.vectors, model.decoder)
        ctx_uncond = _frame_contexts(null_ids, seq.vectors, model.decoder)

        x = np.repeat(rng.normal((size, size, 3))[None], length, axis=0)
        ts = ddim_timesteps(sched.timesteps, steps)
        ab = sched.alpha_bars.data.astype(np.float64)
        for k in range(len(ts) - 1, 0, -1):
            t_hi, t_lo = int(ts[k]), int(ts[k - 1])
            frames_t = Tensor(x.astype(np.float32))
            eps_c = video_denoiser_forward(model.decoder, frames_t, t_hi, ctx_cond)
            eps_u = video_denoiser_forward(model.decoder, frames_t, t_hi, ctx_uncond)
            eps = cfg_epsilon(eps_u, eps_c, s).data.astype(np.float64)
            coef_x = math.sqrt(ab[t_lo] / ab[t_hi])
            coef_e = math.sqrt(1.0 - ab[t_lo]) - coef_x * math.sqrt(1.0 - ab[t_hi])
            x = (coef_x * x.astype(np.float64) + coef_e * eps).astype(np.float32)
    return x.astype(np.float32)


def hard_cut_baseline(f_s, f_e, length: int) -> np.ndarray:
    """Repeat the start frame for the first half, then the end frame."""
    if length < 2:
        raise ContractError(f"clip length must be >= 2, got {length}")
    a = np.asarray(f_s, dtype=np.float32)
    b = np.asarray(f_e, dtype=np.float32)
    if a.shape != b.shape:
        raise DimensionError(f"frame shapes differ: {a.shape} vs {b.shape}")
    half = length // 2
    return np.stack([a] * half + [b] * (length - half))
