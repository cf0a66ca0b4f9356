"""Batch-consistent self-attention over a story of token grids.

Each image in a batch attends not only to its own tokens but also to a
random sample of tokens drawn from the other images in a sliding window
over the batch axis. Keys and values come from the paired set
[sampled; own]; queries are the image's own tokens, unchanged. The same
projection weights as plain self-attention are reused, so the mechanism
adds no parameters and can be switched on at sampling time only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .attention import AttentionWeights, scaled_dot_product_attention
from .rng import RngStream
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    concat,
    gather,
    no_grad,
)

import numpy as np

__all__ = [
    "CsaConfig",
    "TokenBatch",
    "SampledTokens",
    "CsaInstrumentation",
    "instrumentation",
    "rand_sample",
    "build_paired_tokens",
    "consistent_self_attention",
    "window_coverage",
]


@dataclass(frozen=True)
class CsaConfig:
    """Knobs for batch-consistent attention.

    sampling_rate: fraction of the window's token pool mixed into K/V.
    tile_size: window length along the batch axis; clamped to the batch
        size at call time.
    include_self: whether an image's own tokens may be sampled for it.
    per_image_sampling: one shared draw per window (false) or an
        independent draw per image (true).
    seed: base stream seed used when no stream is passed at call time.
    """

    sampling_rate: float = 0.5
    tile_size: int = 4
    include_self: bool = True
    per_image_sampling: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.sampling_rate <= 1.0:
            raise ContractError(
                f"sampling_rate must lie in [0, 1], got {self.sampling_rate}"
            )
        if self.tile_size < 1:
            raise ContractError(f"tile_size must be >= 1, got {self.tile_size}")


@dataclass
class TokenBatch:
    """A batch of token grids, layout (batch, tokens, channels)."""

    data: Tensor

    def __post_init__(self) -> None:
        if self.data.data.ndim != 3:
            raise DimensionError(
                f"token batch must be rank 3 (batch, tokens, channels), "
                f"got shape {self.data.shape}"
            )
        b, n, _ = self.data.shape
        if b < 1 or n < 1:
            raise ContractError(
                f"token batch needs at least one image and one token, "
                f"got shape {self.data.shape}"
            )

    @property
    def batch_size(self) -> int:
        return self.data.shape[0]

    @property
    def tokens_per_image(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class SampledTokens:
    """Rows drawn from a pool, with their provenance.

    source_indices holds (image_index, token_index) pairs aligned with the
    rows of `tokens`; indices are unique because sampling is without
    replacement.
    """

    tokens: Tensor
    source_indices: list[tuple[int, int]]

    def __post_init__(self) -> None:
        if self.tokens.data.ndim != 2:
            raise DimensionError(
                f"sampled tokens must be rank 2, got shape {self.tokens.shape}"
            )
        if self.tokens.shape[0] != len(self.source_indices):
            raise ContractError(
                f"{self.tokens.shape[0]} rows but "
                f"{len(self.source_indices)} source indices"
            )

    @property
    def count(self) -> int:
        return self.tokens.shape[0]


@dataclass
class CsaInstrumentation:
    """Counters for the memory-scaling argument.

    max_paired_tokens is the largest K/V row count seen by any single
    attention call; it depends on (tile, tokens-per-image, rate) but never
    on how long the story is.
    """

    attention_calls: int = 0
    window_count: int = 0
    max_paired_tokens: int = 0

    def reset(self) -> None:
        self.attention_calls = 0
        self.window_count = 0
        self.max_paired_tokens = 0

    def record_call(self, paired_rows: int) -> None:
        self.attention_calls += 1
        self.max_paired_tokens = max(self.max_paired_tokens, paired_rows)


instrumentation = CsaInstrumentation()


def sample_count(rate: float, pool_size: int) -> int:
    """floor(rate * pool_size), guarded against float round-down."""
    return int(rate * pool_size + 1e-9)


def rand_sample(
    pool: Tensor,
    rate: float,
    rng: RngStream,
    row_labels: list[tuple[int, int]] | None = None,
) -> SampledTokens:
    """Draw floor(rate * pool_size) distinct rows from the pool.

    Rows come out in Fisher-Yates shuffle order, so the draw is a uniform
    sample without replacement and fully determined by the stream state.
    row_labels maps pool rows to (image_index, token_index) provenance;
    when omitted, rows are labelled as image 0.
    """
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"rate must lie in [0, 1], got {rate}")
    if pool.data.ndim != 2:
        raise DimensionError(f"pool must be rank 2, got shape {pool.shape}")
    pool_size = pool.shape[0]
    if row_labels is None:
        row_labels = [(0, i) for i in range(pool_size)]
    if len(row_labels) != pool_size:
        raise ContractError(
            f"{pool_size} pool rows but {len(row_labels)} labels"
        )
    count = sample_count(rate, pool_size)
    chosen = rng.partial_shuffle(pool_size, count)
    if count == 0:
        tokens = Tensor(np.zeros((0, pool.shape[1]), dtype=np.float32))
    else:
        tokens = gather(pool, chosen)
    return SampledTokens(tokens, [row_labels[i] for i in chosen])


def build_paired_tokens(own: Tensor, sampled: SampledTokens) -> Tensor:
    """K/V source for one image: sampled rows first, then its own tokens."""
    if own.data.ndim != 2:
        raise DimensionError(f"own tokens must be rank 2, got {own.shape}")
    if sampled.count == 0:
        return own
    if sampled.tokens.shape[1] != own.shape[1]:
        raise DimensionError(
            f"channel mismatch: sampled {sampled.tokens.shape} vs own {own.shape}"
        )
    return concat([sampled.tokens, own], axis=0)


def window_coverage(b: int, w_eff: int) -> list[int]:
    """How many sliding windows of length w_eff cover each of b positions.

    coverage[i] counts window starts t with t <= i < t + w_eff, which
    closes to min(i, b - w_eff, w_eff - 1, b - 1 - i) + 1.
    """
    if w_eff < 1 or w_eff > b:
        raise ContractError(
            f"window length must lie in [1, batch]; got w_eff={w_eff}, b={b}"
        )
    return [min(i, b - w_eff, w_eff - 1, b - 1 - i) + 1 for i in range(b)]


def consistent_self_attention(
    batch: TokenBatch,
    w: AttentionWeights,
    cfg: CsaConfig,
    rng: RngStream | None = None,
) -> TokenBatch:
    """Attend each image over [sampled window tokens; its own tokens].

    Slides a window of w_eff = min(tile_size, B) images along the batch.
    Every window draws its sample from the union of the window's tokens
    through the substream child(rng, window_index); per-image draws (used
    when per_image_sampling is set, and forced when include_self is off,
    since pools then differ per image) chain a further child keyed by the
    global image index. Window outputs are accumulated per image and
    averaged by coverage count in float64, so where window contents agree
    the average is exact.

    Forward-only: outputs do not join the autodiff graph.
    """
    b = batch.batch_size
    n = batch.tokens_per_image
    if batch.channels != w.channels:
        raise DimensionError(
            f"batch channels {batch.channels} do not match "
            f"projection channels {w.channels}"
        )
    if rng is None:
        rng = RngStream(cfg.seed)
    w_eff = min(cfg.tile_size, b)

    accum = np.zeros((b, n, w.channels), dtype=np.float64)
    count = np.zeros(b, dtype=np.int64)
    with no_grad():
        for window_index, t in enumerate(range(b - w_eff + 1)):
            instrumentation.window_count += 1
            wrng = rng.child(window_index)
            tile_images = list(range(t, t + w_eff))
            shared = None
            if cfg.include_self and not cfg.per_image_sampling:
                pool, labels = _window_pool(batch, tile_images, exclude=None)
                shared = rand_sample(pool, cfg.sampling_rate, wrng, labels)
            for i in tile_images:
                if shared is not None:
                    sampled = shared
                else:
                    exclude = None if cfg.include_self else i
                    pool, labels = _window_pool(batch, tile_images, exclude)
                    sampled = rand_sample(
                        pool, cfg.sampling_rate, wrng.child(i), labels
                    )
                own = Tensor(batch.data.data[i])
                paired = build_paired_tokens(own, sampled)
                instrumentation.record_call(paired.shape[0])
                out = scaled_dot_product_attention(own, paired, paired, w)
                accum[i] += out.data.astype(np.float64)
                count[i] += 1
    averaged = (accum / count[:, None, None]).astype(np.float32)
    return TokenBatch(Tensor(averaged))


def _window_pool(
    batch: TokenBatch, tile_images: list[int], exclude: int | None
) -> tuple[Tensor, list[tuple[int, int]]]:
    """Union of the window's tokens, image-major, optionally skipping one."""
    n = batch.tokens_per_image
    members = [j for j in tile_images if j != exclude]
    labels = [(j, k) for j in members for k in range(n)]
    if members:
        rows = batch.data.data[members].reshape(len(members) * n, -1)
    else:
        rows = np.zeros((0, batch.channels), dtype=np.float32)
    return Tensor(rows), labels
