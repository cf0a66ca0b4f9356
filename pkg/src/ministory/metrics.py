"""Evaluation metrics for generated batches and clips.

Similarity metrics live in the hand-built identity-feature space; distance
metrics are plain per-pixel L2. Clip metrics accept either a TransitionClip
or a raw [L, 16, 16, 3] array, so they apply equally to dataset clips and
sampler output.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import (
    ACCESSORIES,
    ACTIVITIES,
    HUES,
    IMAGE_SIZE,
    SHAPES,
    CharacterIdentity,
    SceneSpec,
    TransitionClip,
    decode_prompt,
    identity_feature,
    pose_statistics,
    render_scene,
)
from .tensor import ContractError, DimensionError

__all__ = [
    "MetricReport",
    "character_similarity",
    "classify_attributes",
    "feature_cosine",
    "first_frame_distance",
    "first_frame_similarity",
    "frames_distance",
    "frames_similarity",
    "pixel_distance",
    "prompt_adherence",
]


# --- Report container -------------------------------------------------------


@dataclass
class MetricReport:
    """Named scalar results plus per-item rows and run metadata.

    Keys containing "similarity" must lie in [-1, 1]; keys containing
    "distance" must be non-negative.
    """

    values: dict[str, float]
    breakdown: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, v in self.values.items():
            v = float(v)
            if not np.isfinite(v):
                raise ContractError(f"metric {name!r} is not finite: {v}")
            if "similarity" in name and not -1.0 <= v <= 1.0:
                raise ContractError(f"similarity {name!r} outside [-1, 1]: {v}")
            if "distance" in name and v < 0.0:
                raise ContractError(f"distance {name!r} is negative: {v}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


# --- Shared helpers ---------------------------------------------------------


def _as_image(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise DimensionError(f"expected a {IMAGE_SIZE}x{IMAGE_SIZE}x3 image, got {a.shape}")
    return a


def _clip_frames(clip) -> np.ndarray:
    frames = clip.frames if isinstance(clip, TransitionClip) else np.asarray(clip)
    if frames.ndim != 4 or frames.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise DimensionError(f"expected [L, {IMAGE_SIZE}, {IMAGE_SIZE}, 3], got {frames.shape}")
    if frames.shape[0] < 2:
        raise ContractError(f"clip metrics need at least 2 frames, got {frames.shape[0]}")
    return frames.astype(np.float64)


def feature_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity clamped to [-1, 1]; identical inputs give exactly 1."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"cosine operands differ: {a.shape} vs {b.shape}")
    if np.array_equal(a, b):
        return 1.0
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def pixel_distance(a, b) -> float:
    """Mean over pixels of the per-pixel Euclidean gap across channels."""
    a, b = _as_image(a), _as_image(b)
    return float(np.mean(np.sqrt(((a - b) ** 2).sum(axis=-1))))


# --- Batch metrics ----------------------------------------------------------


def character_similarity(images) -> float:
    """Mean pairwise identity-feature cosine over all unordered pairs."""
    imgs = [_as_image(i) for i in images]
    if len(imgs) < 2:
        raise ContractError(f"need at least 2 images, got {len(imgs)}")
    feats = [identity_feature(i) for i in imgs]
    pairs = [feature_cosine(fa, fb) for fa, fb in itertools.combinations(feats, 2)]
    return float(np.mean(pairs))


# Attribute classification compares against one canonical render per
# (identity, activity) pair. The feature + pose vector is exactly
# background-invariant, so background-0 references cover every scene.
_reference_attrs: list[tuple[str, str, str, str]] | None = None
_reference_vectors: np.ndarray | None = None


def _classification_vector(image: np.ndarray) -> np.ndarray:
    feat = identity_feature(image)
    cx, cy, sa = pose_statistics(image)
    pose = np.array(
        [(cx - 8.0) / 4.0, (cy - 8.0) / 4.0, (sa - 5.6) / 1.5], dtype=np.float64
    )
    return np.concatenate([feat.astype(np.float64), pose])


def _references() -> tuple[list[tuple[str, str, str, str]], np.ndarray]:
    global _reference_attrs, _reference_vectors
    if _reference_vectors is None:
        attrs, vecs = [], []
        for hue, shape, acc in itertools.product(HUES, SHAPES, ACCESSORIES):
            for act in ACTIVITIES:
                spec = SceneSpec(CharacterIdentity(hue, shape, acc), act, 0)
                attrs.append((hue, shape, acc, act))
                vecs.append(_classification_vector(render_scene(spec)))
        _reference_attrs = attrs
        _reference_vectors = np.stack(vecs)
    return _reference_attrs, _reference_vectors


def classify_attributes(image) -> tuple[str, str, str, str]:
    """Nearest canonical render; returns (hue, shape, accessory, activity)."""
    attrs, vectors = _references()
    v = _classification_vector(_as_image(image))
    idx = int(np.argmin(((vectors - v) ** 2).sum(axis=1)))
    return attrs[idx]


def prompt_adherence(images, prompts) -> float:
    """Fraction of prompted attributes recovered from each image, averaged.

    Each prompt must decode to (hue, shape, accessory, activity) words; the
    image's attributes come from classify_attributes.
    """
    imgs = list(images)
    toks = list(prompts)
    if len(imgs) != len(toks):
        raise ContractError(f"got {len(imgs)} images but {len(toks)} prompts")
    if not imgs:
        raise ContractError("need at least 1 image")
    slots = (HUES, SHAPES, ACCESSORIES, ACTIVITIES)
    scores = []
    for img, tok in zip(imgs, toks):
        words = decode_prompt(tuple(int(t) for t in tok))
        if len(words) != 4 or any(w not in slot for w, slot in zip(words, slots)):
            raise ContractError(f"prompt {words!r} does not name scene attributes")
        got = classify_attributes(img)
        scores.append(np.mean([g == w for g, w in zip(got, words)]))
    return float(np.mean(scores))


# --- Clip metrics -----------------------------------------------------------


def first_frame_similarity(clip) -> float:
    """Mean feature cosine between frame 0 and every later frame."""
    frames = _clip_frames(clip)
    f0 = identity_feature(frames[0])
    sims = [feature_cosine(f0, identity_feature(f)) for f in frames[1:]]
    return float(np.mean(sims))


def frames_similarity(clip) -> float:
    """Mean feature cosine over consecutive frame pairs."""
    frames = _clip_frames(clip)
    feats = [identity_feature(f) for f in frames]
    sims = [feature_cosine(a, b) for a, b in zip(feats, feats[1:])]
    return float(np.mean(sims))


def first_frame_distance(clip) -> float:
    """Mean pixel distance between frame 0 and every later frame."""
    frames = _clip_frames(clip)
    return float(np.mean([pixel_distance(frames[0], f) for f in frames[1:]]))


def frames_distance(clip) -> float:
    """Mean pixel distance over consecutive frame pairs."""
    frames = _clip_frames(clip)
    dists = [pixel_distance(a, b) for a, b in zip(frames, frames[1:])]
    return float(np.mean(dists))
