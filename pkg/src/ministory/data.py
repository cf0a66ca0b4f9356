"""Procedural character scenes: a closed world of flat-shaded sprites.

A character is (body hue, shape, accessory); a scene adds an activity
(which maps to a pose: offset, rotation, scale) and a background tint.
Rendering is a pure function of the scene description, rasterized at
16x16 with 4x4 supersampling and hard per-pixel labels, so palette
colors stay exact and region masks are recoverable from pixels alone.

The module also provides the hand-designed feature extractors used as
measurement oracles: they share no parameters with any trained model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import RngStream
from .tensor import ContractError

__all__ = [
    "HUES",
    "SHAPES",
    "ACCESSORIES",
    "ACTIVITIES",
    "VOCABULARY",
    "NULL_TOKEN_ID",
    "PROMPT_LENGTH",
    "word_to_id",
    "encode_prompt",
    "decode_prompt",
    "prompt_words",
    "CharacterIdentity",
    "SceneSpec",
    "ImageExample",
    "TransitionClip",
    "POSES",
    "pose_for_activity",
    "render_scene",
    "render_scene_labels",
    "render_pose",
    "make_image_dataset",
    "make_transition_clip",
    "make_transition_dataset",
    "identity_feature",
    "pose_statistics",
]

IMAGE_SIZE = 16
PROMPT_LENGTH = 4

HUES = ("red", "orange", "yellow", "green", "cyan", "blue", "purple", "magenta")
SHAPES = ("circle", "square", "triangle")
ACCESSORIES = ("hat", "plain", "scarf")
ACTIVITIES = (
    "standing",
    "walking",
    "running",
    "jumping",
    "sitting",
    "waving",
    "sleeping",
    "reading",
)

VOCABULARY = ("null",) + HUES + SHAPES + ACCESSORIES + ACTIVITIES
NULL_TOKEN_ID = 0
word_to_id = {w: i for i, w in enumerate(VOCABULARY)}

# Saturated body palette vs dim backgrounds: every body color has channel
# spread > 1.2 while backgrounds stay under 0.2, hats land in between and
# whites have none, so pixel-level masks are recoverable by thresholds.
BODY_COLORS = {
    "red": (1.0, -0.8, -0.8),
    "orange": (1.0, 0.1, -0.8),
    "yellow": (1.0, 1.0, -0.8),
    "green": (-0.8, 1.0, -0.8),
    "cyan": (-0.8, 1.0, 1.0),
    "blue": (-0.8, -0.8, 1.0),
    "purple": (0.1, -0.8, 1.0),
    "magenta": (1.0, -0.8, 1.0),
}
BACKGROUND_COLORS = (
    (-0.40, -0.40, -0.40),
    (-0.45, -0.38, -0.30),
    (-0.30, -0.38, -0.45),
    (-0.20, -0.26, -0.20),
)
HAT_COLOR = (0.09, -0.46, -0.85)
SCARF_COLOR = (0.95, 0.95, 0.95)

# activity -> (dx, dy, rotation, scale); every row differs from every
# other in the (dx, dy) pair alone, so poses are tellable apart from
# position statistics; scale stays in a narrow band to keep silhouette
# statistics stable across activities.
POSES = {
    "standing": (0.0, 0.0, 0.00, 1.00),
    "walking": (-1.5, 0.5, 0.20, 1.00),
    "running": (1.3, 0.4, -0.35, 1.05),
    "jumping": (0.3, -1.4, 0.15, 0.97),
    "sitting": (-0.4, 1.4, 0.00, 0.95),
    "waving": (1.2, -0.7, -0.15, 1.05),
    "sleeping": (-1.8, 1.1, 0.90, 0.95),
    "reading": (0.9, 1.0, 0.45, 1.00),
}

BASE_RADIUS = 4.1
SUPERSAMPLE = 4

LABEL_BACKGROUND, LABEL_BODY, LABEL_HAT, LABEL_SCARF = 0, 1, 2, 3


@dataclass(frozen=True)
class CharacterIdentity:
    body_hue: str
    shape: str
    accessory: str

    def __post_init__(self) -> None:
        if self.body_hue not in HUES:
            raise ContractError(f"unknown hue {self.body_hue!r}")
        if self.shape not in SHAPES:
            raise ContractError(f"unknown shape {self.shape!r}")
        if self.accessory not in ACCESSORIES:
            raise ContractError(f"unknown accessory {self.accessory!r}")


@dataclass(frozen=True)
class SceneSpec:
    identity: CharacterIdentity
    activity: str
    background: int

    def __post_init__(self) -> None:
        if self.activity not in ACTIVITIES:
            raise ContractError(f"unknown activity {self.activity!r}")
        if not 0 <= self.background < len(BACKGROUND_COLORS):
            raise ContractError(f"background index {self.background} out of range")


@dataclass(frozen=True)
class ImageExample:
    image: np.ndarray
    tokens: tuple[int, ...]
    spec: SceneSpec


@dataclass(frozen=True)
class TransitionClip:
    frames: np.ndarray
    start: SceneSpec
    end: SceneSpec

    def __post_init__(self) -> None:
        if self.frames.ndim != 4 or self.frames.shape[1:] != (
            IMAGE_SIZE,
            IMAGE_SIZE,
            3,
        ):
            raise ContractError(f"bad clip shape {self.frames.shape}")
        if self.frames.shape[0] < 2:
            raise ContractError("a clip needs at least 2 frames")
        if self.start.identity != self.end.identity:
            raise ContractError("clip endpoints must share the character identity")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


def prompt_words(spec: SceneSpec) -> tuple[str, str, str, str]:
    ident = spec.identity
    return (ident.body_hue, ident.shape, ident.accessory, spec.activity)


def encode_prompt(words: tuple[str, ...] | list[str]) -> tuple[int, ...]:
    ids = []
    for w in words:
        if w not in word_to_id:
            raise ContractError(f"unknown word {w!r}")
        ids.append(word_to_id[w])
    return tuple(ids)


def decode_prompt(tokens: tuple[int, ...] | list[int]) -> tuple[str, ...]:
    for t in tokens:
        if not 0 <= t < len(VOCABULARY):
            raise ContractError(f"token id {t} out of range")
    return tuple(VOCABULARY[t] for t in tokens)


def pose_for_activity(activity: str) -> tuple[float, float, float, float]:
    if activity not in POSES:
        raise ContractError(f"unknown activity {activity!r}")
    return POSES[activity]


def _point_in_shape(shape: str, qx: np.ndarray, qy: np.ndarray) -> np.ndarray:
    if shape == "circle":
        return qx * qx + qy * qy <= 1.0
    if shape == "square":
        return np.maximum(np.abs(qx), np.abs(qy)) <= 1.0
    # Equilateral triangle inscribed in the unit circle, apex up at (0,-1).
    s3 = np.sqrt(3.0)
    below_apex_left = (qy + 1.0) >= -s3 * qx
    below_apex_right = (qy + 1.0) >= s3 * qx
    above_base = qy <= 0.5
    return below_apex_left & below_apex_right & above_base


def render_pose(
    identity: CharacterIdentity,
    pose: tuple[float, float, float, float],
    background: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize one character at an explicit pose.

    Returns (image [16,16,3] float32 in [-1,1], labels [16,16] uint8).
    Each pixel is labeled from a 4x4 subsample grid: body if covered at
    least half, else the plurality of the remaining labels; the pixel then
    takes the label's exact palette color, so pixels are always pure
    palette entries.
    """
    dx, dy, rot, scale = pose
    cx, cy = IMAGE_SIZE / 2.0 + dx, IMAGE_SIZE / 2.0 + dy
    radius = BASE_RADIUS * scale

    ss = SUPERSAMPLE
    base = (np.arange(IMAGE_SIZE * ss) + 0.5) / ss
    gx, gy = np.meshgrid(base, base)
    ux = (gx - cx) / radius
    uy = (gy - cy) / radius
    cos_r, sin_r = np.cos(-rot), np.sin(-rot)
    qx = cos_r * ux - sin_r * uy
    qy = sin_r * ux + cos_r * uy

    in_body = _point_in_shape(identity.shape, qx, qy)
    in_hat = (qy >= -1.45) & (qy <= -1.02) & (np.abs(qx) <= 0.55)
    in_scarf = (qy >= 0.10) & (qy <= 0.60) & (np.abs(qx) <= 1.25)
    if identity.accessory != "hat":
        in_hat = np.zeros_like(in_hat)
    if identity.accessory != "scarf":
        in_scarf = np.zeros_like(in_scarf)

    # Scarf sits behind the body (only the tails show), hat above it, so
    # the body silhouette is never occluded and shape statistics stay
    # accessory-independent.
    sub = np.full(gx.shape, LABEL_BACKGROUND, dtype=np.uint8)
    sub[in_scarf] = LABEL_SCARF
    sub[in_hat] = LABEL_HAT
    sub[in_body] = LABEL_BODY

    blocks = sub.reshape(IMAGE_SIZE, ss, IMAGE_SIZE, ss).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(IMAGE_SIZE, IMAGE_SIZE, ss * ss)
    counts = np.stack([(blocks == k).sum(axis=-1) for k in range(4)], axis=-1)
    # body wins a pixel iff it covers at least half the subsamples, which
    # makes the body mask independent of accessories (they only repartition
    # non-body subsamples); the rest go to the plurality of hat/scarf/bg
    # with ties resolved hat > scarf > background
    rest = np.array([LABEL_HAT, LABEL_SCARF, LABEL_BACKGROUND])
    labels = rest[np.argmax(counts[..., rest], axis=-1)].astype(np.uint8)
    labels[counts[..., LABEL_BODY] * 2 >= ss * ss] = LABEL_BODY

    palette = np.array(
        [
            BACKGROUND_COLORS[background],
            BODY_COLORS[identity.body_hue],
            HAT_COLOR,
            SCARF_COLOR,
        ],
        dtype=np.float32,
    )
    return palette[labels], labels


def render_scene_labels(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    return render_pose(spec.identity, POSES[spec.activity], spec.background)


def render_scene(spec: SceneSpec) -> np.ndarray:
    return render_scene_labels(spec)[0]


def make_image_dataset(n: int, rng: RngStream) -> list[ImageExample]:
    """n uniform scenes with prompts [hue, shape, accessory, activity]."""
    if n < 1:
        raise ContractError(f"dataset size must be >= 1, got {n}")
    out = []
    for i in range(n):
        st = rng.child(i)
        identity = CharacterIdentity(
            HUES[st.randint_below(len(HUES))],
            SHAPES[st.randint_below(len(SHAPES))],
            ACCESSORIES[st.randint_below(len(ACCESSORIES))],
        )
        spec = SceneSpec(
            identity,
            ACTIVITIES[st.randint_below(len(ACTIVITIES))],
            st.randint_below(len(BACKGROUND_COLORS)),
        )
        out.append(
            ImageExample(render_scene(spec), encode_prompt(prompt_words(spec)), spec)
        )
    return out


def make_transition_clip(start: SceneSpec, end: SceneSpec, length: int) -> TransitionClip:
    """Frames 0..L-1 render linearly interpolated pose parameters.

    Endpoints must share identity and background; frame 0 is exactly the
    start scene and frame L-1 exactly the end scene.
    """
    if length < 2:
        raise ContractError(f"clip length must be >= 2, got {length}")
    if start.identity != end.identity:
        raise ContractError("transition endpoints must share identity")
    if start.background != end.background:
        raise ContractError("transition endpoints must share background")
    p0 = np.array(POSES[start.activity])
    p1 = np.array(POSES[end.activity])
    frames = []
    for i in range(length):
        u = i / (length - 1)
        pose = tuple((1.0 - u) * p0 + u * p1)
        frames.append(render_pose(start.identity, pose, start.background)[0])
    return TransitionClip(np.stack(frames), start, end)


def make_transition_dataset(n: int, length: int, rng: RngStream) -> list[TransitionClip]:
    """n clips whose endpoints share identity but differ in activity."""
    if n < 1:
        raise ContractError(f"dataset size must be >= 1, got {n}")
    if length < 2:
        raise ContractError(f"clip length must be >= 2, got {length}")
    out = []
    for i in range(n):
        st = rng.child(i)
        identity = CharacterIdentity(
            HUES[st.randint_below(len(HUES))],
            SHAPES[st.randint_below(len(SHAPES))],
            ACCESSORIES[st.randint_below(len(ACCESSORIES))],
        )
        background = st.randint_below(len(BACKGROUND_COLORS))
        a = st.randint_below(len(ACTIVITIES))
        b = st.randint_below(len(ACTIVITIES) - 1)
        if b >= a:
            b += 1
        out.append(
            make_transition_clip(
                SceneSpec(identity, ACTIVITIES[a], background),
                SceneSpec(identity, ACTIVITIES[b], background),
                length,
            )
        )
    return out


# --- Measurement oracles -------------------------------------------------
#
# Region masks are recovered from pixel colors alone (no labels), so the
# same extractor works on generated images. All statistics are computed
# over the recovered masks, never over background pixels, which makes the
# features independent of the background tint by construction.


def _region_masks(image: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    img = np.asarray(image, dtype=np.float64)
    spread = img.max(axis=-1) - img.min(axis=-1)
    red_minus_blue = img[..., 0] - img[..., 2]
    body = spread > 1.2
    hat = (~body) & (red_minus_blue >= 0.5) & (red_minus_blue <= 1.3)
    scarf = img.min(axis=-1) > 0.5
    return body, hat, scarf


# unit-frame areas of the three shapes, for scale estimation from mask area
_SHAPE_UNIT_AREA = {"circle": np.pi, "square": 4.0, "triangle": 1.2990}
_TEMPLATE_ANGLES = np.linspace(-0.9, 0.9, 13)


def _shape_template_iou(mask: np.ndarray, cx: float, cy: float, area: float) -> dict[str, float]:
    """Best IoU of the mask against each shape template.

    The template is placed at the mask centroid with scale estimated from
    the mask area, scanned over a rotation grid; the oracle knows the
    scene geometry but nothing about any trained model.
    """
    ys, xs = np.nonzero(mask)
    px = xs + 0.5 - cx
    py = ys + 0.5 - cy
    grid = (np.arange(IMAGE_SIZE) + 0.5)
    gx, gy = np.meshgrid(grid, grid)
    out = {}
    for shape, unit_area in _SHAPE_UNIT_AREA.items():
        r_est = max(np.sqrt(area / unit_area), 0.5)
        ux = (gx - cx) / r_est
        uy = (gy - cy) / r_est
        best = 0.0
        for theta in _TEMPLATE_ANGLES:
            c, s = np.cos(-theta), np.sin(-theta)
            tmpl = _point_in_shape(shape, c * ux - s * uy, s * ux + c * uy)
            union = float(np.logical_or(tmpl, mask).sum())
            if union > 0:
                best = max(best, float(np.logical_and(tmpl, mask).sum()) / union)
        out[shape] = best
    return out


def _mask_moments(mask: np.ndarray) -> dict[str, float]:
    ys, xs = np.nonzero(mask)
    area = float(len(xs))
    if area == 0.0:
        return dict(area=0.0, cx=0.0, cy=0.0, i1=0.0, r_ratio=0.0, rmax_ratio=0.0)
    # centroid in continuous image coordinates (pixel centers at x + 0.5)
    cx, cy = float(xs.mean()) + 0.5, float(ys.mean()) + 0.5
    dxs, dys = xs - cx, ys - cy
    mu20 = float((dxs * dxs).mean()) * area
    mu02 = float((dys * dys).mean()) * area
    i1 = (mu20 + mu02) / (area * area)
    r = np.sqrt(dxs * dxs + dys * dys)
    r_mean = float(r.mean())
    if r_mean < 1e-9:
        return dict(area=area, cx=cx, cy=cy, i1=i1, r_ratio=0.0, rmax_ratio=0.0)
    return dict(
        area=area,
        cx=cx,
        cy=cy,
        i1=i1,
        r_ratio=float(r.std()) / r_mean,
        rmax_ratio=float(r.max()) / r_mean,
    )


def identity_feature(image: np.ndarray) -> np.ndarray:
    """16 fixed statistics describing who is in the picture.

    Dominated by body color and scale/pose-invariant shape statistics plus
    accessory area ratios; position and size enter only at low weight, so
    the same character doing different things stays close in cosine while
    different characters stay apart. All-empty masks fall back to whole
    image statistics so degenerate inputs still map to finite vectors.
    """
    img = np.asarray(image, dtype=np.float64)
    body, hat, scarf = _region_masks(img)
    if not body.any():
        body = np.ones(img.shape[:2], dtype=bool)
    m = _mask_moments(body)
    mean_rgb = img[body].mean(axis=0)

    r, g, b = mean_rgb
    chroma_x = 2.0 * r - g - b
    chroma_y = np.sqrt(3.0) * (g - b)
    chroma = np.hypot(chroma_x, chroma_y)
    if chroma > 1e-9:
        hue_cos, hue_sin = chroma_x / chroma, chroma_y / chroma
    else:
        hue_cos, hue_sin = 0.0, 0.0
    # second harmonic doubles the angular gap between nearby palette hues
    hue_cos2 = hue_cos * hue_cos - hue_sin * hue_sin
    hue_sin2 = 2.0 * hue_cos * hue_sin

    area = m["area"]
    hat_ratio = float(hat.sum()) / area
    scarf_ratio = float(scarf.sum()) / area
    half = IMAGE_SIZE / 2.0
    iou = _shape_template_iou(body, m["cx"], m["cy"], area)
    iou_vec = np.array([iou[s] for s in SHAPES], dtype=np.float64)
    # Winner-take-most shape code: on rendered characters the true shape's
    # template always fits best, so the argmax is pose invariant; centering
    # the raw fits removes the rasterization jitter common to all three.
    shape_code = np.zeros(len(SHAPES))
    shape_code[int(np.argmax(iou_vec))] = 1.0
    shape_dims = 1.0 * shape_code + 2.0 * (iou_vec - iou_vec.mean())

    feat = np.array(
        [
            r,
            g,
            b,
            0.8 * hue_cos,
            0.8 * hue_sin,
            shape_dims[0],
            shape_dims[1],
            shape_dims[2],
            min(5.0 * np.sqrt(hat_ratio), 1.3),
            min(5.0 * np.sqrt(scarf_ratio), 1.3),
            0.5 * (r + g + b) / 3.0,
            0.3 * (m["cx"] - half) / half,
            0.3 * (m["cy"] - half) / half,
            (np.sqrt(area) - 5.6) / 1.5,
            0.8 * hue_cos2,
            0.8 * hue_sin2,
        ],
        dtype=np.float64,
    )
    return feat


def pose_statistics(image: np.ndarray) -> np.ndarray:
    """Position and size of the detected character: (cx, cy, sqrt(area)).

    Complements identity_feature for telling activities apart; same mask
    recovery and whole-image fallback.
    """
    img = np.asarray(image, dtype=np.float64)
    body, hat, scarf = _region_masks(img)
    character = body | hat | scarf
    if not character.any():
        character = np.ones(img.shape[:2], dtype=bool)
    m = _mask_moments(character)
    return np.array([m["cx"], m["cy"], np.sqrt(m["area"])], dtype=np.float64)
