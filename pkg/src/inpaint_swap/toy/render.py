"""Procedural cartoon faces with exact labels, landmarks and factor ground truth.

Geometry lives in normalised image coordinates (x right, y down, both in
[0, 1]). The head is rotated in-plane by the pose angle around a pivot at the
top of the neck; neck, clothing and background are not rotated.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, asdict
from functools import lru_cache

import numpy as np

from ..masks import CATEGORY_IDS, NUM_CATEGORIES

POSE_RANGE = (-30.0, 30.0)
EXPRESSION_RANGE = (-1.0, 1.0)
LIGHTING_RANGE = (0.75, 1.15)

PIVOT = np.array([0.5, 0.72])
FACE_CENTER_Y = 0.47
EYE_Y = 0.42
MOUTH_Y = 0.63
SUPERSAMPLE = 4

L = CATEGORY_IDS


class InvalidSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ToyFactorSpec:
    """Ground-truth factors of one rendered face."""

    identity: int
    pose: float = 0.0
    expression: float = 0.0
    lighting: float = 1.0
    color_seed: int = 0

    def validate(self) -> None:
        if self.identity < 0:
            raise InvalidSpecError(f"identity must be >= 0, got {self.identity}")
        for name, (lo, hi) in (
            ("pose", POSE_RANGE),
            ("expression", EXPRESSION_RANGE),
            ("lighting", LIGHTING_RANGE),
        ):
            v = getattr(self, name)
            if not (lo <= v <= hi) or not np.isfinite(v):
                raise InvalidSpecError(f"{name}={v} outside [{lo}, {hi}]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class IdentityParams:
    skin: tuple[float, float, float]
    eye_color: tuple[float, float, float]
    lip_color: tuple[float, float, float]
    hair_color: tuple[float, float, float]
    face_w: float
    face_h: float
    eye_sep: float
    eye_rx: float
    brow_t: float
    nose_w: float
    nose_l: float
    mouth_w: float
    lip_t: float
    hair_len: float


def _hsv(h: float, s: float, v: float) -> tuple[float, float, float]:
    return tuple(float(c) for c in colorsys.hsv_to_rgb(h % 1.0, s, v))


@lru_cache(maxsize=None)
def identity_params(identity: int) -> IdentityParams:
    """Deterministic appearance parameters of toy identity ``identity``.

    Hues are spread with the golden ratio so that small identity sets stay
    well separated in colour.
    """
    rng = np.random.default_rng([int(identity), 7211])
    golden = 0.6180339887
    base_hue = 0.05 + identity * golden
    return IdentityParams(
        skin=_hsv(base_hue, rng.uniform(0.35, 0.6), rng.uniform(0.78, 0.95)),
        eye_color=_hsv(base_hue + 0.5, rng.uniform(0.6, 0.9), rng.uniform(0.15, 0.45)),
        lip_color=_hsv(base_hue + rng.uniform(0.2, 0.4), rng.uniform(0.6, 0.9), rng.uniform(0.45, 0.75)),
        hair_color=_hsv(base_hue + 0.33, rng.uniform(0.3, 0.8), rng.uniform(0.1, 0.6)),
        face_w=rng.uniform(0.23, 0.29),
        face_h=rng.uniform(0.29, 0.34),
        eye_sep=rng.uniform(0.085, 0.12),
        eye_rx=rng.uniform(0.04, 0.06),
        brow_t=rng.uniform(0.012, 0.028),
        nose_w=rng.uniform(0.025, 0.05),
        nose_l=rng.uniform(0.04, 0.07),
        mouth_w=rng.uniform(0.08, 0.115),
        lip_t=rng.uniform(0.014, 0.026),
        hair_len=rng.uniform(0.0, 0.25),
    )


def _rotation(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]])


def _mouth_centerline(u: np.ndarray, expression: float) -> np.ndarray:
    # expression > 0 lowers the middle of the mouth relative to its corners
    return MOUTH_Y + 0.035 * expression * (1.0 - u**2)


def _mouth_gap(expression: float) -> float:
    return 0.006 + 0.016 * (expression + 1.0) / 2.0


def _label_samples(spec: ToyFactorSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Painter's-algorithm labels at sample points (xs, ys)."""
    ip = identity_params(spec.identity)
    labels = np.full(xs.shape, L["background"], dtype=np.uint8)

    # unrotated body
    neck = (np.abs(xs - 0.5) <= 0.1) & (ys >= 0.64)
    labels[neck] = L["neck"]
    cloth = ((xs - 0.5) / 0.48) ** 2 + ((ys - 1.12) / 0.28) ** 2 <= 1.0
    labels[cloth] = L["cloth"]

    # head-local coordinates
    rot = _rotation(-spec.pose)
    dx, dy = xs - PIVOT[0], ys - PIVOT[1]
    u = PIVOT[0] + rot[0, 0] * dx + rot[0, 1] * dy
    v = PIVOT[1] + rot[1, 0] * dx + rot[1, 1] * dy

    fw, fh = ip.face_w, ip.face_h
    hair = (((u - 0.5) / (fw + 0.05)) ** 2 + ((v - (FACE_CENTER_Y - 0.04)) / (fh + 0.04)) ** 2 <= 1.0) & (
        v <= FACE_CENTER_Y - 0.02 + ip.hair_len
    )
    labels[hair] = L["hair"]
    for side, name in ((-1, "left_ear"), (1, "right_ear")):
        ear = ((u - (0.5 + side * (fw + 0.005))) / 0.035) ** 2 + ((v - 0.47) / 0.065) ** 2 <= 1.0
        labels[ear] = L[name]
    face = ((u - 0.5) / fw) ** 2 + ((v - FACE_CENTER_Y) / fh) ** 2 <= 1.0
    labels[face] = L["skin"]
    # fringe over the forehead
    fringe = face & (v <= FACE_CENTER_Y - fh + 0.06 + 0.02 * np.cos(12 * (u - 0.5)))
    labels[fringe] = L["hair"]

    for side, eye_name, brow_name in ((-1, "left_eye", "left_brow"), (1, "right_eye", "right_brow")):
        cx = 0.5 + side * ip.eye_sep
        brow = (np.abs(u - cx) <= 0.055) & (np.abs(v - (EYE_Y - 0.07)) <= ip.brow_t / 2 + 0.004)
        labels[brow] = L[brow_name]
        ery = ip.eye_rx * 0.62
        eye = ((u - cx) / ip.eye_rx) ** 2 + ((v - EYE_Y) / ery) ** 2 <= 1.0
        labels[eye] = L[eye_name]

    nose = ((u - 0.5) / ip.nose_w) ** 2 + ((v - 0.52) / ip.nose_l) ** 2 <= 1.0
    labels[nose] = L["nose"]

    mu = (u - 0.5) / ip.mouth_w
    inside = np.abs(mu) <= 1.0
    center = _mouth_centerline(np.clip(mu, -1, 1), spec.expression)
    gap = _mouth_gap(spec.expression)
    taper = np.sqrt(np.clip(1.0 - mu**2, 0.0, 1.0))
    lip_t = ip.lip_t * (0.35 + 0.65 * taper)
    rel = v - center
    upper = inside & (rel <= -gap / 2 * taper) & (rel >= -gap / 2 * taper - lip_t)
    lower = inside & (rel >= gap / 2 * taper) & (rel <= gap / 2 * taper + lip_t)
    mouth = inside & (np.abs(rel) < gap / 2 * taper)
    labels[mouth] = L["mouth"]
    labels[upper] = L["upper_lip"]
    labels[lower] = L["lower_lip"]
    return labels


def _palette(spec: ToyFactorSpec) -> np.ndarray:
    ip = identity_params(spec.identity)
    rng = np.random.default_rng([int(spec.color_seed), 31337])
    skin = np.array(ip.skin)
    pal = np.zeros((NUM_CATEGORIES, 3))
    pal[L["skin"]] = skin
    pal[L["nose"]] = skin * 0.8
    pal[L["eyeglasses"]] = (0.1, 0.1, 0.1)
    pal[L["left_eye"]] = pal[L["right_eye"]] = ip.eye_color
    pal[L["left_brow"]] = pal[L["right_brow"]] = np.array(ip.hair_color) * 0.7
    pal[L["left_ear"]] = pal[L["right_ear"]] = skin * 0.9
    pal[L["mouth"]] = (0.25, 0.05, 0.08)
    pal[L["upper_lip"]] = pal[L["lower_lip"]] = ip.lip_color
    pal[L["hair"]] = ip.hair_color
    pal[L["earring"]] = (0.95, 0.85, 0.2)
    pal[L["neck"]] = skin * 0.78
    pal[L["cloth"]] = rng.uniform(0.1, 0.9, size=3)
    return pal


def _background(spec: ToyFactorSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng([int(spec.color_seed), 4242])
    c0 = rng.uniform(0.1, 0.9, size=3)
    c1 = rng.uniform(0.1, 0.9, size=3)
    angle = rng.uniform(0, 2 * np.pi)
    w = 0.5 + (np.cos(angle) * (xs - 0.5) + np.sin(angle) * (ys - 0.5)) / np.sqrt(2)
    w = np.clip(w, 0.0, 1.0)[..., None]
    return c0 * (1 - w) + c1 * w


def render_toy_face(spec: ToyFactorSpec, size: int = 32) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render one face.

    Returns:
        image: float32 array (3, size, size) in [0, 1].
        labels: uint8 array (size, size) of category ids.
        landmarks: float64 array (68, 2) of normalised (x, y) positions.
    """
    spec.validate()
    if size < 8:
        raise InvalidSpecError(f"size must be >= 8, got {size}")
    n = size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / n
    xs, ys = np.meshgrid(coords, coords)
    labels = _label_samples(spec, xs, ys)
    colors = _palette(spec)[labels]
    bg = labels == L["background"]
    colors[bg] = _background(spec, xs[bg], ys[bg])
    colors = np.clip(colors * spec.lighting, 0.0, 1.0)

    ss = SUPERSAMPLE
    image = colors.reshape(size, ss, size, ss, 3).mean(axis=(1, 3)).transpose(2, 0, 1)
    blocks = labels.reshape(size, ss, size, ss).transpose(0, 2, 1, 3).reshape(size, size, ss * ss)
    counts = (blocks[..., None] == np.arange(NUM_CATEGORIES)).sum(axis=2)
    label_map = counts.argmax(axis=-1).astype(np.uint8)
    return image.astype(np.float32), label_map, landmarks_for(spec)


# mirror partner of every landmark index under a left-right flip of the face
LANDMARK_MIRROR = np.array(
    list(range(16, -1, -1))
    + list(range(26, 16, -1))
    + [27, 28, 29, 30]
    + [35, 34, 33, 32, 31]
    + [45, 44, 43, 42, 47, 46]
    + [39, 38, 37, 36, 41, 40]
    + [54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55]
    + [64, 63, 62, 61, 60, 67, 66, 65]
)


def _eye_points(cx: float, ip: IdentityParams) -> list[tuple[float, float]]:
    rx, ry = ip.eye_rx, ip.eye_rx * 0.62
    # left corner, two upper, right corner, two lower (68-point ordering)
    xs = [cx - rx, cx - rx / 3, cx + rx / 3, cx + rx, cx + rx / 3, cx - rx / 3]
    pts = []
    for i, x in enumerate(xs):
        if i in (0, 3):
            y = EYE_Y
        else:
            dy = ry * np.sqrt(1 - ((x - cx) / rx) ** 2)
            y = EYE_Y - dy if i in (1, 2) else EYE_Y + dy
        pts.append((x, y))
    return pts


def landmarks_for(spec: ToyFactorSpec) -> np.ndarray:
    """Analytic 68-point landmarks (normalised coordinates) of ``spec``."""
    ip = identity_params(spec.identity)
    fw, fh = ip.face_w, ip.face_h
    pts: list[tuple[float, float]] = []
    # jaw: along the lower half of the face outline, image-left to image-right
    for k in range(17):
        phi = np.pi - k * np.pi / 16
        pts.append((0.5 + fw * np.cos(phi), FACE_CENTER_Y + fh * np.sin(phi)))
    brow_y = EYE_Y - 0.07
    for side in (-1, 1):
        cx = 0.5 + side * ip.eye_sep
        for j in range(5):
            pts.append((cx - 0.055 + j * 0.0275, brow_y))
    for j in range(4):
        pts.append((0.5, 0.43 + j * (0.52 + ip.nose_l - 0.43) / 3))
    for j in range(5):
        pts.append((0.5 + (j - 2) * ip.nose_w / 2, 0.52 + ip.nose_l * 0.8))
    pts.extend(_eye_points(0.5 - ip.eye_sep, ip))
    pts.extend(_eye_points(0.5 + ip.eye_sep, ip))

    gap = _mouth_gap(spec.expression)
    mw = ip.mouth_w

    def mouth_pt(u: float, offset: float) -> tuple[float, float]:
        taper = np.sqrt(max(1 - u * u, 0.0))
        c = float(_mouth_centerline(np.array(u), spec.expression))
        thick = ip.lip_t * (0.35 + 0.65 * taper)
        if offset < 0:
            return (0.5 + u * mw, c - gap / 2 * taper - thick)
        return (0.5 + u * mw, c + gap / 2 * taper + thick)

    # outer lip contour: corner, upper lip left->right, corner, lower lip right->left
    pts.append((0.5 - mw, float(_mouth_centerline(np.array(-1.0), spec.expression))))
    for u in (-2 / 3, -1 / 3, 0.0, 1 / 3, 2 / 3):
        pts.append(mouth_pt(u, -1))
    pts.append((0.5 + mw, float(_mouth_centerline(np.array(1.0), spec.expression))))
    for u in (2 / 3, 1 / 3, 0.0, -1 / 3, -2 / 3):
        pts.append(mouth_pt(u, 1))
    # inner contour
    inner_u = 0.85
    for u in (-inner_u, -0.5, 0.0, 0.5, inner_u):
        taper = np.sqrt(1 - u * u)
        c = float(_mouth_centerline(np.array(u), spec.expression))
        pts.append((0.5 + u * mw, c - gap / 2 * taper))
    for u in (0.5, 0.0, -0.5):
        taper = np.sqrt(1 - u * u)
        c = float(_mouth_centerline(np.array(u), spec.expression))
        pts.append((0.5 + u * mw, c + gap / 2 * taper))

    arr = np.asarray(pts, dtype=np.float64)
    assert arr.shape == (68, 2)
    rot = _rotation(spec.pose)
    arr = PIVOT + (arr - PIVOT) @ rot.T
    return np.clip(arr, 0.0, 1.0)


def random_spec(rng: np.random.Generator, identity: int) -> ToyFactorSpec:
    return ToyFactorSpec(
        identity=int(identity),
        pose=float(rng.uniform(*POSE_RANGE)),
        expression=float(rng.uniform(*EXPRESSION_RANGE)),
        lighting=float(rng.uniform(*LIGHTING_RANGE)),
        color_seed=int(rng.integers(0, 2**31 - 1)),
    )
