"""Face-parsing label maps, region masks and mask shuffling."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

CATEGORY_NAMES: tuple[str, ...] = (
    "background",
    "skin",
    "nose",
    "eyeglasses",
    "left_eye",
    "right_eye",
    "left_brow",
    "right_brow",
    "left_ear",
    "right_ear",
    "mouth",
    "upper_lip",
    "lower_lip",
    "hair",
    "earring",
    "neck",
    "cloth",
)
NUM_CATEGORIES = len(CATEGORY_NAMES)
CATEGORY_IDS = {name: i for i, name in enumerate(CATEGORY_NAMES)}

FACE_CATEGORIES: frozenset[int] = frozenset(
    i for i, n in enumerate(CATEGORY_NAMES) if n not in ("background", "hair", "cloth")
)
HEAD_CATEGORIES: frozenset[int] = FACE_CATEGORIES | {CATEGORY_IDS["hair"]}

PRESETS = {"face": FACE_CATEGORIES, "head": HEAD_CATEGORIES}


class UnknownLabelError(ValueError):
    """A label id outside the 17-category table."""


def resolve_preset(preset: str | Iterable[int]) -> frozenset[int]:
    """Turn ``"face"``, ``"head"``, ``"custom=1,2,4"`` or an id iterable into a category set."""
    if isinstance(preset, str):
        if preset in PRESETS:
            return PRESETS[preset]
        if preset.startswith("custom="):
            body = preset[len("custom="):]
            ids = [int(tok) for tok in body.split(",") if tok.strip()]
        else:
            raise ValueError(f"unknown mask preset {preset!r}")
    else:
        ids = [int(i) for i in preset]
    cats = frozenset(ids)
    _check_ids(cats)
    if not cats:
        raise ValueError("mask preset resolves to an empty category set")
    return cats


def _check_ids(categories: Iterable[int]) -> None:
    bad = [c for c in categories if not 0 <= int(c) < NUM_CATEGORIES]
    if bad:
        raise UnknownLabelError(f"unknown category ids {sorted(bad)}")


def validate_label_map(label_map: np.ndarray, source: str = "<array>") -> None:
    if label_map.ndim != 2:
        raise ValueError(f"{source}: label map must be 2-D, got shape {label_map.shape}")
    top = int(label_map.max(initial=0))
    if top >= NUM_CATEGORIES or int(label_map.min(initial=0)) < 0:
        raise UnknownLabelError(f"{source}: label value {top} outside 0..{NUM_CATEGORIES - 1}")


def category_mask(label_map: np.ndarray, categories: Iterable[int]) -> np.ndarray:
    """Binary mask that is 1 where the label belongs to ``categories``."""
    cats = sorted(set(int(c) for c in categories))
    _check_ids(cats)
    lut = np.zeros(NUM_CATEGORIES, dtype=np.uint8)
    lut[cats] = 1
    return lut[np.asarray(label_map)]


def select_shuffled_mask(
    label_map: np.ndarray,
    rng: np.random.Generator,
    n_range: tuple[int, int] = (1, NUM_CATEGORIES),
) -> tuple[np.ndarray, tuple[int, ...]]:
    """Draw N_m ~ U{lo..hi} distinct categories and return their union mask.

    The same categories are meant to be used for both the reference and the
    target region of one training example.
    """
    lo, hi = n_range
    if not 1 <= lo <= hi <= NUM_CATEGORIES:
        raise ValueError(f"invalid n_range {n_range}; need 1 <= lo <= hi <= {NUM_CATEGORIES}")
    n = int(rng.integers(lo, hi + 1))
    chosen = tuple(sorted(int(c) for c in rng.choice(NUM_CATEGORIES, size=n, replace=False)))
    return category_mask(label_map, chosen), chosen


def masks_for_policy(
    label_maps: Sequence[np.ndarray],
    policy: str,
    rng: np.random.Generator,
    n_range: tuple[int, int] = (1, NUM_CATEGORIES),
) -> tuple[list[np.ndarray], tuple[int, ...]]:
    """Masks for a group of label maps that must share one category choice.

    ``policy`` is ``face``, ``head``, ``shuffle`` or ``universal``; the last
    picks one of the other three uniformly.
    """
    if policy == "universal":
        policy = ("face", "head", "shuffle")[int(rng.integers(0, 3))]
    if policy == "shuffle":
        lo, hi = n_range
        if not 1 <= lo <= hi <= NUM_CATEGORIES:
            raise ValueError(f"invalid n_range {n_range}")
        n = int(rng.integers(lo, hi + 1))
        cats = tuple(sorted(int(c) for c in rng.choice(NUM_CATEGORIES, size=n, replace=False)))
    elif policy in PRESETS:
        cats = tuple(sorted(PRESETS[policy]))
    else:
        raise ValueError(f"unknown mask policy {policy!r}")
    return [category_mask(lm, cats) for lm in label_maps], cats
