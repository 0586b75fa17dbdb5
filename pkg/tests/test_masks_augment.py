import hashlib

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import RBFInterpolator

from inpaint_swap.augment import (
    BASE_AMPLITUDE,
    NO_AUGMENT,
    AugmentConfig,
    DegenerateLatticeError,
    ThinPlateSpline,
    make_inpaint_image,
    make_tps_control,
    reference_augment,
    sample_train_scale,
    tps_deform_mask,
    tps_warp_field,
)
from inpaint_swap.masks import (
    CATEGORY_IDS,
    FACE_CATEGORIES,
    HEAD_CATEGORIES,
    NUM_CATEGORIES,
    UnknownLabelError,
    category_mask,
    masks_for_policy,
    resolve_preset,
    select_shuffled_mask,
)
from inpaint_swap.toy.dataset import image_to_uint8
from inpaint_swap.toy.render import ToyFactorSpec, random_spec, render_toy_face

FACE = render_toy_face(ToyFactorSpec(2, 10.0, 0.3, 1.0, 5), 32)


# ---------------------------------------------------------------------------
# category masks


def test_category_mask_all_and_none():
    lab = FACE[1]
    assert category_mask(lab, range(NUM_CATEGORIES)).all()
    assert not category_mask(lab, []).any()


def test_category_mask_counts_skin():
    lab = FACE[1]
    k = int(np.count_nonzero(lab == CATEGORY_IDS["skin"]))
    assert k > 0
    assert int(category_mask(lab, {CATEGORY_IDS["skin"]}).sum()) == k


def test_category_mask_rejects_unknown():
    with pytest.raises(UnknownLabelError):
        category_mask(FACE[1], {17})


def test_presets():
    names = {"background", "hair", "cloth"}
    assert FACE_CATEGORIES == {i for i in range(17)} - {CATEGORY_IDS[n] for n in names}
    assert HEAD_CATEGORIES == FACE_CATEGORIES | {CATEGORY_IDS["hair"]}
    assert resolve_preset("custom=1,2") == {1, 2}
    with pytest.raises(ValueError):
        resolve_preset("custom=")
    with pytest.raises(ValueError):
        resolve_preset("beard")


def test_head_strictly_contains_face_on_toy_maps():
    rng = np.random.default_rng(0)
    for i in range(20):
        _, lab, _ = render_toy_face(random_spec(rng, i % 8), 32)
        face = category_mask(lab, FACE_CATEGORIES)
        head = category_mask(lab, HEAD_CATEGORIES)
        assert np.all(head >= face) and head.sum() > face.sum()


@settings(max_examples=40, deadline=None)
@given(a=st.sets(st.integers(0, 16)), b=st.sets(st.integers(0, 16)))
def test_mask_monotone_in_categories(a, b):
    lab = FACE[1]
    assert np.all(category_mask(lab, a | b) >= category_mask(lab, a))


# ---------------------------------------------------------------------------
# mask shuffling


def test_shuffle_extremes(rng):
    lab = FACE[1]
    for _ in range(5):
        m, cats = select_shuffled_mask(lab, rng, (17, 17))
        assert m.all() and len(cats) == 17
        m, cats = select_shuffled_mask(lab, rng, (1, 1))
        assert len(cats) == 1


def test_shuffle_covers_every_category():
    rng = np.random.default_rng(5)
    seen = set()
    for _ in range(1000):
        seen.update(select_shuffled_mask(FACE[1], rng)[1])
    assert seen == set(range(NUM_CATEGORIES))


def test_shuffle_union_equivalence_100_draws():
    rng = np.random.default_rng(11)
    seen = set()
    for _ in range(100):
        m, cats = select_shuffled_mask(FACE[1], rng)
        seen.update(cats)
        union = np.zeros_like(m)
        for c in cats:
            union |= category_mask(FACE[1], {c})
        assert np.array_equal(m, union)
        assert len(set(cats)) == len(cats)
    assert seen == set(range(NUM_CATEGORIES))


@pytest.mark.parametrize("bad", [(0, 3), (3, 2), (1, 18)])
def test_shuffle_rejects_bad_range(bad, rng):
    with pytest.raises(ValueError):
        select_shuffled_mask(FACE[1], rng, bad)


def test_policy_shares_categories(rng):
    labs = [render_toy_face(random_spec(rng, i), 32)[1] for i in range(2)]
    for policy in ("face", "head", "shuffle", "universal"):
        masks, cats = masks_for_policy(labs, policy, rng)
        for lab, m in zip(labs, masks):
            assert np.array_equal(m, category_mask(lab, cats))


# ---------------------------------------------------------------------------
# thin-plate spline


def test_tps_interpolates_control_points(rng):
    mask = category_mask(FACE[1], FACE_CATEGORIES)
    for s in (0.5, 1.0):
        ctrl = make_tps_control(mask, s, rng)
        tps = ThinPlateSpline.fit(ctrl.lattice, ctrl.perturbed, scale=32)
        assert np.abs(tps(ctrl.lattice) - ctrl.perturbed).max() < 1e-6


def test_tps_matches_scipy(rng):
    src = rng.uniform(0, 32, size=(16, 2))
    dst = src + rng.normal(0, 1.0, size=src.shape)
    ours = ThinPlateSpline.fit(src, dst)
    ref = RBFInterpolator(src, dst, kernel="thin_plate_spline", degree=1)
    q = rng.uniform(0, 32, size=(200, 2))
    np.testing.assert_allclose(ours(q), ref(q), atol=1e-8)


def test_tps_identity_at_zero_scale(rng):
    mask = category_mask(FACE[1], FACE_CATEGORIES)
    assert np.array_equal(tps_deform_mask(mask, 0.0, rng), mask)


def test_tps_displacement_bound(rng):
    mask = category_mask(FACE[1], FACE_CATEGORIES)
    ys, xs = np.nonzero(mask)
    diag = np.hypot(xs.max() - xs.min() + 1, ys.max() - ys.min() + 1)
    for _ in range(50):
        s = sample_train_scale(rng)
        c = make_tps_control(mask, s, rng)
        assert np.linalg.norm(c.perturbed - c.lattice, axis=1).max() <= s * BASE_AMPLITUDE * diag + 1e-9


def test_tps_degenerate_lattice(rng):
    mask = category_mask(FACE[1], FACE_CATEGORIES)
    with pytest.raises(DegenerateLatticeError):
        tps_deform_mask(mask, 0.5, rng, grid=2)


def test_tps_warp_field_is_continuous(rng):
    mask = category_mask(FACE[1], FACE_CATEGORIES)
    for _ in range(20):
        field = tps_warp_field(make_tps_control(mask, 1.0, rng), mask.shape)
        ident = np.stack(np.meshgrid(np.arange(32.0), np.arange(32.0)), axis=-1)
        disp = field - ident
        jump = max(np.abs(np.diff(disp, axis=0)).max(), np.abs(np.diff(disp, axis=1)).max())
        # lattice spacing ~ 1/3 of the box; displacement <= 5% of the diagonal
        assert jump < 0.5


def test_tps_output_binary_and_shape(rng):
    mask = category_mask(FACE[1], HEAD_CATEGORIES)
    out = tps_deform_mask(mask, 0.8, rng)
    assert out.shape == mask.shape and out.dtype == mask.dtype
    assert set(np.unique(out)) <= {0, 1}


def test_train_scale_distribution():
    rng = np.random.default_rng(0)
    s = np.array([sample_train_scale(rng) for _ in range(1000)])
    assert s.min() >= 0.5 and s.max() <= 1.0
    # uniform on [0.5, 1]: mean 0.75, sd 0.144; 1000 draws -> se 0.0046
    assert abs(s.mean() - 0.75) < 0.02
    hist, _ = np.histogram(s, bins=5, range=(0.5, 1.0))
    assert hist.min() > 150


# ---------------------------------------------------------------------------
# inpaint image


def test_inpaint_zero_and_full_masks(rng):
    x = torch.as_tensor(FACE[0])
    zero = np.zeros((32, 32), dtype=np.uint8)
    assert torch.equal(make_inpaint_image(x, zero, rng, s=0.0), x)
    full = np.ones((32, 32), dtype=np.uint8)
    assert torch.equal(make_inpaint_image(x, full, rng, s=0.7), torch.zeros_like(x))


def test_inpaint_shape_mismatch(rng):
    with pytest.raises(ValueError):
        make_inpaint_image(torch.zeros(3, 32, 32), np.zeros((16, 16), np.uint8), rng)


def test_blanked_fraction_bound():
    rng = np.random.default_rng(2024)
    ratios = []
    for i in range(300):
        _, lab, _ = render_toy_face(random_spec(rng, i % 8), 32)
        m = category_mask(lab, FACE_CATEGORIES)
        _, deformed = make_inpaint_image(np.ones((3, 32, 32)), m, rng, return_mask=True)
        ratios.append(deformed.sum() / m.sum())
    ratios = np.array(ratios)
    assert 0.9 <= ratios.mean() <= 1.1
    assert np.mean((ratios >= 0.9) & (ratios <= 1.1)) >= 0.99


# ---------------------------------------------------------------------------
# reference augmentation


def test_augment_identity_when_disabled(rng):
    x = torch.as_tensor(FACE[0])
    assert torch.equal(reference_augment(x, rng, NO_AUGMENT), x)


def test_flip_only_is_involution(rng):
    x = torch.as_tensor(FACE[0])
    cfg = AugmentConfig(0.0, 1.0, 0.0, 0.0, 0.0)
    once = reference_augment(x, rng, cfg)
    assert not torch.equal(once, x)
    assert torch.equal(reference_augment(once, rng, cfg), x)


def test_augment_range_shape_and_numpy(rng):
    for _ in range(20):
        out = reference_augment(FACE[0], rng)
        assert out.shape == FACE[0].shape and isinstance(out, np.ndarray)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_augment_golden_hash():
    out = reference_augment(FACE[0], np.random.default_rng(7))
    digest = hashlib.sha256(image_to_uint8(out).tobytes()).hexdigest()
    assert digest == "255e1fb13000e3414f146a9732f16e8873fe3bbb4fcbf686642017b6e720f67c"
