import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from inpaint_swap.checkpoint import (
    CheckpointError,
    build_bundle,
    load_checkpoint,
    pretrain_featurizers,
    save_checkpoint,
)
from inpaint_swap.config import TrainConfig
from inpaint_swap.evaluation import make_pairs
from inpaint_swap.inference import EmptyMaskError, SwapRequest, swap, swap_batch
from inpaint_swap.masks import FACE_CATEGORIES, HEAD_CATEGORIES, category_mask
from inpaint_swap.toy.dataset import read_image


def _cfg():
    return TrainConfig(
        base_channels=8,
        channel_mult=(1, 2),
        context_dim=16,
        semantic_dim=16,
        identity_dim=8,
        pretrain_pool=32,
        semantic_steps=2,
        identity_steps=2,
        oracle_steps=2,
        oracle_pool=16,
    ).validate()


@pytest.fixture(scope="module")
def bundle(toy_ds):
    cfg = _cfg()
    return build_bundle(cfg, pretrain_featurizers(cfg, 4, toy_ds.images.shape[-1]))


def _req(ds, s, t, **kw):
    kw.setdefault("n_steps", 5)
    return SwapRequest(
        ds.images[s], ds.images[t], ds.labels[s], ds.labels[t], landmarks_tar=ds.landmarks[t], **kw
    )


def test_swap_is_deterministic(bundle, toy_ds):
    a = swap(bundle, _req(toy_ds, 0, 9, seed=3))
    b = swap(bundle, _req(toy_ds, 0, 9, seed=3))
    c = swap(bundle, _req(toy_ds, 0, 9, seed=4))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)
    assert a.shape == toy_ds.images[0].shape
    assert a.min() >= 0 and a.max() <= 1


def test_swap_trajectory_has_one_estimate_per_step(bundle, toy_ds):
    x, traj = swap(bundle, _req(toy_ds, 0, 9, n_steps=4), return_trajectory=True)
    assert [t for t, _ in traj] == [1000, 750, 500, 250]
    assert torch.equal(x, swap(bundle, _req(toy_ds, 0, 9, n_steps=4)))


def test_swap_does_not_mutate_inputs(bundle, toy_ds):
    req = _req(toy_ds, 1, 10)
    before = (req.x_src.clone(), req.x_tar.clone(), req.labels_tar.copy())
    swap(bundle, req)
    assert torch.equal(req.x_src, before[0]) and torch.equal(req.x_tar, before[1])
    assert np.array_equal(req.labels_tar, before[2])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 31))
def test_head_mask_contains_face_mask(toy_ds, i):
    face = _req(toy_ds, i, i, preset="face").masks()[0]
    head = _req(toy_ds, i, i, preset="head").masks()[0]
    assert np.all(head >= face)
    assert head.sum() > face.sum()


def test_preset_monotone(toy_ds):
    lab = toy_ds.labels[0]
    small = category_mask(lab, FACE_CATEGORIES)
    big = category_mask(lab, FACE_CATEGORIES | HEAD_CATEGORIES)
    assert np.all(big >= small)


def test_empty_mask_raises(bundle, toy_ds):
    req = _req(toy_ds, 0, 9)
    req.labels_tar = np.zeros_like(req.labels_tar)
    with pytest.raises(EmptyMaskError):
        swap(bundle, req)


def test_bad_step_count_raises(bundle, toy_ds):
    with pytest.raises(ValueError):
        swap(bundle, _req(toy_ds, 0, 9, n_steps=0))
    with pytest.raises(ValueError):
        swap(bundle, _req(toy_ds, 0, 9, n_steps=1001))


def test_unknown_preset_raises(toy_ds):
    with pytest.raises(ValueError):
        _req(toy_ds, 0, 9, preset="torso").masks()


def test_swap_batch_empty(bundle, tmp_path):
    rows = swap_batch(bundle, [], tmp_path)
    assert rows == []
    assert (tmp_path / "manifest.jsonl").read_text() == ""


def test_swap_batch_64_rows_and_rerun_digests(bundle, toy_ds, tmp_path):
    pairs = make_pairs(toy_ds.identities, np.arange(len(toy_ds)), 32, seed=0) * 2
    reqs = [_req(toy_ds, s, t, n_steps=1, seed=k) for k, (s, t) in enumerate(pairs)]
    rows = swap_batch(bundle, reqs, tmp_path / "a")
    assert len(rows) == 64
    lines = (tmp_path / "a" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 64
    rec = json.loads(lines[0])
    assert {"source", "target", "output", "seed", "n_steps", "status", "digest"} <= set(rec)
    assert all(r["status"] == "ok" for r in rows)
    assert len(list((tmp_path / "a").glob("*.png"))) == 64
    rows_b = swap_batch(bundle, reqs, tmp_path / "b")
    assert [r["digest"] for r in rows] == [r["digest"] for r in rows_b]
    img = read_image(tmp_path / "a" / rows[0]["output"])
    assert img.shape == toy_ds.images[0].shape


def test_swap_batch_records_failures_and_continues(bundle, toy_ds, tmp_path):
    bad = _req(toy_ds, 0, 9)
    bad.labels_src = np.zeros_like(bad.labels_src)
    rows = swap_batch(bundle, [bad, _req(toy_ds, 1, 10)], tmp_path)
    assert rows[0]["status"].startswith("error: EmptyMaskError")
    assert rows[0]["output"] is None
    assert rows[1]["status"] == "ok"


def test_checkpoint_round_trip_preserves_swaps(bundle, toy_ds, tmp_path):
    save_checkpoint(bundle, tmp_path / "c.pt")
    loaded = load_checkpoint(tmp_path / "c.pt")
    req = _req(toy_ds, 2, 11)
    assert torch.equal(swap(bundle, req), swap(loaded, req))


def test_missing_checkpoint_names_path(tmp_path):
    p = tmp_path / "nope.pt"
    with pytest.raises(CheckpointError, match="nope.pt"):
        load_checkpoint(p)


def test_tampered_config_hash_rejected(bundle, tmp_path):
    save_checkpoint(bundle, tmp_path / "c.pt")
    blob = torch.load(tmp_path / "c.pt", weights_only=False)
    blob["config"]["lr"] = 1.0
    torch.save(blob, tmp_path / "c.pt")
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(tmp_path / "c.pt")
