"""Swap-quality metrics and the benchmark runner.

Metrics: background-masked identity retrieval (top-1 / top-5), pose and
expression distance under pluggable extractors, Fréchet feature distance,
and background preservation outside the target mask.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
import torch

from .checkpoint import Bundle
from .inference import SwapRequest, image_digest, swap
from .masks import category_mask, resolve_preset

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# identity retrieval


def ranks_from_similarity(sims: np.ndarray, labels: Optional[Sequence] = None) -> np.ndarray:
    """1-based rank of the correct gallery column for every query row.

    Row ``i`` is matched against column ``i`` (or, with ``labels``, against
    the first column sharing ``labels[i]``). Columns are ordered by
    descending similarity; ties keep the lowest index first.
    """
    sims = np.asarray(sims)
    lab = None if labels is None else np.asarray(labels)
    ranks = np.empty(sims.shape[0], dtype=np.int64)
    for i, row in enumerate(sims):
        order = np.argsort(-row, kind="stable")
        hit = order == i if lab is None else lab[order] == lab[i]
        ranks[i] = int(np.argmax(hit)) + 1
    return ranks


def retrieval_ranks(queries: np.ndarray, gallery: np.ndarray, labels: Optional[Sequence] = None) -> np.ndarray:
    """Cosine-similarity ranks of each query's true gallery entry (see ``ranks_from_similarity``)."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.shape[0] == 0 or g.shape[0] == 0:
        raise EvaluationError("retrieval needs a nonempty query and gallery set")
    if q.shape[0] != g.shape[0]:
        raise EvaluationError(f"{q.shape[0]} queries but {g.shape[0]} gallery items")
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    return ranks_from_similarity(qn @ gn.T, labels)


def topk_from_ranks(ranks: np.ndarray, ks=(1, 5)) -> tuple[float, ...]:
    return tuple(float(np.mean(ranks <= k)) for k in ks)


@torch.no_grad()
def id_retrieval(
    swapped: torch.Tensor,
    sources: torch.Tensor,
    masks_swapped,
    masks_sources,
    id_encoder: Callable,
    labels: Optional[Sequence] = None,
    return_ranks: bool = False,
):
    """Top-1 / top-5 retrieval of each swap's source among all sources.

    Both sides are background-masked before feature extraction. Without
    ``labels`` a hit means the exact source item; with ``labels`` (source
    identities) any source of the right identity counts.
    """
    if len(swapped) == 0:
        raise EvaluationError("empty swap set")
    if len(swapped) != len(sources):
        raise EvaluationError("swapped and source sets differ in size")
    ms = torch.as_tensor(np.asarray(masks_swapped), dtype=swapped.dtype)[:, None]
    mr = torch.as_tensor(np.asarray(masks_sources), dtype=sources.dtype)[:, None]
    q = id_encoder(swapped * ms).cpu().numpy()
    g = id_encoder(sources * mr).cpu().numpy()
    ranks = retrieval_ranks(q, g, labels)
    top1, top5 = topk_from_ranks(ranks)
    return (top1, top5, ranks) if return_ranks else (top1, top5)


# ---------------------------------------------------------------------------
# pose / expression


class PoseExprError(NamedTuple):
    pose_l2: float
    expr_l2: float
    n_excluded: int = 0


def pose_expr_error(swapped, targets, pose_fn: Callable, expr_fn: Callable) -> PoseExprError:
    """Mean Euclidean distance between extractor outputs on swapped and target images.

    Items whose extractor raises or returns non-finite values are excluded
    and counted.
    """
    if len(swapped) != len(targets):
        raise EvaluationError("swapped and target sets differ in size")
    pose_d, expr_d, excluded = [], [], 0
    for a, b in zip(swapped, targets):
        try:
            pa, pb = (np.atleast_1d(np.asarray(pose_fn(x), dtype=np.float64)) for x in (a, b))
            ea, eb = (np.atleast_1d(np.asarray(expr_fn(x), dtype=np.float64)) for x in (a, b))
        except Exception as exc:
            log.warning("extractor failed: %s", exc)
            excluded += 1
            continue
        if not all(np.isfinite(v).all() for v in (pa, pb, ea, eb)):
            excluded += 1
            continue
        pose_d.append(float(np.linalg.norm(pa - pb)))
        expr_d.append(float(np.linalg.norm(ea - eb)))
    if not pose_d:
        raise EvaluationError("every item was excluded by the extractors")
    return PoseExprError(float(np.mean(pose_d)), float(np.mean(expr_d)), excluded)


# ---------------------------------------------------------------------------
# Fréchet distance


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_feature_distance(features_a, features_b, shrinkage: Optional[float] = None) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2).

    ``shrinkage`` in (0, 1] blends each covariance toward a scaled identity;
    without it both sets need more samples than feature dimensions.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise EvaluationError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    d = a.shape[1]
    if shrinkage is None and min(len(a), len(b)) < d + 1:
        raise EvaluationError(f"need at least {d + 1} samples per set for {d}-dim features (or shrinkage)")
    if min(len(a), len(b)) < 2:
        raise EvaluationError("need at least 2 samples per set")

    def cov(x):
        c = np.cov(x, rowvar=False).reshape(d, d)
        if shrinkage:
            c = (1.0 - shrinkage) * c + shrinkage * (np.trace(c) / d) * np.eye(d)
        return c

    ca, cb = cov(a), cov(b)
    diff = a.mean(0) - b.mean(0)
    sa = _sqrtm_psd(ca)
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(sa @ cb @ sa), 0.0, None)).sum()
    val = float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * cross)
    return max(val, 0.0)


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class EvalReport:
    frechet_distance: float
    frechet_baseline: float
    id_top1: float
    id_top5: float
    id_top1_exact: float
    id_top5_exact: float
    pose_l2: float
    expr_l2: float
    pose_l2_baseline: float
    background_mae: dict
    n_pairs: int
    n_failed: int
    n_excluded: int
    config_hash: str
    seed: int
    n_steps: int
    preset: str
    digests: list = field(default_factory=list)
    partial: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def make_pairs(identities: np.ndarray, pool: np.ndarray, n_pairs: int, seed: int) -> list[tuple[int, int]]:
    """``n_pairs`` (source, target) item pairs from ``pool`` with distinct identities.

    Sources are distinct items; so are targets. Items are grouped by identity
    and every source is paired with the item one largest-group-length further
    along the grouped order, which never lands in the same identity.
    """
    if n_pairs <= 0:
        raise EvaluationError("n_pairs must be positive")
    if n_pairs > len(pool):
        raise EvaluationError(f"n_pairs={n_pairs} exceeds the split size {len(pool)}")
    rng = np.random.default_rng([seed, 99])
    chosen = np.sort(rng.choice(pool, size=n_pairs, replace=False))
    order = chosen[np.argsort(identities[chosen], kind="stable")]
    counts = np.bincount(identities[order])
    shift = int(counts.max())
    if shift * 2 > n_pairs:
        raise EvaluationError("identity groups too unbalanced for disjoint-identity pairing")
    targets = np.roll(order, shift)
    pairs = [(int(s), int(t)) for s, t in zip(order, targets)]
    perm = rng.permutation(len(pairs))
    return [pairs[i] for i in perm]


def background_mae(swapped: torch.Tensor, targets: torch.Tensor, masks) -> float:
    keep = 1.0 - torch.as_tensor(np.asarray(masks), dtype=swapped.dtype)[:, None]
    per = ((swapped - targets).abs() * keep).sum(dim=(1, 2, 3)) / (keep.sum(dim=(1, 2, 3)) * swapped.shape[1]).clamp_min(1)
    return float(per.mean())


def run_benchmark(
    bundle: Bundle,
    oracle,
    dataset,
    n_pairs: int = 64,
    seed: int = 0,
    n_steps: int = 50,
    extra_steps: Sequence[int] = (5,),
    preset="face",
    split: str = "val",
    reference_split: str = "train",
    shrinkage: float = 0.1,
    out_dir: Optional[str | Path] = None,
) -> EvalReport:
    """Swap ``n_pairs`` seeded pairs from ``split`` and compute every metric.

    The Fréchet reference is a seeded subset of ``reference_split`` of the
    same size; the baseline is the distance from the real targets to that
    reference. ``extra_steps`` are additional step counts for which only the
    background error is measured.
    """
    pool = dataset.split_indices(split)
    ids = dataset.identities
    pairs = make_pairs(ids, pool, n_pairs, seed)
    cats = resolve_preset(preset)

    def run(steps):
        outs, failed = [], []
        for k, (s, t) in enumerate(pairs):
            req = SwapRequest(
                x_src=dataset.images[s],
                x_tar=dataset.images[t],
                labels_src=dataset.labels[s],
                labels_tar=dataset.labels[t],
                preset=preset,
                n_steps=steps,
                seed=seed * 100003 + k,
                landmarks_tar=dataset.landmarks[t],
            )
            try:
                outs.append(swap(bundle, req))
            except Exception as exc:
                log.warning("pair %d failed: %s", k, exc)
                outs.append(None)
                failed.append(k)
        return outs, failed

    outs, failed = run(n_steps)
    ok = [k for k in range(len(pairs)) if outs[k] is not None]
    if not ok:
        raise EvaluationError("every swap failed")
    src = torch.stack([dataset.images[pairs[k][0]] for k in ok])
    tar = torch.stack([dataset.images[pairs[k][1]] for k in ok])
    sw = torch.stack([outs[k] for k in ok])
    m_src = np.stack([category_mask(dataset.labels[pairs[k][0]], cats) for k in ok])
    m_tar = np.stack([category_mask(dataset.labels[pairs[k][1]], cats) for k in ok])
    src_ids = ids[[pairs[k][0] for k in ok]]

    suite = bundle.suite
    top1, top5, ranks = id_retrieval(sw, src, m_tar, m_src, suite.identity, labels=src_ids, return_ranks=True)
    top1_x, top5_x, ranks_x = id_retrieval(sw, src, m_tar, m_src, suite.identity, return_ranks=True)

    with torch.no_grad():
        pe = pose_expr_error(
            sw, tar, lambda x: oracle.pose(x[None]).numpy(), lambda x: oracle.expression(x[None]).numpy()
        )
        pose_tar = oracle.pose(tar).numpy()
    pose_true = np.array([dataset.records[pairs[k][1]]["pose"] for k in ok])
    pose_baseline = float(np.mean(np.abs(pose_tar - pose_true)))

    ref_pool = dataset.split_indices(reference_split)
    ref_idx = np.sort(np.random.default_rng([seed, 7]).choice(ref_pool, size=min(len(ok), len(ref_pool)), replace=False))
    with torch.no_grad():
        f_ref = suite.semantic(dataset.images[ref_idx]).numpy()
        f_sw = suite.semantic(sw).numpy()
        f_tar = suite.semantic(tar).numpy()
    fd = frechet_feature_distance(f_sw, f_ref, shrinkage=shrinkage)
    fd_base = frechet_feature_distance(f_tar, f_ref, shrinkage=shrinkage)

    bg = {str(n_steps): background_mae(sw, tar, m_tar)}
    for steps in extra_steps:
        more, _ = run(steps)
        keep = [k for k in ok if more[k] is not None]
        bg[str(steps)] = background_mae(
            torch.stack([more[k] for k in keep]),
            torch.stack([dataset.images[pairs[k][1]] for k in keep]),
            np.stack([category_mask(dataset.labels[pairs[k][1]], cats) for k in keep]),
        )

    report = EvalReport(
        frechet_distance=fd,
        frechet_baseline=fd_base,
        id_top1=top1,
        id_top5=top5,
        id_top1_exact=top1_x,
        id_top5_exact=top5_x,
        pose_l2=pe.pose_l2,
        expr_l2=pe.expr_l2,
        pose_l2_baseline=pose_baseline,
        background_mae=bg,
        n_pairs=len(pairs),
        n_failed=len(failed),
        n_excluded=pe.n_excluded,
        config_hash=bundle.config_hash,
        seed=seed,
        n_steps=n_steps,
        preset=preset if isinstance(preset, str) else ",".join(map(str, sorted(preset))),
        digests=[image_digest(outs[k]) if outs[k] is not None else None for k in range(len(pairs))],
        partial=bool(failed),
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.json").write_text(report.to_json())
        with open(out / "retrieval_ranks.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pair", "source", "target", "source_identity", "rank_identity", "rank_exact"])
            for j, k in enumerate(ok):
                w.writerow([k, pairs[k][0], pairs[k][1], int(src_ids[j]), int(ranks[j]), int(ranks_x[j])])
    return report
