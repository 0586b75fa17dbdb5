"""The two training pipelines and the optimisation loop.

(a) self-supervised inpainting: reference cut from the target itself, ε-MSE.
(b) cross-pair enhancement: N-step differentiable DDIM from pure noise, identity
    and perceptual losses on every clean-image estimate.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .augment import NO_AUGMENT, AugmentConfig, reference_augment, tps_deform_mask
from .checkpoint import (
    Bundle,
    Featurizers,
    build_bundle,
    load_checkpoint,
    pretrain_featurizers,
    save_checkpoint,
    save_featurizers,
    state_digest,
)
from .conditioning import EncoderSuite, build_condition
from .config import TrainConfig, save_config
from .diffusion import NoiseSchedule, ddim_sample, forward_diffuse, make_step_schedule
from .encoders import perceptual_distance
from .masks import masks_for_policy
from .networks import Codec, Denoiser, assemble_input, predict_noise

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    id: float = 0.3
    ps: float = 0.1

    def __post_init__(self):
        if self.id < 0 or self.ps < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class SwapSample:
    """A batch of training examples.

    ``m_inp`` is the (possibly shape-augmented) region actually blanked in
    ``x_inp``; it is also the mask channel fed to the denoiser.
    """

    x_tar: torch.Tensor
    x_ref: torch.Tensor
    x_inp: torch.Tensor
    m_tar: torch.Tensor
    m_inp: torch.Tensor
    landmarks: torch.Tensor
    x_src: Optional[torch.Tensor] = None
    m_src: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return int(self.x_tar.shape[0])


def _tps_scale(cfg: TrainConfig, rng: np.random.Generator) -> float:
    return float(rng.uniform(cfg.tps_scale_min, cfg.tps_scale_max))


def _inpaint(x_tar: torch.Tensor, m_tar: np.ndarray, cfg: TrainConfig, rng: np.random.Generator):
    s = _tps_scale(cfg, rng)
    if m_tar.any() and s > 0:
        deformed = tps_deform_mask(m_tar, s, rng, base=cfg.tps_base_amplitude)
    else:
        deformed = m_tar.copy()
    return x_tar * torch.from_numpy(1.0 - deformed.astype(np.float32)), deformed


def make_sample(
    images: torch.Tensor,
    labels: np.ndarray,
    landmarks: np.ndarray,
    tar_idx,
    src_idx,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> SwapSample:
    """Build a batch. ``src_idx=None`` gives pipeline (a) samples (reference cut from the target)."""
    aug = AugmentConfig() if cfg.reference_augment else NO_AUGMENT
    rows = {k: [] for k in ("x_tar", "x_ref", "x_inp", "m_tar", "m_inp", "x_src", "m_src")}
    for k, ti in enumerate(tar_idx):
        si = ti if src_idx is None else src_idx[k]
        (m_tar, m_src), _ = masks_for_policy(
            [labels[ti], labels[si]], cfg.mask_policy, rng, (cfg.mask_n_min, cfg.mask_n_max)
        )
        x_tar = images[ti]
        x_src = images[si]
        m_src_t = torch.from_numpy(m_src.astype(np.float32))
        x_ref = reference_augment(x_src * m_src_t, rng, aug)
        x_inp, m_inp = _inpaint(x_tar, m_tar, cfg, rng)
        rows["x_tar"].append(x_tar)
        rows["x_ref"].append(x_ref)
        rows["x_inp"].append(x_inp)
        rows["m_tar"].append(torch.from_numpy(m_tar.astype(np.float32)))
        rows["m_inp"].append(torch.from_numpy(m_inp.astype(np.float32)))
        rows["x_src"].append(x_src)
        rows["m_src"].append(m_src_t)
    out = {k: torch.stack(v) for k, v in rows.items()}
    lms = torch.as_tensor(np.stack([landmarks[i] for i in tar_idx]), dtype=torch.float32)
    return SwapSample(landmarks=lms, **out)


def diffusion_loss(
    model: Denoiser,
    sample: SwapSample,
    codec: Codec,
    sched: NoiseSchedule,
    suite: EncoderSuite,
    gen: torch.Generator,
    offset_noise: float = 0.0,
) -> torch.Tensor:
    """ε-prediction MSE of the self-supervised inpainting pipeline.

    ``offset_noise`` > 0 adds a per-image, per-channel constant to ε so that the
    mean of z_t stops agreeing with the clean image; the model then has to read
    low-frequency colour from the inpaint context instead of from z_t.
    """
    z0 = codec.encode(sample.x_tar)
    z_inp = codec.encode(sample.x_inp)
    b = z0.shape[0]
    t = torch.randint(1, sched.T + 1, (b,), generator=gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    if offset_noise > 0:
        eps = eps + offset_noise * torch.randn((b, z0.shape[1], 1, 1), generator=gen, dtype=z0.dtype)
    z_t = forward_diffuse(z0, t, eps, sched)
    cond = build_condition(suite, sample.x_ref, sample.x_tar, sample.landmarks)
    eps_pred = predict_noise(model, assemble_input(z_t, z_inp, sample.m_inp, t, cond.f))
    return F.mse_loss(eps_pred, eps)


def enhancement_losses(
    model: Denoiser,
    sample: SwapSample,
    codec: Codec,
    sched: NoiseSchedule,
    suite: EncoderSuite,
    N: int,
    gen: torch.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(L_ID, L_PS) summed over the N visited steps, averaged over the batch."""
    if sample.x_src is None or sample.m_src is None:
        raise ValueError("enhancement losses need a source image and mask")
    z_inp = codec.encode(sample.x_inp)
    cond = build_condition(suite, sample.x_ref, sample.x_tar, sample.landmarks)
    z_T = torch.randn(z_inp.shape, generator=gen, dtype=z_inp.dtype)
    steps = make_step_schedule(sched.T, N)

    def denoise(z, t):
        return predict_noise(model, assemble_input(z, z_inp, sample.m_inp, t, cond.f))

    _, trajectory = ddim_sample(denoise, z_T, steps, sched, differentiable=True)
    with torch.no_grad():
        id_src = suite.identity(sample.x_src * sample.m_src[:, None])
    m_tar = sample.m_tar[:, None]
    l_id = z_inp.new_zeros(())
    l_ps = z_inp.new_zeros(())
    for _, x0 in trajectory:
        x_hat = codec.decode(x0)
        id_sw = suite.identity(x_hat * m_tar)
        l_id = l_id + (1.0 - F.cosine_similarity(id_sw, id_src, dim=-1)).mean()
        l_ps = l_ps + perceptual_distance(suite.semantic, x_hat, sample.x_tar).mean()
    if not (torch.isfinite(l_id) and torch.isfinite(l_ps)):
        raise DivergenceError("non-finite enhancement loss")
    return l_id, l_ps


def total_loss(l_diff, l_id, l_ps, w: LossWeights = LossWeights()):
    return l_diff + w.id * l_id + w.ps * l_ps


# ---------------------------------------------------------------------------
# optimisation loop


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.default_rng([seed, step, 17]).integers(0, 2**62))


def _epoch_batches(train_idx: np.ndarray, seed: int, epoch: int, batch_size: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, epoch, 3]).permutation(train_idx)
    return [perm[i : i + batch_size] for i in range(0, len(perm), batch_size)]


def _cross_pairs(train_idx: np.ndarray, ids: np.ndarray, n: int, rng: np.random.Generator):
    tar = rng.choice(train_idx, size=n, replace=True)
    src = []
    for t in tar:
        pool = train_idx[ids[train_idx] != ids[t]]
        src.append(int(rng.choice(pool)))
    return [int(v) for v in tar], src


def lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    """Learning rate of optimisation step ``step`` out of ``total``."""
    scale = 1.0
    if cfg.warmup_steps and step < cfg.warmup_steps:
        scale = (step + 1) / cfg.warmup_steps
    elif cfg.lr_schedule == "cosine":
        span = max(total - cfg.warmup_steps, 1)
        scale = 0.5 * (1.0 + math.cos(math.pi * (step - cfg.warmup_steps) / span))
    return cfg.lr * scale


def _optimizer(bundle: Bundle) -> torch.optim.Optimizer:
    params = list(bundle.model.parameters()) + list(bundle.suite.trainable_parameters())
    return torch.optim.AdamW(params, lr=bundle.config.lr, weight_decay=bundle.config.weight_decay)


def train(
    cfg: TrainConfig,
    dataset,
    out_dir: str | Path,
    featurizers: Optional[Featurizers] = None,
    resume: Optional[str | Path] = None,
    stop_after: Optional[int] = None,
) -> dict:
    """Run training and write ``checkpoint.pt``, ``featurizers.pt``, ``report.jsonl`` and ``config.json``.

    ``report.jsonl`` holds the per-step losses and is bitwise reproducible;
    wall-clock times go to ``timing.jsonl`` next to it.

    ``resume`` continues from a checkpoint written by a previous call (its
    train state must be present); ``stop_after`` ends the run after that
    many total optimisation steps. Returns a summary dict.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")

    if resume is not None:
        bundle = load_checkpoint(resume)
        if bundle.config_hash != cfg.hash():
            raise ValueError("resume checkpoint was written with a different config")
        if bundle.train_state is None:
            raise ValueError(f"{resume}: checkpoint has no train state")
    else:
        if featurizers is None:
            featurizers = pretrain_featurizers(cfg, int(dataset.identities.max()) + 1, dataset.images.shape[-1])
        save_featurizers(featurizers, out / "featurizers.pt")
        bundle = build_bundle(cfg, featurizers)

    model, suite, codec, sched = bundle.model, bundle.suite, bundle.codec, bundle.sched
    opt = _optimizer(bundle)
    start = 0
    if resume is not None:
        opt.load_state_dict(bundle.train_state["optimizer"])
        start = int(bundle.train_state["step"])
    frozen_before = (state_digest(suite.semantic), state_digest(suite.identity))
    weights = LossWeights(cfg.w_id_loss, cfg.w_ps_loss)

    train_idx = dataset.split_indices("train")
    ids = dataset.identities
    per_epoch = math.ceil(len(train_idx) / cfg.batch_size)
    total = cfg.epochs * per_epoch
    end = total if stop_after is None else min(total, stop_after)
    params = [p for g in opt.param_groups for p in g["params"]]

    model.train()
    suite.train()
    report_path = out / "report.jsonl"
    mode = "a" if resume is not None and report_path.exists() else "w"
    history = []
    t0 = time.perf_counter()
    with open(report_path, mode) as report, open(out / "timing.jsonl", mode) as timing:
        for step in range(start, end):
            epoch, k = divmod(step, per_epoch)
            rng = np.random.default_rng([cfg.seed, step])
            gen = torch.Generator().manual_seed(_step_seed(cfg.seed, step))
            run_a = cfg.mixing == "joint" or step % 2 == 0 or step < cfg.enhancement_start
            run_b = (
                cfg.cross_batch_size > 0
                and step >= cfg.enhancement_start
                and (cfg.mixing == "joint" or step % 2 == 1)
            )

            l_diff = torch.zeros(())
            l_id = torch.zeros(())
            l_ps = torch.zeros(())
            if run_a:
                idx = _epoch_batches(train_idx, cfg.seed, epoch, cfg.batch_size)[k]
                sample = make_sample(dataset.images, dataset.labels, dataset.landmarks, list(idx), None, cfg, rng)
                l_diff = diffusion_loss(model, sample, codec, sched, suite, gen, cfg.offset_noise)
            if run_b:
                tar, src = _cross_pairs(train_idx, ids, cfg.cross_batch_size, rng)
                cross = make_sample(dataset.images, dataset.labels, dataset.landmarks, tar, src, cfg, rng)
                l_id, l_ps = enhancement_losses(model, cross, codec, sched, suite, cfg.n_train_steps, gen)
            loss = total_loss(l_diff, l_id, l_ps, weights)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at step {step}")
            for group in opt.param_groups:
                group["lr"] = lr_at(cfg, step, total)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()

            rec = {
                "step": step,
                "epoch": epoch,
                "l_diff": l_diff.item(),
                "l_id": l_id.item(),
                "l_ps": l_ps.item(),
                "l_total": loss.item(),
            }
            history.append(rec)
            if cfg.log_every and step % cfg.log_every == 0:
                report.write(json.dumps(rec) + "\n")
                report.flush()
                timing.write(json.dumps({"step": step, "wall_time": round(time.perf_counter() - t0, 3)}) + "\n")
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and step + 1 < end:
                save_checkpoint(bundle, out / "checkpoint.pt", {"step": step + 1, "optimizer": opt.state_dict()})
            if step % 200 == 0:
                log.info("step %d/%d  l_diff %.4f  l_id %.4f  l_ps %.4f", step, end, rec["l_diff"], rec["l_id"], rec["l_ps"])

    model.eval()
    suite.eval()
    frozen_after = (state_digest(suite.semantic), state_digest(suite.identity))
    if frozen_after != frozen_before:
        raise RuntimeError("frozen featurizers were modified during training")
    save_checkpoint(bundle, out / "checkpoint.pt", {"step": end, "optimizer": opt.state_dict()})
    return {
        "steps": end,
        "total_steps": total,
        "config_hash": cfg.hash(),
        "history": history,
        "frozen_digests": list(frozen_after),
        "model_digest": state_digest(model),
        "checkpoint": str(out / "checkpoint.pt"),
        "wall_time": time.perf_counter() - t0,
    }
