"""Small frozen encoders that stand in for the large pretrained ones.

* ``SemanticEncoder`` replaces the CLIP image tower: a conv net whose pooled
  feature carries identity, pose, expression and lighting; its intermediate
  activations also back the perceptual distance.
* ``IdentityEncoder`` replaces the face-recognition network: a conv embedding
  trained with a cosine-margin classifier on face-masked crops.
"""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import AugmentConfig, reference_augment
from .masks import FACE_CATEGORIES, HEAD_CATEGORIES, category_mask

log = logging.getLogger(__name__)


class ConvBackbone(nn.Module):
    def __init__(self, width: int = 32, groups: int = 8):
        super().__init__()
        w = width
        self.stages = nn.ModuleList(
            [
                nn.Sequential(nn.Conv2d(3, w, 3, padding=1), nn.GroupNorm(groups, w), nn.SiLU()),
                nn.Sequential(nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.GroupNorm(groups, 2 * w), nn.SiLU()),
                nn.Sequential(nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.GroupNorm(groups, 4 * w), nn.SiLU()),
                nn.Sequential(nn.Conv2d(4 * w, 4 * w, 3, stride=2, padding=1), nn.GroupNorm(groups, 4 * w), nn.SiLU()),
            ]
        )
        self.out_channels = 4 * w

    def feature_maps(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats

    def forward(self, x):
        return self.feature_maps(x)[-1]


class SemanticEncoder(nn.Module):
    """Image -> unit-norm feature of width ``out_dim`` (the CLIP stand-in)."""

    def __init__(self, out_dim: int = 512, n_identities: int = 8, width: int = 32):
        super().__init__()
        self.out_dim = out_dim
        self.n_identities = n_identities
        self.width = width
        self.backbone = ConvBackbone(width)
        self.proj = nn.Linear(self.backbone.out_channels * 16, out_dim)
        # pretraining heads; unused afterwards
        self.id_head = nn.Linear(out_dim, n_identities)
        self.factor_head = nn.Linear(out_dim, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.backbone(x)
        h = F.adaptive_avg_pool2d(h, 4).flatten(1)
        return F.normalize(self.proj(h), dim=-1, eps=1e-8)

    def feature_maps(self, x):
        return self.backbone.feature_maps(x)

    def config(self) -> dict:
        return {"out_dim": self.out_dim, "n_identities": self.n_identities, "width": self.width}


class IdentityEncoder(nn.Module):
    """Face crop -> unit-norm identity embedding."""

    def __init__(self, emb_dim: int = 128, n_identities: int = 8, width: int = 32, margin: float = 0.2, scale: float = 16.0):
        super().__init__()
        self.emb_dim = emb_dim
        self.n_identities = n_identities
        self.width = width
        self.margin = margin
        self.scale = scale
        self.backbone = ConvBackbone(width)
        self.proj = nn.Linear(self.backbone.out_channels * 16, emb_dim)
        self.class_centers = nn.Parameter(torch.randn(n_identities, emb_dim) * 0.1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.adaptive_avg_pool2d(self.backbone(x), 4).flatten(1)
        return F.normalize(self.proj(h), dim=-1, eps=1e-8)

    def margin_logits(self, emb: torch.Tensor, labels: torch.Tensor | None = None) -> torch.Tensor:
        cos = emb @ F.normalize(self.class_centers, dim=-1).T
        if labels is not None:
            cos = cos - self.margin * F.one_hot(labels, self.n_identities).to(cos.dtype)
        return self.scale * cos

    def config(self) -> dict:
        return {"emb_dim": self.emb_dim, "n_identities": self.n_identities, "width": self.width}


def perceptual_distance(encoder: SemanticEncoder, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """LPIPS-style distance on the semantic encoder's activations, one value per item.

    Channel vectors are unit-normalised per position; squared differences
    are averaged over positions and over layers.
    """
    total = 0.0
    maps_a, maps_b = encoder.feature_maps(a), encoder.feature_maps(b)
    for fa, fb in zip(maps_a, maps_b):
        na = fa / (fa.pow(2).sum(1, keepdim=True) + 1e-10).sqrt()
        nb = fb / (fb.pow(2).sum(1, keepdim=True) + 1e-10).sqrt()
        total = total + (na - nb).pow(2).sum(1).mean(dim=(1, 2))
    return total / len(maps_a)


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


# ---------------------------------------------------------------------------
# pretraining on rendered faces


def render_pool(n: int, n_identities: int, size: int, seed: int):
    """Render ``n`` random faces; returns images, label maps, factor array (id, pose, expr, light)."""
    from .toy.render import random_spec, render_toy_face

    rng = np.random.default_rng(seed)
    images, labels, factors = [], [], []
    for i in range(n):
        spec = random_spec(rng, i % n_identities)
        img, lab, _ = render_toy_face(spec, size)
        images.append(img)
        labels.append(lab)
        factors.append((spec.identity, spec.pose, spec.expression, spec.lighting))
    return torch.from_numpy(np.stack(images)), np.stack(labels), np.array(factors)


def _masked(images: torch.Tensor, labels: np.ndarray, cats) -> torch.Tensor:
    m = torch.from_numpy(np.stack([category_mask(l, cats) for l in labels])).to(images.dtype)
    return images * m[:, None]


def pretrain_semantic_encoder(
    enc: SemanticEncoder,
    pool,
    steps: int = 1500,
    batch_size: int = 64,
    lr: float = 2e-3,
    seed: int = 0,
) -> list[float]:
    """Factor-supervised pretraining: identity classification plus pose/expression/lighting regression.

    Half of every batch is shown face-masked so that reference crops map
    into the same feature space.
    """
    images, labels, factors = pool
    masked = _masked(images, labels, HEAD_CATEGORIES)
    ids = torch.as_tensor(factors[:, 0], dtype=torch.long)
    targets = torch.as_tensor(
        np.stack([factors[:, 1] / 30.0, factors[:, 2], (factors[:, 3] - 0.95) / 0.2], axis=1), dtype=torch.float32
    )
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(enc.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    losses = []
    enc.train()
    for step in range(steps):
        idx = torch.randint(0, images.shape[0], (batch_size,), generator=gen)
        half = batch_size // 2
        x = torch.cat([images[idx[:half]], masked[idx[half:]]])
        feat = enc(x)
        loss = F.cross_entropy(enc.id_head(feat) * 10.0, ids[idx]) + F.mse_loss(enc.factor_head(feat), targets[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        if step % 500 == 0:
            log.info("semantic pretrain step %d loss %.4f", step, losses[-1])
    return losses


def pretrain_identity_encoder(
    enc: IdentityEncoder,
    pool,
    steps: int = 1500,
    batch_size: int = 64,
    lr: float = 2e-3,
    seed: int = 0,
    augment: AugmentConfig = AugmentConfig(),
) -> list[float]:
    """Cosine-margin classification on face- or head-masked, reference-augmented crops."""
    images, labels, factors = pool
    views = [_masked(images, labels, FACE_CATEGORIES), _masked(images, labels, HEAD_CATEGORIES)]
    ids = torch.as_tensor(factors[:, 0], dtype=torch.long)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(enc.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    losses = []
    enc.train()
    for step in range(steps):
        idx = torch.randint(0, images.shape[0], (batch_size,), generator=gen)
        which = rng.integers(0, 2, size=batch_size)
        x = torch.stack([views[w][i] for w, i in zip(which, idx.tolist())])
        # a quarter of the batch stays unaugmented so clean crops are covered too
        x = torch.stack([reference_augment(xi, rng, augment) if k >= batch_size // 4 else xi for k, xi in enumerate(x)])
        emb = enc(x)
        loss = F.cross_entropy(enc.margin_logits(emb, ids[idx]), ids[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        if step % 500 == 0:
            log.info("identity pretrain step %d loss %.4f", step, losses[-1])
    return losses
