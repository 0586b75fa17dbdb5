"""Inverse-renderer regressors for the toy factors (pose angle, expression)."""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .render import POSE_RANGE

log = logging.getLogger(__name__)

POSE_SCALE = POSE_RANGE[1]


class FactorRegressor(nn.Module):
    """Image -> (pose degrees, expression). Trained on clean renders only."""

    def __init__(self, width: int = 32):
        super().__init__()
        w = width
        self.width = width
        self.net = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(w, w, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(4 * w, 4 * w, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(4 * w * 16, 128), nn.SiLU(), nn.Linear(128, 2))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.head(F.adaptive_avg_pool2d(self.net(x), 4))
        return torch.stack([out[:, 0] * POSE_SCALE, out[:, 1]], dim=1)

    @torch.no_grad()
    def pose(self, x: torch.Tensor) -> torch.Tensor:
        return self(x)[:, 0]

    @torch.no_grad()
    def expression(self, x: torch.Tensor) -> torch.Tensor:
        return self(x)[:, 1]

    def config(self) -> dict:
        return {"width": self.width}


def train_factor_regressor(
    reg: FactorRegressor,
    pool,
    steps: int = 2000,
    batch_size: int = 64,
    lr: float = 2e-3,
    seed: int = 0,
) -> list[float]:
    """Fit on a rendered pool ``(images, labels, factors)``; factors columns are (id, pose, expr, light)."""
    images, _, factors = pool
    target = torch.as_tensor(np.stack([factors[:, 1] / POSE_SCALE, factors[:, 2]], axis=1), dtype=torch.float32)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(reg.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps, pct_start=0.1)
    losses = []
    reg.train()
    for step in range(steps):
        idx = torch.randint(0, images.shape[0], (batch_size,), generator=gen)
        pred = reg(images[idx])
        pred = torch.stack([pred[:, 0] / POSE_SCALE, pred[:, 1]], dim=1)
        loss = F.mse_loss(pred, target[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        if step % 500 == 0:
            log.info("factor regressor step %d loss %.5f", step, losses[-1])
    reg.eval()
    return losses
