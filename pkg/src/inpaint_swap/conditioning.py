"""Condition feature f from identity, landmark and disentangled semantic features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn

from .encoders import IdentityEncoder, SemanticEncoder, freeze

N_LANDMARKS = 68


class EncoderError(RuntimeError):
    pass


@dataclass(frozen=True)
class FusionWeights:
    clip: float = 1.0
    id: float = 10.0
    lm: float = 0.05

    def __post_init__(self):
        ws = (self.clip, self.id, self.lm)
        if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
            raise ValueError(f"fusion weights must be nonnegative with one positive, got {ws}")


@dataclass
class ConditionFeature:
    f: torch.Tensor
    f_clip: Optional[torch.Tensor] = None
    f_id: Optional[torch.Tensor] = None
    f_lm: Optional[torch.Tensor] = None

    @property
    def dim(self) -> int:
        return int(self.f.shape[-1])


class EncoderSuite(nn.Module):
    """Frozen featurizers plus the trainable maps into the D-dim condition space.

    ``landmark_extractor`` is optional: the toy pipeline reads ground-truth
    landmarks from the dataset instead.
    """

    def __init__(
        self,
        semantic: SemanticEncoder,
        identity: IdentityEncoder,
        dim: int = 768,
        weights: FusionWeights = FusionWeights(),
        landmark_extractor: Optional[Callable] = None,
    ):
        super().__init__()
        self.semantic = freeze(semantic)
        self.identity = freeze(identity)
        self.dim = dim
        self.weights = weights
        self.landmark_extractor = landmark_extractor
        self.mlp_id = nn.Linear(identity.emb_dim, dim)
        self.mlp_lm = nn.Linear(N_LANDMARKS * 2, dim)
        self.proj_ref = nn.Linear(semantic.out_dim, dim)
        self.proj_tar = nn.Linear(semantic.out_dim, dim)

    def train(self, mode: bool = True):
        super().train(mode)
        # the featurizers stay in eval mode regardless
        self.semantic.eval()
        self.identity.eval()
        return self

    def trainable_parameters(self):
        for m in (self.mlp_id, self.mlp_lm, self.proj_ref, self.proj_tar):
            yield from m.parameters()

    def frozen_parameters(self):
        yield from self.semantic.parameters()
        yield from self.identity.parameters()

    def config(self) -> dict:
        return {
            "dim": self.dim,
            "weights": [self.weights.clip, self.weights.id, self.weights.lm],
            "semantic": self.semantic.config(),
            "identity": self.identity.config(),
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "EncoderSuite":
        return cls(
            SemanticEncoder(**cfg["semantic"]),
            IdentityEncoder(**cfg["identity"]),
            dim=cfg["dim"],
            weights=FusionWeights(*cfg["weights"]),
        )


def _batched(image: torch.Tensor) -> torch.Tensor:
    if image.ndim == 3:
        return image[None]
    if image.ndim != 4:
        raise EncoderError(f"expected (C, H, W) or (B, C, H, W) image, got {tuple(image.shape)}")
    return image


def embed_id(suite: EncoderSuite, image: torch.Tensor) -> torch.Tensor:
    """f_id = MLP_id(identity_featurizer(image))."""
    feat = suite.identity(_batched(image))
    if not torch.isfinite(feat).all():
        raise EncoderError("identity featurizer produced non-finite output")
    return suite.mlp_id(feat)


def embed_landmarks(suite: EncoderSuite, landmarks) -> torch.Tensor:
    """Flatten 68x2 landmarks to 136 values and map them linearly into R^D."""
    lm = torch.as_tensor(np.asarray(landmarks) if not isinstance(landmarks, torch.Tensor) else landmarks)
    if lm.ndim == 2:
        lm = lm[None]
    if lm.shape[-2:] != (N_LANDMARKS, 2):
        raise ValueError(f"landmarks must have shape (68, 2), got {tuple(lm.shape[-2:])}")
    lm = lm.to(suite.mlp_lm.weight.dtype)
    return suite.mlp_lm(lm.flatten(1))


def disentangle_clip(suite: EncoderSuite, ref_image: torch.Tensor, tar_image: torch.Tensor) -> torch.Tensor:
    """f_clip = P_ref(semantic(ref)) + P_tar(semantic(tar))."""
    f_ref = suite.semantic(_batched(ref_image))
    f_tar = suite.semantic(_batched(tar_image))
    if not (torch.isfinite(f_ref).all() and torch.isfinite(f_tar).all()):
        raise EncoderError("semantic encoder produced non-finite output")
    return suite.proj_ref(f_ref) + suite.proj_tar(f_tar)


def fuse_condition(f_clip, f_id, f_lm, w: FusionWeights = FusionWeights()) -> ConditionFeature:
    """f = w_clip f_clip + w_id f_id + w_lm f_lm."""
    f_clip, f_id, f_lm = (torch.as_tensor(v) for v in (f_clip, f_id, f_lm))
    if not (f_clip.shape[-1] == f_id.shape[-1] == f_lm.shape[-1]):
        raise ValueError(
            f"dimension mismatch: clip {f_clip.shape[-1]}, id {f_id.shape[-1]}, lm {f_lm.shape[-1]}"
        )
    f = w.clip * f_clip + w.id * f_id + w.lm * f_lm
    return ConditionFeature(f, f_clip, f_id, f_lm)


def build_condition(
    suite: EncoderSuite, ref_image: torch.Tensor, tar_image: torch.Tensor, landmarks
) -> ConditionFeature:
    """Full condition: identity and semantic-ref from the reference crop, semantic-tar and landmarks from the target."""
    if landmarks is None:
        if suite.landmark_extractor is None:
            raise EncoderError("no landmarks given and the suite has no landmark extractor")
        landmarks = suite.landmark_extractor(tar_image)
    return fuse_condition(
        disentangle_clip(suite, ref_image, tar_image),
        embed_id(suite, ref_image),
        embed_landmarks(suite, landmarks),
        suite.weights,
    )
