"""Versioned checkpoint container for the denoiser, codec, encoder suite and train state."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .conditioning import EncoderSuite, FusionWeights
from .config import TrainConfig, from_dict
from .diffusion import NoiseSchedule, build_schedule
from .encoders import (
    IdentityEncoder,
    SemanticEncoder,
    freeze,
    pretrain_identity_encoder,
    pretrain_semantic_encoder,
    render_pool,
)
from .networks import Codec, ConvAutoencoderCodec, Denoiser, DenoiserConfig, PixelCodec, codec_from_config, train_codec
from .toy.oracle import FactorRegressor, train_factor_regressor

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Featurizers:
    """Frozen networks pretrained on renders: semantic + identity encoders, the factor oracle, the codec."""

    semantic: SemanticEncoder
    identity: IdentityEncoder
    oracle: FactorRegressor
    codec: Codec


@dataclass
class Bundle:
    """Everything needed to run inference or resume training."""

    config: TrainConfig
    sched: NoiseSchedule
    model: Denoiser
    suite: EncoderSuite
    codec: Codec
    train_state: Optional[dict] = None

    @property
    def config_hash(self) -> str:
        return self.config.hash()


def _codec_for(cfg: TrainConfig) -> Codec:
    if cfg.codec == "pixel":
        return PixelCodec(3)
    return ConvAutoencoderCodec(cfg.codec_latent_channels)


def denoiser_config(cfg: TrainConfig, codec: Codec) -> DenoiserConfig:
    return DenoiserConfig(
        latent_channels=codec.latent_channels,
        base_channels=cfg.base_channels,
        channel_mult=tuple(cfg.channel_mult),
        context_dim=cfg.context_dim,
    )


def pretrain_featurizers(cfg: TrainConfig, n_identities: int, size: int) -> Featurizers:
    """Deterministically pretrain the frozen featurizers on freshly rendered faces."""
    torch.manual_seed(cfg.seed)
    pool = render_pool(cfg.pretrain_pool, n_identities, size, seed=cfg.seed + 101)
    semantic = SemanticEncoder(cfg.semantic_dim, n_identities)
    pretrain_semantic_encoder(semantic, pool, steps=cfg.semantic_steps, seed=cfg.seed)
    torch.manual_seed(cfg.seed + 1)
    identity = IdentityEncoder(cfg.identity_dim, n_identities)
    pretrain_identity_encoder(identity, pool, steps=cfg.identity_steps, seed=cfg.seed)
    torch.manual_seed(cfg.seed + 2)
    codec = _codec_for(cfg)
    if isinstance(codec, ConvAutoencoderCodec):
        train_codec(codec, pool[0], steps=cfg.codec_steps, seed=cfg.seed)
    torch.manual_seed(cfg.seed + 3)
    oracle_pool = render_pool(cfg.oracle_pool, n_identities, size, seed=cfg.seed + 202)
    oracle = FactorRegressor(width=16)
    train_factor_regressor(oracle, oracle_pool, steps=cfg.oracle_steps, seed=cfg.seed)
    return Featurizers(freeze(semantic), freeze(identity), freeze(oracle), freeze(codec))


def save_featurizers(feats: Featurizers, path: str | Path) -> None:
    blob = {
        "format_version": FORMAT_VERSION,
        "semantic": (feats.semantic.config(), feats.semantic.state_dict()),
        "identity": (feats.identity.config(), feats.identity.state_dict()),
        "oracle": (feats.oracle.config(), feats.oracle.state_dict()),
        "codec": (feats.codec.config(), feats.codec.state_dict()),
    }
    _atomic_save(blob, path)


def load_featurizers(path: str | Path) -> Featurizers:
    blob = _load(path)
    sem = SemanticEncoder(**blob["semantic"][0])
    sem.load_state_dict(blob["semantic"][1])
    ide = IdentityEncoder(**blob["identity"][0])
    ide.load_state_dict(blob["identity"][1])
    ora = FactorRegressor(**blob["oracle"][0])
    ora.load_state_dict(blob["oracle"][1])
    codec = codec_from_config(blob["codec"][0])
    codec.load_state_dict(blob["codec"][1])
    return Featurizers(freeze(sem), freeze(ide), freeze(ora), freeze(codec))


def build_bundle(cfg: TrainConfig, feats: Featurizers) -> Bundle:
    """Fresh (untrained) denoiser and condition maps around pretrained featurizers."""
    torch.manual_seed(cfg.seed)
    sched = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.schedule)
    model = Denoiser(denoiser_config(cfg, feats.codec))
    suite = EncoderSuite(
        feats.semantic,
        feats.identity,
        dim=cfg.context_dim,
        weights=FusionWeights(cfg.w_clip, cfg.w_id, cfg.w_lm),
    )
    return Bundle(cfg, sched, model, suite, feats.codec)


def _atomic_save(blob: dict, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(blob, tmp)
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot write checkpoint ({exc})") from exc


def _load(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: checkpoint not found")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # corrupt or foreign file
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(blob, dict) or blob.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {blob.get('format_version') if isinstance(blob, dict) else None}")
    return blob


def save_checkpoint(bundle: Bundle, path: str | Path, train_state: Optional[dict] = None) -> None:
    blob = {
        "format_version": FORMAT_VERSION,
        "config_hash": bundle.config_hash,
        "config": bundle.config.to_dict(),
        "schedule": {"alphas": np.asarray(bundle.sched.alphas)},
        "denoiser": (bundle.model.cfg.to_dict(), bundle.model.state_dict()),
        "suite": (bundle.suite.config(), bundle.suite.state_dict()),
        "codec": (bundle.codec.config(), bundle.codec.state_dict()),
        "train_state": train_state,
    }
    _atomic_save(blob, path)


def load_checkpoint(path: str | Path) -> Bundle:
    blob = _load(path)
    cfg = from_dict(blob["config"])
    if cfg.hash() != blob["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    sched = NoiseSchedule(np.asarray(blob["schedule"]["alphas"]))
    model = Denoiser(DenoiserConfig.from_dict(blob["denoiser"][0]))
    model.load_state_dict(blob["denoiser"][1])
    suite = EncoderSuite.from_config(blob["suite"][0])
    suite.load_state_dict(blob["suite"][1])
    codec = codec_from_config(blob["codec"][0])
    codec.load_state_dict(blob["codec"][1])
    freeze(codec)
    model.eval()
    suite.eval()
    return Bundle(cfg, sched, model, suite, codec, blob.get("train_state"))


def state_digest(module: torch.nn.Module) -> str:
    """sha256 over a module's state dict, for bitwise-equality checks."""
    import hashlib

    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
