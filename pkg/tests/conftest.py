import numpy as np
import pytest
import torch

from inpaint_swap.conditioning import EncoderSuite
from inpaint_swap.encoders import IdentityEncoder, SemanticEncoder
from inpaint_swap.networks import Denoiser, DenoiserConfig
from inpaint_swap.toy.dataset import generate_toy_dataset, load_dataset


def tiny_suite(dim: int = 16, dtype=torch.float32, seed: int = 0) -> EncoderSuite:
    torch.manual_seed(seed)
    suite = EncoderSuite(SemanticEncoder(out_dim=12, width=8), IdentityEncoder(emb_dim=8, width=8), dim=dim)
    return suite.to(dtype)


def tiny_model(latent_channels: int = 3, dim: int = 16, dtype=torch.float32, seed: int = 0) -> Denoiser:
    torch.manual_seed(seed)
    cfg = DenoiserConfig(latent_channels=latent_channels, base_channels=8, channel_mult=(1, 2), context_dim=dim, groups=4)
    return Denoiser(cfg).to(dtype)


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    generate_toy_dataset(4, 8, 16, seed=3, out_dir=root)
    return root


@pytest.fixture(scope="session")
def toy_ds(toy_dir):
    return load_dataset(toy_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
