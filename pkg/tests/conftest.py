import numpy as np
import pytest

from refcycle.policy import (
    ArchDescriptor,
    EncoderConfig,
    PolicyNetwork,
    StateEncoder,
    Vocabulary,
    default_arch,
)
from refcycle.refgame import SceneConfig, make_dataset


def wire_linear_net(encoder: StateEncoder, step_tokens: dict, strength: float = 50.0) -> PolicyNetwork:
    """Hidden-layer-free policy whose greedy output at step t is step_tokens[t],
    driven purely by the positional one-hot block."""
    arch = ArchDescriptor(encoder.input_dim, (), encoder.vocab.size)
    net = PolicyNetwork(arch)
    d, v = encoder.input_dim, encoder.vocab.size
    w = net.params[: d * v].reshape(d, v)
    for t, tok in step_tokens.items():
        w[encoder.off_pos + t, tok] = strength
    return net


@pytest.fixture(scope="session")
def tiny_cfg():
    return SceneConfig(grid_size=4, max_objects=3, n_categories=3, n_colors=2, n_sizes=2)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_cfg):
    return Vocabulary.build(tiny_cfg)


@pytest.fixture(scope="session")
def tiny_encoder(tiny_cfg, tiny_vocab):
    return StateEncoder(tiny_cfg, tiny_vocab, EncoderConfig(pooled_size=2, cond_len=8, max_steps=8))


@pytest.fixture()
def tiny_net(tiny_encoder):
    return PolicyNetwork.initialize(default_arch(tiny_encoder, hidden=(16, 16)), seed=0)


@pytest.fixture(scope="session")
def tiny_units(tiny_cfg):
    return make_dataset(U_SEED, 16, tiny_cfg)


U_SEED = 42
