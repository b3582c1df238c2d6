import numpy as np
import pytest
import torch

from latentac import ArchConfig, LatentAttentionModel, ModalitySpec, Observation, pad_batch


@pytest.fixture
def toy_spec():
    return ModalitySpec(n_proprio=3, n_images=1, n_goal_images=1,
                        n_text_tokens=4, n_action_dims=2,
                        image_hwc=(16, 16, 1), vocab_size=64,
                        gains=(0.1, 1.0, 10.0, 100.0), embed_dim=16,
                        conv_channels=(4, 8))


@pytest.fixture
def toy_arch():
    return ArchConfig(n_latents=3, latent_dim=16, n_blocks=2, widening=2,
                      n_action_bins=5, n_value_bins=11, n_heads=4)


def randomize_heads(model: LatentAttentionModel, seed: int = 0) -> LatentAttentionModel:
    """Give the zero-initialized output heads generic random values."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for head in (model.policy_head, model.q_head, model.value_head):
            head.weight.normal_(0.0, 0.3, generator=gen)
            head.bias.normal_(0.0, 0.1, generator=gen)
    return model


@pytest.fixture
def toy_model(toy_spec, toy_arch):
    torch.manual_seed(0)
    return randomize_heads(LatentAttentionModel(toy_spec, toy_arch))


def random_observations(spec: ModalitySpec, n: int, rng: np.random.Generator,
                        full: bool = True):
    """Observations with every modality populated (or randomly truncated)."""
    h, w, c = spec.image_hwc
    out = []
    for _ in range(n):
        k_p = spec.n_proprio if full else int(rng.integers(spec.n_proprio + 1))
        k_v = spec.n_images if full else int(rng.integers(spec.n_images + 1))
        k_g = spec.n_goal_images if full else int(rng.integers(spec.n_goal_images + 1))
        k_t = spec.n_text_tokens if full else int(rng.integers(spec.n_text_tokens + 1))
        out.append(Observation(
            proprio=rng.normal(size=k_p),
            images=rng.normal(size=(k_v, h, w, c)) if k_v else None,
            goal_images=rng.normal(size=(k_g, h, w, c)) if k_g else None,
            text_tokens=rng.integers(spec.vocab_size, size=k_t)))
    return out


@pytest.fixture
def obs_batch(toy_spec):
    rng = np.random.default_rng(3)
    return pad_batch(toy_spec, random_observations(toy_spec, 4, rng))
