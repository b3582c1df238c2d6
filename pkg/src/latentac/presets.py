"""Named configurations: model scales, optimizer tables, objective presets.

The five model scales and their optimizer settings are representable at
full size for FLOP accounting but tests exercise only toy shapes. Each
objective preset fixes the BC/RL trade-off, the TD loss scale, data
filtering, and the loss family.
"""

from __future__ import annotations

from dataclasses import dataclass

from .backbone import ArchConfig
from .encoders import DEFAULT_GAINS, ModalitySpec
from .training import OptimConfig

# Reference modality layout used for token counting at full scale:
# 223 proprio scalars x 8 gains + 8 images x 100 tokens + 50 text = 2,634.
FULL_MODALITY_SPEC = ModalitySpec(
    n_proprio=223, n_images=5, n_goal_images=3, n_text_tokens=50,
    n_action_dims=38, image_hwc=(80, 80, 3), vocab_size=32_000,
    gains=DEFAULT_GAINS, embed_dim=256, conv_channels=(32, 64, 64))


@dataclass(frozen=True)
class ModelScale:
    name: str
    latent_dim: int
    n_blocks: int
    widening: int
    param_count: float          # reported size of the full model
    published_fwd_flops: float  # reference forward cost at full scale

    def arch(self, n_latents: int = 32, n_action_bins: int = 101,
             n_value_bins: int = 101, n_heads: int = 8) -> ArchConfig:
        return ArchConfig(n_latents=n_latents, latent_dim=self.latent_dim,
                          n_blocks=self.n_blocks, widening=self.widening,
                          n_action_bins=n_action_bins, n_value_bins=n_value_bins,
                          n_heads=n_heads)


MODEL_SCALES = {
    "XXS": ModelScale("XXS", 768, 4, 1, 32e6, 7.826e9),
    "XS": ModelScale("XS", 1024, 8, 1, 73e6, 1.360e10),
    "S": ModelScale("S", 1280, 10, 2, 164e6, 2.341e10),
    "M": ModelScale("M", 1536, 12, 4, 391e6, 4.380e10),
    "L": ModelScale("L", 2048, 18, 4, 988e6, 1.040e11),
}

# Reference backward/update figures at B=512, f=100 for the five scales.
PUBLISHED_FLOPS = {
    "XXS": (7.826e9, 1.573e10, 1.206e13),
    "XS": (1.360e10, 2.733e10, 2.096e13),
    "S": (2.341e10, 4.705e10, 3.607e13),
    "M": (4.380e10, 8.804e10, 6.750e13),
    "L": (1.040e11, 2.090e11, 1.602e14),
}

# Full-scale optimizer schedules (decay ends at one epoch of the data mix).
SCALE_OPTIMIZERS = {
    "XXS": OptimConfig(lr_init=1e-6, lr_peak=1e-4, lr_end=1e-5,
                       warmup_steps=15_000, decay_steps=2_700_000,
                       batch_size=512, traj_len=5),
    "XS": OptimConfig(lr_init=1e-6, lr_peak=1e-4, lr_end=1e-5,
                      warmup_steps=15_000, decay_steps=2_700_000,
                      batch_size=512, traj_len=5),
    "S": OptimConfig(lr_init=1e-7, lr_peak=5e-5, lr_end=5e-6,
                     warmup_steps=15_000, decay_steps=2_700_000,
                     batch_size=512, traj_len=5),
    "M": OptimConfig(lr_init=1e-7, lr_peak=3e-5, lr_end=3e-6,
                     warmup_steps=15_000, decay_steps=2_700_000,
                     batch_size=512, traj_len=5),
    "L": OptimConfig(lr_init=1e-7, lr_peak=3e-5, lr_end=3e-6,
                     warmup_steps=15_000, decay_steps=2_700_000,
                     batch_size=512, traj_len=5),
}

# Group sampling weights of the reference data mixture.
REFERENCE_GROUP_LAMBDA = (8, 2, 2, 1, 1, 2)


@dataclass(frozen=True)
class ObjectivePreset:
    """One named training objective variant."""

    name: str
    objective: str                     # "q" or "v"
    alpha: float
    beta: float
    eta: float
    filter_success: bool = False
    # optional per-group (alpha, beta) overrides; groups not listed use the
    # preset's base coefficients
    group_overrides: dict[str, tuple[float, float]] | None = None

    def loss_map_for(self, groups: list[str]) -> dict[str, tuple[float, float]] | None:
        if not self.group_overrides:
            return None
        return {g: self.group_overrides.get(g, (self.alpha, self.beta))
                for g in groups}


OBJECTIVE_PRESETS = {
    # BC policy with an auxiliary Q head on all data
    "bc+q": ObjectivePreset("bc+q", "q", alpha=1.0, beta=38.0, eta=0.1),
    # pure BC on successful episodes only
    "filteredbc": ObjectivePreset("filteredbc", "q", alpha=1.0, beta=0.0,
                                  eta=0.1, filter_success=True),
    # the default actor-critic trade-off
    "pac": ObjectivePreset("pac", "q", alpha=0.75, beta=38.0, eta=0.1),
    # per-group trade-off: lean on RL wherever data quality is low
    "alpha-pac": ObjectivePreset("alpha-pac", "q", alpha=0.75, beta=19.0,
                                 eta=0.1,
                                 group_overrides={"low-quality": (0.0, 38.0)}),
    # the state-value variant with its published advantage temperature
    "pac+v": ObjectivePreset("pac+v", "v", alpha=0.0, beta=38.0, eta=1e-4),
}


def get_preset(name: str) -> ObjectivePreset:
    if name not in OBJECTIVE_PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(OBJECTIVE_PRESETS)}")
    return OBJECTIVE_PRESETS[name]
