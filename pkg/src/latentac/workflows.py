"""End-to-end run orchestration shared by the CLI and the test suite.

Glue only: build a toy model for a fixture, generate its behavior data,
train under a named objective preset, and evaluate the result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .backbone import ArchConfig, LatentAttentionModel
from .data import EpisodeStore, GroupWeights
from .envs import Fixture, make_behavior_dataset
from .evaluation import EvalReport, TabularModelPolicy, evaluate
from .losses import LossWeights, ModelState
from .presets import ObjectivePreset
from .training import AdamMoments, OptimConfig, train


def default_arch(fixture: Fixture, **overrides) -> ArchConfig:
    base = dict(n_latents=4, latent_dim=32, n_blocks=1, widening=1,
                n_action_bins=fixture.mdp.n_actions,
                n_value_bins=fixture.value_bins.count, n_heads=4)
    base.update(overrides)
    return ArchConfig(**base)


def build_fixture_model(fixture: Fixture, arch: ArchConfig | None = None,
                        dtype: torch.dtype = torch.float64) -> LatentAttentionModel:
    arch = arch or default_arch(fixture)
    return LatentAttentionModel(fixture.modality_spec, arch,
                                fixture.action_low, fixture.action_high,
                                dtype=dtype)


def prepare_store(fixture: Fixture, n_episodes: int, seed: int) -> EpisodeStore:
    rng = np.random.default_rng(seed)
    episodes = make_behavior_dataset(fixture.mdp, fixture.behavior, n_episodes,
                                     rng, task_id=fixture.task_id,
                                     group_id=fixture.group_id)
    return EpisodeStore(episodes)


def weights_for(fixture: Fixture, preset: ObjectivePreset,
                **overrides) -> LossWeights:
    base = dict(alpha=preset.alpha, beta=preset.beta, eta=preset.eta,
                n_samples=10, target_period=100, gamma=fixture.mdp.gamma)
    if preset.objective == "q" and preset.eta == 0.1:
        base["eta"] = fixture.eta          # fixture-tuned improvement temperature
    base.update(overrides)
    return LossWeights(**base)


@dataclass
class RunResult:
    state: ModelState
    store: EpisodeStore
    weights: LossWeights
    optim: OptimConfig
    moments: AdamMoments
    metrics: list[dict]
    group_loss_map: dict[str, tuple[float, float]] | None


def run_training(fixture: Fixture, preset: ObjectivePreset, *, episodes: int,
                 steps: int, seed: int, optim: OptimConfig | None = None,
                 weight_overrides: dict | None = None,
                 arch: ArchConfig | None = None,
                 store: EpisodeStore | None = None,
                 state: ModelState | None = None,
                 metrics_path: str | None = None) -> RunResult:
    """Generate data (unless given), build a model (unless given), train."""
    if store is None:
        store = prepare_store(fixture, episodes, seed + 99)
    train_store = store.filter_success() if preset.filter_success else store
    if state is None:
        torch.manual_seed(seed)
        state = ModelState.create(build_fixture_model(fixture, arch))
    optim = optim or OptimConfig(batch_size=32, traj_len=3)
    weights = weights_for(fixture, preset, **(weight_overrides or {}))
    group_loss_map = preset.loss_map_for(train_store.groups)
    moments = AdamMoments()
    metrics = train(state, train_store, fixture.modality_spec, weights, optim,
                    fixture.value_bins, steps, seed, objective=preset.objective,
                    group_weights=GroupWeights({g: 1.0 for g in train_store.groups}),
                    group_loss_map=group_loss_map, moments=moments,
                    metrics_path=metrics_path)
    return RunResult(state=state, store=store, weights=weights, optim=optim,
                     moments=moments, metrics=metrics,
                     group_loss_map=group_loss_map)


def evaluate_state(state: ModelState, fixture: Fixture, n_trials: int,
                   seed: int, greedy: bool = False) -> EvalReport:
    policy = TabularModelPolicy(state.model, fixture.mdp.n_states)
    return evaluate(policy, fixture.mdp, n_trials, seed, greedy=greedy)
