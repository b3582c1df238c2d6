"""Policy evaluation and the self-improvement loop.

Success rates come with Wilson score intervals. Evaluation rollouts use
one spawned rng stream per trial so results are independent of batching
or scheduling; the trials themselves can be collected as new episodes and
appended to the offline store for iterative finetuning.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
from scipy.stats import norm

from .bins import ValueBins
from .data import EpisodeRecord, EpisodeStore, GroupWeights
from .encoders import ModalitySpec, Observation, pad_batch
from .envs import Fixture, TabularMDP, rollout_episode, state_observation
from .losses import LossWeights, ModelState
from .training import AdamMoments, DropoutConfig, OptimConfig, train


def wilson_interval(successes: int, trials: int, alpha_w: float = 0.05) -> tuple[float, float]:
    """Wilson score bounds at confidence 1 - alpha_w, clamped into [0, 1]."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not 0 <= successes <= trials:
        raise ValueError("successes must lie in [0, trials]")
    z = float(norm.ppf(1.0 - alpha_w / 2.0))
    p_hat = successes / trials
    denom = 1.0 + z * z / trials
    center = (p_hat + z * z / (2 * trials)) / denom
    half = z * np.sqrt(p_hat * (1 - p_hat) / trials + z * z / (4 * trials * trials)) / denom
    # at the extremes center and half coincide analytically; pin the exact bound
    lower = 0.0 if successes == 0 else max(0.0, center - half)
    upper = 1.0 if successes == trials else min(1.0, center + half)
    return float(lower), float(upper)


@dataclass
class EvalReport:
    """Success rate with Wilson bounds for one task."""

    task_id: str
    n_trials: int
    successes: int
    rate: float
    lower: float
    upper: float
    mean_return: float
    normalized_return: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_outcomes(cls, task_id: str, successes: np.ndarray, returns: np.ndarray,
                      alpha_w: float = 0.05, expert_return: float | None = None):
        n = len(successes)
        k = int(np.sum(successes))
        lo, hi = wilson_interval(k, n, alpha_w)
        normalized = None
        if expert_return is not None and expert_return != 0:
            normalized = float(np.mean(returns) / expert_return)
        return cls(task_id=task_id, n_trials=n, successes=k, rate=k / n,
                   lower=lo, upper=hi, mean_return=float(np.mean(returns)),
                   normalized_return=normalized)


class TabularModelPolicy:
    """Maps tabular states through the network to action probabilities.

    Discrete actions are the bin indices of the single action dimension;
    greedy selection resolves ties to the lowest bin.
    """

    def __init__(self, model, n_states: int, chunk: int = 1024):
        self.model = model
        self.n_states = n_states
        self.chunk = chunk
        self._cache: dict[int, np.ndarray] = {}

    def __call__(self, states: np.ndarray) -> np.ndarray:
        missing = [s for s in dict.fromkeys(states.tolist()) if s not in self._cache]
        if missing:
            obs = [Observation(proprio=state_observation(s, self.n_states))
                   for s in missing]
            batch = pad_batch(self.model.spec, obs,
                              dtype=next(self.model.parameters()).dtype)
            with torch.no_grad():
                z = self.model.encode_observations(batch)
                logits = self.model.decode_policy(z)          # (M, 1, n_bins)
                probs = torch.softmax(logits, dim=-1)[:, 0].cpu().numpy()
            for s, p in zip(missing, probs):
                self._cache[s] = p
        return np.stack([self._cache[s] for s in states.tolist()])


def tabular_table_policy(table: np.ndarray):
    return lambda states: table[states]


def run_trials(dist_fn, mdp: TabularMDP, n_trials: int, seed: int,
               greedy: bool = False):
    """Roll independent trials with per-trial rng streams.

    Returns (successes, returns, episodes) where episodes are standard
    records ready for a store.
    """
    streams = [np.random.default_rng(s)
               for s in np.random.SeedSequence(seed).spawn(n_trials)]
    successes = np.zeros(n_trials, dtype=bool)
    returns = np.zeros(n_trials)
    episodes: list[EpisodeRecord] = []
    for i, rng in enumerate(streams):
        states, actions, rewards = rollout_episode(mdp, dist_fn, rng, greedy=greedy)
        ret = float(rewards.sum())
        success = mdp.is_success(states, ret)
        successes[i], returns[i] = success, ret
        proprio = np.stack([state_observation(s, mdp.n_states) for s in states])
        episodes.append(EpisodeRecord(
            task_id=mdp.name, group_id="selfgen", proprio=proprio,
            actions=actions[:, None].astype(np.float32),
            rewards=rewards.astype(np.float32), success=success,
            terminal=bool(mdp.terminal[states[-1]])))
    return successes, returns, episodes


def evaluate(dist_fn, mdp: TabularMDP, n_trials: int, seed: int,
             greedy: bool = False, alpha_w: float = 0.05,
             expert_return: float | None = None) -> EvalReport:
    """Success rate over independent trials with a Wilson interval."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    successes, returns, _ = run_trials(dist_fn, mdp, n_trials, seed, greedy=greedy)
    return EvalReport.from_outcomes(mdp.name, successes, returns,
                                    alpha_w=alpha_w, expert_return=expert_return)


def self_improve(state: ModelState, fixture: Fixture, store: EpisodeStore,
                 weights: LossWeights, optim: OptimConfig, *, rounds: int,
                 episodes_per_round: int, finetune_steps: int, seed: int,
                 eval_trials: int | None = None, greedy_eval: bool = False,
                 group_loss_map: dict[str, tuple[float, float]] | None = None,
                 moments: AdamMoments | None = None) -> list[EvalReport]:
    """Iterate evaluate -> append the trials as a new round -> finetune.

    Returns one report per round, round 0 being the starting model. The
    evaluation trials themselves become the appended data, so collection
    uses sampled actions; all earlier data stays in the store.
    """
    eval_trials = eval_trials or episodes_per_round
    moments = moments if moments is not None else AdamMoments()
    mdp = fixture.mdp
    group_id = "selfgen"
    reports: list[EvalReport] = []
    for round_idx in range(rounds + 1):
        policy = TabularModelPolicy(state.model, mdp.n_states)
        n = max(eval_trials, episodes_per_round)
        successes, returns, episodes = run_trials(
            policy, mdp, n, seed + 1000 * round_idx, greedy=greedy_eval)
        reports.append(EvalReport.from_outcomes(mdp.name, successes[:eval_trials],
                                                returns[:eval_trials]))
        if round_idx == rounds:
            break
        new_eps = episodes[:episodes_per_round]
        for ep in new_eps:
            ep.group_id = group_id
            ep.task_id = fixture.task_id
        store.append_round(new_eps, store.max_round + 1)
        gw = {g: 1.0 for g in store.groups}
        gmap = dict(group_loss_map) if group_loss_map else None
        if gmap is not None and group_id not in gmap:
            gmap[group_id] = gmap[fixture.group_id]
        train(state, store, fixture.modality_spec, weights, optim,
              fixture.value_bins, finetune_steps, seed + 7777 * (round_idx + 1),
              objective="q", group_weights=GroupWeights(gw),
              group_loss_map=gmap, moments=moments)
    return reports
