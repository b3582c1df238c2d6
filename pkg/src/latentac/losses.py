"""Training objectives.

Two loss families over the same backbone: a Q-variant combining an
improvement-weighted policy term (actions sampled from the time-lagged
target policy, weighted by exponentiated target Q-values), a behavior
cloning term, and a distributional TD term; and a V-variant that weights
behavior cloning by exponentiated advantages and applies an importance
correction to the state-value TD term. All target-side quantities are
computed without gradients.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import torch

from .backbone import LatentAttentionModel, log_prob_of_indices, sample_action_indices
from .bins import ValueBins, q_value
from .encoders import ObservationBatch, concat_observations

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    """Loss multipliers and sampling configuration.

    alpha interpolates behavior cloning (1) against improvement-weighted
    policy learning (0); beta scales the TD term; eta is the improvement
    temperature; n_samples actions are drawn from the target policy per
    state; the target copy refreshes every target_period optimizer steps.
    """

    alpha: float = 0.75
    beta: float = 38.0
    eta: float = 0.1
    n_samples: int = 10
    target_period: int = 100
    gamma: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.n_samples < 1 or self.target_period < 1:
            raise ValueError("n_samples and target_period must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")


@dataclass
class ModelState:
    """Learnable parameters plus the time-lagged target copy."""

    model: LatentAttentionModel
    target: LatentAttentionModel
    step_counter: int = 0

    @classmethod
    def create(cls, model: LatentAttentionModel) -> "ModelState":
        target = copy.deepcopy(model)
        target.requires_grad_(False)
        return cls(model=model, target=target)

    def sync_target(self) -> None:
        self.target.load_state_dict(self.model.state_dict())


def maybe_update_target(state: ModelState, target_period: int) -> None:
    """Refresh the target copy whenever the step counter hits the period."""
    if state.step_counter % target_period == 0:
        state.sync_target()


@dataclass
class TransitionBatch:
    """One batch of dataset transitions, flattened over trajectory steps.

    ``alphas``/``betas`` optionally override the loss coefficients per
    sample (used by the per-group objective preset).
    """

    obs: ObservationBatch
    actions: torch.Tensor       # (B, N_A)
    rewards: torch.Tensor       # (B,)
    terminals: torch.Tensor     # (B,) bool: no bootstrap past these
    next_obs: ObservationBatch
    valid: torch.Tensor = field(default=None)  # (B,) bool; padded steps excluded
    alphas: torch.Tensor | None = None
    betas: torch.Tensor | None = None

    def __post_init__(self):
        if self.valid is None:
            self.valid = torch.ones(self.rewards.shape[0], dtype=torch.bool)


def transport_mass(rewards: torch.Tensor, discounts: torch.Tensor,
                   dists: torch.Tensor, bins: ValueBins) -> torch.Tensor:
    """Move each source bin's mass to the bin nearest ``r + discount * q``.

    dists: (..., N_Q) categoricals; rewards/discounts broadcast against the
    leading axes. Transformed values are clipped into the bin range before
    projection; exact midpoints go to the lower bin.
    """
    centers = bins.torch_centers(dists.dtype)
    targets = rewards[..., None] + discounts[..., None] * centers
    idx = bins.nearest_index(targets).expand(dists.shape)
    out = torch.zeros_like(dists)
    out.scatter_add_(-1, idx, dists)
    return out


def _as_batched(rewards, discounts, dists, want_dim: int):
    dists = torch.as_tensor(dists, dtype=torch.float64) if not torch.is_tensor(dists) else dists
    squeeze = dists.dim() == want_dim - 1
    if squeeze:
        dists = dists[None]
    r = torch.as_tensor(rewards, dtype=dists.dtype).reshape(-1)
    d = torch.as_tensor(discounts, dtype=dists.dtype).reshape(-1)
    b = dists.shape[0]
    return r.expand(b) if r.numel() == 1 else r, d.expand(b) if d.numel() == 1 else d, dists, squeeze


def td_target_q(rewards, discounts, next_value_dists, bins: ValueBins) -> torch.Tensor:
    """Distributional TD target from K next-action value distributions.

    next_value_dists: (B, K, N_Q) categoricals from the target network at
    sampled next actions (or (K, N_Q) for a single transition). Returns the
    transported categorical averaged over the K samples.
    """
    r, d, dists, squeeze = _as_batched(rewards, discounts, next_value_dists, 3)
    out = transport_mass(r[:, None], d[:, None], dists, bins).mean(dim=1)
    return out[0] if squeeze else out


def td_target_v(rewards, discounts, next_value_dist, bins: ValueBins) -> torch.Tensor:
    """Distributional TD target from the next-state value distribution."""
    r, d, dists, squeeze = _as_batched(rewards, discounts, next_value_dist, 2)
    out = transport_mass(r, d, dists, bins)
    return out[0] if squeeze else out


def improvement_weights(q_values: torch.Tensor, eta: float) -> torch.Tensor:
    """exp(Q/eta) normalized by its sample mean over the last axis.

    Stabilized through log-sum-exp; the output mean is renormalized to be
    exactly 1 and the weights are invariant to adding a constant to Q.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    q = q_values if torch.is_tensor(q_values) else torch.as_tensor(q_values, dtype=torch.float64)
    k = q.shape[-1]
    scaled = q / eta
    log_w = scaled - (torch.logsumexp(scaled, dim=-1, keepdim=True) - math.log(k))
    w = torch.exp(log_w)
    return w * (k / w.sum(dim=-1, keepdim=True))


def _masked_mean(values: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    v = valid.to(values.dtype)
    return (values * v).sum() / v.sum()


def loss_q(batch: TransitionBatch, state: ModelState, weights: LossWeights,
           bins: ValueBins, generator: torch.Generator):
    """Q-variant loss: improvement-weighted policy, BC, and TD terms.

    Returns ``(loss, parts)`` where parts holds the term values and their
    exact coefficients. Gradients flow only through the live model; the
    sampled actions, improvement weights and TD targets all come from the
    target copy under no_grad.
    """
    if int(batch.valid.sum()) == 0:
        raise ValueError("empty batch")
    model, target = state.model, state.target
    codec = model.codec
    dtype = batch.actions.dtype
    n = batch.rewards.shape[0]
    alphas = (batch.alphas if batch.alphas is not None
              else torch.full((n,), weights.alpha, dtype=dtype))
    betas = (batch.betas if batch.betas is not None
             else torch.full((n,), weights.beta, dtype=dtype))
    need_rl = bool((alphas < 1.0).any())
    need_td = bool((betas > 0.0).any())
    discounts = weights.gamma * (~batch.terminals).to(dtype)

    # one batched target-network pass covers both the current-state samples
    # (improvement weights) and the next-state samples (TD target)
    with torch.no_grad():
        td_dist = sampled_idx = w = None
        sides = ([batch.obs] if need_rl else []) + ([batch.next_obs] if need_td else [])
        if sides:
            cat = sides[0] if len(sides) == 1 else concat_observations(*sides)
            z_tgt = target.encode_observations(cat)
            idx = sample_action_indices(target.decode_policy(z_tgt),
                                        weights.n_samples, generator)
            q_logits = target.decode_q(z_tgt, codec.to_values(idx))
            if need_rl:
                sampled_idx = idx[:n]
                w = improvement_weights(q_value(q_logits[:n], bins), weights.eta)
            if need_td:
                next_dists = torch.softmax(q_logits[-n:], dim=-1)
                td_dist = td_target_q(batch.rewards, discounts, next_dists, bins)

    z = model.encode_observations(batch.obs)
    policy_logits = model.decode_policy(z)
    bc_ll = log_prob_of_indices(policy_logits, codec.to_indices(batch.actions))
    rl_ll = torch.zeros_like(bc_ll)
    if need_rl:
        rl_ll = (w * log_prob_of_indices(policy_logits, sampled_idx)).mean(dim=-1)
    td_ll = torch.zeros_like(bc_ll)
    if need_td:
        q_logits = model.decode_q(z, batch.actions)
        td_ll = (td_dist * torch.log_softmax(q_logits, dim=-1)).sum(-1)

    loss = -_masked_mean((1.0 - alphas) * rl_ll + alphas * bc_ll + betas * td_ll,
                         batch.valid)
    with torch.no_grad():
        parts = {
            "loss": float(loss),
            "rl_term": float(_masked_mean(rl_ll, batch.valid)),
            "bc_term": float(_masked_mean(bc_ll, batch.valid)),
            "td_term": float(_masked_mean(td_ll, batch.valid)),
            "rl_coeff": float((1.0 - alphas).mean()),
            "bc_coeff": float(alphas.mean()),
            "td_coeff": float(betas.mean()),
        }
    return loss, parts


def loss_v(batch: TransitionBatch, state: ModelState, weights: LossWeights,
           bins: ValueBins, behavior_likelihood_mode: str = "constant",
           behavior_log_probs: torch.Tensor | None = None,
           advantage_weight_max: float = 100.0, ratio_max: float = 100.0):
    """V-variant loss: advantage-weighted BC plus importance-corrected TD.

    The advantage uses the time-lagged copy purely as a stop-gradient; the
    importance ratio pi/b is detached and clamped to ratio_max. With mode
    "constant" the behavior likelihood is the uniform action likelihood;
    with "learned" the caller supplies log b(a_t|s_t) (for instance from a
    separately cloned behavior model).
    """
    if int(batch.valid.sum()) == 0:
        raise ValueError("empty batch")
    if behavior_likelihood_mode not in ("constant", "learned"):
        raise ValueError(f"unknown behavior_likelihood_mode {behavior_likelihood_mode!r}")
    if behavior_likelihood_mode == "learned" and behavior_log_probs is None:
        raise ValueError("learned mode requires behavior_log_probs")
    model, target = state.model, state.target
    codec = model.codec
    dtype = batch.actions.dtype
    discounts = weights.gamma * (~batch.terminals).to(dtype)

    n = batch.rewards.shape[0]
    with torch.no_grad():
        z_tgt = target.encode_observations(
            concat_observations(batch.obs, batch.next_obs))
        v_logits = target.decode_value(z_tgt)
        values = q_value(v_logits, bins)
        v_now, v_next = values[:n], values[n:]
        next_v_logits = v_logits[n:]
        advantage = batch.rewards + discounts * v_next - v_now
        adv_weights = torch.exp((advantage / weights.eta)
                                .clamp(max=math.log(advantage_weight_max)))
        td_dist = td_target_v(batch.rewards, discounts,
                              torch.softmax(next_v_logits, dim=-1), bins)

    z = model.encode_observations(batch.obs)
    policy_logits = model.decode_policy(z)
    action_ll = log_prob_of_indices(policy_logits, codec.to_indices(batch.actions))

    if behavior_likelihood_mode == "constant":
        log_b = torch.full_like(batch.rewards, -codec.n_dims * math.log(codec.n_bins))
    else:
        log_b = behavior_log_probs.to(dtype)
        if torch.isneginf(log_b).any():
            logger.warning("zero behavior likelihood encountered; ratio clamped")
    ratio = torch.exp((action_ll.detach() - log_b).clamp(max=math.log(ratio_max)))

    value_ll = (td_dist * torch.log_softmax(model.decode_value(z), dim=-1)).sum(-1)
    policy_term = _masked_mean(adv_weights * action_ll, batch.valid)
    td_term = _masked_mean(ratio * value_ll, batch.valid)
    bc_term = _masked_mean(action_ll, batch.valid)

    loss = -(policy_term + weights.beta * td_term)
    with torch.no_grad():
        parts = {
            "loss": float(loss), "rl_term": float(policy_term),
            "bc_term": float(bc_term), "td_term": float(td_term),
            "rl_coeff": 1.0, "bc_coeff": 0.0, "td_coeff": weights.beta,
        }
    return loss, parts
