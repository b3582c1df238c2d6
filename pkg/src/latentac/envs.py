"""Desk-scale environments and exact oracles.

Tabular MDPs with absorbing terminals serve as ground truth: exact policy
evaluation, brute-force value iteration, the closed-form KL-regularized
improvement fixed point, and a distributional evaluation oracle over a
value-bin grid. A small continuous point-mass reach task exercises the
full multimodal path (proprioception, rendered image, text task id).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bins import ValueBins
from .data import EpisodeRecord
from .encoders import ModalitySpec


@dataclass
class TabularMDP:
    """Finite MDP with absorbing terminal states and an episode horizon.

    ``reward[s, a]`` is the expected immediate reward. Success of a rollout
    is reaching a state in ``success_states`` (when set) or achieving an
    undiscounted return of at least ``success_return``.
    """

    transition: np.ndarray          # (S, A, S)
    reward: np.ndarray              # (S, A)
    gamma: float
    initial_dist: np.ndarray        # (S,)
    terminal: np.ndarray            # (S,) bool
    horizon: int
    name: str = "mdp"
    success_states: np.ndarray | None = None
    success_return: float | None = None
    tasks: tuple[str, ...] = ()

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        s, a, s2 = self.transition.shape
        if s != s2 or self.reward.shape != (s, a):
            raise ValueError("transition/reward shapes disagree")
        if not np.allclose(self.transition.sum(axis=2), 1.0, atol=1e-9):
            raise ValueError("transition rows must sum to 1")
        if not np.all(np.isfinite(self.reward)):
            raise ValueError("rewards must be finite")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if self.success_states is None and self.success_return is None:
            raise ValueError("need success_states or success_return")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def is_success(self, states_visited: np.ndarray, episode_return: float) -> bool:
        if self.success_states is not None:
            return bool(np.isin(states_visited, self.success_states).any())
        return episode_return >= self.success_return


def policy_evaluation(mdp: TabularMDP, policy: np.ndarray) -> np.ndarray:
    """Exact Q^pi via a linear solve; returns (S, A)."""
    p_pi = np.einsum("sa,saz->sz", policy, mdp.transition)
    r_pi = np.einsum("sa,sa->s", policy, mdp.reward)
    v = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p_pi, r_pi)
    return mdp.reward + mdp.gamma * mdp.transition @ v


def value_iteration(mdp: TabularMDP, tol: float = 1e-12,
                    max_iters: int = 100_000) -> np.ndarray:
    """Brute-force optimal Q via repeated Bellman backups; returns (S, A)."""
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iters):
        nxt = mdp.reward + mdp.gamma * mdp.transition @ q.max(axis=1)
        if np.max(np.abs(nxt - q)) < tol:
            return nxt
        q = nxt
    raise RuntimeError("value iteration did not converge")


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """Deterministic argmax policy table; ties go to the lowest action index."""
    policy = np.zeros_like(q)
    policy[np.arange(q.shape[0]), q.argmax(axis=1)] = 1.0
    return policy


def tilt_policy(reference: np.ndarray, q: np.ndarray, eta: float) -> np.ndarray:
    """Exponential tilt: normalize reference * exp(Q / eta) per state."""
    with np.errstate(divide="ignore"):
        logits = np.where(reference > 0, np.log(reference), -np.inf) + q / eta
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def regularized_oracle(mdp: TabularMDP, eta: float, reference: np.ndarray,
                       tol: float = 1e-10, max_sweeps: int = 10_000):
    """Exact fixed point of KL-regularized improvement against ``reference``.

    Alternates exact policy evaluation with the closed-form tilt until the
    policy stops moving. Returns ``(pi_imp, q)`` where ``q`` is the exact
    Q-function of the improved policy.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    policy = reference.copy()
    for _ in range(max_sweeps):
        q = policy_evaluation(mdp, policy)
        updated = tilt_policy(reference, q, eta)
        residual = np.max(np.abs(updated - policy))
        policy = updated
        if residual < tol:
            return policy, policy_evaluation(mdp, policy)
    raise RuntimeError(f"regularized oracle did not converge (residual {residual:.3e})")


def distributional_policy_evaluation(mdp: TabularMDP, policy: np.ndarray,
                                     bins: ValueBins, tol: float = 1e-12,
                                     max_sweeps: int = 10_000) -> np.ndarray:
    """Fixed point of the distributional TD operator on the bin grid.

    Returns a (S, A, n_bins) table of categorical value distributions
    under nearest-bin transport (midpoint ties to the lower bin).
    """
    s, a = mdp.n_states, mdp.n_actions
    table = np.zeros((s, a, bins.count))
    table[:, :, bins.count // 2] = 1.0   # index-based init: shift-equivariant
    targets = mdp.reward[:, :, None] + mdp.gamma * bins.centers[None, None, :]
    idx = bins.nearest_index(targets)                     # (S, A, n_bins)
    rows = np.repeat(np.arange(s * a), bins.count)
    cols = idx.reshape(-1)
    for _ in range(max_sweeps):
        v_dist = np.einsum("za,zan->zn", policy, table)   # state-value dists
        mixed = np.einsum("saz,zn->san", mdp.transition, v_dist)
        moved = np.zeros((s * a, bins.count))
        np.add.at(moved, (rows, cols), mixed.reshape(-1))
        moved = moved.reshape(s, a, bins.count)
        if np.max(np.abs(moved - table)) < tol:
            return moved
        table = moved
    raise RuntimeError("distributional evaluation did not converge")


def success_probability(mdp: TabularMDP, policy: np.ndarray) -> float:
    """Exact probability of reaching a success state within the horizon."""
    if mdp.success_states is None:
        raise ValueError("requires success_states")
    p_pi = np.einsum("sa,saz->sz", policy, mdp.transition)
    d = mdp.initial_dist.copy()
    for _ in range(mdp.horizon):
        d = d @ p_pi
    return float(d[mdp.success_states].sum())


def epsilon_mix(optimal: np.ndarray, eps: float) -> np.ndarray:
    n_actions = optimal.shape[1]
    return (1.0 - eps) * optimal + eps / n_actions


def tune_epsilon_behavior(mdp: TabularMDP, target_success: float,
                          tol: float = 1e-4) -> tuple[np.ndarray, float]:
    """Bisect the mixing rate of an epsilon-greedy-around-optimal policy so
    its exact success probability matches ``target_success``."""
    optimal = greedy_policy(value_iteration(mdp))
    lo, hi = 0.0, 1.0
    p_lo = success_probability(mdp, epsilon_mix(optimal, lo))
    p_hi = success_probability(mdp, epsilon_mix(optimal, hi))
    if not (min(p_lo, p_hi) - tol <= target_success <= max(p_lo, p_hi) + tol):
        raise ValueError(f"target success {target_success} outside reachable "
                         f"range [{min(p_lo, p_hi):.3f}, {max(p_lo, p_hi):.3f}]")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        p_mid = success_probability(mdp, epsilon_mix(optimal, mid))
        if (p_mid > target_success) == (p_lo > target_success):
            lo, p_lo = mid, p_mid
        else:
            hi = mid
    eps = 0.5 * (lo + hi)
    return epsilon_mix(optimal, eps), eps


def rollout_episode(mdp: TabularMDP, dist_fn, rng: np.random.Generator,
                    greedy: bool = False):
    """Roll one episode; dist_fn maps a state array to action probabilities."""
    state = int(rng.choice(mdp.n_states, p=mdp.initial_dist))
    states, actions, rewards = [state], [], []
    for _ in range(mdp.horizon):
        if mdp.terminal[state]:
            break
        probs = np.asarray(dist_fn(np.array([state])))[0]
        action = int(probs.argmax()) if greedy else int(rng.choice(mdp.n_actions, p=probs))
        reward = float(mdp.reward[state, action])
        state = int(rng.choice(mdp.n_states, p=mdp.transition[state, action]))
        states.append(state)
        actions.append(action)
        rewards.append(reward)
    return np.array(states), np.array(actions), np.array(rewards, dtype=np.float64)


def state_observation(state: int, n_states: int) -> np.ndarray:
    onehot = np.zeros(n_states, dtype=np.float32)
    onehot[state] = 1.0
    return onehot


@dataclass
class Fixture:
    """A tabular MDP bundled with everything a training run needs."""

    name: str
    mdp: TabularMDP
    behavior: np.ndarray            # (S, A)
    modality_spec: ModalitySpec
    value_bins: ValueBins
    eta: float
    task_id: str = ""
    group_id: str = "default"

    def __post_init__(self):
        if not self.task_id:
            self.task_id = self.name

    @property
    def action_low(self) -> float:
        return 0.0

    @property
    def action_high(self) -> float:
        return float(self.mdp.n_actions - 1)


def _spec_for(mdp: TabularMDP, embed_dim: int = 16,
              gains: tuple[float, ...] = (0.1, 1.0, 10.0, 100.0)) -> ModalitySpec:
    return ModalitySpec(n_proprio=mdp.n_states, n_images=0, n_goal_images=0,
                        n_text_tokens=0, n_action_dims=1, gains=gains,
                        embed_dim=embed_dim)


def bandit_fixture() -> Fixture:
    """Two-armed bandit with deterministic rewards 0.2 and 0.65."""
    s, a = 2, 2
    transition = np.zeros((s, a, s))
    transition[0, :, 1] = 1.0       # both arms terminate
    transition[1, :, 1] = 1.0       # absorbing terminal
    reward = np.zeros((s, a))
    reward[0] = [0.2, 0.65]
    mdp = TabularMDP(transition, reward, gamma=0.9,
                     initial_dist=np.array([1.0, 0.0]),
                     terminal=np.array([False, True]), horizon=1,
                     name="bandit", success_return=0.5)
    bins = ValueBins(-0.25, 1.25, 76)
    behavior = np.full((s, a), 0.5)
    return Fixture("bandit", mdp, behavior, _spec_for(mdp), bins, eta=0.05)


def chain_fixture(length: int = 5) -> Fixture:
    """Deterministic walk: move right ``length`` times to reach the goal."""
    s = length + 1                   # states 0..length-1 plus goal
    goal = length
    transition = np.zeros((s, 2, s))
    reward = np.zeros((s, 2))
    for i in range(length):
        transition[i, 0, max(i - 1, 0)] = 1.0
        transition[i, 1, i + 1] = 1.0
    reward[length - 1, 1] = 1.0
    transition[goal, :, goal] = 1.0
    initial = np.zeros(s)
    initial[0] = 1.0
    terminal = np.zeros(s, dtype=bool)
    terminal[goal] = True
    mdp = TabularMDP(transition, reward, gamma=0.9, initial_dist=initial,
                     terminal=terminal, horizon=2 * length + 2, name="chain",
                     success_states=np.array([goal]), success_return=0.5)
    bins = ValueBins(-0.2, 1.2, 141)
    behavior = np.full((s, 2), 0.5)
    return Fixture("chain", mdp, behavior, _spec_for(mdp), bins, eta=0.01)


def gridworld_fixture(side: int = 4, step_cost: float = 0.02,
                      wrong_cost: float = 0.25) -> Fixture:
    """Grid with per-action step costs; reach the far corner.

    One designated action per cell (right when possible, else down) costs
    little; every other action costs a lot. That makes the best action
    unique and consistently ranked first by the immediate reward, the
    uniform-behavior Q and the optimal Q alike (asserted below), so the
    regularized fixed point at a small temperature is sharply determined
    and reachable by support-preserving improvement from scratch.
    """
    s = side * side                  # the goal corner itself is terminal
    goal = s - 1
    moves = ((-1, 0), (1, 0), (0, -1), (0, 1))   # up, down, left, right
    transition = np.zeros((s, 4, s))
    reward = np.zeros((s, 4))
    for cell in range(s - 1):
        r, c = divmod(cell, side)
        preferred = 3 if c < side - 1 else 1
        for a, (dr, dc) in enumerate(moves):
            nr, nc = min(max(r + dr, 0), side - 1), min(max(c + dc, 0), side - 1)
            nxt = nr * side + nc
            bonus = 1.0 if nxt == goal else 0.0
            cost = step_cost if a == preferred else wrong_cost
            transition[cell, a, nxt] = 1.0
            reward[cell, a] = bonus - cost
    transition[goal, :, goal] = 1.0
    initial = np.zeros(s)
    initial[0] = 1.0
    terminal = np.zeros(s, dtype=bool)
    terminal[goal] = True
    mdp = TabularMDP(transition, reward, gamma=0.85, initial_dist=initial,
                     terminal=terminal, horizon=4 * side, name="gridworld",
                     success_states=np.array([goal]), success_return=0.5)
    behavior = np.full((s, 4), 0.25)
    q_star = value_iteration(mdp)[:-1]
    q_b = policy_evaluation(mdp, behavior)[:-1]
    best = q_star.argmax(axis=1)
    sorted_q = np.sort(q_star, axis=1)
    if (sorted_q[:, -1] - sorted_q[:, -2]).min() < 0.03:
        raise ValueError("optimal actions are nearly tied")
    if not ((mdp.reward[:-1].argmax(axis=1) == best).all()
            and (q_b.argmax(axis=1) == best).all()):
        raise ValueError("reward/behavior-Q/optimal-Q argmax disagree")
    bins = ValueBins(-2.2, 1.3, 351)
    return Fixture("gridworld", mdp, behavior, _spec_for(mdp), bins, eta=0.01)


def decisive_fixture(good_arm_rate: float = 0.01, behavior_success: float = 0.28,
                     n_arms: int = 5) -> Fixture:
    """Sub-optimal-data fixture: one rarely-taken arm is far better.

    From the start state, arm 0 leads to a branch whose finish action
    succeeds with probability 0.99; all other arms lead to a branch with a
    much lower finish probability, tuned so the behavior policy succeeds at
    ``behavior_success``. Rewards are expected success probabilities;
    success of a rollout is reaching the win state. Success-filtered
    cloning barely moves mass onto the rare good arm, while the learned
    Q-function identifies it.
    """
    S0, MGOOD, MBAD, WIN, LOSE = range(5)
    good_p = 0.99
    finish_rate, stall_rate = 0.8, 0.2
    attempt = finish_rate + stall_rate * finish_rate   # finish within 2 chances
    bad_p = (behavior_success / attempt - good_arm_rate * good_p) / (1 - good_arm_rate)
    if not 0 < bad_p < good_p:
        raise ValueError("behavior success target not achievable")
    transition = np.zeros((5, n_arms, 5))
    reward = np.zeros((5, n_arms))
    transition[S0, 0, MGOOD] = 1.0
    transition[S0, 1:, MBAD] = 1.0
    for m, p in ((MGOOD, good_p), (MBAD, bad_p)):
        transition[m, 0, WIN] = p          # finish
        transition[m, 0, LOSE] = 1.0 - p
        transition[m, 1:, m] = 1.0         # stall
        reward[m, 0] = p
    for t in (WIN, LOSE):
        transition[t, :, t] = 1.0
    initial = np.zeros(5)
    initial[S0] = 1.0
    terminal = np.array([False, False, False, True, True])
    mdp = TabularMDP(transition, reward, gamma=0.9, initial_dist=initial,
                     terminal=terminal, horizon=3, name="decisive",
                     success_states=np.array([WIN]))
    behavior = np.zeros((5, n_arms))
    behavior[S0, 0] = good_arm_rate
    behavior[S0, 1:] = (1.0 - good_arm_rate) / (n_arms - 1)
    for m in (MGOOD, MBAD):
        behavior[m, 0] = finish_rate
        behavior[m, 1:] = stall_rate / (n_arms - 1)
    behavior[WIN] = behavior[LOSE] = 1.0 / n_arms
    bins = ValueBins(-0.2, 1.2, 141)
    return Fixture("decisive", mdp, behavior, _spec_for(mdp), bins, eta=0.05,
                   group_id="decisive")


FIXTURES = {
    "bandit": bandit_fixture,
    "chain": chain_fixture,
    "gridworld": gridworld_fixture,
    "decisive": decisive_fixture,
}


def make_fixture(name: str) -> Fixture:
    if name not in FIXTURES:
        raise ValueError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)}")
    return FIXTURES[name]()


def make_behavior_dataset(mdp: TabularMDP, behavior: np.ndarray, n_episodes: int,
                          rng: np.random.Generator, task_id: str = "",
                          group_id: str = "default") -> list[EpisodeRecord]:
    """Roll episodes under the behavior policy and flag successes."""
    task_id = task_id or mdp.name
    episodes = []
    for _ in range(n_episodes):
        states, actions, rewards = rollout_episode(mdp, lambda s: behavior[s], rng)
        proprio = np.stack([state_observation(s, mdp.n_states) for s in states])
        episodes.append(EpisodeRecord(
            task_id=task_id, group_id=group_id, proprio=proprio,
            actions=actions[:, None].astype(np.float32),
            rewards=rewards.astype(np.float32),
            success=mdp.is_success(states, float(rewards.sum())),
            terminal=bool(mdp.terminal[states[-1]])))
    return episodes


def empirical_policy(episodes: list[EpisodeRecord], n_states: int,
                     n_actions: int) -> np.ndarray:
    """Per-state action frequencies observed in a batch of episodes.

    States with no visits fall back to uniform.
    """
    counts = np.zeros((n_states, n_actions))
    for ep in episodes:
        states = ep.proprio[:-1].argmax(axis=1)
        for s, a in zip(states, ep.actions[:, 0].astype(int)):
            counts[s, a] += 1
    total = counts.sum(axis=1, keepdims=True)
    out = np.full((n_states, n_actions), 1.0 / n_actions)
    visited = total[:, 0] > 0
    out[visited] = counts[visited] / total[visited]
    return out


class PointMassEnv:
    """2-D reach task: drive the point into the goal disc within the horizon.

    Observations expose the position as proprioception, optionally a
    rendered grayscale image of point and goal, and the task id names the
    goal corner. Actions are continuous 2-D velocity commands in [-1, 1],
    scaled by ``step_size``.
    """

    GOALS = {
        "reach.ne": (0.8, 0.8),
        "reach.nw": (0.2, 0.8),
        "reach.se": (0.8, 0.2),
        "reach.sw": (0.2, 0.2),
    }

    def __init__(self, task_id: str = "reach.ne", horizon: int = 12,
                 goal_radius: float = 0.1, step_size: float = 0.15,
                 render: bool = False, image_size: int = 16):
        if task_id not in self.GOALS:
            raise ValueError(f"unknown task {task_id!r}")
        self.task_id = task_id
        self.goal = np.array(self.GOALS[task_id])
        self.horizon = horizon
        self.goal_radius = goal_radius
        self.step_size = step_size
        self.render = render
        self.image_size = image_size

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        while True:
            pos = rng.uniform(0.05, 0.95, size=2)
            if np.linalg.norm(pos - self.goal) > 2 * self.goal_radius:
                return pos

    def step(self, pos: np.ndarray, action: np.ndarray):
        nxt = np.clip(pos + self.step_size * np.clip(action, -1, 1), 0.0, 1.0)
        done = np.linalg.norm(nxt - self.goal) <= self.goal_radius
        return nxt, (1.0 if done else 0.0), done

    def render_image(self, pos: np.ndarray) -> np.ndarray:
        n = self.image_size
        grid = np.linspace(0, 1, n)
        xx, yy = np.meshgrid(grid, grid, indexing="xy")
        img = np.exp(-(((xx - pos[0]) ** 2 + (yy - pos[1]) ** 2) / 0.01))
        img += 0.5 * np.exp(-(((xx - self.goal[0]) ** 2 + (yy - self.goal[1]) ** 2) / 0.02))
        return img[..., None].astype(np.float32)

    def expert_action(self, pos: np.ndarray) -> np.ndarray:
        delta = self.goal - pos
        return np.clip(delta / self.step_size, -1.0, 1.0)

    def collect_episodes(self, policy_fn, n_episodes: int,
                         rng: np.random.Generator,
                         group_id: str = "pointmass") -> list[EpisodeRecord]:
        """policy_fn(position, rng) -> 2-D action in [-1, 1]."""
        episodes = []
        for _ in range(n_episodes):
            pos = self.reset(rng)
            proprio, images, actions, rewards = [pos], [], [], []
            if self.render:
                images.append(self.render_image(pos))
            done = False
            for _ in range(self.horizon):
                act = np.clip(policy_fn(pos, rng), -1.0, 1.0)
                pos, reward, done = self.step(pos, act)
                proprio.append(pos)
                actions.append(act)
                rewards.append(reward)
                if self.render:
                    images.append(self.render_image(pos))
                if done:
                    break
            episodes.append(EpisodeRecord(
                task_id=self.task_id, group_id=group_id,
                proprio=np.stack(proprio).astype(np.float32),
                actions=np.stack(actions).astype(np.float32),
                rewards=np.asarray(rewards, dtype=np.float32),
                success=bool(done), terminal=bool(done),
                images=np.stack(images)[:, None].astype(np.float32) if self.render else None))
        return episodes
