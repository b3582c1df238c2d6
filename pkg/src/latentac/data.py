"""Offline episode store.

Episodes live in memory as arrays; on disk a store is a JSON-Lines
manifest (one header line plus one line per episode) next to a flat
binary payload of little-endian float32 arrays. Sampling is two-level:
groups are drawn proportionally to their weights, then a task uniformly
within the group, an episode uniformly within the task, and a window
start uniformly within the episode; stores loop forever and are never
exhausted.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

STORE_VERSION = 1
STORE_FORMAT = "latentac-store"


@dataclass
class EpisodeRecord:
    """One offline trajectory with per-step arrays.

    ``proprio`` holds T+1 observations for T transitions; ``images`` is an
    optional (T+1, k, H, W, C) stack. ``terminal`` says whether the episode
    ended in a terminal state (bootstrap past the final transition is
    suppressed) as opposed to being truncated by a horizon.
    """

    task_id: str
    group_id: str
    proprio: np.ndarray            # (T+1, P)
    actions: np.ndarray            # (T, A)
    rewards: np.ndarray            # (T,)
    success: bool
    terminal: bool = True
    images: np.ndarray | None = None
    source_round: int = 0

    def __post_init__(self):
        self.proprio = np.asarray(self.proprio, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        self.rewards = np.asarray(self.rewards, dtype=np.float32)
        if self.images is not None:
            self.images = np.asarray(self.images, dtype=np.float32)
        if self.n_steps < 1:
            raise ValueError("episode needs at least one step")
        if self.proprio.shape[0] != self.n_steps + 1:
            raise ValueError("need T+1 observations for T steps")
        if self.actions.shape[0] != self.n_steps:
            raise ValueError("actions/rewards lengths disagree")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")

    @property
    def n_steps(self) -> int:
        return len(self.rewards)


@dataclass(frozen=True)
class GroupWeights:
    """Positive sampling weight per group id."""

    weights: dict[str, float]

    def __post_init__(self):
        if not self.weights:
            raise ValueError("need at least one group weight")
        if any(w <= 0 for w in self.weights.values()):
            raise ValueError("group weights must be positive")

    def probabilities(self, groups: list[str]) -> np.ndarray:
        try:
            raw = np.array([self.weights[g] for g in groups])
        except KeyError as exc:
            raise ValueError(f"no weight configured for group {exc}") from exc
        return raw / raw.sum()


class EpisodeStore:
    """Grouped episode collection supporting filtered views and round appends."""

    def __init__(self, episodes: list[EpisodeRecord] | None = None):
        self.episodes: list[EpisodeRecord] = []
        self._by_group: dict[str, dict[str, list[int]]] = {}
        for ep in episodes or []:
            self._insert(ep)

    def _insert(self, ep: EpisodeRecord) -> None:
        idx = len(self.episodes)
        self.episodes.append(ep)
        self._by_group.setdefault(ep.group_id, {}).setdefault(ep.task_id, []).append(idx)

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def groups(self) -> list[str]:
        return sorted(self._by_group)

    def tasks(self, group_id: str) -> list[str]:
        return sorted(self._by_group[group_id])

    @property
    def max_round(self) -> int:
        return max((ep.source_round for ep in self.episodes), default=0)

    def counts_by_round(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for ep in self.episodes:
            out[ep.source_round] = out.get(ep.source_round, 0) + 1
        return out

    def filter_success(self) -> "EpisodeStore":
        """View containing only successful episodes; the store is untouched."""
        kept = [ep for ep in self.episodes if ep.success]
        view = EpisodeStore(kept)
        for group_id, tasks in self._by_group.items():
            if group_id not in view._by_group:
                raise ValueError(f"group {group_id!r} has no successful episodes")
        return view

    def append_round(self, new_episodes: list[EpisodeRecord], round_id: int) -> None:
        """Append self-generated episodes tagged with a new round id."""
        existing = {ep.source_round for ep in self.episodes}
        if round_id in existing:
            raise ValueError(f"round id {round_id} already present")
        if existing and round_id < max(existing):
            raise ValueError("round ids must be strictly increasing")
        for ep in new_episodes:
            ep.source_round = round_id
            self._insert(ep)


@dataclass(frozen=True)
class Window:
    """A sampled trajectory slice: ``length`` real steps starting at ``start``."""

    episode: EpisodeRecord
    start: int
    length: int
    group_id: str


def sample_windows(store: EpisodeStore, batch_size: int, traj_len: int,
                   weights: GroupWeights, rng: np.random.Generator) -> list[Window]:
    """Draw trajectory windows: group by weight, then task, episode and
    start offset uniformly. Episodes shorter than the window are padded
    downstream by repeating the final transition under a validity mask."""
    if len(store) == 0:
        raise ValueError("cannot sample from an empty store")
    groups = store.groups
    for g in groups:
        if not store._by_group[g]:
            raise ValueError(f"group {g!r} is empty")
    probs = weights.probabilities(groups)
    group_draws = rng.choice(len(groups), size=batch_size, p=probs)
    windows = []
    for gi in group_draws:
        group_id = groups[gi]
        tasks = store.tasks(group_id)
        task = tasks[rng.integers(len(tasks))]
        candidates = store._by_group[group_id][task]
        ep = store.episodes[candidates[rng.integers(len(candidates))]]
        max_start = max(ep.n_steps - traj_len, 0)
        start = int(rng.integers(max_start + 1))
        windows.append(Window(ep, start, traj_len, group_id))
    return windows


def _array_meta(name: str, arr: np.ndarray, offset: int) -> tuple[dict, bytes, int]:
    data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    meta = {"name": name, "shape": list(arr.shape), "offset": offset, "length": len(data)}
    return meta, data, offset + len(data)


def write_store(path_prefix: str, episodes: list[EpisodeRecord]) -> None:
    """Write ``<prefix>.manifest.jsonl`` and ``<prefix>.payload.bin``."""
    manifest_lines = []
    chunks: list[bytes] = []
    offset = 0
    for ep in episodes:
        arrays = {"proprio": ep.proprio, "actions": ep.actions, "rewards": ep.rewards}
        if ep.images is not None:
            arrays["images"] = ep.images
        metas = {}
        for name, arr in arrays.items():
            meta, data, offset = _array_meta(name, arr, offset)
            metas[name] = meta
            chunks.append(data)
        manifest_lines.append(json.dumps({
            "task_id": ep.task_id, "group_id": ep.group_id, "success": ep.success,
            "terminal": ep.terminal, "round": ep.source_round,
            "n_steps": ep.n_steps, "arrays": metas}, sort_keys=True))
    payload = b"".join(chunks)
    header = json.dumps({
        "format": STORE_FORMAT, "version": STORE_VERSION,
        "episodes": len(episodes),
        "payload_sha256": hashlib.sha256(payload).hexdigest()}, sort_keys=True)
    with open(path_prefix + ".payload.bin", "wb") as f:
        f.write(payload)
    with open(path_prefix + ".manifest.jsonl", "w", encoding="utf-8") as f:
        f.write(header + "\n")
        for line in manifest_lines:
            f.write(line + "\n")


def read_store(path_prefix: str) -> list[EpisodeRecord]:
    """Read a store pair back; verifies version and payload checksum."""
    manifest_path = path_prefix + ".manifest.jsonl"
    payload_path = path_prefix + ".payload.bin"
    if not os.path.exists(manifest_path) or not os.path.exists(payload_path):
        raise FileNotFoundError(f"no store at {path_prefix!r}")
    with open(manifest_path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ValueError("empty manifest")
    header = json.loads(lines[0])
    if header.get("format") != STORE_FORMAT:
        raise ValueError("not an episode store manifest")
    if header.get("version") != STORE_VERSION:
        raise ValueError(f"unsupported store version {header.get('version')}")
    with open(payload_path, "rb") as f:
        payload = f.read()
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ValueError("payload checksum mismatch (corrupt or truncated store)")
    if len(lines) - 1 != header["episodes"]:
        raise ValueError("manifest episode count mismatch")

    def load(meta):
        chunk = payload[meta["offset"]:meta["offset"] + meta["length"]]
        return np.frombuffer(chunk, dtype="<f4").reshape(meta["shape"]).copy()

    episodes = []
    for line in lines[1:]:
        rec = json.loads(line)
        arrays = rec["arrays"]
        episodes.append(EpisodeRecord(
            task_id=rec["task_id"], group_id=rec["group_id"],
            proprio=load(arrays["proprio"]), actions=load(arrays["actions"]),
            rewards=load(arrays["rewards"]), success=rec["success"],
            terminal=rec["terminal"],
            images=load(arrays["images"]) if "images" in arrays else None,
            source_round=rec["round"]))
    return episodes
