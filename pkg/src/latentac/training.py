"""Training loop: schedule, optimizer, batching and checkpoints.

One step samples a batch of trajectory windows through the two-level
group sampler, flattens them into transitions, evaluates the configured
loss, clips the global gradient norm and applies a decoupled-weight-decay
adaptive-moment update, refreshing the time-lagged target copy on its
period. Everything is deterministic given the seed; metrics stream to a
JSON-Lines log.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import ArchConfig, LatentAttentionModel, log_prob_of_indices
from .bins import ValueBins
from .data import EpisodeStore, GroupWeights, Window, sample_windows
from .encoders import ModalitySpec, ObservationBatch, tokenize_task
from .losses import LossWeights, ModelState, TransitionBatch, loss_q, loss_v, maybe_update_target

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LACCKPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class OptimConfig:
    """Learning-rate schedule and adaptive-moment hyperparameters."""

    lr_init: float = 1e-4
    lr_peak: float = 3e-3
    lr_end: float = 3e-4
    warmup_steps: int = 100
    decay_steps: int = 5_000
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 1e-3
    eps: float = 1e-8
    grad_clip: float = 1.0
    batch_size: int = 32
    traj_len: int = 5

    def __post_init__(self):
        if self.lr_init > self.lr_peak:
            raise ValueError("lr_init must be <= lr_peak")
        if self.warmup_steps >= self.decay_steps:
            raise ValueError("warmup_steps must be < decay_steps")


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear warmup to the peak, cosine anneal to lr_end, then constant.

    The cosine phase ends at ``decay_steps`` (an absolute step index).
    """
    if step < 0:
        raise ValueError("step must be nonnegative")
    if step < cfg.warmup_steps:
        frac = step / cfg.warmup_steps
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * frac
    if step >= cfg.decay_steps:
        return cfg.lr_end
    t = (step - cfg.warmup_steps) / (cfg.decay_steps - cfg.warmup_steps)
    return cfg.lr_end + (cfg.lr_peak - cfg.lr_end) * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class AdamMoments:
    """First/second moment accumulators keyed by parameter name."""

    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def ensure(self, name: str, like: torch.Tensor) -> None:
        if name not in self.m:
            self.m[name] = torch.zeros_like(like)
            self.v[name] = torch.zeros_like(like)


def optimizer_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
                   moments: AdamMoments, step: int, cfg: OptimConfig,
                   lr: float | None = None) -> bool:
    """One decoupled-weight-decay adaptive-moment update, in place.

    ``step`` counts previously completed updates; bias correction uses
    step + 1. Returns False without touching any state if a gradient is
    non-finite.
    """
    for g in grads.values():
        if g is not None and not torch.isfinite(g).all():
            logger.warning("non-finite gradient at step %d; update rejected", step)
            return False
    if lr is None:
        lr = lr_at(step, cfg)
    t = step + 1
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            moments.ensure(name, p)
            m, v = moments.m[name], moments.v[name]
            m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
            if cfg.weight_decay:
                p.mul_(1.0 - lr * cfg.weight_decay)
            p.addcdiv_(m / c1, (v / c2).sqrt().add_(cfg.eps), value=-lr)
    return True


def clip_grad_norm(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    """Scale gradients in place to a global norm cap; returns the raw norm."""
    total = math.sqrt(sum(float(g.pow(2).sum()) for g in grads.values() if g is not None))
    if max_norm and total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            if g is not None:
                g.mul_(scale)
    return total


@dataclass(frozen=True)
class DropoutConfig:
    """Keep probabilities for the goal-image and language task modalities."""

    p_vision_goal: float = 1.0
    p_language_goal: float = 1.0

    def __post_init__(self):
        for p in (self.p_vision_goal, self.p_language_goal):
            if not 0.0 <= p <= 1.0:
                raise ValueError("dropout probabilities must be in [0, 1]")


def mask_goal_rows(batch: ObservationBatch, keep_vision: torch.Tensor,
                   keep_language: torch.Tensor) -> ObservationBatch:
    """Zero and invalidate goal modalities on rows where keep is False."""
    out = batch.clone()
    kv = keep_vision.to(torch.bool)
    kl = keep_language.to(torch.bool)
    out.goal_images *= kv[:, None, None, None, None].to(out.goal_images.dtype)
    out.goal_image_mask &= kv[:, None]
    out.text *= kl[:, None].to(out.text.dtype)
    out.text_mask &= kl[:, None]
    return out


def apply_modality_dropout(batch: ObservationBatch, cfg: DropoutConfig,
                           rng: np.random.Generator) -> ObservationBatch:
    """Independently keep each goal modality per row with its probability."""
    n = len(batch)
    keep_v = torch.as_tensor(rng.random(n) < cfg.p_vision_goal)
    keep_l = torch.as_tensor(rng.random(n) < cfg.p_language_goal)
    return mask_goal_rows(batch, keep_v, keep_l)


def collate_windows(windows: list[Window], spec: ModalitySpec,
                    dropout: DropoutConfig | None = None,
                    rng: np.random.Generator | None = None,
                    group_loss_map: dict[str, tuple[float, float]] | None = None,
                    use_final_frame_goal: bool = False,
                    dtype: torch.dtype = torch.float64) -> TransitionBatch:
    """Flatten trajectory windows into a spec-padded transition batch.

    Steps beyond an episode's end repeat its final transition with the
    validity flag cleared. Task-modality dropout draws once per window and
    applies to both the observation and its successor.
    """
    n_rows = sum(w.length for w in windows)
    h, w_, c = spec.image_hwc
    shape_img = (n_rows, spec.n_images, h, w_, c)
    shape_goal = (n_rows, spec.n_goal_images, h, w_, c)

    arrays = {
        "proprio": np.zeros((2, n_rows, spec.n_proprio)),
        "proprio_mask": np.zeros((2, n_rows, spec.n_proprio), dtype=bool),
        "images": np.zeros((2, *shape_img)),
        "image_mask": np.zeros((2, n_rows, spec.n_images), dtype=bool),
        "goal_images": np.zeros((2, *shape_goal)),
        "goal_image_mask": np.zeros((2, n_rows, spec.n_goal_images), dtype=bool),
        "text": np.zeros((2, n_rows, spec.n_text_tokens), dtype=np.int64),
        "text_mask": np.zeros((2, n_rows, spec.n_text_tokens), dtype=bool),
    }
    n_action_dims = windows[0].episode.actions.shape[1]
    actions = np.zeros((n_rows, n_action_dims))
    rewards = np.zeros(n_rows)
    terminals = np.zeros(n_rows, dtype=bool)
    valid = np.zeros(n_rows, dtype=bool)
    alphas = np.zeros(n_rows) if group_loss_map else None
    betas = np.zeros(n_rows) if group_loss_map else None

    row = 0
    window_rows = []
    for win in windows:
        ep = win.episode
        tokens = tokenize_task(ep.task_id, spec.n_text_tokens)
        goal_img = None
        if (use_final_frame_goal and spec.n_goal_images > 0
                and ep.images is not None and ep.success):
            goal_img = ep.images[-1, :spec.n_goal_images]
        rows = range(row, row + win.length)
        window_rows.append(rows)
        for t in range(win.length):
            t_abs = win.start + t
            real = t_abs < ep.n_steps
            i = min(t_abs, ep.n_steps - 1)
            for side, j in ((0, i), (1, i + 1)):
                arrays["proprio"][side, row, :ep.proprio.shape[1]] = ep.proprio[j]
                arrays["proprio_mask"][side, row, :ep.proprio.shape[1]] = True
                if ep.images is not None and spec.n_images > 0:
                    if tuple(ep.images.shape[2:]) != (h, w_, c):
                        raise ValueError(
                            f"episode image shape {ep.images.shape[2:]} does "
                            f"not match spec {(h, w_, c)}")
                    k = min(ep.images.shape[1], spec.n_images)
                    arrays["images"][side, row, :k] = ep.images[j, :k]
                    arrays["image_mask"][side, row, :k] = True
                if goal_img is not None:
                    arrays["goal_images"][side, row, :goal_img.shape[0]] = goal_img
                    arrays["goal_image_mask"][side, row, :goal_img.shape[0]] = True
                arrays["text"][side, row, :tokens.size] = tokens
                arrays["text_mask"][side, row, :tokens.size] = True
            actions[row] = ep.actions[i]
            rewards[row] = ep.rewards[i]
            terminals[row] = ep.terminal and (i == ep.n_steps - 1)
            valid[row] = real
            if group_loss_map is not None:
                if win.group_id not in group_loss_map:
                    raise ValueError(f"no loss coefficients for group {win.group_id!r}")
                alphas[row], betas[row] = group_loss_map[win.group_id]
            row += 1

    if dropout is not None:
        if rng is None:
            raise ValueError("dropout requires an rng")
        keep_v = np.ones(n_rows, dtype=bool)
        keep_l = np.ones(n_rows, dtype=bool)
        for rows in window_rows:
            kv = rng.random() < dropout.p_vision_goal
            kl = rng.random() < dropout.p_language_goal
            for r in rows:
                keep_v[r], keep_l[r] = kv, kl
        for side in (0, 1):
            arrays["goal_images"][side] *= keep_v[:, None, None, None, None]
            arrays["goal_image_mask"][side] &= keep_v[:, None]
            arrays["text"][side] *= keep_l[:, None]
            arrays["text_mask"][side] &= keep_l[:, None]

    def obs_side(side: int) -> ObservationBatch:
        return ObservationBatch(
            proprio=torch.as_tensor(arrays["proprio"][side], dtype=dtype),
            proprio_mask=torch.as_tensor(arrays["proprio_mask"][side]),
            images=torch.as_tensor(arrays["images"][side], dtype=dtype),
            image_mask=torch.as_tensor(arrays["image_mask"][side]),
            goal_images=torch.as_tensor(arrays["goal_images"][side], dtype=dtype),
            goal_image_mask=torch.as_tensor(arrays["goal_image_mask"][side]),
            text=torch.as_tensor(arrays["text"][side]),
            text_mask=torch.as_tensor(arrays["text_mask"][side]))

    return TransitionBatch(
        obs=obs_side(0),
        actions=torch.as_tensor(actions, dtype=dtype),
        rewards=torch.as_tensor(rewards, dtype=dtype),
        terminals=torch.as_tensor(terminals),
        next_obs=obs_side(1),
        valid=torch.as_tensor(valid),
        alphas=torch.as_tensor(alphas, dtype=dtype) if alphas is not None else None,
        betas=torch.as_tensor(betas, dtype=dtype) if betas is not None else None)


def train(state: ModelState, store: EpisodeStore, spec: ModalitySpec,
          weights: LossWeights, optim: OptimConfig, bins: ValueBins,
          steps: int, seed: int, *, objective: str = "q",
          group_weights: GroupWeights | None = None,
          dropout: DropoutConfig | None = None,
          group_loss_map: dict[str, tuple[float, float]] | None = None,
          use_final_frame_goal: bool = False,
          behavior_state: ModelState | None = None,
          behavior_mode: str = "constant",
          moments: AdamMoments | None = None,
          metrics_path: str | None = None) -> list[dict]:
    """Run ``steps`` optimizer updates on the store; returns per-step metrics."""
    if objective not in ("q", "v"):
        raise ValueError("objective must be 'q' or 'v'")
    if len(store) == 0:
        raise ValueError("dataset is empty")
    if group_weights is None:
        group_weights = GroupWeights({g: 1.0 for g in store.groups})
    moments = moments if moments is not None else AdamMoments()
    torch_gen = torch.Generator().manual_seed(seed)
    np_rng = np.random.default_rng(seed)
    model = state.model
    dtype = next(model.parameters()).dtype
    metrics: list[dict] = []
    sink = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    try:
        for _ in range(steps):
            windows = sample_windows(store, optim.batch_size, optim.traj_len,
                                     group_weights, np_rng)
            batch = collate_windows(windows, spec, dropout=dropout, rng=np_rng,
                                    group_loss_map=group_loss_map,
                                    use_final_frame_goal=use_final_frame_goal,
                                    dtype=dtype)
            if objective == "q":
                loss, parts = loss_q(batch, state, weights, bins, torch_gen)
            else:
                behavior_lp = None
                if behavior_mode == "learned":
                    if behavior_state is None:
                        raise ValueError("learned behavior mode needs behavior_state")
                    with torch.no_grad():
                        b_model = behavior_state.model
                        z_b = b_model.encode_observations(batch.obs)
                        behavior_lp = log_prob_of_indices(
                            b_model.decode_policy(z_b),
                            b_model.codec.to_indices(batch.actions))
                loss, parts = loss_v(batch, state, weights, bins,
                                     behavior_likelihood_mode=behavior_mode,
                                     behavior_log_probs=behavior_lp)
            if not math.isfinite(parts["loss"]):
                raise RuntimeError(
                    f"non-finite loss at step {state.step_counter}: {parts}")
            model.zero_grad(set_to_none=True)
            loss.backward()
            grads = {n: p.grad for n, p in model.named_parameters()}
            grad_norm = clip_grad_norm(grads, optim.grad_clip)
            lr = lr_at(state.step_counter, optim)
            params = dict(model.named_parameters())
            if optimizer_step(params, grads, moments, state.step_counter, optim, lr):
                state.step_counter += 1
                maybe_update_target(state, weights.target_period)
            record = {"step": state.step_counter, "loss": parts["loss"],
                      "rl_term": parts["rl_term"], "bc_term": parts["bc_term"],
                      "td_term": parts["td_term"], "lr": lr, "grad_norm": grad_norm}
            metrics.append(record)
            if sink:
                sink.write(json.dumps(record) + "\n")
    finally:
        if sink:
            sink.close()
    return metrics


def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str) -> dict[str, str]:
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read())


def model_config(model: LatentAttentionModel) -> dict:
    """JSON-able description sufficient to rebuild the architecture."""
    return {
        "modality_spec": dataclasses.asdict(model.spec),
        "arch": dataclasses.asdict(model.arch),
        "action_low": model.codec.low,
        "action_high": model.codec.high,
    }


def build_model(config: dict, dtype: torch.dtype = torch.float64) -> LatentAttentionModel:
    spec_kw = dict(config["modality_spec"])
    for key in ("image_hwc", "gains", "conv_channels"):
        spec_kw[key] = tuple(spec_kw[key])
    spec = ModalitySpec(**spec_kw)
    arch = ArchConfig(**config["arch"])
    return LatentAttentionModel(spec, arch, config["action_low"],
                                config["action_high"], dtype=dtype)


@dataclass
class Checkpoint:
    state: ModelState
    moments: AdamMoments
    torch_generator: torch.Generator
    numpy_rng: np.random.Generator
    config: dict
    extra: dict


def _tensor_sections(state: ModelState, moments: AdamMoments):
    yield "model", state.model.state_dict()
    yield "target", state.target.state_dict()
    yield "moment_m", moments.m
    yield "moment_v", moments.v


def save_checkpoint(path: str, state: ModelState, moments: AdamMoments | None = None,
                    torch_generator: torch.Generator | None = None,
                    numpy_rng: np.random.Generator | None = None,
                    extra: dict | None = None) -> None:
    """Full-precision training snapshot with integrity checksum.

    Restores bit-identically: parameters, target copy, optimizer moments,
    step counter and both rng states.
    """
    moments = moments or AdamMoments()
    torch_generator = torch_generator or torch.Generator().manual_seed(0)
    numpy_rng = numpy_rng or np.random.default_rng(0)
    entries, chunks, offset = [], [], 0
    for section, tensors in _tensor_sections(state, moments):
        for name, tensor in tensors.items():
            arr = tensor.detach().cpu().numpy()
            data = np.ascontiguousarray(arr).astype("<f8").tobytes()
            entries.append({"section": section, "name": name,
                            "shape": list(arr.shape), "offset": offset,
                            "length": len(data)})
            chunks.append(data)
            offset += len(data)
    payload = b"".join(chunks)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": model_config(state.model),
        "step": state.step_counter,
        "entries": entries,
        "torch_rng": torch_generator.get_state().numpy().tobytes().hex(),
        "numpy_rng": numpy_rng.bit_generator.state,
        "extra": extra or {},
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        f.write(payload)


def load_checkpoint(path: str, dtype: torch.dtype = torch.float64) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("not a training checkpoint (bad magic)")
    n = int.from_bytes(raw[8:16], "little")
    try:
        manifest = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError("corrupt checkpoint manifest") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    payload = raw[16 + n:]
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise ValueError("checkpoint payload checksum mismatch (corrupt or truncated)")

    sections: dict[str, dict[str, torch.Tensor]] = {}
    for entry in manifest["entries"]:
        chunk = payload[entry["offset"]:entry["offset"] + entry["length"]]
        arr = np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).copy()
        sections.setdefault(entry["section"], {})[entry["name"]] = \
            torch.as_tensor(arr, dtype=dtype)

    model = build_model(manifest["config"], dtype=dtype)
    model.load_state_dict(sections.get("model", {}))
    state = ModelState.create(model)
    state.target.load_state_dict(sections.get("target", {}))
    state.step_counter = manifest["step"]
    moments = AdamMoments(m=sections.get("moment_m", {}), v=sections.get("moment_v", {}))
    gen = torch.Generator()
    gen.set_state(torch.frombuffer(bytearray.fromhex(manifest["torch_rng"]),
                                   dtype=torch.uint8).clone())
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["numpy_rng"]
    return Checkpoint(state=state, moments=moments, torch_generator=gen,
                      numpy_rng=rng, config=manifest["config"],
                      extra=manifest.get("extra", {}))
