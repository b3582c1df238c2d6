"""Latent-bottleneck attention network.

Trainable latent vectors cross-attend the assembled input tokens once,
a stack of self-attention blocks runs on the latents, and small
cross-attention decoders read the final latents out: learned queries for
per-dimension action logits, an action-derived query for value-bin
logits, and a learned query for the state-value head. Keeping
self-attention on the latents makes the input-length cost linear, and
caching the latents lets many actions be scored per encoded state.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .bins import ActionCodec
from .encoders import ActionQueryEncoder, ModalitySpec, MultimodalEncoder, ObservationBatch, TokenSequence

MASK_FILL = -1e30  # additive pre-softmax constant; exp underflows to exactly 0


def attention(queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor,
              mask: torch.Tensor | None = None) -> torch.Tensor:
    """softmax(Q K^T / sqrt(D_Q)) V with masked keys receiving zero weight.

    queries: (..., N_Q, D_Q), keys: (..., N_K, D_Q), values: (..., N_K, D_V),
    mask: broadcastable to (..., N_K) with True marking valid keys.
    """
    if queries.shape[-1] != keys.shape[-1]:
        raise ValueError("query/key dims disagree")
    if keys.shape[-2] != values.shape[-2]:
        raise ValueError("key/value counts disagree")
    scores = queries @ keys.transpose(-1, -2) / math.sqrt(queries.shape[-1])
    if mask is not None:
        if not mask.any(dim=-1).all():
            raise ValueError("attention requires at least one unmasked key")
        scores = scores.masked_fill(~mask[..., None, :], MASK_FILL)
    return torch.softmax(scores, dim=-1) @ values


@dataclass(frozen=True)
class ArchConfig:
    """Backbone shape: latent stack plus decoder bin counts."""

    n_latents: int = 4
    latent_dim: int = 32
    n_blocks: int = 1
    widening: int = 1
    n_action_bins: int = 5
    n_value_bins: int = 51
    n_heads: int = 4
    query_dim: int | None = None  # decoder query width D_O; defaults to latent_dim

    def __post_init__(self):
        for name in ("n_latents", "latent_dim", "widening", "n_action_bins",
                     "n_value_bins", "n_heads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be nonnegative")
        if self.latent_dim % self.n_heads:
            raise ValueError("latent_dim must be divisible by n_heads")
        if self.out_dim % self.n_heads:
            raise ValueError("query_dim must be divisible by n_heads")

    @property
    def out_dim(self) -> int:
        return self.query_dim if self.query_dim is not None else self.latent_dim


class AttentionBlock(nn.Module):
    """Pre-norm multi-head attention with residual and a widened MLP.

    The block width equals the query-side width; keys and values may come
    from a source of different width. With zero output projections the
    block is the identity on its query input.
    """

    def __init__(self, width: int, kv_width: int, n_heads: int, widening: int,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        if width % n_heads:
            raise ValueError("width must be divisible by n_heads")
        self.n_heads = n_heads
        self.head_dim = width // n_heads
        kw = dict(dtype=dtype)
        self.norm_q = nn.LayerNorm(width, **kw)
        self.norm_kv = nn.LayerNorm(kv_width, **kw)
        self.norm_mlp = nn.LayerNorm(width, **kw)
        self.q_proj = nn.Linear(width, width, **kw)
        self.k_proj = nn.Linear(kv_width, width, **kw)
        self.v_proj = nn.Linear(kv_width, width, **kw)
        self.out_proj = nn.Linear(width, width, **kw)
        self.mlp_in = nn.Linear(width, widening * width, **kw)
        self.mlp_out = nn.Linear(widening * width, width, **kw)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        return x.unflatten(-1, (self.n_heads, self.head_dim)).transpose(-3, -2)

    def forward(self, x_q: torch.Tensor, x_kv: torch.Tensor,
                mask: torch.Tensor | None = None) -> torch.Tensor:
        q = self._split(self.q_proj(self.norm_q(x_q)))
        kv = self.norm_kv(x_kv)
        k = self._split(self.k_proj(kv))
        v = self._split(self.v_proj(kv))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if mask is not None:
            if not mask.any(dim=-1).all():
                raise ValueError("attention requires at least one unmasked key")
            scores = scores.masked_fill(~mask[..., None, None, :], MASK_FILL)
        att = (torch.softmax(scores, dim=-1) @ v).transpose(-3, -2).flatten(-2)
        x = x_q + self.out_proj(att)
        return x + self.mlp_out(torch.nn.functional.gelu(self.mlp_in(self.norm_mlp(x))))


class LatentAttentionModel(nn.Module):
    """Full network: modality encoders, latent stack, policy/value decoders."""

    def __init__(self, spec: ModalitySpec, arch: ArchConfig,
                 action_low: float = -1.0, action_high: float = 1.0,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.spec = spec
        self.arch = arch
        self.codec = ActionCodec(spec.n_action_dims, arch.n_action_bins,
                                 action_low, action_high)
        d_z, d_o = arch.latent_dim, arch.out_dim
        self.encoder = MultimodalEncoder(spec, dtype=dtype)
        self.latents = nn.Parameter(
            torch.randn(arch.n_latents, d_z, dtype=dtype) / math.sqrt(d_z))
        self.input_xattn = AttentionBlock(d_z, spec.embed_dim, arch.n_heads,
                                          arch.widening, dtype)
        self.self_blocks = nn.ModuleList(
            AttentionBlock(d_z, d_z, arch.n_heads, arch.widening, dtype)
            for _ in range(arch.n_blocks))
        self.policy_queries = nn.Parameter(
            torch.randn(spec.n_action_dims, d_o, dtype=dtype) / math.sqrt(d_o))
        self.policy_xattn = AttentionBlock(d_o, d_z, arch.n_heads, arch.widening, dtype)
        self.policy_head = nn.Linear(d_o, arch.n_action_bins, dtype=dtype)
        self.action_encoder = ActionQueryEncoder(spec.n_action_dims, spec.gains,
                                                 d_o, dtype=dtype)
        self.q_xattn = AttentionBlock(d_o, d_z, arch.n_heads, arch.widening, dtype)
        self.q_head = nn.Linear(d_o, arch.n_value_bins, dtype=dtype)
        self.value_query = nn.Parameter(
            torch.randn(1, d_o, dtype=dtype) / math.sqrt(d_o))
        self.value_xattn = AttentionBlock(d_o, d_z, arch.n_heads, arch.widening, dtype)
        self.value_head = nn.Linear(d_o, arch.n_value_bins, dtype=dtype)
        # zero-initialized heads: the initial policy is exactly uniform and
        # initial value distributions exactly flat, so early improvement
        # steps tilt a known reference instead of init noise
        for head in (self.policy_head, self.q_head, self.value_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def encode_latents(self, tokens: TokenSequence) -> torch.Tensor:
        """Cross-attend inputs into the latents, then run the self-attention stack."""
        b = tokens.embeddings.shape[0]
        z = self.input_xattn(self.latents.expand(b, -1, -1), tokens.embeddings,
                             tokens.mask)
        for block in self.self_blocks:
            z = block(z, z)
        return z

    def encode_observations(self, batch: ObservationBatch) -> torch.Tensor:
        return self.encode_latents(self.encoder.assemble_input(batch))

    def decode_policy(self, z: torch.Tensor) -> torch.Tensor:
        """Latents -> (B, N_A, N_B) per-dimension action-bin logits."""
        q = self.policy_queries.expand(z.shape[0], -1, -1)
        return self.policy_head(self.policy_xattn(q, z))

    def decode_q(self, z: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        """Score actions against cached latents.

        actions: (B, N_A) -> (B, N_Q) logits, or (B, K, N_A) -> (B, K, N_Q)
        for K candidate actions per encoded state.
        """
        squeeze = actions.dim() == 2
        if squeeze:
            actions = actions[:, None, :]
        query = self.action_encoder(actions)            # (B, K, D_O)
        out = self.q_head(self.q_xattn(query, z))
        return out[:, 0] if squeeze else out

    def decode_value(self, z: torch.Tensor) -> torch.Tensor:
        """Latents -> (B, N_Q) state-value bin logits (action-free head)."""
        q = self.value_query.expand(z.shape[0], -1, -1)
        return self.value_head(self.value_xattn(q, z))[:, 0]


def log_prob_of_indices(policy_logits: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    """Log-likelihood of binned actions under per-dimension categoricals.

    policy_logits: (B, N_A, N_B); indices: (B, N_A) or (B, K, N_A).
    Returns (B,) or (B, K).
    """
    logp = torch.log_softmax(policy_logits, dim=-1)
    if indices.dim() == 2:
        return logp.gather(-1, indices[..., None])[..., 0].sum(-1)
    b, k, n_a = indices.shape
    expanded = logp[:, None].expand(b, k, n_a, -1)
    return expanded.gather(-1, indices[..., None])[..., 0].sum(-1)


def sample_action_indices(policy_logits: torch.Tensor, n_samples: int,
                          generator: torch.Generator) -> torch.Tensor:
    """Draw (B, K, N_A) bin indices from per-dimension categoricals."""
    b, n_a, n_b = policy_logits.shape
    probs = torch.softmax(policy_logits.detach(), dim=-1).reshape(b * n_a, n_b)
    idx = torch.multinomial(probs, n_samples, replacement=True, generator=generator)
    return idx.reshape(b, n_a, n_samples).permute(0, 2, 1)


def greedy_action_indices(policy_logits: torch.Tensor) -> torch.Tensor:
    """Most likely bin per dimension; ties resolve to the lowest bin index."""
    n_b = policy_logits.shape[-1]
    top = policy_logits.max(dim=-1, keepdim=True).values
    candidates = torch.where(policy_logits == top,
                             torch.arange(n_b, device=policy_logits.device),
                             n_b)
    return candidates.min(dim=-1).values


PARAMS_MAGIC = b"LACPARAM"
PARAMS_VERSION = 1


def save_params(module: nn.Module, path) -> None:
    """Write parameters as a JSON manifest plus a flat little-endian f32 payload."""
    entries, chunks, offset = [], [], 0
    for name, tensor in module.state_dict().items():
        data = tensor.detach().cpu().numpy().astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    manifest = {
        "version": PARAMS_VERSION,
        "dtype": "<f4",
        "entries": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        f.write(payload)


def load_params(path) -> dict[str, np.ndarray]:
    """Read a parameter file back into named float32 arrays."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:len(PARAMS_MAGIC)] != PARAMS_MAGIC:
        raise ValueError("not a parameter file (bad magic)")
    n = int.from_bytes(raw[8:16], "little")
    manifest = json.loads(raw[16:16 + n].decode("utf-8"))
    if manifest.get("version") != PARAMS_VERSION:
        raise ValueError(f"unsupported parameter file version {manifest.get('version')}")
    payload = raw[16 + n:]
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise ValueError("parameter payload checksum mismatch")
    out = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        chunk = payload[entry["offset"]:entry["offset"] + size]
        out[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
    return out


def apply_params(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {k: torch.as_tensor(v).to(dict(module.state_dict())[k].dtype)
             for k, v in arrays.items()}
    module.load_state_dict(state)
