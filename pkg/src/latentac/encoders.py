"""Multimodal observation encoders.

Raw observations (proprioception, images, goal images, text task ids) are
padded to a fixed layout described by a :class:`ModalitySpec`, embedded
per modality, and concatenated into a single token sequence with an
explicit validity mask. Continuous scalars (proprioception and actions)
are embedded with a multi-scale tanh normalizer instead of discretization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

DEFAULT_GAINS = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0)

SEGMENT_ORDER = ("proprio", "images", "goal_images", "text")


@dataclass(frozen=True)
class ModalitySpec:
    """Fixed input layout: how many entries each modality is padded to."""

    n_proprio: int = 4
    n_images: int = 0
    n_goal_images: int = 0
    n_text_tokens: int = 0
    n_action_dims: int = 1
    image_hwc: tuple[int, int, int] = (16, 16, 1)
    vocab_size: int = 256
    gains: tuple[float, ...] = DEFAULT_GAINS
    embed_dim: int = 32
    conv_channels: tuple[int, ...] = (8, 16)

    def __post_init__(self):
        g = np.asarray(self.gains, dtype=np.float64)
        if g.ndim != 1 or g.size == 0 or not np.all(np.isfinite(g)):
            raise ValueError("gains must be a non-empty finite vector")
        if np.any(g <= 0) or np.any(np.diff(g) <= 0):
            raise ValueError("gains must be positive and strictly increasing")
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")
        for name in ("n_proprio", "n_images", "n_goal_images", "n_text_tokens",
                     "n_action_dims", "vocab_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def n_gains(self) -> int:
        return len(self.gains)

    @property
    def image_grid(self) -> tuple[int, int]:
        # each conv stage halves the spatial size (stride 2, ceil rounding)
        h, w, _ = self.image_hwc
        for _ in self.conv_channels:
            h, w = math.ceil(h / 2), math.ceil(w / 2)
        return h, w

    @property
    def tokens_per_image(self) -> int:
        gh, gw = self.image_grid
        return gh * gw

    @property
    def n_tokens(self) -> int:
        """Total token count of an assembled input sequence."""
        return (self.n_proprio * self.n_gains
                + (self.n_images + self.n_goal_images) * self.tokens_per_image
                + self.n_text_tokens)

    def segment_ranges(self) -> dict[str, tuple[int, int]]:
        sizes = {
            "proprio": self.n_proprio * self.n_gains,
            "images": self.n_images * self.tokens_per_image,
            "goal_images": self.n_goal_images * self.tokens_per_image,
            "text": self.n_text_tokens,
        }
        out, start = {}, 0
        for name in SEGMENT_ORDER:
            out[name] = (start, start + sizes[name])
            start += sizes[name]
        return out


def multiscale_normalize(x, gains) -> np.ndarray:
    """tanh-bounded embeddings of ``x`` at every gain: ``tanh(gains[i] * x)``.

    ``x`` may be a scalar or an array; one trailing axis of length
    ``len(gains)`` is appended. Output lies strictly in (-1, 1), is odd in
    ``x`` and componentwise nondecreasing.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("multiscale_normalize requires finite input")
    g = np.asarray(gains, dtype=np.float64)
    if g.ndim != 1 or np.any(g <= 0) or not np.all(np.isfinite(g)):
        raise ValueError("gains must be a finite positive vector")
    return np.tanh(x[..., None] * g)


@dataclass
class Observation:
    """A single (possibly partial) multimodal observation.

    Missing trailing entries are padded with zeros and flagged invalid when
    batched against a :class:`ModalitySpec`.
    """

    proprio: np.ndarray = field(default_factory=lambda: np.zeros(0))
    images: np.ndarray | None = None          # (k, H, W, C)
    goal_images: np.ndarray | None = None     # (k, H, W, C)
    text_tokens: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass
class ObservationBatch:
    """Spec-padded batch arrays plus per-modality validity masks."""

    proprio: torch.Tensor        # (B, N_P)
    proprio_mask: torch.Tensor   # (B, N_P) bool
    images: torch.Tensor         # (B, N_V, H, W, C)
    image_mask: torch.Tensor     # (B, N_V) bool
    goal_images: torch.Tensor    # (B, N_Vg, H, W, C)
    goal_image_mask: torch.Tensor
    text: torch.Tensor           # (B, N_L) int64
    text_mask: torch.Tensor

    def __len__(self) -> int:
        return self.proprio.shape[0]

    def clone(self) -> "ObservationBatch":
        return ObservationBatch(*(t.clone() for t in (
            self.proprio, self.proprio_mask, self.images, self.image_mask,
            self.goal_images, self.goal_image_mask, self.text, self.text_mask)))


def pad_batch(spec: ModalitySpec, observations: list[Observation],
              dtype: torch.dtype = torch.float64) -> ObservationBatch:
    """Pad raw observations to the spec layout and build validity masks."""
    b = len(observations)
    h, w, c = spec.image_hwc
    proprio = np.zeros((b, spec.n_proprio))
    pmask = np.zeros((b, spec.n_proprio), dtype=bool)
    images = np.zeros((b, spec.n_images, h, w, c))
    imask = np.zeros((b, spec.n_images), dtype=bool)
    gimages = np.zeros((b, spec.n_goal_images, h, w, c))
    gmask = np.zeros((b, spec.n_goal_images), dtype=bool)
    text = np.zeros((b, spec.n_text_tokens), dtype=np.int64)
    tmask = np.zeros((b, spec.n_text_tokens), dtype=bool)

    for i, obs in enumerate(observations):
        p = np.asarray(obs.proprio, dtype=np.float64).reshape(-1)
        if p.size > spec.n_proprio:
            raise ValueError(f"proprio length {p.size} exceeds spec {spec.n_proprio}")
        if not np.all(np.isfinite(p)):
            raise ValueError("non-finite proprio observation")
        proprio[i, :p.size] = p
        pmask[i, :p.size] = True
        for arr, mask, stack, name in ((images, imask, obs.images, "images"),
                                       (gimages, gmask, obs.goal_images, "goal images")):
            if stack is None:
                continue
            stack = np.asarray(stack, dtype=np.float64)
            if stack.ndim == 3:
                stack = stack[None]
            if stack.shape[0] > arr.shape[1] or stack.shape[1:] != (h, w, c):
                raise ValueError(f"{name} shape {stack.shape} does not match spec")
            arr[i, :stack.shape[0]] = stack
            mask[i, :stack.shape[0]] = True
        t = np.asarray(obs.text_tokens, dtype=np.int64).reshape(-1)
        if t.size > spec.n_text_tokens:
            raise ValueError(f"text length {t.size} exceeds spec {spec.n_text_tokens}")
        if t.size and (t.min() < 0 or t.max() >= spec.vocab_size):
            raise ValueError("text token id out of vocabulary range")
        text[i, :t.size] = t
        tmask[i, :t.size] = True

    as_t = lambda a: torch.as_tensor(a, dtype=dtype)
    return ObservationBatch(
        proprio=as_t(proprio), proprio_mask=torch.as_tensor(pmask),
        images=as_t(images), image_mask=torch.as_tensor(imask),
        goal_images=as_t(gimages), goal_image_mask=torch.as_tensor(gmask),
        text=torch.as_tensor(text), text_mask=torch.as_tensor(tmask))


def concat_observations(a: ObservationBatch, b: ObservationBatch) -> ObservationBatch:
    """Stack two spec-compatible batches along the batch axis."""
    return ObservationBatch(*(torch.cat([x, y], dim=0) for x, y in zip(
        (a.proprio, a.proprio_mask, a.images, a.image_mask, a.goal_images,
         a.goal_image_mask, a.text, a.text_mask),
        (b.proprio, b.proprio_mask, b.images, b.image_mask, b.goal_images,
         b.goal_image_mask, b.text, b.text_mask))))


def tokenize_task(task_id: str, max_tokens: int) -> np.ndarray:
    """Byte-level task-description tokens (fixed 256-entry vocabulary)."""
    raw = task_id.encode("utf-8")[:max_tokens]
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


@dataclass
class TokenSequence:
    """Assembled per-timestep embedding matrix with mask and segment map."""

    embeddings: torch.Tensor              # (B, N, D_I)
    mask: torch.Tensor                    # (B, N) bool
    segments: dict[str, tuple[int, int]]


class MultimodalEncoder(nn.Module):
    """Embeds each modality into D_I-dimensional tokens and concatenates.

    Proprioception: every scalar becomes ``n_gains`` tokens via the
    multi-scale normalizer and a per-gain linear map (shared across
    scalars). Images: a small strided convolutional encoder followed by a
    per-cell projection; one token per output grid cell, no
    discretization. Text: a learnable lookup table.
    """

    def __init__(self, spec: ModalitySpec, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.spec = spec
        d = spec.embed_dim
        self.register_buffer("gains", torch.as_tensor(spec.gains, dtype=dtype))
        self.proprio_weight = nn.Parameter(torch.empty(spec.n_gains, d, dtype=dtype))
        self.proprio_bias = nn.Parameter(torch.zeros(spec.n_gains, d, dtype=dtype))
        nn.init.normal_(self.proprio_weight, std=1.0 / math.sqrt(spec.n_gains))
        # learned per-slot position embedding: attention is permutation
        # invariant over keys, so token identity must come from content
        self.position_embed = nn.Parameter(
            torch.randn(spec.n_tokens, d, dtype=dtype) / math.sqrt(d))

        convs = []
        in_ch = spec.image_hwc[2]
        for out_ch in spec.conv_channels:
            convs.append(nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2,
                                   padding=1, dtype=dtype))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        self.image_proj = nn.Linear(in_ch, d, dtype=dtype)
        self.text_table = nn.Embedding(spec.vocab_size, d, dtype=dtype)

    def encode_proprio(self, values: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, N_P) scalars -> (B, N_P * N_G, D_I) tokens; padded rows zeroed."""
        if not torch.isfinite(values).all():
            raise ValueError("non-finite proprio input")
        scaled = torch.tanh(values[..., None] * self.gains)        # (B, N_P, N_G)
        tokens = scaled[..., None] * self.proprio_weight + self.proprio_bias
        token_mask = mask[..., None].expand(*mask.shape, self.spec.n_gains)
        tokens = tokens * token_mask[..., None]
        b = values.shape[0]
        return tokens.reshape(b, -1, self.spec.embed_dim), token_mask.reshape(b, -1)

    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        """(B, H, W, C) -> (B, N_E, D_I): strided conv grid, one token per cell."""
        h, w, c = self.spec.image_hwc
        if tuple(image.shape[-3:]) != (h, w, c):
            raise ValueError(f"image shape {tuple(image.shape[-3:])} != spec {(h, w, c)}")
        x = image.permute(0, 3, 1, 2)
        for conv in self.convs:
            x = torch.relu(conv(x))
        x = x.flatten(2).transpose(1, 2)                           # (B, cells, C_out)
        return self.image_proj(x)

    def encode_text(self, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """(B, N_L) ids -> (B, N_L, D_I) table rows; padded positions zeroed."""
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.spec.vocab_size):
            raise ValueError("text token id out of vocabulary range")
        return self.text_table(tokens) * mask[..., None]

    def _encode_image_stack(self, stack: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, k = stack.shape[:2]
        n_e, d = self.spec.tokens_per_image, self.spec.embed_dim
        if k == 0:
            z = stack.new_zeros((b, 0, d))
            return z, torch.zeros((b, 0), dtype=torch.bool, device=stack.device)
        tokens = self.encode_image(stack.flatten(0, 1)).reshape(b, k, n_e, d)
        token_mask = mask[..., None].expand(b, k, n_e)
        tokens = tokens * token_mask[..., None]
        return tokens.reshape(b, k * n_e, d), token_mask.reshape(b, k * n_e)

    def assemble_input(self, batch: ObservationBatch) -> TokenSequence:
        """Concatenate proprio, image, goal-image and text tokens with masks."""
        p_tok, p_mask = self.encode_proprio(batch.proprio, batch.proprio_mask)
        v_tok, v_mask = self._encode_image_stack(batch.images, batch.image_mask)
        g_tok, g_mask = self._encode_image_stack(batch.goal_images, batch.goal_image_mask)
        t_tok = self.encode_text(batch.text, batch.text_mask)
        emb = torch.cat([p_tok, v_tok, g_tok, t_tok], dim=1)
        mask = torch.cat([p_mask, v_mask, g_mask, batch.text_mask], dim=1)
        emb = (emb + self.position_embed) * mask[..., None]
        return TokenSequence(emb, mask, self.spec.segment_ranges())


class ActionQueryEncoder(nn.Module):
    """Encodes an action vector into a single decoder query.

    Each action dimension is multiscale-normalized; a first projection is
    applied per (dimension, gain) pair, then a second projection collapses
    the block to one query vector.
    """

    def __init__(self, n_action_dims: int, gains: tuple[float, ...],
                 out_dim: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.n_action_dims = n_action_dims
        self.out_dim = out_dim
        self.register_buffer("gains", torch.as_tensor(gains, dtype=dtype))
        rows = n_action_dims * len(gains)
        self.expand_weight = nn.Parameter(torch.empty(rows, out_dim, dtype=dtype))
        self.expand_bias = nn.Parameter(torch.zeros(rows, out_dim, dtype=dtype))
        nn.init.normal_(self.expand_weight, std=1.0 / math.sqrt(rows))
        self.collapse = nn.Linear(rows * out_dim, out_dim, dtype=dtype)

    def expand(self, actions: torch.Tensor) -> torch.Tensor:
        """(B, N_A) -> intermediate (B, N_A * N_G, D_O) block before collapse."""
        if not torch.isfinite(actions).all():
            raise ValueError("non-finite action")
        if actions.shape[-1] != self.n_action_dims:
            raise ValueError(f"expected {self.n_action_dims} action dims, got {actions.shape[-1]}")
        scaled = torch.tanh(actions[..., None] * self.gains)
        flat = scaled.reshape(*actions.shape[:-1], -1)             # (B, N_A * N_G)
        return flat[..., None] * self.expand_weight + self.expand_bias

    def forward(self, actions: torch.Tensor) -> torch.Tensor:
        """(B, N_A) -> (B, D_O) query vector."""
        block = self.expand(actions)
        return self.collapse(block.reshape(*block.shape[:-2], -1))
