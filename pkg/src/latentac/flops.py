"""FLOP accounting for the latent-attention architecture.

Forward cost decomposes into the modality encoders, the input
cross-attention, the latent self-attention stack, and the two decoder
cross-attentions. Cross-attention is charged seq_len_in x seq_len_out
times the per-pair attention cost; the text encoder is charged as a full
vocabulary matmul. The backward pass costs (2 + 1/f) forwards, with the
1/f accounting for target-network refreshes every f updates, and a batch
update costs B forward-plus-backward passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .backbone import ArchConfig
from .encoders import ModalitySpec

MAF = 2  # multiply-accumulate factor


@dataclass(frozen=True)
class FlopModel:
    """Per-component forward FLOPs and the derived training costs."""

    enc_p: float
    enc_v: float
    enc_l: float
    enc_a: float
    xattn_in: float
    sattn_proc: float       # one self-attention block
    xattn_pi: float
    xattn_q: float
    n_blocks: int
    maf: float
    batch: int
    target_period: int

    @property
    def fwd(self) -> float:
        return (self.enc_p + self.enc_v + self.enc_l + self.enc_a
                + self.xattn_in + self.n_blocks * self.sattn_proc
                + self.xattn_pi + self.xattn_q)

    @property
    def bwd(self) -> float:
        return (2.0 + 1.0 / self.target_period) * self.fwd

    @property
    def update(self) -> float:
        return self.batch * (self.fwd + self.bwd)

    def summary(self) -> dict:
        return {"fwd": self.fwd, "bwd": self.bwd, "update": self.update,
                "bwd_over_fwd": self.bwd / self.fwd}


def backward_flops(fwd: float, target_period: int) -> float:
    return (2.0 + 1.0 / target_period) * fwd


def update_flops(fwd: float, batch: int, target_period: int) -> float:
    return batch * (fwd + backward_flops(fwd, target_period))


def conv_encoder_flops(spec: ModalitySpec, maf: float = MAF) -> float:
    """Convolution cost: kernels x kernel area x output area, per stage."""
    h, w, _ = spec.image_hwc
    total = 0.0
    for out_ch in spec.conv_channels:
        h, w = math.ceil(h / 2), math.ceil(w / 2)
        total += out_ch * 9 * (h * w) * maf
    return total


def _attn_pair_cost(width: float, maf: float) -> float:
    # score + value accumulation per (query, key) pair, plus softmax upkeep
    return 2.0 * maf * width + 3.0


def _block_linear_cost(n_q: float, n_kv: float, width: float, widening: float,
                       maf: float) -> float:
    # q/out projections on the query side, k/v on the kv side, widened MLP
    proj = maf * width * width * (2.0 * n_q + 2.0 * n_kv)
    mlp = maf * n_q * 2.0 * widening * width * width
    return proj + mlp


def count_flops(spec: ModalitySpec, arch: ArchConfig, batch: int = 512,
                target_period: int = 100, maf: float = MAF) -> FlopModel:
    """Forward/backward/update FLOPs for one timestep of input."""
    if batch < 1 or target_period < 1:
        raise ValueError("batch and target_period must be >= 1")
    t_p = spec.n_proprio * spec.n_gains
    t_v = (spec.n_images + spec.n_goal_images) * spec.tokens_per_image
    t_l = spec.n_text_tokens
    t_a = spec.n_action_dims * spec.n_gains
    n_tokens = spec.n_tokens
    d_i, d_z, d_o = spec.embed_dim, arch.latent_dim, arch.out_dim

    enc_p = maf * t_p * d_i
    enc_v = maf * t_v * d_i + (spec.n_images + spec.n_goal_images) * conv_encoder_flops(spec, maf)
    enc_l = maf * t_l * spec.vocab_size * d_i
    enc_a = maf * t_a * d_i

    xattn_in = (n_tokens * arch.n_latents * _attn_pair_cost(d_z, maf)
                + _block_linear_cost(arch.n_latents, n_tokens, d_z, arch.widening, maf))
    sattn = (arch.n_latents ** 2 * _attn_pair_cost(d_z, maf)
             + _block_linear_cost(arch.n_latents, arch.n_latents, d_z,
                                  arch.widening, maf))
    xattn_pi = (arch.n_latents * spec.n_action_dims * _attn_pair_cost(d_o, maf)
                + _block_linear_cost(spec.n_action_dims, arch.n_latents, d_o,
                                     arch.widening, maf)
                + maf * spec.n_action_dims * d_o * arch.n_action_bins)
    xattn_q = (arch.n_latents * 1 * _attn_pair_cost(d_o, maf)
               + _block_linear_cost(1, arch.n_latents, d_o, arch.widening, maf)
               + maf * d_o * arch.n_value_bins)

    return FlopModel(enc_p=enc_p, enc_v=enc_v, enc_l=enc_l, enc_a=enc_a,
                     xattn_in=xattn_in, sattn_proc=sattn, xattn_pi=xattn_pi,
                     xattn_q=xattn_q, n_blocks=arch.n_blocks, maf=maf,
                     batch=batch, target_period=target_period)
