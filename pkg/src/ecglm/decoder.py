"""Mirrored decoder: fused latents back to the 12-lead waveform.

Fusion is inverted with a width-1 convolution that expands the hidden width
to one feature map per lead; each lead is then upsampled by a stack of
transposed convolutions (mirroring the encoder's downsampling blocks),
refined by an inception block, and collapsed to a single waveform channel.
The decoder reuses the encoder's config: total upsampling equals the
encoder's total downsampling by construction.
"""

from __future__ import annotations

import numpy as np

from . import nnops as F
from .encoder import EncoderConfig, InceptionBlock, LeadConv, LeadNorm
from .module import Module
from .nnops import InvalidInputError
from .tensor import Tensor

# Decoder configuration mirrors the encoder's; same field meanings.
DecoderConfig = EncoderConfig


class UpBlock(Module):
    """Transposed strided convolution followed by residual refinement."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.up = self.add_child(
            "up", LeadConv(cfg, cfg.channels, cfg.channels, cfg.tie_stride, rng,
                           transpose=True))
        self.up_norm = self.add_child("up_norm", LeadNorm(cfg, cfg.channels))
        self.res_convs = []
        for i in range(cfg.tie_res_layers):
            conv = self.add_child(f"res{i}", LeadConv(cfg, cfg.channels, cfg.channels, 3, rng))
            norm = self.add_child(f"res{i}_norm", LeadNorm(cfg, cfg.channels))
            self.res_convs.append((conv, norm))

    def __call__(self, h: Tensor) -> Tensor:
        h = self.up(h, stride=self.cfg.tie_stride, padding=0)
        h = F.leaky_relu(self.up_norm(h), self.cfg.leaky_slope)
        for conv, norm in self.res_convs:
            h = F.leaky_relu(norm(conv(h, stride=1, padding="same")) + h,
                             self.cfg.leaky_slope)
        return h


class EcgDecoder(Module):
    """Width-1 unfusion, per-lead upsampling stacks, waveform head."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        scale = np.sqrt(2.0 / cfg.channels)
        self.unfuse_weight = self.register(
            "unfuse.weight",
            rng.normal(0.0, scale, size=(cfg.leads * cfg.channels, cfg.channels, 1)))
        self.unfuse_bias = self.register("unfuse.bias", np.zeros(cfg.leads * cfg.channels))
        self.ups = [self.add_child(f"up{i}", UpBlock(cfg, rng))
                    for i in range(cfg.tie_blocks)]
        self.inception = self.add_child("inception", InceptionBlock(cfg, rng))
        self.head = self.add_child("head", LeadConv(cfg, cfg.channels, 1, 1, rng))
        # start near zero output: the initial loss is then the target power
        self.head.weight.data *= 0.1

    def __call__(self, z_prime: Tensor) -> Tensor:
        """(B, channels, T') -> (B, leads, T_padded)."""
        cfg = self.cfg
        b, c, t = z_prime.shape
        if c != cfg.channels:
            raise InvalidInputError(f"expected {cfg.channels} channels, got {c}")
        h = F.conv1d(z_prime, self.unfuse_weight, self.unfuse_bias)
        h = h.reshape((b, cfg.leads, cfg.channels, t))
        for up in self.ups:
            h = up(h)
        h = self.inception(h)
        h = self.head(h, stride=1, padding=0)
        return h.reshape((b, cfg.leads, h.shape[-1]))


def decode(z_prime: Tensor, decoder: EcgDecoder) -> Tensor:
    """Decode one latent sequence (T', channels) to a (leads, T_padded)
    waveform; callers crop to the original length for comparison."""
    batched = decoder(z_prime.transpose().reshape((1,) + z_prime.shape[::-1]))
    return batched[0]


def recon_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean squared error over all leads and timesteps."""
    if x.shape != x_hat.shape:
        raise InvalidInputError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    return ((x - x_hat) ** 2.0).mean()


def recon_loss_np(x: np.ndarray, x_hat: np.ndarray) -> float:
    if x.shape != x_hat.shape:
        raise InvalidInputError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    return float(np.mean((np.asarray(x) - np.asarray(x_hat)) ** 2))
