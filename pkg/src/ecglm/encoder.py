"""Lead-wise multi-scale ECG encoder.

Each lead is z-normalized, right-padded with its edge value to a multiple of
the total downsample factor, and passed through its own copy of the same
architecture: a width-1 stem, one multi-kernel inception block, then a stack
of downsampling blocks. A final fusion layer concatenates the twelve feature
maps along channels and mixes them back to the hidden width with a width-1
convolution, yielding one frame sequence per record.

Internally all twelve leads run at once through grouped convolutions on
``(batch, lead, channel, time)`` tensors; a config flag switches the
per-lead weights to a single shared set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nnops as F
from .module import Module
from .nnops import InvalidInputError
from .signals import EcgRecord, z_normalize
from .tensor import Tensor


@dataclass
class EncoderConfig:
    channels: int = 64                       # hidden width per lead
    inception_kernels: tuple[int, ...] = (1, 3, 5, 7)
    tie_blocks: int = 4                      # downsampling block count
    tie_stride: int = 2                      # per-block downsample factor
    tie_res_layers: int = 1                  # residual convs before each downsample
    leads: int = 12
    share_lead_weights: bool = False
    leaky_slope: float = 0.01
    pad_multiple: int | None = None          # padding granularity; None = auto

    def __post_init__(self):
        for k in self.inception_kernels:
            if k != 1 and k % 2 == 0:
                raise InvalidInputError(f"inception kernels must be odd or 1, got {k}")
        if self.pad_multiple is not None and self.pad_multiple % self.total_downsample:
            raise InvalidInputError(
                f"pad_multiple {self.pad_multiple} not divisible by the"
                f" total downsample factor {self.total_downsample}")

    @property
    def total_downsample(self) -> int:
        return self.tie_stride**self.tie_blocks

    @property
    def pad_factor(self) -> int:
        """Granularity signals are right-padded to. Defaults to 512 (so the
        stock 5000-step record pads to 5120 and yields 320 frames) when the
        downsample factor divides it, else to the downsample factor."""
        if self.pad_multiple is not None:
            return self.pad_multiple
        return 512 if 512 % self.total_downsample == 0 else self.total_downsample

    @property
    def norm_groups(self) -> int:
        return 8 if self.channels % 8 == 0 else 1


@dataclass
class LatentSequence:
    frames: Tensor                           # (T', channels)
    source_record_id: str = ""

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def pad_to_multiple(x: np.ndarray, factor: int) -> np.ndarray:
    """Right-pad the time axis with the edge value up to a multiple of
    ``factor``."""
    t = x.shape[-1]
    target = -(-t // factor) * factor
    if target == t:
        return x
    pad = [(0, 0)] * (x.ndim - 1) + [(0, target - t)]
    return np.pad(x, pad, mode="edge")


def normalize_and_pad(record: EcgRecord, factor: int) -> np.ndarray:
    normed = np.stack([z_normalize(lead) for lead in record.samples])
    return pad_to_multiple(normed, factor)


class LeadConv(Module):
    """Convolution applied independently per lead: either one weight set per
    lead (grouped) or a single shared set."""

    def __init__(self, cfg: EncoderConfig, c_in: int, c_out: int, kernel: int,
                 rng: np.random.Generator, transpose: bool = False):
        super().__init__()
        self.shared = cfg.share_lead_weights
        self.transpose = transpose
        fan_in = c_in * kernel
        scale = np.sqrt(2.0 / fan_in)
        if transpose:
            core = (c_in, c_out, kernel)
        else:
            core = (c_out, c_in, kernel)
        wshape = core if self.shared else (cfg.leads,) + core
        bshape = (c_out,) if self.shared else (cfg.leads, c_out)
        self.weight = self.register("weight", rng.normal(0.0, scale, size=wshape))
        self.bias = self.register("bias", np.zeros(bshape))

    def __call__(self, x: Tensor, stride: int = 1, padding: int | str = 0) -> Tensor:
        if self.shared:
            b, g, c, t = x.shape
            flat = x.reshape((b * g, c, t))
            if self.transpose:
                out = F.conv1d_transpose(flat, self.weight, self.bias,
                                         stride=stride, padding=int(padding or 0))
            else:
                out = F.conv1d(flat, self.weight, self.bias, stride=stride, padding=padding)
            return out.reshape((b, g) + out.shape[1:])
        if self.transpose:
            return F.grouped_conv1d_transpose(x, self.weight, self.bias,
                                              stride=stride, padding=int(padding or 0))
        return F.grouped_conv1d(x, self.weight, self.bias, stride=stride, padding=padding)


class LeadNorm(Module):
    """GroupNorm with per-lead (or shared) affine parameters."""

    def __init__(self, cfg: EncoderConfig, channels: int):
        super().__init__()
        self.groups = 8 if channels % 8 == 0 else 1
        shape = (channels, 1) if cfg.share_lead_weights else (cfg.leads, channels, 1)
        self.gamma = self.register("gamma", np.ones(shape))
        self.beta = self.register("beta", np.zeros(shape))

    def __call__(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.groups, self.gamma, self.beta)


class InceptionBlock(Module):
    """Parallel convolutions with kernel sizes {1,3,5,7} (same padding),
    summed, normalized, and activated around a residual connection:
    ``out = LeakyReLU(GN(sum_k conv_k(h)) + h)``."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.convs = []
        for k in cfg.inception_kernels:
            conv = LeadConv(cfg, cfg.channels, cfg.channels, k, rng)
            self.add_child(f"conv{k}", conv)
            self.convs.append((k, conv))
        self.norm = self.add_child("norm", LeadNorm(cfg, cfg.channels))

    def __call__(self, h: Tensor) -> Tensor:
        total = None
        for k, conv in self.convs:
            y = conv(h, stride=1, padding="same")
            total = y if total is None else total + y
        return F.leaky_relu(self.norm(total) + h, self.cfg.leaky_slope)


class TieBlock(Module):
    """Residual convolution layers at full resolution followed by a strided
    downsampling convolution (kernel = stride, non-overlapping)."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.res_convs = []
        for i in range(cfg.tie_res_layers):
            conv = self.add_child(f"res{i}", LeadConv(cfg, cfg.channels, cfg.channels, 3, rng))
            norm = self.add_child(f"res{i}_norm", LeadNorm(cfg, cfg.channels))
            self.res_convs.append((conv, norm))
        self.down = self.add_child(
            "down", LeadConv(cfg, cfg.channels, cfg.channels, cfg.tie_stride, rng))
        self.down_norm = self.add_child("down_norm", LeadNorm(cfg, cfg.channels))

    def __call__(self, h: Tensor) -> Tensor:
        t = h.shape[-1]
        if t % self.cfg.tie_stride != 0:
            raise InvalidInputError(
                f"time length {t} not divisible by stride {self.cfg.tie_stride}")
        for conv, norm in self.res_convs:
            h = F.leaky_relu(norm(conv(h, stride=1, padding="same")) + h,
                             self.cfg.leaky_slope)
        h = self.down(h, stride=self.cfg.tie_stride, padding=0)
        return F.leaky_relu(self.down_norm(h), self.cfg.leaky_slope)


class EcgEncoder(Module):
    """Twelve per-lead encoder stacks plus the cross-lead fusion layer."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.stem = self.add_child("stem", LeadConv(cfg, 1, cfg.channels, 1, rng))
        self.inception = self.add_child("inception", InceptionBlock(cfg, rng))
        self.ties = [self.add_child(f"tie{i}", TieBlock(cfg, rng))
                     for i in range(cfg.tie_blocks)]
        fuse_scale = np.sqrt(2.0 / (cfg.leads * cfg.channels))
        self.fuse_weight = self.register(
            "fuse.weight",
            rng.normal(0.0, fuse_scale, size=(cfg.channels, cfg.leads * cfg.channels, 1)))
        self.fuse_bias = self.register("fuse.bias", np.zeros(cfg.channels))

    def lead_features(self, x: Tensor) -> Tensor:
        """Per-lead features for ``x`` shaped (B, leads, T_padded); returns
        (B, leads, channels, T')."""
        if x.ndim != 3 or x.shape[1] != self.cfg.leads:
            raise InvalidInputError(
                f"expected (batch, {self.cfg.leads}, time), got {x.shape}")
        h = x.reshape((x.shape[0], self.cfg.leads, 1, x.shape[2]))
        h = self.stem(h)
        h = self.inception(h)
        for tie in self.ties:
            h = tie(h)
        return h

    def fuse(self, per_lead: Tensor) -> Tensor:
        """Concatenate lead channels and mix with a width-1 convolution:
        (B, leads, C, T') -> (B, C, T')."""
        b, g, c, t = per_lead.shape
        stacked = per_lead.reshape((b, g * c, t))
        return F.conv1d(stacked, self.fuse_weight, self.fuse_bias)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fuse(self.lead_features(x))


# ---- record-level convenience wrappers (single record, spec shapes) --------


def encode_leads(record: EcgRecord, encoder: EcgEncoder) -> list[Tensor]:
    """Encode one record lead-wise; returns 12 tensors shaped (T', channels).
    Normalization and edge padding happen here."""
    cfg = encoder.cfg
    if record.leads != cfg.leads:
        raise InvalidInputError(
            f"record has {record.leads} leads, encoder expects {cfg.leads}")
    x = normalize_and_pad(record, cfg.pad_factor)
    feats = encoder.lead_features(Tensor(x[None, :, :]))
    return [feats[0, i].transpose() for i in range(cfg.leads)]


def fuse_leads(per_lead: list[Tensor], encoder: EcgEncoder,
               source_record_id: str = "") -> LatentSequence:
    """Fuse 12 per-lead (T', channels) tensors into one latent sequence."""
    shapes = {t.shape for t in per_lead}
    if len(per_lead) != encoder.cfg.leads or len(shapes) != 1:
        raise InvalidInputError("fusion needs equally shaped per-lead tensors")
    from .tensor import concat
    stacked = concat([t.transpose().reshape((1, 1) + t.shape[::-1]) for t in per_lead],
                     axis=1)
    fused = encoder.fuse(stacked)          # (1, C, T')
    return LatentSequence(frames=fused[0].transpose(), source_record_id=source_record_id)


def encode_record(record: EcgRecord, encoder: EcgEncoder) -> LatentSequence:
    """Full path: normalize, pad, per-lead encode, fuse."""
    cfg = encoder.cfg
    if record.leads != cfg.leads:
        raise InvalidInputError(
            f"record has {record.leads} leads, encoder expects {cfg.leads}")
    x = normalize_and_pad(record, cfg.pad_factor)
    fused = encoder(Tensor(x[None, :, :]))
    return LatentSequence(frames=fused[0].transpose(),
                          source_record_id=record.record_id)
