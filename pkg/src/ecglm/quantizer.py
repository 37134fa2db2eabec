"""Fixed-scale quantization of latent frames.

Frames are projected through a sigmoid into a low-dimensional unit cube,
snapped to a uniform grid of ``levels`` points per dimension, and projected
back to the latent width. Rounding uses the straight-through estimator: the
forward pass rounds, the backward pass is the identity. Ties round half away
from zero so results are bit-reproducible across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnops as F
from .module import Module
from .nnops import InvalidInputError
from .tensor import Tensor, stop_gradient

MAX_VOCABULARY = 65536


@dataclass
class FsqConfig:
    levels: int = 8              # grid points per dimension
    dims: int = 4                # projected dimensionality
    latent_width: int = 64       # must match the encoder channel width

    def __post_init__(self):
        if self.levels < 2:
            raise InvalidInputError("need at least 2 quantization levels")
        if self.dims < 1:
            raise InvalidInputError("need at least 1 quantized dimension")
        if self.levels**self.dims > MAX_VOCABULARY:
            raise InvalidInputError(
                f"vocabulary {self.levels}^{self.dims} exceeds {MAX_VOCABULARY}")

    @property
    def vocabulary_size(self) -> int:
        return self.levels**self.dims


def snap_to_grid(values: np.ndarray, levels: int) -> np.ndarray:
    """Nearest of ``levels`` uniform grid points in [0, 1]; ties round half
    away from zero (inputs are non-negative, so floor(x + 0.5))."""
    scaled = np.asarray(values, dtype=np.float64) * (levels - 1)
    return np.floor(scaled + 0.5) / (levels - 1)


def quantize(z_cont: Tensor, levels: int) -> Tensor:
    """Snap each entry to the grid; gradients pass straight through."""
    snapped = snap_to_grid(z_cont.data, levels)
    return z_cont + stop_gradient(Tensor(snapped - z_cont.data))


def code_digits(values: np.ndarray, levels: int) -> np.ndarray:
    """Integer digits in {0..levels-1} for grid-valued entries."""
    return np.floor(np.asarray(values) * (levels - 1) + 0.5).astype(np.int64)


class Fsq(Module):
    """Projection, grid quantization, and back-projection."""

    def __init__(self, cfg: FsqConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        # modest input scale keeps sigmoid outputs away from the saturated
        # tails at initialization, so early codes spread across the grid
        scale = 1.0 / np.sqrt(cfg.latent_width)
        self.proj_weight = self.register(
            "proj.weight", rng.normal(0.0, scale, size=(cfg.dims, cfg.latent_width)))
        self.proj_bias = self.register("proj.bias", np.zeros(cfg.dims))
        back = 1.0 / np.sqrt(cfg.dims)
        self.unproj_weight = self.register(
            "unproj.weight", rng.normal(0.0, back, size=(cfg.latent_width, cfg.dims)))
        self.unproj_bias = self.register("unproj.bias", np.zeros(cfg.latent_width))

    def project(self, frames: Tensor) -> Tensor:
        """(..., latent_width) -> sigmoid-squashed (..., dims) in (0, 1)."""
        return F.sigmoid(F.affine(frames, self.proj_weight, self.proj_bias))

    def quantize(self, z_cont: Tensor) -> Tensor:
        return quantize(z_cont, self.cfg.levels)

    def unproject(self, code: Tensor) -> Tensor:
        """(..., dims) -> (..., latent_width)."""
        return F.affine(code, self.unproj_weight, self.unproj_bias)

    def __call__(self, frames: Tensor, discretize: bool = True) -> tuple[Tensor, Tensor]:
        """Returns (reprojected latents, bottleneck values). With
        ``discretize=False`` the rounding step is bypassed (continuous
        bottleneck), which is the ablation path."""
        z_cont = self.project(frames)
        z = self.quantize(z_cont) if discretize else z_cont
        return self.unproject(z), z
