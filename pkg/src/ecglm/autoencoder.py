"""End-to-end ECG tokenizer: encoder, quantization bottleneck, decoder.

Training minimizes the reconstruction MSE of the z-normalized waveform;
gradients cross the rounding step via the straight-through estimator. The
bottleneck can be switched to continuous mode, which removes only the
rounding step (the ablation path for discretization).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decoder import EcgDecoder, recon_loss
from .encoder import EcgEncoder, EncoderConfig, normalize_and_pad
from .module import Module
from .nnops import InvalidInputError
from .optim import Adam
from .quantizer import Fsq, FsqConfig
from .signals import EcgRecord
from .tensor import Tensor


class EcgTokenizerModel(Module):
    def __init__(self, enc_cfg: EncoderConfig, fsq_cfg: FsqConfig, seed: int = 0):
        super().__init__()
        if fsq_cfg.latent_width != enc_cfg.channels:
            raise InvalidInputError("fsq latent_width must equal encoder channels")
        self.enc_cfg = enc_cfg
        self.fsq_cfg = fsq_cfg
        self.encoder = self.add_child("encoder", EcgEncoder(enc_cfg, seed=seed))
        self.fsq = self.add_child("fsq", Fsq(fsq_cfg, seed=seed + 1))
        self.decoder = self.add_child("decoder", EcgDecoder(enc_cfg, seed=seed + 2))

    def bottleneck(self, x: Tensor, discretize: bool = True) -> tuple[Tensor, Tensor]:
        """(B, leads, T_pad) -> (reprojected (B, C, T'), codes (B, T', D))."""
        fused = self.encoder(x)                      # (B, C, T')
        frames = fused.transpose((0, 2, 1))          # (B, T', C)
        z_prime, codes = self.fsq(frames, discretize=discretize)
        return z_prime.transpose((0, 2, 1)), codes

    def __call__(self, x: Tensor, discretize: bool = True) -> Tensor:
        z_prime, _ = self.bottleneck(x, discretize=discretize)
        return self.decoder(z_prime)

    def reconstruct_arrays(self, x: np.ndarray, discretize: bool = True) -> np.ndarray:
        return self(Tensor(x), discretize=discretize).data


@dataclass
class TrainResult:
    model: EcgTokenizerModel
    history: list[tuple[int, float]]          # (step, loss)

    @property
    def losses(self) -> np.ndarray:
        return np.array([loss for _, loss in self.history])


def smoothed(losses: np.ndarray, window: int = 50) -> np.ndarray:
    """Trailing moving average; entry i averages the window ending at i."""
    losses = np.asarray(losses, dtype=np.float64)
    out = np.empty_like(losses)
    csum = np.cumsum(np.insert(losses, 0, 0.0))
    for i in range(len(losses)):
        lo = max(0, i - window + 1)
        out[i] = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
    return out


def prepare_training_arrays(records: list[EcgRecord],
                            cfg: EncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Normalized padded inputs and normalized unpadded targets, stacked.
    All records must share one timestep count."""
    if not records:
        raise InvalidInputError("empty dataset")
    lengths = {r.timesteps for r in records}
    if len(lengths) != 1:
        raise InvalidInputError(f"records must share one length, got {sorted(lengths)}")
    padded = np.stack([normalize_and_pad(r, cfg.pad_factor) for r in records])
    t = records[0].timesteps
    return padded, padded[:, :, :t].copy()


def train_autoencoder(records: list[EcgRecord], enc_cfg: EncoderConfig,
                      fsq_cfg: FsqConfig, steps: int, lr: float = 1e-4,
                      batch_size: int = 10, seed: int = 0,
                      discretize: bool = True,
                      log_every: int = 0) -> TrainResult:
    """Optimize the full tokenizer end-to-end with Adam; deterministic for a
    fixed seed. Loss is evaluated on the crop back to the original length,
    so padding never contributes."""
    model = EcgTokenizerModel(enc_cfg, fsq_cfg, seed=seed)
    inputs, targets = prepare_training_arrays(records, enc_cfg)
    t_orig = targets.shape[-1]
    optimizer = Adam(model.parameter_list(), lr=lr)
    rng = np.random.default_rng(seed + 1)
    history: list[tuple[int, float]] = []
    n = inputs.shape[0]
    for step in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        x = Tensor(inputs[idx])
        recon = model(x, discretize=discretize)
        loss = recon_loss(recon[:, :, :t_orig], Tensor(targets[idx]))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history.append((step, loss.item()))
        if log_every and (step + 1) % log_every == 0:
            window = smoothed(np.array([l for _, l in history]))[-1]
            print(f"  step {step + 1:5d}  loss {loss.item():.5f}  smoothed {window:.5f}",
                  flush=True)
    return TrainResult(model=model, history=history)


def save_loss_history(history: list[tuple[int, float]], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["step,loss"] + [f"{s},{v:.10g}" for s, v in history]
    path.write_text("\n".join(lines) + "\n")
