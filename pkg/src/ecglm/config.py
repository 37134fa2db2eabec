"""Experiment configuration: flat dotted-key text files with typed defaults.

The file format is one ``key = value`` pair per line (``#`` comments);
hierarchy lives in the dotted key names. Every key has a typed default
below — the desk-scale preset that the end-to-end pipeline runs with.
Overrides (``--set key=value``) parse against the default's type. Unknown
keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from pathlib import Path

from .encoder import EncoderConfig
from .lm import LmConfig, LoraConfig
from .metrics import config_digest
from .quantizer import FsqConfig


class ConfigError(ValueError):
    """Unknown key, malformed line, or unparseable value."""


# Desk-scale defaults: small synthetic records and a thin encoder so the
# full pipeline stays in the minutes range on one core. The model-family
# dataclasses keep their own larger defaults for direct library use.
DEFAULTS: dict[str, object] = {
    "seed": 0,
    "task": "both",                       # qa | report | both
    "paths.data_dir": "data",
    "paths.checkpoint_dir": "checkpoints",
    "paths.output_dir": "out",
    "ablations.disc": True,               # False = continuous-bridge ablation
    "ablations.ft": True,                 # False = skip instruction tuning
    "ablations.tab": True,                # False = drop tabular prompt segment
    "encoder.channels": 16,
    "encoder.inception_kernels": "1,3,5,7",
    "encoder.tie_blocks": 2,
    "encoder.tie_stride": 2,
    "encoder.tie_res_layers": 1,
    "encoder.leads": 12,
    "encoder.share_lead_weights": False,
    "encoder.pad_multiple": "4",          # "none" = auto granularity
    "fsq.levels": 8,
    "fsq.dims": 4,
    "lm.d_model": 128,
    "lm.layers": 4,
    "lm.heads": 4,
    "lm.context_len": 512,
    "lora.rank": 8,
    "lora.alpha": 16.0,
    "split.ratios": "7,1,2",
    "synth.patients": 40,
    "synth.timesteps": 128,
    "synth.sampling_rate": 32.0,
    "synth.noise_std": 0.02,
    "synth.anomaly_fraction": 0.5,
    "train.batch_size": 10,
    "train.tokenizer_steps": 300,
    "train.tokenizer_lr": 1e-4,
    "train.pretrain_steps": 300,
    "train.pretrain_lr": 1e-3,
    "train.pretrain_max_slice": 32,
    "train.pretrain_with_markers": False,
    "train.finetune_epochs": 6,
    "train.finetune_lr": 1e-3,
    "eval.max_new_tokens": 24,
    "importance.samples": 4,
}


def _parse_value(key: str, raw: str | object) -> object:
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError as err:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from err
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError as err:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from err
    return text


class ExperimentConfig:
    def __init__(self, values: dict[str, object] | None = None):
        self.values: dict[str, object] = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key!r}")
        self.values[key] = _parse_value(key, value)

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key: {key!r}")
        return self.values[key]

    # ---- typed views ------------------------------------------------------

    def _int_list(self, key: str) -> tuple[int, ...]:
        try:
            return tuple(int(p) for p in str(self[key]).split(",") if p.strip())
        except ValueError as err:
            raise ConfigError(f"{key}: expected comma-separated integers") from err

    def encoder_config(self) -> EncoderConfig:
        pad = str(self["encoder.pad_multiple"]).strip().lower()
        return EncoderConfig(
            channels=self["encoder.channels"],
            inception_kernels=self._int_list("encoder.inception_kernels"),
            tie_blocks=self["encoder.tie_blocks"],
            tie_stride=self["encoder.tie_stride"],
            tie_res_layers=self["encoder.tie_res_layers"],
            leads=self["encoder.leads"],
            share_lead_weights=self["encoder.share_lead_weights"],
            pad_multiple=None if pad in ("none", "auto", "") else int(pad),
        )

    def fsq_config(self) -> FsqConfig:
        return FsqConfig(levels=self["fsq.levels"], dims=self["fsq.dims"],
                         latent_width=self["encoder.channels"])

    def lm_config(self) -> LmConfig:
        return LmConfig(d_model=self["lm.d_model"], layers=self["lm.layers"],
                        heads=self["lm.heads"], context_len=self["lm.context_len"])

    def lora_config(self) -> LoraConfig:
        return LoraConfig(rank=self["lora.rank"], alpha=self["lora.alpha"])

    def split_ratios(self) -> tuple[int, int, int]:
        ratios = self._int_list("split.ratios")
        if len(ratios) != 3:
            raise ConfigError("split.ratios needs exactly three integers")
        return ratios

    def path(self, key: str) -> Path:
        return Path(str(self[key]))

    # ---- serialization ------------------------------------------------------

    def dump(self) -> str:
        lines = [f"{key} = {_format_value(self.values[key])}" for key in DEFAULTS]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return config_digest(self.dump())

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump())


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def load_config(path: str | Path | None = None,
                overrides: list[str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        for i, line in enumerate(path.read_text().splitlines()):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{i + 1}: expected 'key = value'")
            key, value = stripped.split("=", 1)
            cfg.set(key.strip(), value)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg
