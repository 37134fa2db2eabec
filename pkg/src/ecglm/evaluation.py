"""Corpus evaluation and token-masking importance analysis.

Evaluation greedily decodes an answer/report for every sample, then scores
exact match per question type (plus their average) and the text-generation
metrics over report samples. Importance scores come from masking one ECG
token embedding at a time with the mean ECG embedding and measuring the
increase in the target's negative log-likelihood; scores map back to
waveform timestep windows through the encoder's total stride.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nnops as F
from .codec import KIND_ECG
from .lm import LmSample, ToyLm, generate
from .metrics import EvalReport, em_accuracy, score_generation_pairs
from .nnops import InvalidInputError
from .tensor import Tensor


def decode_answer(lm: ToyLm, sample: LmSample, max_new: int = 32) -> str:
    result = generate(lm, sample, max_new=max_new, text_only=True)
    return lm.vocab.decode_text(result.ids)


def evaluate_corpus(lm: ToyLm, samples: list[LmSample], config_digest: str = "",
                    max_new: int = 32) -> EvalReport:
    """Populate the full metric map. EM subtypes average only over their
    own samples; report samples feed the generation metrics. When a metric
    has no samples it stays 0."""
    em_groups: dict[str, list[tuple[str, str]]] = {"verify": [], "choose": [], "query": []}
    gen_pairs: list[tuple[str, str]] = []
    for sample in samples:
        prediction = decode_answer(lm, sample, max_new=max_new)
        reference = sample.meta.get("target", "")
        if sample.meta.get("task") == "qa":
            qtype = sample.meta.get("qtype")
            if qtype in em_groups:
                em_groups[qtype].append((prediction, reference))
        else:
            gen_pairs.append((prediction, reference))
    metrics: dict[str, float] = {}
    for qtype, pairs in em_groups.items():
        preds = [p for p, _ in pairs]
        refs = [r for _, r in pairs]
        metrics[f"em_{qtype}"] = em_accuracy(preds, refs, qtype) if pairs else 0.0
    metrics["em_average"] = float(np.mean([metrics["em_verify"], metrics["em_choose"],
                                           metrics["em_query"]]))
    metrics.update(score_generation_pairs(gen_pairs))
    return EvalReport(metrics=metrics, sample_count=len(samples),
                      config_digest=config_digest)


# ---- token importance -------------------------------------------------------


@dataclass
class ImportanceResult:
    scores: np.ndarray                     # one per ECG token position
    windows: np.ndarray                    # (n, 2) covered timestep ranges
    base_nll: float

    def to_csv(self) -> str:
        lines = ["timestep_start,timestep_end,score"]
        for (lo, hi), s in zip(self.windows, self.scores):
            lines.append(f"{int(lo)},{int(hi)},{s:.6g}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())


def _target_nll(lm: ToyLm, sample: LmSample, embeddings: Tensor) -> float:
    h = lm.hidden(embeddings)
    seq_len = sample.prompt_ids.size + sample.target_ids.size
    positions = np.arange(sample.prompt_ids.size - 1, seq_len - 1)
    logits = lm.logits(h, positions)
    return F.softmax_cross_entropy(logits, sample.target_ids).item()


def token_importance(lm: ToyLm, sample: LmSample, total_stride: int,
                     original_timesteps: int | None = None) -> ImportanceResult:
    """NLL increase per masked ECG token; masking replaces the token's
    embedding with the mean ECG embedding so the input stays on-distribution."""
    ecg_positions = np.flatnonzero(sample.prompt_kinds == KIND_ECG)
    if ecg_positions.size == 0:
        raise InvalidInputError("sample has no ECG tokens")
    if sample.latents is not None:
        raise InvalidInputError("importance analysis needs token mode, not bridge mode")
    vocab = lm.vocab
    seq = np.concatenate([sample.prompt_ids, sample.target_ids])
    inputs = seq[:-1]
    base_embed = lm.embed_ids(inputs)
    base_nll = _target_nll(lm, sample, base_embed)

    mean_ecg = lm.embedding.data[vocab.ecg_base : vocab.start_marker_id].mean(axis=0)
    scores = np.empty(ecg_positions.size)
    base_rows = base_embed.data
    for i, pos in enumerate(ecg_positions):
        masked = base_rows.copy()
        # keep the positional component, swap only the token embedding
        masked[pos] = mean_ecg + lm.positions[pos]
        scores[i] = _target_nll(lm, sample, Tensor(masked)) - base_nll

    ecg_index = np.arange(ecg_positions.size)
    lo = ecg_index * total_stride
    hi = (ecg_index + 1) * total_stride
    if original_timesteps is not None:
        lo = np.minimum(lo, original_timesteps)
        hi = np.minimum(hi, original_timesteps)
    windows = np.stack([lo, hi], axis=1)
    return ImportanceResult(scores=scores, windows=windows, base_nll=base_nll)


def window_means(result: ImportanceResult, window: tuple[int, int]) -> tuple[float, float]:
    """Mean importance of tokens overlapping ``window`` vs the rest."""
    lo, hi = window
    overlap = (result.windows[:, 0] < hi) & (result.windows[:, 1] > lo)
    if overlap.all() or not overlap.any():
        raise InvalidInputError("window must split tokens into two groups")
    return float(result.scores[overlap].mean()), float(result.scores[~overlap].mean())
