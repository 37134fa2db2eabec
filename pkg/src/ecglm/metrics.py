"""Evaluation metrics: exact match, BLEU, ROUGE-F1, simplified METEOR.

Text metrics tokenize on whitespace after lowercasing (the same word-level
convention the prompt side uses). BLEU is sentence-level with an additive
epsilon on zero n-gram precisions and the standard brevity penalty. METEOR
here is the exact-match variant: unigram alignment without stemming or
synonyms, recall-weighted harmonic mean (weight 9), and the cubic
fragmentation penalty 0.5 * (chunks / matches)^3.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .nnops import InvalidInputError
from .prompts import normalize_answer

_EPS = 1e-9


def _tokens(text: str) -> list[str]:
    return text.lower().split()


def em_accuracy(predictions: list[str], references: list[str],
                qtype: str | None = None) -> float:
    """Percentage of pairs whose normalized forms match exactly."""
    if len(predictions) != len(references):
        raise InvalidInputError("prediction/reference count mismatch")
    if not references:
        return 0.0
    hits = sum(normalize_answer(p, qtype) == normalize_answer(r, qtype)
               for p, r in zip(predictions, references))
    return 100.0 * hits / len(references)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypothesis: str, reference: str, max_n: int = 4) -> float:
    """Sentence BLEU-n: geometric mean of clipped n-gram precisions with a
    brevity penalty when the hypothesis is shorter than the reference."""
    hyp = _tokens(hypothesis)
    ref = _tokens(reference)
    if not ref:
        raise InvalidInputError("empty reference")
    if not hyp:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        hyp_grams = _ngrams(hyp, n)
        total = sum(hyp_grams.values())
        if total == 0:
            precision = _EPS
        else:
            ref_grams = _ngrams(ref, n)
            clipped = sum(min(c, ref_grams[g]) for g, c in hyp_grams.items())
            precision = clipped / total if clipped else _EPS
        log_sum += math.log(precision)
    geo = math.exp(log_sum / max_n)
    bp = 1.0 if len(hyp) >= len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    return bp * geo


def rouge_f1(hypothesis: str, reference: str, variant: str = "1") -> float:
    """F1 of n-gram overlap ('1', '2') or of the longest common subsequence
    ('l'/'L'). Both-empty inputs score 0."""
    hyp = _tokens(hypothesis)
    ref = _tokens(reference)
    if not hyp or not ref:
        return 0.0
    variant = str(variant).lower()
    if variant in ("1", "2"):
        n = int(variant)
        hyp_grams = _ngrams(hyp, n)
        ref_grams = _ngrams(ref, n)
        overlap = sum(min(c, ref_grams[g]) for g, c in hyp_grams.items())
        total_h = sum(hyp_grams.values())
        total_r = sum(ref_grams.values())
        if not total_h or not total_r or not overlap:
            return 0.0
        p, r = overlap / total_h, overlap / total_r
    elif variant == "l":
        lcs = _lcs_length(hyp, ref)
        if not lcs:
            return 0.0
        p, r = lcs / len(hyp), lcs / len(ref)
    else:
        raise InvalidInputError(f"unknown ROUGE variant {variant!r}")
    return 2.0 * p * r / (p + r)


def _lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def meteor(hypothesis: str, reference: str) -> float:
    """Exact-match METEOR: unigram precision/recall with recall weight 9 and
    fragmentation penalty 0.5 * (chunks / matches)^3."""
    hyp = _tokens(hypothesis)
    ref = _tokens(reference)
    if not hyp or not ref:
        return 0.0
    # greedy left-to-right alignment to the earliest unused reference slot
    used = [False] * len(ref)
    alignment: list[tuple[int, int]] = []
    for i, word in enumerate(hyp):
        for j, other in enumerate(ref):
            if not used[j] and word == other:
                used[j] = True
                alignment.append((i, j))
                break
    matches = len(alignment)
    if matches == 0:
        return 0.0
    chunks = 1
    for (i0, j0), (i1, j1) in zip(alignment, alignment[1:]):
        if i1 != i0 + 1 or j1 != j0 + 1:
            chunks += 1
    precision = matches / len(hyp)
    recall = matches / len(ref)
    f_mean = 10.0 * precision * recall / (recall + 9.0 * precision)
    penalty = 0.5 * (chunks / matches) ** 3
    return f_mean * (1.0 - penalty)


# ---- aggregate report ------------------------------------------------------------


_METRIC_FIELDS = ("em_verify", "em_choose", "em_query", "em_average",
                  "bleu_1", "bleu_2", "bleu_3", "bleu_4", "meteor",
                  "rouge_1", "rouge_2", "rouge_l")


@dataclass
class EvalReport:
    """Metric map in percent, sample count, and the config digest that
    produced it."""
    metrics: dict[str, float] = field(default_factory=dict)
    sample_count: int = 0
    config_digest: str = ""

    def __post_init__(self):
        for name in _METRIC_FIELDS:
            self.metrics.setdefault(name, 0.0)

    def to_text(self) -> str:
        lines = [f"sample_count={self.sample_count}",
                 f"config_digest={self.config_digest}"]
        lines += [f"{name}={self.metrics[name]:.4f}" for name in _METRIC_FIELDS]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        header = ["sample_count", "config_digest", *_METRIC_FIELDS]
        row = [str(self.sample_count), self.config_digest,
               *(f"{self.metrics[name]:.4f}" for name in _METRIC_FIELDS)]
        return ",".join(header) + "\n" + ",".join(row) + "\n"

    def save(self, directory: str | Path, stem: str = "eval_report") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.txt").write_text(self.to_text())
        (directory / f"{stem}.csv").write_text(self.to_csv())


def config_digest(config_text: str) -> str:
    return hashlib.sha256(config_text.encode("utf-8")).hexdigest()[:16]


def score_generation_pairs(pairs: list[tuple[str, str]]) -> dict[str, float]:
    """Mean text-generation metrics (as percentages) over (hyp, ref) pairs."""
    out = {name: 0.0 for name in ("bleu_1", "bleu_2", "bleu_3", "bleu_4",
                                  "meteor", "rouge_1", "rouge_2", "rouge_l")}
    if not pairs:
        return out
    for hyp, ref in pairs:
        for n in range(1, 5):
            out[f"bleu_{n}"] += bleu(hyp, ref, max_n=n)
        out["meteor"] += meteor(hyp, ref)
        for v in ("1", "2", "l"):
            out[f"rouge_{v}"] += rouge_f1(hyp, ref, v)
    return {k: 100.0 * v / len(pairs) for k, v in out.items()}
