"""QA/report task records, five-part prompt assembly, answer normalization.

A prompt concatenates, in order: a dataset blurb, a task instruction, the
rendered tabular patient features (unless ablated), the question (QA only),
and the ECG token block wrapped in the start/end markers. The supervision
target (answer span or report) follows the prompt and ends with the
end-of-sequence token; training masks the loss to target positions.

Task corpora are JSON-lines files, one object per line with fields
``record_id``, ``task`` ("qa" or "report"), and either ``qtype``/
``question``/``options``/``answer`` or ``report``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import (KIND_MARKER, KIND_TEXT, TokenSequence, Vocabulary)
from .lm import LmSample
from .nnops import InvalidInputError
from .signals import MISSING, PatientMeta

QA_TYPES = ("verify", "choose", "query")

DEFAULT_BLURB = "The dataset contains electrocardiogram (ECG) time-series data."
DEFAULT_QA_INSTRUCTION = (
    "Based on the given ECG signal embeddings, answer the following question.")
DEFAULT_REPORT_INSTRUCTION = (
    "Based on the given ECG signal embeddings, generate an ECG diagnostic report.")


@dataclass
class PromptTemplates:
    blurb: str = DEFAULT_BLURB
    qa_instruction: str = DEFAULT_QA_INSTRUCTION
    report_instruction: str = DEFAULT_REPORT_INSTRUCTION

    @staticmethod
    def load(directory: str | Path) -> "PromptTemplates":
        directory = Path(directory)
        t = PromptTemplates()
        for name in ("blurb", "qa_instruction", "report_instruction"):
            path = directory / f"{name}.txt"
            if path.exists():
                setattr(t, name, path.read_text().strip())
        return t

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("blurb", "qa_instruction", "report_instruction"):
            (directory / f"{name}.txt").write_text(getattr(self, name) + "\n")


@dataclass
class QaItem:
    question: str
    qtype: str
    answer: str
    options: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.qtype not in QA_TYPES:
            raise InvalidInputError(f"unknown question type {self.qtype!r}")


@dataclass
class TaskRecord:
    """One corpus line: a QA item or a report tied to a record id."""
    record_id: str
    task: str                              # "qa" | "report"
    qa: QaItem | None = None
    report: str | None = None


@dataclass
class PromptSample:
    """Assembled components for one training/eval sample."""
    dataset_blurb: str
    instruction: str
    tabular: PatientMeta
    ecg_tokens: TokenSequence
    target: str
    question: str | None = None            # present for QA, absent for report
    qtype: str | None = None
    record_id: str = ""
    latents: np.ndarray | None = None      # continuous bridge mode


# ---- rendering ---------------------------------------------------------------


_TAB_ORDER = ("patient_id", "age", "sex", "height", "weight",
              "recording_date", "nurse_id", "device_id", "site")
_TAB_LABELS = {
    "patient_id": "patient ID", "age": "age", "sex": "sex", "height": "height",
    "weight": "weight", "recording_date": "recording date", "nurse_id": "nurse ID",
    "device_id": "device ID", "site": "site",
}


def render_tabular(meta: PatientMeta) -> str:
    """Fixed field order; absent fields render as the placeholder string."""
    parts = []
    for name in _TAB_ORDER:
        value = getattr(meta, name)
        rendered = MISSING if value is None else str(value)
        parts.append(f"{_TAB_LABELS[name]}: {rendered}")
    return ", ".join(parts) + "."


_WORD_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def split_words(text: str) -> list[str]:
    """Word-level tokenization: lowercase words/numbers plus single
    punctuation marks."""
    return _WORD_RE.findall(text.lower())


def render_prompt_text(sample: PromptSample, ablate_tab: bool = False) -> str:
    """Human-readable prompt with a placeholder for the ECG block; the token
    assembly below follows exactly this order."""
    parts = [sample.dataset_blurb, sample.instruction]
    if not ablate_tab:
        parts.append(render_tabular(sample.tabular))
    if sample.question is not None:
        parts.append(sample.question)
    parts.append(f"<|start_ecg|> [{len(sample.ecg_tokens)} ECG tokens] <|end_ecg|>")
    return "\n".join(parts)


def assemble_prompt(sample: PromptSample, vocab: Vocabulary,
                    ablate_tab: bool = False,
                    context_len: int | None = None) -> LmSample:
    """Token-level prompt: blurb, instruction, tabular (optional), question
    (QA only), then marker + ECG ids + marker. Target is the answer/report
    plus the end-of-sequence token."""
    segments = [sample.dataset_blurb, sample.instruction]
    if not ablate_tab:
        segments.append(render_tabular(sample.tabular))
    if sample.question is not None:
        segments.append(sample.question)
    text_part = vocab.encode_words(split_words(" ".join(segments)))
    ecg = sample.ecg_tokens
    if not np.all(ecg.kinds != KIND_MARKER):
        raise InvalidInputError("ecg_tokens must be unwrapped (markers added here)")
    prompt = TokenSequence.join([
        text_part,
        TokenSequence.of([vocab.start_marker_id], KIND_MARKER),
        ecg,
        TokenSequence.of([vocab.end_marker_id], KIND_MARKER),
    ])
    target_words = split_words(sample.target)
    target_ids = np.array([vocab.text_id(w) for w in target_words] + [vocab.eos_id],
                          dtype=np.int64)
    total = len(prompt) + target_ids.size
    if context_len is not None and total > context_len:
        raise InvalidInputError(
            f"prompt+target length {total} exceeds context {context_len}")
    return LmSample(prompt_ids=prompt.ids, prompt_kinds=prompt.kinds,
                    target_ids=target_ids, latents=sample.latents,
                    record_id=sample.record_id,
                    meta={"qtype": sample.qtype, "task": "qa" if sample.question else "report",
                          "target": sample.target})


# ---- answer normalization ------------------------------------------------------


def normalize_answer(raw: str, qtype: str | None = None) -> str:
    """Lowercase, trim, collapse whitespace; choose-type answers are treated
    as comma-separated sets: items are sorted lexicographically and re-joined
    so option order never matters."""
    text = re.sub(r"\s+", " ", raw.strip().lower())
    if qtype == "choose" and text:
        items = sorted(part.strip() for part in text.split(",") if part.strip())
        return ", ".join(items)
    return text


# ---- task corpus io -------------------------------------------------------------


def save_task_corpus(tasks: list[TaskRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for t in tasks:
            obj: dict = {"record_id": t.record_id, "task": t.task}
            if t.task == "qa":
                obj.update(qtype=t.qa.qtype, question=t.qa.question,
                           options=t.qa.options, answer=t.qa.answer)
            else:
                obj["report"] = t.report
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def load_task_corpus(path: str | Path) -> list[TaskRecord]:
    tasks: list[TaskRecord] = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as err:
            raise InvalidInputError(f"{path}: bad task record on line {i + 1}: {err}")
        if obj.get("task") == "qa":
            qa = QaItem(question=obj["question"], qtype=obj["qtype"],
                        answer=obj["answer"], options=obj.get("options", []))
            tasks.append(TaskRecord(record_id=obj["record_id"], task="qa", qa=qa))
        elif obj.get("task") == "report":
            tasks.append(TaskRecord(record_id=obj["record_id"], task="report",
                                    report=obj["report"]))
        else:
            raise InvalidInputError(f"{path}: unknown task on line {i + 1}")
    return tasks


def collect_text_tokens(tasks: list[TaskRecord], templates: PromptTemplates,
                        metas: list[PatientMeta]) -> list[str]:
    """Closed word vocabulary covering templates, tabular renderings, and
    every question/answer/report in the corpus."""
    words: set[str] = set()
    for text in (templates.blurb, templates.qa_instruction,
                 templates.report_instruction, MISSING):
        words.update(split_words(text))
    for meta in metas:
        words.update(split_words(render_tabular(meta)))
    for t in tasks:
        if t.task == "qa":
            words.update(split_words(t.qa.question))
            words.update(split_words(t.qa.answer))
            for opt in t.qa.options:
                words.update(split_words(opt))
        else:
            words.update(split_words(t.report))
    return sorted(words)
