"""Stage orchestration behind the command-line interface.

Every stage reads/writes well-defined artifacts so stages can run alone or
via ``pipeline`` (all in order):

    data_dir/records/*.ecgr (+.meta)   synthetic records
    data_dir/tasks.jsonl               QA/report annotations
    data_dir/split.csv                 patient-wise train/val/test split
    data_dir/templates/*.txt           editable prompt templates
    checkpoint_dir/tokenizer.ckpt      trained autoencoder
    checkpoint_dir/vocab.manifest      vocabulary layout (+ .tokens list)
    checkpoint_dir/lm.ckpt             base LM parameters (embedding, head, ...)
    checkpoint_dir/lora.ckpt           adapter (+ bridge) parameters
    output_dir/tokens/*.ecgt           per-record token streams
    output_dir/*                       reports, loss curves, importance CSVs

Ablation flags: ``ablations.disc=false`` replaces token embeddings with a
learned bridge from continuous latents (pretraining is skipped — there is
no token stream to forecast); ``ablations.ft=false`` skips instruction
tuning; ``ablations.tab=false`` drops the tabular segment from prompts.
"""

from __future__ import annotations

import logging
import time
from pathlib import Path

import numpy as np

from .autoencoder import (EcgTokenizerModel, save_loss_history, train_autoencoder)
from .checkpoint import restore_into, save_checkpoint
from .codec import (TokenSequence, Vocabulary, build_vocabulary, load_vocabulary,
                    read_tokens, record_latents, save_vocabulary, tokenize_record,
                    write_tokens, KIND_ECG)
from .config import ExperimentConfig
from .corpus import build_synthetic_corpus
from .decoder import recon_loss_np
from .encoder import z_normalize
from .evaluation import evaluate_corpus, token_importance
from .lm import LmSample, ToyLm, finetune, pretrain
from .metrics import EvalReport
from .nnops import InvalidInputError
from .prompts import (PromptSample, PromptTemplates, TaskRecord, assemble_prompt,
                      collect_text_tokens, load_task_corpus, save_task_corpus)
from .signals import (EcgRecord, SplitAssignment, load_record, load_split,
                      save_record_binary, save_split, split_by_patient)

log = logging.getLogger("ecglm")


class PipelineError(RuntimeError):
    """A stage cannot run (missing artifact, bad state)."""


# ---- artifact paths ---------------------------------------------------------


def _records_dir(cfg: ExperimentConfig) -> Path:
    return cfg.path("paths.data_dir") / "records"


def _tasks_path(cfg: ExperimentConfig) -> Path:
    return cfg.path("paths.data_dir") / "tasks.jsonl"


def _split_path(cfg: ExperimentConfig) -> Path:
    return cfg.path("paths.data_dir") / "split.csv"


def _templates_dir(cfg: ExperimentConfig) -> Path:
    return cfg.path("paths.data_dir") / "templates"


def _tokenizer_ckpt(cfg: ExperimentConfig) -> Path:
    return cfg.path("paths.checkpoint_dir") / "tokenizer.ckpt"


def _vocab_manifest(cfg: ExperimentConfig) -> Path:
    return cfg.path("paths.checkpoint_dir") / "vocab.manifest"


def _lm_ckpt(cfg: ExperimentConfig) -> Path:
    return cfg.path("paths.checkpoint_dir") / "lm.ckpt"


def _lora_ckpt(cfg: ExperimentConfig) -> Path:
    return cfg.path("paths.checkpoint_dir") / "lora.ckpt"


def _tokens_dir(cfg: ExperimentConfig) -> Path:
    return cfg.path("paths.output_dir") / "tokens"


# ---- data loading ------------------------------------------------------------


def load_records(cfg: ExperimentConfig) -> list[EcgRecord]:
    rec_dir = _records_dir(cfg)
    if not rec_dir.exists():
        raise PipelineError(f"no records at {rec_dir}; run 'synth' first")
    records = [load_record(p, leads=cfg["encoder.leads"])
               for p in sorted(rec_dir.glob("*.ecgr"))]
    if not records:
        raise PipelineError(f"no .ecgr files in {rec_dir}")
    return records


def load_data(cfg: ExperimentConfig) -> tuple[list[EcgRecord], list[TaskRecord],
                                              SplitAssignment]:
    records = load_records(cfg)
    tasks = load_task_corpus(_tasks_path(cfg))
    split = load_split(_split_path(cfg), records)
    return records, tasks, split


def _records_of_split(records: list[EcgRecord], split: SplitAssignment,
                      name: str) -> list[EcgRecord]:
    return [r for r in records if split.by_record.get(r.record_id) == name]


# ---- stages -------------------------------------------------------------------


def run_synth(cfg: ExperimentConfig) -> None:
    corpus = build_synthetic_corpus(
        n_patients=cfg["synth.patients"], timesteps=cfg["synth.timesteps"],
        sampling_rate=cfg["synth.sampling_rate"], seed=cfg["seed"],
        anomaly_fraction=cfg["synth.anomaly_fraction"],
        noise_std=cfg["synth.noise_std"])
    rec_dir = _records_dir(cfg)
    for record in corpus.records:
        save_record_binary(record, rec_dir / f"{record.record_id}.ecgr")
    save_task_corpus(corpus.tasks, _tasks_path(cfg))
    split = split_by_patient(corpus.records, cfg.split_ratios(), seed=cfg["seed"])
    save_split(split, _split_path(cfg))
    PromptTemplates().save(_templates_dir(cfg))
    counts = {name: len(split.records(name)) for name in ("train", "val", "test")}
    log.info("synth: %d records (%s), %d task lines",
             len(corpus.records), counts, len(corpus.tasks))


def run_train_tokenizer(cfg: ExperimentConfig) -> None:
    records, _, split = load_data(cfg)
    train_records = _records_of_split(records, split, "train")
    result = train_autoencoder(
        train_records, cfg.encoder_config(), cfg.fsq_config(),
        steps=cfg["train.tokenizer_steps"], lr=cfg["train.tokenizer_lr"],
        batch_size=cfg["train.batch_size"], seed=cfg["seed"],
        discretize=cfg["ablations.disc"],
        log_every=max(1, cfg["train.tokenizer_steps"] // 5))
    save_checkpoint(result.model.parameters(), _tokenizer_ckpt(cfg))
    save_loss_history(result.history, cfg.path("paths.output_dir") / "tokenizer_loss.csv")
    log.info("train-tokenizer: final loss %.4f", result.history[-1][1])


def load_tokenizer(cfg: ExperimentConfig) -> EcgTokenizerModel:
    path = _tokenizer_ckpt(cfg)
    if not path.exists():
        raise PipelineError(f"missing tokenizer checkpoint {path}; run 'train-tokenizer'")
    model = EcgTokenizerModel(cfg.encoder_config(), cfg.fsq_config(), seed=cfg["seed"])
    restore_into(model.parameters(), path)
    return model


def build_vocab(cfg: ExperimentConfig, tasks: list[TaskRecord],
                records: list[EcgRecord]) -> Vocabulary:
    templates = PromptTemplates.load(_templates_dir(cfg))
    tokens = collect_text_tokens(tasks, templates, [r.patient for r in records])
    vocab = build_vocabulary(tokens, cfg.fsq_config(), cfg["lm.d_model"],
                             seed=cfg["seed"])
    save_vocabulary(vocab, _vocab_manifest(cfg))
    return vocab


def load_vocab(cfg: ExperimentConfig) -> Vocabulary:
    path = _vocab_manifest(cfg)
    if not path.exists():
        raise PipelineError(f"missing vocabulary manifest {path}; run 'tokenize'")
    return load_vocabulary(path)


def run_tokenize(cfg: ExperimentConfig) -> None:
    records, tasks, _ = load_data(cfg)
    tokenizer = load_tokenizer(cfg)
    vocab = build_vocab(cfg, tasks, records)
    out = _tokens_dir(cfg)
    for record in records:
        seq = tokenize_record(record, tokenizer, vocab)
        write_tokens(seq, out / f"{record.record_id}.ecgt")
    log.info("tokenize: %d records -> %s (vocabulary size %d)",
             len(records), out, vocab.total_size)


def run_detokenize(cfg: ExperimentConfig) -> None:
    from .codec import detokenize_ids
    records, _, _ = load_data(cfg)
    tokenizer = load_tokenizer(cfg)
    vocab = load_vocab(cfg)
    out = cfg.path("paths.output_dir") / "decoded"
    out.mkdir(parents=True, exist_ok=True)
    lines = ["record_id,recon_loss"]
    for record in records:
        token_path = _tokens_dir(cfg) / f"{record.record_id}.ecgt"
        if not token_path.exists():
            raise PipelineError(f"missing token stream {token_path}; run 'tokenize'")
        seq = read_tokens(token_path)
        waveform = detokenize_ids(seq.ids, tokenizer, vocab,
                                  original_timesteps=record.timesteps)
        normed = np.stack([z_normalize(lead) for lead in record.samples])
        loss = recon_loss_np(normed, waveform)
        np.savetxt(out / f"{record.record_id}.csv", waveform.T, delimiter=",",
                   fmt="%.8g")
        lines.append(f"{record.record_id},{loss:.6f}")
    (out / "recon_losses.csv").write_text("\n".join(lines) + "\n")
    log.info("detokenize: wrote %d waveforms to %s", len(records), out)


def build_lm(cfg: ExperimentConfig, vocab: Vocabulary) -> ToyLm:
    lm = ToyLm(cfg.lm_config(), vocab, cfg.lora_config(), seed=cfg["seed"])
    if not cfg["ablations.disc"]:
        lm.add_bridge(cfg["encoder.channels"], seed=cfg["seed"] + 7)
    return lm


def _lm_param_split(lm: ToyLm) -> tuple[dict, dict]:
    """Base parameters vs the adapter/bridge set stored separately."""
    base, extra = {}, {}
    for name, p in lm.parameters().items():
        if "lora_" in name or name.startswith("bridge."):
            extra[name] = p
        else:
            base[name] = p
    return base, extra


def run_pretrain(cfg: ExperimentConfig) -> None:
    if not cfg["ablations.disc"]:
        log.info("pretrain: skipped (discretization ablated; no token streams)")
        return
    records, tasks, split = load_data(cfg)
    vocab = load_vocab(cfg)
    lm = build_lm(cfg, vocab)
    train_ids = set(split.records("train"))
    streams = []
    from .codec import KIND_MARKER
    for rid in sorted(train_ids):
        path = _tokens_dir(cfg) / f"{rid}.ecgt"
        if not path.exists():
            raise PipelineError(f"missing token stream {path}; run 'tokenize'")
        seq = read_tokens(path)
        if cfg["train.pretrain_with_markers"]:
            seq = TokenSequence.join([
                TokenSequence.of([vocab.start_marker_id], KIND_MARKER), seq,
                TokenSequence.of([vocab.end_marker_id], KIND_MARKER)])
        streams.append(seq)
    result = pretrain(streams, lm, steps=cfg["train.pretrain_steps"],
                      lr=cfg["train.pretrain_lr"], batch_size=cfg["train.batch_size"],
                      seed=cfg["seed"], max_slice=cfg["train.pretrain_max_slice"],
                      log_every=max(1, cfg["train.pretrain_steps"] // 5))
    base, extra = _lm_param_split(lm)
    save_checkpoint(base, _lm_ckpt(cfg))
    save_checkpoint(extra, _lora_ckpt(cfg))
    save_loss_history(result.history, cfg.path("paths.output_dir") / "pretrain_loss.csv")
    log.info("pretrain: %d streams, final loss %.4f", len(streams),
             result.history[-1][1])


def load_lm(cfg: ExperimentConfig, vocab: Vocabulary, need_adapters: bool = False) -> ToyLm:
    lm = build_lm(cfg, vocab)
    base, extra = _lm_param_split(lm)
    if _lm_ckpt(cfg).exists():
        restore_into(base, _lm_ckpt(cfg))
    if _lora_ckpt(cfg).exists():
        restore_into(extra, _lora_ckpt(cfg), strict=False)
    elif need_adapters:
        raise PipelineError(f"missing adapter checkpoint {_lora_ckpt(cfg)}")
    return lm


def _prompt_samples(cfg: ExperimentConfig, records: list[EcgRecord],
                    tasks: list[TaskRecord], split: SplitAssignment,
                    split_name: str, vocab: Vocabulary,
                    tokenizer: EcgTokenizerModel) -> list[LmSample]:
    templates = PromptTemplates.load(_templates_dir(cfg))
    by_id = {r.record_id: r for r in records}
    wanted = set(split.records(split_name))
    task_filter = cfg["task"]
    disc = cfg["ablations.disc"]
    token_cache: dict[str, TokenSequence] = {}
    latent_cache: dict[str, np.ndarray] = {}
    samples: list[LmSample] = []
    for task in tasks:
        if task.record_id not in wanted:
            continue
        if task_filter != "both" and task.task != task_filter:
            continue
        record = by_id[task.record_id]
        if disc:
            if task.record_id not in token_cache:
                token_cache[task.record_id] = tokenize_record(record, tokenizer, vocab)
            ecg_tokens = token_cache[task.record_id]
            latents = None
        else:
            if task.record_id not in latent_cache:
                latent_cache[task.record_id] = record_latents(record, tokenizer)
            latents = latent_cache[task.record_id]
            ecg_tokens = TokenSequence.of(
                np.full(latents.shape[0], vocab.ecg_base, dtype=np.int64), KIND_ECG)
        if task.task == "qa":
            prompt = PromptSample(
                dataset_blurb=templates.blurb, instruction=templates.qa_instruction,
                tabular=record.patient, ecg_tokens=ecg_tokens, target=task.qa.answer,
                question=task.qa.question, qtype=task.qa.qtype,
                record_id=record.record_id, latents=latents)
        else:
            prompt = PromptSample(
                dataset_blurb=templates.blurb, instruction=templates.report_instruction,
                tabular=record.patient, ecg_tokens=ecg_tokens, target=task.report,
                record_id=record.record_id, latents=latents)
        samples.append(assemble_prompt(prompt, vocab,
                                       ablate_tab=not cfg["ablations.tab"],
                                       context_len=cfg["lm.context_len"]))
    return samples


def run_finetune(cfg: ExperimentConfig) -> None:
    if not cfg["ablations.ft"]:
        log.info("finetune: skipped (instruction tuning ablated)")
        return
    records, tasks, split = load_data(cfg)
    vocab = load_vocab(cfg)
    tokenizer = load_tokenizer(cfg)
    lm = load_lm(cfg, vocab)
    samples = _prompt_samples(cfg, records, tasks, split, "train", vocab, tokenizer)
    result = finetune(samples, lm, epochs=cfg["train.finetune_epochs"],
                      lr=cfg["train.finetune_lr"], batch_size=cfg["train.batch_size"],
                      seed=cfg["seed"], log_every=20)
    base, extra = _lm_param_split(lm)
    save_checkpoint(base, _lm_ckpt(cfg))
    save_checkpoint(extra, _lora_ckpt(cfg))
    save_loss_history(result.history, cfg.path("paths.output_dir") / "finetune_loss.csv")
    log.info("finetune: %d samples, final loss %.4f", len(samples),
             result.history[-1][1])


def run_eval(cfg: ExperimentConfig) -> EvalReport:
    records, tasks, split = load_data(cfg)
    vocab = load_vocab(cfg)
    tokenizer = load_tokenizer(cfg)
    lm = load_lm(cfg, vocab)
    samples = _prompt_samples(cfg, records, tasks, split, "test", vocab, tokenizer)
    if not samples:
        raise PipelineError("no test-split samples to evaluate")
    report = evaluate_corpus(lm, samples, config_digest=cfg.digest(),
                             max_new=cfg["eval.max_new_tokens"])
    report.save(cfg.path("paths.output_dir"))
    log.info("eval: %d samples, em_average %.2f", report.sample_count,
             report.metrics["em_average"])
    return report


def run_importance(cfg: ExperimentConfig) -> None:
    if not cfg["ablations.disc"]:
        log.info("importance: skipped (needs token mode)")
        return
    records, tasks, split = load_data(cfg)
    vocab = load_vocab(cfg)
    tokenizer = load_tokenizer(cfg)
    lm = load_lm(cfg, vocab)
    samples = _prompt_samples(cfg, records, tasks, split, "test", vocab, tokenizer)
    verify = [s for s in samples if s.meta.get("qtype") == "verify"]
    if not verify:
        raise PipelineError("no verify-type test samples for importance analysis")
    out = cfg.path("paths.output_dir") / "importance"
    stride = cfg.encoder_config().total_downsample
    for sample in verify[: cfg["importance.samples"]]:
        result = token_importance(lm, sample, total_stride=stride,
                                  original_timesteps=cfg["synth.timesteps"])
        result.save(out / f"{sample.record_id}.csv")
    log.info("importance: wrote %d score files to %s",
             min(len(verify), cfg["importance.samples"]), out)


def run_pipeline(cfg: ExperimentConfig) -> EvalReport:
    t0 = time.time()
    run_synth(cfg)
    run_train_tokenizer(cfg)
    run_tokenize(cfg)
    run_pretrain(cfg)
    run_finetune(cfg)
    report = run_eval(cfg)
    run_importance(cfg)
    log.info("pipeline: finished in %.1f s", time.time() - t0)
    return report
