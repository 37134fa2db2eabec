"""Decoder-only transformer over the merged text+ECG vocabulary.

Pre-LN blocks with causal multi-head attention and a GELU feed-forward.
Every linear projection (Q, K, V, O and both feed-forward maps) carries an
optional low-rank adapter ``x -> Wx + (alpha/r) B(Ax)`` whose B matrix is
zero-initialized, so a fresh adapter leaves the model bit-identical.

Two training stages share this module:

* pretraining: next-token prediction on ECG token slices (a random slice is
  split 9:1 into context and target). The embedding table's ECG rows and the
  output head train fully; transformer linears stay frozen with only the
  adapters learning.
* instruction tuning: embedding and head freeze as well; only adapters (and
  the continuous bridge, when the discretization ablation is active) train,
  with the loss masked to answer positions.

Positions are encoded with fixed sinusoidal vectors; there is no KV cache
(sequences are short at this scale) and decoding is greedy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nnops as F
from .codec import KIND_ECG, TokenSequence, Vocabulary
from .module import Module
from .nnops import InvalidInputError
from .optim import Adam
from .tensor import Parameter, Tensor, concat


@dataclass
class LmConfig:
    d_model: int = 128
    layers: int = 4
    heads: int = 4
    context_len: int = 512
    ff_mult: int = 4
    pos_scale: float = 0.5       # sinusoidal positional encoding magnitude

    def __post_init__(self):
        if self.d_model % self.heads:
            raise InvalidInputError("d_model must be divisible by heads")


@dataclass
class LoraConfig:
    rank: int = 8                # paper-scale preset uses 64
    alpha: float = 16.0

    def __post_init__(self):
        if self.rank < 1:
            raise InvalidInputError("LoRA rank must be >= 1")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


PAPER_SCALE_LORA = LoraConfig(rank=64, alpha=16.0)


class Linear(Module):
    """Affine map with an optional zero-initialized low-rank adapter."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 lora: LoraConfig | None = None, init_std: float = 0.02):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = self.register("weight", rng.normal(0.0, init_std, size=(d_out, d_in)))
        self.bias = self.register("bias", np.zeros(d_out))
        self.lora = lora
        if lora is not None:
            if lora.rank > min(d_in, d_out):
                raise InvalidInputError(
                    f"LoRA rank {lora.rank} exceeds min(in, out) = {min(d_in, d_out)}")
            self.lora_a = self.register(
                "lora_a", rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(lora.rank, d_in)))
            self.lora_b = self.register("lora_b", np.zeros((d_out, lora.rank)))

    def __call__(self, x: Tensor) -> Tensor:
        y = F.affine(x, self.weight, self.bias)
        if self.lora is not None:
            delta = F.affine(F.affine(x, self.lora_a), self.lora_b)
            y = y + delta * self.lora.scaling
        return y

    def merged_weight(self) -> np.ndarray:
        """Base weight with the adapter folded in."""
        if self.lora is None:
            return self.weight.data.copy()
        return self.weight.data + self.lora.scaling * (self.lora_b.data @ self.lora_a.data)

    def freeze_base(self, frozen: bool = True) -> None:
        self.weight.trainable = not frozen
        self.bias.trainable = not frozen


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = self.register("gamma", np.ones(dim))
        self.beta = self.register("beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta)


class Block(Module):
    def __init__(self, cfg: LmConfig, lora: LoraConfig | None, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.ln1 = self.add_child("ln1", LayerNorm(d))
        self.q = self.add_child("q", Linear(d, d, rng, lora))
        self.k = self.add_child("k", Linear(d, d, rng, lora))
        self.v = self.add_child("v", Linear(d, d, rng, lora))
        self.o = self.add_child("o", Linear(d, d, rng, lora))
        self.ln2 = self.add_child("ln2", LayerNorm(d))
        self.fc1 = self.add_child("fc1", Linear(d, d * cfg.ff_mult, rng, lora))
        self.fc2 = self.add_child("fc2", Linear(d * cfg.ff_mult, d, rng, lora))

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        """x: (B, T, d_model) with a causal additive mask (T, T)."""
        h = self.ln1(x)
        b, t, d = h.shape
        n_heads = self.cfg.heads
        dk = d // n_heads

        def split_heads(m: Tensor) -> Tensor:
            return m.reshape((b, t, n_heads, dk)).transpose((0, 2, 1, 3))

        q = split_heads(self.q(h))
        k = split_heads(self.k(h))
        v = split_heads(self.v(h))
        scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(dk))
        scores = scores + Tensor(mask)
        attn = F.softmax(scores, axis=-1)
        mixed = (attn @ v).transpose((0, 2, 1, 3)).reshape((b, t, d))
        x = x + self.o(mixed)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


def sinusoidal_positions(context_len: int, d_model: int, scale: float) -> np.ndarray:
    pos = np.arange(context_len)[:, None]
    dim = np.arange(d_model // 2)[None, :]
    angles = pos / (10000.0 ** (2 * dim / d_model))
    table = np.zeros((context_len, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return scale * table


class ToyLm(Module):
    """Transformer with a shared-vocabulary embedding and separate head."""

    def __init__(self, cfg: LmConfig, vocab: Vocabulary,
                 lora: LoraConfig | None = None, seed: int = 0):
        super().__init__()
        if vocab.d_model != cfg.d_model:
            raise InvalidInputError("vocabulary embedding width != lm d_model")
        self.cfg = cfg
        self.vocab = vocab
        self.lora = lora
        rng = np.random.default_rng(seed)
        self.embedding = self.adopt("embedding", vocab.embedding)
        self.positions = sinusoidal_positions(cfg.context_len, cfg.d_model, cfg.pos_scale)
        self.blocks = [self.add_child(f"block{i}", Block(cfg, lora, rng))
                       for i in range(cfg.layers)]
        self.ln_f = self.add_child("ln_f", LayerNorm(cfg.d_model))
        self.head = self.add_child("head", Linear(cfg.d_model, vocab.total_size, rng))
        self.bridge: Linear | None = None

    def add_bridge(self, latent_width: int, seed: int = 0) -> Linear:
        """Affine map from encoder latents to the embedding space; used when
        the discretization ablation routes continuous features into the LM."""
        rng = np.random.default_rng(seed)
        self.bridge = self.add_child("bridge", Linear(latent_width, self.cfg.d_model, rng,
                                                      init_std=0.1))
        return self.bridge

    # ---- forward ---------------------------------------------------------

    def _check_length(self, n: int) -> None:
        if n > self.cfg.context_len:
            raise InvalidInputError(
                f"sequence length {n} exceeds context {self.cfg.context_len}")

    def embed_ids(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        self._check_length(ids.size)
        return F.embedding_lookup(self.embedding, ids) + Tensor(self.positions[: ids.size])

    def embed_with_latents(self, ids: np.ndarray, kinds: np.ndarray,
                           latents: np.ndarray) -> Tensor:
        """Embeddings where ECG-kind positions come from the continuous
        bridge instead of the embedding table."""
        if self.bridge is None:
            raise InvalidInputError("no bridge attached; call add_bridge first")
        ids = np.asarray(ids, dtype=np.int64)
        self._check_length(ids.size)
        ecg_pos = np.flatnonzero(np.asarray(kinds) == KIND_ECG)
        if ecg_pos.size != latents.shape[0]:
            raise InvalidInputError("latent row count != ECG position count")
        base = F.embedding_lookup(self.embedding, ids)
        bridged = self.bridge(Tensor(latents))
        parts = []
        cursor = 0
        for row, pos in enumerate(ecg_pos):
            if pos > cursor:
                parts.append(base[cursor:pos])
            parts.append(bridged[row : row + 1])
            cursor = pos + 1
        if cursor < ids.size:
            parts.append(base[cursor:])
        merged = concat(parts, axis=0) if len(parts) > 1 else parts[0]
        return merged + Tensor(self.positions[: ids.size])

    def hidden(self, x: Tensor) -> Tensor:
        t = x.shape[0]
        mask = np.triu(np.full((t, t), -1e30), k=1)
        for block in self.blocks:
            x = block(x, mask)
        return self.ln_f(x)

    def logits(self, h: Tensor, positions: np.ndarray | None = None) -> Tensor:
        if positions is not None:
            h = h[np.asarray(positions, dtype=np.int64)]
        return self.head(h)

    def forward_ids(self, ids: np.ndarray, positions: np.ndarray | None = None) -> Tensor:
        """Logits for a token id sequence; ``positions`` restricts the output
        head to selected positions (loss positions, final position, ...)."""
        return self.logits(self.hidden(self.embed_ids(ids)), positions)

    def __call__(self, seq: TokenSequence | np.ndarray) -> Tensor:
        ids = seq.ids if isinstance(seq, TokenSequence) else np.asarray(seq)
        return self.forward_ids(ids)

    # ---- trainability ------------------------------------------------------

    def _set_adapters_trainable(self, flag: bool) -> None:
        for name, p in self.parameters().items():
            if name.endswith("lora_a") or name.endswith("lora_b"):
                p.trainable = flag

    def set_pretrain_mode(self) -> None:
        """ECG embedding rows and the head train fully; base linears freeze
        with adapters active."""
        for p in self.parameters().values():
            p.trainable = False
        self.embedding.trainable = True
        mask = np.zeros((self.vocab.total_size, 1))
        mask[self.vocab.ecg_base :] = 1.0
        self.embedding.grad_mask = mask
        self.head.weight.trainable = True
        self.head.bias.trainable = True
        self._set_adapters_trainable(True)

    def set_finetune_mode(self) -> None:
        """Embedding table and head freeze; only adapters (and the bridge,
        if attached) keep training."""
        for p in self.parameters().values():
            p.trainable = False
        self.embedding.grad_mask = None
        self._set_adapters_trainable(True)
        if self.bridge is not None:
            for p in self.bridge.parameters().values():
                p.trainable = True

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters().values() if p.trainable]


# ---- pretraining -------------------------------------------------------------


@dataclass
class PretrainExample:
    context: np.ndarray
    target: np.ndarray


def make_pretrain_example(tokens: TokenSequence | np.ndarray,
                          rng: np.random.Generator,
                          max_len: int | None = None) -> PretrainExample:
    """Random contiguous slice, split 9:1 into context and target (target
    never empty)."""
    ids = tokens.ids if isinstance(tokens, TokenSequence) else np.asarray(tokens)
    n = ids.size
    if n < 10:
        raise InvalidInputError(f"token sequence too short to slice: {n} < 10")
    hi = min(n, max_len) if max_len else n
    length = int(rng.integers(10, hi + 1))
    start = int(rng.integers(0, n - length + 1))
    piece = ids[start : start + length]
    split = int(np.floor(0.9 * length))
    return PretrainExample(context=piece[:split], target=piece[split:])


@dataclass
class LmTrainResult:
    lm: "ToyLm"
    history: list[tuple[int, float]]

    @property
    def losses(self) -> np.ndarray:
        return np.array([loss for _, loss in self.history])


def _example_loss(lm: ToyLm, context: np.ndarray, target: np.ndarray) -> Tensor:
    seq = np.concatenate([context, target])
    inputs = seq[:-1]
    h = lm.hidden(lm.embed_ids(inputs))
    loss_positions = np.arange(context.size - 1, seq.size - 1)
    logits = lm.logits(h, loss_positions)
    return F.softmax_cross_entropy(logits, target)


def pretrain(streams: list[TokenSequence], lm: ToyLm, steps: int,
             lr: float = 1e-4, batch_size: int = 10, seed: int = 0,
             max_slice: int | None = None, log_every: int = 0) -> LmTrainResult:
    """Autoregressive next-token training on ECG token streams."""
    if not streams:
        raise InvalidInputError("empty pretraining corpus")
    lm.set_pretrain_mode()
    optimizer = Adam(lm.trainable_parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    history: list[tuple[int, float]] = []
    for step in range(steps):
        total = None
        for _ in range(batch_size):
            stream = streams[int(rng.integers(0, len(streams)))]
            ex = make_pretrain_example(stream, rng, max_slice)
            loss = _example_loss(lm, ex.context, ex.target)
            total = loss if total is None else total + loss
        batch_loss = total * (1.0 / batch_size)
        optimizer.zero_grad()
        batch_loss.backward()
        optimizer.step()
        history.append((step, batch_loss.item()))
        if log_every and (step + 1) % log_every == 0:
            print(f"  pretrain step {step + 1:5d}  loss {batch_loss.item():.4f}",
                  flush=True)
    return LmTrainResult(lm=lm, history=history)


def next_token_accuracy(lm: ToyLm, streams: list[TokenSequence], n_slices: int,
                        seed: int = 0, max_slice: int | None = None) -> float:
    """Teacher-forced argmax accuracy on target positions of random slices."""
    rng = np.random.default_rng(seed)
    hits = 0
    total = 0
    for _ in range(n_slices):
        stream = streams[int(rng.integers(0, len(streams)))]
        ex = make_pretrain_example(stream, rng, max_slice)
        seq = np.concatenate([ex.context, ex.target])
        positions = np.arange(ex.context.size - 1, seq.size - 1)
        logits = lm.forward_ids(seq[:-1], positions)
        pred = logits.data.argmax(axis=1)
        hits += int((pred == ex.target).sum())
        total += ex.target.size
    return hits / max(total, 1)


# ---- instruction tuning --------------------------------------------------------


@dataclass
class LmSample:
    """One assembled prompt with its supervision target. ``latents`` carries
    the continuous features for bridge mode (ECG-kind positions then read
    from the bridge instead of the embedding table)."""
    prompt_ids: np.ndarray
    prompt_kinds: np.ndarray
    target_ids: np.ndarray                 # answer/report ids, ends with eos
    latents: np.ndarray | None = None
    record_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.prompt_ids = np.asarray(self.prompt_ids, dtype=np.int64)
        self.prompt_kinds = np.asarray(self.prompt_kinds, dtype=np.uint8)
        self.target_ids = np.asarray(self.target_ids, dtype=np.int64)


def _embed_sample_inputs(lm: ToyLm, sample: LmSample, inputs: np.ndarray,
                         kinds: np.ndarray) -> Tensor:
    if sample.latents is None:
        return lm.embed_ids(inputs)
    return lm.embed_with_latents(inputs, kinds, sample.latents)


def sample_loss(lm: ToyLm, sample: LmSample) -> Tensor:
    """Mean cross-entropy on target positions only; prompt positions carry
    no loss."""
    seq = np.concatenate([sample.prompt_ids, sample.target_ids])
    if seq.size > lm.cfg.context_len:
        raise InvalidInputError(
            f"prompt+target length {seq.size} exceeds context {lm.cfg.context_len}")
    inputs = seq[:-1]
    kinds = np.concatenate([sample.prompt_kinds,
                            np.zeros(sample.target_ids.size, np.uint8)])[:-1]
    h = lm.hidden(_embed_sample_inputs(lm, sample, inputs, kinds))
    loss_positions = np.arange(sample.prompt_ids.size - 1, seq.size - 1)
    logits = lm.logits(h, loss_positions)
    return F.softmax_cross_entropy(logits, sample.target_ids)


def finetune(samples: list[LmSample], lm: ToyLm, epochs: int = 1,
             lr: float = 1e-4, batch_size: int = 10, seed: int = 0,
             log_every: int = 0) -> LmTrainResult:
    """Adapter-only instruction tuning over the sample list."""
    if not samples:
        raise InvalidInputError("no instruction samples")
    lm.set_finetune_mode()
    trainable = lm.trainable_parameters()
    if not trainable:
        raise InvalidInputError("nothing trainable in finetune mode")
    optimizer = Adam(trainable, lr=lr)
    rng = np.random.default_rng(seed)
    history: list[tuple[int, float]] = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        for lo in range(0, len(order), batch_size):
            batch = order[lo : lo + batch_size]
            total = None
            for idx in batch:
                loss = sample_loss(lm, samples[int(idx)])
                total = loss if total is None else total + loss
            batch_loss = total * (1.0 / batch.size)
            optimizer.zero_grad()
            batch_loss.backward()
            optimizer.step()
            history.append((step, batch_loss.item()))
            step += 1
            if log_every and step % log_every == 0:
                print(f"  finetune step {step:5d}  loss {batch_loss.item():.4f}",
                      flush=True)
    return LmTrainResult(lm=lm, history=history)


# ---- generation ------------------------------------------------------------------


@dataclass
class GenerationResult:
    ids: np.ndarray
    stop_reason: str                       # "eos" | "max_new" | "length_exhausted"


def generate(lm: ToyLm, sample: LmSample, max_new: int = 32,
             text_only: bool = True) -> GenerationResult:
    """Greedy decoding after the prompt; stops at the end-of-answer token or
    after ``max_new`` tokens. ``text_only`` masks ECG and marker ids out of
    the argmax so answers stay in the text range."""
    vocab = lm.vocab
    ids = sample.prompt_ids.copy()
    kinds = sample.prompt_kinds.copy()
    if ids.size >= lm.cfg.context_len:
        return GenerationResult(np.empty(0, np.int64), "length_exhausted")
    out: list[int] = []
    ban = None
    if text_only:
        ban = np.zeros(vocab.total_size)
        ban[vocab.ecg_base :] = -1e30
    for _ in range(max_new):
        if ids.size >= lm.cfg.context_len:
            return GenerationResult(np.array(out, np.int64), "length_exhausted")
        h = lm.hidden(_embed_sample_inputs(lm, sample, ids, kinds))
        logits = lm.logits(h, np.array([ids.size - 1])).data[0]
        if ban is not None:
            logits = logits + ban
        nxt = int(logits.argmax())
        if nxt == vocab.eos_id:
            return GenerationResult(np.array(out, np.int64), "eos")
        out.append(nxt)
        ids = np.append(ids, nxt)
        kinds = np.append(kinds, np.uint8(vocab.kind_of(nxt)))
    return GenerationResult(np.array(out, np.int64), "max_new")
