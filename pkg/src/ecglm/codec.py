"""Token codec: quantized codes <-> scalar ids, vocabulary, token streams.

A code vector of D digits in base L maps to one integer in [0, L^D) by
positional base conversion (digit i is the i-th least significant). The
vocabulary appends the L^D ECG ids after the text ids and reserves the last
two ids for the "<|start_ecg|>" / "<|end_ecg|>" markers. ECG and marker
embedding rows are drawn from a diagonal Gaussian fitted to the text rows,
so the new tokens start inside the text embedding distribution.

Token streams serialize as: magic "ECGT", version u16, count u32, then
count little-endian u32 ids followed by count u8 kind flags.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autoencoder import EcgTokenizerModel
from .encoder import normalize_and_pad
from .nnops import InvalidInputError
from .quantizer import FsqConfig, code_digits
from .signals import EcgRecord
from .tensor import Parameter, Tensor

ECGT_MAGIC = b"ECGT"
ECGT_VERSION = 1

KIND_TEXT = 0
KIND_ECG = 1
KIND_MARKER = 2

START_MARKER = "<|start_ecg|>"
END_MARKER = "<|end_ecg|>"
UNK_TOKEN = "<unk>"
EOS_TOKEN = "<|eos|>"


class TokenStreamError(ValueError):
    """Malformed token stream file."""


def code_to_token_id(code: np.ndarray, levels: int) -> int:
    """Base-L positional conversion, least-significant digit first."""
    code = np.asarray(code, dtype=np.int64)
    if code.ndim != 1:
        raise InvalidInputError("code must be a flat digit vector")
    if np.any(code < 0) or np.any(code >= levels):
        raise InvalidInputError(f"digits must lie in [0, {levels})")
    weights = levels ** np.arange(code.size, dtype=np.int64)
    return int(code @ weights)


def token_id_to_code(token_id: int, levels: int, dims: int) -> np.ndarray:
    """Exact inverse of ``code_to_token_id``."""
    if not 0 <= token_id < levels**dims:
        raise InvalidInputError(f"token id {token_id} outside [0, {levels}^{dims})")
    digits = np.empty(dims, dtype=np.int64)
    rest = int(token_id)
    for i in range(dims):
        rest, digits[i] = divmod(rest, levels)
    return digits


def codes_to_token_ids(codes: np.ndarray, levels: int) -> np.ndarray:
    """Vectorized conversion of (T', D) grid values to (T',) ids."""
    digits = code_digits(codes, levels)
    weights = levels ** np.arange(digits.shape[-1], dtype=np.int64)
    return digits @ weights


def token_ids_to_codes(ids: np.ndarray, levels: int, dims: int) -> np.ndarray:
    """Vectorized inverse: (T',) ids to (T', D) grid values in [0, 1]."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= levels**dims):
        raise InvalidInputError("token id outside the ECG id range")
    digits = (ids[:, None] // levels ** np.arange(dims, dtype=np.int64)) % levels
    return digits / (levels - 1)


@dataclass
class TokenSequence:
    ids: np.ndarray                    # int64
    kinds: np.ndarray                  # uint8, same length

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.kinds = np.asarray(self.kinds, dtype=np.uint8)
        if self.ids.shape != self.kinds.shape or self.ids.ndim != 1:
            raise InvalidInputError("ids and kinds must be equal-length vectors")

    def __len__(self) -> int:
        return int(self.ids.size)

    def __eq__(self, other) -> bool:
        return (isinstance(other, TokenSequence)
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.kinds, other.kinds))

    @staticmethod
    def of(ids, kind: int) -> "TokenSequence":
        ids = np.asarray(ids, dtype=np.int64)
        return TokenSequence(ids, np.full(ids.shape, kind, dtype=np.uint8))

    @staticmethod
    def join(parts: list["TokenSequence"]) -> "TokenSequence":
        if not parts:
            return TokenSequence(np.empty(0, np.int64), np.empty(0, np.uint8))
        return TokenSequence(np.concatenate([p.ids for p in parts]),
                             np.concatenate([p.kinds for p in parts]))


@dataclass
class Vocabulary:
    text_tokens: list[str]
    levels: int
    dims: int
    d_model: int
    seed: int
    embedding: Parameter = field(repr=False)
    token_to_id: dict[str, int] = field(repr=False)

    @property
    def text_size(self) -> int:
        return len(self.text_tokens)

    @property
    def ecg_base(self) -> int:
        return self.text_size

    @property
    def ecg_size(self) -> int:
        return self.levels**self.dims

    @property
    def start_marker_id(self) -> int:
        return self.text_size + self.ecg_size

    @property
    def end_marker_id(self) -> int:
        return self.start_marker_id + 1

    @property
    def total_size(self) -> int:
        return self.text_size + self.ecg_size + 2

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK_TOKEN]

    @property
    def eos_id(self) -> int:
        return self.token_to_id[EOS_TOKEN]

    def text_id(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)

    def encode_words(self, words: list[str]) -> TokenSequence:
        return TokenSequence.of([self.text_id(w) for w in words], KIND_TEXT)

    def decode_text(self, ids) -> str:
        words = []
        for i in np.asarray(ids, dtype=np.int64):
            if 0 <= i < self.text_size:
                words.append(self.text_tokens[i])
        return " ".join(words)

    def kind_of(self, token_id: int) -> int:
        if token_id < self.text_size:
            return KIND_TEXT
        if token_id < self.start_marker_id:
            return KIND_ECG
        return KIND_MARKER


def build_vocabulary(text_tokens: list[str], fsq_cfg: FsqConfig, d_model: int,
                     seed: int = 0) -> Vocabulary:
    """Assemble the merged vocabulary and its embedding table. Text rows are
    drawn N(0, 0.02^2); ECG and marker rows are sampled from the per-dimension
    Gaussian fitted to the text rows. Deterministic per seed."""
    tokens = list(text_tokens)
    for special in (UNK_TOKEN, EOS_TOKEN):
        if special not in tokens:
            tokens.insert(0, special)
    if len(set(tokens)) != len(tokens):
        dupes = sorted({t for t in tokens if tokens.count(t) > 1})
        raise InvalidInputError(f"duplicate text tokens: {dupes[:5]}")
    if START_MARKER in tokens or END_MARKER in tokens:
        raise InvalidInputError("marker strings are reserved and not text tokens")

    rng = np.random.default_rng(seed)
    n_text = len(tokens)
    text_rows = rng.normal(0.0, 0.02, size=(n_text, d_model))
    mu = text_rows.mean(axis=0)
    sigma = text_rows.std(axis=0) + 1e-12
    extra = fsq_cfg.vocabulary_size + 2
    new_rows = rng.normal(0.0, 1.0, size=(extra, d_model)) * sigma + mu
    table = np.concatenate([text_rows, new_rows], axis=0)
    embedding = Parameter(table, name="embedding", trainable=True)
    return Vocabulary(text_tokens=tokens, levels=fsq_cfg.levels, dims=fsq_cfg.dims,
                      d_model=d_model, seed=seed, embedding=embedding,
                      token_to_id={t: i for i, t in enumerate(tokens)})


def record_latents(record: EcgRecord, tokenizer: EcgTokenizerModel) -> np.ndarray:
    """Fused continuous latents for one record, (T', channels). No gradient
    tracking; used by tokenization and the continuous-bridge ablation."""
    cfg = tokenizer.enc_cfg
    if record.leads != cfg.leads:
        raise InvalidInputError(
            f"record has {record.leads} leads, encoder expects {cfg.leads}")
    x = normalize_and_pad(record, cfg.pad_factor)
    fused = tokenizer.encoder(Tensor(x[None, :, :]))
    return fused.data[0].T.copy()


def tokenize_record(record: EcgRecord, tokenizer: EcgTokenizerModel,
                    vocab: Vocabulary, with_markers: bool = False) -> TokenSequence:
    """Encode, fuse, project, quantize, index, and offset into the ECG id
    range; optionally wrapped in the start/end markers."""
    if vocab.levels != tokenizer.fsq_cfg.levels or vocab.dims != tokenizer.fsq_cfg.dims:
        raise InvalidInputError("vocabulary grid does not match the tokenizer's")
    latents = record_latents(record, tokenizer)
    z_cont = tokenizer.fsq.project(Tensor(latents))
    codes = tokenizer.fsq.quantize(z_cont)
    ids = codes_to_token_ids(codes.data, vocab.levels) + vocab.ecg_base
    body = TokenSequence.of(ids, KIND_ECG)
    if not with_markers:
        return body
    return TokenSequence.join([
        TokenSequence.of([vocab.start_marker_id], KIND_MARKER),
        body,
        TokenSequence.of([vocab.end_marker_id], KIND_MARKER),
    ])


def detokenize_ids(ecg_ids: np.ndarray, tokenizer: EcgTokenizerModel,
                   vocab: Vocabulary, original_timesteps: int | None = None) -> np.ndarray:
    """ECG-range token ids back to a (leads, T) waveform via the decoder."""
    raw = np.asarray(ecg_ids, dtype=np.int64) - vocab.ecg_base
    codes = token_ids_to_codes(raw, vocab.levels, vocab.dims)
    z_prime = tokenizer.fsq.unproject(Tensor(codes))        # (T', C)
    recon = tokenizer.decoder(z_prime.transpose().reshape((1,) + z_prime.shape[::-1]))
    waveform = recon.data[0]
    if original_timesteps is not None:
        waveform = waveform[:, :original_timesteps]
    return waveform


# ---- token stream files ----------------------------------------------------


def write_tokens(seq: TokenSequence, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(ECGT_MAGIC)
        fh.write(struct.pack("<HI", ECGT_VERSION, len(seq)))
        fh.write(np.ascontiguousarray(seq.ids, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(seq.kinds, dtype="u1").tobytes())


def read_tokens(path: str | Path) -> TokenSequence:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != ECGT_MAGIC:
        raise TokenStreamError(f"{path}: not a token stream (bad magic)")
    if len(raw) < 10:
        raise TokenStreamError(f"{path}: truncated header")
    version, count = struct.unpack("<HI", raw[4:10])
    if version != ECGT_VERSION:
        raise TokenStreamError(f"{path}: unsupported version {version}")
    need = 10 + 4 * count + count
    if len(raw) < need:
        raise TokenStreamError(f"{path}: truncated stream body")
    ids = np.frombuffer(raw[10 : 10 + 4 * count], dtype="<u4").astype(np.int64)
    kinds = np.frombuffer(raw[10 + 4 * count : need], dtype="u1").copy()
    return TokenSequence(ids, kinds)


# ---- vocabulary persistence -------------------------------------------------


def save_vocabulary(vocab: Vocabulary, manifest_path: str | Path) -> None:
    """Key-value manifest plus a sidecar text-token list (one per line)."""
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"v_text={vocab.text_size}",
        f"levels={vocab.levels}",
        f"dims={vocab.dims}",
        f"d_model={vocab.d_model}",
        f"seed={vocab.seed}",
    ]
    manifest_path.write_text("\n".join(lines) + "\n")
    tokens_path = manifest_path.with_suffix(".tokens")
    tokens_path.write_text("\n".join(vocab.text_tokens) + "\n")


def load_vocabulary(manifest_path: str | Path) -> Vocabulary:
    manifest_path = Path(manifest_path)
    pairs: dict[str, str] = {}
    for line in manifest_path.read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            pairs[key.strip()] = value.strip()
    tokens = manifest_path.with_suffix(".tokens").read_text().splitlines()
    fsq_cfg = FsqConfig(levels=int(pairs["levels"]), dims=int(pairs["dims"]),
                        latent_width=1)
    vocab = build_vocabulary(tokens, fsq_cfg, int(pairs["d_model"]),
                             seed=int(pairs["seed"]))
    if vocab.text_size != int(pairs["v_text"]):
        raise TokenStreamError("vocabulary manifest inconsistent with token list")
    return vocab
