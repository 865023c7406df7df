"""Sentence tokenization, fixed-length padding and frozen embedding lookup."""
from __future__ import annotations

import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import CorruptionError, FormatError, InputError
from .tensor import Tensor

PAD, CLS, SEP, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[UNK]")
DEFAULT_LENGTH = 120

_TOKEN_RE = re.compile(r"[^\W_]+|[^\w\s]", re.UNICODE)


def split_words(sentence: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation (punctuation kept as tokens)."""
    return _TOKEN_RE.findall(sentence.lower())


class Vocabulary:
    """Injective token -> id map with the four reserved ids 0..3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._ids: dict[str, int] = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        self._tokens: list[str] = list(SPECIAL_TOKENS)
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self._ids:
            self._ids[token] = len(self._tokens)
            self._tokens.append(token)
        return self._ids[token]

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    @classmethod
    def from_sentences(cls, sentences: Iterable[str]) -> "Vocabulary":
        vocab = cls()
        for s in sentences:
            for w in split_words(s):
                vocab.add(w)
        return vocab

    def save(self, path) -> None:
        # reserved ids are implicit; line k holds id k + 4
        Path(path).write_text("".join(t + "\n" for t in self._tokens[len(SPECIAL_TOKENS):]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line for line in lines if line)


@dataclass
class TokenSequence:
    ids: np.ndarray
    true_length: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TokenSequence)
            and self.true_length == other.true_length
            and np.array_equal(self.ids, other.ids)
        )


def tokenize_and_pad(sentence: str, vocab: Vocabulary, length: int = DEFAULT_LENGTH) -> TokenSequence:
    """[CLS] words... [SEP] then [PAD] up to ``length``.

    Sentences longer than ``length - 2`` words keep their first words.
    """
    if length < 3:
        raise InputError(f"fixed length must be at least 3, got {length}")
    words = split_words(sentence)
    if not sentence.strip() or not words:
        raise InputError("empty sentence")
    body = [vocab.id_of(w) for w in words[: length - 2]]
    ids = [CLS] + body + [SEP]
    n = len(ids)
    return TokenSequence(np.array(ids + [PAD] * (length - n), dtype=np.int64), n)


def encode(seq: TokenSequence, vocab: Vocabulary) -> list[str]:
    return [vocab.token_of(int(i)) for i in seq.ids]


def decode(tokens: list[str], vocab: Vocabulary) -> TokenSequence:
    ids = np.array([vocab.id_of(t) for t in tokens], dtype=np.int64)
    true_length = int(np.count_nonzero(ids != PAD))
    return TokenSequence(ids, true_length)


# -- embedding table -------------------------------------------------------
_MAGIC = b"XMEB"
_VERSION = 1


@dataclass
class EmbeddingTable:
    """Frozen V x D lookup table; row PAD is all zeros."""

    matrix: np.ndarray
    frozen: bool = field(default=True, init=False)

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2:
            raise FormatError(f"embedding matrix must be 2-D, got {self.matrix.shape}")

    @property
    def vocab_size(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def random(cls, vocab_size: int, dim: int, seed: int = 0) -> "EmbeddingTable":
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((vocab_size, dim)).astype(np.float32)
        m[PAD] = 0.0
        return cls(m)

    def save(self, path) -> None:
        payload = self.matrix.astype("<f4").tobytes()
        header = _MAGIC + struct.pack("<III", _VERSION, self.vocab_size, self.dim)
        Path(path).write_bytes(header + payload + struct.pack("<I", zlib.crc32(payload)))


def load_embedding_table(path) -> EmbeddingTable:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise FormatError(f"{path}: not an embedding table (bad magic)")
    version, v, d = struct.unpack_from("<III", raw, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported embedding table version {version}")
    nbytes = v * d * 4
    if len(raw) != 16 + nbytes + 4:
        raise CorruptionError(f"{path}: expected {nbytes} payload bytes plus checksum, file has {len(raw) - 16}")
    payload = raw[16 : 16 + nbytes]
    (crc,) = struct.unpack_from("<I", raw, 16 + nbytes)
    if zlib.crc32(payload) != crc:
        raise CorruptionError(f"{path}: checksum mismatch")
    return EmbeddingTable(np.frombuffer(payload, dtype="<f4").reshape(v, d).astype(np.float32))


def embed_ids(ids: np.ndarray, table: EmbeddingTable) -> np.ndarray:
    """Look up a batch of id rows (N x L) -> N x 1 x L x D array."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        raise IndexError(f"token id out of range for a table of {table.vocab_size} rows")
    out = table.matrix[ids]
    return out.reshape(ids.shape[:-1] + (1, ids.shape[-1], table.dim))


def embed_sequence(seq: TokenSequence, table: EmbeddingTable) -> Tensor:
    """1 x L x D tensor; the table is frozen so no gradient path is recorded."""
    return Tensor(embed_ids(seq.ids, table))
