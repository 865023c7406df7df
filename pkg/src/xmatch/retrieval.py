"""Text-to-image retrieval: cosine similarity, rank-k accuracy and CMC curves."""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CorruptionError, FormatError, InputError, NormalizationError

DEFAULT_KS = (1, 5, 10)


def cosine_similarity(q, g) -> float:
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    nq, ng = np.linalg.norm(q), np.linalg.norm(g)
    if nq == 0 or ng == 0:
        raise NormalizationError("cosine similarity of a zero-norm vector")
    return float(np.clip(q @ g / (nq * ng), -1.0, 1.0))


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if np.any(norms == 0):
        raise NormalizationError(f"{what} contains a zero-norm row")
    return x / norms


def similarity_matrix(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Q x G cosine similarities at 32-bit precision."""
    return _unit_rows(queries, "query set") @ _unit_rows(gallery, "gallery").T


@dataclass
class CmcCurve:
    accuracy: np.ndarray  # accuracy[k - 1] = rank-k accuracy
    excluded: int = 0
    evaluated: int = 0

    def rank(self, k: int) -> float:
        k = min(k, len(self.accuracy))
        return float(self.accuracy[k - 1])

    def summary(self, ks: Sequence[int] = DEFAULT_KS) -> dict:
        return {
            **{f"rank{k}": self.rank(k) for k in ks},
            "evaluated_queries": self.evaluated,
            "excluded_queries": self.excluded,
        }


@dataclass
class RankResult:
    cmc: CmcCurve
    first_hit: np.ndarray = field(repr=False)  # 0-based rank of first correct item, -1 if excluded


def _check_inputs(q_labels, g_labels, sims):
    if len(g_labels) == 0:
        raise InputError("empty gallery")
    if sims.shape != (len(q_labels), len(g_labels)):
        raise InputError(f"similarity matrix {sims.shape} does not match {len(q_labels)} queries x {len(g_labels)} gallery")


def evaluate_rank_k(
    queries: np.ndarray, q_labels, gallery: np.ndarray, g_labels, max_k: int | None = None
) -> RankResult:
    """Rank the gallery for every query; ties go to the lower gallery index.

    Queries whose identity is absent from the gallery are excluded and counted.
    """
    q_labels = np.asarray(q_labels)
    g_labels = np.asarray(g_labels)
    if len(g_labels) == 0:
        raise InputError("empty gallery")
    return rank_from_similarities(similarity_matrix(queries, gallery), q_labels, g_labels, max_k)


def rank_from_similarities(sims: np.ndarray, q_labels, g_labels, max_k: int | None = None) -> RankResult:
    q_labels = np.asarray(q_labels)
    g_labels = np.asarray(g_labels)
    _check_inputs(q_labels, g_labels, sims)
    g = len(g_labels)
    max_k = g if max_k is None else min(max_k, g)
    order = np.argsort(-sims, axis=1, kind="stable")
    hits = g_labels[order] == q_labels[:, None]
    present = hits.any(axis=1)
    first = np.where(present, hits.argmax(axis=1), -1)
    valid = first[present]
    n = int(present.sum())
    counts = np.bincount(valid, minlength=g)[:max_k]
    acc = np.cumsum(counts) / n if n else np.zeros(max_k)
    return RankResult(CmcCurve(acc, excluded=int((~present).sum()), evaluated=n), first)


def _merge_sort(items: list) -> list:
    if len(items) <= 1:
        return items
    mid = len(items) // 2
    left, right = _merge_sort(items[:mid]), _merge_sort(items[mid:])
    out = []
    i = j = 0
    while i < len(left) and j < len(right):
        if right[j] < left[i]:
            out.append(right[j])
            j += 1
        else:
            out.append(left[i])
            i += 1
    out.extend(left[i:])
    out.extend(right[j:])
    return out


def oracle_rank(sims: np.ndarray, q_labels, g_labels, max_k: int | None = None) -> CmcCurve:
    """Plain-Python recomputation of the CMC curve from a similarity matrix."""
    q_labels = [int(x) for x in np.asarray(q_labels)]
    g_labels = [int(x) for x in np.asarray(g_labels)]
    _check_inputs(q_labels, g_labels, np.asarray(sims))
    g = len(g_labels)
    max_k = g if max_k is None else min(max_k, g)
    hit_at = [0] * max_k
    evaluated = excluded = 0
    for qi, ql in enumerate(q_labels):
        if ql not in g_labels:
            excluded += 1
            continue
        evaluated += 1
        ranked = _merge_sort([(-float(sims[qi][gi]), gi) for gi in range(g)])
        for pos, (_, gi) in enumerate(ranked):
            if g_labels[gi] == ql:
                for k in range(pos, max_k):
                    hit_at[k] += 1
                break
    acc = np.array([h / evaluated if evaluated else 0.0 for h in hit_at])
    return CmcCurve(acc, excluded=excluded, evaluated=evaluated)


# -- files --------------------------------------------------------------------
_MAGIC = b"XMDV"
_VERSION = 1


def save_descriptors(path, labels, vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors, dtype="<f4")
    labels = np.asarray(labels)
    n, d = vectors.shape
    body = bytearray(_MAGIC + struct.pack("<III", _VERSION, n, d))
    for lab, row in zip(labels, vectors):
        body += struct.pack("<I", int(lab)) + row.tobytes()
    payload = bytes(body)
    Path(path).write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


def load_descriptors(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != _MAGIC:
        raise FormatError(f"{path}: not a descriptor file")
    version, n, d = struct.unpack_from("<III", raw, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported descriptor version {version}")
    row = 4 + 4 * d
    if len(raw) != 16 + n * row + 4:
        raise CorruptionError(f"{path}: truncated descriptor file")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise CorruptionError(f"{path}: checksum mismatch")
    rec = np.frombuffer(raw, dtype=np.dtype([("id", "<u4"), ("v", "<f4", (d,))]), count=n, offset=16)
    return rec["id"].astype(np.int64), rec["v"].astype(np.float32)


def write_report(csv_path, json_path, cmc: CmcCurve, ks: Sequence[int] = DEFAULT_KS) -> dict:
    lines = ["k,accuracy"] + [f"{k},{cmc.rank(k)!r}" for k in range(1, len(cmc.accuracy) + 1)]
    Path(csv_path).write_text("\n".join(lines) + "\n")
    summary = cmc.summary(ks)
    Path(json_path).write_text(json.dumps(summary, indent=2) + "\n")
    return summary
