"""Cross-modal projection matching (KL) and projection classification losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass
class LossConfig:
    eps: float = 1e-8
    cmpm: bool = True
    cmpc: bool = True

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")


def build_match_matrix(labels) -> tuple[np.ndarray, np.ndarray]:
    """Binary same-identity matrix ``m`` and its row-normalized form ``q``."""
    labels = np.asarray(labels).reshape(-1)
    m = (labels[:, None] == labels[None, :]).astype(np.float64)
    q = m / m.sum(axis=1, keepdims=True)
    return m, q


def _check_pair(v: Tensor, t: Tensor) -> None:
    if v.ndim != 2 or v.shape != t.shape:
        raise DimensionError(f"descriptor batches must be matching NxC matrices, got {v.shape} and {t.shape}")


def matching_probabilities(v: Tensor, t: Tensor) -> Tensor:
    """Row-softmax of scalar projections of each ``v_i`` onto every normalized ``t_j``."""
    return T.softmax(v @ T.l2_normalize(t, axis=1).T, axis=1)


def _directional_kl(anchor: Tensor, other: Tensor, log_q: np.ndarray) -> Tensor:
    logits = anchor @ T.l2_normalize(other, axis=1).T
    logp = T.log_softmax(logits, axis=1)
    p = T.exp(logp)
    n = anchor.shape[0]
    return (p * (logp - Tensor(log_q))).sum() * (1.0 / n)


def cmpm_directional(v: Tensor, t: Tensor, labels, eps: float = 1e-8) -> tuple[Tensor, Tensor]:
    """(image-to-text, text-to-image) matching losses."""
    _check_pair(v, t)
    _, q = build_match_matrix(labels)
    log_q = np.log(q + eps).astype(v.dtype)
    return _directional_kl(v, t, log_q), _directional_kl(t, v, log_q.T)


def cmpm_loss(v: Tensor, t: Tensor, labels, eps: float = 1e-8) -> Tensor:
    ipt, tpi = cmpm_directional(v, t, labels, eps)
    return ipt + tpi


def _projection_ce(anchor: Tensor, partner: Tensor, w_unit: Tensor, labels: np.ndarray) -> Tensor:
    # vector projection of anchor onto its paired, normalized partner
    pbar = T.l2_normalize(partner, axis=1)
    proj = (anchor * pbar).sum(axis=1, keepdims=True) * pbar
    logp = T.log_softmax(proj @ w_unit, axis=1)
    return -T.take_rows(logp, labels).sum() * (1.0 / anchor.shape[0])


def cmpc_directional(v: Tensor, t: Tensor, w: Tensor, labels) -> tuple[Tensor, Tensor]:
    """(image, text) classification losses with unit-norm classifier columns."""
    _check_pair(v, t)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if w.ndim != 2 or w.shape[0] != v.shape[1]:
        raise DimensionError(f"classifier must be {v.shape[1]} x M, got {w.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= w.shape[1]):
        raise DimensionError(f"labels must lie in [0, {w.shape[1]})")
    w_unit = T.l2_normalize(w, axis=0)
    return _projection_ce(v, t, w_unit, labels), _projection_ce(t, v, w_unit, labels)


def cmpc_loss(v: Tensor, t: Tensor, w: Tensor, labels) -> Tensor:
    img, txt = cmpc_directional(v, t, w, labels)
    return img + txt


def total_loss(v: Tensor, t: Tensor, w: Tensor, labels, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    if not (cfg.cmpm or cfg.cmpc):
        raise ConfigError("at least one of cmpm/cmpc must be enabled")
    terms = []
    if cfg.cmpc:
        terms.append(cmpc_loss(v, t, w, labels))
    if cfg.cmpm:
        terms.append(cmpm_loss(v, t, labels, cfg.eps))
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]
