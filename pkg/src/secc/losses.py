"""Loss terms of the SE-CC objective and their analytic input gradients.

Each ``foo`` has a matching ``foo_grad`` returning the partial derivatives
with respect to the same arguments. Probability arguments are clamped at
``EPS`` before any logarithm or division.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .datagen import ValidationError

EPS = 1e-12


class MIBatchTooSmall(ValueError):
    """Raised when no negative pair exists for the JSD estimator."""


@dataclass
class LossBreakdown:
    l_cse: float = 0.0
    l_se: float = 0.0
    l_cde: float = 0.0
    l_kl: float = 0.0
    l_constraint: float = 0.0
    l_g_jsd: float = 0.0
    l_l_jsd: float = 0.0
    l_mim: float = 0.0
    total: float = 0.0

    @classmethod
    def columns(cls) -> list:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return asdict(self)

    def non_finite_terms(self) -> list:
        return [k for k, v in asdict(self).items() if not np.isfinite(v)]


def _check_len(a, b):
    if a.shape != b.shape:
        raise ValidationError(f"length mismatch: {a.shape} vs {b.shape}")


def cross_entropy(p, y: int) -> float:
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= y < len(p):
        raise ValidationError(f"class id {y} out of range for {len(p)} classes")
    return float(-np.log(max(p[y], EPS)))


def cross_entropy_grad(p, y: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    g = np.zeros_like(p)
    if p[y] > EPS:
        g[y] = -1.0 / p[y]
    return g


def self_ensembling_loss(p_s, p_t) -> float:
    p_s, p_t = np.asarray(p_s, dtype=np.float64), np.asarray(p_t, dtype=np.float64)
    _check_len(p_s, p_t)
    return float(((p_s - p_t) ** 2).sum())


def self_ensembling_grad(p_s, p_t) -> np.ndarray:
    """Gradient w.r.t. the student distribution; the teacher side is a constant."""
    return 2.0 * (np.asarray(p_s, dtype=np.float64) - np.asarray(p_t, dtype=np.float64))


def conditional_entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    return float(-(p * np.log(np.maximum(p, EPS))).sum(-1))


def conditional_entropy_grad(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    pc = np.maximum(p, EPS)
    return np.where(p > EPS, -np.log(pc) - 1.0, -np.log(pc))


def kl_cluster_loss(p_tilde, p) -> float:
    p_tilde, p = np.asarray(p_tilde, dtype=np.float64), np.asarray(p, dtype=np.float64)
    _check_len(p_tilde, p)
    pos = p_tilde > 0
    pt = np.where(pos, p_tilde, 1.0)
    terms = np.where(pos, p_tilde * (np.log(pt) - np.log(np.maximum(p, EPS))), 0.0)
    return float(terms.sum())


def kl_cluster_grad(p_tilde, p) -> np.ndarray:
    """Gradient w.r.t. the predicted distribution ``p``."""
    p_tilde, p = np.asarray(p_tilde, dtype=np.float64), np.asarray(p, dtype=np.float64)
    return np.where(p > EPS, -p_tilde / np.maximum(p, EPS), 0.0)


def _row_cosines(W):
    W = np.asarray(W, dtype=np.float64)
    n = np.linalg.norm(W, axis=1, keepdims=True)
    if np.any(n == 0):
        raise ValidationError("zero row in W: cosine similarity undefined")
    U = W / n
    C = U @ U.T
    np.fill_diagonal(C, 1.0)
    return U, n, C


def inter_cluster_constraint(W, centroid_cos) -> float:
    """Sum over all ordered pairs (k, k') of |cos(W_k, W_k') - cos(mu_k, mu_k')|."""
    _, _, C = _row_cosines(W)
    return float(np.abs(C - np.asarray(centroid_cos, dtype=np.float64)).sum())


def inter_cluster_constraint_grad(W, centroid_cos) -> np.ndarray:
    U, n, C = _row_cosines(W)
    S = np.sign(C - np.asarray(centroid_cos, dtype=np.float64))
    np.fill_diagonal(S, 0.0)  # self-cosine is constant
    dU = (S + S.T) @ U
    return (dU - (dU * U).sum(1, keepdims=True) * U) / n


def softplus(v):
    return np.logaddexp(0.0, v)


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(v, dtype=np.float64)))


def _check_pairs(pos, neg):
    if pos.size == 0:
        raise MIBatchTooSmall("JSD estimator needs at least one positive pair")
    if neg.size == 0:
        raise MIBatchTooSmall("JSD estimator needs a negative pair from a different target sample")


def mi_global_objective(pos_scores, neg_scores) -> float:
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    _check_pairs(pos, neg)
    return float(-softplus(-pos).mean() - softplus(neg).mean())


def mi_global_grad(pos_scores, neg_scores) -> tuple:
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    _check_pairs(pos.ravel(), neg.ravel())
    return _sigmoid(-pos) / pos.size, -_sigmoid(neg) / neg.size


def mi_local_objective(pos_maps, neg_maps) -> float:
    """Per-sample spatial means of the softplus terms, then batch means."""
    pos = np.asarray(pos_maps, dtype=np.float64)
    neg = np.asarray(neg_maps, dtype=np.float64)
    if pos.ndim == 2:
        pos = pos[None]
    if neg.ndim == 2:
        neg = neg[None] if neg.size else neg.reshape(0, *pos.shape[1:])
    _check_pairs(pos, neg)
    if pos.shape[1:] != neg.shape[1:]:
        raise ValidationError(f"score map shapes differ: {pos.shape[1:]} vs {neg.shape[1:]}")
    pos_term = -softplus(-pos).reshape(len(pos), -1).mean(1).mean()
    neg_term = softplus(neg).reshape(len(neg), -1).mean(1).mean()
    return float(pos_term - neg_term)


def mi_local_grad(pos_maps, neg_maps) -> tuple:
    pos = np.asarray(pos_maps, dtype=np.float64)
    neg = np.asarray(neg_maps, dtype=np.float64)
    _check_pairs(pos, neg)
    # equal-sized maps: the nested means reduce to a flat mean
    return _sigmoid(-pos) / pos.size, -_sigmoid(neg) / neg.size


def mim_objective(l_g: float, l_l: float, alpha: float) -> float:
    return alpha * l_g + l_l


def total_loss(parts: LossBreakdown, beta: float) -> LossBreakdown:
    """Fill ``parts.total`` with L_SEC + L_KL - beta * L_MIM and return ``parts``."""
    l_sec = parts.l_cse + parts.l_se + parts.l_cde
    l_kl = parts.l_kl + parts.l_constraint
    parts.total = l_sec + l_kl - beta * parts.l_mim
    return parts
