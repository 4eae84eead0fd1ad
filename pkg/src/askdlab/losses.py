"""Distillation losses over per-position categorical distributions.

Student-side inputs may be :class:`~askdlab.numkernel.Tensor` objects, in
which case the returned scalar is differentiable. Teacher-side inputs are
always treated as constants. Every loss is a mean over the valid (unpadded)
positions so that alpha weights compare across batch sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import functional as F
from . import numkernel as nk
from .numkernel import ShapeError, Tensor

EPS = 1e-12


@dataclass(frozen=True)
class ProbDist:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim < 1:
            raise ValueError("ProbDist needs at least one axis")
        if (p < 0).any() or not np.isfinite(p).all():
            raise ValueError("probabilities must be finite and non-negative")
        if np.abs(p.sum(axis=-1) - 1.0).max() > 1e-6:
            raise ValueError("rows of a ProbDist must sum to 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def one_hot(cls, labels, vocab_size: int) -> "ProbDist":
        return cls(np.eye(vocab_size)[np.asarray(labels)])

    @property
    def shape(self):
        return self.probs.shape


@dataclass
class LossBreakdown:
    l_s: float | None = None
    l_kl: float | None = None
    l_akd: float | None = None
    l_skd: float | None = None
    l_total: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _const(p) -> np.ndarray:
    if isinstance(p, ProbDist):
        return p.probs
    if isinstance(p, Tensor):
        return p.data
    return np.asarray(p, dtype=np.float64)


def _student(p) -> Tensor:
    if isinstance(p, Tensor):
        return p
    return Tensor(_const(p))


def _position_weights(shape, mask) -> np.ndarray:
    lead = shape[:-1]
    if mask is None:
        w = np.ones(lead)
    else:
        w = np.asarray(mask, dtype=np.float64)
        if w.shape != lead:
            raise ShapeError(f"mask shape {w.shape} does not match positions {lead}")
    n = w.sum()
    if n == 0:
        raise ValueError("mask selects no positions")
    return w / n


def _weighted_mean(row_values: Tensor, mask) -> Tensor:
    w = _position_weights(row_values.shape + (1,), mask)
    return nk.sum_reduce(nk.mul(row_values, Tensor._wrap(w)))


def softmax_temperature(logits, tau: float) -> Tensor:
    """Row-wise softmax of ``logits / tau`` (max-shifted)."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = logits if isinstance(logits, Tensor) else Tensor(logits)
    if tau != 1.0:
        z = nk.scale(z, 1.0 / tau)
    return F.softmax(z, axis=-1)


def soft_ce_loss(target, p_student, mask=None) -> Tensor:
    """mean_pos -sum_v target * log(p_student + eps)."""
    q = _const(target)
    ps = _student(p_student)
    if q.shape != ps.shape:
        raise ShapeError(f"target {q.shape} vs student {ps.shape}")
    logp = nk.log(nk.add(ps, Tensor._wrap(np.full(ps.shape, EPS))))
    rows = nk.scale(nk.sum_reduce(nk.mul(logp, Tensor._wrap(q)), axis=-1), -1.0)
    return _weighted_mean(rows, mask)


def kl_loss(p_teacher, p_student, tau: float = 1.0, mask=None) -> Tensor:
    """tau^2 * mean_pos sum_v p_t * log((p_t + eps) / (p_s + eps))."""
    pt = _const(p_teacher)
    ps = _student(p_student)
    if pt.shape != ps.shape:
        raise ShapeError(f"teacher {pt.shape} vs student {ps.shape}")
    neg_entropy = np.sum(pt * np.log(pt + EPS), axis=-1)
    cross = soft_ce_loss(pt, ps, mask)
    const = float(np.sum(neg_entropy * _position_weights(pt.shape, mask)))
    return nk.scale(nk.add(cross, Tensor._wrap(np.asarray(const))), tau * tau)


def _check_alpha(alpha: float, name: str) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {alpha}")
    return float(alpha)


def akd_loss(p_student, p_teacher, alpha_akd: float, tau: float = 1.0, mask=None) -> Tensor:
    alpha = _check_alpha(alpha_akd, "alpha_akd")
    return nk.scale(kl_loss(p_teacher, p_student, tau, mask), alpha)


def skd_target(y, p_prev, alpha_skd: float) -> ProbDist:
    """(1 - alpha) * y + alpha * p_prev."""
    alpha = _check_alpha(alpha_skd, "alpha_skd")
    y, p = _const(y), _const(p_prev)
    if y.shape != p.shape:
        raise ShapeError(f"hard labels {y.shape} vs previous distribution {p.shape}")
    if alpha == 0.0:
        return ProbDist(y.copy())
    if alpha == 1.0:
        return ProbDist(p.copy())
    return ProbDist((1.0 - alpha) * y + alpha * p)


def skd_loss(y, p_prev, p_student, alpha_skd: float, mask=None) -> Tensor:
    return soft_ce_loss(skd_target(y, p_prev, alpha_skd), p_student, mask)


def total_loss_akd(l_s, l_akd):
    # plain sum, no (1 - alpha) weight on the hard-label term
    if isinstance(l_s, Tensor) or isinstance(l_akd, Tensor):
        return nk.add(nk.as_tensor(l_s), nk.as_tensor(l_akd))
    return l_s + l_akd
