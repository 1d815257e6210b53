"""Survival and cross-modal alignment objectives."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .tensor import ShapeError, Tensor

KL_FLOOR = 1e-12


class UninformativeBatchError(ValueError):
    """A Cox batch without any observed event has no partial likelihood."""


@dataclass
class LossWeights:
    lambda1: float = 1.0  # KL term
    lambda2: float = 1.0  # squared Euclidean term
    alpha: float = 1.0  # alignment vs survival

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {value}")


@dataclass
class LossBundle:
    cox: Tensor
    latent: Tensor
    translation: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("cox", "latent", "translation", "total")}


def _check_outcomes(times, events, n: int) -> tuple[np.ndarray, np.ndarray]:
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events)
    if times.shape != (n,) or events.shape != (n,):
        raise ShapeError(f"cox_loss: {n} risks but times {times.shape}, events {events.shape}")
    if np.any(~np.isfinite(times)) or np.any(times <= 0):
        raise ValueError("cox_loss: survival times must be positive and finite")
    if not np.all((events == 0) | (events == 1)):
        raise ValueError("cox_loss: events must be 0 or 1")
    return times, events.astype(bool)


def cox_loss(risks: Tensor, times, events, reduction: str = "sum") -> Tensor:
    """Negative Cox partial log-likelihood with Breslow ties.

    The risk set of subject i is every j with ``times[j] >= times[i]``. With
    ``reduction="mean"`` the sum over events is divided by the event count.
    """
    if risks.ndim != 1:
        raise ShapeError(f"cox_loss: risks must be a vector, got shape {risks.shape}")
    n = risks.shape[0]
    times, events = _check_outcomes(times, events, n)
    if n < 2:
        raise ValueError("cox_loss: need at least two subjects")
    if not events.any():
        raise UninformativeBatchError("cox_loss: batch has no events (uninformative batch)")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")

    ev_times = times[events]
    at_risk = times[None, :] >= ev_times[:, None]  # events x n
    # Per-row max over the risk set, held constant for log-sum-exp stability;
    # subjects outside the risk set are pushed to exp(-inf) = 0.
    r = risks.data
    row_max = np.where(at_risk, r[None, :], -np.inf).max(axis=1, keepdims=True)
    shift = np.where(at_risk, -row_max, -np.inf)
    spread = Tensor(np.ones((ev_times.size, 1))) @ risks.reshape(1, n) + Tensor(shift)
    log_risk_sums = spread.exp().sum(axis=1).log() + Tensor(row_max[:, 0])
    event_risk = (risks * Tensor(events.astype(np.float64))).sum()
    loss = log_risk_sums.sum() - event_risk
    if reduction == "mean":
        loss = loss / float(events.sum())
    return loss


def _distribution(x: Tensor) -> Tensor:
    axis = x.ndim - 1
    p = x.softmax(axis=axis)
    p = (p - KL_FLOOR).relu() + KL_FLOOR
    return p / p.sum(axis=axis, keepdims=True)


def kl_embedding(p: Tensor, q: Tensor) -> Tensor:
    """KL(softmax(p) || softmax(q)) along the last axis.

    Vectors give a scalar; B x D matrices give one divergence per row.
    """
    if p.shape != q.shape or p.ndim not in (1, 2):
        raise ShapeError(f"kl_embedding: shapes {p.shape} and {q.shape} must be equal vectors or matrices")
    pd = _distribution(p)
    qd = _distribution(q)
    return (pd * (pd.log() - qd.log())).sum(axis=p.ndim - 1)


def sq_euclidean(p: Tensor, q: Tensor) -> Tensor:
    """Squared distance along the last axis (per row for matrices)."""
    if p.shape != q.shape:
        raise ShapeError(f"sq_euclidean: shapes {p.shape} and {q.shape} differ")
    d = p - q
    return (d * d).sum(axis=p.ndim - 1)


def _weighted(p: Tensor, q: Tensor, w: LossWeights) -> Tensor:
    if p.shape != q.shape:
        raise ShapeError(f"alignment loss: shapes {p.shape} and {q.shape} differ")
    total = None
    if w.lambda1:
        total = w.lambda1 * kl_embedding(p, q)
    if w.lambda2:
        sq = w.lambda2 * sq_euclidean(p, q)
        total = sq if total is None else total + sq
    return Tensor(np.zeros(p.shape[:-1])) if total is None else total


def latent_loss(p_cls: Tensor, g_l: Tensor, w: LossWeights) -> Tensor:
    """Pulls the pathology class token toward the projected genomic embedding."""
    return _weighted(p_cls, g_l, w)


def translation_loss(g_l: Tensor, g_hat: Tensor, w: LossWeights) -> Tensor:
    """Pulls the decoder output toward the projected genomic embedding."""
    return _weighted(g_l, g_hat, w)


def total_loss(cox, latent, translation, w: LossWeights) -> LossBundle:
    cox, latent, translation = (x if isinstance(x, Tensor) else Tensor(x) for x in (cox, latent, translation))
    total = cox + w.alpha * (latent + translation) if w.alpha else cox + 0.0
    return LossBundle(cox, latent, translation, total)
