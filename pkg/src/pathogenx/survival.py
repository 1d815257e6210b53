"""Survival evaluation: C-index, Kaplan-Meier, log-rank, median stratification,
and the per-dimension feature correlation summary."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

KM_COLUMNS = ("time", "survival", "at_risk", "events", "group")


class NoComparablePairsError(ValueError):
    pass


@dataclass(frozen=True)
class SurvivalOutcome:
    time: float
    event: int

    def __post_init__(self):
        if not self.time > 0:
            raise ValueError(f"survival time must be positive, got {self.time}")
        if self.event not in (0, 1):
            raise ValueError(f"event must be 0 or 1, got {self.event}")


@dataclass
class KMCurve:
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def __len__(self) -> int:
        return len(self.times)

    def at(self, t: float) -> float:
        """S(t) as a right-continuous step function."""
        idx = np.searchsorted(self.times, t, side="right")
        return 1.0 if idx == 0 else float(self.survival[idx - 1])


def _arrays(times, events) -> tuple[np.ndarray, np.ndarray]:
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    if times.shape != events.shape or times.ndim != 1:
        raise ValueError(f"times {times.shape} and events {events.shape} must be equal-length vectors")
    return times, events


def comparable_pairs(times, events) -> np.ndarray:
    """Boolean matrix: entry (i, j) is True when i is known to fail before j."""
    t, e = _arrays(times, events)
    earlier = t[:, None] < t[None, :]
    tied = (t[:, None] == t[None, :]) & ~e[None, :]
    return e[:, None] & (earlier | tied)


def c_index(risks, times, events) -> float:
    """Harrell's concordance index; tied risks count one half."""
    r = np.asarray(risks, dtype=np.float64)
    pairs = comparable_pairs(times, events)
    if r.shape != pairs.shape[:1]:
        raise ValueError(f"{r.size} risks for {pairs.shape[0]} subjects")
    n_pairs = int(pairs.sum())
    if n_pairs == 0:
        raise NoComparablePairsError("c_index: no comparable pairs")
    hi = (r[:, None] > r[None, :]) & pairs
    tie = (r[:, None] == r[None, :]) & pairs
    return float((hi.sum() + 0.5 * tie.sum()) / n_pairs)


def km_estimate(times, events) -> KMCurve:
    t, e = _arrays(times, events)
    if t.size == 0:
        raise ValueError("km_estimate: no subjects")
    event_times = np.unique(t[e])
    at_risk = np.array([(t >= u).sum() for u in event_times], dtype=np.int64)
    deaths = np.array([((t == u) & e).sum() for u in event_times], dtype=np.int64)
    surv = np.cumprod(1.0 - deaths / at_risk) if event_times.size else np.zeros(0)
    return KMCurve(event_times, surv, at_risk, deaths)


def chi2_sf_1df(x: float) -> float:
    """Upper tail of the chi-square distribution with one degree of freedom."""
    if x < 0:
        raise ValueError(f"chi-square statistic must be nonnegative, got {x}")
    return math.erfc(math.sqrt(x / 2.0))


@dataclass(frozen=True)
class LogRankResult:
    chi2: float
    p: float


def log_rank(times_a, events_a, times_b, events_b) -> LogRankResult:
    ta, ea = _arrays(times_a, events_a)
    tb, eb = _arrays(times_b, events_b)
    if ta.size == 0 or tb.size == 0:
        raise ValueError("log_rank: both groups must be nonempty")
    if not (ea.any() or eb.any()):
        raise ValueError("log_rank: no events in either group")
    observed_minus_expected = 0.0
    variance = 0.0
    for u in np.unique(np.concatenate([ta[ea], tb[eb]])):
        n1 = float((ta >= u).sum())
        n2 = float((tb >= u).sum())
        d1 = float(((ta == u) & ea).sum())
        d = d1 + float(((tb == u) & eb).sum())
        n = n1 + n2
        observed_minus_expected += d1 - d * n1 / n
        if n > 1:
            variance += d * (n1 / n) * (n2 / n) * (n - d) / (n - 1)
    if variance <= 0:
        return LogRankResult(0.0, 1.0)
    chi2 = float(observed_minus_expected**2 / variance)
    return LogRankResult(chi2, chi2_sf_1df(chi2))


def stratify_by_median(risks) -> np.ndarray:
    """Label each subject ``"high"`` if its risk exceeds the (lower) median."""
    r = np.asarray(risks, dtype=np.float64)
    if r.size == 0:
        raise ValueError("stratify_by_median: no risks")
    median = np.sort(r)[(r.size - 1) // 2]
    return np.where(r > median, "high", "low")


@dataclass
class CorrelationSummary:
    per_dim: np.ndarray
    mean_abs: float


def correlation_report(a, b) -> CorrelationSummary:
    """Column-wise Pearson r between two n x D feature matrices."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape != b.shape:
        raise ValueError(f"correlation_report: shapes {a.shape} and {b.shape} must match")
    if a.shape[0] < 3:
        raise ValueError("correlation_report: need at least 3 samples")
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    denom = np.sqrt((ac * ac).sum(axis=0) * (bc * bc).sum(axis=0))
    num = (ac * bc).sum(axis=0)
    r = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
    return CorrelationSummary(r, float(np.abs(r).mean()))


# ---------------------------------------------------------------------------
# KM curve CSV


def write_km_csv(
    path,
    curves: Mapping[str, KMCurve],
    logrank: LogRankResult | None = None,
    header: Iterable[str] = (),
) -> None:
    lines = [f"# {h}" for h in header]
    lines.append(",".join(KM_COLUMNS))
    for group, curve in curves.items():
        for t, s, n, d in zip(curve.times, curve.survival, curve.at_risk, curve.events):
            lines.append(f"{float(t)!r},{float(s)!r},{int(n)},{int(d)},{group}")
    if logrank is not None:
        lines.append("# chi2,p")
        lines.append(f"# {logrank.chi2!r},{logrank.p!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_km_csv(path) -> tuple[dict[str, KMCurve], LogRankResult | None]:
    rows: dict[str, list[tuple[float, float, int, int]]] = {}
    logrank = None
    lines = Path(path).read_text().splitlines()
    seen_header = False
    for i, line in enumerate(lines):
        if line.startswith("# chi2,p") and i + 1 < len(lines):
            chi2, p = lines[i + 1].lstrip("# ").split(",")
            logrank = LogRankResult(float(chi2), float(p))
            continue
        if not line or line.startswith("#"):
            continue
        if not seen_header:
            if tuple(line.split(",")) != KM_COLUMNS:
                raise ValueError(f"{path}: unexpected KM header {line!r}")
            seen_header = True
            continue
        t, s, n, d, group = line.split(",")
        rows.setdefault(group, []).append((float(t), float(s), int(n), int(d)))
    curves = {}
    for group, vals in rows.items():
        t, s, n, d = (np.array(c) for c in zip(*vals))
        curves[group] = KMCurve(t, s, n.astype(np.int64), d.astype(np.int64))
    return curves, logrank
