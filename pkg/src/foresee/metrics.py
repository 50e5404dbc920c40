"""Concordance, Kaplan-Meier, median-risk stratification and the log-rank test."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import UndefinedMetricError, ValidationError


def _arrays(risk, time, event):
    risk = np.asarray(risk, dtype=float)
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=int)
    if not (risk.shape == time.shape == event.shape) or risk.ndim != 1:
        raise ValidationError("risk, time and event must be equal-length vectors")
    return risk, time, event


def c_index(risk, time, event) -> float:
    """Harrell's concordance index.

    A pair (i, j) is comparable when ``t_i < t_j`` and patient i had the
    event. It is concordant when ``risk_i > risk_j``; risk ties count 1/2.
    """
    risk, time, event = _arrays(risk, time, event)
    comparable = (time[:, None] < time[None, :]) & (event[:, None] == 1)
    n_pairs = comparable.sum()
    if n_pairs == 0:
        raise UndefinedMetricError("C-index undefined: no comparable pairs")
    diff = risk[:, None] - risk[None, :]
    score = np.where(diff > 0, 1.0, np.where(diff == 0, 0.5, 0.0))
    return float(score[comparable].sum() / n_pairs)


@dataclass
class KmCurve:
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def at(self, t: float) -> float:
        """S(t) as a right-continuous step function, S(t) = 1 before the first event."""
        k = np.searchsorted(self.times, t, side="right")
        return 1.0 if k == 0 else float(self.survival[k - 1])


def km_curve(time, event) -> KmCurve:
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=int)
    if time.size == 0:
        raise ValidationError("Kaplan-Meier needs at least one subject")
    event_times = np.unique(time[event == 1])
    s, surv, at_risk, deaths = 1.0, [], [], []
    for t in event_times:
        n = int((time >= t).sum())
        d = int(((time == t) & (event == 1)).sum())
        s *= 1.0 - d / n
        surv.append(s)
        at_risk.append(n)
        deaths.append(d)
    return KmCurve(event_times, np.array(surv), np.array(at_risk, dtype=int), np.array(deaths, dtype=int))


@dataclass
class RiskSplit:
    low: np.ndarray
    high: np.ndarray
    threshold: float

    @property
    def degenerate(self) -> bool:
        return len(self.low) == 0 or len(self.high) == 0


def median_risk_split(risk) -> RiskSplit:
    """Patients above the median risk are "high"; ties at the median go to "low"."""
    risk = np.asarray(risk, dtype=float)
    if risk.size < 2:
        raise ValidationError("median split needs at least two patients")
    med = float(np.median(risk))
    high = risk > med
    return RiskSplit(np.nonzero(~high)[0], np.nonzero(high)[0], med)


def chi2_sf_1dof(x: float) -> float:
    """Upper tail of a chi-square with one degree of freedom."""
    if x <= 0:
        return 1.0
    return math.erfc(math.sqrt(x / 2.0))


def log_rank_p(group_a, group_b) -> tuple[float, float]:
    """Two-sample log-rank test; each group is a ``(times, events)`` pair.

    Returns ``(chi-square statistic, p-value)`` with one degree of freedom.
    """
    ta, ea = (np.asarray(v) for v in group_a)
    tb, eb = (np.asarray(v) for v in group_b)
    if ta.size == 0 or tb.size == 0:
        raise ValidationError("log-rank test needs two non-empty groups")
    time = np.concatenate([ta, tb]).astype(float)
    event = np.concatenate([ea, eb]).astype(int)
    in_a = np.concatenate([np.ones(ta.size, bool), np.zeros(tb.size, bool)])
    if event.sum() == 0:
        raise UndefinedMetricError("log-rank test undefined: no events")
    observed_minus_expected, variance = 0.0, 0.0
    for t in np.unique(time[event == 1]):
        risk = time >= t
        n, n_a = risk.sum(), (risk & in_a).sum()
        dead = (time == t) & (event == 1)
        d, d_a = dead.sum(), (dead & in_a).sum()
        observed_minus_expected += d_a - d * n_a / n
        if n > 1:
            variance += d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1)
    if variance == 0:
        return 0.0, 1.0
    stat = observed_minus_expected**2 / variance
    return float(stat), chi2_sf_1dof(stat)


def write_km_csv(curves: dict, path) -> None:
    """One file with columns ``time,survival,at_risk,group``; each group starts at (0, 1)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "survival", "at_risk", "group"])
        for group, (curve, n_total) in curves.items():
            w.writerow([0.0, 1.0, n_total, group])
            for t, s, n in zip(curve.times, curve.survival, curve.at_risk):
                w.writerow([repr(float(t)), repr(float(s)), int(n), group])
