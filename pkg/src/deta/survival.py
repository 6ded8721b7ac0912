"""Discrete-time survival maths and evaluation statistics.

Time bins are 1-based (``1..K``) throughout and ``censor == 1`` marks an
observed event.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_FLOOR = 1e-12


@dataclass
class SurvivalRecord:
    time_bin: int
    censor: int
    hazard: np.ndarray

    def __post_init__(self):
        self.hazard = np.asarray(self.hazard, dtype=np.float64)
        if not 1 <= self.time_bin <= len(self.hazard):
            raise ValueError(f"time_bin {self.time_bin} outside [1, {len(self.hazard)}]")
        if self.censor not in (0, 1):
            raise ValueError(f"censor must be 0 or 1, got {self.censor}")


def discretize_times(times, censors, k_bins: int) -> np.ndarray:
    """Map continuous times to bins 1..k_bins using quantiles of the event times.

    Bin j covers ``(q_{j-1}, q_j]`` where ``q_j`` is the j/k_bins quantile of
    the uncensored times, so ties collapse to the lowest bin they reach.
    """
    t = np.asarray(times, dtype=np.float64)
    c = np.asarray(censors)
    if k_bins < 2:
        raise ValueError("k_bins must be at least 2")
    events = t[c == 1]
    if events.size == 0:
        raise ValueError("cannot discretise: every time is censored")
    edges = np.quantile(events, np.arange(1, k_bins) / k_bins)
    return np.searchsorted(edges, t, side="left") + 1


def survival_function(hazard) -> np.ndarray:
    """S(y) = prod_{j<=y} (1 - h(j)), along the last axis."""
    return np.cumprod(1.0 - np.asarray(hazard, dtype=np.float64), axis=-1)


def risk_score(hazard) -> np.ndarray | float:
    """Negative expected number of survived bins; larger means riskier."""
    out = -survival_function(hazard).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def surv_nll_array(hazards, time_bins, censors) -> float:
    """Survival negative log-likelihood, summed over records (numpy route)."""
    h = np.atleast_2d(np.asarray(hazards, dtype=np.float64))
    y = np.asarray(time_bins, dtype=np.int64).reshape(-1)
    c = np.asarray(censors, dtype=np.float64).reshape(-1)
    if h.shape[0] == 0:
        raise ValueError("surv_nll of an empty record list")
    k = h.shape[1]
    s = survival_function(h)
    rows = np.arange(len(y))
    s_y = np.maximum(s[rows, y - 1], PROB_FLOOR)
    h_y = np.maximum(h[rows, y - 1], PROB_FLOOR)
    s_next = np.maximum(s[rows, np.minimum(y + 1, k) - 1], PROB_FLOOR)
    return float(-(c * (np.log(s_y) + np.log(h_y))).sum() - ((1 - c) * np.log(s_next)).sum())


def surv_nll(records: list[SurvivalRecord]) -> float:
    if not records:
        raise ValueError("surv_nll of an empty record list")
    return surv_nll_array(
        [r.hazard for r in records], [r.time_bin for r in records], [r.censor for r in records]
    )


def surv_nll_tensor(hazards: Tensor, time_bins, censors, reduction: str = "sum") -> Tensor:
    """Differentiable survival NLL for a B x K hazard tensor.

    Uncensored rows contribute ``-log S(y) - log h(y)``; censored rows
    ``-log S(min(y+1, K))``.  ``log S`` is accumulated as a sum of clamped
    ``log(1 - h(j))`` terms.
    """
    b, k = hazards.shape
    if b == 0:
        raise ValueError("surv_nll of an empty record list")
    y = np.asarray(time_bins, dtype=np.int64).reshape(-1)
    c = np.asarray(censors, dtype=np.float64).reshape(-1)
    if len(y) != b or len(c) != b:
        raise ValueError(f"labels for {len(y)} records vs {b} hazard rows")
    if np.any(y < 1) or np.any(y > k):
        raise ValueError(f"time bins must lie in [1, {k}]")
    log_h = ad.log(ad.clip(hazards, PROB_FLOOR, 1.0))
    log_1mh = ad.log(ad.clip(ad.add(ad.neg(hazards), Tensor(np.ones((b, k)))), PROB_FLOOR, 1.0))
    cumulative = np.triu(np.ones((k, k)))  # [j, y] = 1 when j <= y
    log_s = ad.matmul(log_1mh, Tensor(cumulative))
    pick_event = np.zeros((b, k))
    pick_censor = np.zeros((b, k))
    rows = np.arange(b)
    pick_event[rows, y - 1] = c
    pick_censor[rows, np.minimum(y + 1, k) - 1] = 1.0 - c
    ll = ad.add(
        ad.sum(ad.mul(ad.add(log_s, log_h), Tensor(pick_event))),
        ad.sum(ad.mul(log_s, Tensor(pick_censor))),
    )
    loss = ad.neg(ll)
    if reduction == "mean":
        return ad.scale(loss, 1.0 / b)
    return loss


def c_index(risks, time_bins, censors) -> float:
    """Harrell's concordance: over pairs with T_i < T_j and an event at i,
    the share where risk_i > risk_j, counting risk ties as one half."""
    r = np.asarray(risks, dtype=np.float64).reshape(-1)
    t = np.asarray(time_bins, dtype=np.float64).reshape(-1)
    c = np.asarray(censors).reshape(-1)
    if not (len(r) == len(t) == len(c)):
        raise ValueError("risks, times and censors differ in length")
    if len(r) < 2:
        raise ValueError("c_index needs at least two records")
    comparable = (t[:, None] < t[None, :]) & (c[:, None] == 1)
    n_comp = comparable.sum()
    if n_comp == 0:
        raise ValueError("no comparable pairs: need an observed event before a later time")
    diff = r[:, None] - r[None, :]
    score = np.where(diff > 0, 1.0, np.where(diff == 0, 0.5, 0.0))
    return float((score * comparable).sum() / n_comp)


def kaplan_meier(times, censors) -> tuple[np.ndarray, np.ndarray]:
    """Product-limit estimate evaluated at every distinct observed time."""
    t = np.asarray(times, dtype=np.float64).reshape(-1)
    c = np.asarray(censors).reshape(-1)
    if t.size == 0:
        raise ValueError("kaplan_meier of no records")
    grid = np.unique(t)
    surv = np.empty(len(grid))
    s = 1.0
    at_risk = len(t)
    for i, u in enumerate(grid):
        here = t == u
        d = int((c[here] == 1).sum())
        if d:
            s *= 1.0 - d / at_risk
        surv[i] = s
        at_risk -= int(here.sum())
    return grid, surv


def chi2_sf_1df(x: float) -> float:
    """Upper tail of the chi-square distribution with one degree of freedom."""
    if x <= 0:
        return 1.0
    return math.erfc(math.sqrt(x / 2.0))


def log_rank(times_a, censors_a, times_b, censors_b) -> tuple[float, float]:
    """Two-sample log-rank test; returns (chi-square statistic, p-value)."""
    ta = np.asarray(times_a, dtype=np.float64).reshape(-1)
    tb = np.asarray(times_b, dtype=np.float64).reshape(-1)
    ca = np.asarray(censors_a).reshape(-1)
    cb = np.asarray(censors_b).reshape(-1)
    if ta.size == 0 or tb.size == 0:
        raise ValueError("log_rank needs two non-empty groups")
    if (ca == 1).sum() + (cb == 1).sum() == 0:
        raise ValueError("log_rank needs at least one observed event")
    t = np.concatenate([ta, tb])
    c = np.concatenate([ca, cb])
    in_a = np.concatenate([np.ones(len(ta), bool), np.zeros(len(tb), bool)])
    o_minus_e = 0.0
    var = 0.0
    for u in np.unique(t[c == 1]):
        risk = t >= u
        n = risk.sum()
        n_a = (risk & in_a).sum()
        events = (t == u) & (c == 1)
        d = events.sum()
        d_a = (events & in_a).sum()
        o_minus_e += d_a - d * n_a / n
        if n > 1:
            var += d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1)
    if var <= 0:
        return 0.0, 1.0
    stat = o_minus_e**2 / var
    return float(stat), chi2_sf_1df(stat)
