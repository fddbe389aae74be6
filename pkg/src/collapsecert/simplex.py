"""Exact probability-simplex arithmetic for the collapse certificate.

Everything here is pure and deterministic: reductions use fixed-order
compensated (Kahan) summation so repeated runs produce bit-identical reports.
KL divergences are always evaluated against log-probabilities, never against
exponentiated values, because near-one-hot assignments underflow in the
probability domain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InternalConsistencyError, InvalidInput, ShapeError

DEFAULT_TAU = 0.1

# Tolerances of the simplex contracts.
_SUM_TOL = 1e-9
_QLOG_TOL = 1e-6
_NEG_KL_TOL = 1e-9


def kahan_sum(values, axis: int | None = None):
    """Compensated summation in a fixed order.

    1-D input with axis=None reduces to a float; 2-D input with axis 0 or 1
    reduces along that axis with a vector accumulator, iterating the reduced
    axis in index order.
    """
    x = np.asarray(values, dtype=np.float64)
    if axis is None:
        if x.ndim != 1:
            raise ShapeError(f"kahan_sum without axis expects 1-D, got {x.shape}")
        total = 0.0
        comp = 0.0
        for v in x.tolist():
            y = v - comp
            t = total + y
            comp = (t - total) - y
            total = t
        return total
    if x.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"kahan_sum axis reduction expects 2-D, got {x.shape}")
    if axis == 1:
        x = x.T
    total = np.zeros(x.shape[1], dtype=np.float64)
    comp = np.zeros(x.shape[1], dtype=np.float64)
    for i in range(x.shape[0]):
        y = x[i] - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


def kahan_mean(values, axis: int | None = None):
    x = np.asarray(values, dtype=np.float64)
    total = kahan_sum(x, axis=axis)  # validates dimensionality
    n = x.shape[0] if axis in (0, None) else x.shape[axis]
    return total / n


def check_simplex(p, name: str = "p") -> np.ndarray:
    """Validate a length-K probability vector; returns it as float64."""
    v = np.asarray(p, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] < 1:
        raise InvalidInput(f"{name} must be a 1-D probability vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidInput(f"{name} has non-finite entries")
    if np.any(v < 0.0):
        raise InvalidInput(f"{name} has negative entries")
    if abs(kahan_sum(v) - 1.0) > _SUM_TOL:
        raise InvalidInput(f"{name} does not sum to 1 within {_SUM_TOL}")
    return v


@dataclass(frozen=True)
class AssignmentMatrix:
    """N rows on the K-simplex: teacher targets or student assignments."""

    rows: np.ndarray

    def __post_init__(self):
        r = np.ascontiguousarray(np.asarray(self.rows, dtype=np.float64))
        if r.ndim != 2:
            raise InvalidInput(f"assignment matrix must be 2-D, got shape {r.shape}")
        if r.shape[0] < 1 or r.shape[1] < 2:
            raise InvalidInput(f"assignment matrix needs N >= 1, K >= 2, got {r.shape}")
        if not np.all(np.isfinite(r)):
            raise InvalidInput("assignment matrix has non-finite entries")
        if np.any(r < 0.0):
            raise InvalidInput("assignment matrix has negative entries")
        sums = kahan_sum(r, axis=1)
        if np.max(np.abs(sums - 1.0)) > _SUM_TOL:
            raise InvalidInput(f"assignment rows must sum to 1 within {_SUM_TOL}")
        object.__setattr__(self, "rows", r)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def k(self) -> int:
        return self.rows.shape[1]


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax of a length-K logit vector."""
    l = np.asarray(logits, dtype=np.float64)
    if l.ndim != 1 or l.shape[0] < 2:
        raise InvalidInput(f"softmax expects a 1-D vector with K >= 2, got shape {l.shape}")
    if not np.all(np.isfinite(l)):
        raise InvalidInput("softmax input has non-finite entries")
    shifted = l - np.max(l)
    e = np.exp(shifted)
    return e / kahan_sum(e)


def log_softmax(logits) -> np.ndarray:
    """log softmax(l)_c = l_c - max(l) - log sum exp(l - max(l))."""
    l = np.asarray(logits, dtype=np.float64)
    if l.ndim != 1 or l.shape[0] < 2:
        raise InvalidInput(f"log_softmax expects a 1-D vector with K >= 2, got shape {l.shape}")
    if not np.all(np.isfinite(l)):
        raise InvalidInput("log_softmax input has non-finite entries")
    shifted = l - np.max(l)
    return shifted - math.log(kahan_sum(np.exp(shifted)))


def _check_log_prob_rows(q_log: np.ndarray, name: str) -> None:
    """Rows must logsumexp to 0 within the contract tolerance."""
    m = np.max(q_log, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        lse = np.log(np.sum(np.exp(q_log - m), axis=-1)) + m[..., 0]
    if np.max(np.abs(lse)) > _QLOG_TOL:
        raise InvalidInput(f"{name} is not a valid log-probability vector (logsumexp != 0)")


def _kl_terms(p: np.ndarray, q_log: np.ndarray) -> np.ndarray:
    """Per-class contributions p*(ln p - q_log) with the 0*ln 0 = 0 convention.

    Entries where p > 0 and q_log = -inf come out as +inf, the documented
    sentinel for an absolutely-discontinuous pair.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * (np.log(np.where(p > 0.0, p, 1.0)) - q_log), 0.0)
    return terms


def _finish_kl(total: float) -> float:
    if total < 0.0:
        if total < -_NEG_KL_TOL:
            raise InternalConsistencyError(f"KL evaluated to {total}, below -{_NEG_KL_TOL}")
        return 0.0
    return total


def kl(p, q_log) -> float:
    """KL(p || q) in nats, with q given as a log-probability vector.

    Tiny negative round-off (within 1e-9) is clamped to zero; anything more
    negative raises InternalConsistencyError. Mass of p on a q_log = -inf
    class yields +inf.
    """
    pv = check_simplex(p, name="p")
    ql = np.asarray(q_log, dtype=np.float64)
    if ql.shape != pv.shape:
        raise ShapeError(f"kl shapes differ: p {pv.shape} vs q_log {ql.shape}")
    if np.any(np.isnan(ql)) or np.any(ql == np.inf):
        raise InvalidInput("q_log must be finite or -inf")
    _check_log_prob_rows(ql, "q_log")
    terms = _kl_terms(pv, ql)
    if np.any(np.isinf(terms)):
        return math.inf
    return _finish_kl(kahan_sum(terms))


def kl_rows(rows: np.ndarray, q_log_rows: np.ndarray) -> np.ndarray:
    """Row-wise KL(rows_i || exp(q_log_rows_i)); inputs already validated."""
    terms = _kl_terms(rows, q_log_rows)
    inf_mask = np.any(np.isinf(terms), axis=1)
    safe = np.where(np.isinf(terms), 0.0, terms)
    out = kahan_sum(safe, axis=1)
    # the round-off clamp only applies to rows without the +inf sentinel
    if np.any((out < -_NEG_KL_TOL) & ~inf_mask):
        raise InternalConsistencyError("row KL evaluated below the round-off clamp")
    out = np.where(out < 0.0, 0.0, out)
    return np.where(inf_mask, math.inf, out)


def mean_assignment(m: AssignmentMatrix) -> np.ndarray:
    """Column mean of the assignment rows (compensated, fixed order)."""
    return kahan_sum(m.rows, axis=0) / m.n


def entropy(p) -> float:
    """Shannon entropy -sum p ln p in nats, 0*ln 0 = 0."""
    pv = check_simplex(p, name="p")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pv > 0.0, -pv * np.log(np.where(pv > 0.0, pv, 1.0)), 0.0)
    return max(kahan_sum(terms), 0.0)


def _log_or_neg_inf(v: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(v)


def teacher_mi(m: AssignmentMatrix) -> float:
    """Mutual information of the assignment family: mean_x KL(T_x || T_bar)."""
    log_mean = _log_or_neg_inf(mean_assignment(m))
    per_row = kl_rows(m.rows, np.broadcast_to(log_mean, m.rows.shape))
    if np.any(np.isinf(per_row)):
        return math.inf
    return _finish_kl(kahan_mean(per_row))


def constant_baseline_cost(m: AssignmentMatrix, alpha) -> float:
    """mean_x KL(T_x || alpha), computed directly (not via the decomposition).

    Returns +inf if alpha has a zero where some row carries mass.
    """
    av = check_simplex(alpha, name="alpha")
    if av.shape[0] != m.k:
        raise ShapeError(f"alpha has {av.shape[0]} classes, rows have {m.k}")
    log_alpha = _log_or_neg_inf(av)
    per_row = kl_rows(m.rows, np.broadcast_to(log_alpha, m.rows.shape))
    if np.any(np.isinf(per_row)):
        return math.inf
    return _finish_kl(kahan_mean(per_row))


def decomposition_residual(m: AssignmentMatrix, alpha) -> float:
    """|E_x KL(T_x||alpha) - I_T - KL(T_bar||alpha)| for strictly positive alpha.

    The two routes are independent computations; the residual is a pure
    floating-point identity check and must stay below 1e-10.
    """
    av = check_simplex(alpha, name="alpha")
    if np.any(av <= 0.0):
        raise InvalidInput("alpha must be strictly positive for the residual check")
    direct = constant_baseline_cost(m, av)
    mi = teacher_mi(m)
    gap = kl(mean_assignment(m), np.log(av))
    return abs(direct - (mi + gap))


@dataclass(frozen=True)
class MarginReport:
    """Certificate margin arithmetic: bare margin and the buffered margin."""

    i_t: float
    l_align_raw: float
    bare_margin: float
    tau: float
    g_tau: float


def margin(i_t: float, l_align_raw: float, tau: float = DEFAULT_TAU) -> MarginReport:
    """Assemble a MarginReport from the teacher threshold and alignment loss."""
    if not (tau >= 0.0):
        raise InvalidInput(f"tau must be >= 0, got {tau}")
    bare = i_t - l_align_raw
    return MarginReport(
        i_t=float(i_t),
        l_align_raw=float(l_align_raw),
        bare_margin=bare,
        tau=float(tau),
        g_tau=bare - tau,
    )
