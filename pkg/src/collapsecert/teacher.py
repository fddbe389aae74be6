"""Diagonal-covariance GMM teachers: fitting, feasibility scoring, selection,
and fixed-target caching.

All responsibilities are computed in the log domain; exact zeros in cached
target rows are legitimate (underflowed responsibilities). Fitting is
deterministic given (features, k, seed).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CacheMismatch, FitDegenerate, InvalidInput, SearchFailed
from .jsonio import read_json, write_json
from .rng import Xoshiro256StarStar
from .simplex import AssignmentMatrix, check_simplex, kahan_mean, kl, mean_assignment, teacher_mi

_LOG_2PI = math.log(2.0 * math.pi)

TEACHER_FILE_VERSION = 1
CACHE_FILE_VERSION = 1


@dataclass
class GmmTeacher:
    k: int
    d: int
    weights: np.ndarray  # (k,) on the simplex
    means: np.ndarray  # (k, d)
    variances: np.ndarray  # (k, d), floored at var_floor
    fit_seed: int
    loglik: float
    loglik_history: list[float] = field(default_factory=list, repr=False, compare=False)
    reinit_count: int = field(default=0, repr=False, compare=False)


@dataclass
class EmConfig:
    max_iters: int = 200
    tol: float = 1e-6  # nats per sample
    var_floor: float = 1e-6
    seed: int = 0


def kmeanspp_init(features: np.ndarray, k: int, seed: int) -> np.ndarray:
    """k distinct rows chosen with k-means++ D^2 weighting, seeded."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if k < 2 or n < k:
        raise InvalidInput(f"kmeans++ needs N >= k >= 2, got N={n}, k={k}")
    rng = Xoshiro256StarStar(seed)
    chosen = [rng.integer(n)]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        d2[chosen] = 0.0
        total = float(d2.sum())
        if total > 0.0:
            idx = rng.choice_weighted(d2)
        else:  # all remaining points coincide with a center: take first unchosen
            taken = set(chosen)
            idx = next(i for i in range(n) if i not in taken)
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return x[chosen].copy()


def _log_joint(
    x: np.ndarray, weights: np.ndarray, means: np.ndarray, variances: np.ndarray
) -> np.ndarray:
    """log w_c + log N(x_n; mu_c, diag var_c), shape (n, k)."""
    n = x.shape[0]
    k = means.shape[0]
    out = np.empty((n, k), dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    for c in range(k):
        diff = x - means[c]
        quad = np.sum(diff * diff / variances[c], axis=1)
        log_det = np.sum(np.log(variances[c]))
        out[:, c] = log_w[c] - 0.5 * (quad + log_det + x.shape[1] * _LOG_2PI)
    return out


def _posteriors(log_joint: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (responsibilities, log_responsibilities, per-sample loglik)."""
    m = log_joint.max(axis=1, keepdims=True)
    shifted = log_joint - m
    norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_r = shifted - norm
    return np.exp(log_r), log_r, (norm + m)[:, 0]


def em_fit(
    features: np.ndarray,
    k: int,
    config: EmConfig | None = None,
    init_means: np.ndarray | None = None,
) -> GmmTeacher:
    """Fit a diagonal-covariance GMM by EM in the log domain.

    Stops when the mean log-likelihood improves by less than config.tol or at
    max_iters. A component whose responsibility mass drops below 1e-12 is
    reinitialized at the worst-explained sample; more than 3k reinits raises
    FitDegenerate. init_means overrides the k-means++ initialization.
    """
    cfg = config or EmConfig()
    x = np.asarray(features, dtype=np.float64)
    n, d = x.shape
    if n < k or k < 1 or d < 1:
        raise InvalidInput(f"em_fit needs N >= k >= 1 and D >= 1, got N={n}, k={k}, D={d}")

    global_var = np.maximum(x.var(axis=0), cfg.var_floor)
    if init_means is not None:
        means = np.asarray(init_means, dtype=np.float64).copy()
        if means.shape != (k, d):
            raise InvalidInput(f"init_means must be {(k, d)}, got {means.shape}")
    elif k == 1:
        means = x.mean(axis=0, keepdims=True).copy()
    else:
        means = kmeanspp_init(x, k, cfg.seed)
    variances = np.tile(global_var, (k, 1))
    weights = np.full(k, 1.0 / k)

    history: list[float] = []
    reinits = 0
    prev_ll = -math.inf
    for _ in range(cfg.max_iters):
        log_joint = _log_joint(x, weights, means, variances)
        resp, _, sample_ll = _posteriors(log_joint)
        ll = float(kahan_mean(sample_ll))
        history.append(ll)

        mass = resp.sum(axis=0)
        empty = np.where(mass < 1e-12)[0]
        if empty.size:
            reinits += empty.size
            if reinits > 3 * k:
                raise FitDegenerate(f"{reinits} component reinitializations (budget {3 * k})")
            worst = int(np.argmin(sample_ll))
            for c in empty:
                means[c] = x[worst]
                variances[c] = global_var
                weights[c] = 1.0 / n
            weights = weights / weights.sum()
            prev_ll = -math.inf  # restart convergence tracking after surgery
            continue

        weights = mass / n
        means = (resp.T @ x) / mass[:, None]
        for c in range(k):
            diff = x - means[c]
            variances[c] = np.maximum((resp[:, c][:, None] * diff * diff).sum(axis=0) / mass[c],
                                      cfg.var_floor)
        if ll - prev_ll < cfg.tol:
            break
        prev_ll = ll

    final_ll = float(kahan_mean(_posteriors(_log_joint(x, weights, means, variances))[2]))
    return GmmTeacher(
        k=k,
        d=d,
        weights=weights,
        means=means,
        variances=variances,
        fit_seed=cfg.seed,
        loglik=final_ll,
        loglik_history=history,
        reinit_count=reinits,
    )


def assign(teacher: GmmTeacher, feature: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior responsibilities for one feature vector: (probs, log_probs)."""
    probs, log_probs = assign_rows(teacher, np.asarray(feature, dtype=np.float64)[None, :])
    return probs[0], log_probs[0]


def assign_rows(teacher: GmmTeacher, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != teacher.d:
        raise InvalidInput(f"features must be N x {teacher.d}, got {x.shape}")
    log_joint = _log_joint(x, teacher.weights, teacher.means, teacher.variances)
    probs, log_probs, _ = _posteriors(log_joint)
    return probs, log_probs


# -- feasibility diagnostics ----------------------------------------------------


@dataclass
class FeasibilityThresholds:
    """Quality filters for teacher selection; all configurable. A failed
    filter flags a weak teacher, it does not invalidate the certificate
    arithmetic."""

    i_t_min: float = 0.1
    margin_threshold: float = 0.5
    high_margin_fraction_min: float = 0.5
    soft_usage_kl_max_factor: float = 0.5  # of ln K
    min_mass_factor: float = 0.5  # of 1/K


@dataclass
class TeacherDiagnostics:
    i_t: float
    mean_top1_margin: float
    high_margin_fraction: float
    hard_balance_kl: float
    soft_usage_kl: float
    min_component_mass: float
    feasible: bool
    failed_criteria: list[str]

    def to_dict(self) -> dict:
        return {
            "i_t": self.i_t,
            "mean_top1_margin": self.mean_top1_margin,
            "high_margin_fraction": self.high_margin_fraction,
            "hard_balance_kl": self.hard_balance_kl,
            "soft_usage_kl": self.soft_usage_kl,
            "min_component_mass": self.min_component_mass,
            "feasible": self.feasible,
            "failed_criteria": list(self.failed_criteria),
        }


def diagnostics(
    rows: AssignmentMatrix, thresholds: FeasibilityThresholds | None = None
) -> TeacherDiagnostics:
    """Finite-sample teacher quality scores plus the feasibility verdict."""
    th = thresholds or FeasibilityThresholds()
    r = rows.rows
    k = rows.k
    i_t = teacher_mi(rows)

    top2 = np.partition(r, k - 2, axis=1)[:, -2:]
    margins = top2[:, 1] - top2[:, 0]
    mean_margin = float(kahan_mean(margins))
    high_fraction = float(kahan_mean((margins > th.margin_threshold).astype(np.float64)))

    hard_hist = np.bincount(np.argmax(r, axis=1), minlength=k).astype(np.float64) / rows.n
    uniform_log = np.full(k, -math.log(k))
    hard_balance = kl(hard_hist, uniform_log)
    soft_mean = mean_assignment(rows)
    soft_usage = kl(soft_mean, uniform_log)
    min_mass = float(np.min(soft_mean))

    failed: list[str] = []
    if not (i_t >= th.i_t_min):
        failed.append("teacher_mi")
    if not (high_fraction >= th.high_margin_fraction_min):
        failed.append("high_margin_fraction")
    if not (soft_usage <= th.soft_usage_kl_max_factor * math.log(k)):
        failed.append("soft_usage_kl")
    if not (min_mass >= th.min_mass_factor / k):
        failed.append("min_component_mass")

    return TeacherDiagnostics(
        i_t=i_t,
        mean_top1_margin=mean_margin,
        high_margin_fraction=high_fraction,
        hard_balance_kl=hard_balance,
        soft_usage_kl=soft_usage,
        min_component_mass=min_mass,
        feasible=not failed,
        failed_criteria=failed,
    )


def search(
    features: np.ndarray,
    candidate_ks: list[int],
    seeds: list[int],
    thresholds: FeasibilityThresholds | None = None,
    em: EmConfig | None = None,
) -> tuple[GmmTeacher, TeacherDiagnostics, AssignmentMatrix]:
    """Fit all (k, seed) candidates and pick the best.

    Preference: feasible candidate with highest teacher MI; if none is
    feasible, the best-MI infeasible candidate is returned still flagged
    infeasible (the stress-case path). Ties break toward lower k, then lower
    seed, so the search is a pure function of its inputs.
    """
    if not candidate_ks or not seeds:
        raise InvalidInput("search needs at least one candidate k and one seed")
    base = em or EmConfig()
    results = []
    for k in sorted(candidate_ks):
        for seed in sorted(seeds):
            cfg = EmConfig(max_iters=base.max_iters, tol=base.tol,
                           var_floor=base.var_floor, seed=seed)
            try:
                teacher = em_fit(features, k, cfg)
            except FitDegenerate:
                continue
            probs, _ = assign_rows(teacher, features)
            rows = AssignmentMatrix(probs)
            diag = diagnostics(rows, thresholds)
            results.append((teacher, diag, rows))
    if not results:
        raise SearchFailed("every candidate fit was degenerate")

    def order(item):
        teacher, diag, _ = item
        return (-diag.i_t, teacher.k, teacher.fit_seed)

    feasible = [r for r in results if r[1].feasible]
    pool = feasible if feasible else results
    return min(pool, key=order)


# -- fingerprints, caching, files ------------------------------------------------


def fingerprint(teacher: GmmTeacher) -> str:
    """64-bit content hash of the exact teacher parameters."""
    h = hashlib.sha256()
    h.update(b"gmm-teacher-v1")
    h.update(np.asarray([teacher.k, teacher.d, teacher.fit_seed], dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(teacher.weights, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(teacher.means, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(teacher.variances, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class TargetCache:
    rows: AssignmentMatrix
    sample_ids: np.ndarray
    teacher_fingerprint: str

    def __post_init__(self):
        ids = np.asarray(self.sample_ids, dtype=np.int64)
        if ids.shape[0] != self.rows.n:
            raise InvalidInput("sample_ids length must match cached rows")
        if ids.shape[0] > 1 and not np.all(np.diff(ids) > 0):
            raise InvalidInput("sample_ids must be strictly increasing")
        self.sample_ids = ids


def cache_targets(
    teacher: GmmTeacher, features: np.ndarray, sample_ids: np.ndarray
) -> TargetCache:
    probs, _ = assign_rows(teacher, features)
    return TargetCache(
        rows=AssignmentMatrix(probs),
        sample_ids=np.asarray(sample_ids, dtype=np.int64),
        teacher_fingerprint=fingerprint(teacher),
    )


def save_teacher(path, teacher: GmmTeacher) -> None:
    write_json(
        path,
        {
            "version": TEACHER_FILE_VERSION,
            "k": teacher.k,
            "d": teacher.d,
            "weights": [float(w) for w in teacher.weights],
            "means": [[float(v) for v in row] for row in teacher.means],
            "variances": [[float(v) for v in row] for row in teacher.variances],
            "fit_seed": int(teacher.fit_seed),
            "loglik": float(teacher.loglik),
        },
    )


def load_teacher(path) -> GmmTeacher:
    obj = read_json(path)
    if obj.get("version") != TEACHER_FILE_VERSION:
        raise InvalidInput(f"{path}: unsupported teacher file version {obj.get('version')}")
    weights = check_simplex(np.asarray(obj["weights"], dtype=np.float64), name="weights")
    means = np.asarray(obj["means"], dtype=np.float64)
    variances = np.asarray(obj["variances"], dtype=np.float64)
    k, d = int(obj["k"]), int(obj["d"])
    if means.shape != (k, d) or variances.shape != (k, d) or weights.shape != (k,):
        raise InvalidInput(f"{path}: teacher parameter shapes inconsistent with k={k}, d={d}")
    if np.any(variances <= 0.0):
        raise InvalidInput(f"{path}: variances must be strictly positive")
    return GmmTeacher(
        k=k,
        d=d,
        weights=weights,
        means=means,
        variances=variances,
        fit_seed=int(obj["fit_seed"]),
        loglik=float(obj["loglik"]),
    )


def save_cache(path, cache: TargetCache) -> None:
    write_json(
        path,
        {
            "version": CACHE_FILE_VERSION,
            "teacher_fingerprint": cache.teacher_fingerprint,
            "sample_ids": [int(i) for i in cache.sample_ids],
            "rows": [[float(v) for v in row] for row in cache.rows.rows],
        },
    )


def load_cache(path) -> TargetCache:
    obj = read_json(path)
    if obj.get("version") != CACHE_FILE_VERSION:
        raise CacheMismatch(f"{path}: unsupported cache version {obj.get('version')}")
    try:
        rows = AssignmentMatrix(np.asarray(obj["rows"], dtype=np.float64))
        return TargetCache(
            rows=rows,
            sample_ids=np.asarray(obj["sample_ids"], dtype=np.int64),
            teacher_fingerprint=str(obj["teacher_fingerprint"]),
        )
    except (InvalidInput, KeyError, ValueError) as exc:
        raise CacheMismatch(f"{path}: cache contents invalid ({exc})") from exc


def verify_cache_teacher(cache: TargetCache, teacher: GmmTeacher) -> None:
    fp = fingerprint(teacher)
    if fp != cache.teacher_fingerprint:
        raise CacheMismatch(
            f"cache fingerprint {cache.teacher_fingerprint} != teacher fingerprint {fp}"
        )
