"""Certificate reports and secondary diagnostics.

The certificate quantities (teacher threshold, raw alignment, margins,
student MI) are computed from witness log-probabilities and teacher rows
alone. PSNR, active units and the linear probe are interpretation aids, never
part of the certificate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, ShapeError
from .simplex import (
    DEFAULT_TAU,
    AssignmentMatrix,
    kahan_mean,
    kahan_sum,
    kl_rows,
    margin,
    mean_assignment,
    teacher_mi,
)

TARGET_KINDS = ("searched_teacher", "fixed_t0")


@dataclass(frozen=True)
class CertificateReport:
    i_t: float
    l_align_raw: float
    bare_margin: float
    g_tau: float
    tau: float
    student_mi: float
    n_eval: int
    target_kind: str
    teacher_fingerprint: str

    def to_dict(self) -> dict:
        return {
            "i_t": self.i_t,
            "l_align_raw": self.l_align_raw,
            "bare_margin": self.bare_margin,
            "g_tau": self.g_tau,
            "tau": self.tau,
            "student_mi": self.student_mi,
            "n_eval": self.n_eval,
            "target_kind": self.target_kind,
            "teacher_fingerprint": self.teacher_fingerprint,
        }


@dataclass(frozen=True)
class DiagnosticsReport:
    psnr: float
    active_units: int
    probe_accuracy: float | None = None


def certify(
    witness_log_rows: np.ndarray,
    teacher_rows: AssignmentMatrix,
    tau: float = DEFAULT_TAU,
    target_kind: str = "searched_teacher",
    teacher_fingerprint: str = "",
) -> CertificateReport:
    """Assemble the raw certificate from witness log-probs and teacher rows."""
    if target_kind not in TARGET_KINDS:
        raise InvalidInput(f"target_kind must be one of {TARGET_KINDS}")
    w_log = np.asarray(witness_log_rows, dtype=np.float64)
    if w_log.shape != (teacher_rows.n, teacher_rows.k):
        raise ShapeError(
            f"witness shape {w_log.shape} != teacher shape {(teacher_rows.n, teacher_rows.k)}"
        )
    i_t = teacher_mi(teacher_rows)
    per_row = kl_rows(teacher_rows.rows, w_log)
    l_align = math.inf if np.any(np.isinf(per_row)) else float(kahan_mean(per_row))
    student_mi = _student_mi(w_log)
    rep = margin(i_t, l_align, tau)
    return CertificateReport(
        i_t=rep.i_t,
        l_align_raw=rep.l_align_raw,
        bare_margin=rep.bare_margin,
        g_tau=rep.g_tau,
        tau=rep.tau,
        student_mi=student_mi,
        n_eval=teacher_rows.n,
        target_kind=target_kind,
        teacher_fingerprint=teacher_fingerprint,
    )


def _student_mi(witness_log_rows: np.ndarray) -> float:
    """mean_x KL(S_x || S_bar), the mirror of the teacher threshold."""
    s = AssignmentMatrix(np.exp(witness_log_rows))
    s_bar = mean_assignment(s)
    with np.errstate(divide="ignore"):
        log_bar = np.log(s_bar)
    per_row = kl_rows(s.rows, np.broadcast_to(log_bar, s.rows.shape))
    if np.any(np.isinf(per_row)):
        return math.inf
    return float(kahan_mean(per_row))


def tau_sensitivity(report: CertificateReport, taus) -> list[tuple[float, float]]:
    """Margins at alternative safety buffers; pure arithmetic, no retraining."""
    out = []
    for t in taus:
        if t < 0.0:
            raise InvalidInput(f"tau must be >= 0, got {t}")
        out.append((float(t), report.bare_margin - float(t)))
    return out


def psnr(x: np.ndarray, xhat: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) in dB; +inf for an exact reconstruction."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(xhat, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    if peak <= 0.0:
        raise InvalidInput(f"peak must be positive, got {peak}")
    diff = (a - b).reshape(-1)
    mse = kahan_sum(diff * diff) / diff.size
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def active_units(mu_rows: np.ndarray, threshold: float = 0.01) -> int:
    """Latent dims whose posterior-mean variance exceeds the threshold."""
    m = np.asarray(mu_rows, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2:
        raise InvalidInput(f"active_units needs N >= 2 rows, got shape {m.shape}")
    centered = m - m.mean(axis=0, keepdims=True)
    variances = kahan_sum(centered * centered, axis=0) / m.shape[0]
    return int(np.sum(variances > threshold))


@dataclass(frozen=True)
class ProbeConfig:
    iters: int = 500
    lr: float = 0.1


def linear_probe(features: np.ndarray, labels: np.ndarray,
                 config: ProbeConfig | None = None) -> float:
    """Train-set accuracy of a full-batch multinomial logistic probe.

    Fixed iteration budget, no regularization; a diagnostic, not a
    certificate. With a single class present, returns that class's frequency.
    """
    cfg = config or ProbeConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise InvalidInput(f"features {x.shape} and labels {y.shape} are inconsistent")
    if np.any(y < 0):
        raise InvalidInput("labels must be nonnegative class indices")
    classes = int(y.max()) + 1
    counts = np.bincount(y, minlength=classes)
    if np.count_nonzero(counts) < 2:
        return float(counts.max() / y.size)

    n = x.shape[0]
    onehot = np.zeros((n, classes), dtype=np.float64)
    onehot[np.arange(n), y] = 1.0
    w = np.zeros((x.shape[1], classes), dtype=np.float64)
    b = np.zeros(classes, dtype=np.float64)
    for _ in range(cfg.iters):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        err = (p - onehot) / n
        w -= cfg.lr * (x.T @ err)
        b -= cfg.lr * err.sum(axis=0)
    pred = np.argmax(x @ w + b, axis=1)
    return float(np.mean(pred == y))
