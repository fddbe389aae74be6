"""Training protocol: warm-up, the four run modes, guarded alignment weight,
drift probe, and the free-logit descent oracle.

A run owns its state on one thread. Batches, reparameterization noise and
weight init all come from the in-house seeded PRNG, so identical configs and
data give bit-identical metrics streams. Teacher targets are fixed before
entry (search output or cache) and never recomputed during a run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import AdamHyper, AdamState, adam_step, init_adam_state
from .errors import CacheMismatch, ConfigError, DivergedError, InvalidInput
from .metrics import CertificateReport, active_units, certify, psnr
from .rng import Xoshiro256StarStar, derive_seed
from .simplex import AssignmentMatrix, kahan_mean, kahan_sum
from .teacher import TargetCache
from .vae import (
    Checkpoint,
    LossWeights,
    ModelDims,
    ModelParams,
    decode,
    encode,
    init_params,
    losses,
    raw_witness,
    uniform_log_rows,
)

MODES = ("full", "noalign", "rescue", "fixed_t0")
LAMBDA_TIERS = ("base", "guard", "rescue")


@dataclass(frozen=True)
class LambdaSchedule:
    lambda_base: float
    lambda_guard: float
    lambda_rescue: float
    delta_band: float

    def __post_init__(self):
        if not (self.lambda_rescue >= self.lambda_guard >= self.lambda_base >= 0.0):
            raise InvalidInput(
                "schedule must satisfy lambda_rescue >= lambda_guard >= lambda_base >= 0"
            )
        if self.delta_band < 0.0:
            raise InvalidInput("delta_band must be >= 0")


def lambda_schedule(g_tau: float, schedule: LambdaSchedule) -> tuple[str, float]:
    """Piecewise alignment weight keyed to the current margin."""
    if g_tau > schedule.delta_band:
        return "base", schedule.lambda_base
    if g_tau > 0.0:
        return "guard", schedule.lambda_guard
    return "rescue", schedule.lambda_rescue


@dataclass
class RunConfig:
    mode: str
    steps: int
    batch_size: int
    seed: int
    weights: LossWeights
    dims: ModelDims
    decoder_uses_teacher: bool = True
    tau: float = 0.1
    schedule: LambdaSchedule | None = None
    report_every: int = 100
    teacher_source: str = "search"  # "search" or a cache path; provenance only
    init_checkpoint: str | None = None
    adam: AdamHyper = field(default_factory=AdamHyper)
    psnr_peak: float = 1.0
    active_threshold: float = 0.01

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 1 or self.batch_size < 1 or self.report_every < 1:
            raise ConfigError("steps, batch_size and report_every must be >= 1")
        if not (self.tau >= 0.0):
            raise ConfigError(f"tau must be >= 0, got {self.tau}")
        self.weights.validate()


@dataclass
class TargetSet:
    """Fixed per-sample targets used for alignment, conditioning and reports."""

    rows: AssignmentMatrix
    log_rows: np.ndarray
    kind: str  # "searched_teacher" | "fixed_t0"
    fingerprint: str

    @classmethod
    def from_rows(cls, rows: AssignmentMatrix, kind: str, fingerprint: str = "") -> "TargetSet":
        with np.errstate(divide="ignore"):
            log_rows = np.log(rows.rows)
        return cls(rows=rows, log_rows=log_rows, kind=kind, fingerprint=fingerprint)

    @classmethod
    def from_cache(cls, cache: TargetCache) -> "TargetSet":
        return cls.from_rows(cache.rows, "fixed_t0", cache.teacher_fingerprint)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    reports: list[dict]
    final_report: CertificateReport
    loss_history: list[float]


@dataclass
class WarmupResult:
    checkpoint: Checkpoint
    features: np.ndarray
    loss_history: list[float]


class _BatchStream:
    """Seeded epoch shuffling; drops the ragged tail of each epoch."""

    def __init__(self, rng: Xoshiro256StarStar, n: int, batch_size: int):
        self.rng = rng
        self.order = np.arange(n, dtype=np.int64)
        self.batch = min(batch_size, n)
        self.ptr = n  # force a shuffle on first use

    def next(self) -> np.ndarray:
        if self.ptr + self.batch > self.order.shape[0]:
            self.rng.shuffle(self.order)
            self.ptr = 0
        idx = self.order[self.ptr : self.ptr + self.batch].copy()
        self.ptr += self.batch
        return idx


def _step(params, x, t_log, weights, adam_state, hyper, rng, step_index):
    noise = rng.gaussians(x.shape[0] * params.dims.latent).reshape(x.shape[0],
                                                                   params.dims.latent)
    breakdown, nodes = losses(params, x, t_log, noise, weights)
    if not math.isfinite(breakdown.total):
        raise DivergedError(step_index)
    grad_list = nodes.tape.backward(nodes.total)
    grads = {name: grad_list[nid] for name, nid in nodes.params.items()}
    tensors, adam_state = adam_step(params.tensors, grads, adam_state, hyper)
    params = ModelParams(dims=params.dims, decoder_uses_teacher=params.decoder_uses_teacher,
                         tensors=tensors)
    return params, adam_state, breakdown


def warmup(config: RunConfig, dataset) -> WarmupResult:
    """Stage 1: train encoder/decoder/head with the alignment weight at zero.

    The decoder's conditioning input is uniform rows (no teacher exists yet).
    Returns the posterior means over the dataset as teacher-fitting features.
    """
    x = np.asarray(dataset.x, dtype=np.float64)
    params = init_params(config.dims, config.decoder_uses_teacher, config.seed)
    adam_state = init_adam_state(params.tensors)
    rng = Xoshiro256StarStar(derive_seed(config.seed, 202))
    stream = _BatchStream(rng, x.shape[0], config.batch_size)
    t_log = uniform_log_rows(x.shape[0], config.dims.classes)
    weights = replace(config.weights, lambda_align=0.0)

    history: list[float] = []
    for step in range(1, config.steps + 1):
        idx = stream.next()
        params, adam_state, breakdown = _step(
            params, x[idx], t_log[idx], weights, adam_state, config.adam, rng, step
        )
        history.append(breakdown.total)

    mu, _ = encode(params, x)
    ckpt = Checkpoint(
        params=params,
        optimizer_state=adam_state,
        rng_state=rng.get_state(),
        step=config.steps,
        mode_lineage=["warmup"],
    )
    return WarmupResult(checkpoint=ckpt, features=mu, loss_history=history)


def posterior_features(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return encode(params, x)[0]


def certificate_from_latents(
    params: ModelParams, z: np.ndarray, targets: TargetSet, tau: float
) -> CertificateReport:
    """The raw certificate: reads the latent rows and the fixed targets only."""
    _, _, w_log = raw_witness(params, z)
    return certify(w_log, targets.rows, tau, targets.kind, targets.fingerprint)


def _eval_balance(w_log: np.ndarray) -> float:
    n, k = w_log.shape
    m = w_log.max(axis=0)
    log_sbar = np.log(np.exp(w_log - m[None, :]).sum(axis=0)) + m - math.log(n)
    return float(kahan_sum(np.exp(log_sbar) * log_sbar) + math.log(k))


def evaluation_report(
    params: ModelParams,
    x: np.ndarray,
    z: np.ndarray,
    targets: TargetSet,
    config: RunConfig,
    step: int,
    lambda_tier: str,
    lambda_value: float,
) -> tuple[dict, CertificateReport]:
    """One metrics line over the evaluation set (z is the posterior mean)."""
    cert = certificate_from_latents(params, z, targets, config.tau)
    _, _, w_log = raw_witness(params, z)
    cond = targets.rows.rows if params.decoder_uses_teacher else None
    xhat = decode(params, z, cond)
    diff = xhat - x
    recon = float(kahan_mean(kahan_sum(diff * diff, axis=1)))
    _, logvar = encode(params, x)
    kl_terms = 0.5 * kahan_sum(z * z + np.exp(logvar) - 1.0 - logvar, axis=1)
    kl_z = float(kahan_mean(kl_terms))
    line = {
        "step": step,
        "mode": config.mode,
        "seed": config.seed,
        "i_t": cert.i_t,
        "l_align_raw": cert.l_align_raw,
        "bare_margin": cert.bare_margin,
        "g_tau": cert.g_tau,
        "student_mi": cert.student_mi,
        "recon": recon,
        "kl_z": kl_z,
        "balance": _eval_balance(w_log),
        "lambda_tier": lambda_tier,
        "lambda_value": lambda_value,
        "psnr": psnr(x, xhat, config.psnr_peak),
        "active_units": active_units(z, config.active_threshold),
    }
    return line, cert


def train(
    config: RunConfig,
    dataset,
    targets: TargetSet,
    init: Checkpoint | None = None,
) -> TrainResult:
    """Run one mode to completion, emitting a report every report_every steps.

    full: all four terms. noalign: the alignment weight is forced to zero for
    the whole run. rescue: must start from a completed no-alignment
    checkpoint; optimizer moments are reset, parameters carried bit-exactly.
    fixed_t0: identical to full, but targets must come from a cache and the
    report is labeled accordingly.
    """
    x = np.asarray(dataset.x, dtype=np.float64)
    n = x.shape[0]
    if targets.rows.n != n:
        raise CacheMismatch(f"targets cover {targets.rows.n} samples, dataset has {n}")
    if config.mode == "rescue" and init is None:
        raise ConfigError("rescue mode requires an init checkpoint")
    if config.mode == "fixed_t0" and targets.kind != "fixed_t0":
        raise ConfigError("fixed_t0 mode requires targets loaded from a cache")

    if init is not None:
        params = ModelParams(
            dims=init.params.dims,
            decoder_uses_teacher=init.params.decoder_uses_teacher,
            tensors={k: v.copy() for k, v in init.params.tensors.items()},
        )
        lineage = list(init.mode_lineage) + [config.mode]
    else:
        params = init_params(config.dims, config.decoder_uses_teacher, config.seed)
        lineage = [config.mode]
    if params.dims.classes != targets.rows.k:
        raise CacheMismatch(
            f"targets have {targets.rows.k} classes, model has {params.dims.classes}"
        )

    adam_state = init_adam_state(params.tensors)
    rng = Xoshiro256StarStar(derive_seed(config.seed, 303))
    stream = _BatchStream(rng, n, config.batch_size)

    lambda_value = 0.0 if config.mode == "noalign" else config.weights.lambda_align
    lambda_tier = "base"
    if config.schedule is not None and config.mode != "noalign":
        lambda_value = config.schedule.lambda_base

    reports: list[dict] = []
    history: list[float] = []
    cert = None
    for step in range(1, config.steps + 1):
        idx = stream.next()
        active = replace(config.weights, lambda_align=lambda_value)
        params, adam_state, breakdown = _step(
            params, x[idx], targets.log_rows[idx], active, adam_state, config.adam, rng, step
        )
        history.append(breakdown.total)
        if step % config.report_every == 0 or step == config.steps:
            z = posterior_features(params, x)
            line, cert = evaluation_report(
                params, x, z, targets, config, step, lambda_tier, lambda_value
            )
            reports.append(line)
            if config.schedule is not None and config.mode != "noalign":
                lambda_tier, lambda_value = lambda_schedule(cert.g_tau, config.schedule)

    ckpt = Checkpoint(
        params=params,
        optimizer_state=adam_state,
        rng_state=rng.get_state(),
        step=config.steps,
        mode_lineage=lineage,
    )
    return TrainResult(checkpoint=ckpt, reports=reports, final_report=cert,
                       loss_history=history)


# -- guarded-dynamics probe ------------------------------------------------------


@dataclass(frozen=True)
class DriftProbe:
    inner: float
    align_sq: float
    g_dot_pred: float


def drift_probe(
    params: ModelParams,
    x_batch: np.ndarray,
    teacher_log_rows: np.ndarray,
    lam: float,
    weights: LossWeights,
    noise: np.ndarray | None = None,
) -> DriftProbe:
    """Predicted margin drift <grad L_a, grad L_0> + lam * ||grad L_a||^2.

    Two backward passes on one tape; the non-alignment part is recon +
    beta_z * kl_z + lambda_bal * balance. Diagnostic only, never drives
    updates.
    """
    x = np.asarray(x_batch, dtype=np.float64)
    if noise is None:
        noise = np.zeros((x.shape[0], params.dims.latent))
    _, nodes = losses(params, x, teacher_log_rows, noise, weights)
    ga = nodes.tape.backward(nodes.align)
    g0 = nodes.tape.backward(nodes.non_align)
    inner = 0.0
    align_sq = 0.0
    for name in params.tensors:
        a = ga[nodes.params[name]]
        b = g0[nodes.params[name]]
        if a is None:
            continue
        align_sq += float(np.sum(a * a))
        if b is not None:
            inner += float(np.sum(a * b))
    return DriftProbe(inner=inner, align_sq=align_sq, g_dot_pred=inner + lam * align_sq)


# -- free-logit descent oracle ----------------------------------------------------


@dataclass
class FlowResult:
    trajectory: np.ndarray  # alignment value before each step, then final
    final_probs: np.ndarray


def free_logit_flow_check(
    teacher_rows: AssignmentMatrix, steps: int = 5000, lr: float = 0.1
) -> FlowResult:
    """Gradient descent on unconstrained per-sample logits.

    Minimizes sum_i KL(T_i || softmax(u_i)) from a uniform start; in this
    proxy space the descent is analytically monotone, which the returned
    trajectory lets callers verify directly.
    """
    if steps < 2:
        raise InvalidInput("flow check needs steps >= 2")
    t = teacher_rows.rows
    with np.errstate(divide="ignore", invalid="ignore"):
        t_self = np.where(t > 0.0, t * np.log(np.where(t > 0.0, t, 1.0)), 0.0).sum()
    u = np.zeros_like(t)
    trajectory = np.empty(steps + 1, dtype=np.float64)
    for i in range(steps + 1):
        shifted = u - u.max(axis=1, keepdims=True)
        log_s = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        trajectory[i] = t_self - float(np.sum(t * log_s))
        if i == steps:
            break
        u = u - lr * (np.exp(log_s) - t)
    return FlowResult(trajectory=trajectory, final_probs=np.exp(log_s))
