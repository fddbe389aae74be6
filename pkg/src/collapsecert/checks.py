"""Property sweeps: finite-difference gradient checks and closed-form identity
checks. Sweep cases are generated with numpy's seeded Generator (the in-house
PRNG is reserved for artifact data streams; these sweeps only need seeded
determinism).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, gradient_rel_error, numerical_gradient
from .simplex import AssignmentMatrix, constant_baseline_cost, decomposition_residual, teacher_mi
from .trainer import free_logit_flow_check
from .vae import LossWeights, ModelDims, init_params, losses

# Ops with kinks (relu, clamp) get inputs sampled away from the kink.
_OP_ROSTER = (
    "add", "sub", "mul", "scale", "matmul", "bias_add", "tanh", "relu", "exp",
    "exp_half", "square", "clamp", "concat", "slice", "sum_all", "sum_rows",
    "sum_cols", "mean_all", "mean_rows", "mean_cols", "log_softmax_rows",
    "logsumexp_cols", "gaussian_reparam", "full_loss",
)


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_case: str
    per_op: dict[str, float] = field(default_factory=dict)
    n_cases: int = 0

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_rel_err < tol


def _away_from_zero(rng: np.random.Generator, shape, low: float = 0.1, high: float = 1.0):
    mag = rng.uniform(low, high, size=shape)
    sign = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _scalar_wrap(tape: Tape, node: int) -> int:
    """Reduce any node to a scalar through a fixed non-uniform weighting."""
    v = tape.value(node)
    if v.ndim == 0:
        return node
    probe = tape.leaf(np.linspace(0.3, 1.1, v.size).reshape(v.shape))
    return tape.sum(tape.mul(node, probe))


def _build_case(op: str, rng: np.random.Generator):
    """Returns (inputs, forward) where forward(tape, leaf_ids) -> scalar node."""
    n = int(rng.integers(2, 5))
    m = int(rng.integers(2, 5))
    p = int(rng.integers(2, 4))
    if op in ("add", "sub", "mul"):
        inputs = [rng.normal(size=(n, m)), rng.normal(size=(n, m))]
        fwd = lambda t, ids: _scalar_wrap(t, getattr(t, op)(ids[0], ids[1]))
    elif op == "scale":
        c = float(rng.uniform(-2, 2))
        inputs = [rng.normal(size=(n, m))]
        fwd = lambda t, ids: _scalar_wrap(t, t.scale(ids[0], c))
    elif op == "matmul":
        inputs = [rng.normal(size=(n, m)), rng.normal(size=(m, p))]
        fwd = lambda t, ids: _scalar_wrap(t, t.matmul(ids[0], ids[1]))
    elif op == "bias_add":
        inputs = [rng.normal(size=(n, m)), rng.normal(size=(m,))]
        fwd = lambda t, ids: _scalar_wrap(t, t.bias_add(ids[0], ids[1]))
    elif op in ("tanh", "exp", "exp_half", "square"):
        inputs = [rng.normal(size=(n, m))]
        fwd = lambda t, ids: _scalar_wrap(t, getattr(t, op)(ids[0]))
    elif op == "relu":
        inputs = [_away_from_zero(rng, (n, m))]
        fwd = lambda t, ids: _scalar_wrap(t, t.relu(ids[0]))
    elif op == "clamp":
        inputs = [_away_from_zero(rng, (n, m), low=0.1, high=0.8)]
        fwd = lambda t, ids: _scalar_wrap(t, t.clamp(ids[0], -0.9, 0.9))
    elif op == "concat":
        inputs = [rng.normal(size=(n, m)), rng.normal(size=(n, p))]
        fwd = lambda t, ids: _scalar_wrap(t, t.concat(ids[0], ids[1]))
    elif op == "slice":
        inputs = [rng.normal(size=(n, m + 2))]
        fwd = lambda t, ids: _scalar_wrap(t, t.slice_cols(ids[0], 1, m + 1))
    elif op.startswith(("sum", "mean")):
        base, _, which = op.partition("_")
        axis = {"all": None, "rows": 1, "cols": 0}[which]
        inputs = [rng.normal(size=(n, m))]
        fwd = lambda t, ids: _scalar_wrap(t, getattr(t, base)(ids[0], axis=axis))
    elif op == "log_softmax_rows":
        inputs = [rng.normal(size=(n, m)) * 2.0]
        fwd = lambda t, ids: _scalar_wrap(t, t.log_softmax_rows(ids[0]))
    elif op == "logsumexp_cols":
        inputs = [rng.normal(size=(n, m)) * 2.0]
        fwd = lambda t, ids: _scalar_wrap(t, t.logsumexp_cols(ids[0]))
    elif op == "gaussian_reparam":
        eps = rng.normal(size=(n, m))
        inputs = [rng.normal(size=(n, m)), rng.normal(size=(n, m)) * 0.5]
        fwd = lambda t, ids: _scalar_wrap(t, t.gaussian_reparam(ids[0], ids[1], eps))
    else:
        raise ValueError(op)
    return inputs, fwd


def _check_case(inputs, fwd) -> float:
    tape = Tape()
    ids = [tape.leaf(v) for v in inputs]
    loss = fwd(tape, ids)
    grads = tape.backward(loss)
    worst = 0.0
    for pos, value in enumerate(inputs):
        analytic = grads[ids[pos]]
        if analytic is None:
            analytic = np.zeros_like(np.asarray(value, dtype=np.float64))

        def f(arr, pos=pos):
            t2 = Tape()
            ids2 = [t2.leaf(arr if i == pos else v) for i, v in enumerate(inputs)]
            return float(t2.value(fwd(t2, ids2)))

        numeric = numerical_gradient(f, np.asarray(value, dtype=np.float64).copy())
        worst = max(worst, gradient_rel_error(analytic, numeric))
    return worst


def _full_loss_case(rng: np.random.Generator) -> float:
    """Finite differences of the composed four-term objective w.r.t. every
    parameter tensor."""
    dims = ModelDims(input=3, latent=2, classes=3, hidden=4)
    params = init_params(dims, decoder_uses_teacher=bool(rng.integers(0, 2)),
                         seed=int(rng.integers(0, 2**31)))
    nb = 4
    x = rng.normal(size=(nb, dims.input))
    t = rng.dirichlet(np.ones(dims.classes) * 2.0, size=nb)
    t_log = np.log(t)
    noise = rng.normal(size=(nb, dims.latent))
    weights = LossWeights(
        beta_z=float(rng.uniform(0.2, 3.0)),
        lambda_align=float(rng.uniform(0.2, 3.0)),
        lambda_bal=float(rng.uniform(0.0, 2.0)),
    )
    _, nodes = losses(params, x, t_log, noise, weights)
    grads = nodes.tape.backward(nodes.total)
    worst = 0.0
    for name, value in params.tensors.items():
        analytic = grads[nodes.params[name]]

        def f(arr, name=name):
            tensors = dict(params.tensors)
            tensors[name] = arr
            p2 = type(params)(dims=params.dims,
                              decoder_uses_teacher=params.decoder_uses_teacher,
                              tensors=tensors)
            breakdown, _ = losses(p2, x, t_log, noise, weights)
            return breakdown.total

        numeric = numerical_gradient(f, value.copy())
        worst = max(worst, gradient_rel_error(analytic, numeric))
    return worst


def run_gradient_checks(n_cases: int = 100, seed: int = 0) -> GradCheckReport:
    """Cycle through the op roster (full-loss cases included) for n_cases."""
    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_err=0.0, worst_case="", n_cases=n_cases)
    for i in range(n_cases):
        op = _OP_ROSTER[i % len(_OP_ROSTER)]
        err = _full_loss_case(rng) if op == "full_loss" else _check_case(*_build_case(op, rng))
        report.per_op[op] = max(report.per_op.get(op, 0.0), err)
        if err > report.max_rel_err:
            report.max_rel_err = err
            report.worst_case = f"{op}#{i}"
    return report


# -- identity sweeps -------------------------------------------------------------


@dataclass
class IdentityReport:
    cases: int
    max_residual: float
    max_minimizer_gap: float  # |cost(rows, mean) - teacher_mi|
    min_baseline_slack: float  # min over cases of cost(rows, alpha) - teacher_mi
    flows: int
    flows_monotone: bool
    max_flow_final: float

    def passed(self, residual_tol: float = 1e-10, flow_final_tol: float = 1e-4) -> bool:
        return (
            self.max_residual <= residual_tol
            and self.max_minimizer_gap <= residual_tol
            and self.min_baseline_slack >= -residual_tol
            and self.flows_monotone
            and self.max_flow_final < flow_final_tol
        )


def random_assignment(rng: np.random.Generator, n: int, k: int,
                      sharp: bool = False) -> AssignmentMatrix:
    raw = rng.dirichlet(np.ones(k) * (0.3 if sharp else 1.5), size=n)
    return AssignmentMatrix(raw / raw.sum(axis=1, keepdims=True))


def run_identity_checks(cases: int = 10000, flows: int = 20, seed: int = 0,
                        flow_steps: int = 5000) -> IdentityReport:
    rng = np.random.default_rng(seed)
    max_resid = 0.0
    max_min_gap = 0.0
    min_slack = math.inf
    for _ in range(cases):
        n = int(rng.integers(1, 13))
        k = int(rng.integers(2, 7))
        m = random_assignment(rng, n, k)
        alpha = rng.uniform(1e-3, 1.0, size=k)
        alpha /= alpha.sum()
        max_resid = max(max_resid, decomposition_residual(m, alpha))
        mi = teacher_mi(m)
        mean_rows = m.rows.mean(axis=0)
        max_min_gap = max(max_min_gap, abs(constant_baseline_cost(m, mean_rows) - mi))
        min_slack = min(min_slack, constant_baseline_cost(m, alpha) - mi)

    monotone = True
    max_final = 0.0
    for _ in range(flows):
        n = int(rng.integers(2, 65))
        k = int(rng.integers(2, 9))
        t = 0.9 * rng.dirichlet(np.ones(k) * 2.0, size=n) + 0.1 / k
        result = free_logit_flow_check(AssignmentMatrix(t / t.sum(axis=1, keepdims=True)),
                                       steps=flow_steps)
        diffs = np.diff(result.trajectory)
        monotone = monotone and bool(np.all(diffs <= 1e-12))
        max_final = max(max_final, float(result.trajectory[-1]))
    return IdentityReport(
        cases=cases,
        max_residual=max_resid,
        max_minimizer_gap=max_min_gap,
        min_baseline_slack=min_slack,
        flows=flows,
        flows_monotone=monotone,
        max_flow_final=max_final,
    )
