"""Guard-rail machinery around the certificate.

Three pieces, each standalone:

  1. The piecewise alignment weight: base / guard / rescue tiers keyed to the
     current margin.
  2. The drift probe: predicted margin velocity <grad L_a, grad L_0> +
     lambda * ||grad L_a||^2, and the weight threshold that makes it positive.
  3. The free-logit descent oracle: in unconstrained logit space, alignment
     descent is analytically monotone; the trajectory verifies it numerically.
  4. Tau sensitivity: changing the safety buffer shifts reported margins by
     exactly the offset, no retraining.
"""
import numpy as np

from collapsecert import AssignmentMatrix, LossWeights, ModelDims, init_params
from collapsecert.metrics import certify, tau_sensitivity
from collapsecert.trainer import (
    LambdaSchedule,
    drift_probe,
    free_logit_flow_check,
    lambda_schedule,
)

rng = np.random.default_rng(21)

print("== 1. the guarded alignment weight ==")
sched = LambdaSchedule(lambda_base=2.0, lambda_guard=8.0, lambda_rescue=16.0,
                       delta_band=0.2)
for g in (1.0, 0.15, 0.0, -0.5):
    tier, lam = lambda_schedule(g, sched)
    print(f"  g_tau = {g:+5.2f}  ->  tier {tier:6s} lambda = {lam}")

print("\n== 2. predicted margin drift and the weight threshold ==")
# this state has the other losses pulling against alignment (negative inner
# product), so the threshold weight is strictly positive
dims = ModelDims(input=10, latent=3, classes=5, hidden=12)
params = init_params(dims, decoder_uses_teacher=True, seed=21)
x = rng.normal(size=(48, 10))
teacher_rows = rng.dirichlet(np.ones(5), size=48)
weights = LossWeights(beta_z=4.0, lambda_align=8.0, lambda_bal=1.0)
probe = drift_probe(params, x, np.log(teacher_rows), 0.0, weights)
print(f"  <grad L_a, grad L_0> = {probe.inner:+.6f}")
print(f"  ||grad L_a||^2       = {probe.align_sq:.6f}")
threshold = max(0.0, -probe.inner) / probe.align_sq
for lam in (0.0, threshold + 1e-6, threshold + 1.0):
    p = drift_probe(params, x, np.log(teacher_rows), lam, weights)
    sign = "positive" if p.g_dot_pred > 0 else "non-positive"
    print(f"  lambda = {lam:8.4f}: predicted drift {p.g_dot_pred:+.6f} ({sign})")
print(f"  (any lambda above {threshold:.4f} guarantees positive drift here)")

print("\n== 3. monotone descent in free logit space ==")
t = rng.dirichlet(np.ones(6) * 2.0, size=32)
flow = free_logit_flow_check(AssignmentMatrix(t), steps=5000, lr=0.1)
marks = [0, 10, 100, 1000, 5000]
for m in marks:
    print(f"  step {m:5d}: alignment {flow.trajectory[m]:.3e}")
increases = int(np.sum(np.diff(flow.trajectory) > 1e-12))
print(f"  increases along the whole trajectory: {increases}")

print("\n== 4. tau sensitivity is pure arithmetic ==")
witness_log = np.log(0.7 * t + 0.3 / 6)
report = certify(witness_log, AssignmentMatrix(t), tau=0.1)
print(f"  bare margin {report.bare_margin:+.4f}")
for tau, g in tau_sensitivity(report, [0.05, 0.1, 0.2]):
    print(f"  tau = {tau:.2f}  ->  g_tau = {g:+.4f}")
