"""Teacher construction: warm-up features, GMM candidates, feasibility scores.

A good teacher is informative (high mutual information), confident (large
top-1 margins), and balanced (no starved components). The search fits every
(k, seed) candidate, scores each one, and prefers feasible candidates with
the highest teacher MI; an infeasible winner is returned still flagged, so a
stress case is never silently promoted.
"""
import numpy as np

from collapsecert import (
    ModelDims,
    LossWeights,
    cache_targets,
    fingerprint,
    gen_mixture,
    search,
)
from collapsecert.teacher import load_cache, save_cache
from collapsecert.trainer import RunConfig, warmup

print("== stage 1: warm-up features ==")
ds = gen_mixture(n=800, d=12, c=6, separation=8.0, noise_sigma=1.0, seed=42)
config = RunConfig(
    mode="full", steps=300, batch_size=64, seed=42,
    weights=LossWeights(beta_z=4.0, lambda_align=8.0, lambda_bal=1.0),
    dims=ModelDims(input=12, latent=3, classes=6, hidden=32),
)
warm = warmup(config, ds)
print(f"warm-up loss {warm.loss_history[0]:.2f} -> {warm.loss_history[-1]:.2f}; "
      f"features {warm.features.shape}")

print("\n== stage 2: candidate search ==")
teacher, diag, rows = search(warm.features, candidate_ks=[4, 6], seeds=[0, 1])
print(f"selected k={teacher.k}, fit seed={teacher.fit_seed}")
print(f"  teacher MI            {diag.i_t:.4f}")
print(f"  mean top-1 margin     {diag.mean_top1_margin:.4f}")
print(f"  high-margin fraction  {diag.high_margin_fraction:.4f}")
print(f"  hard balance KL       {diag.hard_balance_kl:.4f}")
print(f"  soft usage KL         {diag.soft_usage_kl:.4f}")
print(f"  min component mass    {diag.min_component_mass:.4f}")
print(f"  feasible              {diag.feasible} {diag.failed_criteria or ''}")

print("\n== stage 3: freeze the targets ==")
cache = cache_targets(teacher, warm.features, np.arange(ds.n))
save_cache("/tmp/demo_cache.json", cache)
reloaded = load_cache("/tmp/demo_cache.json")
bit_exact = np.array_equal(reloaded.rows.rows, cache.rows.rows)
print(f"cache round-trip bit-exact: {bit_exact}")
print(f"teacher fingerprint: {fingerprint(teacher)} "
      f"(cached: {reloaded.teacher_fingerprint})")

print("\n== what a degenerate teacher looks like ==")
one_blob = np.random.default_rng(7).normal(size=(500, 3))
_, stress, _ = search(one_blob, candidate_ks=[5], seeds=[0])
print(f"single-cluster data, k=5: feasible={stress.feasible}, "
      f"failed={stress.failed_criteria}")
