"""Operator surface: generate data, warm up, search/cache teachers, train,
certify, and merge metrics into plot-ready CSV.

Exit codes: 0 success, 1 IO/parse failure, 2 invalid arguments or config,
3 teacher search failed, 4 training diverged, 5 cache mismatch.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checks, data, teacher, trainer, vae
from .autodiff import AdamHyper
from .errors import (
    CacheMismatch,
    CollapseCertError,
    ConfigError,
    DivergedError,
    InvalidInput,
    ParseError,
    SearchFailed,
)

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_SEARCH = 3
EXIT_DIVERGED = 4
EXIT_CACHE = 5

_CONFIG_SPEC: dict[str, type] = {
    "mode": str,
    "steps": int,
    "batch_size": int,
    "seed": int,
    "beta_z": float,
    "lambda_align": float,
    "lambda_bal": float,
    "tau": float,
    "report_every": int,
    "input": int,
    "latent": int,
    "classes": int,
    "hidden": int,
    "decoder_uses_teacher": bool,
    "lr": float,
    "adam_beta1": float,
    "adam_beta2": float,
    "adam_eps": float,
    "psnr_peak": float,
    "active_threshold": float,
    "schedule_enabled": bool,
    "lambda_base": float,
    "lambda_guard": float,
    "lambda_rescue": float,
    "delta_band": float,
}

_DEFAULTS: dict = {
    "mode": "full",
    "steps": 1000,
    "batch_size": 64,
    "seed": None,  # resolved against COLLAPSE_CERT_SEED, then 0
    "beta_z": 4.0,
    "lambda_align": 8.0,
    "lambda_bal": 1.0,
    "tau": 0.1,
    "report_every": 100,
    "input": 16,
    "latent": 4,
    "classes": 8,
    "hidden": 32,
    "decoder_uses_teacher": True,
    "lr": 1e-3,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
    "psnr_peak": 1.0,
    "active_threshold": 0.01,
    "schedule_enabled": False,
    "lambda_base": 2.0,
    "lambda_guard": 8.0,
    "lambda_rescue": 16.0,
    "delta_band": 0.2,
}


def _parse_value(key: str, raw: str):
    kind = _CONFIG_SPEC[key]
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise InvalidInput(f"config key {key!r}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError as exc:
        raise InvalidInput(f"config key {key!r}: cannot parse {raw!r}") from exc


def parse_config_file(path) -> dict:
    """`key = value` lines with # comments; unknown keys are rejected."""
    out: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise InvalidInput(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key not in _CONFIG_SPEC:
                raise InvalidInput(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = _parse_value(key, raw)
    return out


def resolve_seed(value) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get("COLLAPSE_CERT_SEED")
    return int(env) if env else 0


def _resolve_config(args, cli_keys: dict) -> dict:
    cfg = dict(_DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(parse_config_file(args.config))
    for key, attr in cli_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg[key] = value
    cfg["seed"] = resolve_seed(cfg["seed"])
    return cfg


def _write_resolved(out_dir: Path, cfg: dict, provenance: dict) -> None:
    lines = [f"# {k} = {v}" for k, v in sorted(provenance.items())]
    for key in sorted(_CONFIG_SPEC):
        value = cfg[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    (out_dir / "resolved.cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _run_config(cfg: dict, mode: str, init_path: str | None, teacher_source: str) -> trainer.RunConfig:
    schedule = None
    if cfg["schedule_enabled"]:
        schedule = trainer.LambdaSchedule(
            lambda_base=cfg["lambda_base"],
            lambda_guard=cfg["lambda_guard"],
            lambda_rescue=cfg["lambda_rescue"],
            delta_band=cfg["delta_band"],
        )
    return trainer.RunConfig(
        mode=mode,
        steps=cfg["steps"],
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
        weights=vae.LossWeights(
            beta_z=cfg["beta_z"],
            lambda_align=cfg["lambda_align"],
            lambda_bal=cfg["lambda_bal"],
        ),
        dims=vae.ModelDims(
            input=cfg["input"], latent=cfg["latent"],
            classes=cfg["classes"], hidden=cfg["hidden"],
        ),
        decoder_uses_teacher=cfg["decoder_uses_teacher"],
        tau=cfg["tau"],
        schedule=schedule,
        report_every=cfg["report_every"],
        teacher_source=teacher_source,
        init_checkpoint=init_path,
        adam=AdamHyper(
            lr=cfg["lr"], beta1=cfg["adam_beta1"],
            beta2=cfg["adam_beta2"], eps=cfg["adam_eps"],
        ),
        psnr_peak=cfg["psnr_peak"],
        active_threshold=cfg["active_threshold"],
    )


_TRAIN_CLI_KEYS = {
    "steps": "steps", "batch_size": "batch_size", "seed": "seed",
    "beta_z": "beta_z", "lambda_align": "lambda_align", "lambda_bal": "lambda_bal",
    "tau": "tau", "report_every": "report_every",
    "input": "input_dim", "latent": "latent", "classes": "classes", "hidden": "hidden",
    "lr": "lr",
}


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    ds = data.gen_mixture(
        n=args.n, d=args.d, c=args.c, separation=args.separation,
        noise_sigma=args.noise, seed=resolve_seed(args.seed),
    )
    data.save_dataset(args.out, ds)
    print(f"wrote {args.out} and {data.meta_path(args.out)} "
          f"(n={ds.n}, d={ds.d}, c={args.c})")
    return EXIT_OK


def cmd_warmup(args) -> int:
    cfg = _resolve_config(args, _TRAIN_CLI_KEYS)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = data.load_dataset(args.data)
    run = _run_config(cfg, "full", None, "search")
    result = trainer.warmup(run, ds)
    vae.save_checkpoint(out_dir / "checkpoint.json", result.checkpoint)
    data.save_csv(out_dir / "features.csv", result.features)
    _write_resolved(out_dir, cfg, {"command": "warmup", "data": args.data})
    print(f"warmup done: {cfg['steps']} steps, "
          f"loss {result.loss_history[0]:.4f} -> {result.loss_history[-1]:.4f}, "
          f"features {result.features.shape[0]}x{result.features.shape[1]}")
    return EXIT_OK


def _int_list(raw: str) -> list[int]:
    try:
        return [int(v) for v in raw.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise InvalidInput(f"expected a comma-separated integer list, got {raw!r}") from exc


def cmd_teacher_search(args) -> int:
    feats = data.load_features(args.features)
    thresholds = teacher.FeasibilityThresholds(
        i_t_min=args.i_t_min,
        margin_threshold=args.margin_threshold,
        high_margin_fraction_min=args.high_margin_min,
        soft_usage_kl_max_factor=args.soft_usage_factor,
        min_mass_factor=args.min_mass_factor,
    )
    em = teacher.EmConfig(max_iters=args.em_iters, tol=args.em_tol, var_floor=args.var_floor)
    chosen, diag, rows = teacher.search(
        feats.x, _int_list(args.ks), _int_list(args.seeds), thresholds, em
    )
    teacher.save_teacher(args.out_teacher, chosen)
    cache = teacher.TargetCache(
        rows=rows,
        sample_ids=np.arange(rows.n, dtype=np.int64),
        teacher_fingerprint=teacher.fingerprint(chosen),
    )
    teacher.save_cache(args.out_cache, cache)
    diag_path = args.out_diagnostics or str(args.out_teacher) + ".diagnostics.json"
    with open(diag_path, "w", encoding="utf-8") as fh:
        json.dump(diag.to_dict(), fh, indent=2)
        fh.write("\n")
    verdict = "feasible" if diag.feasible else f"infeasible (failed: {', '.join(diag.failed_criteria)})"
    print(f"selected k={chosen.k} seed={chosen.fit_seed} i_t={diag.i_t:.4f}: {verdict}")
    return EXIT_OK


def _load_targets(args, init_ckpt, ds) -> trainer.TargetSet:
    if args.cache:
        cache = teacher.load_cache(args.cache)
        if args.teacher:
            gmm = teacher.load_teacher(args.teacher)
            teacher.verify_cache_teacher(cache, gmm)
        return trainer.TargetSet.from_cache(cache)
    if args.teacher:
        if init_ckpt is None:
            raise ConfigError("--teacher needs --init so targets can be assigned "
                              "on the checkpoint's features; otherwise use --cache")
        gmm = teacher.load_teacher(args.teacher)
        feats = trainer.posterior_features(init_ckpt.params, ds.x)
        probs, _ = teacher.assign_rows(gmm, feats)
        from .simplex import AssignmentMatrix

        return trainer.TargetSet.from_rows(
            AssignmentMatrix(probs), "searched_teacher", teacher.fingerprint(gmm)
        )
    raise ConfigError("one of --teacher or --cache is required")


def cmd_train(args) -> int:
    cfg = _resolve_config(args, _TRAIN_CLI_KEYS)
    if args.mode == "rescue" and not args.init:
        raise ConfigError("rescue mode requires --init (a completed noalign checkpoint)")
    if args.mode == "fixed_t0" and not args.cache:
        raise ConfigError("fixed_t0 mode requires --cache")
    ds = data.load_dataset(args.data)
    init_ckpt = vae.load_checkpoint(args.init) if args.init else None
    targets = _load_targets(args, init_ckpt, ds)
    run = _run_config(cfg, args.mode, args.init,
                      args.cache if args.cache else "search")
    result = trainer.train(run, ds, targets, init=init_ckpt)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for line in result.reports:
            fh.write(json.dumps(line))
            fh.write("\n")
    vae.save_checkpoint(out_dir / "checkpoint.json", result.checkpoint)
    _write_resolved(out_dir, cfg, {
        "command": "train", "mode": args.mode, "data": args.data,
        "teacher": args.teacher or "", "cache": args.cache or "",
        "init": args.init or "",
    })
    print(json.dumps(result.final_report.to_dict()))
    return EXIT_OK


def cmd_certify(args) -> int:
    ds = data.load_dataset(args.data)
    ckpt = vae.load_checkpoint(args.checkpoint)
    z = trainer.posterior_features(ckpt.params, ds.x)
    if args.cache:
        cache = teacher.load_cache(args.cache)
        if cache.rows.n != ds.n:
            raise CacheMismatch(f"cache covers {cache.rows.n} samples, dataset has {ds.n}")
        targets = trainer.TargetSet.from_cache(cache)
    elif args.teacher:
        gmm = teacher.load_teacher(args.teacher)
        probs, _ = teacher.assign_rows(gmm, z)
        from .simplex import AssignmentMatrix

        targets = trainer.TargetSet.from_rows(
            AssignmentMatrix(probs), "searched_teacher", teacher.fingerprint(gmm)
        )
    else:
        raise ConfigError("one of --teacher or --cache is required")
    report = trainer.certificate_from_latents(ckpt.params, z, targets, args.tau)
    print(json.dumps(report.to_dict()))
    return EXIT_OK


_SERIES_COLUMNS = (
    "run", "step", "mode", "seed", "i_t", "l_align_raw", "bare_margin", "g_tau",
    "student_mi", "recon", "kl_z", "balance", "lambda_tier", "lambda_value",
    "psnr", "active_units",
)


def _format_cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def cmd_report(args) -> int:
    runs: list[tuple[str, list[dict]]] = []
    offenders: list[str] = []
    for run_dir in args.runs:
        path = Path(run_dir) / "metrics.jsonl"
        try:
            lines = [json.loads(l) for l in path.read_text(encoding="utf-8").splitlines() if l]
            if not lines:
                raise ValueError("no metrics lines")
            runs.append((Path(run_dir).name, lines))
        except (OSError, ValueError) as exc:
            offenders.append(f"{run_dir}: {exc}")
    if offenders:
        for o in offenders:
            print(f"error: {o}", file=sys.stderr)
        return EXIT_IO

    out = Path(args.out)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(",".join(_SERIES_COLUMNS) + "\n")
        for name, lines in runs:
            for line in lines:
                row = [name] + [_format_cell(line.get(c, "")) for c in _SERIES_COLUMNS[1:]]
                fh.write(",".join(row) + "\n")

    taus = [float(t) for t in args.taus.split(",")]
    tau_path = out.with_suffix(".tau.csv")
    with open(tau_path, "w", encoding="utf-8") as fh:
        fh.write("run,tau,g_tau\n")
        for name, lines in runs:
            bare = lines[-1]["bare_margin"]
            for t in taus:
                if t < 0:
                    raise InvalidInput(f"tau must be >= 0, got {t}")
                fh.write(f"{name},{_format_cell(t)},{_format_cell(bare - t)}\n")
    print(f"wrote {out} and {tau_path} ({sum(len(l) for _, l in runs)} rows, "
          f"{len(runs)} runs)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = checks.run_gradient_checks(n_cases=args.cases, seed=resolve_seed(args.seed))
    for op in sorted(report.per_op):
        print(f"{op:20s} max rel err {report.per_op[op]:.3e}")
    ok = report.passed(args.tol)
    print(f"overall max rel err {report.max_rel_err:.3e} ({report.worst_case}) "
          f"over {report.n_cases} cases: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else 1


def cmd_identity_check(args) -> int:
    report = checks.run_identity_checks(
        cases=args.cases, flows=args.flows, seed=resolve_seed(args.seed)
    )
    print(f"decomposition residual max {report.max_residual:.3e} over {report.cases} cases")
    print(f"minimizer gap max {report.max_minimizer_gap:.3e}; "
          f"baseline slack min {report.min_baseline_slack:.3e}")
    print(f"free-logit flows: {report.flows} runs, monotone={report.flows_monotone}, "
          f"max final {report.max_flow_final:.3e}")
    ok = report.passed()
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else 1


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="collapsecert",
        description="Constant-student collapse certificates for teacher-guided latent models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic mixture dataset")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--c", type=int, default=8)
    p.add_argument("--separation", type=float, default=8.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="data.csv")
    p.set_defaults(func=cmd_gen_data)

    def add_train_flags(p):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--beta-z", dest="beta_z", type=float, default=None)
        p.add_argument("--lambda-align", dest="lambda_align", type=float, default=None)
        p.add_argument("--lambda-bal", dest="lambda_bal", type=float, default=None)
        p.add_argument("--tau", type=float, default=None)
        p.add_argument("--report-every", dest="report_every", type=int, default=None)
        p.add_argument("--input-dim", dest="input_dim", type=int, default=None)
        p.add_argument("--latent", type=int, default=None)
        p.add_argument("--classes", type=int, default=None)
        p.add_argument("--hidden", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)

    p = sub.add_parser("warmup", help="stage-1 training with alignment off")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    add_train_flags(p)
    p.set_defaults(func=cmd_warmup)

    p = sub.add_parser("teacher-search", help="fit and score GMM teacher candidates")
    p.add_argument("--features", required=True)
    p.add_argument("--ks", default="8")
    p.add_argument("--seeds", default="0,1")
    p.add_argument("--out-teacher", dest="out_teacher", required=True)
    p.add_argument("--out-cache", dest="out_cache", required=True)
    p.add_argument("--out-diagnostics", dest="out_diagnostics", default=None)
    p.add_argument("--i-t-min", dest="i_t_min", type=float, default=0.1)
    p.add_argument("--margin-threshold", dest="margin_threshold", type=float, default=0.5)
    p.add_argument("--high-margin-min", dest="high_margin_min", type=float, default=0.5)
    p.add_argument("--soft-usage-factor", dest="soft_usage_factor", type=float, default=0.5)
    p.add_argument("--min-mass-factor", dest="min_mass_factor", type=float, default=0.5)
    p.add_argument("--em-iters", dest="em_iters", type=int, default=200)
    p.add_argument("--em-tol", dest="em_tol", type=float, default=1e-6)
    p.add_argument("--var-floor", dest="var_floor", type=float, default=1e-6)
    p.set_defaults(func=cmd_teacher_search)

    p = sub.add_parser("train", help="run one training mode")
    p.add_argument("--mode", required=True, choices=trainer.MODES)
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", default=None)
    p.add_argument("--cache", default=None)
    p.add_argument("--init", default=None, help="initial checkpoint")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("certify", help="recompute the certificate offline")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", default=None)
    p.add_argument("--cache", default=None)
    p.add_argument("--tau", type=float, default=0.1)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("report", help="merge run metrics into tidy CSV series")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--taus", default="0.05,0.1,0.2")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference suite for all ops")
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("identity-check", help="decomposition and free-logit sweeps")
    p.add_argument("--cases", type=int, default=10000)
    p.add_argument("--flows", type=int, default=20)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_identity_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (InvalidInput, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SearchFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SEARCH
    except DivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CacheMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CACHE
    except (ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CollapseCertError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
