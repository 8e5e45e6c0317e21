"""Command-line driver: ``gradcode {construct,verify,residual,train,solve-p3}``.

Settings come from an optional JSON file (``--config``) and are overridden by
flags. One top-level ``--seed`` governs every random choice; sub-seeds are
derived from it with fixed labels.

Exit codes: 0 success, 1 verification failure, 2 input error,
3 numeric non-convergence.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import analysis, baselines, codebook, losses, schemes, simulator
from .io import read_json, write_json_atomic, write_text_atomic
from .rng import derive_seed
from .straggler import StragglerProfile, sample_profile

EXIT_OK, EXIT_VERIFY_FAILED, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2, 3
SCHEMES = ("I", "II", "sparse", "dense")

DEFAULTS: dict[str, Any] = {
    "k": None,
    "n": None,
    "p": None,
    "psi_min": None,
    "psi_max": None,
    "tau": None,
    "scheme": None,
    "baseline": None,
    "methods": None,
    "b": None,
    "d": 2.0,
    "T": 100,
    "runs": 10,
    "seed": 0,
    "lr": "inv-lambda-t",
    "lambda2": 1.0,
    "optimizer": "gd",
    "C": None,
    "trials": 100_000,
    "minibatch": None,
    "task": {"kind": "ridge"},
    "out": ".",
}


class InputError(Exception):
    """Bad or inconsistent user input."""


# -- argument plumbing ---------------------------------------------------------


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _add_common(sub: argparse.ArgumentParser) -> None:
    # defaults are None so that unset flags never mask config-file values
    sub.add_argument("--config", help="JSON file with default settings")
    sub.add_argument("--k", type=int)
    sub.add_argument("--n", type=int)
    sub.add_argument("--p", type=_float_list, help="straggle probabilities, comma-separated")
    sub.add_argument("--psi-min", dest="psi_min", type=float)
    sub.add_argument("--psi-max", dest="psi_max", type=float)
    sub.add_argument("--tau", type=float, help="deadline tau_th for sampled profiles")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradcode", description="Optimally structured gradient codes for heterogeneous stragglers.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("construct", help="build a code and write it as JSON")
    _add_common(p)
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--baseline", choices=baselines.BASELINE_KINDS)
    p.add_argument("--b", type=_int_list, help="batch sizes b_1..b_k for schemes I and II")
    p.add_argument("--d", type=float, help="computation load for baselines")

    p = subs.add_parser("verify", help="check a code or alpha file against the optimal structure")
    p.add_argument("file")
    p.add_argument("--profile", help="profile JSON, if the file does not embed one")
    p.add_argument("--tol", type=float, default=codebook.STRUCT_TOL)
    p.add_argument("--out")

    p = subs.add_parser("residual", help="Monte Carlo residual error of a code file")
    p.add_argument("file")
    p.add_argument("--gradients", help="JSON file with an n x l list of partition gradients")
    p.add_argument("--task", choices=("ridge", "quadratic", "logistic"), default=None)
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = subs.add_parser("train", help="train with one or more codes and write traces")
    _add_common(p)
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--baseline", choices=baselines.BASELINE_KINDS)
    p.add_argument("--methods", type=lambda s: [m.strip() for m in s.split(",") if m.strip()])
    p.add_argument("--b", type=_int_list)
    p.add_argument("--d", type=float)
    p.add_argument("--T", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--lr", help="const:GAMMA, inv-lambda-t, inv-sqrt-total or inv-sqrt-t")
    p.add_argument("--lambda2", type=float, help="two-track weight Lambda")
    p.add_argument("--optimizer", choices=("gd", "adam", "adam-two-track"))
    p.add_argument("--C", type=float, help="squared-norm clipping bound")
    p.add_argument("--minibatch", type=int)

    p = subs.add_parser("solve-p3", help="solve the residual-minimisation problem numerically")
    _add_common(p)
    p.add_argument("--max-iters", dest="max_iters", type=int, default=200_000)
    p.add_argument("--tol", type=float, default=1e-15)
    return parser


def resolve_settings(args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        data = read_json(args.config)
        if not isinstance(data, dict):
            raise InputError("config file must hold a JSON object")
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(data)
    for key, val in vars(args).items():
        if key in DEFAULTS and val is not None:
            cfg[key] = val
    if isinstance(cfg["p"], str):
        cfg["p"] = _float_list(cfg["p"])
    return cfg


def resolve_profile(cfg: dict[str, Any]) -> StragglerProfile:
    if cfg["p"] is not None:
        p = list(cfg["p"])
        if cfg["k"] is not None and cfg["k"] != len(p):
            raise InputError(f"--k={cfg['k']} but --p lists {len(p)} probabilities")
        return StragglerProfile.from_probabilities(p)
    if cfg["psi_min"] is not None and cfg["tau"] is not None:
        if cfg["k"] is None:
            raise InputError("sampling a profile needs --k")
        psi_max = cfg["psi_max"] if cfg["psi_max"] is not None else cfg["psi_min"]
        return sample_profile(cfg["k"], cfg["psi_min"], psi_max, cfg["tau"], cfg["seed"])
    raise InputError("give straggle probabilities with --p, or --k with --psi-min/--psi-max/--tau")


def _require_n(cfg: dict[str, Any]) -> int:
    if cfg["n"] is None:
        raise InputError("--n is required")
    return int(cfg["n"])


# -- construction --------------------------------------------------------------


def build_method(name: str, profile: StragglerProfile, n: int, cfg: dict[str, Any]) -> Optional[codebook.GradientCode]:
    """Code for a scheme or baseline name; ``gd`` yields ``None``."""
    if name in SCHEMES:
        targets = codebook.row_targets(profile, n)
        if name in ("I", "II"):
            alpha, _ = schemes.build_scheme(targets, name, cfg["b"])
        elif name == "sparse":
            alpha = schemes.sparse_construct(targets)
        else:
            alpha = schemes.minibatch_dense_alpha(targets)
        return codebook.extract_code(alpha, profile, name=name)
    if name in baselines.BASELINE_KINDS:
        d = cfg["d"]
        if name in ("ehd", "sgc"):
            if float(d) != int(d):
                raise InputError(f"{name} needs an integer --d, got {d}")
            d = int(d)
        spec = baselines.BaselineSpec(name, d, derive_seed(cfg["seed"], "baseline", name))
        return baselines.build_baseline(spec, profile, n)
    raise InputError(f"unknown method {name!r}; choose from {', '.join(SCHEMES + baselines.BASELINE_KINDS)}")


def code_alpha(code: codebook.GradientCode) -> codebook.AlphaMatrix:
    if code.alpha is not None:
        return code.alpha
    if code.adaptive:
        raise InputError(f"{code.name} decodes adaptively and has no static alpha matrix")
    return codebook.AlphaMatrix(code.effective_weights())


def cmd_construct(args: argparse.Namespace) -> int:
    cfg = resolve_settings(args)
    if cfg["scheme"] and cfg["baseline"]:
        raise InputError("choose either --scheme or --baseline")
    name = cfg["scheme"] or cfg["baseline"]
    if name is None:
        raise InputError("--scheme or --baseline is required")
    profile = resolve_profile(cfg)
    n = _require_n(cfg)
    code = build_method(name, profile, n, cfg)
    out = Path(cfg["out"])
    if code is None:
        raise InputError("gd is the uncoded reference and has nothing to construct")
    write_json_atomic(out / "code.json", code.to_dict())
    print(f"wrote {out / 'code.json'} ({name}, k={code.k}, n={code.n})")
    if not code.adaptive:
        alpha = code_alpha(code)
        report = codebook.verify_optimal_structure(alpha, codebook.row_targets(profile, n))
        write_text_atomic(out / "structure.csv", report.to_csv())
        print(f"computation load d = {float(schemes.computation_load(alpha)):.6g}")
        print(report.to_csv(), end="")
    return EXIT_OK


def _load_code(path: str, profile_path: Optional[str] = None) -> codebook.GradientCode:
    data = read_json(path)
    if not isinstance(data, dict):
        raise InputError(f"{path} does not hold a JSON object")
    profile = StragglerProfile.from_dict(read_json(profile_path)) if profile_path else None
    if "A" not in data:
        if "alpha" not in data:
            raise InputError(f"{path} holds neither a code (A) nor an alpha matrix")
        alpha = codebook.AlphaMatrix.from_dict(data)
        if profile is None:
            if "profile" not in data:
                raise InputError("alpha file carries no profile; pass --profile")
            profile = StragglerProfile.from_dict(data["profile"])
        return codebook.extract_code(alpha, profile, name=data.get("name", "alpha"))
    return codebook.GradientCode.from_dict(data, profile)


def cmd_verify(args: argparse.Namespace) -> int:
    code = _load_code(args.file, args.profile)
    alpha = code_alpha(code)
    report = codebook.verify_optimal_structure(alpha, codebook.row_targets(code.profile, code.n), args.tol)
    if args.out:
        write_text_atomic(Path(args.out) / "verify.csv", report.to_csv())
    print(report.to_csv(), end="")
    print("PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_VERIFY_FAILED


def cmd_residual(args: argparse.Namespace) -> int:
    code = _load_code(args.file)
    seed = 0 if args.seed is None else args.seed
    trials = DEFAULTS["trials"] if args.trials is None else args.trials
    if trials < 1:
        raise InputError("--trials must be positive")
    if args.gradients:
        G = np.asarray(read_json(args.gradients), dtype=float)
        if G.ndim == 1:
            G = G[:, None]
        if G.ndim != 2 or G.shape[0] != code.n:
            raise InputError(f"gradients must be an {code.n} x l array")
    else:
        task = losses.make_task(args.task or "ridge", seed=derive_seed(seed, "task"))
        parts = simulator.partition_dataset(task, code.n)
        G = simulator.partition_gradients(task, parts, np.zeros(task.dim))
    report = analysis.monte_carlo(code, G, trials=trials, seed=derive_seed(seed, "residual"))
    text = report.to_csv()
    if args.out:
        write_text_atomic(Path(args.out) / "residual.csv", text)
    print(text, end="")
    return EXIT_OK


def _train_methods(cfg: dict[str, Any]) -> list[str]:
    if cfg["methods"]:
        return list(cfg["methods"])
    methods = [cfg["scheme"] or "II"]
    if cfg["baseline"]:
        methods.append(cfg["baseline"])
    return methods


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_settings(args)
    profile = resolve_profile(cfg)
    n = _require_n(cfg)
    task_cfg = dict(cfg["task"])
    kind = task_cfg.pop("kind", "ridge")
    try:
        task = losses.make_task(kind, seed=derive_seed(cfg["seed"], "task"), **task_cfg)
    except TypeError as exc:
        raise InputError(f"bad task settings: {exc}") from exc
    schedule = simulator.Schedule.parse(str(cfg["lr"]))
    parts = simulator.partition_dataset(task, n)
    C = cfg["C"] if cfg["C"] is not None else simulator.default_clip_bound(task, parts, np.zeros(task.dim))
    out = Path(cfg["out"])
    methods = _train_methods(cfg)
    if len(set(methods)) != len(methods):
        raise InputError("method names must be distinct")
    codes = {m: build_method(m, profile, n, cfg) for m in methods}
    results, curves = [], []
    for method in methods:
        code = codes[method]
        optimizer = cfg["optimizer"] if code is not None and not code.adaptive else ("adam" if cfg["optimizer"] != "gd" else "gd")
        config = simulator.TrainConfig(
            loss=task,
            n=n,
            profile=profile,
            code=code,
            schedule=schedule,
            T=int(cfg["T"]),
            C=float(C),
            runs=int(cfg["runs"]),
            seed=derive_seed(cfg["seed"], "train", method),
            optimizer=optimizer,
            adam=simulator.AdamHyper(Lambda=float(cfg["lambda2"])),
            minibatch=cfg["minibatch"],
            method=method,
        )
        traces = simulator.train(config)
        write_text_atomic(out / f"trace_{method}.csv", simulator.traces_to_csv(traces))
        res = analysis.summarize_method(method, code, traces, float(C))
        results.append(res)
        curves.append((method, res.d, traces))
    write_text_atomic(out / "comparison.csv", analysis.bound_report(results))
    write_text_atomic(out / "curves.csv", analysis.curves_csv(curves))
    resolved = {key: cfg[key] for key in DEFAULTS if key != "out"}
    resolved.update({"C": float(C), "methods": methods, "profile": profile.to_dict()})
    write_json_atomic(out / "run_config.json", resolved)
    print(analysis.bound_report(results), end="")
    return EXIT_OK


def cmd_solve_p3(args: argparse.Namespace) -> int:
    cfg = resolve_settings(args)
    profile = resolve_profile(cfg)
    n = _require_n(cfg)
    res = analysis.p3_numeric_solve(profile, n, max_iters=args.max_iters, tol=args.tol)
    S = float(profile.delta_inv.sum())
    payload = {
        **res.alpha.to_dict(),
        "objective": res.objective,
        "closed_form_objective": n * n / S,
        "iterations": res.iterations,
        "converged": res.converged,
        "profile": profile.to_dict(),
    }
    write_json_atomic(Path(cfg["out"]) / "p3.json", payload)
    print(f"objective {res.objective!r} (n^2/S = {n * n / S!r}) after {res.iterations} iterations")
    if not res.converged:
        print("warning: solver did not converge", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


COMMANDS = {
    "construct": cmd_construct,
    "verify": cmd_verify,
    "residual": cmd_residual,
    "train": cmd_train,
    "solve-p3": cmd_solve_p3,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (InputError, ValueError, KeyError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"gradcode {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    raise SystemExit(main())
