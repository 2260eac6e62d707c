"""Command-line front end: validate models, sample posteriors, run studies.

Four subcommands cover the experiment pipeline::

    cfbounds validate  --model model.json
    cfbounds posterior --scenario breast-cancer --path path1 --T 6 --B 100
    cfbounds copula    --scenario breast-cancer --path path1 --T 4..8
    cfbounds bounds    --scenario breast-cancer --path path1 --T 4..8 \
                       --B 100 --seeds 20 --modes base,cs,pm --out results/

Every option can also live in a JSON config file (``--config run.json``)
whose keys are the long option names with dashes replaced by underscores;
explicit flags override the file.  Outputs are CSV files written under
``--out`` and are byte-identical across repeated runs with the same
configuration (wall-clock timing joins the output only under ``--timing``).

Exit codes: 0 on success, 1 when a solve reports infeasibility (bounds rows
carry the failure in their ``error`` column), 2 on input errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .case_study import (
    breast_cancer_model,
    breast_cancer_ranks,
    make_path,
    pm_zero_list,
)
from .copula_sim import (
    estimate_pn_mc,
    estimate_pn_naive,
    identity_ranks,
    simulate_comonotonic,
    simulate_independence,
)
from .coupling import InfeasibleBlockError
from .inference import ImpossibleTrajectoryError, sample_posterior_paths
from .model import (
    ModelFileError,
    load_model,
    load_trajectory,
    validate_primitives,
)
from .optimizer import (
    BOUNDS_CSV_HEADER,
    CONSTRAINT_MODES,
    SolveOptions,
    bound_pn,
    bounds_csv_row,
)

__all__ = ["RunConfig", "main"]

COPULA_METHODS = ("independence", "comonotonic", "naive")


class InputError(Exception):
    """Bad flags, config, or referenced files; maps to exit code 2."""


@dataclass(frozen=True)
class RunConfig:
    """One resolved run: every knob after merging flags over the config file."""

    command: str
    scenario: Optional[str] = None
    model: Optional[str] = None
    traj: Optional[str] = None
    path: Optional[str] = None
    T: Optional[str] = None
    B: int = 100
    seeds: str = "20"
    modes: str = "base"
    copulas: str = ",".join(COPULA_METHODS)
    restarts: int = 24
    max_iters: int = 200
    fw_tol: float = 1e-7
    naive_draws: int = 100_000
    timing: bool = False
    out: str = "."


_DEFAULTS = {f.name: f.default for f in fields(RunConfig)}


def _merge_config(args: argparse.Namespace, doc: dict) -> RunConfig:
    """Flags override file entries override dataclass defaults."""
    known = set(_DEFAULTS)
    for key in doc:
        if key not in known or key == "command":
            raise InputError(f"config file: unknown option {key!r}")
    merged = {}
    for name in known:
        if name == "command":
            continue
        flag = getattr(args, name, None)
        if flag is not None:
            merged[name] = flag
        elif name in doc:
            merged[name] = doc[name]
    casts = {"B": int, "restarts": int, "max_iters": int,
             "naive_draws": int, "fw_tol": float, "timing": bool}
    for name, cast in casts.items():
        if name in merged:
            try:
                merged[name] = cast(merged[name])
            except (TypeError, ValueError):
                raise InputError(
                    f"option {name!r} must be {cast.__name__}, "
                    f"got {merged[name]!r}"
                ) from None
    cfg = RunConfig(command=args.command, **merged)
    if (cfg.scenario is None) == (cfg.model is None):
        raise InputError("exactly one of --scenario or --model is required")
    if cfg.B < 1:
        raise InputError(f"--B must be positive, got {cfg.B}")
    return cfg


def _parse_range(spec, what: str) -> list[int]:
    """``"6"`` -> [6]; ``"4..8"`` -> [4, 5, 6, 7, 8]."""
    text = str(spec)
    try:
        if ".." in text:
            lo, hi = text.split("..")
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(text)]
    except ValueError:
        raise InputError(
            f"--{what} must be an integer or a..b range, got {spec!r}"
        ) from None


def _parse_seeds(spec) -> list[int]:
    """A count (``"20"`` -> seeds 0..19) or an explicit list (``"3,7,9"``)."""
    text = str(spec)
    try:
        if "," in text:
            return [int(s) for s in text.split(",")]
        return list(range(int(text)))
    except ValueError:
        raise InputError(
            f"--seeds must be a count or a comma-separated list, got {spec!r}"
        ) from None


def _parse_names(spec, allowed: Sequence[str], what: str) -> list[str]:
    if isinstance(spec, (list, tuple)):
        names = [str(s) for s in spec]
    else:
        names = [s.strip() for s in str(spec).split(",") if s.strip()]
    if not names:
        raise InputError(f"--{what} must name at least one of {allowed}")
    for name in names:
        if name not in allowed:
            raise InputError(f"--{what}: unknown entry {name!r}; choose from {allowed}")
    return names


@dataclass(frozen=True)
class _Problem:
    """The resolved model side of a run, shared by every subcommand."""

    model: object
    ranks: object
    pm_zeros: Optional[list]
    forbidden_state: int


def _resolve_problem(cfg: RunConfig) -> _Problem:
    if cfg.scenario is not None:
        if cfg.scenario not in ("breast-cancer", "breast_cancer"):
            raise InputError(
                f"unknown scenario {cfg.scenario!r}; available: breast-cancer"
            )
        scn = breast_cancer_model()
        return _Problem(
            model=scn.model,
            ranks=breast_cancer_ranks(),
            pm_zeros=pm_zero_list(),
            forbidden_state=scn.forbidden_state,
        )
    m = load_model(cfg.model)
    return _Problem(
        model=m,
        ranks=identity_ranks(m),
        pm_zeros=None,
        forbidden_state=m.num_states - 1,
    )


def _resolve_trajectories(cfg: RunConfig, prob: _Problem):
    """Yield (label, trajectory) pairs from --path/--T or a --traj file."""
    if cfg.traj is not None:
        if cfg.path is not None or cfg.T is not None:
            raise InputError("--traj is exclusive with --path/--T")
        traj = load_trajectory(cfg.traj, prob.model)
        label = os.path.splitext(os.path.basename(cfg.traj))[0]
        return [(label, traj)]
    if cfg.path is None:
        raise InputError("one of --path or --traj is required")
    labels = [s.strip() for s in cfg.path.split(",") if s.strip()]
    Ts = _parse_range(cfg.T if cfg.T is not None else "4..8", "T")
    pairs = []
    for label in labels:
        for T in Ts:
            try:
                pairs.append((label, make_path(label, T)))
            except ValueError as err:
                raise InputError(str(err)) from None
    return pairs


def _open_csv(cfg: RunConfig, name: str):
    os.makedirs(cfg.out, exist_ok=True)
    dest = os.path.join(cfg.out, name)
    fh = open(dest, "w", newline="", encoding="utf-8")
    return dest, fh, csv.writer(fh, lineterminator="\n")


def _fmt(v: float) -> str:
    return f"{v:.12g}"


def cmd_validate(cfg: RunConfig) -> int:
    if cfg.model is not None:
        model = load_model(cfg.model)  # raises ModelFileError on any defect
        source = cfg.model
    else:
        model = _resolve_problem(cfg).model
        source = cfg.scenario
    report = validate_primitives(model)
    if not report.ok:  # load_model validates, so only scenarios reach this
        print(report.summary(), file=sys.stderr)
        return 2
    print(
        f"{source}: ok ({model.num_states} states, {model.num_actions} "
        f"actions, {model.num_emissions} emissions)"
    )
    return 0


def cmd_posterior(cfg: RunConfig) -> int:
    prob = _resolve_problem(cfg)
    pairs = _resolve_trajectories(cfg, prob)
    if len(pairs) != 1:
        raise InputError("posterior expects a single path and a single T")
    label, traj = pairs[0]
    seed = _parse_seeds(cfg.seeds)[0]
    samples = sample_posterior_paths(prob.model, traj, cfg.B, seed)
    dest = os.path.join(cfg.out, "posterior.csv")
    os.makedirs(cfg.out, exist_ok=True)
    samples.to_csv(dest)
    print(f"wrote {dest} ({cfg.B * traj.T} rows; {label}, seed {seed})")
    return 0


def cmd_copula(cfg: RunConfig) -> int:
    prob = _resolve_problem(cfg)
    methods = _parse_names(cfg.copulas, COPULA_METHODS, "copulas")
    seeds = _parse_seeds(cfg.seeds)
    dest, fh, writer = _open_csv(cfg, "copula.csv")
    with fh:
        writer.writerow(["path_label", "T", "B", "seed", "method",
                         "estimate", "se"])
        for label, traj in _resolve_trajectories(cfg, prob):
            per_method = {m: [] for m in methods}
            for seed in seeds:
                samples = sample_posterior_paths(prob.model, traj, cfg.B, seed)
                for method in methods:
                    if method == "independence":
                        paths = simulate_independence(
                            prob.model, traj, samples, seed
                        )
                        est = estimate_pn_mc(paths, prob.forbidden_state)
                    elif method == "comonotonic":
                        paths = simulate_comonotonic(
                            prob.model, traj, samples, prob.ranks, seed
                        )
                        est = estimate_pn_mc(paths, prob.forbidden_state)
                    else:
                        est = estimate_pn_naive(
                            prob.model,
                            traj.x_tilde,
                            traj.T,
                            cfg.naive_draws,
                            seed,
                            prob.forbidden_state,
                        )
                    per_method[method].append(est.estimate)
                    writer.writerow(
                        [label, traj.T, cfg.B, seed, method,
                         _fmt(est.estimate), _fmt(est.se)]
                    )
            for method in methods:
                vals = np.asarray(per_method[method])
                sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
                writer.writerow([label, traj.T, cfg.B, "mean", method,
                                 _fmt(float(vals.mean())), ""])
                writer.writerow([label, traj.T, cfg.B, "sd", method,
                                 _fmt(sd), ""])
    print(f"wrote {dest}")
    return 0


def cmd_bounds(cfg: RunConfig) -> int:
    prob = _resolve_problem(cfg)
    modes = _parse_names(cfg.modes, CONSTRAINT_MODES, "modes")
    seeds = _parse_seeds(cfg.seeds)
    if cfg.restarts < 1:
        raise InputError(f"--restarts must be >= 1, got {cfg.restarts}")
    needs_pm = any("pm" in mode.split("+") for mode in modes)
    if needs_pm and prob.pm_zeros is None:
        raise InputError(
            "pm mode needs a monotonicity zero list, which only the built-in "
            "scenario provides; drop pm or use --scenario"
        )
    opts = SolveOptions(
        restarts=cfg.restarts, max_iters=cfg.max_iters, fw_gap_tol=cfg.fw_tol
    )

    header = BOUNDS_CSV_HEADER.split(",")
    if cfg.timing:
        header.append("wall_ms")
    header.append("error")
    blank = [""] * (len(header) - 6)

    any_failed = False
    dest, fh, writer = _open_csv(cfg, "bounds.csv")
    with fh:
        writer.writerow(header)
        for label, traj in _resolve_trajectories(cfg, prob):
            stats = {mode: ([], []) for mode in modes}
            for seed in seeds:
                try:
                    samples = sample_posterior_paths(
                        prob.model, traj, cfg.B, seed
                    )
                except ImpossibleTrajectoryError as err:
                    any_failed = True
                    for mode in modes:
                        writer.writerow(
                            [label, traj.T, cfg.B, seed, mode] + blank
                            + [str(err)]
                        )
                    continue
                for mode in modes:
                    try:
                        lower, upper = bound_pn(
                            prob.model,
                            traj,
                            cfg.B,
                            seed,
                            constraint_mode=mode,
                            opts=opts,
                            forbidden_state=prob.forbidden_state,
                            pm_zeros=prob.pm_zeros,
                            ranks=prob.ranks,
                            samples=samples,
                        )
                    except InfeasibleBlockError as err:
                        any_failed = True
                        writer.writerow(
                            [label, traj.T, cfg.B, seed, mode] + blank
                            + [str(err)]
                        )
                        continue
                    row = bounds_csv_row(
                        label, traj.T, cfg.B, seed, mode, lower, upper,
                        timing=cfg.timing,
                    )
                    writer.writerow(row + [""])
                    stats[mode][0].append(lower.value)
                    stats[mode][1].append(upper.value)
            for mode in modes:
                lbs, ubs = stats[mode]
                if not lbs:
                    continue
                lbs, ubs = np.asarray(lbs), np.asarray(ubs)
                for stat, lo, hi in (
                    ("mean", lbs.mean(), ubs.mean()),
                    (
                        "sd",
                        lbs.std(ddof=1) if lbs.size > 1 else 0.0,
                        ubs.std(ddof=1) if ubs.size > 1 else 0.0,
                    ),
                ):
                    row = [label, traj.T, cfg.B, stat, mode,
                           _fmt(float(lo)), _fmt(float(hi)), "", "",
                           len(seeds)]
                    if cfg.timing:
                        row.append("")
                    writer.writerow(row + [""])
    print(f"wrote {dest}")
    return 1 if any_failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfbounds",
        description="Bounds on counterfactual survival in latent-state models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("problem")
    g.add_argument("--scenario", help="built-in scenario name (breast-cancer)")
    g.add_argument("--model", help="model JSON file")
    g.add_argument("--traj", help="trajectory JSON file (exclusive with --path)")
    g.add_argument("--path", help="built-in path label(s), e.g. path1,path2")
    g.add_argument("--T", help="trajectory length: single value or a..b range")
    g.add_argument("--B", type=int, help="posterior sample count (default 100)")
    g.add_argument("--seeds", help="seed count or comma-separated seed list")
    r = common.add_argument_group("run")
    r.add_argument("--out", help="output directory (default .)")
    r.add_argument("--config", help="JSON file of defaults for any option")
    r.add_argument("--timing", action="store_const", const=True,
                   help="include wall-clock columns (breaks byte determinism)")

    sub.add_parser("validate", parents=[common],
                   help="check a model file or scenario")
    sub.add_parser("posterior", parents=[common],
                   help="sample latent paths and write posterior.csv")

    cop = sub.add_parser("copula", parents=[common],
                         help="reference-copula PN estimates")
    cop.add_argument("--copulas",
                     help="comma list from independence,comonotonic,naive")
    cop.add_argument("--naive-draws", type=int, dest="naive_draws",
                     help="trajectory draws for the naive estimate")

    bnd = sub.add_parser("bounds", parents=[common],
                         help="optimize PN bounds and write bounds.csv")
    bnd.add_argument("--modes", help="comma list from base,cs,pm,cs+pm")
    bnd.add_argument("--restarts", type=int, help="random solver restarts")
    bnd.add_argument("--max-iters", type=int, dest="max_iters",
                     help="iteration cap per solver start")
    bnd.add_argument("--fw-tol", type=float, dest="fw_tol",
                     help="stationarity-gap stopping tolerance")
    return parser


_COMMANDS = {
    "validate": cmd_validate,
    "posterior": cmd_posterior,
    "copula": cmd_copula,
    "bounds": cmd_bounds,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        doc = {}
        if args.config is not None:
            try:
                with open(args.config, "r", encoding="utf-8") as fh:
                    doc = json.load(fh)
            except (OSError, json.JSONDecodeError) as err:
                raise InputError(f"cannot read config {args.config}: {err}")
            if not isinstance(doc, dict):
                raise InputError(f"config {args.config} must be a JSON object")
        cfg = _merge_config(args, doc)
        return _COMMANDS[cfg.command](cfg)
    except (InputError, ModelFileError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (InfeasibleBlockError, ImpossibleTrajectoryError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
