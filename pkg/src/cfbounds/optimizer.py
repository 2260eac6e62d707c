"""Multi-start Frank-Wolfe bounds on the counterfactual survival probability.

The objective is multilinear in the coupling cells, so neither direction is
a convex program; each solve is a local search from many starting points,
and the returned bounds are the best values found.  Three ingredients keep
the search sharp:

* the linear minimization oracle splits over blocks, each an exact
  transportation LP (:mod:`cfbounds._transport`), so every Frank-Wolfe
  target is a true vertex of the product polytope;
* along any segment the objective restricts to a polynomial of degree at
  most ``2 (T - 1)``, so "exact" line search is literal: interpolate at
  Chebyshev nodes, take derivative roots, re-evaluate the objective at the
  candidates, keep the best — never worse than staying put;
* optional away steps let iterates leave a bad vertex along the active-set
  representation instead of zig-zagging.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from ._rng import substream
from ._transport import solve_transport
from .copula_sim import RankOrdering, identity_ranks
from .coupling import (
    CouplingSpace,
    InfeasibleBlockError,
    PairwiseCoupling,
    PMZero,
    StartInfeasibleError,
    build_space,
    check_feasibility,
    comonotonic_coupling,
    cs_forbidden_cells,
    enumerate_blocks,
    independence_coupling,
    needed_pairs,
    phase1_feasible_point,
    pm_forbidden_cells,
    with_forbidden,
)
from .inference import PosteriorSampleSet, sample_posterior_paths
from .model import ModelPrimitives, Trajectory
from .objective import PNObjective

__all__ = [
    "CONSTRAINT_MODES",
    "SolveOptions",
    "RestartTrace",
    "FWResult",
    "BoundReport",
    "lp_block_oracle",
    "frank_wolfe_extremize",
    "repair_into",
    "bound_pn",
    "bounds_csv_row",
    "BOUNDS_CSV_HEADER",
]

CONSTRAINT_MODES = ("base", "cs", "pm", "cs+pm")

_DIRECTIONS = ("min", "max")
_STEP_RULES = ("exact-line-search", "backtracking")


@dataclass(frozen=True)
class SolveOptions:
    """Knobs for one extremization run.

    ``restarts`` counts the random starting points drawn on top of the
    always-tried deterministic ones (independence and comonotonic couplings
    when feasible, a phase-1 vertex, and anything in ``mandatory_starts``).
    ``mandatory_starts`` takes couplings — possibly from a differently
    constrained space, see :func:`repair_into` — that must be used as
    additional starting points; the returned bound is then guaranteed at
    least as extreme as the objective at each of them.  ``seed`` drives the
    random starts only; ``None`` defers to the seed of the surrounding call.
    """

    direction: str = "max"
    restarts: int = 24
    max_iters: int = 200
    fw_gap_tol: float = 1e-7
    step_rule: str = "exact-line-search"
    away_steps: bool = True
    mandatory_starts: tuple = ()
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.direction not in _DIRECTIONS:
            raise ValueError(f"direction must be one of {_DIRECTIONS}")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (self.fw_gap_tol > 0.0):
            raise ValueError("fw_gap_tol must be positive")
        if self.step_rule not in _STEP_RULES:
            raise ValueError(f"step_rule must be one of {_STEP_RULES}")
        object.__setattr__(self, "mandatory_starts", tuple(self.mandatory_starts))


class RestartTrace(NamedTuple):
    """One row of a solve's per-start audit trail."""

    label: str
    iterations: int
    fw_gap: float
    value: float


class FWResult(NamedTuple):
    """Outcome of a single Frank-Wolfe run."""

    z: np.ndarray
    value: float
    fw_gap: float
    iterations: int
    values: np.ndarray  # objective value at the start of each iteration


@dataclass(frozen=True)
class BoundReport:
    """One side of a bound: the extremal value, its witness, and audit data."""

    value: float
    coupling: PairwiseCoupling
    direction: str
    fw_gap: float
    residual: float
    wall_ms: float
    trace: tuple[RestartTrace, ...]

    @property
    def n_starts(self) -> int:
        return len(self.trace)


def lp_block_oracle(
    gradient: np.ndarray,
    blocks_or_space: Union[CouplingSpace, Sequence],
    direction: str = "min",
    model: Optional[ModelPrimitives] = None,
) -> PairwiseCoupling:
    """Extremize a linear objective over the product polytope, block by block.

    Returns a vertex coupling (every block's plan has forest support).
    Raises :class:`InfeasibleBlockError` with the offending block if the zero
    pattern strands some marginal mass.
    """
    if direction not in _DIRECTIONS:
        raise ValueError(f"direction must be one of {_DIRECTIONS}")
    space = _as_space(blocks_or_space, model)
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != (space.total_cells,):
        raise ValueError(
            f"gradient has shape {gradient.shape}, space has "
            f"{space.total_cells} cells"
        )
    sign = 1.0 if direction == "min" else -1.0
    z = np.zeros(space.total_cells)
    for bi, blk in enumerate(space.blocks):
        idx = space.cell_index(bi)
        mask = idx >= 0
        cost = np.zeros(idx.shape)
        cost[mask] = sign * gradient[idx[mask]]
        plan, status = solve_transport(
            cost, blk.row_marginal, blk.col_marginal, mask
        )
        if status == 1:
            raise InfeasibleBlockError(
                blk,
                "zero constraints leave no feasible plan for the block margins",
            )
        if status != 0:  # pragma: no cover - defensive; never observed
            raise RuntimeError(f"transport solver stalled on {blk.describe()}")
        z[idx[mask]] = plan[mask]
    return PairwiseCoupling(space=space, z=z)


def _as_space(blocks_or_space, model):
    if isinstance(blocks_or_space, CouplingSpace):
        return blocks_or_space
    return build_space(blocks_or_space, model=model)


def _segment_values(objective, z, d, gmax, etas):
    """Objective at ``z + eta * gmax * d`` for each eta in [0, 1]."""
    return objective.values_on_segment(z, z + gmax * d, np.asarray(etas))


def _exact_step(objective, z, d, gmax, sigma, cur):
    """Best step length in [0, gmax] along d, by polynomial interpolation.

    The restriction of the objective to a segment is a polynomial of degree
    at most ``2 (T - 1)``; fit it at Chebyshev nodes, locate derivative
    roots, and re-evaluate the *true* objective at every candidate so that
    interpolation error can never produce an uphill step.  Returns
    ``(gamma, value)`` with ``sigma * value <= sigma * cur``.
    """
    deg = max(2 * (objective.traj.T - 1), 1)
    n = deg + 3
    # Chebyshev extrema mapped to [0, 1]; includes both endpoints.
    etas = 0.5 * (1.0 - np.cos(np.pi * np.arange(n) / (n - 1)))
    vals = _segment_values(objective, z, d, gmax, etas)
    candidates = list(zip(etas, vals))
    try:
        fit = np.polynomial.chebyshev.Chebyshev.fit(etas, sigma * vals, deg)
        roots = fit.deriv().roots()
    except np.linalg.LinAlgError:  # pragma: no cover - defensive
        roots = np.empty(0)
    keep = roots[
        (np.abs(roots.imag) <= 1e-9 * np.maximum(1.0, np.abs(roots.real)))
        & (roots.real > 0.0)
        & (roots.real < 1.0)
    ].real
    if keep.size:
        root_vals = _segment_values(objective, z, d, gmax, keep)
        candidates.extend(zip(keep, root_vals))
    best_eta, best_val = 0.0, cur
    for eta, val in candidates:
        if sigma * val < sigma * best_val - 1e-15:
            best_eta, best_val = float(eta), float(val)
    return best_eta * gmax, best_val


def _backtracking_step(objective, z, d, gmax, sigma, cur, slope):
    """Armijo halving from the maximal step; returns (gamma, value)."""
    gamma = gmax
    while gamma > 1e-13:
        val = float(_segment_values(objective, z, d, gmax, [gamma / gmax])[0])
        if sigma * val <= sigma * cur + 1e-4 * gamma * slope:
            return gamma, val
        gamma *= 0.5
    return 0.0, cur


def frank_wolfe_extremize(
    objective: PNObjective,
    z0: Union[PairwiseCoupling, np.ndarray],
    opts: SolveOptions,
) -> FWResult:
    """Run Frank-Wolfe from one starting coupling.

    Minimizes or maximizes per ``opts.direction``.  The iterate sequence is
    monotone in the objective (the line search never accepts an uphill
    value), and the run stops once the Frank-Wolfe gap falls below
    ``opts.fw_gap_tol``, the iteration budget is spent, or no direction
    makes further progress.
    """
    space = objective.space
    z = np.array(z0.z if isinstance(z0, PairwiseCoupling) else z0, dtype=float)
    sigma = 1.0 if opts.direction == "min" else -1.0

    # Active set for away steps: z stays the convex combination of atoms.
    atoms: list[np.ndarray] = [z.copy()]
    weights: list[float] = [1.0]
    keys = {z.tobytes(): 0}

    history: list[float] = []
    gap = np.inf
    iters = 0
    for _ in range(opts.max_iters):
        iters += 1
        val, grad = objective.value_and_gradient(z)
        if not np.isfinite(val) or not np.all(np.isfinite(grad)):
            raise RuntimeError(
                "objective became non-finite during Frank-Wolfe; the coupling "
                "or model primitives are numerically inconsistent"
            )
        history.append(val)
        geff = sigma * grad
        target = lp_block_oracle(geff, space, "min")
        # mathematically >= 0; clamp the dot-product rounding noise
        gap = max(float(geff @ (z - target.z)), 0.0)
        if gap <= opts.fw_gap_tol:
            break

        # Candidate directions: Frank-Wolfe, and (optionally) away from the
        # worst active atom.  Prefer the one with the larger local descent.
        moves = [("fw", target.z - z, 1.0, gap)]
        if opts.away_steps and len(atoms) > 1:
            scores = [float(geff @ a) for a in atoms]
            ai = int(np.argmax(scores))
            away_gap = scores[ai] - float(geff @ z)
            alpha = weights[ai]
            if alpha < 1.0 - 1e-12 and away_gap > 0.0:
                moves.append(("away", z - atoms[ai], alpha / (1.0 - alpha), ai))
                if away_gap > gap:
                    moves.reverse()

        stepped = False
        for move in moves:
            name, d, gmax, extra = move
            if gmax <= 0.0 or float(np.abs(d).max()) <= 1e-15:
                continue
            if opts.step_rule == "exact-line-search":
                gamma, new_val = _exact_step(objective, z, d, gmax, sigma, val)
            else:
                slope = float(geff @ d)
                if slope >= 0.0:
                    continue
                gamma, new_val = _backtracking_step(
                    objective, z, d, gmax, sigma, val, slope
                )
            if gamma <= 0.0:
                continue
            z = z + gamma * d
            if name == "fw":
                frac = gamma  # gmax == 1
                weights = [w * (1.0 - frac) for w in weights]
                key = target.z.tobytes()
                if key in keys:
                    weights[keys[key]] += frac
                else:
                    keys[key] = len(atoms)
                    atoms.append(target.z.copy())
                    weights.append(frac)
            else:
                ai = extra
                weights = [w * (1.0 + gamma) for w in weights]
                weights[ai] -= gamma
            # Prune dead atoms to keep the away search cheap.
            if any(w <= 1e-14 for w in weights):
                packed = [
                    (a, w) for a, w in zip(atoms, weights) if w > 1e-14
                ]
                atoms = [a for a, _ in packed]
                weights = [w for _, w in packed]
                keys = {a.tobytes(): i for i, a in enumerate(atoms)}
            stepped = True
            break
        if not stepped:
            break

    final_val, final_grad = objective.value_and_gradient(z)
    target = lp_block_oracle(sigma * final_grad, space, "min")
    gap = max(float(sigma * final_grad @ (z - target.z)), 0.0)
    return FWResult(
        z=z,
        value=final_val,
        fw_gap=gap,
        iterations=iters,
        values=np.asarray(history),
    )


def repair_into(
    space: CouplingSpace, coupling: PairwiseCoupling
) -> PairwiseCoupling:
    """Carry a coupling into a (differently constrained) space over the same
    blocks.

    Used to warm-start one constraint mode with another's optimum.  Where the
    source mass already respects the target's zero pattern it is copied
    verbatim; otherwise the block is replaced by the feasible plan with
    maximal overlap with the source (a transportation LP with the source
    plan as negated costs).
    """
    if coupling.space is space:
        return coupling
    src = coupling.space
    z = np.zeros(space.total_cells)
    for bi, blk in enumerate(space.blocks):
        found = src.lookup_directed(blk.kind, tuple(blk.k), tuple(blk.l))
        if found is None:
            raise ValueError(
                f"start coupling lacks block {blk.describe()}; it was built "
                "for different samples or trajectory"
            )
        sbi, transposed = found
        dense = coupling.block_matrix(sbi)
        if transposed:
            dense = dense.T
        sblk = src.blocks[sbi]
        rows = sblk.col_outcomes if transposed else sblk.row_outcomes
        cols = sblk.row_outcomes if transposed else sblk.col_outcomes
        if not (
            np.array_equal(rows, blk.row_outcomes)
            and np.array_equal(cols, blk.col_outcomes)
        ):  # pragma: no cover - same model+samples always align
            raise ValueError(
                f"block {blk.describe()} has mismatched outcome support "
                "between the two spaces"
            )
        idx = space.cell_index(bi)
        mask = idx >= 0
        if float(dense[~mask].sum()) <= 1e-15:
            z[idx[mask]] = dense[mask]
            continue
        plan, status = solve_transport(
            -dense, blk.row_marginal, blk.col_marginal, mask
        )
        if status != 0:
            raise InfeasibleBlockError(
                blk,
                "zero constraints leave no feasible plan for the block margins",
            )
        z[idx[mask]] = plan[mask]
    return PairwiseCoupling(space=space, z=z)


def _gather_starts(
    space: CouplingSpace,
    ranks: RankOrdering,
    opts: SolveOptions,
    seed: int,
) -> list[tuple[str, np.ndarray]]:
    """Deterministic starts, user-mandated starts, then random ones."""
    starts: list[tuple[str, np.ndarray]] = []
    try:
        starts.append(("independence", independence_coupling(space).z))
    except StartInfeasibleError:
        pass
    try:
        starts.append(("comonotonic", comonotonic_coupling(space, ranks).z))
    except StartInfeasibleError:
        pass
    base = phase1_feasible_point(space)  # raises with a certificate if empty
    starts.append(("phase1", base.z))
    for j, extra in enumerate(opts.mandatory_starts):
        starts.append((f"mandatory{j}", repair_into(space, extra).z))
    rs = seed if opts.seed is None else opts.seed
    for k in range(opts.restarts):
        rng = substream(rs, 90, k)
        pseudo = rng.standard_normal(space.total_cells)
        vertex = lp_block_oracle(pseudo, space, "min")
        lam = rng.uniform()
        starts.append((f"random{k}", lam * base.z + (1.0 - lam) * vertex.z))
    return starts


def _extremize_over_starts(
    objective: PNObjective,
    starts: Sequence[tuple[str, np.ndarray]],
    opts: SolveOptions,
) -> BoundReport:
    sigma = 1.0 if opts.direction == "min" else -1.0
    t0 = time.perf_counter()
    best: Optional[FWResult] = None
    trace = []
    for label, z0 in starts:
        res = frank_wolfe_extremize(objective, z0, opts)
        trace.append(RestartTrace(label, res.iterations, res.fw_gap, res.value))
        if best is None or sigma * res.value < sigma * best.value:
            best = res
    wall_ms = (time.perf_counter() - t0) * 1e3
    coupling = PairwiseCoupling(space=objective.space, z=best.z)
    residual = check_feasibility(coupling)
    if residual > 1e-8:  # pragma: no cover - every step preserves feasibility
        raise RuntimeError(
            f"optimizer produced an infeasible coupling (residual {residual:g})"
        )
    return BoundReport(
        value=best.value,
        coupling=coupling,
        direction=opts.direction,
        fw_gap=best.fw_gap,
        residual=residual,
        wall_ms=wall_ms,
        trace=tuple(trace),
    )


def bound_pn(
    m: ModelPrimitives,
    traj: Trajectory,
    B: int,
    seed: int,
    constraint_mode: str = "base",
    opts: Optional[SolveOptions] = None,
    *,
    forbidden_state: Optional[int] = None,
    pm_zeros: Optional[Sequence[PMZero]] = None,
    ranks: Optional[RankOrdering] = None,
    samples: Optional[PosteriorSampleSet] = None,
) -> tuple[BoundReport, BoundReport]:
    """Lower and upper bounds on the counterfactual survival probability.

    Draws ``B`` posterior sample paths (or reuses ``samples``), builds the
    coupling space restricted to the pairs those samples touch, applies the
    zero pattern of ``constraint_mode`` — ``"base"`` (margins only),
    ``"cs"`` (counterfactual stability), ``"pm"`` (pathwise monotonicity,
    needs ``pm_zeros``), or ``"cs+pm"`` — and extremizes both directions by
    multi-start Frank-Wolfe.  Returns ``(lower, upper)`` reports; an
    over-restricted zero pattern raises :class:`InfeasibleBlockError` naming
    the infeasible block.
    """
    if constraint_mode not in CONSTRAINT_MODES:
        raise ValueError(
            f"constraint_mode must be one of {CONSTRAINT_MODES}, "
            f"got {constraint_mode!r}"
        )
    opts = SolveOptions() if opts is None else opts
    if forbidden_state is None:
        forbidden_state = m.num_states - 1
    if ranks is None:
        ranks = identity_ranks(m)
    if samples is None:
        samples = sample_posterior_paths(m, traj, B, seed)

    blocks = enumerate_blocks(m, needed_pairs(m, traj, samples))
    parts = constraint_mode.split("+")
    cell_sets = []
    if "cs" in parts:
        cell_sets.append(cs_forbidden_cells(m, blocks))
    if "pm" in parts:
        if pm_zeros is None:
            raise ValueError(
                "constraint mode includes 'pm' but no pathwise-monotonicity "
                "zero list was given"
            )
        cell_sets.append(pm_forbidden_cells(blocks, pm_zeros))
    if cell_sets:
        blocks = with_forbidden(blocks, *cell_sets)
    space = build_space(blocks, model=m)
    objective = PNObjective(space, samples, traj, forbidden_state)

    starts = _gather_starts(space, ranks, opts, seed)
    lower = _extremize_over_starts(
        objective, starts, replace(opts, direction="min")
    )
    upper = _extremize_over_starts(
        objective, starts, replace(opts, direction="max")
    )
    if lower.value > upper.value + 1e-9:  # pragma: no cover - shared starts
        raise RuntimeError(
            f"bound inversion: lower {lower.value:.12f} > upper "
            f"{upper.value:.12f}"
        )
    return lower, upper


BOUNDS_CSV_HEADER = (
    "path_label,T,B,seed,mode,lb,ub,lb_fwgap,ub_fwgap,restarts"
)


def bounds_csv_row(
    path_label: str,
    T: int,
    B: int,
    seed: int,
    mode: str,
    lower: BoundReport,
    upper: BoundReport,
    timing: bool = False,
) -> list:
    """One bounds-table row; append wall time only when asked, so that
    repeated runs stay byte-identical."""
    row = [
        path_label,
        T,
        B,
        seed,
        mode,
        f"{lower.value:.12g}",
        f"{upper.value:.12g}",
        f"{lower.fw_gap:.6g}",
        f"{upper.fw_gap:.6g}",
        lower.n_starts,
    ]
    if timing:
        row.append(f"{lower.wall_ms + upper.wall_ms:.3f}")
    return row
