"""Optimizer tests: LP oracle exactness, Frank-Wolfe behaviour, bound_pn."""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from cfbounds.coupling import (
    TRANSITION,
    BlockSpec,
    InfeasibleBlockError,
    PMZero,
    build_space,
    check_feasibility,
    independence_coupling,
    phase1_feasible_point,
)
from cfbounds.inference import sample_posterior_paths
from cfbounds.model import ModelPrimitives, Trajectory
from cfbounds.objective import PNObjective, eval_pn
from cfbounds.optimizer import (
    BOUNDS_CSV_HEADER,
    SolveOptions,
    bound_pn,
    bounds_csv_row,
    frank_wolfe_extremize,
    lp_block_oracle,
    repair_into,
)

from conftest import random_model, random_trajectory
from oracles import transportation_vertex_plans


def synthetic_block(r, c, *, k=(0, 0), l=(0, 1), forbidden=frozenset()):
    r = np.asarray(r, dtype=float)
    c = np.asarray(c, dtype=float)
    return BlockSpec(
        kind=TRANSITION,
        k=k,
        l=l,
        row_outcomes=np.arange(r.shape[0]),
        col_outcomes=np.arange(c.shape[0]),
        row_marginal=r,
        col_marginal=c,
        forbidden=forbidden,
    )


class TestLpBlockOracle:
    def test_uniform_gradient_value_is_total_mass(self, rng):
        """Every margin row sums to one, so a uniform gradient scores any
        feasible point identically: one unit per block."""
        blocks = [
            synthetic_block(rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3))),
            synthetic_block(
                rng.dirichlet(np.ones(2)),
                rng.dirichlet(np.ones(4)),
                l=(0, 2),
            ),
        ]
        space = build_space(blocks)
        g = np.ones(space.total_cells)
        vertex = lp_block_oracle(g, space, "min")
        assert g @ vertex.z == pytest.approx(len(blocks), abs=1e-12)
        assert g @ independence_coupling(space).z == pytest.approx(
            len(blocks), abs=1e-12
        )

    def test_single_cell_objective_hits_lower_frechet_bound(self):
        space = build_space(
            [synthetic_block([0.3, 0.7], [0.4, 0.6])]
        )
        g = np.zeros(space.total_cells)
        g[space.cell_index(0)[0, 0]] = 1.0
        vertex = lp_block_oracle(g, space, "min")
        assert vertex.block_matrix(0)[0, 0] == pytest.approx(0.0, abs=1e-12)
        # and the same cell maximized reaches min(r0, c0)
        vertex = lp_block_oracle(g, space, "max")
        assert vertex.block_matrix(0)[0, 0] == pytest.approx(0.3, abs=1e-12)

    @pytest.mark.parametrize("trial", range(10))
    def test_matches_vertex_enumeration_3x3(self, rng, trial):
        r = rng.dirichlet(np.ones(3))
        c = rng.dirichlet(np.ones(3))
        forbidden = frozenset({(0, 2)}) if trial % 2 else frozenset()
        blk = synthetic_block(r, c, forbidden=forbidden)
        space = build_space([blk])
        g = rng.standard_normal(space.total_cells)
        cost = np.zeros((3, 3))
        idx = space.cell_index(0)
        mask = idx >= 0
        cost[mask] = g[idx[mask]]
        best = min(
            float((cost * plan).sum())
            for plan in transportation_vertex_plans(r, c, mask)
        )
        vertex = lp_block_oracle(g, space, "min")
        assert g @ vertex.z == pytest.approx(best, abs=1e-9)

    def test_direction_max_flips_sign(self, rng):
        blk = synthetic_block(rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3)))
        space = build_space([blk])
        g = rng.standard_normal(space.total_cells)
        lo = lp_block_oracle(g, space, "min")
        hi = lp_block_oracle(g, space, "max")
        assert g @ lo.z <= g @ hi.z + 1e-12
        np.testing.assert_allclose(
            hi.z, lp_block_oracle(-g, space, "min").z, atol=0
        )

    def test_infeasible_zero_pattern_names_block(self):
        blk = synthetic_block(
            [0.5, 0.5], [0.5, 0.5], forbidden=frozenset({(0, 0), (0, 1)})
        )
        space = build_space([blk])
        with pytest.raises(InfeasibleBlockError, match=r"\(1,1\)x\(1,2\)"):
            lp_block_oracle(np.zeros(space.total_cells), space, "min")

    def test_rejects_bad_inputs(self, rng):
        space = build_space([synthetic_block([0.5, 0.5], [0.5, 0.5])])
        with pytest.raises(ValueError, match="direction"):
            lp_block_oracle(np.zeros(space.total_cells), space, "down")
        with pytest.raises(ValueError, match="shape"):
            lp_block_oracle(np.zeros(3), space, "min")


def tiny_instance(rng, *, H=2, X=2, O=2, T=3, B=3, sparsity=0.0, seed=5):
    m = random_model(rng, H, X, O, sparsity=sparsity)
    traj = random_trajectory(rng, m, T)
    traj = Trajectory(o=traj.o, x=traj.x, x_tilde=1 - traj.x)
    samples = sample_posterior_paths(m, traj, B, seed)
    return m, traj, samples


class TestFrankWolfe:
    def test_constant_objective_stops_after_one_iteration(self, rng):
        """T=1 leaves nothing to couple: the objective is constant in z and
        the first gap check already certifies optimality."""
        m, traj, samples = tiny_instance(rng, T=1, B=4)
        space = build_space([], model=m)
        obj = PNObjective(space, samples, traj, forbidden_state=1)
        res = frank_wolfe_extremize(
            obj, np.zeros(0), SolveOptions(direction="min")
        )
        assert res.iterations == 1
        assert res.fw_gap == 0.0
        frac = np.mean(samples.paths[:, 0] == 1)
        assert res.value == pytest.approx(1.0 - frac, abs=1e-12)

    def test_monotone_progress_both_directions(self, rng):
        m, traj, samples = tiny_instance(rng, H=3, O=3, T=4, B=6)
        from cfbounds.coupling import enumerate_blocks, needed_pairs

        space = build_space(
            enumerate_blocks(m, needed_pairs(m, traj, samples)), model=m
        )
        obj = PNObjective(space, samples, traj, forbidden_state=2)
        z0 = phase1_feasible_point(space).z
        for direction, sgn in (("min", 1.0), ("max", -1.0)):
            res = frank_wolfe_extremize(
                obj, z0, SolveOptions(direction=direction)
            )
            steps = np.diff(sgn * res.values)
            assert np.all(steps <= 1e-12)
            assert sgn * res.value <= sgn * res.values[-1] + 1e-12

    def test_backtracking_rule_also_descends(self, rng):
        m, traj, samples = tiny_instance(rng, H=3, O=3, T=4, B=6)
        from cfbounds.coupling import enumerate_blocks, needed_pairs

        space = build_space(
            enumerate_blocks(m, needed_pairs(m, traj, samples)), model=m
        )
        obj = PNObjective(space, samples, traj, forbidden_state=2)
        z0 = independence_coupling(space).z
        exact = frank_wolfe_extremize(obj, z0, SolveOptions(direction="min"))
        back = frank_wolfe_extremize(
            obj,
            z0,
            SolveOptions(direction="min", step_rule="backtracking"),
        )
        assert np.all(np.diff(back.values) <= 1e-12)
        # backtracking is allowed to be slower, not wildly worse
        assert back.value <= obj.value(z0) + 1e-12
        assert exact.value <= back.value + 1e-9

    def test_away_steps_toggle_changes_nothing_on_easy_problem(self, rng):
        m, traj, samples = tiny_instance(rng, T=3, B=4)
        from cfbounds.coupling import enumerate_blocks, needed_pairs

        space = build_space(
            enumerate_blocks(m, needed_pairs(m, traj, samples)), model=m
        )
        obj = PNObjective(space, samples, traj, forbidden_state=1)
        z0 = independence_coupling(space).z
        with_away = frank_wolfe_extremize(obj, z0, SolveOptions(direction="min"))
        without = frank_wolfe_extremize(
            obj, z0, SolveOptions(direction="min", away_steps=False)
        )
        assert with_away.value == pytest.approx(without.value, abs=1e-8)

    def test_non_finite_objective_aborts_loudly(self, rng):
        m, traj, samples = tiny_instance(rng, T=3, B=4)
        from cfbounds.coupling import enumerate_blocks, needed_pairs

        space = build_space(
            enumerate_blocks(m, needed_pairs(m, traj, samples)), model=m
        )
        obj = PNObjective(space, samples, traj, forbidden_state=1)
        z_bad = np.full(space.total_cells, np.nan)
        with pytest.raises(RuntimeError, match="non-finite"):
            frank_wolfe_extremize(obj, z_bad, SolveOptions(direction="min"))


class TestAgainstVertexEnumeration:
    """At T=2 every block enters each sample's recursion at most once, so the
    objective is linear in each block separately and both extrema are
    attained at products of block vertices — enumerable for tiny models."""

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_global_extrema_on_toy_problem(self, seed):
        rng = np.random.default_rng(1000 + seed)
        m, traj, samples = tiny_instance(rng, H=2, X=2, O=2, T=2, B=2, seed=seed)
        lb, ub = bound_pn(
            m,
            traj,
            B=samples.B,
            seed=seed,
            constraint_mode="base",
            opts=SolveOptions(restarts=8, seed=seed),
            forbidden_state=1,
            samples=samples,
        )
        space = lb.coupling.space
        per_block = []
        for bi, blk in enumerate(space.blocks):
            mask = space.cell_index(bi) >= 0
            per_block.append(
                list(
                    transportation_vertex_plans(
                        blk.row_marginal, blk.col_marginal, mask
                    )
                )
            )
        values = []
        for combo in itertools.product(*per_block):
            z = np.zeros(space.total_cells)
            for bi, plan in enumerate(combo):
                idx = space.cell_index(bi)
                mask = idx >= 0
                z[idx[mask]] = plan[mask]
            coupling = lb.coupling.with_z(z)
            values.append(eval_pn(coupling, samples, traj, 1))
        assert lb.value == pytest.approx(min(values), abs=1e-6)
        assert ub.value == pytest.approx(max(values), abs=1e-6)


class TestBoundPn:
    def test_bounds_sandwich_every_start(self, rng):
        m, traj, samples = tiny_instance(rng, H=3, O=3, T=4, B=8)
        lb, ub = bound_pn(
            m,
            traj,
            B=8,
            seed=11,
            samples=samples,
            opts=SolveOptions(restarts=4),
            forbidden_state=2,
        )
        assert lb.value <= ub.value + 1e-12
        for report in (lb, ub):
            assert check_feasibility(report.coupling) <= 1e-8
            assert report.residual <= 1e-8
        for trace in (lb.trace, ub.trace):
            labels = [t.label for t in trace]
            assert "phase1" in labels
        # the optimum dominates the value reached from every start
        assert all(lb.value <= t.value + 1e-9 for t in lb.trace)
        assert all(ub.value >= t.value - 1e-9 for t in ub.trace)
        # deterministic starts are inside the bounds (sandwich)
        space = lb.coupling.space
        for start in (
            independence_coupling(space),
            phase1_feasible_point(space),
        ):
            v = eval_pn(start, samples, traj, 2)
            assert lb.value - 1e-9 <= v <= ub.value + 1e-9

    def test_runs_are_deterministic(self, rng):
        m, traj, _ = tiny_instance(rng, H=3, O=3, T=4)
        kw = dict(
            B=6,
            seed=4,
            constraint_mode="base",
            opts=SolveOptions(restarts=3),
            forbidden_state=2,
        )
        lb1, ub1 = bound_pn(m, traj, **kw)
        lb2, ub2 = bound_pn(m, traj, **kw)
        assert lb1.value == lb2.value
        assert ub1.value == ub2.value
        np.testing.assert_array_equal(lb1.coupling.z, lb2.coupling.z)
        row1 = bounds_csv_row("toy", traj.T, 6, 4, "base", lb1, ub1)
        row2 = bounds_csv_row("toy", traj.T, 6, 4, "base", lb2, ub2)
        assert row1 == row2

    def test_more_restarts_never_loosen(self, rng):
        m, traj, samples = tiny_instance(rng, H=3, O=3, T=4, B=6)
        few = bound_pn(
            m, traj, B=6, seed=4, samples=samples,
            opts=SolveOptions(restarts=1, seed=0), forbidden_state=2,
        )
        many = bound_pn(
            m, traj, B=6, seed=4, samples=samples,
            opts=SolveOptions(restarts=10, seed=0), forbidden_state=2,
        )
        assert many[0].value <= few[0].value + 1e-12
        assert many[1].value >= few[1].value - 1e-12

    def test_constraint_modes_nest(self, rng):
        """cs zeros only shrink the polytope, so cs bounds warm-started into
        the base solve can never extend past the base bounds."""
        for attempt in range(6):
            m, traj, samples = tiny_instance(
                rng, H=3, O=3, T=4, B=6, seed=100 + attempt
            )
            try:
                cs_lb, cs_ub = bound_pn(
                    m, traj, B=6, seed=1, samples=samples,
                    constraint_mode="cs",
                    opts=SolveOptions(restarts=3), forbidden_state=2,
                )
            except InfeasibleBlockError:
                continue  # random model with over-restrictive stability zeros
            break
        else:
            pytest.skip("no feasible cs instance drawn")
        opts = SolveOptions(
            restarts=3, mandatory_starts=(cs_lb.coupling, cs_ub.coupling)
        )
        lb, ub = bound_pn(
            m, traj, B=6, seed=1, samples=samples,
            constraint_mode="base", opts=opts, forbidden_state=2,
        )
        assert lb.value <= cs_lb.value + 1e-9
        assert ub.value >= cs_ub.value - 1e-9
        labels = [t.label for t in lb.trace]
        assert "mandatory0" in labels and "mandatory1" in labels

    def test_repair_into_copies_when_pattern_allows(self, rng):
        m, traj, samples = tiny_instance(rng, H=3, O=3, T=3, B=4)
        from cfbounds.coupling import enumerate_blocks, needed_pairs

        blocks = enumerate_blocks(m, needed_pairs(m, traj, samples))
        wide = build_space(blocks, model=m)
        point = independence_coupling(wide)
        same = repair_into(wide, point)
        assert same is point
        # same blocks, no extra zeros: the transfer is exact
        other = build_space(blocks, model=m)
        moved = repair_into(other, point)
        np.testing.assert_array_equal(moved.z, point.z)
        assert check_feasibility(moved) <= 1e-12

    def test_infeasible_pm_zero_list_raises_certificate(self):
        """Pin an entire emission row to zero; the block margin strands."""
        E = np.array([[[0.5, 0.5], [0.3, 0.7]]])  # H=1, X=2, O=2
        Q = np.ones((1, 2, 1))
        m = ModelPrimitives(p=np.array([1.0]), E=E, Q=Q)
        traj = Trajectory(
            o=np.array([0, 1]), x=np.array([0, 0]), x_tilde=np.array([1, 1])
        )
        pm = [
            PMZero("emission", (0, 1), (0, 0), left_outcome=o, right_outcome=0)
            for o in range(2)
        ]
        with pytest.raises(InfeasibleBlockError) as exc:
            bound_pn(
                m, traj, B=2, seed=0, constraint_mode="pm",
                opts=SolveOptions(restarts=1), forbidden_state=0, pm_zeros=pm,
            )
        assert "emission" in str(exc.value)

    def test_pm_mode_requires_zero_list(self, rng):
        m, traj, _ = tiny_instance(rng, T=3)
        with pytest.raises(ValueError, match="pm"):
            bound_pn(m, traj, B=2, seed=0, constraint_mode="pm")

    def test_rejects_unknown_mode(self, rng):
        m, traj, _ = tiny_instance(rng, T=3)
        with pytest.raises(ValueError, match="constraint_mode"):
            bound_pn(m, traj, B=2, seed=0, constraint_mode="tight")

    def test_options_validation(self):
        with pytest.raises(ValueError, match="restarts"):
            SolveOptions(restarts=0)
        with pytest.raises(ValueError, match="direction"):
            SolveOptions(direction="sideways")
        with pytest.raises(ValueError, match="fw_gap_tol"):
            SolveOptions(fw_gap_tol=0.0)
        with pytest.raises(ValueError, match="step_rule"):
            SolveOptions(step_rule="golden")
        with pytest.raises(ValueError, match="max_iters"):
            SolveOptions(max_iters=0)


class TestCsvRow:
    def test_layout_and_timing_toggle(self, rng):
        m, traj, _ = tiny_instance(rng, T=3)
        lb, ub = bound_pn(
            m, traj, B=3, seed=2, opts=SolveOptions(restarts=1),
            forbidden_state=1,
        )
        row = bounds_csv_row("toy", traj.T, 3, 2, "base", lb, ub)
        assert len(row) == len(BOUNDS_CSV_HEADER.split(","))
        assert row[:5] == ["toy", traj.T, 3, 2, "base"]
        assert float(row[5]) <= float(row[6])
        timed = bounds_csv_row("toy", traj.T, 3, 2, "base", lb, ub, timing=True)
        assert len(timed) == len(row) + 1
        assert float(timed[-1]) > 0.0
