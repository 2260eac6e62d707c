"""Recursion-vs-expansion oracle pair, exact gradients, normalization."""

from __future__ import annotations

import numpy as np
import pytest

from cfbounds.coupling import (
    build_space,
    enumerate_blocks,
    independence_coupling,
    needed_pairs,
)
from cfbounds.inference import PosteriorSampleSet, sample_posterior_paths
from cfbounds.model import ModelPrimitives, Trajectory
from cfbounds.objective import (
    PNObjective,
    SampleModelMismatch,
    eval_pn,
    eval_pn_expanded,
    grad_pn,
)

from conftest import random_feasible_coupling, random_model, random_trajectory


def make_instance(rng, H, O, X, T, B, sparsity=0.0):
    """Random (model, trajectory, samples, full space) tuple."""
    m = random_model(rng, H=H, X=X, O=O, sparsity=sparsity)
    traj = random_trajectory(rng, m, T=T)
    samples = sample_posterior_paths(m, traj, B=B, seed=int(rng.integers(2**31)))
    space = build_space(enumerate_blocks(m), model=m)
    return m, traj, samples, space


class TestExpandedOracle:
    def test_recursion_matches_expansion(self, rng):
        for trial in range(30):
            H = int(rng.integers(2, 4))
            O = int(rng.integers(2, 4))
            X = int(rng.integers(1, 3))
            T = int(rng.integers(2, 6 if H == 2 and O == 2 else 5))
            B = int(rng.integers(1, 5))
            m, traj, samples, space = make_instance(
                rng, H, O, X, T, B, sparsity=0.2 if trial % 3 == 0 else 0.0
            )
            z = random_feasible_coupling(rng, space)
            forbidden = int(rng.integers(0, H))
            fast = eval_pn(z, samples, traj, forbidden)
            slow = eval_pn_expanded(z, samples, traj, forbidden)
            assert fast == pytest.approx(slow, abs=1e-10)

    def test_t1_base_case(self, rng):
        m, traj, samples, space = make_instance(rng, H=3, O=2, X=1, T=1, B=50)
        z = independence_coupling(space)
        for forbidden in range(3):
            want = 1.0 - np.mean(samples.paths[:, 0] == forbidden)
            assert eval_pn(z, samples, traj, forbidden) == pytest.approx(want)
            assert eval_pn_expanded(z, samples, traj, forbidden) == pytest.approx(want)
        assert np.all(grad_pn(z, samples, traj, 0) == 0.0)

    def test_hand_expanded_two_period_single_sample(self):
        # One step, started in state 1 for sure, observed (o=1, x=1), the
        # sampled next state is 2, and the counterfactual action differs.
        # Under the product coupling the counterfactual emission is drawn
        # fresh from E[1, x̃]=(0.3,0.7); matching emissions (prob 0.3) pin
        # the counterfactual transition to the factual one (self-pair),
        # otherwise H̃_2 ~ Q[1, 2]=(0.25,0.75):
        #   gamma_2 = 0.3·(0,1) + 0.7·(0.25,0.75) = (0.175, 0.825)
        E = np.array([[[0.5, 0.5], [0.3, 0.7]], [[0.6, 0.4], [0.2, 0.8]]])
        Q = np.array([[[0.5, 0.5], [0.25, 0.75]], [[0.9, 0.1], [0.4, 0.6]]])
        m = ModelPrimitives(p=np.array([1.0, 0.0]), E=E, Q=Q)
        traj = Trajectory(
            o=np.array([0, 1]), x=np.array([0, 0]), x_tilde=np.array([1, 0])
        )
        samples = PosteriorSampleSet(paths=np.array([[0, 1]]), seed=0)
        space = build_space(enumerate_blocks(m), model=m)
        z = independence_coupling(space)
        assert eval_pn(z, samples, traj, 1) == pytest.approx(0.175, abs=1e-12)
        assert eval_pn_expanded(z, samples, traj, 1) == pytest.approx(
            0.175, abs=1e-12
        )

    def test_factual_replay_for_any_coupling(self, rng):
        # with x̃ = x the recursion collapses to the factual sample path
        # regardless of z: every factor it can reach is a self-pair
        m = random_model(rng, H=3, X=2, O=3)
        traj0 = random_trajectory(rng, m, T=4)
        traj = Trajectory(o=traj0.o, x=traj0.x, x_tilde=traj0.x.copy())
        samples = sample_posterior_paths(m, traj, B=40, seed=9)
        space = build_space(enumerate_blocks(m), model=m)
        want = 1.0 - np.mean(samples.paths[:, -1] == 2)
        for _ in range(3):
            z = random_feasible_coupling(rng, space)
            assert eval_pn(z, samples, traj, 2) == pytest.approx(want, abs=1e-12)

    def test_expanded_refuses_long_horizons(self, rng):
        m, traj, samples, space = make_instance(rng, H=2, O=2, X=1, T=7, B=2)
        z = independence_coupling(space)
        with pytest.raises(ValueError, match="exponential"):
            eval_pn_expanded(z, samples, traj, 0)


class TestGradient:
    def test_matches_central_differences(self, rng):
        checked = 0
        while checked < 20:
            H = int(rng.integers(2, 4))
            O = int(rng.integers(2, 4))
            m, traj, samples, space = make_instance(
                rng, H, O, X=2, T=int(rng.integers(2, 5)), B=3
            )
            obj = PNObjective(space, samples, traj, forbidden_state=0)
            z = random_feasible_coupling(rng, space)
            g = obj.gradient(z)
            zv = z.z
            eps = 1e-6
            fd = np.empty_like(g)
            for k in range(zv.shape[0]):
                zp, zm = zv.copy(), zv.copy()
                zp[k] += eps
                zm[k] -= eps
                fd[k] = (obj.value(zp) - obj.value(zm)) / (2 * eps)
            # 1e-8 absolute floor: the difference quotient itself carries
            # ~1e-10 cancellation noise at this step size
            tol = 1e-5 * np.maximum(np.abs(fd), np.abs(g)) + 1e-8
            assert np.all(np.abs(fd - g) <= tol)
            checked += 1

    def test_directional_derivative_linearity(self, rng):
        m, traj, samples, space = make_instance(rng, H=3, O=3, X=2, T=4, B=4)
        obj = PNObjective(space, samples, traj, forbidden_state=1)
        z = random_feasible_coupling(rng, space)
        g = obj.gradient(z)
        d = rng.normal(size=z.z.shape)
        for eps in (1e-3, 1e-4):
            fd = (obj.value(z.z + eps * d) - obj.value(z.z - eps * d)) / (2 * eps)
            assert fd == pytest.approx(float(g @ d), rel=1e-6, abs=1e-9)

    def test_untouched_blocks_have_zero_gradient(self, rng):
        # samples never visit state 2, so blocks whose parents both live on
        # state 2 are never gathered by the recursion
        m = random_model(rng, H=3, X=2, O=2)
        traj = Trajectory(
            o=np.array([0, 1, 0]),
            x=np.array([0, 1, 0]),
            x_tilde=np.array([1, 0, 1]),
        )
        samples = PosteriorSampleSet(
            paths=np.array([[0, 1, 0], [1, 0, 1], [0, 0, 1]]), seed=0
        )
        space = build_space(enumerate_blocks(m), model=m)
        z = random_feasible_coupling(rng, space)
        g = grad_pn(z, samples, traj, 0)
        for bi, blk in enumerate(space.blocks):
            if blk.k[0] == 2 and blk.l[0] == 2:
                idx = space.cell_index(bi)
                assert np.all(g[idx[idx >= 0]] == 0.0)

    def test_gradient_nonzero_somewhere(self, rng):
        m = random_model(rng, H=2, X=2, O=2)
        t0 = random_trajectory(rng, m, T=3)
        traj = Trajectory(o=t0.o, x=t0.x, x_tilde=1 - t0.x)  # always intervene
        samples = sample_posterior_paths(m, traj, B=4, seed=11)
        space = build_space(enumerate_blocks(m), model=m)
        z = random_feasible_coupling(rng, space)
        assert np.any(grad_pn(z, samples, traj, 0) != 0.0)


class TestForwardStates:
    def test_normalization_and_range(self, rng):
        for _ in range(10):
            H = int(rng.integers(2, 4))
            m, traj, samples, space = make_instance(
                rng, H, O=int(rng.integers(2, 4)), X=2, T=5, B=8
            )
            obj = PNObjective(space, samples, traj, forbidden_state=0)
            z = random_feasible_coupling(rng, space)
            states = obj.forward_states(z)
            np.testing.assert_allclose(states.totals(), 1.0, atol=1e-9)
            val = obj.value(z)
            assert -1e-7 <= val <= 1 + 1e-7

    def test_initial_point_mass_tracks_each_sample(self, rng):
        m, traj, samples, space = make_instance(rng, H=3, O=2, X=2, T=3, B=12)
        obj = PNObjective(space, samples, traj, forbidden_state=0)
        states = obj.forward_states(independence_coupling(space))
        B = samples.B
        want = np.zeros((B, 3))
        want[np.arange(B), samples.paths[:, 0]] = 1.0
        np.testing.assert_array_equal(states.gamma[:, 0, :], want)


class TestSegmentValues:
    def test_matches_pointwise_evaluation(self, rng):
        m, traj, samples, space = make_instance(rng, H=3, O=3, X=2, T=4, B=5)
        obj = PNObjective(space, samples, traj, forbidden_state=2)
        z0 = random_feasible_coupling(rng, space)
        z1 = random_feasible_coupling(rng, space)
        etas = np.concatenate([np.linspace(0.0, 1.0, 7), [-0.25, 1.25]])
        batch = obj.values_on_segment(z0.z, z1.z, etas)
        point = [obj.value((1 - e) * z0.z + e * z1.z) for e in etas]
        np.testing.assert_allclose(batch, point, atol=1e-12)


class TestValidation:
    def test_zero_emission_denominator_names_sample_and_period(self):
        E = np.array([[[1.0, 0.0]], [[0.5, 0.5]]])
        Q = np.full((2, 2, 2), 0.5)
        m = ModelPrimitives(p=np.array([0.5, 0.5]), E=E, Q=Q)
        traj = Trajectory(
            o=np.array([1, 0]), x=np.array([0, 0]), x_tilde=np.array([0, 0])
        )
        samples = PosteriorSampleSet(paths=np.array([[0, 0]]), seed=0)
        space = build_space(enumerate_blocks(m), model=m)
        with pytest.raises(SampleModelMismatch, match="sample 1 .* period 1"):
            PNObjective(space, samples, traj, forbidden_state=0)

    def test_zero_transition_denominator_names_sample_and_period(self):
        E = np.full((2, 1, 2), 0.5)
        Q = np.array([[[1.0, 0.0], [0.5, 0.5]], [[0.5, 0.5], [0.5, 0.5]]])
        m = ModelPrimitives(p=np.array([0.5, 0.5]), E=E, Q=Q)
        traj = Trajectory(
            o=np.array([0, 0, 0]),
            x=np.array([0, 0, 0]),
            x_tilde=np.array([0, 0, 0]),
        )
        samples = PosteriorSampleSet(paths=np.array([[1, 0, 1], [1, 1, 1]]), seed=0)
        space = build_space(enumerate_blocks(m), model=m)
        with pytest.raises(SampleModelMismatch, match="sample 1 .* period 2"):
            PNObjective(space, samples, traj, forbidden_state=0)

    def test_missing_required_block_is_loud(self, rng):
        m = random_model(rng, H=3, X=2, O=2)
        traj = Trajectory(
            o=np.array([0, 1, 0]),
            x=np.array([0, 0, 0]),
            x_tilde=np.array([1, 1, 1]),
        )
        narrow = PosteriorSampleSet(paths=np.array([[0, 1, 0]]), seed=0)
        wide = PosteriorSampleSet(paths=np.array([[2, 2, 2]]), seed=0)
        space = build_space(
            enumerate_blocks(m, needed_pairs(m, traj, narrow)), model=m
        )
        PNObjective(space, narrow, traj, forbidden_state=0)  # fine
        with pytest.raises(ValueError, match="missing"):
            PNObjective(space, wide, traj, forbidden_state=0)

    def test_foreign_space_coupling_rejected(self, rng):
        m, traj, samples, space = make_instance(rng, H=2, O=2, X=1, T=2, B=2)
        other = build_space(enumerate_blocks(m), model=m)
        obj = PNObjective(space, samples, traj, forbidden_state=0)
        with pytest.raises(ValueError, match="different space"):
            obj.value(independence_coupling(other))

    def test_spaceless_model_rejected(self, rng):
        m, traj, samples, space = make_instance(rng, H=2, O=2, X=1, T=2, B=2)
        bare = build_space(space.blocks)  # no model attached
        z = independence_coupling(bare)
        with pytest.raises(ValueError, match="no model"):
            eval_pn(z, samples, traj, 0)

    def test_wrapper_cache_reuses_objective(self, rng):
        m, traj, samples, space = make_instance(rng, H=2, O=2, X=1, T=3, B=3)
        z = independence_coupling(space)
        a = eval_pn(z, samples, traj, 0)
        b = eval_pn(z, samples, traj, 0)
        assert a == b
