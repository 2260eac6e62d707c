"""Inference against a brute-force path-enumeration oracle.

The oracle (tests/oracles.py) enumerates every latent path and computes the
exact joint weight directly in linear space.  It is deliberately naive
(exponential in T) and shares no code with the implementation under test.
"""

from __future__ import annotations

import io

import numpy as np
import pytest

from cfbounds.inference import (
    ImpossibleTrajectoryError,
    backward_smooth,
    forward_filter,
    sample_posterior_paths,
    smoothed_marginals,
)
from cfbounds.model import ModelPrimitives, Trajectory
from conftest import random_model, random_trajectory
from oracles import enumerate_path_posterior


def oracle_marginals(m: ModelPrimitives, traj: Trajectory):
    paths, weights, like = enumerate_path_posterior(m, traj)
    T, H = traj.T, m.num_states
    unary = np.zeros((T, H))
    pairwise = np.zeros((T - 1, H, H))
    for path, w in zip(paths, weights):
        for t in range(T):
            unary[t, path[t]] += w
        for t in range(T - 1):
            pairwise[t, path[t], path[t + 1]] += w
    return unary / like, pairwise / like, like


# --------------------------------------------------------------------------
# Filter / smoother vs oracle
# --------------------------------------------------------------------------


class TestAgainstOracle:
    def test_likelihood_and_marginals_match_oracle(self, rng):
        for trial in range(50):
            H = int(rng.integers(2, 4))
            m = random_model(rng, H=H, X=2, O=3, sparsity=0.25)
            T = int(rng.integers(1, 6))
            traj = random_trajectory(rng, m, T=T)

            unary_o, pairwise_o, like_o = oracle_marginals(m, traj)
            msgs = backward_smooth(m, traj)
            assert np.exp(msgs.log_likelihood) == pytest.approx(
                like_o, abs=1e-12, rel=1e-12
            )
            sm = smoothed_marginals(m, traj, msgs)
            np.testing.assert_allclose(sm.unary, unary_o, atol=1e-12)
            if T > 1:
                np.testing.assert_allclose(sm.pairwise, pairwise_o, atol=1e-12)

    def test_filtered_prefix_likelihoods_match_oracle(self, rng):
        m = random_model(rng, H=3, X=2, O=3, sparsity=0.2)
        traj = random_trajectory(rng, m, T=4)
        msgs = forward_filter(m, traj)
        # alpha[t] summed over states is the likelihood of o_1..o_t
        for t in range(traj.T):
            prefix = Trajectory(
                o=traj.o[: t + 1], x=traj.x[: t + 1], x_tilde=traj.x_tilde[: t + 1]
            )
            _, _, like = enumerate_path_posterior(m, prefix)
            got = np.exp(msgs.log_alpha[t]).sum()
            assert got == pytest.approx(like, rel=1e-12)


class TestInvariants:
    def test_pairwise_margins_match_unary(self, rng):
        for _ in range(10):
            m = random_model(rng, H=4, X=2, O=3, sparsity=0.3)
            traj = random_trajectory(rng, m, T=6)
            sm = smoothed_marginals(m, traj)
            np.testing.assert_allclose(
                sm.pairwise.sum(axis=2), sm.unary[:-1], atol=1e-9
            )
            np.testing.assert_allclose(
                sm.pairwise.sum(axis=1), sm.unary[1:], atol=1e-9
            )

    def test_long_trajectory_no_underflow(self, rng):
        # 1000 periods of low-probability emissions would underflow linear space
        m = random_model(rng, H=3, X=2, O=5)
        traj = random_trajectory(rng, m, T=1000)
        msgs = backward_smooth(m, traj)
        assert np.isfinite(msgs.log_likelihood)
        sm = smoothed_marginals(m, traj, msgs)
        assert np.all(np.isfinite(sm.unary))
        np.testing.assert_allclose(sm.unary.sum(axis=1), 1.0, atol=1e-9)

    def test_impossible_trajectory_reports_first_vanishing_period(self):
        p = [1.0, 0.0]
        E = [  # state 1 emits only o=1; state 2 emits only o=2
            [[1.0, 0.0]],
            [[0.0, 1.0]],
        ]
        Q = [  # state 1 always moves to state 1
            [[1.0, 0.0], [1.0, 0.0]],
            [[0.0, 1.0], [0.0, 1.0]],
        ]
        m = ModelPrimitives(p, E, Q)
        traj = Trajectory(o=[0, 0, 1, 0], x=[0] * 4, x_tilde=[0] * 4)
        with pytest.raises(ImpossibleTrajectoryError) as err:
            forward_filter(m, traj)
        assert err.value.t == 3


# --------------------------------------------------------------------------
# Posterior sampling
# --------------------------------------------------------------------------


class TestSampling:
    def test_empirical_path_frequencies_match_posterior(self, rng):
        m = random_model(rng, H=3, X=2, O=2, sparsity=0.2)
        traj = random_trajectory(rng, m, T=3)
        paths, weights, like = enumerate_path_posterior(m, traj)
        probs = {p: w / like for p, w in zip(paths, weights)}

        B = 40000
        samples = sample_posterior_paths(m, traj, B=B, seed=7)
        counts: dict[tuple, int] = {}
        for b in range(B):
            key = tuple(int(h) for h in samples.paths[b])
            counts[key] = counts.get(key, 0) + 1

        # no impossible path may ever be sampled
        for key in counts:
            assert probs.get(key, 0.0) > 0.0
        # each possible path frequency within 5 binomial SEs
        for key, prob in probs.items():
            if prob == 0.0:
                continue
            se = np.sqrt(prob * (1 - prob) / B)
            assert abs(counts.get(key, 0) / B - prob) < 5 * se + 1e-12

    def test_samples_deterministic_in_seed_and_prefix_stable(self, rng):
        m = random_model(rng, H=3, X=2, O=3, sparsity=0.2)
        traj = random_trajectory(rng, m, T=5)
        s1 = sample_posterior_paths(m, traj, B=50, seed=123)
        s2 = sample_posterior_paths(m, traj, B=50, seed=123)
        assert np.array_equal(s1.paths, s2.paths)
        # substream-per-draw: the first 20 draws do not depend on B
        s3 = sample_posterior_paths(m, traj, B=20, seed=123)
        assert np.array_equal(s1.paths[:20], s3.paths)
        s4 = sample_posterior_paths(m, traj, B=50, seed=124)
        assert not np.array_equal(s1.paths, s4.paths)

    def test_sampled_paths_have_positive_posterior_support(self, rng):
        for _ in range(5):
            m = random_model(rng, H=4, X=2, O=3, sparsity=0.5)
            traj = random_trajectory(rng, m, T=6)
            samples = sample_posterior_paths(m, traj, B=64, seed=3)
            for b in range(samples.B):
                h = samples.paths[b]
                assert m.p[h[0]] * m.E[h[0], traj.x[0], traj.o[0]] > 0
                for t in range(1, traj.T):
                    assert m.Q[h[t - 1], traj.o[t - 1], h[t]] > 0
                    assert m.E[h[t], traj.x[t], traj.o[t]] > 0

    def test_csv_serialization_is_one_based(self, rng):
        m = random_model(rng, H=3, X=2, O=3)
        traj = random_trajectory(rng, m, T=4)
        samples = sample_posterior_paths(m, traj, B=3, seed=1)
        buf = io.StringIO()
        samples.to_csv(buf)
        lines = buf.getvalue().strip().splitlines()
        assert lines[0] == "b,t,h"
        assert len(lines) == 1 + 3 * 4
        b, t, h = map(int, lines[1].split(","))
        assert (b, t) == (1, 1)
        assert h == int(samples.paths[0, 0]) + 1
