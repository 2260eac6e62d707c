"""Probability-of-necessity objective and its exact gradient.

Given posterior samples of the factual hidden path, the counterfactual
terminal-state distribution of each sample follows a forward recursion over
``gamma[t][h̃] = P(H̃_t = h̃ | factual path)``: each step multiplies by an
emission-pair factor ``θ((h̃,x̃_t) õ ; (h_t,x_t) o_t) / e[h_t,x_t,o_t]`` summed
over õ, and a transition-pair factor
``π((h̃,õ) h̃′ ; (h_t,o_t) h_{t+1}) / q[h_t,o_t,h_{t+1}]``.  PN is one minus
the average terminal mass on the forbidden state.

The recursion is linear in every coupling cell, so the exact gradient is a
reverse sweep of the same shape.  Evaluation cost is O(T·B·|H|²·|O|) time and
O(B·|H|·|O|) working memory: the per-step factor tables are *gathered* from
small dense lookup tables (indexed by both parents and both outcomes) and are
never stored for all steps at once.

Self-pair factors — both parents identical — are the constants ``1{õ=o_t}``
and ``1{h̃′=h_{t+1}}``; they appear in the constant part of the lookup tables
rather than as decision variables.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from itertools import product
from typing import Optional, Union

import numpy as np

from .coupling import (
    EMISSION,
    TRANSITION,
    CouplingSpace,
    PairwiseCoupling,
    needed_pairs,
)
from .inference import PosteriorSampleSet
from .model import ModelPrimitives, Trajectory

__all__ = [
    "CounterfactualForwardState",
    "PNObjective",
    "SampleModelMismatch",
    "eval_pn",
    "grad_pn",
    "eval_pn_expanded",
]


class SampleModelMismatch(ValueError):
    """A posterior sample hits a zero-probability factual factor."""

    def __init__(self, sample: int, period: int, detail: str):
        self.sample = sample
        self.period = period
        super().__init__(
            f"sample {sample} inconsistent with model at period {period}: {detail}"
        )


@dataclass(frozen=True)
class CounterfactualForwardState:
    """Forward distributions gamma[b, t, h̃] for every sample and period."""

    gamma: np.ndarray

    def totals(self) -> np.ndarray:
        """Per-(sample, period) mass totals; 1 everywhere on feasible input."""
        return self.gamma.sum(axis=2)


def _require_model(space: CouplingSpace) -> ModelPrimitives:
    if space.model is None:
        raise ValueError(
            "coupling space has no model attached; build it with "
            "build_space(blocks, model=m)"
        )
    return space.model


class PNObjective:
    """PN evaluator bound to one (space, samples, trajectory) triple.

    Construction validates the samples against the model, checks that the
    space contains every block the recursion can reach with nonzero mass,
    and precomputes the directed-cell lookup tables.  `value`, `gradient`
    and `values_on_segment` are then pure functions of the flat z vector.
    """

    def __init__(
        self,
        space: CouplingSpace,
        samples: PosteriorSampleSet,
        traj: Trajectory,
        forbidden_state: int,
    ):
        m = _require_model(space)
        H, X, O = m.num_states, m.num_actions, m.num_emissions
        if not (0 <= forbidden_state < H):
            raise ValueError(f"forbidden_state {forbidden_state} out of range")
        if samples.paths.ndim != 2 or samples.T != traj.T:
            raise ValueError(
                f"sample paths have T={samples.T}, trajectory has T={traj.T}"
            )
        if samples.paths.min() < 0 or samples.paths.max() >= H:
            raise ValueError("sample paths contain out-of-range states")

        self.space = space
        self.samples = samples
        self.traj = traj
        self.forbidden_state = int(forbidden_state)
        self._m = m

        uniq, inverse, counts = np.unique(
            samples.paths, axis=0, return_inverse=True, return_counts=True
        )
        self._paths = uniq  # (U, T)
        self._inverse = inverse.reshape(-1)  # original b -> unique u
        self._weights = counts / samples.B
        U, T = uniq.shape
        self._U, self._T = U, T

        self._check_factual_factors()
        self._check_required_blocks()

        # Dense directed lookup tables.  Entry -1 means "no decision
        # variable here" (self-pair, absent block, forbidden or
        # zero-marginal cell); gathers route -1 to a zero sentinel appended
        # at the end of the z vector.
        eidx = np.full((H, X, H, X, O, O), -1, dtype=np.int64)
        tidx = np.full((H, O, H, O, H, H), -1, dtype=np.int64)
        for bi, blk in enumerate(space.blocks):
            idx = space.cell_index(bi)
            (ha, sa), (hb, sb) = blk.k, blk.l
            target = eidx if blk.kind == EMISSION else tidx
            n_out = O if blk.kind == EMISSION else H
            sub = np.full((n_out, n_out), -1, dtype=np.int64)
            sub[np.ix_(blk.row_outcomes, blk.col_outcomes)] = idx
            target[ha, sa, hb, sb] = sub
            target[hb, sb, ha, sa] = sub.T
        econst = np.zeros((H, X, H, X, O, O))
        for h in range(H):
            for x in range(X):
                econst[h, x, h, x] = np.eye(O)
        tconst = np.zeros((H, O, H, O, H, H))
        for h in range(H):
            for o in range(O):
                tconst[h, o, h, o] = np.eye(H)
        self._eidx, self._econst = eidx, econst
        self._tidx, self._tconst = tidx, tconst

        if T > 1:
            hs = self._paths
            o, x = traj.o, traj.x
            e_obs = m.E[hs[:, :-1], x[None, :-1], o[None, :-1]]  # (U, T-1)
            q_obs = m.Q[hs[:, :-1], o[None, :-1], hs[:, 1:]]
            self._e_scale = (1.0 / e_obs).T.copy()  # (T-1, U)
            self._q_scale = (1.0 / q_obs).T.copy()

    # -- construction-time validation ------------------------------------

    def _first_sample_with(self, u: int) -> int:
        return int(np.nonzero(self._inverse == u)[0][0])

    def _check_factual_factors(self) -> None:
        m, traj = self._m, self.traj
        for u in range(self._U):
            path = self._paths[u]
            for t in range(self._T - 1):
                h, o, x = int(path[t]), int(traj.o[t]), int(traj.x[t])
                if m.E[h, x, o] <= 0.0:
                    b = self._first_sample_with(u)
                    raise SampleModelMismatch(
                        b + 1, t + 1, f"e[h={h + 1}][x={x + 1}][i={o + 1}] = 0"
                    )
                g = int(path[t + 1])
                if m.Q[h, o, g] <= 0.0:
                    b = self._first_sample_with(u)
                    raise SampleModelMismatch(
                        b + 1, t + 1,
                        f"q[h={h + 1}][i={o + 1}][h'={g + 1}] = 0",
                    )

    def _check_required_blocks(self) -> None:
        need = needed_pairs(self._m, self.traj, self.samples)
        stored = set(self.space._lookup.keys())
        missing = [
            (kind, k, l)
            for kind, pairs in ((EMISSION, need.emission), (TRANSITION, need.transition))
            for (k, l) in sorted(pairs)
            if (kind, k, l) not in stored
        ]
        if missing:
            kind, k, l = missing[0]
            raise ValueError(
                f"coupling space is missing {len(missing)} block(s) required "
                f"by the samples, e.g. {kind}[{k}x{l}]; build the space from "
                "needed_pairs of the same samples and trajectory"
            )

    # -- per-step table gathers -------------------------------------------

    def _theta_parts(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """(idx, const) of the emission factor table at step t, shape (U,H,O)."""
        traj = self.traj
        hu = self._paths[:, t]
        xt, x, o = int(traj.x_tilde[t]), int(traj.x[t]), int(traj.o[t])
        idx = self._eidx[:, xt, :, x, :, o][:, hu, :].transpose(1, 0, 2)
        const = self._econst[:, xt, :, x, :, o][:, hu, :].transpose(1, 0, 2)
        return idx, const

    def _pi_parts(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """(idx, const) of the transition factor table at t, shape (U,H,O,H)."""
        o = int(self.traj.o[t])
        hu = self._paths[:, t]
        hn = self._paths[:, t + 1]
        idx = self._tidx[:, :, :, o, :, :][:, :, hu, :, hn]
        const = self._tconst[:, :, :, o, :, :][:, :, hu, :, hn]
        return idx, const

    @staticmethod
    def _z_ext(z: np.ndarray) -> np.ndarray:
        return np.concatenate([z, [0.0]])

    def _coerce(self, z: Union[PairwiseCoupling, np.ndarray]) -> np.ndarray:
        if isinstance(z, PairwiseCoupling):
            if z.space is not self.space:
                raise ValueError("coupling belongs to a different space")
            return z.z
        z = np.asarray(z, dtype=float)
        if z.shape != (self.space.total_cells,):
            raise ValueError(
                f"z has shape {z.shape}, space has {self.space.total_cells} cells"
            )
        return z

    # -- evaluation ---------------------------------------------------------

    def _forward(self, zv: np.ndarray, keep: bool = False):
        U, T, H = self._U, self._T, self._m.num_states
        z_ext = self._z_ext(zv)
        G = np.zeros((U, H))
        G[np.arange(U), self._paths[:, 0]] = 1.0
        history = [G] if keep else None
        for t in range(T - 1):
            ei, ec = self._theta_parts(t)
            theta = ec + z_ext[ei] * self._e_scale[t][:, None, None]
            pi_i, pi_c = self._pi_parts(t)
            pi = pi_c + z_ext[pi_i] * self._q_scale[t][:, None, None, None]
            W = G[:, :, None] * theta
            G = np.einsum("uho,uhog->ug", W, pi)
            if keep:
                history.append(G)
        return (G, history) if keep else (G, None)

    def value(self, z: Union[PairwiseCoupling, np.ndarray]) -> float:
        """PN at z: 1 minus the mean terminal mass on the forbidden state."""
        zv = self._coerce(z)
        G, _ = self._forward(zv)
        return float(1.0 - self._weights @ G[:, self.forbidden_state])

    def forward_states(
        self, z: Union[PairwiseCoupling, np.ndarray]
    ) -> CounterfactualForwardState:
        """Per-sample forward distributions (B, T, H), for diagnostics."""
        zv = self._coerce(z)
        _, hist = self._forward(zv, keep=True)
        stacked = np.stack(hist, axis=1)  # (U, T, H)
        return CounterfactualForwardState(gamma=stacked[self._inverse])

    def gradient(self, z: Union[PairwiseCoupling, np.ndarray]) -> np.ndarray:
        """Exact d(PN)/dz, reverse sweep of the forward recursion."""
        return self.value_and_gradient(z)[1]

    def value_and_gradient(
        self, z: Union[PairwiseCoupling, np.ndarray]
    ) -> tuple[float, np.ndarray]:
        zv = self._coerce(z)
        U, T, H = self._U, self._T, self._m.num_states
        ncells = self.space.total_cells
        z_ext = self._z_ext(zv)
        G, hist = self._forward(zv, keep=True)
        val = float(1.0 - self._weights @ G[:, self.forbidden_state])
        dval = np.zeros(ncells)
        # d(val)/dG_T, then walk the recursion backwards
        Gbar = np.zeros((U, H))
        Gbar[:, self.forbidden_state] = self._weights
        for t in range(T - 2, -1, -1):
            ei, ec = self._theta_parts(t)
            theta = ec + z_ext[ei] * self._e_scale[t][:, None, None]
            pi_i, pi_c = self._pi_parts(t)
            pi = pi_c + z_ext[pi_i] * self._q_scale[t][:, None, None, None]
            Gt = hist[t]
            W = Gt[:, :, None] * theta
            Wbar = np.einsum("uhog,ug->uho", pi, Gbar)
            pibar = W[:, :, :, None] * Gbar[:, None, None, :]
            thetabar = Gt[:, :, None] * Wbar
            # scatter the two factor adjoints into flat coordinates
            mask = pi_i >= 0
            if mask.any():
                w = pibar * self._q_scale[t][:, None, None, None]
                dval += np.bincount(
                    pi_i[mask], weights=w[mask], minlength=ncells
                )
            mask = ei >= 0
            if mask.any():
                w = thetabar * self._e_scale[t][:, None, None]
                dval += np.bincount(
                    ei[mask], weights=w[mask], minlength=ncells
                )
            Gbar = (theta * Wbar).sum(axis=2)
        return val, -dval

    def values_on_segment(
        self, z0: np.ndarray, z1: np.ndarray, etas: np.ndarray
    ) -> np.ndarray:
        """PN((1-η)·z0 + η·z1) for every η, sharing the gathers across η.

        The restriction of PN to a segment is a polynomial of degree at most
        2(T-1), so a handful of evaluations pins it down exactly; this method
        makes those evaluations cheap.
        """
        z0 = self._coerce(z0)
        z1 = self._coerce(z1)
        etas = np.asarray(etas, dtype=float)
        N = etas.shape[0]
        U, T, H = self._U, self._T, self._m.num_states
        z0e, z1e = self._z_ext(z0), self._z_ext(z1)
        G = np.zeros((N, U, H))
        G[:, np.arange(U), self._paths[:, 0]] = 1.0
        eta_b = etas[:, None, None, None]
        for t in range(T - 1):
            ei, ec = self._theta_parts(t)
            th0 = ec + z0e[ei] * self._e_scale[t][:, None, None]
            th1 = ec + z1e[ei] * self._e_scale[t][:, None, None]
            theta = th0[None] + eta_b * (th1 - th0)[None]
            pi_i, pi_c = self._pi_parts(t)
            p0 = pi_c + z0e[pi_i] * self._q_scale[t][:, None, None, None]
            p1 = pi_c + z1e[pi_i] * self._q_scale[t][:, None, None, None]
            pi = p0[None] + etas[:, None, None, None, None] * (p1 - p0)[None]
            W = G[:, :, :, None] * theta
            G = np.einsum("nuho,nuhog->nug", W, pi)
        return 1.0 - G[:, :, self.forbidden_state] @ self._weights


# -- convenience wrappers with a small objective cache -----------------------

_OBJ_CACHE: "OrderedDict[tuple, PNObjective]" = OrderedDict()
_OBJ_CACHE_SIZE = 8


def _objective_for(
    space: CouplingSpace,
    samples: PosteriorSampleSet,
    traj: Trajectory,
    forbidden_state: int,
) -> PNObjective:
    key = (id(space), id(samples), id(traj), int(forbidden_state))
    obj = _OBJ_CACHE.get(key)
    if obj is not None:
        # the cached objective holds strong refs, so the ids are still live
        _OBJ_CACHE.move_to_end(key)
        return obj
    obj = PNObjective(space, samples, traj, forbidden_state)
    _OBJ_CACHE[key] = obj
    while len(_OBJ_CACHE) > _OBJ_CACHE_SIZE:
        _OBJ_CACHE.popitem(last=False)
    return obj


def eval_pn(
    z: PairwiseCoupling,
    samples: PosteriorSampleSet,
    traj: Trajectory,
    forbidden_state: int,
) -> float:
    """PN of a pairwise coupling given posterior samples of the factual path."""
    return _objective_for(z.space, samples, traj, forbidden_state).value(z)


def grad_pn(
    z: PairwiseCoupling,
    samples: PosteriorSampleSet,
    traj: Trajectory,
    forbidden_state: int,
) -> np.ndarray:
    """Exact gradient of :func:`eval_pn` over the flat coupling coordinates."""
    return _objective_for(z.space, samples, traj, forbidden_state).gradient(z)


def eval_pn_expanded(
    z: PairwiseCoupling,
    samples: PosteriorSampleSet,
    traj: Trajectory,
    forbidden_state: int,
    max_terms: int = 2_000_000,
) -> float:
    """PN by brute-force enumeration of all counterfactual trajectories.

    Sums the factor products over every (h̃_1..h̃_T, õ_1..õ_{T-1}) explicitly
    — exponential in T, so guarded to small instances.  Reference
    implementation for testing the recursion; shares nothing with it beyond
    the cell lookups.
    """
    space = z.space
    m = _require_model(space)
    H, O = m.num_states, m.num_emissions
    T = traj.T
    if samples.T != T:
        raise ValueError(f"sample paths have T={samples.T}, trajectory has T={T}")
    if T > 6 or H ** T * O ** max(T - 1, 0) > max_terms:
        raise ValueError(
            "expanded evaluation is exponential in T; "
            f"refusing H^T * O^(T-1) = {H ** T * O ** max(T - 1, 0)} terms"
        )
    zv = z.z

    def theta_factor(t, h_til, o_til, h):
        x_til, x, o = int(traj.x_tilde[t]), int(traj.x[t]), int(traj.o[t])
        left, right = (h_til, x_til), (h, x)
        e_obs = m.E[h, x, o]
        if e_obs <= 0.0:
            raise SampleModelMismatch(
                0, t + 1, f"e[h={h + 1}][x={x + 1}][i={o + 1}] = 0"
            )
        if left == right:
            return 1.0 if o_til == o else 0.0
        hit = space.lookup_directed(EMISSION, left, right)
        if hit is None:
            return 0.0
        fi = space.flat_cell(hit[0], o_til, o, hit[1])
        return 0.0 if fi < 0 else zv[fi] / e_obs

    def pi_factor(t, h_til, o_til, g_til, h, g):
        o = int(traj.o[t])
        left, right = (h_til, o_til), (h, o)
        q_obs = m.Q[h, o, g]
        if q_obs <= 0.0:
            raise SampleModelMismatch(
                0, t + 1, f"q[h={h + 1}][i={o + 1}][h'={g + 1}] = 0"
            )
        if left == right:
            return 1.0 if g_til == g else 0.0
        hit = space.lookup_directed(TRANSITION, left, right)
        if hit is None:
            return 0.0
        fi = space.flat_cell(hit[0], g_til, g, hit[1])
        return 0.0 if fi < 0 else zv[fi] / q_obs

    uniq, counts = np.unique(samples.paths, axis=0, return_counts=True)
    total = 0.0
    forbidden = int(forbidden_state)
    for path, cnt in zip(uniq, counts):
        mass = 0.0
        for h_tilde in product(range(H), repeat=T):
            if h_tilde[0] != path[0] or h_tilde[-1] != forbidden:
                continue
            for o_tilde in product(range(O), repeat=T - 1):
                w = 1.0
                for t in range(T - 1):
                    w *= theta_factor(t, h_tilde[t], o_tilde[t], int(path[t]))
                    if w == 0.0:
                        break
                    w *= pi_factor(
                        t, h_tilde[t], o_tilde[t], h_tilde[t + 1],
                        int(path[t]), int(path[t + 1]),
                    )
                    if w == 0.0:
                        break
                mass += w
        total += cnt * mass
    return 1.0 - total / samples.B
