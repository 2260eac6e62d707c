"""Counterfactual trajectory simulation under explicit copula choices.

Given posterior latent paths for an observed trajectory, these simulators
answer "what would have happened under actions ``x̃``" for two concrete ways
of tying counterfactual randomness to factual randomness:

* **independence**: whenever the counterfactual parents ``(h̃_t, x̃_t)`` differ
  from the factual parents ``(h_t, x_t)``, the counterfactual child is a fresh
  draw from its kernel; when the parents coincide the factual child is reused
  (exact-match coupling on the diagonal).
* **comonotonic**: children are generated by inverse-transforming a shared
  uniform through *rank-ordered* CDFs; the uniform is drawn from the posterior
  interval of the observed child, so identical parents replay the factual
  outcome exactly and different parents move the outcome as little as the rank
  ordering allows.

Also includes the naive no-abduction baseline (fresh paths from the prior:
ignores the observed trajectory entirely) and binomial PN estimators.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import IO, NamedTuple, Union

import numpy as np

from ._rng import substream
from .inference import PosteriorSampleSet
from .model import ModelPrimitives, Trajectory

__all__ = [
    "RankOrdering",
    "CounterfactualPathSet",
    "PNEstimate",
    "identity_ranks",
    "emission_rank_cdf",
    "transition_rank_cdf",
    "simulate_independence",
    "simulate_comonotonic",
    "estimate_pn_mc",
    "estimate_pn_naive",
]


class PNEstimate(NamedTuple):
    """Monte-Carlo estimate with its binomial standard error."""

    estimate: float
    se: float


def _check_permutation(arr: np.ndarray, n: int, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.int64)
    if arr.shape != (n,) or not np.array_equal(np.sort(arr), np.arange(n)):
        raise ValueError(f"{name} must be a permutation of 0..{n - 1}, got {arr!r}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RankOrdering:
    """Severity orderings used by the comonotonic construction.

    ``rank_H`` lists hidden states in accumulation order (best state first,
    worst last); ``rank_O`` does the same for emissions.  The rank-ordered CDF
    of a kernel row accumulates probability along this order, with an implicit
    rank-0 sentinel of 0 before the first entry.
    """

    rank_H: np.ndarray
    rank_O: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "rank_H", _check_permutation(self.rank_H, len(self.rank_H), "rank_H")
        )
        object.__setattr__(
            self, "rank_O", _check_permutation(self.rank_O, len(self.rank_O), "rank_O")
        )


def identity_ranks(m: ModelPrimitives) -> RankOrdering:
    """Index order as rank order (the documented default for emissions)."""
    return RankOrdering(
        rank_H=np.arange(m.num_states), rank_O=np.arange(m.num_emissions)
    )


def _rank_cdf(rows: np.ndarray, order: np.ndarray) -> np.ndarray:
    """CDF of each kernel row accumulated along ``order``, reported per outcome.

    ``out[..., i]`` is the total mass of outcomes ranked at or before outcome
    ``i``.  All-zero rows (unreachable conditions) yield all-zero CDFs.
    """
    ranked = np.cumsum(rows[..., order], axis=-1)
    out = np.empty_like(ranked)
    out[..., order] = ranked
    return out


def emission_rank_cdf(m: ModelPrimitives, ranks: RankOrdering) -> np.ndarray:
    """Rank-ordered emission CDF, shape (H, X, O)."""
    return _rank_cdf(m.E, ranks.rank_O)


def transition_rank_cdf(m: ModelPrimitives, ranks: RankOrdering) -> np.ndarray:
    """Rank-ordered transition CDF, shape (H, O, H)."""
    return _rank_cdf(m.Q, ranks.rank_H)


@dataclass(frozen=True)
class CounterfactualPathSet:
    """Simulated counterfactual paths: hidden states and emissions per draw.

    ``h[d, t]`` and ``o[d, t]`` are 0-based codes; ``copula`` labels the
    generating mechanism.  With ``reps`` replicate draws per posterior sample,
    draw ``d = b * reps + r`` extends posterior sample ``b``.
    """

    copula: str
    h: np.ndarray
    o: np.ndarray

    @property
    def num_draws(self) -> int:
        return int(self.h.shape[0])

    @property
    def T(self) -> int:
        return int(self.h.shape[1])

    def to_csv(self, dest: Union[str, IO[str]]) -> None:
        """Write rows ``copula,b,t,h_tilde,o_tilde`` (1-based codes)."""
        own = isinstance(dest, str)
        fh = open(dest, "w", newline="", encoding="utf-8") if own else dest
        try:
            w = csv.writer(fh)
            w.writerow(["copula", "b", "t", "h_tilde", "o_tilde"])
            for d in range(self.num_draws):
                for t in range(self.T):
                    w.writerow(
                        [
                            self.copula,
                            d + 1,
                            t + 1,
                            int(self.h[d, t]) + 1,
                            int(self.o[d, t]) + 1,
                        ]
                    )
        finally:
            if own:
                fh.close()


def _draw_from_row(rng: np.random.Generator, row: np.ndarray, what: str) -> int:
    """One inverse-CDF draw from a kernel row; rejects dead rows loudly."""
    cdf = np.cumsum(row)
    if not cdf[-1] > 0.0:
        raise ValueError(f"counterfactual simulation reached an unsupported {what}")
    u = rng.random() * cdf[-1]
    j = int(np.searchsorted(cdf, u, side="right"))
    if j >= row.shape[0]:
        j = int(np.nonzero(row)[0][-1])
    return j


def simulate_independence(
    m: ModelPrimitives,
    traj: Trajectory,
    samples: PosteriorSampleSet,
    seed: int,
    reps: int = 1,
) -> CounterfactualPathSet:
    """Counterfactual paths under the independence copula.

    For every posterior sample ``b`` (replicated ``reps`` times): start at
    ``h̃_1 = h_1(b)``; at each period reuse the factual child outcome when the
    counterfactual parents equal the factual parents, otherwise draw afresh
    from the corresponding kernel row.  Each (draw, period, node) consumes its
    own RNG substream, so results are independent of evaluation order.
    """
    B, T = samples.B, samples.T
    D = B * reps
    h_cf = np.empty((D, T), dtype=np.int64)
    o_cf = np.empty((D, T), dtype=np.int64)
    for b in range(B):
        fact = samples.paths[b]
        for r in range(reps):
            d = b * reps + r
            h = int(fact[0])
            for t in range(T):
                h_cf[d, t] = h
                if traj.x_tilde[t] == traj.x[t] and h == fact[t]:
                    o = int(traj.o[t])
                else:
                    o = _draw_from_row(
                        substream(seed, d, t, 0),
                        m.E[h, traj.x_tilde[t]],
                        "emission row",
                    )
                o_cf[d, t] = o
                if t < T - 1:
                    if h == fact[t] and o == traj.o[t]:
                        h = int(fact[t + 1])
                    else:
                        h = _draw_from_row(
                            substream(seed, d, t, 1),
                            m.Q[h, o],
                            "(state, observation) continuation",
                        )
    return CounterfactualPathSet(copula="independence", h=h_cf, o=o_cf)


def _interval_inverse(
    rng: np.random.Generator,
    lo: float,
    hi: float,
    cdf_ranked: np.ndarray,
    order: np.ndarray,
    what: str,
) -> int:
    """Draw v ~ Uniform[lo, hi) and invert it through a rank-ordered CDF."""
    assert hi > lo, f"degenerate posterior interval for observed {what}"
    total = cdf_ranked[-1]
    if not total > 0.0:
        raise ValueError(f"counterfactual simulation reached an unsupported {what}")
    v = rng.uniform(lo, hi)
    j = int(np.searchsorted(cdf_ranked, v, side="right"))
    if j >= order.shape[0]:  # v at/above the top knot (float dust)
        mass = np.diff(cdf_ranked, prepend=0.0)
        j = int(np.nonzero(mass > 0)[0][-1])
    return int(order[j])


def simulate_comonotonic(
    m: ModelPrimitives,
    traj: Trajectory,
    samples: PosteriorSampleSet,
    ranks: RankOrdering,
    seed: int,
    reps: int = 1,
) -> CounterfactualPathSet:
    """Counterfactual paths under the comonotonic copula.

    At each node the shared uniform is drawn from the posterior interval of
    the *observed* child — ``[F(child⁻), F(child))`` under the factual
    parents' rank-ordered CDF — and pushed through the counterfactual parents'
    rank-ordered CDF.  Intervals are half-open and knot ties resolve to the
    higher-ranked outcome, which makes factual replay exact when the parents
    coincide.  Observed children always have positive-width intervals for
    valid posterior samples (asserted).
    """
    B, T = samples.B, samples.T
    D = B * reps
    Ehat = emission_rank_cdf(m, ranks)
    Qhat = transition_rank_cdf(m, ranks)
    Elo = Ehat - m.E
    Qlo = Qhat - m.Q
    h_cf = np.empty((D, T), dtype=np.int64)
    o_cf = np.empty((D, T), dtype=np.int64)
    for b in range(B):
        fact = samples.paths[b]
        for r in range(reps):
            d = b * reps + r
            h = int(fact[0])
            for t in range(T):
                h_cf[d, t] = h
                hf, xf, of = int(fact[t]), int(traj.x[t]), int(traj.o[t])
                o = _interval_inverse(
                    substream(seed, d, t, 0),
                    float(Elo[hf, xf, of]),
                    float(Ehat[hf, xf, of]),
                    Ehat[h, traj.x_tilde[t]][ranks.rank_O],
                    ranks.rank_O,
                    "emission",
                )
                o_cf[d, t] = o
                if t < T - 1:
                    hn = int(fact[t + 1])
                    h = _interval_inverse(
                        substream(seed, d, t, 1),
                        float(Qlo[hf, of, hn]),
                        float(Qhat[hf, of, hn]),
                        Qhat[h, o][ranks.rank_H],
                        ranks.rank_H,
                        "transition",
                    )
    return CounterfactualPathSet(copula="comonotonic", h=h_cf, o=o_cf)


def estimate_pn_mc(cf_paths: CounterfactualPathSet, forbidden_state: int) -> PNEstimate:
    """Fraction of counterfactual paths whose final state avoids ``forbidden_state``."""
    avoided = cf_paths.h[:, -1] != forbidden_state
    n = avoided.shape[0]
    phat = float(avoided.mean())
    return PNEstimate(phat, float(np.sqrt(phat * (1.0 - phat) / n)))


def estimate_pn_naive(
    m: ModelPrimitives,
    x_tilde: np.ndarray,
    T: int,
    R: int,
    seed: int,
    forbidden_state: int | None = None,
) -> PNEstimate:
    """No-abduction baseline: fresh prior paths under ``x̃``, no conditioning.

    Simulates ``R`` independent trajectories of length ``T`` from the initial
    distribution under the counterfactual actions, ignoring the observed data
    entirely, and reports the fraction whose final state is not
    ``forbidden_state`` (default: the last state, the usual absorbing-outcome
    convention).  Vectorized over draws (one uniform per node).
    """
    if forbidden_state is None:
        forbidden_state = m.num_states - 1
    x_tilde = np.asarray(x_tilde, dtype=np.int64)
    if x_tilde.shape[0] != T:
        raise ValueError(f"x_tilde has length {x_tilde.shape[0]}, expected T={T}")
    rng = substream(seed, 0)
    O = m.num_emissions

    def _vec_draw(cdf_rows: np.ndarray, what: str) -> np.ndarray:
        totals = cdf_rows[:, -1]
        if np.any(totals <= 0.0):
            raise ValueError(f"naive simulation reached an unsupported {what}")
        u = rng.random(cdf_rows.shape[0]) * totals
        idx = (cdf_rows <= u[:, None]).sum(axis=1)
        return np.minimum(idx, cdf_rows.shape[1] - 1)

    cumE = np.cumsum(m.E, axis=2)
    cumQ = np.cumsum(m.Q, axis=2)
    cum_p = np.cumsum(m.p)
    u0 = rng.random(R)
    h = np.minimum((cum_p[None, :] <= u0[:, None]).sum(axis=1), m.num_states - 1)
    for t in range(T):
        o = _vec_draw(cumE[h, x_tilde[t]], "emission row")
        if t < T - 1:
            h = _vec_draw(cumQ[h, o], "(state, observation) continuation")
    avoided = h != forbidden_state
    phat = float(avoided.mean())
    return PNEstimate(phat, float(np.sqrt(phat * (1.0 - phat) / R)))
