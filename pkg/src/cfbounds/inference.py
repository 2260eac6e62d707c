"""Exact posterior inference over latent state paths.

Forward filtering, backward smoothing, and backward sampling for the
controlled hidden-state chain of :mod:`cfbounds.model`, conditioning on one
observed trajectory ``(o_1..o_T, x_1..x_T)``.  Actions are exogenous inputs,
so likelihood terms for them never appear.

All recursions run in log space with max-shifting, so underflow cannot occur
even for long trajectories with small emission probabilities.

Recursions (0-based ``t``):

* ``alpha[0][h] = p[h] * E[h, x_0, o_0]``
* ``alpha[t][h] = E[h, x_t, o_t] * sum_g Q[g, o_{t-1}, h] * alpha[t-1][g]``
* ``beta[T-1][h] = 1``
* ``beta[t][h] = sum_g beta[t+1][g] * E[g, x_{t+1}, o_{t+1}] * Q[h, o_t, g]``

Posterior marginals are proportional to ``alpha * beta``; a latent path is
drawn backwards: ``h_{T-1}`` from the smoothed marginal, then
``h_t | h_{t+1}`` with weight ``alpha[t][h] * Q[h, o_t, h_{t+1}]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import IO, Optional, Union

import numpy as np

from ._rng import substream
from .model import ModelPrimitives, Trajectory

__all__ = [
    "ImpossibleTrajectoryError",
    "MessageSet",
    "SmoothedMarginals",
    "PosteriorSampleSet",
    "forward_filter",
    "backward_smooth",
    "smoothed_marginals",
    "sample_posterior_paths",
]


class ImpossibleTrajectoryError(ValueError):
    """The observed trajectory has probability zero under the model.

    ``t`` is the first 1-based period at which all filtered mass vanishes.
    """

    def __init__(self, t: int):
        self.t = t
        super().__init__(
            f"trajectory impossible under the model: filtered mass vanishes at t={t}"
        )


@dataclass(frozen=True)
class MessageSet:
    """Log-domain forward/backward messages for one trajectory.

    ``log_alpha[t, h]`` is the joint log-probability of ``o_1..o_t`` and
    ``H_t = h``; ``log_beta[t, h]`` the conditional log-probability of
    ``o_{t+1}..o_T`` given ``H_t = h`` (``None`` until a backward pass runs).
    ``log_likelihood`` is the total log-probability of the observations.
    """

    log_alpha: np.ndarray
    log_beta: Optional[np.ndarray]
    log_likelihood: float


@dataclass(frozen=True)
class SmoothedMarginals:
    """Posterior marginals given the full trajectory.

    ``unary[t, h] = P(H_t = h | o, x)`` and
    ``pairwise[t, h, g] = P(H_t = h, H_{t+1} = g | o, x)`` for ``t < T-1``.
    """

    unary: np.ndarray
    pairwise: np.ndarray


@dataclass(frozen=True)
class PosteriorSampleSet:
    """``B`` latent paths drawn i.i.d. from the exact posterior.

    ``paths[b, t]`` is the 0-based latent state of draw ``b`` at period ``t``.
    """

    paths: np.ndarray
    seed: int

    @property
    def B(self) -> int:
        return int(self.paths.shape[0])

    @property
    def T(self) -> int:
        return int(self.paths.shape[1])

    def to_csv(self, dest: Union[str, IO[str]]) -> None:
        """Write rows ``b,t,h`` with 1-based period and state codes."""
        own = isinstance(dest, str)
        fh = open(dest, "w", newline="", encoding="utf-8") if own else dest
        try:
            w = csv.writer(fh)
            w.writerow(["b", "t", "h"])
            for b in range(self.B):
                for t in range(self.T):
                    w.writerow([b + 1, t + 1, int(self.paths[b, t]) + 1])
        finally:
            if own:
                fh.close()


def _log(a: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(a)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    shift = np.max(a, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - shift), axis=axis)) + np.squeeze(shift, axis=axis)
    return out


def forward_filter(m: ModelPrimitives, traj: Trajectory) -> MessageSet:
    """Run the forward recursion; ``log_beta`` is left unset.

    Raises :class:`ImpossibleTrajectoryError` at the first period where the
    filtered distribution has no support.
    """
    T, H = traj.T, m.num_states
    logE, logQ = _log(m.E), _log(m.Q)
    la = np.full((T, H), -np.inf)
    la[0] = _log(m.p) + logE[:, traj.x[0], traj.o[0]]
    if np.all(np.isinf(la[0])):
        raise ImpossibleTrajectoryError(1)
    for t in range(1, T):
        trans = _logsumexp(la[t - 1][:, None] + logQ[:, traj.o[t - 1], :], axis=0)
        la[t] = logE[:, traj.x[t], traj.o[t]] + trans
        if np.all(np.isinf(la[t])):
            raise ImpossibleTrajectoryError(t + 1)
    ll = float(_logsumexp(la[T - 1], axis=0))
    return MessageSet(log_alpha=la, log_beta=None, log_likelihood=ll)


def backward_smooth(m: ModelPrimitives, traj: Trajectory) -> MessageSet:
    """Forward pass plus backward recursion; returns the complete message set."""
    fwd = forward_filter(m, traj)
    T, H = traj.T, m.num_states
    logE, logQ = _log(m.E), _log(m.Q)
    lb = np.zeros((T, H))
    for t in range(T - 2, -1, -1):
        incoming = lb[t + 1] + logE[:, traj.x[t + 1], traj.o[t + 1]]
        lb[t] = _logsumexp(logQ[:, traj.o[t], :] + incoming[None, :], axis=1)
    return MessageSet(
        log_alpha=fwd.log_alpha, log_beta=lb, log_likelihood=fwd.log_likelihood
    )


def smoothed_marginals(
    m: ModelPrimitives, traj: Trajectory, messages: Optional[MessageSet] = None
) -> SmoothedMarginals:
    """Unary and pairwise posterior marginals of the latent path.

    Accepts precomputed ``messages`` (must include the backward part);
    otherwise runs both passes.
    """
    if messages is None or messages.log_beta is None:
        messages = backward_smooth(m, traj)
    la, lb = messages.log_alpha, messages.log_beta
    T, H = traj.T, m.num_states
    logE, logQ = _log(m.E), _log(m.Q)

    unary = np.exp(la + lb - messages.log_likelihood)
    unary /= unary.sum(axis=1, keepdims=True)

    pairwise = np.zeros((max(T - 1, 0), H, H))
    for t in range(T - 1):
        logp = (
            la[t][:, None]
            + logQ[:, traj.o[t], :]
            + logE[:, traj.x[t + 1], traj.o[t + 1]][None, :]
            + lb[t + 1][None, :]
            - messages.log_likelihood
        )
        pw = np.exp(logp)
        pairwise[t] = pw / pw.sum()
    return SmoothedMarginals(unary=unary, pairwise=pairwise)


def _draw(rng: np.random.Generator, weights: np.ndarray) -> int:
    """Inverse-CDF draw from unnormalized nonnegative weights (one uniform)."""
    cdf = np.cumsum(weights)
    total = cdf[-1]
    if not total > 0.0:
        raise ValueError("cannot sample from an all-zero weight vector")
    u = rng.random() * total
    idx = int(np.searchsorted(cdf, u, side="right"))
    if idx >= weights.shape[0]:  # u rounded up onto the total
        idx = int(np.nonzero(weights)[0][-1])
    return idx


def sample_posterior_paths(
    m: ModelPrimitives, traj: Trajectory, B: int, seed: int
) -> PosteriorSampleSet:
    """Draw ``B`` i.i.d. latent paths from the exact posterior.

    Each draw uses its own RNG substream keyed by ``b``, so sample ``b`` is
    reproducible regardless of ``B``.  Sampling is backwards: the final state
    from the smoothed marginal, earlier states from the conditional
    ``P(H_t | H_{t+1}, o, x) ∝ alpha[t] * Q[:, o_t, h_{t+1}]``.
    """
    if B <= 0:
        raise ValueError(f"B must be positive, got {B}")
    msgs = forward_filter(m, traj)
    la = msgs.log_alpha
    T, H = traj.T, m.num_states

    # Per-period filtered weights, shifted out of log space once.
    shifts = np.max(la, axis=1, keepdims=True)
    wa = np.exp(la - shifts)  # (T, H), each row has max 1

    paths = np.empty((B, T), dtype=np.int64)
    for b in range(B):
        rng = substream(seed, b)
        h = _draw(rng, wa[T - 1])
        paths[b, T - 1] = h
        for t in range(T - 2, -1, -1):
            h = _draw(rng, wa[t] * m.Q[:, traj.o[t], h])
            paths[b, t] = h
    return PosteriorSampleSet(paths=paths, seed=seed)
