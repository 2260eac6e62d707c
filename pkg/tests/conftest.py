"""Shared fixtures and generators for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from cfbounds.model import ModelPrimitives, Trajectory


def random_model(
    rng: np.random.Generator,
    H: int,
    X: int,
    O: int,
    sparsity: float = 0.0,
) -> ModelPrimitives:
    """Draw a random valid model.

    ``sparsity`` is the probability of zeroing each kernel entry before
    renormalizing (rows are kept nonempty).  Transition rows are all live.
    """

    def _rows(shape: tuple[int, ...]) -> np.ndarray:
        out = rng.gamma(1.0, 1.0, size=shape)
        if sparsity > 0.0:
            mask = rng.random(shape) < sparsity
            # never remove an entire row
            keep = rng.integers(0, shape[-1], size=shape[:-1])
            mask[(*np.indices(shape[:-1]), keep)] = False
            out = np.where(mask, 0.0, out)
        return out / out.sum(axis=-1, keepdims=True)

    p = _rows((H,))
    E = _rows((H, X, O))
    Q = _rows((H, O, H))
    return ModelPrimitives(p, E, Q)


def random_trajectory(
    rng: np.random.Generator, m: ModelPrimitives, T: int
) -> Trajectory:
    """Simulate a trajectory from the model under random actions.

    Guaranteed possible (positive likelihood) because it is generated
    forward from the model itself.
    """
    H, X, O = m.num_states, m.num_actions, m.num_emissions
    o = np.empty(T, dtype=np.int64)
    x = rng.integers(0, X, size=T)
    x_tilde = rng.integers(0, X, size=T)
    h = rng.choice(H, p=m.p)
    for t in range(T):
        w = m.E[h, x[t]].copy()
        if t < T - 1:
            w = w * m.transition_support[h]  # keep the chain continuable
        o[t] = rng.choice(O, p=w / w.sum())
        if t < T - 1:
            h = rng.choice(H, p=m.Q[h, o[t]] / m.Q[h, o[t]].sum())
    return Trajectory(o=o, x=x, x_tilde=x_tilde)


def random_feasible_coupling(rng, space, interior: bool = True):
    """A random point of the coupling polytope.

    Mixes a random transportation vertex (Gaussian costs per block) with a
    feasible base point; with ``interior=True`` and no forbidden cells the
    base is the everywhere-positive product coupling, so the mix is strictly
    positive on every free cell.
    """
    from cfbounds._transport import solve_transport
    from cfbounds.coupling import independence_coupling, phase1_feasible_point

    try:
        base = independence_coupling(space)
    except Exception:
        base = phase1_feasible_point(space)
    z = np.empty(space.total_cells)
    for bi, blk in enumerate(space.blocks):
        cost = rng.normal(size=(blk.nr, blk.nc))
        plan, status = solve_transport(
            cost,
            np.ascontiguousarray(blk.row_marginal),
            np.ascontiguousarray(blk.col_marginal),
            np.ascontiguousarray(blk.allowed_mask()),
        )
        if status != 0:
            raise RuntimeError(f"no feasible plan for block {blk.describe()}")
        idx = space.cell_index(bi)
        mask = idx >= 0
        z[idx[mask]] = plan[mask]
    lam = rng.uniform(0.25, 0.75) if interior else rng.uniform(0.0, 1.0)
    return base.with_z(lam * base.z + (1.0 - lam) * z)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240911)
