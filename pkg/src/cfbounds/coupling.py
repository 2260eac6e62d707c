"""Pairwise-coupling decision variables and their feasible polytope.

The bound optimization treats, for every pair of *parent conditions*, the
joint distribution of the two children as unknown — constrained only by its
two known unary marginals, nonnegativity, and optional forbidden (zeroed)
cells.  Parents come in two kinds:

* ``emission`` parents ``(h, x)`` with children distributed as ``E[h, x, ·]``;
* ``transition`` parents ``(h, i)`` with children distributed as ``Q[h, i, ·]``.

A :class:`BlockSpec` is one such pair of parents: a little transportation
polytope whose "supply" is the left parent's marginal and whose "demand" is
the right parent's marginal.  The full decision space is the product of all
blocks; a :class:`PairwiseCoupling` is one point of it, stored as a flat
vector over all non-forbidden cells.

Conventions
-----------
* Symmetry is structural: only ``k < l`` blocks are stored; querying the pair
  the other way round transposes the block.  Self-pairs (``k == l``) are
  excluded — their coupling is forced to the diagonal of the marginal and is
  handled as a constant by the objective.
* Within a block, only outcomes with strictly positive marginal probability
  are materialized (zero-marginal outcomes could never carry mass).
* ``forbidden`` cells are stored as *(row outcome code, col outcome code)*
  pairs and are absent from the flat vector entirely.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Optional, Sequence, Union

import numpy as np

from ._transport import feasible_flow
from .copula_sim import RankOrdering
from .inference import PosteriorSampleSet
from .model import ModelPrimitives, Trajectory

__all__ = [
    "BlockSpec",
    "CouplingSpace",
    "PairwiseCoupling",
    "NeededPairs",
    "PMZero",
    "StructuralModelError",
    "StartInfeasibleError",
    "InfeasibleBlockError",
    "needed_pairs",
    "enumerate_blocks",
    "build_space",
    "independence_coupling",
    "comonotonic_coupling",
    "cs_forbidden_cells",
    "pm_forbidden_cells",
    "with_forbidden",
    "check_feasibility",
    "phase1_feasible_point",
    "coupling_to_csv",
]

Parent = tuple[int, int]
Cell = tuple[int, int]

EMISSION = "emission"
TRANSITION = "transition"


class StructuralModelError(ValueError):
    """A parent pair references a condition the model cannot occupy."""


class StartInfeasibleError(ValueError):
    """A closed-form starting coupling violates the zero constraints."""


class InfeasibleBlockError(ValueError):
    """No coupling exists for some block; carries the certificate."""

    def __init__(self, block: "BlockSpec", detail: str):
        self.block = block
        super().__init__(f"block {block.describe()} is infeasible: {detail}")


@dataclass(frozen=True)
class BlockSpec:
    """One pair of parent conditions and its transportation polytope.

    ``row_outcomes``/``col_outcomes`` list the child outcome codes with
    positive marginal probability under the left/right parent;
    ``row_marginal``/``col_marginal`` are the matching probabilities.
    ``forbidden`` holds (row code, col code) cells pinned to zero.
    """

    kind: str
    k: Parent
    l: Parent
    row_outcomes: np.ndarray
    col_outcomes: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    forbidden: frozenset[Cell] = frozenset()

    def __post_init__(self) -> None:
        for name in ("row_outcomes", "col_outcomes"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("row_marginal", "col_marginal"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (self.kind in (EMISSION, TRANSITION)):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if not tuple(self.k) < tuple(self.l):
            raise ValueError(
                f"blocks are stored with k < l; got k={self.k}, l={self.l}"
            )

    @property
    def nr(self) -> int:
        return int(self.row_outcomes.shape[0])

    @property
    def nc(self) -> int:
        return int(self.col_outcomes.shape[0])

    def describe(self) -> str:
        """Human-readable 1-based identifier."""
        ka, kb = self.k
        la, lb = self.l
        return f"{self.kind}[({ka + 1},{kb + 1})x({la + 1},{lb + 1})]"

    def allowed_mask(self) -> np.ndarray:
        """Boolean (nr, nc) mask, False at forbidden cells."""
        mask = np.ones((self.nr, self.nc), dtype=bool)
        for a, b in self.forbidden:
            ra = np.nonzero(self.row_outcomes == a)[0]
            cb = np.nonzero(self.col_outcomes == b)[0]
            if ra.size and cb.size:
                mask[ra[0], cb[0]] = False
        return mask


@dataclass(frozen=True)
class NeededPairs:
    """Unordered parent pairs actually referenced by the objective."""

    emission: frozenset[tuple[Parent, Parent]]
    transition: frozenset[tuple[Parent, Parent]]


@dataclass(frozen=True)
class PMZero:
    """One pathwise-monotonicity zero: a directed coupling cell pinned to 0.

    ``left_*`` is the counterfactual side, ``right_*`` the factual side;
    parents are ``(h, i)`` for transitions, ``(h, x)`` for emissions; outcomes
    are child codes.  All indices 0-based.
    """

    kind: str
    left_parent: Parent
    right_parent: Parent
    left_outcome: int
    right_outcome: int


def _canonical(a: Parent, b: Parent) -> Optional[tuple[Parent, Parent]]:
    """Unordered pair with k < l; None for self-pairs."""
    ta, tb = tuple(a), tuple(b)
    if ta == tb:
        return None
    return (ta, tb) if ta < tb else (tb, ta)


def needed_pairs(
    m: ModelPrimitives, traj: Trajectory, samples: PosteriorSampleSet
) -> NeededPairs:
    """Parent pairs the objective can reference for these posterior samples.

    Propagates the support-level reachable set of counterfactual states:
    ``R_1`` is the set of sampled initial states; at step ``s`` the
    counterfactual may emit any õ in the support of ``E[h̃, x̃_s]`` and then
    occupy any state in the support of ``Q[h̃, õ]``.  The γ-recursion provably
    has zero mass outside these sets, so blocks for unlisted pairs could never
    influence the objective.
    """
    em: set[tuple[Parent, Parent]] = set()
    tr: set[tuple[Parent, Parent]] = set()
    uniq = np.unique(samples.paths, axis=0)
    reach = set(int(h) for h in uniq[:, 0])
    for s in range(traj.T - 1):
        xs, xts, os_ = int(traj.x[s]), int(traj.x_tilde[s]), int(traj.o[s])
        rights_em = {(int(h), xs) for h in uniq[:, s]}
        rights_tr = {(int(h), os_) for h in uniq[:, s]}
        nxt: set[int] = set()
        for h in sorted(reach):
            left_em = (h, xts)
            for right in rights_em:
                pair = _canonical(left_em, right)
                if pair is not None:
                    em.add(pair)
            for o in np.flatnonzero(m.E[h, xts]):
                if not m.transition_support[h, int(o)]:
                    continue  # dead end: no transition block can exist there
                left_tr = (h, int(o))
                for right in rights_tr:
                    pair = _canonical(left_tr, right)
                    if pair is not None:
                        tr.add(pair)
                nxt.update(int(g) for g in np.flatnonzero(m.Q[h, int(o)]))
        reach = nxt
    return NeededPairs(emission=frozenset(em), transition=frozenset(tr))


def _parent_row(m: ModelPrimitives, kind: str, parent: Parent) -> np.ndarray:
    h, second = parent
    if kind == EMISSION:
        if not (0 <= h < m.num_states and 0 <= second < m.num_actions):
            raise StructuralModelError(
                f"emission parent (h={h + 1}, x={second + 1}) out of range"
            )
        return m.E[h, second]
    if not (0 <= h < m.num_states and 0 <= second < m.num_emissions):
        raise StructuralModelError(
            f"transition parent (h={h + 1}, i={second + 1}) out of range"
        )
    row = m.Q[h, second]
    if not m.transition_support[h, second]:
        raise StructuralModelError(
            f"transition parent (h={h + 1}, i={second + 1}) is unsupported "
            "(all-zero row): the model cannot occupy this condition"
        )
    return row


def enumerate_blocks(
    m: ModelPrimitives, needed_pairs: Optional[NeededPairs] = None
) -> list[BlockSpec]:
    """Materialize the block list for a model.

    With ``needed_pairs=None`` every supported parent pair is enumerated
    (quadratic in conditions — fine for toys, wasteful for real runs);
    otherwise only the listed pairs.  Self-pairs never appear.  Deterministic
    order: kind, then the parent tuples.
    """
    if needed_pairs is None:
        em_parents = [
            (h, x) for h in range(m.num_states) for x in range(m.num_actions)
        ]
        tr_parents = [
            (h, i)
            for h in range(m.num_states)
            for i in range(m.num_emissions)
            if m.transition_support[h, i]
        ]
        em_pairs = {
            (a, b) for ia, a in enumerate(em_parents) for b in em_parents[ia + 1 :]
        }
        tr_pairs = {
            (a, b) for ia, a in enumerate(tr_parents) for b in tr_parents[ia + 1 :]
        }
    else:
        em_pairs = set(needed_pairs.emission)
        tr_pairs = set(needed_pairs.transition)

    blocks: list[BlockSpec] = []
    for kind, pairs in ((EMISSION, em_pairs), (TRANSITION, tr_pairs)):
        for k, l in sorted(pairs):
            row = _parent_row(m, kind, k)
            col = _parent_row(m, kind, l)
            ro = np.flatnonzero(row)
            co = np.flatnonzero(col)
            blocks.append(
                BlockSpec(
                    kind=kind,
                    k=k,
                    l=l,
                    row_outcomes=ro,
                    col_outcomes=co,
                    row_marginal=row[ro],
                    col_marginal=col[co],
                )
            )
    return blocks


@dataclass(frozen=True)
class CouplingSpace:
    """An indexed, immutable block list: the coordinate system for z vectors.

    Derived fields map (block, row outcome, col outcome) to flat positions;
    forbidden cells map to -1.  ``model`` is optional — synthetic block lists
    (tests, relaxation demos) may not have one — but evaluation requires it.
    """

    blocks: tuple[BlockSpec, ...]
    model: Optional[ModelPrimitives] = None
    offsets: np.ndarray = field(init=False, repr=False, compare=False)
    total_cells: int = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "blocks", tuple(self.blocks))
        cell_index: list[np.ndarray] = []
        offsets = np.zeros(len(self.blocks) + 1, dtype=np.int64)
        lookup: dict[tuple[str, Parent, Parent], int] = {}
        pos = 0
        for bi, blk in enumerate(self.blocks):
            key = (blk.kind, tuple(blk.k), tuple(blk.l))
            if key in lookup:
                raise ValueError(f"duplicate block {blk.describe()}")
            lookup[key] = bi
            idx = np.full((blk.nr, blk.nc), -1, dtype=np.int64)
            mask = blk.allowed_mask()
            n_free = int(mask.sum())
            idx[mask] = pos + np.arange(n_free)
            idx.setflags(write=False)
            cell_index.append(idx)
            offsets[bi] = pos
            pos += n_free
        offsets[len(self.blocks)] = pos
        offsets.setflags(write=False)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "total_cells", pos)
        object.__setattr__(self, "_cell_index", cell_index)
        object.__setattr__(self, "_lookup", lookup)
        # outcome code -> position within block, per block and side
        rowpos, colpos = [], []
        for blk in self.blocks:
            size = int(max(blk.row_outcomes.max(), blk.col_outcomes.max())) + 1
            rp = np.full(size, -1, dtype=np.int64)
            rp[blk.row_outcomes] = np.arange(blk.nr)
            cp = np.full(size, -1, dtype=np.int64)
            cp[blk.col_outcomes] = np.arange(blk.nc)
            rp.setflags(write=False)
            cp.setflags(write=False)
            rowpos.append(rp)
            colpos.append(cp)
        object.__setattr__(self, "_rowpos", rowpos)
        object.__setattr__(self, "_colpos", colpos)

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def cell_index(self, bi: int) -> np.ndarray:
        """(nr, nc) flat positions, -1 at forbidden cells."""
        return self._cell_index[bi]

    def lookup_directed(
        self, kind: str, left: Parent, right: Parent
    ) -> Optional[tuple[int, bool]]:
        """Find the stored block for a directed (left, right) parent pair.

        Returns (block index, transposed); ``transposed=True`` means the
        stored block has ``left`` on its column side.  None if absent.
        """
        left, right = tuple(left), tuple(right)
        bi = self._lookup.get((kind, left, right))
        if bi is not None:
            return bi, False
        bi = self._lookup.get((kind, right, left))
        if bi is not None:
            return bi, True
        return None

    def flat_cell(self, bi: int, row_code: int, col_code: int, transposed: bool) -> int:
        """Flat position of a directed cell; -1 if forbidden or unsupported."""
        if transposed:
            row_code, col_code = col_code, row_code
        rp, cp = self._rowpos[bi], self._colpos[bi]
        if row_code >= rp.shape[0] or col_code >= cp.shape[0]:
            return -1
        r, c = rp[row_code], cp[col_code]
        if r < 0 or c < 0:
            return -1
        return int(self._cell_index[bi][r, c])


def build_space(
    blocks: Sequence[BlockSpec], model: Optional[ModelPrimitives] = None
) -> CouplingSpace:
    return CouplingSpace(blocks=tuple(blocks), model=model)


def _as_space(blocks_or_space, model=None) -> CouplingSpace:
    if isinstance(blocks_or_space, CouplingSpace):
        return blocks_or_space
    return build_space(blocks_or_space, model=model)


@dataclass(frozen=True)
class PairwiseCoupling:
    """One point of the product polytope: flat values over non-forbidden cells."""

    space: CouplingSpace
    z: np.ndarray

    def __post_init__(self) -> None:
        z = np.asarray(self.z, dtype=float)
        if z.shape != (self.space.total_cells,):
            raise ValueError(
                f"z has shape {z.shape}, space has {self.space.total_cells} cells"
            )
        z.setflags(write=False)
        object.__setattr__(self, "z", z)

    def block_matrix(self, bi: int) -> np.ndarray:
        """Dense (nr, nc) matrix of block ``bi`` (zeros at forbidden cells)."""
        idx = self.space.cell_index(bi)
        out = np.zeros(idx.shape)
        mask = idx >= 0
        out[mask] = self.z[idx[mask]]
        return out

    def with_z(self, z: np.ndarray) -> "PairwiseCoupling":
        return PairwiseCoupling(space=self.space, z=z)


def independence_coupling(blocks_or_space, model=None) -> PairwiseCoupling:
    """Product coupling: every cell = row marginal x column marginal.

    Raises :class:`StartInfeasibleError` ("product coupling violates zero
    constraints") when any forbidden cell would carry positive product mass,
    so callers can fall back to :func:`phase1_feasible_point`.
    """
    space = _as_space(blocks_or_space, model)
    z = np.empty(space.total_cells)
    for bi, blk in enumerate(space.blocks):
        prod = np.outer(blk.row_marginal, blk.col_marginal)
        idx = space.cell_index(bi)
        mask = idx >= 0
        if np.any(prod[~mask] > 0.0):
            raise StartInfeasibleError(
                "product coupling violates zero constraints in block "
                f"{blk.describe()}"
            )
        z[idx[mask]] = prod[mask]
    return PairwiseCoupling(space=space, z=z)


def _rank_intervals(
    margin_full: np.ndarray, order: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-outcome [lo, hi) interval endpoints of the rank-ordered CDF."""
    hi = np.empty_like(margin_full)
    hi[order] = np.cumsum(margin_full[order])
    return hi - margin_full, hi


def comonotonic_coupling(
    blocks_or_space, ranks: RankOrdering, model=None
) -> PairwiseCoupling:
    """Shared-uniform coupling: cell = overlap of the two rank-CDF intervals.

    Raises :class:`StartInfeasibleError` when nonzero overlap lands on a
    forbidden cell.
    """
    space = _as_space(blocks_or_space, model)
    z = np.zeros(space.total_cells)
    for bi, blk in enumerate(space.blocks):
        order = ranks.rank_O if blk.kind == EMISSION else ranks.rank_H
        n_out = int(order.shape[0])
        row_full = np.zeros(n_out)
        row_full[blk.row_outcomes] = blk.row_marginal
        col_full = np.zeros(n_out)
        col_full[blk.col_outcomes] = blk.col_marginal
        rlo, rhi = _rank_intervals(row_full, order)
        clo, chi = _rank_intervals(col_full, order)
        lo = np.maximum.outer(rlo[blk.row_outcomes], clo[blk.col_outcomes])
        hi = np.minimum.outer(rhi[blk.row_outcomes], chi[blk.col_outcomes])
        cells = np.clip(hi - lo, 0.0, None)
        idx = space.cell_index(bi)
        mask = idx >= 0
        if np.any(cells[~mask] > 1e-15):
            raise StartInfeasibleError(
                "comonotonic coupling violates zero constraints in block "
                f"{blk.describe()}"
            )
        z[idx[mask]] = cells[mask]
    return PairwiseCoupling(space=space, z=z)


def cs_forbidden_cells(
    m: ModelPrimitives, blocks: Sequence[BlockSpec]
) -> list[frozenset[Cell]]:
    """Counterfactual-stability zeros, one cell set per block.

    Cell (a, b) — counterfactual child a given the left parent, observed child
    b given the right parent — is forbidden when ``a != b`` and
    ``L[b]*R[a] >= L[a]*R[b]`` (cross-multiplied; skipped when both products
    are zero).  The inequality is symmetric in which parent plays the
    counterfactual, so evaluating stored blocks once covers both directions.
    """
    out: list[frozenset[Cell]] = []
    for blk in blocks:
        L = _parent_row(m, blk.kind, blk.k)
        R = _parent_row(m, blk.kind, blk.l)
        cells: set[Cell] = set()
        for a in blk.row_outcomes:
            for b in blk.col_outcomes:
                if a == b:
                    continue
                lhs = L[b] * R[a]
                rhs = L[a] * R[b]
                if lhs == 0.0 and rhs == 0.0:
                    continue
                if lhs >= rhs:
                    cells.add((int(a), int(b)))
        out.append(frozenset(cells))
    return out


def pm_forbidden_cells(
    blocks: Sequence[BlockSpec], pm_zeros: Iterable[PMZero]
) -> list[frozenset[Cell]]:
    """Map directed pathwise-monotonicity zeros onto the stored blocks.

    Directed entries whose parents are a self-pair, whose block is absent, or
    whose outcomes fall outside the stored support are automatically satisfied
    and contribute nothing.
    """
    key_to_pos = {
        (blk.kind, tuple(blk.k), tuple(blk.l)): i for i, blk in enumerate(blocks)
    }
    cells: list[set[Cell]] = [set() for _ in blocks]
    for zero in pm_zeros:
        left, right = tuple(zero.left_parent), tuple(zero.right_parent)
        if left == right:
            continue
        if (zero.kind, left, right) in key_to_pos:
            bi = key_to_pos[(zero.kind, left, right)]
            cell = (zero.left_outcome, zero.right_outcome)
        elif (zero.kind, right, left) in key_to_pos:
            bi = key_to_pos[(zero.kind, right, left)]
            cell = (zero.right_outcome, zero.left_outcome)
        else:
            continue
        blk = blocks[bi]
        if cell[0] in blk.row_outcomes and cell[1] in blk.col_outcomes:
            cells[bi].add(cell)
    return [frozenset(c) for c in cells]


def with_forbidden(
    blocks: Sequence[BlockSpec], *cell_sets: Sequence[frozenset[Cell]]
) -> list[BlockSpec]:
    """New block list with extra forbidden cells unioned in (aligned lists)."""
    for cs_ in cell_sets:
        if len(cs_) != len(blocks):
            raise ValueError("forbidden-cell list not aligned with blocks")
    out = []
    for i, blk in enumerate(blocks):
        extra: set[Cell] = set(blk.forbidden)
        for cs_ in cell_sets:
            extra.update(cs_[i])
        out.append(replace(blk, forbidden=frozenset(extra)))
    return out


def check_feasibility(coupling: PairwiseCoupling, tol: float = 1e-8) -> float:
    """Maximum constraint residual of a coupling.

    Max over all blocks of |row sums - row marginal|, |col sums - col
    marginal|, negative mass, and forbidden-cell mass (structurally 0 here
    since forbidden cells are not stored).  The coupling is feasible at
    tolerance ``tol`` iff the returned residual is <= ``tol``.
    """
    worst = 0.0
    z = coupling.z
    if z.size:
        worst = max(worst, float(np.maximum(-z, 0.0).max(initial=0.0)))
    for bi, blk in enumerate(coupling.space.blocks):
        mat = coupling.block_matrix(bi)
        worst = max(worst, float(np.abs(mat.sum(axis=1) - blk.row_marginal).max()))
        worst = max(worst, float(np.abs(mat.sum(axis=0) - blk.col_marginal).max()))
    return worst


def phase1_feasible_point(blocks_or_space, model=None) -> PairwiseCoupling:
    """A feasible coupling, or an infeasibility certificate.

    Blocks without forbidden cells take the product coupling; blocks with
    zeros solve a per-block feasibility flow.  Raises
    :class:`InfeasibleBlockError` naming the offending block when some
    marginal mass cannot be routed through the allowed cells.
    """
    space = _as_space(blocks_or_space, model)
    z = np.empty(space.total_cells)
    for bi, blk in enumerate(space.blocks):
        idx = space.cell_index(bi)
        mask = idx >= 0
        if mask.all():
            plan = np.outer(blk.row_marginal, blk.col_marginal)
        else:
            plan, status = feasible_flow(
                np.ascontiguousarray(blk.row_marginal),
                np.ascontiguousarray(blk.col_marginal),
                np.ascontiguousarray(mask),
            )
            if status == 1:
                unrouted = float(blk.row_marginal.sum() - plan.sum())
                raise InfeasibleBlockError(
                    blk,
                    f"{unrouted:.6g} of marginal mass cannot be routed "
                    "through the allowed cells",
                )
            if status != 0:
                raise RuntimeError(
                    f"feasibility flow stalled on block {blk.describe()}"
                )
            plan[~mask] = 0.0  # exact zeros on forbidden cells
        z[idx[mask]] = plan[mask]
    return PairwiseCoupling(space=space, z=z)


def coupling_to_csv(coupling: PairwiseCoupling, dest: Union[str, IO[str]]) -> None:
    """Rows ``kind,k,l,row,col,value``; parents as "h|second", 1-based codes."""
    own = isinstance(dest, str)
    fh = open(dest, "w", newline="", encoding="utf-8") if own else dest
    try:
        w = csv.writer(fh)
        w.writerow(["kind", "k", "l", "row", "col", "value"])
        for bi, blk in enumerate(coupling.space.blocks):
            mat = coupling.block_matrix(bi)
            idx = coupling.space.cell_index(bi)
            for r in range(blk.nr):
                for c in range(blk.nc):
                    if idx[r, c] < 0:
                        continue
                    w.writerow(
                        [
                            blk.kind,
                            f"{blk.k[0] + 1}|{blk.k[1] + 1}",
                            f"{blk.l[0] + 1}|{blk.l[1] + 1}",
                            int(blk.row_outcomes[r]) + 1,
                            int(blk.col_outcomes[c]) + 1,
                            repr(float(mat[r, c])),
                        ]
                    )
    finally:
        if own:
            fh.close()
