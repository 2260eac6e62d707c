"""Model primitives, trajectories, validation, and file I/O.

The generative process is a controlled hidden-state chain: a latent state
``H_t`` emits an observation ``O_t`` whose law depends on the current action
``X_t``, and the next latent state depends on ``(H_t, O_t)``.  Actions are
exogenous inputs (no distribution over them is stored).

Index conventions
-----------------
In memory everything is 0-based.  On-disk trajectory files use 1-based
observation/action codes, converted exactly once in :func:`load_trajectory` /
:func:`save_trajectory`.  Human-facing messages (validation reports, errors)
use 1-based coordinates to match the file formats.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

__all__ = [
    "ModelPrimitives",
    "Trajectory",
    "Violation",
    "ValidationReport",
    "ModelFileError",
    "validate_primitives",
    "validate_trajectory",
    "load_model",
    "save_model",
    "load_trajectory",
    "save_trajectory",
]


class ModelFileError(ValueError):
    """A model or trajectory file is malformed or describes an invalid model."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ModelPrimitives:
    """Immutable container for the model's probability tables.

    Parameters
    ----------
    p : ndarray, shape (H,)
        Initial latent-state distribution.
    E : ndarray, shape (H, X, O)
        Emission kernels: ``E[h, x, i] = P(O_t = i | H_t = h, X_t = x)``.
    Q : ndarray, shape (H, O, H)
        Transition kernels: ``Q[h, i, h'] = P(H_{t+1} = h' | H_t = h, O_t = i)``.

    Rows of ``Q`` that are identically zero mark (state, observation) pairs the
    process can never occupy; :attr:`transition_support` records which rows are
    live.  Arrays are stored read-only; validation is separate (see
    :func:`validate_primitives`) so that malformed inputs can be *reported*
    rather than half-rejected at construction time.
    """

    p: np.ndarray
    E: np.ndarray
    Q: np.ndarray
    transition_support: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "p", _readonly(np.asarray(self.p, dtype=float)))
        object.__setattr__(self, "E", _readonly(np.asarray(self.E, dtype=float)))
        object.__setattr__(self, "Q", _readonly(np.asarray(self.Q, dtype=float)))
        if self.Q.ndim == 3:
            support = self.Q.sum(axis=2) > 0.0
        else:  # malformed; leave detection to validate_primitives
            support = np.zeros((0, 0), dtype=bool)
        object.__setattr__(self, "transition_support", _readonly(support))

    @property
    def num_states(self) -> int:
        return int(self.p.shape[0])

    @property
    def num_actions(self) -> int:
        return int(self.E.shape[1]) if self.E.ndim == 3 else 0

    @property
    def num_emissions(self) -> int:
        return int(self.E.shape[2]) if self.E.ndim == 3 else 0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelPrimitives):
            return NotImplemented
        return (
            self.p.shape == other.p.shape
            and self.E.shape == other.E.shape
            and self.Q.shape == other.Q.shape
            and bool(np.all(self.p == other.p))
            and bool(np.all(self.E == other.E))
            and bool(np.all(self.Q == other.Q))
        )

    def __hash__(self) -> int:
        return hash((self.p.tobytes(), self.E.tobytes(), self.Q.tobytes()))


@dataclass(frozen=True)
class Trajectory:
    """One observed episode: observations, actions, and the counterfactual actions.

    ``o`` and ``x`` have length ``T``; ``x_tilde`` is the action sequence of the
    counterfactual regime (same length).  All entries are 0-based codes.
    """

    o: np.ndarray
    x: np.ndarray
    x_tilde: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "o", _readonly(np.asarray(self.o, dtype=np.int64)))
        object.__setattr__(self, "x", _readonly(np.asarray(self.x, dtype=np.int64)))
        object.__setattr__(
            self, "x_tilde", _readonly(np.asarray(self.x_tilde, dtype=np.int64))
        )

    @property
    def T(self) -> int:
        return int(self.o.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.o.shape == other.o.shape
            and bool(np.all(self.o == other.o))
            and bool(np.all(self.x == other.x))
            and bool(np.all(self.x_tilde == other.x_tilde))
        )

    def __hash__(self) -> int:
        return hash((self.o.tobytes(), self.x.tobytes(), self.x_tilde.tobytes()))


@dataclass(frozen=True)
class Violation:
    """One validation failure.

    ``kind`` is one of ``"shape"``, ``"negative"``, ``"row_sum"``, ``"range"``,
    ``"impossible"``; ``where`` is a human-readable 1-based coordinate;
    ``deviation`` quantifies the failure where meaningful (0.0 otherwise).
    """

    kind: str
    where: str
    deviation: float
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        if self.ok:
            return "ok"
        lines = [f"{len(self.violations)} violation(s):"]
        lines += [f"  [{v.kind}] {v.where}: {v.message}" for v in self.violations]
        return "\n".join(lines)


def validate_primitives(m: ModelPrimitives, tol: float = 1e-9) -> ValidationReport:
    """Check structural and stochasticity constraints on model primitives.

    Shape inconsistencies are reported as ``kind="shape"`` (structural) and are
    distinct from stochasticity violations (``"negative"``, ``"row_sum"``).
    All-zero transition rows are legal: they mark unreachable (state,
    observation) pairs.  Row sums are tested against 1 within ``tol``.
    """
    bad: list[Violation] = []

    def _shape(msg: str) -> None:
        bad.append(Violation("shape", "primitives", 0.0, msg))

    if m.p.ndim != 1:
        _shape(f"p must be 1-d, got ndim={m.p.ndim}")
    if m.E.ndim != 3:
        _shape(f"E must be 3-d (states, actions, emissions), got ndim={m.E.ndim}")
    if m.Q.ndim != 3:
        _shape(f"Q must be 3-d (states, emissions, states), got ndim={m.Q.ndim}")
    if bad:
        return ValidationReport(tuple(bad))

    H = m.p.shape[0]
    if m.E.shape[0] != H:
        _shape(f"E has {m.E.shape[0]} state rows but p has {H} entries")
    if m.Q.shape[0] != H or m.Q.shape[2] != H:
        _shape(f"Q shape {m.Q.shape} inconsistent with {H} states")
    if m.E.ndim == 3 and m.Q.ndim == 3 and m.Q.shape[1] != m.E.shape[2]:
        _shape(
            f"Q conditions on {m.Q.shape[1]} emissions but E emits {m.E.shape[2]}"
        )
    if bad:
        return ValidationReport(tuple(bad))

    for name, arr in (("p", m.p), ("E", m.E), ("Q", m.Q)):
        if np.any(arr < 0):
            idx = np.unravel_index(int(np.argmin(arr)), arr.shape)
            coord = "[" + "][".join(str(i + 1) for i in idx) + "]"
            bad.append(
                Violation(
                    "negative",
                    f"{name}{coord}",
                    float(arr[idx]),
                    f"negative entry {arr[idx]!r}",
                )
            )

    dev = abs(float(m.p.sum()) - 1.0)
    if dev > tol:
        bad.append(Violation("row_sum", "p", dev, f"sums to {m.p.sum()!r}, not 1"))

    esums = m.E.sum(axis=2)
    for h, x in zip(*np.nonzero(np.abs(esums - 1.0) > tol)):
        bad.append(
            Violation(
                "row_sum",
                f"E[h={h + 1}][x={x + 1}]",
                abs(float(esums[h, x]) - 1.0),
                f"emission row sums to {esums[h, x]!r}, not 1",
            )
        )

    qsums = m.Q.sum(axis=2)
    live = qsums > 0.0
    for h, i in zip(*np.nonzero(live & (np.abs(qsums - 1.0) > tol))):
        bad.append(
            Violation(
                "row_sum",
                f"Q[h={h + 1}][i={i + 1}]",
                abs(float(qsums[h, i]) - 1.0),
                f"transition row sums to {qsums[h, i]!r}, not 1 (all-zero rows are allowed)",
            )
        )

    return ValidationReport(tuple(bad))


def validate_trajectory(
    m: ModelPrimitives, traj: Trajectory, check_likelihood: bool = True
) -> ValidationReport:
    """Check a trajectory against a model: lengths, code ranges, and positivity.

    With ``check_likelihood=True`` the forward filter is run and an impossible
    trajectory (zero likelihood) is reported as ``kind="impossible"`` with the
    first 1-based period at which all filtered mass vanishes.
    """
    bad: list[Violation] = []
    T = traj.T
    if traj.x.shape[0] != T or traj.x_tilde.shape[0] != T:
        bad.append(
            Violation(
                "shape",
                "trajectory",
                0.0,
                f"o/x/x_tilde lengths differ: {T}, {traj.x.shape[0]}, {traj.x_tilde.shape[0]}",
            )
        )
        return ValidationReport(tuple(bad))
    if T == 0:
        bad.append(Violation("shape", "trajectory", 0.0, "empty trajectory"))
        return ValidationReport(tuple(bad))

    O, X = m.num_emissions, m.num_actions
    for name, arr, bound in (("o", traj.o, O), ("x", traj.x, X), ("x_tilde", traj.x_tilde, X)):
        off = np.nonzero((arr < 0) | (arr >= bound))[0]
        if off.size:
            t = int(off[0])
            bad.append(
                Violation(
                    "range",
                    f"{name}[t={t + 1}]",
                    0.0,
                    f"code {arr[t] + 1} outside 1..{bound}",
                )
            )
    if bad:
        return ValidationReport(tuple(bad))

    if check_likelihood:
        from .inference import ImpossibleTrajectoryError, forward_filter

        try:
            forward_filter(m, traj)
        except ImpossibleTrajectoryError as err:
            bad.append(
                Violation(
                    "impossible",
                    f"t={err.t}",
                    0.0,
                    str(err),
                )
            )
    return ValidationReport(tuple(bad))


# ---------------------------------------------------------------------------
# File formats.  Models are JSON with raw probability arrays (positional, no
# index codes, so no base conversion); trajectories are JSON with 1-based
# observation/action codes.
# ---------------------------------------------------------------------------


def save_model(m: ModelPrimitives, path: str) -> None:
    """Write a model to JSON. Round-trips bit-exactly for finite entries."""
    doc = {
        "num_states": m.num_states,
        "num_actions": m.num_actions,
        "num_emissions": m.num_emissions,
        "p": m.p.tolist(),
        "E": m.E.tolist(),
        "Q": m.Q.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def _require(doc: dict[str, Any], key: str, path: str) -> Any:
    if key not in doc:
        raise ModelFileError(f"{path}: missing required field {key!r}")
    return doc[key]


def load_model(path: str, tol: float = 1e-9) -> ModelPrimitives:
    """Read and validate a model JSON file.

    Raises :class:`ModelFileError` naming the offending field/coordinate on
    malformed input or on validation failure.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise ModelFileError(f"{path}: cannot parse model file: {err}") from err
    if not isinstance(doc, dict):
        raise ModelFileError(f"{path}: expected a JSON object at top level")

    arrays = {}
    for key in ("p", "E", "Q"):
        raw = _require(doc, key, path)
        try:
            arrays[key] = np.asarray(raw, dtype=float)
        except (TypeError, ValueError) as err:
            raise ModelFileError(f"{path}: field {key!r} is not numeric: {err}") from err

    m = ModelPrimitives(arrays["p"], arrays["E"], arrays["Q"])
    for key, expect, got in (
        ("num_states", doc.get("num_states"), m.num_states),
        ("num_actions", doc.get("num_actions"), m.num_actions),
        ("num_emissions", doc.get("num_emissions"), m.num_emissions),
    ):
        if expect is not None and int(expect) != got:
            raise ModelFileError(
                f"{path}: declared {key}={expect} but arrays imply {got}"
            )

    report = validate_primitives(m, tol=tol)
    if not report.ok:
        raise ModelFileError(f"{path}: invalid model\n{report.summary()}")
    return m


def save_trajectory(traj: Trajectory, path: str) -> None:
    """Write a trajectory to JSON with 1-based codes."""
    doc = {
        "T": traj.T,
        "o": (traj.o + 1).tolist(),
        "x": (traj.x + 1).tolist(),
        "x_tilde": (traj.x_tilde + 1).tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_trajectory(path: str, m: Optional[ModelPrimitives] = None) -> Trajectory:
    """Read a trajectory JSON file (1-based codes on disk).

    If ``m`` is given, code ranges are checked against the model and a
    :class:`ModelFileError` is raised with the first offending 1-based entry.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise ModelFileError(f"{path}: cannot parse trajectory file: {err}") from err
    if not isinstance(doc, dict):
        raise ModelFileError(f"{path}: expected a JSON object at top level")

    seqs = {}
    for key in ("o", "x", "x_tilde"):
        raw = _require(doc, key, path)
        try:
            arr = np.asarray(raw, dtype=np.int64)
        except (TypeError, ValueError) as err:
            raise ModelFileError(f"{path}: field {key!r} is not integer: {err}") from err
        if arr.ndim != 1:
            raise ModelFileError(f"{path}: field {key!r} must be a flat list")
        if np.any(arr < 1):
            t = int(np.nonzero(arr < 1)[0][0])
            raise ModelFileError(
                f"{path}: {key}[t={t + 1}] = {arr[t]} but codes are 1-based"
            )
        seqs[key] = arr - 1

    declared = doc.get("T")
    if declared is not None and int(declared) != seqs["o"].shape[0]:
        raise ModelFileError(
            f"{path}: declared T={declared} but o has length {seqs['o'].shape[0]}"
        )
    traj = Trajectory(seqs["o"], seqs["x"], seqs["x_tilde"])
    if m is not None:
        report = validate_trajectory(m, traj, check_likelihood=False)
        if not report.ok:
            raise ModelFileError(f"{path}: invalid trajectory\n{report.summary()}")
    return traj


def model_to_dict(m: ModelPrimitives) -> dict[str, Any]:
    """Plain-dict form (used by tests and config tooling)."""
    return {"p": m.p.tolist(), "E": m.E.tolist(), "Q": m.Q.tolist()}


def model_from_dict(doc: dict[str, Any]) -> ModelPrimitives:
    return ModelPrimitives(
        np.asarray(doc["p"], dtype=float),
        np.asarray(doc["E"], dtype=float),
        np.asarray(doc["Q"], dtype=float),
    )
