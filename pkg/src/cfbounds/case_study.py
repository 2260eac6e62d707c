"""Breast-cancer screening scenario: calibrated primitives and companions.

A seven-state model of cancer progression under semi-annual mammogram
screening, calibrated to published incidence, survival, and test-accuracy
figures.  The module also provides the two reference patient histories used
throughout the examples, the pathwise-monotonicity zero list for this
domain, and the severity ordering that drives the comonotonic coupling.

All arrays are 0-based; the clinical labels below follow the usual 1-based
presentation (state 1 = healthy, ..., state 7 = death), so code comments
that cite a label like ``q37`` refer to 1-based states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .copula_sim import RankOrdering
from .coupling import TRANSITION, PMZero
from .model import ModelPrimitives, Trajectory

__all__ = [
    "STATE_LABELS",
    "EMISSION_LABELS",
    "CancerScenario",
    "breast_cancer_model",
    "make_path",
    "pm_zero_list",
    "breast_cancer_ranks",
]

STATE_LABELS = (
    "healthy",
    "undiagnosed in-situ",
    "undiagnosed invasive",
    "diagnosed in-situ",
    "diagnosed invasive",
    "recovered",
    "death",
)

EMISSION_LABELS = (
    "no screening",
    "negative mammogram",
    "positive mammogram, negative biopsy",
    "in-situ diagnosed",
    "invasive diagnosed",
    "recovery observed",
    "death observed",
)

# action 0 = screening covered (mammogram performed), 1 = coverage denied
ACTION_LABELS = ("screened", "not screened")


@dataclass(frozen=True)
class CancerScenario:
    """A calibrated model plus the labels needed to read its indices.

    ``forbidden_state`` is the 0-based index of the death state; the
    counterfactual queries ask for the probability of avoiding it.
    """

    model: ModelPrimitives
    state_labels: tuple[str, ...] = STATE_LABELS
    emission_labels: tuple[str, ...] = EMISSION_LABELS
    forbidden_state: int = 6


def breast_cancer_model(in_situ_stay: float = 0.5) -> CancerScenario:
    """Build the calibrated screening model.

    Time steps are six months.  Sources for the constants: cancer prevalence
    among women in the first screened age bracket (1.0183%, split 20/80
    between in-situ and invasive), annual in-situ and invasive incidence
    rates (33.0 and 128.5 per 100k, halved for the 6-month step), untreated
    invasive mortality fit (0.1554 per step), treated invasive
    recovery/mortality fit (0.0459, 0.0113), mammogram specificity 0.9, and
    in-situ/invasive sensitivity 0.8.

    ``in_situ_stay`` splits the treated in-situ mass between staying under
    treatment and recovering.  No path from treated in-situ reaches death,
    so the split cannot affect survival probabilities; it is exposed only so
    tests can verify that invariance.
    """
    if not 0.0 <= in_situ_stay <= 1.0:
        raise ValueError("in_situ_stay must lie in [0, 1]")

    onset = 0.010183
    p = np.zeros(7)
    p[0] = 1.0 - onset
    p[1] = 0.2 * onset  # undiagnosed in-situ
    p[2] = 0.8 * onset  # undiagnosed invasive

    # Per-step transition rates.  q_b27/q_b37 are the treated (diagnosed)
    # counterparts of q27/q37.
    q12 = 0.5 * 33.0 / 100_000
    q13 = 0.5 * 128.5 / 100_000
    q11 = 1.0 - q12 - q13
    q27 = 0.0  # in-situ cancer alone is not lethal
    q23 = q13
    q22 = 1.0 - q23 - q27
    q_b27 = 0.0
    q25 = 0.0  # treated in-situ never progresses to invasive
    q24 = in_situ_stay
    q26 = 1.0 - q24
    q37 = 0.1554
    q33 = 1.0 - q37
    q36 = 0.0459
    q_b37 = 0.0113
    q35 = 1.0 - q36 - q_b37
    row4 = (q24, q25, q26, q_b27)  # treated in-situ == freshly detected
    row5 = (q35, q36, q_b37)  # treated invasive == freshly detected

    # Q[h, i, h']: rows absent from the per-emission matrices stay all-zero,
    # marking (h, i) combinations that cannot occur.
    Q = np.zeros((7, 7, 7))
    for i in (0, 1):  # no screening / negative mammogram
        Q[0, i, 0:3] = (q11, q12, q13)
        Q[1, i, 1], Q[1, i, 2], Q[1, i, 6] = q22, q23, q27
        Q[2, i, 2], Q[2, i, 6] = q33, q37
    Q[0, 2, 0:3] = (q11, q12, q13)  # false positive: patient is healthy
    for h in (3,):  # diagnosed in-situ row, shared by Q(1) and Q(4)
        for i in (0, 3):
            Q[h, i, 3:7] = row4
    for h in (4,):  # diagnosed invasive row, shared by Q(1) and Q(5)
        for i in (0, 4):
            Q[h, i, 4:7] = row5
    Q[1, 3, 3:7] = row4  # in-situ detected now: treatment starts
    Q[2, 4, 4:7] = row5  # invasive detected now: treatment starts
    Q[5, 0, 5] = 1.0  # recovered is absorbing
    Q[5, 5, 5] = 1.0
    Q[6, 0, 6] = 1.0  # death is absorbing
    Q[6, 6, 6] = 1.0

    e12 = 0.9  # specificity: P(negative mammogram | healthy, screened)
    e24 = 0.8  # in-situ sensitivity
    e35 = e24  # invasive sensitivity
    E = np.zeros((7, 2, 7))
    E[0, 0, 1], E[0, 0, 2] = e12, 1.0 - e12
    E[1, 0, 1], E[1, 0, 3] = 1.0 - e24, e24
    E[2, 0, 1], E[2, 0, 4] = 1.0 - e35, e35
    for h in range(3, 7):
        E[h, 0, h] = 1.0  # treated/absorbed states announce themselves
    for h in range(3):
        E[h, 1, 0] = 1.0  # unscreened and untreated: no signal
    for h in range(3, 7):
        E[h, 1, h] = 1.0

    model = ModelPrimitives(p=p, E=E, Q=Q)
    return CancerScenario(model=model)


def make_path(label: str, T: int) -> Trajectory:
    """One of the two reference patient histories, stretched to length ``T``.

    Both start with a negative mammogram, lose screening coverage for the
    middle periods, and end in death at period ``T``; in ``path2`` coverage
    resumes one period earlier and the screening detects invasive cancer.
    The counterfactual policy is full coverage (screening every period).
    Emission codes are 0-based (clinical label minus one).
    """
    if T < 4:
        raise ValueError(f"paths need T >= 4, got T={T}")
    if label == "path1":
        o = [2] + [1] * (T - 2) + [7]
        x = [0] + [1] * (T - 2) + [0]
    elif label == "path2":
        o = [2] + [1] * (T - 3) + [5, 7]
        x = [0] + [1] * (T - 3) + [0, 0]
    else:
        raise ValueError(f"unknown path label {label!r}")
    return Trajectory(
        o=np.array(o) - 1,
        x=np.array(x),
        x_tilde=np.zeros(T, dtype=np.int64),
    )


def _expand(h, i_set, hp, ht_set, it_set, htp_set):
    """All directed transition-coupling zeros for one monotonicity rule.

    1-based arguments; emits 0-based :class:`PMZero` entries with the
    counterfactual condition on the left."""
    out = []
    for i in i_set:
        for ht in ht_set:
            for it in it_set:
                for htp in htp_set:
                    out.append(
                        PMZero(
                            kind=TRANSITION,
                            left_parent=(ht - 1, it - 1),
                            right_parent=(h - 1, i - 1),
                            left_outcome=htp - 1,
                            right_outcome=hp - 1,
                        )
                    )
    return out


def pm_zero_list() -> list[PMZero]:
    """Every transition-coupling cell ruled out by pathwise monotonicity.

    The principle: with screening coverage restored, the counterfactual
    disease course can never be *worse* than the factual one.  Each rule
    below fixes a factual step (state ``h``, emission ``i``, next state
    ``h'``) and forbids counterfactual next states that would mean the
    treated patient fared worse (or implausibly better, where monotonicity
    pins the course).  Emission couplings need no such zeros: the emission
    semantics are symmetric given the state.

    1-based notation in the comments; ``O`` means any emission.
    """
    O = range(1, 8)
    undet = (1, 2, 3)  # emissions compatible with undetected cancer
    zeros: list[PMZero] = []

    # Factually healthy: the counterfactual, also healthy with the same
    # noise, must track the factual transition exactly.
    for hp, bad in ((1, (2, 3, 4, 5, 7)), (2, (1, 3, 5, 7)),
                    (3, (1, 2, 4, 7)), (7, (1, 2, 3, 4, 5))):
        zeros += _expand(1, O, hp, (1,), O, bad)

    # Factual in-situ, undetected, stays in-situ: counterfactual (healthy,
    # in-situ, or treated in-situ) cannot progress or die.
    zeros += _expand(2, undet, 2, (1, 2, 4), O, (3, 5, 7))
    # ... detected and treated: same, with treatment in both worlds.
    zeros += _expand(2, (4,), 4, (2, 4), (4,), (3, 5, 7))
    # Factual in-situ progressing to invasive: counterfactual cannot die.
    zeros += _expand(2, undet, 3, (1, 2, 4), O, (7,))
    zeros += _expand(2, (4,), 5, (2, 4), (4,), (7,))
    # Factual treated in-situ recovering: counterfactual recovers too.
    zeros += _expand(2, (4,), 6, (2, 4), (4,), (2, 3, 4, 5, 7))
    # Factual in-situ dying (impossible here, but the rule is stated):
    # counterfactual in-situ dies as well.
    zeros += _expand(2, undet, 7, (2,), undet, (2, 3, 4, 5, 6))
    zeros += _expand(2, (4,), 7, (2, 4), (4,), (2, 3, 4, 5, 6))

    # Factual invasive, undetected, stays invasive: no counterfactual death.
    zeros += _expand(3, undet, 3, (1, 2, 3, 4, 5), O, (7,))
    zeros += _expand(3, (5,), 5, (3, 5), (5,), (7,))
    # Factual treated invasive recovering: counterfactual not worse.
    zeros += _expand(3, (5,), 6, (3, 5), (5,), (3, 5, 7))
    # Factual invasive dying: counterfactual invasive resolves too
    # (to death or not at all — it cannot linger or recover).
    zeros += _expand(3, undet, 7, (3, 5), undet, (3, 5, 6))
    zeros += _expand(3, (5,), 7, (3, 5), (5,), (3, 5, 6))

    # Factually treated (diagnosed in-situ / invasive): both worlds undergo
    # the same treatment, so the counterfactual step must match the factual.
    for hp, bad in ((4, (5, 6, 7)), (5, (4, 6, 7)),
                    (6, (4, 5, 7)), (7, (4, 5, 6))):
        zeros += _expand(4, (4,), hp, (2, 4), (4,), bad)
    for hp, bad in ((5, (6, 7)), (6, (5, 7)), (7, (5, 6))):
        zeros += _expand(5, (5,), hp, (3, 5), (5,), bad)

    # States 6 (recovered) and 7 (death) are absorbing: nothing to forbid.
    return zeros


def breast_cancer_ranks() -> RankOrdering:
    """Severity ordering for the comonotonic coupling, best state first.

    States are ranked healthy < recovered < diagnosed in-situ < undiagnosed
    in-situ < diagnosed invasive < undiagnosed invasive < death.  Swapping
    the undiagnosed-in-situ/diagnosed-invasive pair is equally defensible
    and provably equivalent here, because no transition row gives both
    states positive probability.  Emissions keep index order; the reference
    paths never make the emission ranking bind.
    """
    return RankOrdering(
        rank_H=np.array([1, 6, 4, 2, 5, 3, 7]) - 1,
        rank_O=np.arange(7),
    )
