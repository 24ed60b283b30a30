"""The nine label-collection policies.

A policy decides, each period, which denied applicants get labelled anyway
(uniform or inverse-propensity exploration), whether denied applicants get
recourse actions, and whether enacting an action comes with a one-period
approval guarantee.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .learner import LinearModel
from .recourse import ActionSet, GuaranteeLedger, solve_recourse

__all__ = [
    "POLICY_KINDS",
    "PolicySpec",
    "PolicyError",
    "select_exploration",
    "exploration_probabilities",
    "collect_labels",
    "route_denied",
    "RoutePlan",
]

POLICY_KINDS = (
    "censoring", "no_censoring", "random", "ipw", "rec",
    "rec_guarantee", "rec_random", "guarantee_ipw", "rec_ipw",
)

_TRAITS = {
    # kind: (exploration, recourse, guarantee)
    "censoring": (None, False, False),
    "no_censoring": (None, False, False),
    "random": ("uniform", False, False),
    "ipw": ("ipw", False, False),
    "rec": (None, True, False),
    "rec_guarantee": (None, True, True),
    "rec_random": ("uniform", True, False),
    "guarantee_ipw": ("ipw", True, True),
    "rec_ipw": ("ipw", True, False),
}


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class PolicySpec:
    kind: str
    alpha: float = 0.01

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise PolicyError(f"unknown policy {self.kind!r}; valid: {', '.join(POLICY_KINDS)}")
        if not 0.0 <= self.alpha <= 1.0:
            raise PolicyError("alpha must lie in [0, 1]")

    @property
    def exploration(self) -> str | None:
        return _TRAITS[self.kind][0]

    @property
    def recourse(self) -> bool:
        return _TRAITS[self.kind][1]

    @property
    def guarantee(self) -> bool:
        return _TRAITS[self.kind][2]

    @property
    def induces_censoring(self) -> bool:
        """Whether the initial data goes through the configured induction."""
        return self.kind != "no_censoring"


def exploration_probabilities(kind: str, phat: np.ndarray, alpha: float) -> np.ndarray:
    """Per-individual selection probability for the denied set."""
    phat = np.asarray(phat, dtype=float)
    n = phat.size
    if n == 0 or alpha == 0:
        return np.zeros(n)
    if kind == "uniform":
        return np.full(n, float(alpha))
    if kind == "ipw":
        if np.any(phat <= 0):
            raise PolicyError("IPW needs strictly positive predicted probabilities")
        inv = 1.0 / phat
        return np.minimum(1.0, alpha * n * inv / inv.sum())
    raise PolicyError(f"unknown exploration kind {kind!r}")


def select_exploration(kind: str | PolicySpec, denied_ids: Sequence[int], phat: Sequence[float],
                       alpha: float | None, rng: np.random.Generator) -> np.ndarray:
    """Ids of denied applicants approved-and-labelled for exploration."""
    if isinstance(kind, PolicySpec):
        alpha = kind.alpha if alpha is None else alpha
        kind = kind.exploration
    ids = np.asarray(denied_ids, dtype=np.int64)
    if kind is None or ids.size == 0:
        return np.zeros(0, dtype=np.int64)
    q = exploration_probabilities(kind, np.asarray(phat, dtype=float), float(alpha))
    pick = rng.random(ids.size) < q
    return ids[pick]


def collect_labels(approved: Iterable[int], explored: Iterable[int] = (),
                   guaranteed: Iterable[int] = ()) -> dict[int, str]:
    """Which ids get labelled this period, and by which route.

    The three routes must be disjoint: an explored id was denied by the
    model, and a guaranteed id's approval comes from the ledger only if the
    model denied it.
    """
    out: dict[int, str] = {}
    for route, ids in (("approved", approved), ("guaranteed", guaranteed), ("explored", explored)):
        for i in ids:
            i = int(i)
            if i in out:
                raise PolicyError(f"individual {i} collected twice in one period")
            out[i] = route
    return out


@dataclass
class RoutePlan:
    """Outcome of routing the still-denied applicants."""

    steps: np.ndarray        # (n_denied, d) signed lattice steps (0 rows = no action)
    feasible: np.ndarray     # bool, action found
    issued: np.ndarray       # bool, an action was attempted (recourse policies only)


def route_denied(policy: PolicySpec, X_denied: np.ndarray, m: LinearModel, aset: ActionSet,
                 ledger: GuaranteeLedger | None = None, ids: Sequence[int] = (), period: int = 0
                 ) -> RoutePlan:
    """Give each denied applicant a recourse action (recourse policies).

    Everyone stays in the reapplicant pool; feasible actions are enacted by
    the engine before the next period, and guarantee policies log a promise.
    """
    n, d = X_denied.shape
    steps = np.zeros((n, d))
    feasible = np.zeros(n, dtype=bool)
    if not policy.recourse or n == 0:
        return RoutePlan(steps, feasible, np.zeros(n, dtype=bool))
    act, lo, hi, cost, dirs = aset.arrays(m.feature_names)
    w, b, rho = m.coef, m.intercept, m.threshold
    for i in range(n):
        s = solve_recourse(w, b, rho, X_denied[i], act, lo, hi, cost, dirs, aset.step)
        if s is not None:
            steps[i] = s
            feasible[i] = True
    if policy.guarantee and ledger is not None:
        for i in np.flatnonzero(feasible):
            ledger.promise(int(ids[i]), period)
    return RoutePlan(steps, feasible, np.ones(n, dtype=bool))
