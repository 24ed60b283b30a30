"""Minimal-cost recourse for linear models, action enactment and guarantees.

Actions live on a lattice: every change is an integer multiple of the
action-set ``step``, and the post-action value must stay inside the
feature's bounds.  Cost is weighted L1.  For a linear score the problem is a
covering knapsack; when all useful features have the same cost weight the
greedy fill (best |w|/cost first, last feature rounded up to the lattice)
is exactly optimal, and otherwise a bounded enumeration is used.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from scipy.special import expit

from .dgp import DagSpec, Individual, resample_downstream
from .learner import LinearModel, decide

__all__ = [
    "FeatureAction",
    "ActionSet",
    "RecourseAction",
    "GuaranteeLedger",
    "RecourseError",
    "default_action_set",
    "solve_recourse",
    "compute_recourse",
    "enact_action",
    "validate_action",
    "ledger_promise",
    "ledger_discharge",
]

DIRECTIONS = ("both", "increase", "decrease")
_ENUM_LIMIT = 4_000_000


class RecourseError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureAction:
    actionable: bool = True
    direction: str = "both"
    lo: float = -math.inf
    hi: float = math.inf
    cost_weight: float = 1.0

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise RecourseError(f"direction must be one of {DIRECTIONS}")
        if self.lo > self.hi:
            raise RecourseError("action bounds are empty")
        if self.cost_weight < 0:
            raise RecourseError("cost weights must be nonnegative")


@dataclass(frozen=True)
class ActionSet:
    """Per-feature actionability, keyed by model feature name."""

    features: Mapping[str, FeatureAction]
    step: float = 0.01

    def __post_init__(self):
        if not self.step > 0:
            raise RecourseError("step must be > 0")
        object.__setattr__(self, "features", dict(self.features))

    def get(self, name: str) -> FeatureAction:
        return self.features.get(name, FeatureAction(actionable=False))

    def check_against(self, spec: DagSpec) -> None:
        """Bounds must sit inside the DGP's value range; z stays immutable."""
        for name, fa in self.features.items():
            if not fa.actionable:
                continue
            if name == spec.censor_node:
                raise RecourseError(f"censor node {name!r} cannot be actionable")
            lo, hi = spec.bounds(name)
            if fa.lo < lo or fa.hi > hi:
                raise RecourseError(f"action bounds for {name!r} exceed DGP range [{lo}, {hi}]")

    def arrays(self, names: Iterable[str]):
        names = list(names)
        fas = [self.get(k) for k in names]
        act = np.array([f.actionable for f in fas], dtype=bool)
        lo = np.array([f.lo for f in fas], dtype=float)
        hi = np.array([f.hi for f in fas], dtype=float)
        cost = np.array([f.cost_weight for f in fas], dtype=float)
        dirs = np.array([{"both": 0, "increase": 1, "decrease": -1}[f.direction] for f in fas])
        return act, lo, hi, cost, dirs


def default_action_set(spec: DagSpec, step: float = 0.01, bounds: Mapping[str, tuple] | None = None,
                       cost_weights: Mapping[str, float] | None = None) -> ActionSet:
    """Every model feature except z (and declared immutables) actionable both ways."""
    bounds = bounds or {}
    cost_weights = cost_weights or {}
    feats = {}
    for name in spec.model_features:
        if name == spec.censor_node or name in spec.immutable_nodes:
            feats[name] = FeatureAction(actionable=False)
            continue
        lo, hi = bounds.get(name, spec.bounds(name))
        feats[name] = FeatureAction(True, "both", float(lo), float(hi), float(cost_weights.get(name, 1.0)))
    return ActionSet(feats, step)


@dataclass
class RecourseAction:
    deltas: dict[str, float]
    cost: float
    issued_period: int = 0
    issued_model: str = ""
    status: str = "pending"  # pending | honored | invalid | infeasible

    @property
    def feasible(self) -> bool:
        return self.status != "infeasible"


# ---------------------------------------------------------------------------
# array solver

def _approves(w, b, rho, x) -> bool:
    return bool(expit(float(x @ w + b)) > rho)


def solve_recourse(w: np.ndarray, b: float, rho: float, x: np.ndarray, actionable: np.ndarray,
                   lo: np.ndarray, hi: np.ndarray, cost: np.ndarray, direction: np.ndarray,
                   step: float, method: str = "auto") -> np.ndarray | None:
    """Lattice steps (signed ints) for the cheapest approving action, or None.

    The caller guarantees x is currently denied.
    """
    d = w.size
    thr = math.log(rho / (1 - rho)) if 0 < rho < 1 else (math.inf if rho >= 1 else -math.inf)
    gap = thr - float(x @ w + b)
    sgn = np.sign(w)
    useful = actionable & (sgn != 0)
    useful &= ~((direction == 1) & (sgn < 0)) & ~((direction == -1) & (sgn > 0))
    room = np.where(sgn > 0, hi - x, x - lo)
    with np.errstate(invalid="ignore"):
        caps = np.where(np.isinf(room), np.inf, np.floor(np.maximum(room, 0.0) / step + 1e-9))
    caps = np.where(useful, caps, 0.0)
    gains = np.abs(w) * step
    idx = [j for j in range(d) if caps[j] > 0]
    if not idx or not math.isfinite(gap):
        return None
    ratio = {j: (math.inf if cost[j] == 0 else gains[j] / cost[j]) for j in idx}
    order = sorted(idx, key=lambda j: (-ratio[j], j))

    def finish(n):
        # float safety: add lattice steps on the best feature with spare room
        n = n.copy()
        for _ in range(3):
            if _approves(w, b, rho, np.clip(x + sgn * n * step, lo, hi)):
                return n
            for j in order:
                if n[j] < caps[j]:
                    n[j] += 1
                    break
            else:
                return None
        return n if _approves(w, b, rho, np.clip(x + sgn * n * step, lo, hi)) else None

    n = np.zeros(d)
    remaining = gap
    done = False
    for j in order:
        need = math.floor(remaining / gains[j]) + 1 if remaining >= 0 else 0
        if need <= caps[j]:
            n[j] = need
            done = True
            break
        n[j] = caps[j]
        remaining -= caps[j] * gains[j]
    if not done:
        return None
    greedy = finish(n)
    if greedy is None:
        return None
    uniform = len({float(cost[j]) for j in idx}) == 1
    if method == "greedy" or (method == "auto" and uniform) or len(idx) == 1:
        return greedy * sgn
    exact = _enumerate(gap, gains, cost * step, caps, idx, order, greedy)
    if exact is None:
        return greedy * sgn
    exact = finish(exact)
    return (exact if exact is not None else greedy) * sgn


def _enumerate(gap, gains, unit_cost, caps, idx, order, incumbent):
    """Exhaustive lattice search bounded by the incumbent's cost."""
    best_cost = float(np.sum(incumbent * unit_cost))
    last = order[-1]
    others = [j for j in order if j != last]
    ranges = []
    for j in others:
        ub = caps[j] if unit_cost[j] == 0 else min(caps[j], math.floor(best_cost / unit_cost[j] + 1e-9))
        if not math.isfinite(ub):
            return None
        ranges.append(np.arange(int(ub) + 1))
    total = int(np.prod([r.size for r in ranges])) if ranges else 1
    if total > _ENUM_LIMIT:
        return None
    grids = np.meshgrid(*ranges, indexing="ij") if ranges else []
    flat = [g.ravel().astype(float) for g in grids]
    got = np.zeros(total)
    spent = np.zeros(total)
    for j, col in zip(others, flat):
        got += col * gains[j]
        spent += col * unit_cost[j]
    rem = gap - got
    need_last = np.where(rem < 0, 0.0, np.floor(rem / gains[last]) + 1)
    ok = need_last <= caps[last]
    spent = spent + need_last * unit_cost[last]
    spent[~ok] = np.inf
    k = int(np.argmin(spent))
    if not math.isfinite(spent[k]) or spent[k] > best_cost - 1e-12:
        return incumbent
    n = np.zeros(incumbent.size)
    for j, col in zip(others, flat):
        n[j] = col[k]
    n[last] = need_last[k]
    return n


# ---------------------------------------------------------------------------
# map-level API

def compute_recourse(m: LinearModel, x: Mapping[str, float], aset: ActionSet, period: int = 0,
                     method: str = "auto") -> RecourseAction:
    """Cheapest lattice action that makes ``m`` approve ``x``.

    Returns an action with status ``infeasible`` when no action within the
    action set reaches approval.
    """
    if decide(m, x) == 1:
        raise RecourseError("recourse requested for an already approved point")
    names = list(m.feature_names)
    xv = np.array([x[k] for k in names], dtype=float)
    act, lo, hi, cost, dirs = aset.arrays(names)
    steps = solve_recourse(m.coef, m.intercept, m.threshold, xv, act, lo, hi, cost, dirs, aset.step, method)
    tag = f"t{m.trained_at}"
    if steps is None:
        return RecourseAction({}, math.inf, period, tag, "infeasible")
    new = np.clip(xv + steps * aset.step, lo, hi)
    deltas = {k: float(new[j] - xv[j]) for j, k in enumerate(names) if steps[j] != 0}
    c = float(sum(cost[names.index(k)] * abs(v) for k, v in deltas.items()))
    return RecourseAction(deltas, c, period, tag, "pending")


def enact_action(ind: Individual, act: RecourseAction, spec: DagSpec, rng: np.random.Generator) -> Individual:
    """Apply an action through counterfactual resampling of its descendants."""
    if not act.feasible:
        raise RecourseError("cannot enact an infeasible action")
    changed = {}
    for k, dv in act.deltas.items():
        if dv == 0:
            continue
        new = ind.features[k] + dv
        lo, hi = spec.bounds(k)
        if new < lo - 1e-12 or new > hi + 1e-12:
            raise RecourseError(f"action moves {k!r} outside [{lo}, {hi}]")
        changed[k] = min(max(new, lo), hi)
    out = resample_downstream(spec, ind, changed, rng)
    out.history.append(("action", act.issued_period, dict(act.deltas)))
    return out


def validate_action(m_next: LinearModel, ind_after: Individual | Mapping[str, float]) -> str:
    feats = ind_after.features if isinstance(ind_after, Individual) else ind_after
    return "valid" if decide(m_next, feats) == 1 else "invalid"


# ---------------------------------------------------------------------------
# one-period approval guarantees

@dataclass
class GuaranteeLedger:
    promises: dict[int, tuple[int, RecourseAction | None]] = field(default_factory=dict)
    issued: int = 0
    discharged: int = 0

    @property
    def outstanding(self) -> int:
        return len(self.promises)

    def promise(self, ind_id: int, period: int, action: RecourseAction | None = None) -> None:
        ind_id = int(ind_id)
        if ind_id in self.promises:
            raise RecourseError(f"individual {ind_id} already holds a promise")
        self.promises[ind_id] = (period + 1, action)
        self.issued += 1

    def discharge(self, ind_id: int, period: int) -> bool:
        """Consume the promise due at ``period``; returns the approval override."""
        ind_id = int(ind_id)
        if ind_id not in self.promises:
            raise RecourseError(f"no promise outstanding for individual {ind_id}")
        due, _ = self.promises[ind_id]
        if due != period:
            raise RecourseError(f"promise for {ind_id} is due at period {due}, not {period}")
        del self.promises[ind_id]
        self.discharged += 1
        return True

    def due(self, period: int) -> list[int]:
        return sorted(i for i, (p, _) in self.promises.items() if p == period)


def ledger_promise(ledger: GuaranteeLedger, ind_id: int, period: int,
                   action: RecourseAction | None = None) -> GuaranteeLedger:
    ledger.promise(ind_id, period, action)
    return ledger


def ledger_discharge(ledger: GuaranteeLedger, ind_id: int, period: int) -> tuple[GuaranteeLedger, bool]:
    return ledger, ledger.discharge(ind_id, period)
