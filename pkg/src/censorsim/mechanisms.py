"""Ways of planting censoring in the initial conditions, and detecting it.

Four mechanisms are supported: sample selection bias (drop the labelled
positives of the censored group), label noise driven by a flip table, an
operational change to the first model's intercept or threshold, and a
feature shift in the initial training data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from .learner import Dataset, LinearModel

__all__ = [
    "InductionSpec",
    "FlipTable",
    "INDUCTION_KINDS",
    "induce_selection_bias",
    "apply_label_noise",
    "apply_operational_change",
    "threshold_change_as_intercept",
    "apply_feature_shift",
    "detect_censored_groups",
]

INDUCTION_KINDS = ("selection_bias", "label_noise", "operational_change", "feature_shift")
_APPLIES_TO = {
    "selection_bias": "initial_training_data",
    "label_noise": "initial_training_data",
    "feature_shift": "initial_training_data",
    "operational_change": "first_model",
}


@dataclass(frozen=True)
class FlipTable:
    """Flip probabilities keyed by (cell, z, observed-true label).

    ``cell`` is the value of ``cell_feature`` for a row (or ``None`` when no
    cell feature is set).  Missing keys flip with probability 0.
    """

    entries: Mapping[tuple, float] = field(default_factory=dict)
    cell_feature: str | None = None

    def __post_init__(self):
        for key, p in self.entries.items():
            if not 0.0 <= float(p) <= 1.0:
                raise ValueError(f"flip probability {p} for {key} outside [0, 1]")

    def lookup(self, cell, z, label) -> float:
        return float(self.entries.get((cell, int(z), int(label)), 0.0))

    @classmethod
    def parse(cls, text: str, cell_feature: str | None = None) -> "FlipTable":
        """Parse ``"x=1,z=1,y=1:0.4; x=0,z=1,y=1:0.4"`` (x optional)."""
        entries = {}
        for chunk in text.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            lhs, _, p = chunk.partition(":")
            kv = dict(part.split("=") for part in lhs.split(","))
            cell = float(kv["x"]) if "x" in kv else None
            entries[(cell, int(kv["z"]), int(kv["y"]))] = float(p)
        return cls(entries, cell_feature)


@dataclass(frozen=True)
class InductionSpec:
    """One censoring mechanism.  Several specs may be applied in order.

    params by kind:

    * selection_bias: none
    * label_noise: ``table`` (FlipTable)
    * operational_change: ``delta_b`` (intercept shift) or ``rho`` (new threshold)
    * feature_shift: ``node``, ``mean``, ``std``, ``restrict_z`` (int or None)
    """

    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)
    applies_to: str = ""

    def __post_init__(self):
        if self.kind not in INDUCTION_KINDS:
            raise ValueError(f"unknown induction kind {self.kind!r}; valid: {INDUCTION_KINDS}")
        if not self.applies_to:
            object.__setattr__(self, "applies_to", _APPLIES_TO[self.kind])
        object.__setattr__(self, "params", dict(self.params))


def _z_lookup(data: Dataset, z_of) -> np.ndarray:
    if isinstance(z_of, np.ndarray):
        return z_of.astype(int)
    return np.array([int(z_of[int(i)]) for i in data.ids], dtype=int)


def induce_selection_bias(data: Dataset, z_of: Mapping[int, int] | np.ndarray) -> Dataset:
    """Drop every row with (z=1, y=1); keep the rest in order.

    ``z_of`` maps individual id to z, or is an array aligned with the rows.
    """
    z = _z_lookup(data, z_of)
    keep = ~((z == 1) & (data.labels == 1))
    return data.subset(keep)


def apply_label_noise(data: Dataset, table: FlipTable, rng: np.random.Generator,
                      z_of: Mapping[int, int] | np.ndarray) -> Dataset:
    """Flip each label independently with its cell's probability."""
    z = _z_lookup(data, z_of)
    if table.cell_feature is not None:
        col = data.feature_names.index(table.cell_feature)
        cells = data.X[:, col]
    else:
        cells = [None] * len(data)
    p = np.array([table.lookup(None if c is None else float(c), zi, yi)
                  for c, zi, yi in zip(cells, z, data.labels)], dtype=float)
    draws = rng.random(len(data))
    flip = draws < p
    return data.with_labels(np.where(flip, -data.labels, data.labels))


def apply_operational_change(m: LinearModel, delta: float = 0.0, rho: float | None = None) -> LinearModel:
    """Shift the intercept by ``delta`` (negative = stricter), optionally set a new threshold."""
    out = m.with_intercept(m.intercept + float(delta))
    if rho is not None:
        out = LinearModel(out.weights, out.intercept, float(rho), out.trained_at, out.degenerate)
    return out


def threshold_change_as_intercept(rho_old: float, rho_new: float) -> float:
    """Intercept shift giving the same decisions as moving rho_old -> rho_new."""
    logit = lambda r: math.log(r / (1 - r))  # noqa: E731
    return logit(rho_old) - logit(rho_new)


def apply_feature_shift(values: Mapping[str, np.ndarray], node: str, mean: float, std: float,
                        rng: np.random.Generator, restrict_z: int | None = None,
                        censor_node: str = "z") -> dict[str, np.ndarray]:
    """Redraw ``node`` from Normal(mean, std) for the matching rows.

    Truncation is not applied (the shifted mean may lie outside the node's
    bounds).  Other columns, the hidden outcome included, are kept: the
    shift changes what is measured, not the individuals' outcomes.
    """
    if node not in values:
        raise KeyError(f"feature shift target {node!r} not found")
    out = {k: np.array(v, copy=True) for k, v in values.items()}
    n = out[node].size
    rows = np.ones(n, dtype=bool) if restrict_z is None else out[censor_node].astype(int) == int(restrict_z)
    out[node][rows] = mean + std * rng.standard_normal(int(rows.sum()))
    return out


def detect_censored_groups(trace, grouping: Callable[[Mapping[str, Any]], Any] | None = None
                           ) -> list[tuple[Any, bool]]:
    """Flag groups that applied but never had a label collected through T.

    ``trace`` is a sequence of PeriodTrace objects.  ``grouping`` maps an
    applicant record (dict with ``z`` and the model features) to a cell;
    by default the cell is z.
    """
    applied: dict[Any, int] = {}
    labelled: dict[Any, int] = {}
    for pt in trace:
        recs = pt.applicant_records()
        for rec in recs:
            cell = rec["z"] if grouping is None else grouping(rec)
            applied[cell] = applied.get(cell, 0) + 1
            if rec["collected"]:
                labelled[cell] = labelled.get(cell, 0) + 1
    out = []
    for cell in sorted(applied, key=repr):
        out.append((cell, labelled.get(cell, 0) == 0))
    return out
