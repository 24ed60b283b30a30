"""Data-generating processes expressed as small DAGs.

Every DGP is a topologically ordered list of nodes.  A node draws its value
from a distribution whose parameters are arithmetic expressions over the
values of earlier nodes.  Expressions are plain strings such as
``"x1 + x2 + z - 0.5"`` and are evaluated vectorised over numpy arrays by a
restricted evaluator (no attribute access, no builtins).

The outcome node is drawn during ancestral sampling, because some DGPs
(``mixed_downstream``) have features that are children of the outcome.  The
draw is kept hidden on the individual and is only revealed through
:func:`realize_label`.
"""
from __future__ import annotations

import ast
import copy as _copy
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
from scipy.special import expit

__all__ = [
    "NodeSpec",
    "DagSpec",
    "Individual",
    "Population",
    "DGPError",
    "TruncationError",
    "BUILTIN_DGPS",
    "builtin_dgp",
    "dag_from_dict",
    "dag_to_dict",
    "load_dgp",
    "sample_values",
    "sample_population",
    "realize_label",
    "resample_downstream",
    "resample_downstream_values",
    "true_probability",
    "outcome_probability",
]

NODE_KINDS = ("normal", "bernoulli", "gamma", "copy", "sigmoid_bernoulli", "deterministic")
REJECTION_CAP = 10_000


class DGPError(ValueError):
    """Invalid DGP definition or invalid use of a DGP."""


class TruncationError(RuntimeError):
    """Rejection sampling could not produce an in-bounds value."""


# ---------------------------------------------------------------------------
# restricted expression evaluation

def _indicator(cond):
    return np.asarray(cond, dtype=float)


_FUNCTIONS = {
    "sigmoid": expit,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "minimum": np.minimum,
    "maximum": np.maximum,
    "indicator": _indicator,
}

_ALLOWED_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Name, ast.Load, ast.Constant,
    ast.Call, ast.Compare, ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow,
    ast.USub, ast.UAdd, ast.Gt, ast.Lt, ast.GtE, ast.LtE,
)


@lru_cache(maxsize=512)
def _compile(expr: str):
    """Validate ``expr`` and return (code object, referenced variable names)."""
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise DGPError(f"cannot parse expression {expr!r}: {exc.msg}") from None
    names = []
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise DGPError(f"disallowed syntax {type(node).__name__} in {expr!r}")
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS:
                raise DGPError(f"unknown function in {expr!r}")
            if node.keywords:
                raise DGPError(f"keyword arguments not allowed in {expr!r}")
        if isinstance(node, ast.Compare) and len(node.ops) != 1:
            raise DGPError(f"chained comparisons not allowed in {expr!r}")
        if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
            raise DGPError(f"only numeric constants allowed in {expr!r}")
        if isinstance(node, ast.Name) and node.id not in _FUNCTIONS and node.id not in names:
            names.append(node.id)
    return compile(tree, "<dgp-expr>", "eval"), tuple(names)


def expression_names(expr) -> tuple[str, ...]:
    """Variable names referenced by an expression (numbers reference none)."""
    if isinstance(expr, (int, float)):
        return ()
    return _compile(str(expr))[1]


def evaluate(expr, env: Mapping[str, Any], n: int) -> np.ndarray:
    """Evaluate ``expr`` against ``env`` and broadcast the result to length n."""
    if isinstance(expr, (int, float)):
        return np.full(n, float(expr))
    code, names = _compile(str(expr))
    scope = dict(_FUNCTIONS)
    for name in names:
        if name not in env:
            raise DGPError(f"expression {expr!r} references missing value {name!r}")
        scope[name] = env[name]
    out = eval(code, {"__builtins__": {}}, scope)  # noqa: S307 - validated AST
    return np.broadcast_to(np.asarray(out, dtype=float), (n,)).copy()


# ---------------------------------------------------------------------------
# specs

@dataclass(frozen=True)
class NodeSpec:
    """One node of a DAG.

    ``params`` by kind:

    * normal: ``mean`` (expr), ``std`` (expr)
    * bernoulli: ``prob`` (expr)
    * sigmoid_bernoulli: ``logit`` (expr) - value is Bernoulli(sigmoid(logit))
    * gamma: ``shape``, ``scale``, ``offset`` (numbers)
    * copy: ``source`` (node name) - exact copy of another node
    * deterministic: ``expr``, optional ``noise_std``; the expression may use
      ``eps``, a Normal(0, noise_std) draw
    """

    name: str
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)
    truncation: tuple[float, float] | None = None
    parents: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in NODE_KINDS:
            raise DGPError(f"node {self.name!r}: unknown kind {self.kind!r}; valid: {NODE_KINDS}")
        if self.truncation is not None:
            lo, hi = (float(v) for v in self.truncation)
            if not lo <= hi:
                raise DGPError(f"node {self.name!r}: empty truncation interval [{lo}, {hi}]")
            object.__setattr__(self, "truncation", (lo, hi))
        object.__setattr__(self, "params", dict(self.params))
        required = {
            "normal": ("mean", "std"), "bernoulli": ("prob",), "gamma": ("shape", "scale"),
            "copy": ("source",), "sigmoid_bernoulli": ("logit",), "deterministic": ("expr",),
        }[self.kind]
        for key in required:
            if key not in self.params:
                raise DGPError(f"node {self.name!r} ({self.kind}) missing parameter {key!r}")
        derived = self._referenced()
        if self.parents:
            missing = [p for p in derived if p not in self.parents]
            if missing:
                raise DGPError(f"node {self.name!r} uses {missing} not listed as parents")
        else:
            object.__setattr__(self, "parents", tuple(derived))

    def _referenced(self) -> tuple[str, ...]:
        if self.kind == "copy":
            return (str(self.params["source"]),)
        names: list[str] = []
        for key, value in self.params.items():
            if key in ("source", "noise_std", "offset", "shape", "scale"):
                continue
            for nm in expression_names(value):
                if nm == "eps" and self.kind == "deterministic":
                    continue
                if nm not in names:
                    names.append(nm)
        return tuple(names)

    @property
    def is_binary(self) -> bool:
        return self.kind in ("bernoulli", "sigmoid_bernoulli")


@dataclass(frozen=True)
class DagSpec:
    """A complete DGP: nodes in topological order plus role annotations."""

    name: str
    nodes: tuple[NodeSpec, ...]
    outcome_node: str
    censor_node: str
    model_features: tuple[str, ...]
    latent_nodes: tuple[str, ...] = ()
    immutable_nodes: tuple[str, ...] = ()  # features no action may change (besides the censor node)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "immutable_nodes", tuple(self.immutable_nodes))
        object.__setattr__(self, "model_features", tuple(self.model_features))
        object.__setattr__(self, "latent_nodes", tuple(self.latent_nodes))
        seen: list[str] = []
        for node in self.nodes:
            if node.name in seen:
                raise DGPError(f"{self.name}: duplicate node {node.name!r}")
            for parent in node.parents:
                if parent not in seen:
                    raise DGPError(
                        f"{self.name}: node {node.name!r} reads {parent!r} which is not an earlier node"
                    )
            seen.append(node.name)
        for role, nm in (("outcome_node", self.outcome_node), ("censor_node", self.censor_node)):
            if nm not in seen:
                raise DGPError(f"{self.name}: {role} {nm!r} is not a node")
        if not self.node(self.outcome_node).is_binary:
            raise DGPError(f"{self.name}: outcome node must be bernoulli or sigmoid_bernoulli")
        if not self.node(self.censor_node).is_binary:
            raise DGPError(f"{self.name}: censor node must be binary")
        if self.outcome_node in self.model_features:
            raise DGPError(f"{self.name}: the outcome cannot be a model feature")
        for nm in (*self.model_features, *self.latent_nodes):
            if nm not in seen:
                raise DGPError(f"{self.name}: unknown node {nm!r}")
        if set(self.model_features) & set(self.latent_nodes):
            raise DGPError(f"{self.name}: latent nodes cannot be model features")

    # lookups -------------------------------------------------------------
    @property
    def node_names(self) -> tuple[str, ...]:
        return tuple(n.name for n in self.nodes)

    @property
    def feature_nodes(self) -> tuple[str, ...]:
        """All non-outcome nodes (what an Individual's feature map holds)."""
        return tuple(n.name for n in self.nodes if n.name != self.outcome_node)

    def node(self, name: str) -> NodeSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise DGPError(f"{self.name}: no node named {name!r}")

    def children(self, name: str) -> tuple[str, ...]:
        return tuple(n.name for n in self.nodes if name in n.parents)

    def descendants(self, names: Iterable[str]) -> frozenset[str]:
        """Strict descendants of any node in ``names``."""
        start = set(names)
        found: set[str] = set()
        for node in self.nodes:  # topological order makes one pass enough
            if any(p in start or p in found for p in node.parents):
                found.add(node.name)
        return frozenset(found)

    def bounds(self, name: str) -> tuple[float, float]:
        """Effective value range of a node (copies inherit their source's)."""
        node = self.node(name)
        if node.kind == "copy":
            return self.bounds(str(node.params["source"]))
        if node.truncation is not None:
            return node.truncation
        if node.is_binary:
            return (0.0, 1.0)
        return (-math.inf, math.inf)

    def with_truncation(self, name: str, lo: float, hi: float, new_name: str | None = None) -> "DagSpec":
        """Copy of this spec with one node's truncation interval replaced."""
        nodes = tuple(
            NodeSpec(n.name, n.kind, n.params, (lo, hi), n.parents) if n.name == name else n
            for n in self.nodes
        )
        if name not in self.node_names:
            raise DGPError(f"{self.name}: no node named {name!r}")
        return DagSpec(new_name or self.name, nodes, self.outcome_node, self.censor_node,
                       self.model_features, self.latent_nodes, self.immutable_nodes)


# ---------------------------------------------------------------------------
# builtin table

_CAUSAL_X = lambda hi: {"kind": "normal", "mean": 0.0, "std": 1.0, "truncation": [-2.0, hi]}  # noqa: E731
_Z = {"kind": "bernoulli", "prob": 0.15}

BUILTIN_DGPS: dict[str, dict] = {
    "causal": {
        "nodes": {
            "x1": _CAUSAL_X(1.5), "x2": _CAUSAL_X(1.5), "z": _Z,
            "y": {"kind": "sigmoid_bernoulli", "logit": "x1 + x2 + z - 0.5"},
        },
        "outcome": "y", "censor": "z", "model_features": ["x1", "x2", "z"],
    },
    "causal_blind": {
        "nodes": {
            "x1": _CAUSAL_X(2.0), "x2": _CAUSAL_X(2.0), "z": _Z,
            "y": {"kind": "sigmoid_bernoulli", "logit": "x1 + x2 - 0.5"},
        },
        "outcome": "y", "censor": "z", "model_features": ["x1", "x2", "z"],
    },
    "causal_linked": {
        "nodes": {
            "x1": _CAUSAL_X(1.5), "x2": {"kind": "copy", "source": "x1"}, "z": _Z,
            "y": {"kind": "sigmoid_bernoulli", "logit": "x1 + x2 + z - 0.5"},
        },
        "outcome": "y", "censor": "z", "model_features": ["x1", "x2", "z"],
    },
    "causal_equal": {
        "nodes": {
            "z": _Z,
            "s": {"kind": "bernoulli", "prob": 0.75},
            "x1": {"kind": "normal", "mean": "(2 - z - s) / 2", "std": 1.0, "truncation": [-2.0, 2.0]},
            "x2": {"kind": "normal", "mean": "(2 - z - s) / 2", "std": 1.0, "truncation": [-2.0, 2.0]},
            "y": {"kind": "sigmoid_bernoulli", "logit": "x1 + x2 + z - 1.5"},
        },
        "outcome": "y", "censor": "z", "model_features": ["x1", "x2", "z"], "latent": ["s"],
    },
    "mixed_proxy": {
        "nodes": {
            "x1": _CAUSAL_X(1.5), "x2": _CAUSAL_X(1.5),
            "x2p": {"kind": "copy", "source": "x2"}, "z": _Z,
            "y": {"kind": "sigmoid_bernoulli", "logit": "x1 + x2 + z - 0.5"},
        },
        "outcome": "y", "censor": "z", "model_features": ["x1", "x2p", "z"],
    },
    "mixed_downstream": {
        "nodes": {
            "x1": _CAUSAL_X(1.5), "z": _Z,
            "y": {"kind": "sigmoid_bernoulli", "logit": "x1 + z - 0.5"},
            "x2p": {"kind": "normal", "mean": "y - 1", "std": 1.0, "truncation": [-2.0, 1.5]},
        },
        "outcome": "y", "censor": "z", "model_features": ["x1", "x2p", "z"],
    },
    "gaming": {
        "nodes": {
            "x1": _CAUSAL_X(1.5), "x2": _CAUSAL_X(1.5),
            "x1p": {"kind": "copy", "source": "x1"}, "x2p": {"kind": "copy", "source": "x2"},
            "z": _Z,
            "y": {"kind": "sigmoid_bernoulli", "logit": "x1 + x2 + z - 0.5"},
        },
        "outcome": "y", "censor": "z", "model_features": ["x1p", "x2p", "z"],
    },
    # Noise terms are read as Normal(mean, variance); gamma as shape 10, scale 3.5.
    "german": {
        "nodes": {
            "g": {"kind": "bernoulli", "prob": 0.5},
            "a": {"kind": "gamma", "shape": 10.0, "scale": 3.5, "offset": -35.0},
            "e": {"kind": "deterministic", "expr": "-0.5 + sigmoid(-1 + 0.5 * g + sigmoid(-0.1 * a) + eps)",
                  "noise_std": 0.5},
            "l": {"kind": "normal", "mean": "1 + 0.01 * (a - 5) * (5 - a) + g", "std": 2.0},
            "d": {"kind": "normal", "mean": "-1 + 0.01 * a + 2 * g + l", "std": 3.0},
            "i": {"kind": "normal", "mean": "-4 + 0.01 * (a + 35) + 2 * g + 2 * e", "std": 2.0},
            "s": {"kind": "normal", "mean": "-4 + indicator(i > 0) * 1.5 * i", "std": 5.0},
            "y": {"kind": "sigmoid_bernoulli", "logit": "0.3 * (-l - d + i + s)"},
        },
        "outcome": "y", "censor": "g", "model_features": ["g", "a", "e", "l", "d", "i", "s"],
        "immutable": ["a"],
    },
}


def dag_from_dict(name: str, d: Mapping[str, Any]) -> DagSpec:
    """Build a DagSpec from the declarative schema used by BUILTIN_DGPS.

    Schema::

        {"nodes": {<name>: {"kind": ..., <params>, "truncation": [lo, hi]?}, ...},
         "outcome": <node>, "censor": <node>, "model_features": [...],
         "latent": [...]?, "immutable": [...]?, "order": [...]?}

    Node order is ``order`` when given (it survives key-sorting
    serialisers), else the mapping's order; either must be topological.
    """
    try:
        raw_nodes = d["nodes"]
        outcome, censor, feats = d["outcome"], d["censor"], d["model_features"]
    except KeyError as exc:
        raise DGPError(f"{name}: missing key {exc.args[0]!r}") from None
    order = list(d.get("order", raw_nodes))
    if sorted(order) != sorted(raw_nodes):
        raise DGPError(f"{name}: 'order' must list every node exactly once")
    nodes = []
    for nm in order:
        nd = dict(raw_nodes[nm])
        kind = nd.pop("kind", None)
        trunc = nd.pop("truncation", None)
        parents = tuple(nd.pop("parents", ()))
        nodes.append(NodeSpec(nm, kind, nd, tuple(trunc) if trunc is not None else None, parents))
    return DagSpec(name, tuple(nodes), outcome, censor, tuple(feats), tuple(d.get("latent", ())),
                   tuple(d.get("immutable", ())))


def dag_to_dict(spec: DagSpec) -> dict:
    nodes = {}
    for n in spec.nodes:
        nd = {"kind": n.kind, **n.params}
        if n.truncation is not None:
            nd["truncation"] = list(n.truncation)
        nodes[n.name] = nd
    out = {"nodes": nodes, "order": [n.name for n in spec.nodes], "outcome": spec.outcome_node,
           "censor": spec.censor_node, "model_features": list(spec.model_features)}
    if spec.latent_nodes:
        out["latent"] = list(spec.latent_nodes)
    if spec.immutable_nodes:
        out["immutable"] = list(spec.immutable_nodes)
    return out


def builtin_dgp(name: str) -> DagSpec:
    """Return one of the eight shipped DGPs by name."""
    if name not in BUILTIN_DGPS:
        raise DGPError(f"unknown DGP {name!r}; valid identifiers: {', '.join(BUILTIN_DGPS)}")
    return dag_from_dict(name, _copy.deepcopy(BUILTIN_DGPS[name]))


def load_dgp(path: str | Path, name: str | None = None) -> DagSpec:
    """Load a DGP from a JSON file holding one spec in the builtin schema."""
    path = Path(path)
    data = json.loads(path.read_text())
    return dag_from_dict(name or data.get("name", path.stem), data)


# ---------------------------------------------------------------------------
# sampling

def _draw_once(node: NodeSpec, env: Mapping[str, np.ndarray], n: int, rng: np.random.Generator):
    p = node.params
    if node.kind == "normal":
        mean = evaluate(p["mean"], env, n)
        std = evaluate(p["std"], env, n)
        return mean + std * rng.standard_normal(n)
    if node.kind == "bernoulli":
        prob = evaluate(p["prob"], env, n)
        if np.any((prob < 0) | (prob > 1)):
            raise DGPError(f"node {node.name!r}: probability outside [0, 1]")
        return (rng.random(n) < prob).astype(float)
    if node.kind == "sigmoid_bernoulli":
        prob = expit(evaluate(p["logit"], env, n))
        return (rng.random(n) < prob).astype(float)
    if node.kind == "gamma":
        return float(p.get("offset", 0.0)) + rng.gamma(float(p["shape"]), float(p["scale"]), n)
    if node.kind == "copy":
        return np.array(env[str(p["source"])], dtype=float, copy=True)
    # deterministic
    scope = dict(env)
    noise_std = float(p.get("noise_std", 0.0))
    scope["eps"] = noise_std * rng.standard_normal(n) if noise_std > 0 else np.zeros(n)
    return evaluate(p["expr"], scope, n)


def _draw_node(node: NodeSpec, env: Mapping[str, np.ndarray], n: int, rng: np.random.Generator):
    """Draw ``node`` for n rows, redrawing out-of-bounds rows (rejection)."""
    values = _draw_once(node, env, n, rng)
    if node.truncation is None or node.kind == "copy" or n == 0:
        return values
    lo, hi = node.truncation
    bad = np.flatnonzero((values < lo) | (values > hi))
    tries = 0
    while bad.size:
        tries += 1
        if tries > REJECTION_CAP:
            raise TruncationError(
                f"node {node.name!r}: no in-bounds draw within {REJECTION_CAP} attempts for [{lo}, {hi}]"
            )
        sub_env = {k: v[bad] for k, v in env.items()}
        redraw = _draw_once(node, sub_env, bad.size, rng)
        values[bad] = redraw
        still = (redraw < lo) | (redraw > hi)
        bad = bad[still]
    return values


def sample_values(spec: DagSpec, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Ancestral sampling of every node (outcome included) as column arrays."""
    if n < 0:
        raise DGPError("n must be >= 0")
    env: dict[str, np.ndarray] = {}
    for node in spec.nodes:
        env[node.name] = _draw_node(node, {k: env[k] for k in node.parents}, n, rng)
    return env


def outcome_probability(spec: DagSpec, values: Mapping[str, np.ndarray]) -> np.ndarray:
    """P(Y=1 | parents of Y) for column arrays."""
    node = spec.node(spec.outcome_node)
    n = len(next(iter(values.values()))) if values else 0
    env = {}
    for p in node.parents:
        if p not in values:
            raise DGPError(f"{spec.name}: missing parent value {p!r} of the outcome")
        env[p] = np.asarray(values[p], dtype=float)
    if node.kind == "sigmoid_bernoulli":
        return expit(evaluate(node.params["logit"], env, n))
    return evaluate(node.params["prob"], env, n)


def true_probability(spec: DagSpec, features: Mapping[str, float]) -> float:
    """True outcome probability for one individual's feature map."""
    cols = {k: np.asarray([v], dtype=float) for k, v in features.items()}
    return float(outcome_probability(spec, cols)[0])


# ---------------------------------------------------------------------------
# individuals

@dataclass
class Individual:
    """One applicant.  ``label`` is filled lazily by :func:`realize_label`."""

    id: int
    features: dict[str, float]
    z: int
    true_prob: float
    label: int | None = None
    first_period: int = 0
    history: list = field(default_factory=list)
    outcome: int | None = field(default=None, repr=False)  # hidden pre-drawn Y in {0, 1}

    def model_vector(self, names: Iterable[str]) -> np.ndarray:
        return np.array([self.features[k] for k in names], dtype=float)


def realize_label(ind: Individual, rng: np.random.Generator | None = None) -> int:
    """Reveal (or draw) the individual's label in {-1, 1}; cached afterwards."""
    if ind.label is None:
        if ind.outcome is not None:
            ind.label = 1 if ind.outcome else -1
        else:
            if rng is None:
                raise DGPError("an rng is required to draw a label without a pre-drawn outcome")
            ind.label = 1 if rng.random() < ind.true_prob else -1
    return ind.label


@dataclass(frozen=True)
class Population:
    """A sample of individuals stored column-wise.

    ``values`` holds every node, including the hidden outcome.
    """

    dgp_name: str
    seed: Any
    values: Mapping[str, np.ndarray]
    true_prob: np.ndarray
    ids: np.ndarray
    outcome_node: str = "y"
    censor_node: str = "z"

    def __len__(self) -> int:
        return int(self.ids.size)

    @property
    def z(self) -> np.ndarray:
        return self.values[self.censor_node].astype(int)

    @property
    def outcome(self) -> np.ndarray:
        return self.values[self.outcome_node].astype(int)

    def matrix(self, names: Iterable[str]) -> np.ndarray:
        names = list(names)
        if not names:
            return np.zeros((len(self), 0))
        return np.column_stack([self.values[k] for k in names])

    @property
    def individuals(self) -> list[Individual]:
        names = [k for k in self.values if k != self.outcome_node]
        out = []
        for i in range(len(self)):
            feats = {k: float(self.values[k][i]) for k in names}
            out.append(Individual(int(self.ids[i]), feats, int(self.values[self.censor_node][i]),
                                  float(self.true_prob[i]),
                                  outcome=int(self.values[self.outcome_node][i])))
        return out


def sample_population(spec: DagSpec, n: int, rng: np.random.Generator | int,
                      id_offset: int = 0) -> Population:
    """Sample n individuals; labels stay unrealized (the outcome is hidden)."""
    seed = rng if isinstance(rng, (int, np.integer)) else None
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    values = sample_values(spec, n, rng)
    for k, v in values.items():
        v.setflags(write=False)
    tp = outcome_probability(spec, values)
    tp.setflags(write=False)
    return Population(spec.name, seed, values, tp, np.arange(id_offset, id_offset + n),
                      spec.outcome_node, spec.censor_node)


# ---------------------------------------------------------------------------
# counterfactual resampling

def resample_downstream_values(spec: DagSpec, values: Mapping[str, np.ndarray],
                               changed: Mapping[str, np.ndarray], rng: np.random.Generator,
                               check_bounds: bool = True) -> dict[str, np.ndarray]:
    """Batched counterfactual update.

    ``changed[node]`` is an array of new values, with NaN for rows where the
    node is left alone.  Per row, every strict descendant of a changed node is
    redrawn from its conditional distribution (outcome included); every other
    node keeps its value bit-for-bit.
    """
    out = {k: np.array(v, dtype=float, copy=True) for k, v in values.items()}
    n = len(next(iter(values.values()))) if values else 0
    touched = {name: np.zeros(n, dtype=bool) for name in spec.node_names}
    for name, new in changed.items():
        if name == spec.outcome_node:
            raise DGPError("the outcome node cannot be set directly")
        if name not in touched:
            raise DGPError(f"{spec.name}: no node named {name!r}")
        new = np.asarray(new, dtype=float)
        mask = ~np.isnan(new)
        if check_bounds and mask.any():
            lo, hi = spec.bounds(name)
            if np.any((new[mask] < lo) | (new[mask] > hi)):
                raise DGPError(f"new value for {name!r} outside bounds [{lo}, {hi}]")
        out[name][mask] = new[mask]
        touched[name] = mask
    if not changed:
        return out
    for node in spec.nodes:
        if node.name in changed and touched[node.name].all():
            continue
        redo = np.zeros(n, dtype=bool)
        for p in node.parents:
            redo |= touched[p]
        if node.name in changed:
            redo &= ~touched[node.name]
        if not redo.any():
            continue
        rows = np.flatnonzero(redo)
        env = {p: out[p][rows] for p in node.parents}
        out[node.name][rows] = _draw_node(node, env, rows.size, rng)
        touched[node.name] = touched[node.name] | redo
    return out


def resample_downstream(spec: DagSpec, ind: Individual, changed: Mapping[str, float],
                        rng: np.random.Generator) -> Individual:
    """Single-individual counterfactual: set ``changed``, redraw descendants."""
    new = Individual(ind.id, dict(ind.features), ind.z, ind.true_prob, ind.label,
                     ind.first_period, list(ind.history), ind.outcome)
    if not changed:
        return new
    values = {k: np.array([v], dtype=float) for k, v in ind.features.items()}
    missing = [k for k in spec.feature_nodes if k not in values]
    if missing:
        raise DGPError(f"individual {ind.id} lacks nodes {missing}")
    y = ind.outcome
    values[spec.outcome_node] = np.array([np.nan if y is None else float(y)])
    cols = resample_downstream_values(spec, values, {k: np.array([v], dtype=float)
                                                     for k, v in changed.items()}, rng)
    new.features = {k: float(cols[k][0]) for k in ind.features}
    new.true_prob = float(outcome_probability(spec, cols)[0])
    desc = spec.descendants(changed)
    if spec.outcome_node in desc:
        new.outcome = int(cols[spec.outcome_node][0])
        new.label = None
    new.z = int(new.features[spec.censor_node])
    return new
