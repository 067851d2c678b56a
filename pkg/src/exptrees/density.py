"""Mixture of fully-factorized categorical distributions.

A K-component mixture over the schema's features supports exact marginal
probabilities of arbitrary per-feature allowed-value sets in O(K * F), which
is all the expectation machinery needs. Fitting uses EM on incomplete rows:
missing slots simply contribute no factor.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .data import MISSING_CODE, Dataset, FeatureSchema

DENSITY_FORMAT = "mixture-density/1"

_SUM_TOL = 1e-9


class ZeroEvidenceError(ValueError):
    """Raised when conditioning on an event of probability zero."""


@dataclass(frozen=True)
class ConstraintSet:
    """Per-feature allowed-value sets; the default is everything allowed.

    An empty allowed set for any feature makes the whole constraint
    contradictory: no assignment can satisfy it, and its probability is
    exactly zero.
    """

    schema: FeatureSchema
    allowed: tuple[frozenset, ...]

    def __post_init__(self):
        if len(self.allowed) != self.schema.n_features:
            raise ValueError("one allowed-set per feature required")
        clean = []
        for f, values in enumerate(self.allowed):
            values = frozenset(int(v) for v in values)
            card = self.schema.cardinalities[f]
            if any(v < 0 or v >= card for v in values):
                raise ValueError(f"feature {self.schema.names[f]!r}: value out of range")
            clean.append(values)
        object.__setattr__(self, "allowed", tuple(clean))

    @classmethod
    def unconstrained(cls, schema: FeatureSchema) -> "ConstraintSet":
        return cls(schema, tuple(frozenset(range(c)) for c in schema.cardinalities))

    @classmethod
    def of(cls, schema: FeatureSchema, restrictions: dict) -> "ConstraintSet":
        """Constrain the named features to the given value sets."""
        allowed = [frozenset(range(c)) for c in schema.cardinalities]
        for name, values in restrictions.items():
            allowed[schema.index(name)] = frozenset(values)
        return cls(schema, tuple(allowed))

    @classmethod
    def from_assignment(cls, schema: FeatureSchema, x) -> "ConstraintSet":
        """Observed slots pin their feature to a single value; missing slots
        stay unconstrained."""
        if len(x) != schema.n_features:
            raise ValueError("assignment length must match schema")
        allowed = []
        for f, v in enumerate(x):
            if v is None or v == MISSING_CODE:
                allowed.append(frozenset(range(schema.cardinalities[f])))
            else:
                allowed.append(frozenset((int(v),)))
        return cls(schema, tuple(allowed))

    @property
    def is_contradictory(self) -> bool:
        return any(len(s) == 0 for s in self.allowed)

    def is_unconstrained_at(self, f: int) -> bool:
        return len(self.allowed[f]) == self.schema.cardinalities[f]


def intersect(a: ConstraintSet, b: ConstraintSet) -> ConstraintSet:
    """Per-feature set intersection; contradictory wherever it comes up empty."""
    if a.schema != b.schema:
        raise ValueError("constraint sets over different schemas")
    return ConstraintSet(a.schema, tuple(sa & sb for sa, sb in zip(a.allowed, b.allowed)))


@dataclass(frozen=True, eq=False)
class MixtureDensity:
    """Mixture weights plus one categorical table per (component, feature).

    ``tables[f]`` is a (K, cardinality_f) array; row k is component k's
    distribution over feature f's categories. Models produced by em_fit have
    strictly positive entries, so every non-contradictory event has positive
    probability.
    """

    schema: FeatureSchema
    weights: np.ndarray
    tables: tuple[np.ndarray, ...]

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("weights must be a nonempty vector")
        if np.any(w < 0) or abs(float(w.sum()) - 1.0) > _SUM_TOL:
            raise ValueError("weights must be nonnegative and sum to 1")
        k = w.size
        if len(self.tables) != self.schema.n_features:
            raise ValueError("one table per feature required")
        tabs = []
        for f, t in enumerate(self.tables):
            t = np.array(t, dtype=np.float64)
            card = self.schema.cardinalities[f]
            if t.shape != (k, card):
                raise ValueError(
                    f"table for feature {self.schema.names[f]!r} must be (K, {card})"
                )
            if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > _SUM_TOL):
                raise ValueError(
                    f"table rows for feature {self.schema.names[f]!r} must be "
                    "nonnegative and sum to 1"
                )
            t.setflags(write=False)
            tabs.append(t)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "tables", tuple(tabs))

    @property
    def k(self) -> int:
        return self.weights.size

    def to_dict(self) -> dict:
        return {
            "format": DENSITY_FORMAT,
            "schema": self.schema.to_dict(),
            "weights": [float(w) for w in self.weights],
            "tables": [
                [[float(p) for p in self.tables[f][k]] for f in range(self.schema.n_features)]
                for k in range(self.k)
            ],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MixtureDensity":
        if obj.get("format") != DENSITY_FORMAT:
            raise ValueError(f"expected format {DENSITY_FORMAT!r}, got {obj.get('format')!r}")
        schema = FeatureSchema.from_dict(obj["schema"])
        weights = np.asarray(obj["weights"], dtype=np.float64)
        per_component = obj["tables"]
        tables = tuple(
            np.asarray([per_component[k][f] for k in range(len(weights))])
            for f in range(schema.n_features)
        )
        return cls(schema, weights, tables)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "MixtureDensity":
        return cls.from_dict(json.loads(Path(path).read_text()))


def marginal(d: MixtureDensity, c: ConstraintSet) -> float:
    """Probability that every feature falls in its allowed set.

    Computed as sum_k w_k * prod_f sum_{v in allowed_f} table[k][f][v].
    Fully unconstrained features contribute a factor of exactly one;
    a contradictory constraint returns exactly 0.0.
    """
    if c.schema != d.schema:
        raise ValueError("constraint schema does not match density schema")
    if c.is_contradictory:
        return 0.0
    factors = np.ones(d.k)
    for f, values in enumerate(c.allowed):
        if c.is_unconstrained_at(f):
            continue
        idx = sorted(values)
        factors = factors * d.tables[f][:, idx].sum(axis=1)
    p = float(np.dot(factors, d.weights))
    return min(1.0, max(0.0, p))


def conditional(d: MixtureDensity, c_event: ConstraintSet, c_given: ConstraintSet) -> float:
    """P(event | given) = marginal(event AND given) / marginal(given)."""
    denom = marginal(d, c_given)
    if denom == 0.0:
        raise ZeroEvidenceError("conditioning on zero-probability evidence")
    p = marginal(d, intersect(c_event, c_given)) / denom
    return min(1.0, max(0.0, p))


def _component_scores(weights, tables, x) -> np.ndarray:
    """(n, K) log of w_k times the product of the observed-slot factors."""
    n = x.shape[0]
    with np.errstate(divide="ignore"):
        acc = np.tile(np.log(weights)[None, :], (n, 1))
    for f, t in enumerate(tables):
        with np.errstate(divide="ignore"):
            logt = np.where(t > 0, np.log(np.where(t > 0, t, 1.0)), -np.inf)
        v = x[:, f]
        obs = v != MISSING_CODE
        if np.any(obs):
            acc[obs] += logt[:, v[obs]].T
    return acc


def _loglik(weights, tables, x) -> float:
    return float(logsumexp(_component_scores(weights, tables, x), axis=1).sum())


def log_likelihood(d: MixtureDensity, ds: Dataset) -> float:
    """Observed-data log-likelihood: missing slots are marginalized out."""
    if ds.schema != d.schema:
        raise ValueError("dataset schema does not match density schema")
    return _loglik(d.weights, d.tables, ds.x)


def _m_step(x, resp, cards):
    """Maximum-likelihood re-estimation from responsibilities.

    Returns (weights, tables, counts, masses); a (component, feature) row
    with zero observed mass falls back to uniform.
    """
    weights = resp.sum(axis=0)
    weights = weights / weights.sum()
    k = resp.shape[1]
    tables, counts, masses = [], [], []
    for f, card in enumerate(cards):
        v = x[:, f]
        obs = v != MISSING_CODE
        c = np.zeros((card, k))
        np.add.at(c, v[obs], resp[obs])
        c = c.T  # (k, card)
        mass = c.sum(axis=1)
        safe = np.where(mass > 0, mass, 1.0)
        t = np.where(mass[:, None] > 0, c / safe[:, None], 1.0 / card)
        tables.append(t)
        counts.append(c)
        masses.append(mass)
    return weights, tables, counts, masses


def _smooth_tables(counts, masses, epsilon, cards):
    """Spread epsilon pseudo-count mass uniformly over each table row, so
    every category keeps strictly positive probability."""
    return [
        (c + epsilon / card) / (mass[:, None] + epsilon)
        for c, mass, card in zip(counts, masses, cards)
    ]


def em_fit_with_trace(
    ds: Dataset,
    k: int,
    iters: int = 50,
    seed: int = 0,
    epsilon: float = 1e-3,
    tol: float = 1e-6,
) -> tuple[MixtureDensity, list[float]]:
    """EM fit returning the model and the per-iteration log-likelihood trace.

    Iterations run plain maximum-likelihood EM, so the observed-data
    log-likelihood trace is non-decreasing; the epsilon pseudo-counts are
    folded in once after the final M-step. trace[0] is the log-likelihood of
    the randomly initialized model and trace[i] the value after i updates.
    Stops early when the relative improvement drops below tol.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if iters < 0:
        raise ValueError("iters must be >= 0")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    n = len(ds)
    if n == 0:
        raise ValueError("empty dataset")
    if k > n:
        warnings.warn(f"k={k} exceeds the {n} available rows; proceeding anyway")
    cards = ds.schema.cardinalities
    x = ds.x

    rng = np.random.default_rng(seed)
    resp = rng.random((n, k))
    resp /= resp.sum(axis=1, keepdims=True)
    weights, tables, counts, masses = _m_step(x, resp, cards)

    trace = [_loglik(weights, tables, x)]
    for _ in range(iters):
        scores = _component_scores(weights, tables, x)
        norm = logsumexp(scores, axis=1)
        resp = np.exp(scores - norm[:, None])
        weights, tables, counts, masses = _m_step(x, resp, cards)
        trace.append(_loglik(weights, tables, x))
        if abs(trace[-1] - trace[-2]) <= tol * abs(trace[-2]):
            break

    smoothed = _smooth_tables(counts, masses, epsilon, cards)
    model = MixtureDensity(ds.schema, weights, tuple(smoothed))
    return model, trace


def em_fit(
    ds: Dataset,
    k: int,
    iters: int = 50,
    seed: int = 0,
    epsilon: float = 1e-3,
    tol: float = 1e-6,
) -> MixtureDensity:
    """Fit a K-component mixture to incomplete rows; deterministic per seed."""
    model, _ = em_fit_with_trace(ds, k, iters=iters, seed=seed, epsilon=epsilon, tol=tol)
    return model
