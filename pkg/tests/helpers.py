"""Shared test oracles and randomized instance builders.

The oracles enumerate joint states with plain Python arithmetic, staying
independent of the vectorized code paths they check.
"""

from __future__ import annotations

import itertools
from math import prod

import numpy as np

from exptrees.data import Dataset, FeatureSchema
from exptrees.density import MixtureDensity
from exptrees.trees import DecisionNode, Leaf, TreeModel


def all_states(schema: FeatureSchema):
    return itertools.product(*(range(c) for c in schema.cardinalities))


def oracle_joint_prob(d: MixtureDensity, x) -> float:
    """P(X = x) as an explicit sum over components, pure Python."""
    total = 0.0
    for k in range(d.k):
        total += float(d.weights[k]) * prod(
            float(d.tables[f][k][v]) for f, v in enumerate(x)
        )
    return total


def completions(schema: FeatureSchema, xo):
    """All full assignments consistent with the partial assignment."""
    choices = []
    for f, v in enumerate(xo):
        if v is None:
            choices.append(range(schema.cardinalities[f]))
        else:
            choices.append((v,))
    return itertools.product(*choices)


def oracle_conditional_expectation(d: MixtureDensity, g, xo) -> float:
    """E[g(X) | observed slots of xo] by exhaustive enumeration."""
    num = 0.0
    den = 0.0
    for x in completions(d.schema, xo):
        p = oracle_joint_prob(d, x)
        num += p * g(x)
        den += p
    return num / den


def oracle_expected_mse(d: MixtureDensity, tree_for, rows) -> float:
    """Mean over (xo, y) rows of E[(y - f(x))^2], enumerated."""
    losses = []
    for xo, y in rows:
        losses.append(
            oracle_conditional_expectation(
                d, lambda x: (y - tree_for(x)) ** 2, xo
            )
        )
    return sum(losses) / len(losses)


# ---------------------------------------------------------------------------
# Randomized instances.
# ---------------------------------------------------------------------------


def random_small_schema(rng, max_states: int = 12) -> FeatureSchema:
    """Schema whose joint state space stays at or below max_states."""
    n_features = int(rng.integers(2, 4))
    cards = []
    states = 1
    for _ in range(n_features):
        options = [c for c in (2, 3) if states * c <= max_states]
        if not options:
            break
        c = int(rng.choice(options))
        cards.append(c)
        states *= c
    while len(cards) < 2:
        cards.append(2)
    return FeatureSchema(tuple((f"x{i}", c) for i, c in enumerate(cards)), "y")


def random_density(rng, schema: FeatureSchema, k_max: int = 3) -> MixtureDensity:
    k = int(rng.integers(1, k_max + 1))
    weights = rng.dirichlet(np.ones(k))
    tables = tuple(
        rng.dirichlet(np.ones(c), size=k) for c in schema.cardinalities
    )
    return MixtureDensity(schema, weights, tables)


def random_partition_tree(rng, schema: FeatureSchema, max_depth: int = 3) -> TreeModel:
    """Random tree whose nodes partition the full category set, with
    possibly non-contiguous branch sets. Splits only carve up values still
    reachable along the path, so every leaf region is nonempty (as for any
    tree induced from data)."""
    counter = iter(range(10 ** 6))

    def build(depth, reachable):
        splittable = [f for f, vals in enumerate(reachable) if len(vals) >= 2]
        if depth >= max_depth or not splittable or rng.random() < 0.3:
            return Leaf(next(counter), float(rng.normal()))
        f = int(rng.choice(splittable))
        values = [int(v) for v in rng.permutation(sorted(reachable[f]))]
        split = int(rng.integers(1, len(values)))
        left, right = set(values[:split]), set(values[split:])
        # values dead on this path go to branch 0; they cannot change any
        # leaf's constraint region but keep the node a full partition
        dead = set(range(schema.cardinalities[f])) - left - right
        branches = (frozenset(left | dead), frozenset(right))
        children = []
        for s in (left, right):
            nxt = list(reachable)
            nxt[f] = s
            children.append(build(depth + 1, nxt))
        return DecisionNode(f, branches, tuple(children), 0)

    full = [set(range(c)) for c in schema.cardinalities]
    root = build(0, full)
    if isinstance(root, Leaf):
        card = schema.cardinalities[0]
        root = DecisionNode(
            0,
            (frozenset({0}), frozenset(range(1, card))),
            (Leaf(next(counter), float(rng.normal())), root),
            0,
        )
    return TreeModel(schema, root)


def random_evidence(rng, schema: FeatureSchema, p_observed: float = 0.5):
    xo = []
    for c in schema.cardinalities:
        if rng.random() < p_observed:
            xo.append(int(rng.integers(0, c)))
        else:
            xo.append(None)
    return tuple(xo)


def random_training_rows(rng, schema: FeatureSchema, n: int, p_observed: float = 0.5):
    """Rows of (partial assignment, target); the first two rows are fully
    missing so every leaf keeps positive posterior mass."""
    rows = []
    for i in range(n):
        if i < 2:
            xo = tuple(None for _ in schema.cardinalities)
        else:
            xo = random_evidence(rng, schema, p_observed)
        rows.append((xo, float(rng.normal())))
    return rows


def dataset_from_rows(schema: FeatureSchema, rows) -> Dataset:
    return Dataset.from_rows(schema, rows)
