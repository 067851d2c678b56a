"""Exact expected predictions of trees and forests under a mixture density.

Conditioning on the observed slots of a partial assignment, every quantity
here reduces to leaf-path marginals: the probability that the observed values
hold AND a leaf's path constraints hold. Divided by the probability of the
observed values alone, those marginals form a posterior over leaves, and the
expected prediction is the posterior-weighted sum of leaf values. Leaves
excluded at parse time (reachable only via missing values) carry no weight;
whatever probability mass they and any unrouted categories would absorb is
reported as ``excluded_mass`` instead of being silently renormalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MISSING_CODE, Dataset, FeatureSchema
from .density import MixtureDensity, ZeroEvidenceError
from .trees import ForestModel, TreeModel


@dataclass(frozen=True, eq=False)
class LeafPosterior:
    """Per-leaf posterior weights p_leaf(observed) / p(observed) for the
    included leaves, plus the probability mass no included leaf covers."""

    leaf_ids: tuple[int, ...]
    weights: np.ndarray
    excluded_mass: float

    def weight_of(self, leaf_id: int) -> float:
        return float(self.weights[self.leaf_ids.index(leaf_id)])


def _encode_assignment(schema: FeatureSchema, x) -> np.ndarray:
    if len(x) != schema.n_features:
        raise ValueError("assignment length must match schema")
    row = np.full(schema.n_features, MISSING_CODE, dtype=np.int16)
    for f, v in enumerate(x):
        if v is None or v == MISSING_CODE:
            continue
        v = int(v)
        if not 0 <= v < schema.cardinalities[f]:
            raise ValueError(f"value {v} out of range for feature {schema.names[f]!r}")
        row[f] = v
    return row


def _leaf_masks(t: TreeModel) -> list[np.ndarray]:
    """Per feature, an (L_included, cardinality) boolean matrix of the
    included leaves' allowed categories."""
    cards = t.schema.cardinalities
    leaves = t.included_leaves
    masks = [np.zeros((len(leaves), c), dtype=bool) for c in cards]
    for i, leaf in enumerate(leaves):
        allowed = t.constraints[leaf.leaf_id].allowed
        for f in range(len(cards)):
            masks[f][i, sorted(allowed[f])] = True
    return masks


def _check_density(t: TreeModel, d: MixtureDensity) -> None:
    if t.schema != d.schema:
        raise ValueError("tree schema does not match density schema")


def leaf_weight_batch(
    t: TreeModel, d: MixtureDensity, x: np.ndarray, row_offset: int = 0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Posterior leaf weights for every row of a packed assignment matrix.

    Returns (W, excluded_mass, p_obs) with W of shape (n, L_included).
    The leaf products and the observed-evidence product run through the same
    multiply-accumulate sequence, so on a fully observed row the reached
    leaf's weight is exactly 1.0. Raises ZeroEvidenceError, naming the row,
    when the observed slots have probability zero.
    """
    _check_density(t, d)
    masks = _leaf_masks(t)
    n_leaves = len(t.included_leaves)
    # leaf products plus one extra "unconstrained" row for p(observed)
    leafsum = [
        np.vstack([m.astype(np.float64) @ tab.T, tab.sum(axis=1)[None, :]])
        for m, tab in zip(masks, d.tables)
    ]
    w = d.weights
    n = x.shape[0]
    out_w = np.empty((n, n_leaves))
    out_excl = np.empty(n)
    out_pobs = np.empty(n)
    for i in range(n):
        prod = np.ones((n_leaves + 1, d.k))
        for f in range(t.schema.n_features):
            v = x[i, f]
            if v == MISSING_CODE:
                prod *= leafsum[f]
            else:
                col = d.tables[f][:, v]
                factor = np.empty((n_leaves + 1, d.k))
                factor[:n_leaves] = np.where(masks[f][:, v, None], col[None, :], 0.0)
                factor[n_leaves] = col
                prod *= factor
        pv = (prod * w[None, :]).sum(axis=1)
        p_obs = pv[n_leaves]
        if p_obs <= 0.0:
            raise ZeroEvidenceError(
                f"row {row_offset + i}: observed values have probability zero"
            )
        out_w[i] = pv[:n_leaves] / p_obs
        out_excl[i] = max(0.0, 1.0 - float(out_w[i].sum()))
        out_pobs[i] = p_obs
    return out_w, out_excl, out_pobs


def leaf_posterior(t: TreeModel, d: MixtureDensity, xo) -> LeafPosterior:
    """Posterior over included leaves given the observed slots of xo."""
    row = _encode_assignment(t.schema, xo)
    w, excl, _ = leaf_weight_batch(t, d, row[None, :])
    ids = tuple(l.leaf_id for l in t.included_leaves)
    return LeafPosterior(ids, w[0], float(excl[0]))


def expected_prediction(
    t: TreeModel, d: MixtureDensity, xo, renormalize: bool = False
) -> float:
    """Expectation of the tree's prediction over completions of xo.

    Equals plain evaluation exactly when xo is fully observed, and stays
    within the range of included leaf values when excluded_mass is zero.
    By default mass falling outside the included leaves is simply dropped
    (the sum is then an expectation times 1 - excluded_mass); with
    ``renormalize`` the posterior is rescaled onto the included leaves.
    """
    post = leaf_posterior(t, d, xo)
    values = np.array([l.value for l in t.included_leaves])
    total = float(np.dot(values, post.weights))
    if renormalize:
        covered = 1.0 - post.excluded_mass
        if covered <= 0.0:
            raise ZeroEvidenceError(
                "no included leaf is compatible with the observed values"
            )
        return total / covered
    return total


def expected_squared_prediction(t: TreeModel, d: MixtureDensity, xo) -> float:
    """Expectation of the squared prediction; a single sum over leaves since
    distinct leaves of one tree are never reached by the same assignment."""
    post = leaf_posterior(t, d, xo)
    values = np.array([l.value for l in t.included_leaves])
    return float(np.dot(values * values, post.weights))


def expected_prediction_forest(
    f: ForestModel, d: MixtureDensity, xo, renormalize: bool = False
) -> float:
    """Weighted sum of per-tree expected predictions, in tree order."""
    total = 0.0
    for omega, tree in zip(f.omegas, f.trees):
        total += omega * expected_prediction(tree, d, xo, renormalize=renormalize)
    return total


def leaf_pair_weight_batch(
    t1: TreeModel, t2: TreeModel, d: MixtureDensity, x: np.ndarray, row_offset: int = 0
) -> np.ndarray:
    """Joint posterior weights over leaf pairs of two trees.

    Returns J of shape (n, L1, L2) with J[i, a, b] the probability that row
    i's observed values, leaf a's path constraints, and leaf b's path
    constraints all hold, divided by the probability of the observed values.
    Pairs from the same tree with distinct leaves get exactly zero.
    """
    _check_density(t1, d)
    _check_density(t2, d)
    m1, m2 = _leaf_masks(t1), _leaf_masks(t2)
    l1, l2 = len(t1.included_leaves), len(t2.included_leaves)
    n = x.shape[0]
    w = d.weights
    # per-feature joint factor when the feature is unobserved
    joint = [
        np.einsum("av,bv,kv->abk", a.astype(np.float64), b.astype(np.float64), tab)
        for a, b, tab in zip(m1, m2, d.tables)
    ]
    obs_full = [tab.sum(axis=1) for tab in d.tables]
    out = np.empty((n, l1, l2))
    for i in range(n):
        prod = np.ones((l1, l2, d.k))
        p_obs_fac = np.ones(d.k)
        for f in range(t1.schema.n_features):
            v = x[i, f]
            if v == MISSING_CODE:
                prod *= joint[f]
                p_obs_fac *= obs_full[f]
            else:
                col = d.tables[f][:, v]
                prod *= (
                    m1[f][:, v][:, None, None]
                    * m2[f][:, v][None, :, None]
                    * col[None, None, :]
                )
                p_obs_fac *= col
        p_obs = float(np.dot(p_obs_fac, w))
        if p_obs <= 0.0:
            raise ZeroEvidenceError(
                f"row {row_offset + i}: observed values have probability zero"
            )
        out[i] = (prod @ w) / p_obs
    return out


def expected_cross_prediction(t1: TreeModel, t2: TreeModel, d: MixtureDensity, xo) -> float:
    """Expectation of the product of two trees' predictions.

    With t1 is t2 this reduces to the expected squared prediction; for trees
    over independent features and empty evidence it factorizes into the
    product of the two expected predictions.
    """
    row = _encode_assignment(t1.schema, xo)
    j = leaf_pair_weight_batch(t1, t2, d, row[None, :])[0]
    v1 = np.array([l.value for l in t1.included_leaves])
    v2 = np.array([l.value for l in t2.included_leaves])
    return float(v1 @ j @ v2)


def expected_predictions_batch(model, d: MixtureDensity, ds: Dataset) -> np.ndarray:
    """Expected prediction of a tree or forest for every dataset row."""
    if isinstance(model, TreeModel):
        w, _, _ = leaf_weight_batch(model, d, ds.x)
        values = np.array([l.value for l in model.included_leaves])
        return w @ values
    out = np.zeros(len(ds))
    for omega, tree in zip(model.omegas, model.trees):
        w, _, _ = leaf_weight_batch(tree, d, ds.x)
        values = np.array([l.value for l in tree.included_leaves])
        out += omega * (w @ values)
    return out
