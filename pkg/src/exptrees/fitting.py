"""Closed-form leaf-parameter learning under expected MSE loss.

Each row of the training set contributes its posterior leaf weights; the
optimal value of a leaf is the weight-averaged target, shrunk toward zero by
an optional L2 penalty. Joint refits over a whole forest assemble the normal
equations from pairwise leaf weights and solve them with a symmetric dense
factorization. Boosted refits fit one new tree against the residual structure
of a fixed forest.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .data import Dataset, drop_missing_targets
from .density import MixtureDensity
from .expectation import leaf_pair_weight_batch, leaf_weight_batch
from .trees import ForestModel, TreeModel, with_leaf_values

MAX_JOINT_LEAVES = 512


@dataclass(frozen=True)
class LeafRefit:
    leaf_id: int
    old_value: float
    new_value: float
    weight_sum: float


@dataclass(frozen=True, eq=False)
class RefitReport:
    leaves: tuple[LeafRefit, ...]
    expected_loss_before: float
    expected_loss_after: float
    skipped_leaf_ids: tuple[int, ...]
    regularization: float
    dropped_rows: int

    def to_dict(self) -> dict:
        return {
            "leaves": [
                {
                    "leaf_id": l.leaf_id,
                    "old_value": l.old_value,
                    "new_value": l.new_value,
                    "weight_sum": l.weight_sum,
                }
                for l in self.leaves
            ],
            "expected_loss_before": self.expected_loss_before,
            "expected_loss_after": self.expected_loss_after,
            "skipped_leaf_ids": list(self.skipped_leaf_ids),
            "regularization": self.regularization,
            "dropped_rows": self.dropped_rows,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass(frozen=True, eq=False)
class ForestSystem:
    """Normal equations for a joint forest refit: m @ values = b.

    ``index`` maps each system coordinate to (tree position, leaf id).
    Same-tree off-diagonal entries are exactly zero: two distinct leaves of
    one tree are never reached together.
    """

    m: np.ndarray
    b: np.ndarray
    index: tuple[tuple[int, int], ...]
    n_rows: int


@dataclass(frozen=True)
class SolveResult:
    values: np.ndarray
    regularization_used: float
    ridge_fallback: bool


def _require_targets(ds: Dataset) -> np.ndarray:
    bad = np.where(np.isnan(ds.y))[0]
    if bad.size:
        raise ValueError(f"row {int(bad[0])} has a missing target")
    return ds.y


def _tree_losses(w: np.ndarray, y: np.ndarray, values: np.ndarray) -> float:
    e1 = w @ values
    e2 = w @ (values * values)
    return float(np.mean(y * y - 2.0 * y * e1 + e2))


def expected_mse(model, d: MixtureDensity, ds: Dataset) -> float:
    """Dataset-averaged expected squared error.

    Per row: y^2 - 2*y*E[prediction] + E[prediction^2], the expectations taken
    over completions of the row's missing slots. For a forest the squared term
    expands into pairwise cross products between trees. A zero-probability row
    raises, naming the row.
    """
    y = _require_targets(ds)
    if isinstance(model, TreeModel):
        w, _, _ = leaf_weight_batch(model, d, ds.x)
        values = np.array([l.value for l in model.included_leaves])
        return _tree_losses(w, y, values)
    if not isinstance(model, ForestModel):
        raise TypeError("model must be a TreeModel or ForestModel")
    e1 = np.zeros(len(ds))
    e2 = np.zeros(len(ds))
    per_tree_w = []
    per_tree_values = []
    for omega, tree in zip(model.omegas, model.trees):
        w, _, _ = leaf_weight_batch(tree, d, ds.x)
        values = np.array([l.value for l in tree.included_leaves])
        per_tree_w.append(w)
        per_tree_values.append(values)
        e1 += omega * (w @ values)
        e2 += omega * omega * (w @ (values * values))
    for r in range(len(model.trees)):
        for s in range(r + 1, len(model.trees)):
            j = leaf_pair_weight_batch(model.trees[r], model.trees[s], d, ds.x)
            cross = np.einsum("a,nab,b->n", per_tree_values[r], j, per_tree_values[s])
            e2 += 2.0 * model.omegas[r] * model.omegas[s] * cross
    return float(np.mean(y * y - 2.0 * y * e1 + e2))


def refit_tree_mse(
    t: TreeModel, d: MixtureDensity, ds: Dataset, lam: float = 0.0
) -> tuple[TreeModel, RefitReport]:
    """Closed-form leaf values minimizing the expected MSE (+ lam * L2).

    new_value = sum_rows(y * weight) / (lam + sum_rows(weight)) per leaf.
    On fully observed data with lam=0 this is the per-leaf target mean. A
    leaf whose denominator is zero keeps its old value and is recorded in
    skipped_leaf_ids, as are leaves excluded from expectations entirely.
    """
    if lam < 0:
        raise ValueError("regularization must be nonnegative")
    ds, dropped = drop_missing_targets(ds, context="refit_tree_mse")
    y = _require_targets(ds)
    w, _, _ = leaf_weight_batch(t, d, ds.x)
    old = np.array([l.value for l in t.included_leaves])
    num = w.T @ y
    den = w.sum(axis=0)

    new_values = {}
    entries = []
    skipped = []
    for i, leaf in enumerate(t.included_leaves):
        if den[i] + lam == 0.0:
            skipped.append(leaf.leaf_id)
            entries.append(LeafRefit(leaf.leaf_id, leaf.value, leaf.value, float(den[i])))
        else:
            val = float(num[i] / (den[i] + lam))
            new_values[leaf.leaf_id] = val
            entries.append(LeafRefit(leaf.leaf_id, leaf.value, val, float(den[i])))
    for leaf in t.leaves:
        if leaf.leaf_id in t.excluded_leaf_ids:
            skipped.append(leaf.leaf_id)
            entries.append(LeafRefit(leaf.leaf_id, leaf.value, leaf.value, 0.0))

    refit = with_leaf_values(t, new_values)
    new = np.array([l.value for l in refit.included_leaves])
    report = RefitReport(
        leaves=tuple(entries),
        expected_loss_before=_tree_losses(w, y, old),
        expected_loss_after=_tree_losses(w, y, new),
        skipped_leaf_ids=tuple(skipped),
        regularization=lam,
        dropped_rows=dropped,
    )
    return refit, report


def build_forest_system(
    f: ForestModel, d: MixtureDensity, ds: Dataset, max_leaves: int = MAX_JOINT_LEAVES
) -> ForestSystem:
    """Assemble the joint normal equations over all included leaves.

    m[i, j] sums each row's joint leaf-pair weight, b[i] sums y times the
    leaf weight. Tree weights are not carried: the solution absorbs them, and
    applying it yields a unit-weight forest. Assembly is O(rows * leaves^2),
    hence the size guard.
    """
    ds, _ = drop_missing_targets(ds, context="build_forest_system")
    y = _require_targets(ds)
    index = [
        (r, leaf.leaf_id)
        for r, tree in enumerate(f.trees)
        for leaf in tree.included_leaves
    ]
    total = len(index)
    if total > max_leaves:
        raise ValueError(
            f"joint refit over {total} leaves exceeds the guard ({max_leaves})"
        )
    offsets = []
    pos = 0
    for tree in f.trees:
        offsets.append(pos)
        pos += len(tree.included_leaves)

    m = np.zeros((total, total))
    b = np.zeros(total)
    per_tree_w = []
    for r, tree in enumerate(f.trees):
        w, _, _ = leaf_weight_batch(tree, d, ds.x)
        per_tree_w.append(w)
        sl = slice(offsets[r], offsets[r] + w.shape[1])
        np.fill_diagonal(m[sl, sl], w.sum(axis=0))
        b[sl] = w.T @ y
    for r in range(len(f.trees)):
        for s in range(r + 1, len(f.trees)):
            j = leaf_pair_weight_batch(f.trees[r], f.trees[s], d, ds.x)
            block = j.sum(axis=0)
            sl_r = slice(offsets[r], offsets[r] + block.shape[0])
            sl_s = slice(offsets[s], offsets[s] + block.shape[1])
            m[sl_r, sl_s] = block
            m[sl_s, sl_r] = block.T
    return ForestSystem(m, b, tuple(index), len(ds))


def solve_forest_system(sys: ForestSystem, lam: float = 0.0) -> SolveResult:
    """Solve (m + lam*I) values = b with a dense symmetric factorization.

    With lam=0 and a singular system, retries with a small ridge
    (1e-8 * trace / size) and flags the fallback.
    """
    if lam < 0:
        raise ValueError("regularization must be nonnegative")
    m, b = sys.m, sys.b
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite entries in the forest system")
    size = m.shape[0]

    def attempt(ridge):
        c, low = scipy.linalg.cho_factor(m + ridge * np.eye(size), lower=True)
        return scipy.linalg.cho_solve((c, low), b)

    def is_singular():
        # rank detection in the numpy.linalg.matrix_rank spirit: the matrix
        # is positive semidefinite, so a near-zero smallest eigenvalue means
        # rank deficiency (Cholesky alone can slide through on rounding)
        eigs = scipy.linalg.eigvalsh(m)
        return eigs[-1] <= 0.0 or eigs[0] <= size * np.finfo(float).eps * eigs[-1]

    if lam == 0.0 and is_singular():
        fallback = 1e-8 * float(np.trace(m)) / size
        if fallback <= 0:
            raise scipy.linalg.LinAlgError("forest system is singular with zero trace")
        warnings.warn(f"singular forest system; retrying with ridge {fallback:.3e}")
        return SolveResult(attempt(fallback), fallback, True)
    return SolveResult(attempt(lam), lam, False)


def apply_forest_solution(f: ForestModel, sys: ForestSystem, values: np.ndarray) -> ForestModel:
    """Write solved leaf values back; the result is a unit-weight forest."""
    if len(values) != len(sys.index):
        raise ValueError("solution length does not match the system index")
    per_tree: dict[int, dict[int, float]] = {}
    for (r, leaf_id), v in zip(sys.index, values):
        per_tree.setdefault(r, {})[leaf_id] = float(v)
    trees = tuple(
        with_leaf_values(tree, per_tree.get(r, {})) for r, tree in enumerate(f.trees)
    )
    return ForestModel(trees, tuple(1.0 for _ in trees))


def refit_bagging(
    f: ForestModel,
    densities,
    datasets,
    lam: float = 0.0,
) -> tuple[ForestModel, tuple[RefitReport, ...]]:
    """Refit each tree independently against its own density and sample."""
    if not (len(densities) == len(datasets) == len(f.trees)):
        raise ValueError("need one density and one dataset per tree")
    trees, reports = [], []
    for tree, d, ds in zip(f.trees, densities, datasets):
        refit, report = refit_tree_mse(tree, d, ds, lam)
        trees.append(refit)
        reports.append(report)
    return ForestModel(tuple(trees), f.omegas), tuple(reports)


def refit_boost_tree(
    fixed: ForestModel | None, t_new: TreeModel, d: MixtureDensity, ds: Dataset
) -> tuple[TreeModel, RefitReport]:
    """Closed-form leaf values for a new tree added on top of a fixed forest.

    new_value = sum_rows(y * weight - correction) / sum_rows(weight), where
    the correction is the fixed forest's joint leaf-pair weight against the
    new leaf, times the fixed leaf values. With no fixed forest (None) this
    is exactly the single-tree refit with zero regularization.
    """
    if fixed is None:
        return refit_tree_mse(t_new, d, ds, 0.0)
    ds, dropped = drop_missing_targets(ds, context="refit_boost_tree")
    y = _require_targets(ds)
    w, _, _ = leaf_weight_batch(t_new, d, ds.x)
    num = w.T @ y
    den = w.sum(axis=0)
    for omega, tree in zip(fixed.omegas, fixed.trees):
        j = leaf_pair_weight_batch(t_new, tree, d, ds.x)
        fixed_values = np.array([l.value for l in tree.included_leaves])
        num -= omega * np.einsum("nab,b->a", j, fixed_values)

    new_values = {}
    entries = []
    skipped = []
    for i, leaf in enumerate(t_new.included_leaves):
        if den[i] == 0.0:
            skipped.append(leaf.leaf_id)
            entries.append(LeafRefit(leaf.leaf_id, leaf.value, leaf.value, float(den[i])))
        else:
            val = float(num[i] / den[i])
            new_values[leaf.leaf_id] = val
            entries.append(LeafRefit(leaf.leaf_id, leaf.value, val, float(den[i])))
    for leaf in t_new.leaves:
        if leaf.leaf_id in t_new.excluded_leaf_ids:
            skipped.append(leaf.leaf_id)
            entries.append(LeafRefit(leaf.leaf_id, leaf.value, leaf.value, 0.0))

    refit = with_leaf_values(t_new, new_values)
    combined_before = ForestModel(fixed.trees + (t_new,), fixed.omegas + (1.0,))
    combined_after = ForestModel(fixed.trees + (refit,), fixed.omegas + (1.0,))
    report = RefitReport(
        leaves=tuple(entries),
        expected_loss_before=expected_mse(combined_before, d, ds),
        expected_loss_after=expected_mse(combined_after, d, ds),
        skipped_leaf_ids=tuple(skipped),
        regularization=0.0,
        dropped_rows=dropped,
    )
    return refit, report
