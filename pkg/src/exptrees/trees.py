"""Decision trees and forests over categorical features.

A decision node partitions one feature's categories into branch sets; a leaf
carries a real value. Evaluation routes an assignment from the root to a
single leaf, with a configurable policy for missing values. Trees built in
this package always partition each tested feature's full category set;
trees parsed from external dump files may leave some categories unrouted
(those follow the node's default branch, like unlisted categories in common
gradient-boosting libraries) and may contain leaves whose path constraints
are contradictory, i.e. reachable only when a feature is missing. Such
leaves are excluded from expectation computations and reported.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .data import MISSING_CODE, BinningSpec, Dataset, FeatureSchema, drop_missing_targets
from .density import ConstraintSet

MODEL_FORMAT = "exptree-model/1"
DUMP_FORMAT = "exptree-dump/1"


class MissingFeatureError(ValueError):
    """A missing value was hit under the 'error' evaluation policy."""


class DumpFormatError(ValueError):
    """The dump text does not conform to the documented dump schema."""


@dataclass(frozen=True)
class Leaf:
    leaf_id: int
    value: float


@dataclass(frozen=True)
class DecisionNode:
    feature: int
    branches: tuple[frozenset, ...]
    children: tuple = ()
    default_branch: int = 0


@dataclass(frozen=True, eq=False)
class TreeModel:
    schema: FeatureSchema
    root: DecisionNode | Leaf
    excluded_leaf_ids: frozenset = frozenset()

    def __post_init__(self):
        cards = self.schema.cardinalities
        leaf_ids = []

        def walk(node):
            if isinstance(node, Leaf):
                leaf_ids.append(node.leaf_id)
                return
            if not isinstance(node, DecisionNode):
                raise ValueError(f"malformed tree: unexpected node {node!r}")
            if not 0 <= node.feature < len(cards):
                raise ValueError(f"malformed tree: feature index {node.feature} out of range")
            if len(node.branches) < 2 or len(node.children) != len(node.branches):
                raise ValueError("malformed tree: need >= 2 branches, one child each")
            if not 0 <= node.default_branch < len(node.branches):
                raise ValueError("malformed tree: default branch index out of range")
            seen = set()
            for s in node.branches:
                if any(v < 0 or v >= cards[node.feature] for v in s):
                    raise ValueError("malformed tree: branch value out of range")
                if s & seen:
                    raise ValueError("malformed tree: branch sets must be disjoint")
                seen |= s
            for child in node.children:
                walk(child)

        walk(self.root)
        if len(set(leaf_ids)) != len(leaf_ids):
            raise ValueError("malformed tree: leaf ids must be unique")
        if not self.excluded_leaf_ids <= set(leaf_ids):
            raise ValueError("excluded_leaf_ids references unknown leaves")

    @cached_property
    def leaves(self) -> tuple[Leaf, ...]:
        """All leaves in depth-first order; every sum over leaves uses it."""
        out = []

        def walk(node):
            if isinstance(node, Leaf):
                out.append(node)
            else:
                for child in node.children:
                    walk(child)

        walk(self.root)
        return tuple(out)

    @cached_property
    def included_leaves(self) -> tuple[Leaf, ...]:
        return tuple(l for l in self.leaves if l.leaf_id not in self.excluded_leaf_ids)

    @cached_property
    def constraints(self) -> dict:
        """leaf_id -> ConstraintSet accumulated along the root-to-leaf path."""
        cards = self.schema.cardinalities
        out = {}

        def walk(node, allowed):
            if isinstance(node, Leaf):
                out[node.leaf_id] = ConstraintSet(self.schema, tuple(allowed))
                return
            for s, child in zip(node.branches, node.children):
                nxt = list(allowed)
                nxt[node.feature] = allowed[node.feature] & s
                walk(child, nxt)

        walk(self.root, [frozenset(range(c)) for c in cards])
        return out

    @property
    def n_excluded_leaves(self) -> int:
        return len(self.excluded_leaf_ids)

    def partitions_domain(self) -> bool:
        """True when every decision node's branch sets cover the feature's
        whole category set (always the case for trees built in-package)."""
        cards = self.schema.cardinalities

        def walk(node):
            if isinstance(node, Leaf):
                return True
            covered = frozenset().union(*node.branches)
            if len(covered) != cards[node.feature]:
                return False
            return all(walk(c) for c in node.children)

        return walk(self.root)


@dataclass(frozen=True, eq=False)
class ForestModel:
    """Weighted additive ensemble: prediction = sum_r omega_r * tree_r(x)."""

    trees: tuple[TreeModel, ...]
    omegas: tuple[float, ...]

    def __post_init__(self):
        if not self.trees:
            raise ValueError("forest needs at least one tree")
        if len(self.omegas) != len(self.trees):
            raise ValueError("one weight per tree required")
        object.__setattr__(self, "omegas", tuple(float(w) for w in self.omegas))
        schema = self.trees[0].schema
        if any(t.schema != schema for t in self.trees):
            raise ValueError("all trees must share one schema")

    @property
    def schema(self) -> FeatureSchema:
        return self.trees[0].schema

    @property
    def n_excluded_leaves(self) -> int:
        return sum(t.n_excluded_leaves for t in self.trees)


def forest_of(tree: TreeModel, omega: float = 1.0) -> ForestModel:
    return ForestModel((tree,), (omega,))


def _is_missing(v) -> bool:
    return v is None or v == MISSING_CODE


def evaluate(t: TreeModel, x, missing_policy: str = "error") -> float:
    """Route an assignment to its leaf and return the leaf value.

    missing_policy 'error' raises on a missing feature; 'default_branch'
    follows the node's default branch. A category outside every branch set
    (possible only in dumped trees) also follows the default branch.
    """
    if missing_policy not in ("error", "default_branch"):
        raise ValueError(f"unknown missing policy {missing_policy!r}")
    if len(x) != t.schema.n_features:
        raise ValueError("assignment length must match schema")
    node = t.root
    while isinstance(node, DecisionNode):
        v = x[node.feature]
        if _is_missing(v):
            if missing_policy == "error":
                raise MissingFeatureError(
                    f"feature {t.schema.names[node.feature]!r} is missing"
                )
            branch = node.default_branch
        else:
            v = int(v)
            if not 0 <= v < t.schema.cardinalities[node.feature]:
                raise ValueError(f"value {v} out of range for feature {node.feature}")
            branch = node.default_branch
            for j, s in enumerate(node.branches):
                if v in s:
                    branch = j
                    break
        node = node.children[branch]
    return node.value


def evaluate_forest(f: ForestModel, x, missing_policy: str = "error") -> float:
    total = 0.0
    for omega, tree in zip(f.omegas, f.trees):
        total += omega * evaluate(tree, x, missing_policy)
    return total


def leaf_constraints(t: TreeModel, leaf_id: int) -> ConstraintSet:
    """Per-feature intersection of the branch sets along the leaf's path."""
    try:
        return t.constraints[leaf_id]
    except KeyError:
        raise ValueError(f"no leaf with id {leaf_id}") from None


def with_leaf_values(t: TreeModel, new_values: dict) -> TreeModel:
    """Copy of the tree with the given leaf values replaced; same structure,
    same leaf ids, same excluded set."""

    def rebuild(node):
        if isinstance(node, Leaf):
            if node.leaf_id in new_values:
                return Leaf(node.leaf_id, float(new_values[node.leaf_id]))
            return node
        return DecisionNode(
            node.feature,
            node.branches,
            tuple(rebuild(c) for c in node.children),
            node.default_branch,
        )

    unknown = set(new_values) - {l.leaf_id for l in t.leaves}
    if unknown:
        raise ValueError(f"unknown leaf ids {sorted(unknown)}")
    return TreeModel(t.schema, rebuild(t.root), t.excluded_leaf_ids)


# ---------------------------------------------------------------------------
# Induction: greedy variance-reduction splitter, used by the harness when no
# external dump is supplied. Split candidates are the ordered binary cuts of
# each feature's category range. Rows missing the candidate feature are
# ignored while scoring it (available-case); once a split is chosen they are
# routed down branch 0, which is also the evaluation-time default.
# ---------------------------------------------------------------------------


def induce_tree(ds: Dataset, max_depth: int, min_leaf: int = 1) -> TreeModel:
    if max_depth < 0:
        raise ValueError("max_depth must be >= 0")
    if min_leaf < 1:
        raise ValueError("min_leaf must be >= 1")
    ds, _ = drop_missing_targets(ds, context="induce_tree")
    n = len(ds)
    if n == 0:
        raise ValueError("empty dataset")
    if n < min_leaf:
        raise ValueError(f"need at least min_leaf={min_leaf} usable rows, have {n}")
    x, y = ds.x, ds.y
    cards = ds.schema.cardinalities
    counter = iter(range(10 ** 9))

    def best_split(idx):
        best = None  # (reduction, feature, cut)
        n_here = idx.size
        for f in range(len(cards)):
            vals = x[idx, f]
            obs = vals != MISSING_CODE
            n_obs = int(obs.sum())
            if n_obs < 2:
                continue
            v = vals[obs].astype(np.int64)
            t = y[idx][obs]
            card = cards[f]
            cnt = np.bincount(v, minlength=card).astype(np.float64)
            s = np.bincount(v, weights=t, minlength=card)
            ss = np.bincount(v, weights=t * t, minlength=card)
            ccnt, cs, css = cnt.cumsum(), s.cumsum(), ss.cumsum()
            total_sse = css[-1] - cs[-1] ** 2 / ccnt[-1]
            n_miss = n_here - n_obs
            for cut in range(1, card):
                nl, nr = ccnt[cut - 1], ccnt[-1] - ccnt[cut - 1]
                if nl == 0 or nr == 0:
                    continue
                if nl + n_miss < min_leaf or nr < min_leaf:
                    continue
                sse_l = css[cut - 1] - cs[cut - 1] ** 2 / nl
                sse_r = (css[-1] - css[cut - 1]) - (cs[-1] - cs[cut - 1]) ** 2 / nr
                reduction = total_sse - sse_l - sse_r
                if best is None or reduction > best[0]:
                    best = (reduction, f, cut)
        return best

    def build(idx, depth):
        ys = y[idx]
        if depth >= max_depth or idx.size < 2 * min_leaf or np.all(ys == ys[0]):
            return Leaf(next(counter), float(ys.mean()))
        best = best_split(idx)
        if best is None or best[0] <= 1e-12:
            return Leaf(next(counter), float(ys.mean()))
        _, f, cut = best
        # missing (-1) sorts below every cut, so it lands in branch 0
        left = idx[x[idx, f] < cut]
        right = idx[x[idx, f] >= cut]
        branches = (frozenset(range(cut)), frozenset(range(cut, cards[f])))
        return DecisionNode(f, branches, (build(left, depth + 1), build(right, depth + 1)), 0)

    return TreeModel(ds.schema, build(np.arange(n), 0))


# ---------------------------------------------------------------------------
# Dump ingestion.
#
# Documented dump schema ("exptree-dump/1"), one JSON object:
#   {"format": "exptree-dump/1",
#    "trees": [{"weight": 1.0, "root": <node>}, ...]}
# where <node> is either
#   {"id": 7, "leaf": 0.25}
# or
#   {"id": 0, "split": "<feature name>",
#    "threshold": 32.5              # raw-space threshold, needs a BinningSpec
#     -- or --
#    "branches": [[0, 2], [1]],     # explicit category sets, may under-cover
#    "default": 0,                  # branch taken on missing; defaults to 0
#    "children": [<node>, <node>, ...]}
# Threshold splits get two branches: bins strictly below the threshold's bin
# go left, the rest go right. Node ids must be unique (a repeated id would
# mean shared or cyclic structure).
# ---------------------------------------------------------------------------


def parse_dump(text: str, schema: FeatureSchema, binning: BinningSpec | None = None) -> ForestModel:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise DumpFormatError(f"invalid JSON: {e}") from None
    if not isinstance(obj, dict) or obj.get("format") != DUMP_FORMAT:
        raise DumpFormatError(f"expected format {DUMP_FORMAT!r}, got {obj.get('format')!r}")
    entries = obj.get("trees")
    if not isinstance(entries, list) or not entries:
        raise DumpFormatError("dump must contain a nonempty 'trees' list")

    by_column = {c.name: c for c in binning.columns} if binning is not None else {}

    def threshold_branches(name: str, threshold: float):
        col = by_column.get(name)
        if col is None:
            raise DumpFormatError(
                f"threshold split on {name!r} needs a binning spec entry"
            )
        if col.cuts is None:
            raise DumpFormatError(f"threshold split on categorical column {name!r}")
        card = col.cardinality
        bin_of_threshold = int(np.digitize(float(threshold), col.cuts, right=True))
        if bin_of_threshold == 0:
            raise DumpFormatError(
                f"threshold {threshold} on {name!r} is outside the binned range"
            )
        return (
            frozenset(range(bin_of_threshold)),
            frozenset(range(bin_of_threshold, card)),
        )

    def parse_node(d, seen_ids, leaf_counter):
        if not isinstance(d, dict):
            raise DumpFormatError("node must be a JSON object")
        node_id = d.get("id")
        if node_id is not None:
            if node_id in seen_ids:
                raise DumpFormatError(
                    f"duplicate node id {node_id}: cyclic or shared structure"
                )
            seen_ids.add(node_id)
        if "leaf" in d:
            return Leaf(next(leaf_counter), float(d["leaf"]))
        if "split" not in d:
            raise DumpFormatError("decision node needs a 'split' field")
        name = d["split"]
        try:
            f = schema.index(name)
        except KeyError:
            raise DumpFormatError(f"unknown feature name {name!r}") from None
        card = schema.cardinalities[f]
        if "threshold" in d:
            branches = threshold_branches(name, d["threshold"])
        elif "branches" in d:
            branches = tuple(frozenset(int(v) for v in s) for s in d["branches"])
            seen = set()
            for s in branches:
                if any(v < 0 or v >= card for v in s):
                    raise DumpFormatError(f"category out of range in split on {name!r}")
                if s & seen:
                    raise DumpFormatError(f"overlapping branch sets in split on {name!r}")
                seen |= s
            if len(branches) < 2:
                raise DumpFormatError(f"split on {name!r} needs >= 2 branches")
        else:
            raise DumpFormatError(f"split on {name!r} needs 'threshold' or 'branches'")
        children = d.get("children")
        if not isinstance(children, list) or len(children) != len(branches):
            raise DumpFormatError(f"split on {name!r}: one child per branch required")
        default = int(d.get("default", 0))
        if not 0 <= default < len(branches):
            raise DumpFormatError(f"split on {name!r}: default branch out of range")
        kids = tuple(parse_node(c, seen_ids, leaf_counter) for c in children)
        return DecisionNode(f, branches, kids, default)

    trees, omegas = [], []
    total_excluded = 0
    for entry in entries:
        root = parse_node(entry.get("root"), set(), iter(range(10 ** 9)))
        provisional = TreeModel(schema, root)
        excluded = frozenset(
            lid for lid, c in provisional.constraints.items() if c.is_contradictory
        )
        total_excluded += len(excluded)
        trees.append(TreeModel(schema, root, excluded))
        omegas.append(float(entry.get("weight", 1.0)))
    if total_excluded:
        warnings.warn(
            f"excluded {total_excluded} leaves reachable only via missing values"
        )
    return ForestModel(tuple(trees), tuple(omegas))


# ---------------------------------------------------------------------------
# Model (de)serialization, format "exptree-model/1". Node ids are preorder
# indices assigned at write time; leaf ids are stored explicitly.
# ---------------------------------------------------------------------------


def forest_to_dict(f: ForestModel) -> dict:
    schema = f.schema

    def node_dict(node, next_id):
        nid = next(next_id)
        if isinstance(node, Leaf):
            return {"id": nid, "leaf_id": node.leaf_id, "value": node.value}
        return {
            "id": nid,
            "feature": schema.names[node.feature],
            "branches": [sorted(int(v) for v in s) for s in node.branches],
            "default": node.default_branch,
            "children": [node_dict(c, next_id) for c in node.children],
        }

    return {
        "format": MODEL_FORMAT,
        "schema": schema.to_dict(),
        "omegas": list(f.omegas),
        "trees": [
            {
                "root": node_dict(t.root, iter(range(10 ** 9))),
                "excluded_leaves": sorted(t.excluded_leaf_ids),
            }
            for t in f.trees
        ],
    }


def forest_from_dict(obj: dict) -> ForestModel:
    if obj.get("format") != MODEL_FORMAT:
        raise ValueError(f"expected format {MODEL_FORMAT!r}, got {obj.get('format')!r}")
    schema = FeatureSchema.from_dict(obj["schema"])

    def parse_node(d):
        if "value" in d:
            return Leaf(int(d["leaf_id"]), float(d["value"]))
        return DecisionNode(
            schema.index(d["feature"]),
            tuple(frozenset(s) for s in d["branches"]),
            tuple(parse_node(c) for c in d["children"]),
            int(d.get("default", 0)),
        )

    trees = tuple(
        TreeModel(schema, parse_node(t["root"]), frozenset(t.get("excluded_leaves", ())))
        for t in obj["trees"]
    )
    return ForestModel(trees, tuple(obj["omegas"]))


def save_forest(f: ForestModel, path) -> None:
    Path(path).write_text(json.dumps(forest_to_dict(f), indent=2) + "\n")


def load_forest(path) -> ForestModel:
    return forest_from_dict(json.loads(Path(path).read_text()))
