"""Experiment harness: MCAR benchmark comparing missing-value strategies.

Two scenarios are supported. In "deployment" the density and the model are
fit once on the complete training data and only the test features are masked,
per missing-rate and trial. In "learn_deploy" each trial masks the training
data too; the density is refit on the masked rows, the model is induced from
them, and the expected-loss method additionally refits the leaf values before
predicting. Every random draw derives from the config seed, so a rerun
reproduces the report files byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    FeatureSchema,
    BinningSpec,
    apply_binning,
    discretize,
    inject_mcar,
    load_csv,
)
from .density import MixtureDensity, em_fit, log_likelihood
from .expectation import expected_predictions_batch
from .fitting import refit_bagging, refit_tree_mse
from .trees import (
    ForestModel,
    TreeModel,
    evaluate_forest,
    forest_of,
    forest_to_dict,
    induce_tree,
    load_forest,
    parse_dump,
)

METHODS = (
    "default_branch",
    "median_impute",
    "expected_prediction",
    "exploss_expected_prediction",
)

SCENARIOS = ("deployment", "learn_deploy")

DEFAULT_PIS = tuple(round(0.1 * i, 1) for i in range(1, 10))

K_SWEEP = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class ExperimentConfig:
    train_path: str
    test_path: str
    target: str
    scenario: str = "deployment"
    schema_path: str | None = None
    discretize_bins: int | None = None
    pis: tuple[float, ...] = DEFAULT_PIS
    trials: int = 10
    seed: int = 0
    density_k: int | None = 4
    density_iters: int = 50
    density_epsilon: float = 1e-3
    model_dump: str | None = None
    induce_trees: int = 1
    induce_max_depth: int = 5
    induce_min_leaf: int = 5
    methods: tuple[str, ...] = METHODS
    regularization: float = 1.0
    out_dir: str = "report"
    plot: bool = True

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")
        if any(not 0.0 <= p <= 1.0 for p in self.pis):
            raise ValueError("missing rates must lie in [0, 1]")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if (self.schema_path is None) == (self.discretize_bins is None):
            raise ValueError("provide exactly one of schema_path / discretize_bins")

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        density = obj.get("density", {})
        model = obj.get("model", {})
        if "model" in obj and not ({"dump", "induce"} & set(model)):
            raise ValueError("model source required: provide model.dump or model.induce")
        induce = model.get("induce", {})
        return cls(
            train_path=obj["train"],
            test_path=obj["test"],
            target=obj["target"],
            scenario=obj.get("scenario", "deployment"),
            schema_path=obj.get("schema"),
            discretize_bins=obj.get("discretize", {}).get("max_bins")
            if "discretize" in obj
            else None,
            pis=tuple(obj.get("pis", DEFAULT_PIS)),
            trials=int(obj.get("trials", 10)),
            seed=int(obj.get("seed", 0)),
            density_k=density.get("k", 4),
            density_iters=int(density.get("iters", 50)),
            density_epsilon=float(density.get("epsilon", 1e-3)),
            model_dump=model.get("dump"),
            induce_trees=int(induce.get("n_trees", 1)),
            induce_max_depth=int(induce.get("max_depth", 5)),
            induce_min_leaf=int(induce.get("min_leaf", 5)),
            methods=tuple(obj.get("methods", METHODS)),
            regularization=float(obj.get("lambda", 1.0)),
            out_dir=obj.get("out", "report"),
            plot=bool(obj.get("plot", True)),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TrialRecord:
    method: str
    pi: float
    trial: int
    rmse: float


@dataclass(frozen=True)
class AggregateRecord:
    method: str
    pi: float
    mean: float
    std: float
    trials: int


@dataclass(frozen=True, eq=False)
class RunReport:
    details: tuple[TrialRecord, ...]
    aggregates: tuple[AggregateRecord, ...]
    metadata: dict

    def mean_rmse(self, method: str, pi: float) -> float:
        for rec in self.aggregates:
            if rec.method == method and rec.pi == pi:
                return rec.mean
        raise KeyError(f"no aggregate for ({method!r}, {pi})")


def median_impute_fit(train: Dataset) -> tuple[int, ...]:
    """Per-feature lower median of the observed category indices."""
    fills = []
    for f in range(train.schema.n_features):
        col = train.x[:, f]
        observed = np.sort(col[col >= 0])
        if observed.size == 0:
            raise ValueError(
                f"feature {train.schema.names[f]!r} has no observed values"
            )
        fills.append(int(observed[(observed.size - 1) // 2]))
    return tuple(fills)


def impute(x, fills) -> tuple:
    """Fill the missing slots of one assignment; observed slots are kept."""
    if len(x) != len(fills):
        raise ValueError("assignment and fill lengths differ")
    return tuple(
        fills[f] if (v is None or v == -1) else int(v) for f, v in enumerate(x)
    )


def rmse(predictions, targets) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape or predictions.size == 0:
        raise ValueError("predictions and targets must be nonempty and equal-length")
    return float(np.sqrt(np.mean((predictions - targets) ** 2)))


# ---------------------------------------------------------------------------
# Synthetic data: a known mixture over correlated categorical features plus a
# planted forest labeling with additive Gaussian noise. The mixture gives the
# features real structure for conditioning to exploit; the planted forest
# guarantees tree-learnable signal.
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SyntheticData:
    schema: FeatureSchema
    train: Dataset
    test: Dataset
    density: MixtureDensity
    model: ForestModel


def _random_tree(schema: FeatureSchema, rng, depth: int, value_scale: float) -> TreeModel:
    from .trees import DecisionNode, Leaf

    cards = schema.cardinalities
    counter = iter(range(10 ** 6))

    def build(level):
        if level >= depth:
            return Leaf(next(counter), float(rng.normal(0.0, value_scale)))
        f = int(rng.integers(0, len(cards)))
        cut = int(rng.integers(1, cards[f]))
        branches = (frozenset(range(cut)), frozenset(range(cut, cards[f])))
        return DecisionNode(f, branches, (build(level + 1), build(level + 1)), 0)

    return TreeModel(schema, build(0))


def generate_synthetic(
    n_train: int,
    n_test: int,
    n_features: int = 8,
    cardinality: int = 4,
    components: int = 3,
    separation: float = 0.85,
    n_trees: int = 3,
    depth: int = 4,
    noise: float = 0.25,
    seed: int = 0,
) -> SyntheticData:
    """Sample correlated categorical features from a known mixture and label
    them with a planted forest plus Gaussian noise."""
    if not 0.0 < separation < 1.0:
        raise ValueError("separation must be in (0, 1)")
    rng = np.random.default_rng(seed)
    schema = FeatureSchema(
        tuple((f"x{i}", cardinality) for i in range(n_features)), "y"
    )

    weights = rng.dirichlet(np.full(components, 5.0))
    tables = []
    for _ in range(n_features):
        t = np.full((components, cardinality), (1.0 - separation) / (cardinality - 1))
        prefs = rng.integers(0, cardinality, size=components)
        t[np.arange(components), prefs] = separation
        tables.append(t)
    density = MixtureDensity(schema, weights, tuple(tables))

    trees = tuple(_random_tree(schema, rng, depth, 1.0) for _ in range(n_trees))
    model = ForestModel(trees, tuple(1.0 / n_trees for _ in trees))

    def sample(n: int) -> Dataset:
        comps = rng.choice(components, size=n, p=weights)
        x = np.empty((n, n_features), dtype=np.int16)
        for f in range(n_features):
            u = rng.random(n)
            cdf = np.cumsum(tables[f], axis=1)
            x[:, f] = (u[:, None] > cdf[comps]).sum(axis=1)
        y = np.array([evaluate_forest(model, row) for row in x])
        y += rng.normal(0.0, noise, size=n)
        return Dataset(schema, x, y)

    return SyntheticData(schema, sample(n_train), sample(n_test), density, model)


# ---------------------------------------------------------------------------
# Experiment driver.
# ---------------------------------------------------------------------------


def _derive_seed(root: int, *key: int) -> int:
    ss = np.random.SeedSequence([root, *key])
    return int(ss.generate_state(1)[0])


def select_k_by_validation(
    train: Dataset,
    ks=K_SWEEP,
    iters: int = 50,
    seed: int = 0,
    epsilon: float = 1e-3,
    val_fraction: float = 0.2,
) -> int:
    """Pick the component count with the best held-out log-likelihood."""
    n = len(train)
    rng = np.random.default_rng(_derive_seed(seed, 91))
    order = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    val_idx, fit_idx = order[:n_val], order[n_val:]
    if fit_idx.size == 0:
        fit_idx = val_idx
    fit = Dataset(train.schema, train.x[fit_idx], train.y[fit_idx])
    val = Dataset(train.schema, train.x[val_idx], train.y[val_idx])
    best_k, best_ll = None, -np.inf
    for k in ks:
        model = em_fit(fit, k, iters=iters, seed=_derive_seed(seed, 92, k), epsilon=epsilon)
        ll = log_likelihood(model, val)
        if ll > best_ll:
            best_k, best_ll = k, ll
    return best_k


def _fit_density(cfg: ExperimentConfig, train: Dataset, seed: int) -> MixtureDensity:
    k = cfg.density_k
    if k is None:
        k = select_k_by_validation(
            train, iters=cfg.density_iters, seed=seed, epsilon=cfg.density_epsilon
        )
    return em_fit(
        train, k, iters=cfg.density_iters, seed=seed, epsilon=cfg.density_epsilon
    )


def _induce_model(
    cfg: ExperimentConfig, train: Dataset, seed: int
) -> tuple[ForestModel, list[Dataset]]:
    """Single tree on the full data, or a bagged forest with per-tree
    bootstrap samples. Returns the per-tree fitting datasets."""
    if cfg.induce_trees == 1:
        tree = induce_tree(train, cfg.induce_max_depth, cfg.induce_min_leaf)
        return forest_of(tree), [train]
    rng = np.random.default_rng(seed)
    trees, samples = [], []
    for _ in range(cfg.induce_trees):
        idx = rng.integers(0, len(train), size=len(train))
        boot = Dataset(train.schema, train.x[idx], train.y[idx])
        trees.append(induce_tree(boot, cfg.induce_max_depth, cfg.induce_min_leaf))
        samples.append(boot)
    omega = 1.0 / cfg.induce_trees
    return ForestModel(tuple(trees), tuple(omega for _ in trees)), samples


def _load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, BinningSpec | None]:
    if cfg.schema_path is not None:
        schema = FeatureSchema.load(cfg.schema_path)
        return load_csv(cfg.train_path, schema), load_csv(cfg.test_path, schema), None
    raw_train = load_csv(cfg.train_path)
    train, spec = discretize(raw_train, cfg.target, cfg.discretize_bins)
    spec.save(str(cfg.train_path) + ".binning.json")
    test = apply_binning(load_csv(cfg.test_path), spec)
    return train, test, spec


def _load_model(
    cfg: ExperimentConfig, schema: FeatureSchema, binning: BinningSpec | None
) -> ForestModel:
    from .trees import MODEL_FORMAT

    text = Path(cfg.model_dump).read_text()
    try:
        fmt = json.loads(text).get("format")
    except json.JSONDecodeError:
        fmt = None
    if fmt == MODEL_FORMAT:
        return load_forest(cfg.model_dump)
    return parse_dump(text, schema, binning)


def _method_predictions(
    method: str,
    model: ForestModel,
    refit_model: ForestModel | None,
    density: MixtureDensity,
    fills: tuple[int, ...],
    test: Dataset,
) -> np.ndarray:
    if method == "default_branch":
        return np.array(
            [evaluate_forest(model, row, "default_branch") for row, _ in test.rows()]
        )
    if method == "median_impute":
        return np.array(
            [evaluate_forest(model, impute(row, fills)) for row, _ in test.rows()]
        )
    if method == "expected_prediction":
        return expected_predictions_batch(model, density, test)
    if method == "exploss_expected_prediction":
        return expected_predictions_batch(refit_model, density, test)
    raise ValueError(f"unknown method {method!r}")


def _refit_per_tree(
    cfg: ExperimentConfig,
    model: ForestModel,
    density: MixtureDensity,
    samples: list[Dataset],
) -> ForestModel:
    if len(model.trees) == 1:
        tree, _ = refit_tree_mse(model.trees[0], density, samples[0], cfg.regularization)
        return ForestModel((tree,), model.omegas)
    refit, _ = refit_bagging(
        model, [density] * len(model.trees), samples, cfg.regularization
    )
    return refit


def _run_trial(cfg, model, refit_model, density, fills, test_m, pi, trial, records):
    for method in cfg.methods:
        try:
            preds = _method_predictions(
                method, model, refit_model, density, fills, test_m
            )
        except Exception as e:
            raise RuntimeError(
                f"trial aborted (method={method}, pi={pi}, trial={trial}): {e}"
            ) from e
        records.append(TrialRecord(method, pi, trial, rmse(preds, test_m.y)))


def _model_hash(model: ForestModel) -> str:
    blob = json.dumps(forest_to_dict(model), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _density_hash(density: MixtureDensity) -> str:
    blob = json.dumps(density.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    train, test, binning = _load_datasets(cfg)
    wants_exploss = "exploss_expected_prediction" in cfg.methods
    records: list[TrialRecord] = []
    metadata: dict = {
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "trials": cfg.trials,
        "pis": list(cfg.pis),
        "methods": list(cfg.methods),
        "n_train": len(train),
        "n_test": len(test),
        "regularization": cfg.regularization,
    }

    if cfg.scenario == "deployment":
        density = _fit_density(cfg, train, _derive_seed(cfg.seed, 0))
        if cfg.model_dump is not None:
            model = _load_model(cfg, train.schema, binning)
            samples = [train] * len(model.trees)
        else:
            model, samples = _induce_model(cfg, train, _derive_seed(cfg.seed, 1))
        refit_model = (
            _refit_per_tree(cfg, model, density, samples) if wants_exploss else None
        )
        fills = median_impute_fit(train)
        metadata["model_hash"] = _model_hash(model)
        metadata["density_hash"] = _density_hash(density)

        for pi_i, pi in enumerate(cfg.pis):
            for trial in range(cfg.trials):
                test_m = inject_mcar(test, pi, _derive_seed(cfg.seed, 10, pi_i, trial))
                _run_trial(
                    cfg, model, refit_model, density, fills, test_m, pi, trial, records
                )
    else:
        metadata["model_hash"] = None
        metadata["density_hash"] = None
        dump_model = (
            _load_model(cfg, train.schema, binning) if cfg.model_dump else None
        )
        for pi_i, pi in enumerate(cfg.pis):
            for trial in range(cfg.trials):
                train_m = inject_mcar(train, pi, _derive_seed(cfg.seed, 20, pi_i, trial))
                test_m = inject_mcar(test, pi, _derive_seed(cfg.seed, 21, pi_i, trial))
                density = _fit_density(
                    cfg, train_m, _derive_seed(cfg.seed, 22, pi_i, trial)
                )
                if dump_model is not None:
                    model, samples = dump_model, [train_m] * len(dump_model.trees)
                else:
                    model, samples = _induce_model(
                        cfg, train_m, _derive_seed(cfg.seed, 23, pi_i, trial)
                    )
                refit_model = (
                    _refit_per_tree(cfg, model, density, samples)
                    if wants_exploss
                    else None
                )
                fills = median_impute_fit(train_m)
                _run_trial(
                    cfg, model, refit_model, density, fills, test_m, pi, trial, records
                )

    records.sort(key=lambda r: (r.method, r.pi, r.trial))
    aggregates = []
    for method in sorted(set(r.method for r in records)):
        for pi in cfg.pis:
            vals = np.array(
                [r.rmse for r in records if r.method == method and r.pi == pi]
            )
            aggregates.append(
                AggregateRecord(
                    method, pi, float(vals.mean()), float(vals.std()), len(vals)
                )
            )
    return RunReport(tuple(records), tuple(aggregates), metadata)


def emit_report(report: RunReport, out_dir, plot: bool = True) -> dict:
    """Write details.csv, aggregate.csv, metadata.json, and (optionally) the
    RMSE-vs-missing-rate figure. Returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    details = out / "details.csv"
    with open(details, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "pi", "trial", "rmse"])
        for r in report.details:
            writer.writerow([r.method, repr(r.pi), r.trial, repr(r.rmse)])
    paths["details"] = details

    aggregate = out / "aggregate.csv"
    with open(aggregate, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "pi", "mean", "std"])
        for a in report.aggregates:
            writer.writerow([a.method, repr(a.pi), repr(a.mean), repr(a.std)])
    paths["aggregate"] = aggregate

    metadata = out / "metadata.json"
    metadata.write_text(json.dumps(report.metadata, indent=2, sort_keys=True) + "\n")
    paths["metadata"] = metadata

    if plot:
        from .plotting import render_rmse_figure

        figure = out / "rmse_vs_pi.png"
        render_rmse_figure(report.aggregates, figure)
        paths["figure"] = figure
    return paths
