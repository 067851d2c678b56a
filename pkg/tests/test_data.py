"""Dataset encoding, discretization, MCAR masking, and CSV round-trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exptrees.data import (
    CsvFormatError,
    Dataset,
    FeatureSchema,
    MISSING_CODE,
    RawTable,
    apply_binning,
    discretize,
    drop_missing_targets,
    inject_mcar,
    load_csv,
    save_csv,
)


def raw_table(columns, rows):
    return RawTable(tuple(columns), tuple(tuple(r) for r in rows))


def single_column_table(values, targets=None):
    targets = targets if targets is not None else ["0.0"] * len(values)
    return raw_table(["v", "y"], [[v, t] for v, t in zip(values, targets)])


class TestSchema:
    def test_basic_accessors(self):
        schema = FeatureSchema((("a", 2), ("b", 3)), "y")
        assert schema.names == ("a", "b")
        assert schema.cardinalities == (2, 3)
        assert schema.index("b") == 1

    def test_rejects_duplicate_names(self):
        with pytest.raises(ValueError, match="unique"):
            FeatureSchema((("a", 2), ("a", 3)), "y")

    def test_rejects_unary_feature(self):
        with pytest.raises(ValueError, match="cardinality"):
            FeatureSchema((("a", 1),), "y")

    def test_json_round_trip(self, tmp_path):
        schema = FeatureSchema((("a", 2), ("b", 3)), "y")
        schema.save(tmp_path / "s.json")
        assert FeatureSchema.load(tmp_path / "s.json") == schema


class TestDiscretize:
    def test_equal_width_two_bins(self):
        ds, spec = discretize(single_column_table(["0.0", "5.0", "10.0"]), "y", max_bins=2)
        col = spec.columns[0]
        assert col.cuts == (5.0,)
        # a value equal to a cut falls in the lower bin
        assert list(ds.x[:, 0]) == [0, 0, 1]

    def test_string_column_gets_dense_indices(self):
        ds, spec = discretize(single_column_table(["a", "b", "a"]), "y")
        assert spec.columns[0].levels == ("a", "b")
        assert list(ds.x[:, 0]) == [0, 1, 0]

    def test_equal_width_cuts_match_hand_formula(self):
        # independent recomputation: lo + i * (hi - lo) / k
        values = [1.0, 2.0, 3.0, 4.0]
        k = 4
        expected_cuts = tuple(1.0 + i * (4.0 - 1.0) / k for i in range(1, k))
        ds, spec = discretize(
            single_column_table([str(v) for v in values]), "y", max_bins=k
        )
        assert spec.columns[0].cuts == pytest.approx(expected_cuts, abs=0)
        assert expected_cuts == (1.75, 2.5, 3.25)
        assert list(ds.x[:, 0]) == [0, 1, 2, 3]

    def test_fully_missing_column_errors(self):
        table = single_column_table([None, None])
        with pytest.raises(ValueError, match="fully missing"):
            discretize(table, "y")

    def test_constant_column_clamped_to_two_categories(self):
        ds, spec = discretize(single_column_table(["3.5", "3.5"]), "y")
        assert spec.columns[0].cardinality == 2
        assert spec.columns[0].cuts == ()
        assert list(ds.x[:, 0]) == [0, 0]

    def test_missing_cells_preserved(self):
        ds, _ = discretize(single_column_table(["1.0", None, "2.0"]), "y")
        assert ds.x[1, 0] == MISSING_CODE

    def test_non_numeric_target_errors(self):
        table = single_column_table(["1.0"], targets=["oops"])
        with pytest.raises(CsvFormatError, match="target"):
            discretize(table, "y")

    def test_max_bins_bounds(self):
        with pytest.raises(ValueError):
            discretize(single_column_table(["1.0", "2.0"]), "y", max_bins=1)
        with pytest.raises(ValueError):
            discretize(single_column_table(["1.0", "2.0"]), "y", max_bins=11)

    def test_apply_binning_reuses_training_encoding(self):
        train = single_column_table(["0.0", "10.0"])
        _, spec = discretize(train, "y", max_bins=5)
        test = single_column_table(["-3.0", "4.0", "99.0"])
        ds = apply_binning(test, spec)
        # out-of-range values clamp into the edge bins
        assert list(ds.x[:, 0]) == [0, 1, 4]

    def test_apply_binning_rejects_unseen_level(self):
        _, spec = discretize(single_column_table(["a", "b"]), "y")
        with pytest.raises(CsvFormatError, match="unseen"):
            apply_binning(single_column_table(["c"]), spec)

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(
            st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
            min_size=2,
            max_size=30,
        )
    )
    def test_binning_is_monotone(self, values):
        table = single_column_table([repr(v) for v in values])
        ds, _ = discretize(table, "y")
        order = np.argsort(np.asarray(values), kind="stable")
        bins = ds.x[order, 0]
        assert np.all(np.diff(bins) >= 0)


class TestInjectMcar:
    @pytest.fixture
    def dataset(self):
        rng = np.random.default_rng(7)
        schema = FeatureSchema(tuple((f"x{i}", 4) for i in range(8)), "y")
        x = rng.integers(0, 4, size=(1250, 8)).astype(np.int16)
        return Dataset(schema, x, rng.normal(size=1250))

    def test_zero_rate_is_identity(self, dataset):
        assert inject_mcar(dataset, 0.0, seed=1) == dataset

    def test_full_rate_masks_everything_but_targets(self, dataset):
        masked = inject_mcar(dataset, 1.0, seed=1)
        assert np.all(masked.x == MISSING_CODE)
        assert np.array_equal(masked.y, dataset.y)

    def test_observed_fraction_concentrates(self, dataset):
        # 10_000 slots at pi=0.5: binomial concentration puts the missing
        # fraction in [0.47, 0.53] with overwhelming probability
        masked = inject_mcar(dataset, 0.5, seed=123)
        frac = float((masked.x == MISSING_CODE).mean())
        assert 0.47 <= frac <= 0.53

    def test_same_seed_reproduces_exactly(self, dataset):
        a = inject_mcar(dataset, 0.3, seed=42)
        b = inject_mcar(dataset, 0.3, seed=42)
        assert np.array_equal(a.x, b.x)

    def test_never_alters_observed_values(self, dataset):
        masked = inject_mcar(dataset, 0.4, seed=5)
        still = masked.x != MISSING_CODE
        assert np.array_equal(masked.x[still], dataset.x[still])

    def test_row_unchanged_probability(self, dataset):
        # P(row untouched) = (1 - pi)^F, testable at 10_000 rows
        rng = np.random.default_rng(9)
        schema = FeatureSchema(tuple((f"x{i}", 3) for i in range(3)), "y")
        big = Dataset(
            schema,
            rng.integers(0, 3, size=(10_000, 3)).astype(np.int16),
            np.zeros(10_000),
        )
        pi = 0.3
        masked = inject_mcar(big, pi, seed=11)
        unchanged = float(np.all(masked.x == big.x, axis=1).mean())
        expected = (1 - pi) ** 3
        sigma = np.sqrt(expected * (1 - expected) / 10_000)
        assert abs(unchanged - expected) < 4 * sigma

    def test_rejects_bad_rate(self, dataset):
        with pytest.raises(ValueError):
            inject_mcar(dataset, 1.5, seed=0)


class TestCsv:
    @pytest.fixture
    def schema(self):
        return FeatureSchema((("a", 3), ("b", 2), ("c", 4)), "y")

    def test_round_trip_identity(self, tmp_path, schema):
        ds = Dataset.from_rows(
            schema,
            [
                ((1, None, 3), 2.5),
                ((None, 0, None), None),
                ((2, 1, 0), -0.125),
            ],
        )
        save_csv(ds, tmp_path / "d.csv")
        assert load_csv(tmp_path / "d.csv", schema) == ds

    def test_empty_field_is_missing(self, tmp_path, schema):
        (tmp_path / "d.csv").write_text("a,b,c,y\n1,,3,2.5\n")
        ds = load_csv(tmp_path / "d.csv", schema)
        assert ds.rows() == [((1, None, 3), 2.5)]

    def test_arity_error_names_row(self, tmp_path, schema):
        (tmp_path / "d.csv").write_text("a,b,c,y\n1,0,2,0.5\n1,0\n")
        with pytest.raises(CsvFormatError, match="row 2"):
            load_csv(tmp_path / "d.csv", schema)

    def test_non_numeric_target_names_row(self, tmp_path, schema):
        (tmp_path / "d.csv").write_text("a,b,c,y\n1,0,2,oops\n")
        with pytest.raises(CsvFormatError, match="row 1"):
            load_csv(tmp_path / "d.csv", schema)

    def test_out_of_range_category_rejected(self, tmp_path, schema):
        (tmp_path / "d.csv").write_text("a,b,c,y\n9,0,2,0.5\n")
        with pytest.raises(CsvFormatError, match="out of range"):
            load_csv(tmp_path / "d.csv", schema)

    def test_header_required(self, tmp_path, schema):
        (tmp_path / "d.csv").write_text("")
        with pytest.raises(CsvFormatError, match="header"):
            load_csv(tmp_path / "d.csv", schema)

    def test_raw_load_without_schema(self, tmp_path):
        (tmp_path / "d.csv").write_text("u,y\nfoo,1.5\n,2.0\n")
        raw = load_csv(tmp_path / "d.csv")
        assert raw.columns == ("u", "y")
        assert raw.rows == (("foo", "1.5"), (None, "2.0"))


def test_drop_missing_targets_warns_with_count():
    schema = FeatureSchema((("a", 2),), "y")
    ds = Dataset.from_rows(schema, [((0,), 1.0), ((1,), None), ((None,), None)])
    with pytest.warns(UserWarning, match="2 rows"):
        kept, dropped = drop_missing_targets(ds)
    assert dropped == 2
    assert len(kept) == 1
