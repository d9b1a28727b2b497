import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from narsmc.data import (
    DataError,
    Dataset,
    Family,
    FormulaError,
    Measurement,
    MissingnessPattern,
    ModelFormula,
    Role,
    VariableSpec,
    classify_pattern,
    classify_patterns,
    design_matrix,
    design_row,
    load_dataset,
    save_dataset,
    schema_from_json,
    with_missingness_indicator,
)


def spec(name, role=Role.AUXILIARY, kind=Measurement.CONTINUOUS):
    return VariableSpec(name, role, kind)


SCHEMA = [
    spec("y", Role.OUTCOME),
    spec("x", Role.EXPOSURE, Measurement.BINARY),
    spec("c", Role.COMPLETE_CONFOUNDER, Measurement.BINARY),
]


def make_data(values, mask=None, schema=SCHEMA):
    return Dataset(schema, np.array(values, float), mask)


class TestDataset:
    def test_mask_defaults_to_nan(self):
        d = make_data([[1.0, 0, 1], [np.nan, 1, 0]])
        assert d.mask[1, 0] and not d.mask[0, 0]

    def test_masked_cells_are_nan(self):
        d = make_data([[1.0, 0, 1], [5.0, 1, 0]], mask=[[True, False, False]] * 2)
        assert np.isnan(d.values[0, 0]) and np.isnan(d.values[1, 0])

    def test_binary_domain_violation(self):
        with pytest.raises(DataError, match="binary domain violation"):
            make_data([[1.0, 2, 1]])

    def test_binary_allows_missing(self):
        d = make_data([[1.0, np.nan, 1]])
        assert d.mask[0, 1]

    def test_duplicate_names_rejected(self):
        with pytest.raises(DataError, match="duplicate"):
            Dataset([spec("y", Role.OUTCOME), spec("y", Role.EXPOSURE)], np.zeros((1, 2)))

    def test_role_counts_enforced(self):
        with pytest.raises(DataError, match="outcome"):
            Dataset([spec("a"), spec("x", Role.EXPOSURE)], np.zeros((1, 2)))

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            make_data(np.zeros((0, 3)))

    def test_values_read_only(self):
        d = make_data([[1.0, 0, 1]])
        with pytest.raises(ValueError):
            d.values[0, 0] = 2.0

    def test_with_column_and_drop(self):
        d = make_data([[1.0, 0, 1]])
        d2 = d.with_column(spec("a"), [0.5])
        assert d2.names == ("y", "x", "c", "a")
        assert d2.drop_column("a").names == d.names

    def test_incomplete_names(self):
        d = make_data([[np.nan, 0, 1], [1.0, np.nan, 0]])
        assert d.incomplete_names() == ("y", "x")


class TestPatterns:
    def test_partition_counts(self):
        vals = [
            [1.0, 0, 1],  # I
            [np.nan, 1, 0],  # II
            [1.0, np.nan, 1],  # III
            [np.nan, np.nan, 0],  # IV
        ]
        d = make_data(vals)
        pats = classify_patterns(d)
        assert pats.tolist() == [1, 2, 3, 4]
        assert classify_pattern(0, d) is MissingnessPattern.I
        assert classify_pattern(1, d) is MissingnessPattern.II
        assert classify_pattern(2, d) is MissingnessPattern.III

    def test_incomplete_auxiliary_counts_as_non_outcome(self):
        sch = SCHEMA + [spec("a", Role.AUXILIARY)]
        d = Dataset(sch, np.array([[1.0, 0, 1, np.nan]]))
        assert classify_pattern(0, d) is MissingnessPattern.III

    @given(st.lists(st.tuples(st.booleans(), st.booleans(), st.booleans()), min_size=1, max_size=40))
    @settings(max_examples=50, deadline=None)
    def test_partition_is_total(self, mask_rows):
        vals = np.where(np.array(mask_rows, bool), np.nan, 1.0)
        vals[:, 1] = np.where(np.isnan(vals[:, 1]), np.nan, 0.0)
        vals[:, 2] = np.where(np.isnan(vals[:, 2]), np.nan, 1.0)
        d = make_data(vals)
        pats = classify_patterns(d)
        counts = [(pats == p).sum() for p in (1, 2, 3, 4)]
        assert sum(counts) == d.n_rows


class TestModelFormula:
    def test_parse_round_trip(self):
        f = ModelFormula.parse("y ~ x + c + x:c", family="bernoulli")
        assert f.response == "y"
        assert f.main_terms == ("x", "c")
        assert f.interaction_terms == (("x", "c"),)
        assert f.family is Family.BERNOULLI
        assert f.link == "logit"
        assert f.text() == "y ~ x + c + x:c"

    def test_hierarchy_enforced(self):
        with pytest.raises(FormulaError, match="hierarchical"):
            ModelFormula("y", ("x",), (("x", "c"),))

    def test_three_way_rejected(self):
        with pytest.raises(FormulaError):
            ModelFormula.parse("y ~ a + b + c + a:b:c")

    def test_response_not_predictor(self):
        with pytest.raises(FormulaError):
            ModelFormula("y", ("y", "x"))

    def test_duplicate_interaction_rejected(self):
        with pytest.raises(FormulaError, match="duplicate"):
            ModelFormula("y", ("a", "b"), (("a", "b"), ("b", "a")))

    def test_term_labels(self):
        f = ModelFormula("y", ("x", "c"), (("x", "c"),))
        assert f.term_labels == ("(intercept)", "x", "c", "x:c")


class TestDesign:
    def test_design_row_with_interaction(self):
        d = make_data([[2.0, 1, 0]])
        f = ModelFormula("y", ("x", "c"), (("x", "c"),))
        assert design_row(f, d, 0).tolist() == [1.0, 1.0, 0.0, 0.0]

    def test_design_row_identity_case(self):
        d = make_data([[2.0, 0, 1]])
        f = ModelFormula("y", ("x",))
        assert design_row(f, d, 0).tolist() == [1.0, 0.0]

    def test_interaction_product_one(self):
        d = make_data([[2.0, 1, 1]])
        f = ModelFormula("y", ("x", "c"), (("x", "c"),))
        assert design_row(f, d, 0)[-1] == 1.0

    def test_missing_value_raises(self):
        d = make_data([[2.0, np.nan, 1]])
        f = ModelFormula("y", ("x",))
        with pytest.raises(DataError, match="missing"):
            design_row(f, d, 0)

    def test_deterministic(self):
        rng = np.random.default_rng(7)
        vals = np.column_stack(
            [rng.normal(size=20), rng.integers(0, 2, 20), rng.integers(0, 2, 20)]
        ).astype(float)
        d = make_data(vals)
        f = ModelFormula("y", ("x", "c"), (("x", "c"),))
        a = design_matrix(f, d)
        b = design_matrix(f, d)
        assert np.array_equal(a, b)


class TestCsvRoundTrip:
    def test_na_token_masks(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("y,x,c\n1.5,0,1\nNA,1,0\n2.5,0,NA\n")
        d = load_dataset(p, SCHEMA)
        assert d.mask[1, 0] and d.mask[2, 2]
        assert d.values[0, 0] == 1.5

    def test_binary_violation_in_file(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("y,x,c\n1.5,2,1\n")
        with pytest.raises(DataError, match="binary domain violation"):
            load_dataset(p, SCHEMA)

    def test_all_observed_pattern_one(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("y,x,c\n1.5,0,1\n-0.5,1,0\n")
        d = load_dataset(p, SCHEMA)
        assert not d.mask.any()
        assert (classify_patterns(d) == 1).all()

    def test_unknown_column(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("y,x,zzz\n1,0,1\n")
        with pytest.raises(DataError, match="unknown column"):
            load_dataset(p, SCHEMA)

    def test_non_numeric_cell(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("y,x,c\nfoo,0,1\n")
        with pytest.raises(DataError, match="non-numeric"):
            load_dataset(p, SCHEMA)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("")
        with pytest.raises(DataError, match="empty"):
            load_dataset(p, SCHEMA)

    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(11)
        vals = np.column_stack(
            [rng.normal(size=30), rng.integers(0, 2, 30), rng.integers(0, 2, 30)]
        ).astype(float)
        mask = rng.random((30, 3)) < 0.25
        d = Dataset(SCHEMA, vals.copy(), mask)
        p = tmp_path / "out.csv"
        save_dataset(d, p)
        d2 = load_dataset(p, SCHEMA)
        assert np.array_equal(d.mask, d2.mask)
        assert np.array_equal(d.values[~d.mask], d2.values[~d2.mask])


def test_schema_from_json():
    out = schema_from_json(
        [
            {"name": "y", "role": "outcome", "measurement": "continuous"},
            {"name": "x", "role": "exposure", "measurement": "binary"},
        ]
    )
    assert out[0].role is Role.OUTCOME and out[1].measurement is Measurement.BINARY
    with pytest.raises(DataError):
        schema_from_json([{"name": "y", "role": "nope", "measurement": "binary"}])


def test_missingness_indicator_column():
    d = make_data([[np.nan, 0, 1], [1.0, 1, 0]])
    d2 = with_missingness_indicator(d, "y")
    assert d2.names[-1] == "m_y"
    assert d2.column("m_y").tolist() == [1.0, 0.0]
