import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lucc.raster import (CATEGORICAL, CONTINUOUS, GridDimensionError,
                         GridParseError, RasterGrid, StateLegend,
                         TransitionMatrix, observed_transition_matrix,
                         read_ascii_grid, read_binary_grid, read_matrix_csv,
                         write_ascii_grid, write_binary_grid, write_matrix_csv)


@pytest.fixture
def legend():
    return StateLegend(((1, "forest"), (2, "urban"), (3, "water")))


def make_grid(values, kind=CATEGORICAL, nodata=-9999, cell=30.0):
    return RasterGrid(np.asarray(values), cell, nodata, kind)


class TestRasterGrid:
    def test_mask_marks_nodata(self):
        g = make_grid([[1, -9999], [2, 3]])
        assert g.mask.tolist() == [[False, True], [False, False]]

    def test_categorical_dtype(self):
        g = make_grid([[1, 2], [3, 4]])
        assert g.values.dtype == np.int32

    def test_continuous_dtype(self):
        g = make_grid([[1.5, 2.0]], kind=CONTINUOUS)
        assert g.values.dtype == np.float64

    def test_values_are_readonly(self):
        g = make_grid([[1, 2]])
        with pytest.raises(ValueError):
            g.values[0, 0] = 9

    def test_rejects_bad_cell_size(self):
        with pytest.raises(ValueError):
            RasterGrid(np.ones((2, 2)), 0.0, -9999, CATEGORICAL)

    def test_rejects_1d(self):
        with pytest.raises(ValueError):
            RasterGrid(np.ones(4), 1.0, -9999, CATEGORICAL)

    def test_with_values_keeps_metadata(self):
        g = make_grid([[1, 2]], cell=10.0)
        g2 = g.with_values(np.array([[3, 4]]))
        assert g2.cell_size == 10.0 and g2.values.tolist() == [[3, 4]]

    def test_equality(self):
        a = make_grid([[1, 2]])
        b = make_grid([[1, 2]])
        c = make_grid([[1, 3]])
        assert a == b and a != c


class TestAsciiGridIO:
    def test_round_trip_categorical(self, tmp_path):
        g = make_grid([[1, 2, -9999], [3, 1, 2]])
        p = tmp_path / "g.asc"
        write_ascii_grid(g, p)
        assert read_ascii_grid(p) == g

    def test_round_trip_continuous_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        g = make_grid(rng.normal(size=(5, 7)), kind=CONTINUOUS)
        p = tmp_path / "g.asc"
        write_ascii_grid(g, p)
        back = read_ascii_grid(p, kind=CONTINUOUS)
        assert np.array_equal(back.values, g.values)

    def test_kind_inferred_from_integrality(self, tmp_path):
        p = tmp_path / "g.asc"
        write_ascii_grid(make_grid([[0.5, 1.5]], kind=CONTINUOUS), p)
        assert read_ascii_grid(p).kind == CONTINUOUS

    def test_header_mismatch_raises(self, tmp_path):
        p = tmp_path / "g.asc"
        p.write_text("ncols 3\nnrows 2\nxllcorner 0\nyllcorner 0\n"
                     "cellsize 1\n1 2 3\n")
        with pytest.raises(GridDimensionError):
            read_ascii_grid(p)

    def test_garbage_raises(self, tmp_path):
        p = tmp_path / "g.asc"
        p.write_text("not a grid at all\n")
        with pytest.raises(GridParseError):
            read_ascii_grid(p)

    @settings(max_examples=25, deadline=None)
    @given(nrows=st.integers(1, 6), ncols=st.integers(1, 6),
           seed=st.integers(0, 10 ** 6))
    def test_round_trip_property(self, nrows, ncols, seed, tmp_path_factory):
        rng = np.random.default_rng(seed)
        g = make_grid(rng.integers(0, 5, (nrows, ncols)))
        p = tmp_path_factory.mktemp("rt") / "g.asc"
        write_ascii_grid(g, p)
        assert read_ascii_grid(p) == g


class TestBinaryGridIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        g = make_grid(rng.normal(size=(9, 4)), kind=CONTINUOUS, cell=2.5)
        p = tmp_path / "g.bin"
        write_binary_grid(g, p)
        assert read_binary_grid(p) == g

    def test_bad_magic_raises(self, tmp_path):
        p = tmp_path / "g.bin"
        p.write_bytes(b"JUNKXXXX" * 8)
        with pytest.raises(GridParseError):
            read_binary_grid(p)


class TestStateLegend:
    def test_needs_two_states(self):
        with pytest.raises(ValueError):
            StateLegend(((1, "only"),))

    def test_rejects_duplicate_codes(self):
        with pytest.raises(ValueError):
            StateLegend(((1, "a"), (1, "b")))

    def test_rejects_negative_codes(self):
        with pytest.raises(ValueError):
            StateLegend(((-1, "a"), (2, "b")))

    def test_index(self, legend):
        assert legend.index(2) == 1
        with pytest.raises(ValueError):
            legend.index(99)


class TestTransitionMatrix:
    def test_prob_lookup(self, legend):
        m = np.array([[0.8, 0.15, 0.05], [0.0, 1.0, 0.0], [0.1, 0.0, 0.9]])
        tm = TransitionMatrix(legend, m)
        assert tm.prob(1, 2) == 0.15

    def test_rejects_out_of_range(self, legend):
        m = np.eye(3)
        m[0, 1] = 1.2
        with pytest.raises(ValueError):
            TransitionMatrix(legend, m)

    def test_rejects_offdiag_sum_above_one(self, legend):
        m = np.array([[0.0, 0.6, 0.6], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        with pytest.raises(ValueError):
            TransitionMatrix(legend, m)

    def test_csv_round_trip(self, legend, tmp_path):
        m = np.array([[0.8, 0.15, 0.05], [0.02, 0.98, 0.0], [0.0, 0.0, 1.0]])
        tm = TransitionMatrix(legend, m)
        p = tmp_path / "m.csv"
        write_matrix_csv(tm, p)
        back = read_matrix_csv(p, legend)
        assert np.allclose(back.probabilities, m)


class TestObservedTransitionMatrix:
    def test_matches_exhaustive_tally(self, legend):
        rng = np.random.default_rng(3)
        a = rng.choice([1, 2, 3], (40, 40))
        b = rng.choice([1, 2, 3], (40, 40))
        tm = observed_transition_matrix(make_grid(a), make_grid(b), legend)
        codes = [1, 2, 3]
        for i, u in enumerate(codes):
            n_u = (a == u).sum()
            for j, v in enumerate(codes):
                n_uv = ((a == u) & (b == v)).sum()
                assert tm.probabilities[i, j] == pytest.approx(n_uv / n_u)

    def test_rows_sum_to_one(self, legend):
        rng = np.random.default_rng(4)
        a = rng.choice([1, 2, 3], (30, 30))
        b = rng.choice([1, 2, 3], (30, 30))
        tm = observed_transition_matrix(make_grid(a), make_grid(b), legend)
        assert np.allclose(tm.probabilities.sum(axis=1), 1.0)

    def test_nodata_excluded(self, legend):
        a = np.array([[1, -9999], [1, 1]])
        b = np.array([[2, 2], [1, 1]])
        tm = observed_transition_matrix(make_grid(a), make_grid(b), legend)
        assert tm.prob(1, 2) == pytest.approx(1 / 3)

    def test_empty_state_row_is_identity(self, legend):
        a = np.array([[1, 1], [1, 1]])
        b = np.array([[1, 1], [1, 2]])
        tm = observed_transition_matrix(make_grid(a), make_grid(b), legend)
        assert tm.prob(3, 3) == 1.0

    def test_unknown_code_raises(self, legend):
        a = np.array([[1, 7]])
        with pytest.raises(ValueError):
            observed_transition_matrix(make_grid(a), make_grid(a), legend)

    def test_shape_mismatch_raises(self, legend):
        with pytest.raises(GridDimensionError):
            observed_transition_matrix(make_grid([[1, 2]]),
                                       make_grid([[1], [2]]), legend)
