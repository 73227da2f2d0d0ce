import numpy as np
import pytest

from prunability.operators import (
    DenseSymmetric,
    SymmetricOperator,
    check_symmetry,
    load_dense_csv,
    make_dense_operator,
    save_dense_csv,
)


def random_symmetric(d, seed):
    rng = np.random.default_rng(seed)
    return DenseSymmetric.from_matrix(rng.standard_normal((d, d)))


class TestDenseSymmetric:
    def test_from_matrix_symmetrizes_exactly(self):
        rng = np.random.default_rng(0)
        m = DenseSymmetric.from_matrix(rng.standard_normal((7, 7)))
        assert np.array_equal(m.entries, m.entries.T)

    def test_rejects_asymmetric_direct_construction(self):
        bad = np.eye(3)
        bad[0, 1] = 0.5
        with pytest.raises(ValueError, match="not exactly symmetric"):
            DenseSymmetric(bad)

    def test_rejects_non_square(self):
        with pytest.raises(ValueError, match="square"):
            DenseSymmetric.from_matrix(np.zeros((2, 3)))


class TestMakeDenseOperator:
    def test_identity_action(self):
        op = make_dense_operator(DenseSymmetric.from_matrix(np.eye(3)))
        v = np.array([1.0, 2.0, 3.0])
        assert np.array_equal(op.apply(v), v)

    def test_diagonal_action(self):
        op = make_dense_operator(DenseSymmetric.from_matrix(np.diag([1.0, 2.0, 3.0])))
        assert np.array_equal(op.apply(np.ones(3)), np.array([1.0, 2.0, 3.0]))

    def test_symmetry_invariant_on_random_pairs(self):
        op = make_dense_operator(random_symmetric(10, seed=1))
        rng = np.random.default_rng(2)
        for _ in range(100):
            u = rng.standard_normal(10)
            v = rng.standard_normal(10)
            gap = abs(op.apply(u) @ v - u @ op.apply(v))
            scale = np.linalg.norm(op.apply(u)) * np.linalg.norm(v) + 1e-30
            assert gap <= 1e-8 * scale

    def test_dimension_mismatch_raises(self):
        op = make_dense_operator(random_symmetric(4, seed=3))
        with pytest.raises(ValueError, match="shape"):
            op.apply(np.ones(5))

    def test_apply_is_pure(self):
        op = make_dense_operator(random_symmetric(6, seed=4))
        v = np.random.default_rng(5).standard_normal(6)
        assert np.array_equal(op.apply(v), op.apply(v))


class TestCheckSymmetry:
    def test_dense_symmetric_is_clean(self):
        op = make_dense_operator(random_symmetric(12, seed=6))
        assert check_symmetry(op, probes=16, seed=0) <= 1e-10

    def test_asymmetric_perturbation_is_detected(self):
        entries = random_symmetric(10, seed=7).entries.copy()
        entries[0, 1] += 1e-3  # breaks symmetry on purpose

        def apply(v):
            return entries @ v

        op = SymmetricOperator(dim=10, apply=apply)
        assert check_symmetry(op, probes=100, seed=1) >= 1e-4

    def test_zero_operator(self):
        op = make_dense_operator(DenseSymmetric.from_matrix(np.zeros((5, 5))))
        assert check_symmetry(op, probes=16, seed=2) == 0.0

    def test_rejects_bad_probe_count(self):
        op = make_dense_operator(random_symmetric(3, seed=8))
        with pytest.raises(ValueError):
            check_symmetry(op, probes=0, seed=0)


class TestCsvRoundTrip:
    def test_round_trip(self, tmp_path):
        m = random_symmetric(9, seed=9)
        path = tmp_path / "m.csv"
        save_dense_csv(m, path)
        loaded = load_dense_csv(path)
        assert np.array_equal(loaded.entries, m.entries)

    def test_rejects_non_square_file(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1.0,2.0,3.0\n4.0,5.0,6.0\n")
        with pytest.raises(ValueError, match="not square"):
            load_dense_csv(path)
