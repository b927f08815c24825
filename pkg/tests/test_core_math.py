import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pdecast.core_math import SeededRng, pf_eigenvalue, relu, xavier_init


def char_poly_spectral_radius(m):
    """Spectral radius via Faddeev-LeVerrier coefficients and polynomial roots.

    Independent of the power iteration: builds the characteristic
    polynomial from traces alone, then takes the largest root modulus.
    """
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[0]
    coeffs = [1.0]
    mk = np.zeros((n, n))
    for k in range(1, n + 1):
        mk = m @ (mk + coeffs[-1] * np.eye(n))
        coeffs.append(-np.trace(mk) / k)
    return float(np.max(np.abs(np.roots(coeffs))))


class TestRelu:
    def test_definition(self):
        np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_zero_fixed_point(self):
        np.testing.assert_array_equal(relu(np.zeros(2)), np.zeros(2))

    def test_all_negative(self):
        np.testing.assert_array_equal(relu(np.array([-3.0, -0.5, -1e9])), np.zeros(3))

    @given(
        arrays(np.float64, 8, elements=st.floats(-1e6, 1e6)),
        arrays(np.float64, 8, elements=st.floats(-1e6, 1e6)),
    )
    @settings(max_examples=200, deadline=None)
    def test_non_expansive(self, x, y):
        assert np.max(np.abs(relu(x) - relu(y))) <= np.max(np.abs(x - y)) + 1e-12


class TestXavierInit:
    def test_entries_within_analytic_bound(self):
        m = xavier_init(100, 100, 1.0, SeededRng(7))
        assert np.max(np.abs(m)) <= np.sqrt(6.0 / 200.0)

    def test_bound_scales_with_gain(self):
        for rows, cols, gain in [(3, 5, 2.0), (17, 1, 0.5), (9, 9, 1.0)]:
            m = xavier_init(rows, cols, gain, SeededRng(1))
            assert m.shape == (rows, cols)
            assert np.max(np.abs(m)) <= gain * np.sqrt(6.0 / (rows + cols))

    def test_same_seed_bitwise_identical(self):
        a = xavier_init(20, 30, 1.0, SeededRng(42))
        b = xavier_init(20, 30, 1.0, SeededRng(42))
        np.testing.assert_array_equal(a, b)

    def test_zero_gain_rejected(self):
        with pytest.raises(ValueError):
            xavier_init(3, 3, 0.0, SeededRng(0))

    def test_zero_dimension_rejected(self):
        with pytest.raises(ValueError):
            xavier_init(0, 3, 1.0, SeededRng(0))


class TestPfEigenvalue:
    def test_scalar_matrix(self):
        assert pf_eigenvalue(np.array([[0.5]])) == pytest.approx(0.5, abs=1e-10)

    def test_nilpotent_returns_zero(self):
        assert pf_eigenvalue(np.array([[0.0, 1.0], [0.0, 0.0]])) == 0.0

    def test_hand_solved_2x2(self):
        # roots of x^2 - 0.9x + 0.14 are 0.7 and 0.2
        value = pf_eigenvalue(np.array([[0.5, 0.2], [0.3, 0.4]]))
        assert value == pytest.approx(0.7, abs=1e-8)

    def test_negative_entry_rejected(self):
        with pytest.raises(ValueError):
            pf_eigenvalue(np.array([[0.1, -0.2], [0.0, 0.1]]))

    def test_non_square_rejected(self):
        with pytest.raises(ValueError):
            pf_eigenvalue(np.ones((2, 3)))

    def test_dominates_spectral_radius_of_random_matrices(self):
        rng = SeededRng(100)
        for i in range(200):
            gen = rng.child(i).generator()
            n = int(gen.integers(1, 7))
            m = gen.uniform(0.0, 1.0, (n, n))
            rho = char_poly_spectral_radius(m)
            estimate = pf_eigenvalue(m)
            assert estimate >= rho - 1e-8
            assert estimate == pytest.approx(rho, abs=1e-6)


class TestSeededRng:
    def test_same_seed_same_draws(self):
        a = SeededRng(5).generator().uniform(size=10)
        b = SeededRng(5).generator().uniform(size=10)
        np.testing.assert_array_equal(a, b)

    def test_children_are_independent_and_stable(self):
        root = SeededRng(5)
        c1 = root.child(0, 3)
        c2 = root.child(0, 4)
        assert c1.seed != c2.seed
        assert c1.seed == SeededRng(5).child(0, 3).seed

    def test_unknown_algorithm_rejected(self):
        with pytest.raises(ValueError):
            SeededRng(0, algorithm="mt19937")
