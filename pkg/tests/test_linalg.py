import numpy as np
import pytest

from fairfed.errors import ShapeError
from fairfed.linalg import (
    Rng,
    axpy,
    derive_seed,
    largest_remainder,
    linspace,
    matmul,
    random_normal,
    transpose,
)


def matmul_oracle(a, b):
    """Independent O(n^3) scalar-loop product."""
    rows, inner, cols = a.shape[0], a.shape[1], b.shape[1]
    out = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            acc = 0.0
            for k in range(inner):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = random_normal(Rng(1), 2, 2)
        assert np.allclose(matmul(np.eye(2), a), a)

    def test_hand_computed(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0], [6.0]])
        assert np.array_equal(matmul(a, b), np.array([[17.0], [39.0]]))

    def test_matches_triple_loop_oracle(self):
        a = random_normal(Rng(2), 7, 5)
        b = random_normal(Rng(3), 5, 3)
        np.testing.assert_allclose(matmul(a, b), matmul_oracle(a, b), atol=1e-12)

    def test_oracle_agreement_across_sizes(self):
        rng = Rng(4)
        for m, k, n in [(1, 1, 1), (3, 8, 2), (16, 32, 5), (32, 32, 32)]:
            a = random_normal(rng, m, k)
            b = random_normal(rng, k, n)
            np.testing.assert_allclose(matmul(a, b), matmul_oracle(a, b), atol=1e-12)

    def test_associativity(self):
        rng = Rng(5)
        for _ in range(5):
            a = random_normal(rng, 4, 6)
            b = random_normal(rng, 6, 3)
            c = random_normal(rng, 3, 5)
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            rel = np.linalg.norm(left - right) / np.linalg.norm(left)
            assert rel < 1e-9

    def test_dimension_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"2x3.*4x2"):
            matmul(np.zeros((2, 3)), np.zeros((4, 2)))


class TestTranspose:
    def test_involution(self):
        a = random_normal(Rng(6), 3, 5)
        assert np.array_equal(transpose(transpose(a)), a)

    def test_single_element(self):
        assert np.array_equal(transpose(np.array([[4.2]])), np.array([[4.2]]))

    def test_row_becomes_column(self):
        assert np.array_equal(transpose(np.array([[1.0, 2.0, 3.0]])), np.array([[1.0], [2.0], [3.0]]))


class TestAxpy:
    def test_alpha_zero_returns_y(self):
        x = random_normal(Rng(7), 2, 2)
        y = random_normal(Rng(8), 2, 2)
        assert np.array_equal(axpy(0.0, x, y), y)

    def test_alpha_one_zero_y_returns_x(self):
        x = random_normal(Rng(9), 3, 2)
        assert np.array_equal(axpy(1.0, x, np.zeros((3, 2))), x)

    def test_negation_cancels(self):
        x = random_normal(Rng(10), 2, 3)
        assert np.array_equal(axpy(-1.0, x, x), np.zeros((2, 3)))

    def test_linearity(self):
        rng = Rng(11)
        x = random_normal(rng, 3, 3)
        y = random_normal(rng, 3, 3)
        a, b = 0.3, -1.7
        combined = axpy(a + b, x, y)
        nested = axpy(a, x, axpy(b, x, y))
        np.testing.assert_allclose(combined, nested, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            axpy(1.0, np.zeros((2, 2)), np.zeros((3, 2)))


class TestRandomNormal:
    def test_same_seed_identical(self):
        a = random_normal(Rng(42), 8, 8)
        b = random_normal(Rng(42), 8, 8)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        a = random_normal(Rng(1), 4, 4)
        b = random_normal(Rng(2), 4, 4)
        assert not np.array_equal(a, b)

    def test_moments(self):
        samples = random_normal(Rng(123), 100, 100).ravel()
        assert abs(samples.mean()) < 0.05
        assert abs(samples.var() - 1.0) < 0.1


class TestLinspace:
    def test_two_point_endpoints(self):
        assert np.array_equal(linspace(0.5, 0.1, 2), np.array([0.5, 0.1]))

    def test_arithmetic_progression(self):
        np.testing.assert_allclose(linspace(0.5, 0.1, 5), [0.5, 0.4, 0.3, 0.2, 0.1], atol=1e-15)

    def test_constant(self):
        assert np.array_equal(linspace(2.5, 2.5, 4), np.full(4, 2.5))

    def test_single_point(self):
        assert np.array_equal(linspace(0.7, 0.1, 1), np.array([0.7]))

    def test_exact_endpoints(self):
        values = linspace(-1.3, 7.9, 11)
        assert values[0] == -1.3 and values[-1] == 7.9


class TestRng:
    # frozen stream values pin the documented splitmix64/box-muller-v1
    # algorithm: any change to the generator breaks cross-run seeds
    def test_frozen_uint64_stream(self):
        r = Rng(42)
        assert [r.next_uint64() for _ in range(2)] == [
            13679457532755275413,
            2949826092126892291,
        ]

    def test_frozen_uniform_stream(self):
        r = Rng(42)
        assert [r.uniform() for _ in range(2)] == [0.7415648787718233, 0.1599103928769201]

    def test_frozen_normal_stream(self):
        r = Rng(42)
        got = [r.normal() for _ in range(3)]
        assert got == [0.4147197504315305, 0.6526812221519427, -0.8918862136277562]

    def test_uniform_range(self):
        r = Rng(3)
        values = [r.uniform() for _ in range(1000)]
        assert all(0.0 <= v < 1.0 for v in values)

    def test_randbelow_bounds_and_coverage(self):
        r = Rng(4)
        draws = [r.randbelow(7) for _ in range(2000)]
        assert set(draws) == set(range(7))

    def test_shuffle_is_permutation(self):
        r = Rng(5)
        items = list(range(50))
        r.shuffle(items)
        assert sorted(items) == list(range(50))
        assert items != list(range(50))

    def test_sample_indices_distinct(self):
        r = Rng(6)
        picked = r.sample_indices(10, 4)
        assert len(set(picked)) == 4
        assert all(0 <= i < 10 for i in picked)

    def test_derive_seed_stable_and_sensitive(self):
        assert derive_seed(123, "local", 4, 1) == 6306723003153029763
        assert derive_seed(1, "a") != derive_seed(1, "b")
        assert derive_seed(1, "a", 2) != derive_seed(2, "a", 1)


class TestLargestRemainder:
    def test_exact_proportions(self):
        assert largest_remainder([0.6, 0.3, 0.1], 100) == [60, 30, 10]

    def test_sums_to_total(self):
        rng = Rng(7)
        for _ in range(50):
            weights = [rng.uniform() + 0.01 for _ in range(5)]
            total = rng.randbelow(500)
            assert sum(largest_remainder(weights, total)) == total

    def test_remainder_priority(self):
        # quotas 1.75 / 1.75 / 3.5 -> floors 1/1/3; the two leftover units
        # go to the 0.75 remainders, not the 0.5 one
        assert largest_remainder([0.25, 0.25, 0.5], 7) == [2, 2, 3]
