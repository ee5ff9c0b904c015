import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtsa.noise import (
    NoiseError,
    NoiseStream,
    empirical_covariance,
    iso_noise_model,
    make_noise_model,
    sample_noise,
)


def draw(model, n, seed=0):
    return sample_noise(model, np.random.default_rng(seed), n)


class TestModel:
    def test_zero(self):
        m = make_noise_model(np.zeros((4, 4)))
        assert m.is_zero
        assert m.C == 0.0

    def test_identity(self):
        m = make_noise_model(np.eye(2))
        np.testing.assert_array_equal(m.sqrt_Gamma, np.eye(2))
        assert m.C == pytest.approx(np.sqrt(2), rel=1e-11)

    def test_diag(self):
        m = make_noise_model(np.diag([4.0, 1.0]))
        np.testing.assert_array_equal(m.sqrt_Gamma, np.diag([2.0, 1.0]))
        assert m.C == pytest.approx(2 * np.sqrt(2), rel=1e-11)

    def test_dense_root_squares_back(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((6, 6))
        g = a @ a.T
        m = make_noise_model(g)
        np.testing.assert_allclose(m.sqrt_Gamma @ m.sqrt_Gamma, g, atol=1e-10)
        np.testing.assert_allclose(m.sqrt_Gamma, m.sqrt_Gamma.T)

    @pytest.mark.parametrize("bad", [np.eye(3), np.array([[1.0, 2.0], [0.0, 1.0]]), -np.eye(2)])
    def test_rejects(self, bad):
        with pytest.raises(NoiseError):
            make_noise_model(bad)


class TestSampling:
    def test_zero_samples(self):
        for xi, psi in draw(make_noise_model(np.zeros((4, 4))), 50):
            assert not np.any(xi) and not np.any(psi)

    def test_rademacher_identity(self):
        d = 3
        for xi, psi in draw(iso_noise_model(d, 1.0), 200):
            z = np.concatenate([xi, psi])
            assert set(np.abs(z)) == {1.0}
            assert np.linalg.norm(z) == pytest.approx(np.sqrt(2 * d), abs=1e-15)

    def test_covariance_diag(self):
        g = np.diag([4.0, 1.0])
        cov = empirical_covariance(draw(make_noise_model(g), 100_000, seed=1))
        assert np.linalg.norm(cov - g) / np.linalg.norm(g) <= 0.05

    def test_mean_near_zero(self):
        m = make_noise_model(np.diag([4.0, 1.0]))
        z = np.array([np.concatenate(p) for p in draw(m, 50_000, seed=5)])
        assert np.linalg.norm(z.mean(axis=0)) <= 3 * m.C / np.sqrt(z.shape[0])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 1000))
    def test_bound_surely(self, d, seed):
        a = np.random.default_rng(seed).standard_normal((2 * d, 2 * d))
        m = make_noise_model(a @ a.T)
        for xi, psi in draw(m, 500, seed):
            assert np.linalg.norm(np.concatenate([xi, psi])) <= m.C


class TestEmpiricalCovariance:
    def test_empty(self):
        with pytest.raises(NoiseError):
            empirical_covariance([])

    def test_zero(self):
        assert not np.any(empirical_covariance([(np.zeros(2), np.zeros(2))] * 3))

    def test_repeated(self):
        z = np.array([1.0, -2.0, 0.5, 3.0])
        cov = empirical_covariance([(z[:2], z[2:])] * 7)
        np.testing.assert_allclose(cov, np.outer(z, z))

    def test_rate(self):
        # Frobenius error of the Rademacher estimate of I shrinks roughly like 1/sqrt(n)
        m = iso_noise_model(2, 1.0)
        errs = [np.linalg.norm(empirical_covariance(draw(m, n, seed=3)) - np.eye(4)) for n in (1000, 100_000)]
        assert errs[1] < errs[0] / 3


class TestStream:
    def test_shapes_and_determinism(self):
        m = iso_noise_model(2, 0.5)
        a, b = NoiseStream(m, 3, seed=4), NoiseStream(m, 3, seed=4)
        for _ in range(1500):
            xa, pa = a.next()
            xb, pb = b.next()
            assert xa.shape == (3, 2) and pa.shape == (3, 2)
            np.testing.assert_array_equal(xa, xb)
            np.testing.assert_array_equal(pa, pb)

    def test_seeds_differ(self):
        m = iso_noise_model(2, 1.0)
        a, b = NoiseStream(m, 2, seed=0).next(), NoiseStream(m, 2, seed=1).next()
        assert not np.array_equal(np.hstack(a), np.hstack(b))

    def test_node_substreams_independent_of_N(self):
        # node i's samples come from its own spawned substream
        m = iso_noise_model(1, 1.0)
        small, large = NoiseStream(m, 2, seed=9), NoiseStream(m, 5, seed=9)
        for _ in range(3):
            np.testing.assert_array_equal(np.hstack(small.next()), np.hstack(large.next())[:2])

    def test_bound_and_covariance(self):
        g = np.diag([4.0, 1.0, 2.0, 0.5])
        m = make_noise_model(g)
        st_ = NoiseStream(m, 1, seed=2)
        z = np.array([np.hstack(st_.next())[0] for _ in range(100_000)])
        assert np.all(np.linalg.norm(z, axis=1) <= m.C)
        assert np.linalg.norm(z.T @ z / len(z) - g) / np.linalg.norm(g) <= 0.05
