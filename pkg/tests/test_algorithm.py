import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtsa.algorithm import (
    TRAJECTORY_COLUMNS,
    AlgorithmError,
    DivergenceError,
    GTDSampler,
    IterateState,
    StepSchedule,
    Trajectory,
    averaged_step,
    projected_step,
    run,
    step,
    step_matrix,
    step_sizes,
)
from dtsa.network import build_topology, lazy_weights, metropolis_weights
from dtsa.noise import iso_noise_model
from dtsa.problem import BlockSystem, exact_solution, gtd_instance, random_heterogeneous_instance, random_instance


class FrozenSchedule:
    """Schedule stub with constant step sizes, including zero."""

    def __init__(self, a, b):
        self.a, self.b = a, b

    def sizes(self, k):
        return self.a, self.b


def scalar_system(a11, a12, a21, a22, b1, b2):
    m = lambda v: np.array([[float(v)]])  # noqa: E731
    return BlockSystem(m(a11), m(a12), m(a21), m(a22), np.atleast_2d(b1).T, np.atleast_2d(b2).T)


def random_state(rng, N, d, k=0):
    return IterateState(k, rng.standard_normal((N, d)), rng.standard_normal((N, d)))


def pairs(Xi, Psi):
    return list(zip(Xi, Psi))


class TestSchedule:
    def test_k0(self):
        assert step_sizes(StepSchedule(0.5, 0.1), 0) == (0.5, 0.1)

    def test_k7(self):
        a, b = step_sizes(StepSchedule(0.5, 0.1), 7)
        assert a == pytest.approx(0.5 / 4, rel=1e-14)
        assert b == pytest.approx(0.1 / 8, rel=1e-14)

    def test_strictly_decreasing(self):
        s = StepSchedule(0.5, 0.1)
        for k in range(100):
            assert s.alpha(k + 1) < s.alpha(k) and s.beta(k + 1) < s.beta(k)

    def test_ratio(self):
        s = StepSchedule(0.5, 0.1)
        for k in (0, 1, 10, 1000):
            assert s.ratio(k) == pytest.approx(s.beta(k) / s.alpha(k), rel=1e-12)
            assert s.ratio(k) <= 1.0

    def test_rejects(self):
        with pytest.raises(AlgorithmError):
            StepSchedule(0.0, 0.1)
        with pytest.raises(AlgorithmError):
            step_sizes(StepSchedule(0.5, 0.1), -1)

    def test_ordered(self):
        assert StepSchedule(0.5, 0.1).ordered
        assert not StepSchedule(0.1, 0.5).ordered


class TestStep:
    def test_pure_mixing(self):
        rng = np.random.default_rng(0)
        sys = random_instance(2, 4, seed=0)
        W = metropolis_weights(build_topology("ring", 4)).matrix
        V = lazy_weights(build_topology("ring", 4), 0.5).matrix
        st0 = random_state(rng, 4, 2)
        noise = pairs(rng.standard_normal((4, 2)), rng.standard_normal((4, 2)))
        out = step(st0, sys, W, V, FrozenSchedule(0.0, 0.0), noise)
        np.testing.assert_allclose(out.X, W @ st0.X, atol=1e-15)
        np.testing.assert_allclose(out.Y, V @ st0.Y, atol=1e-15)
        assert out.k == 1

    def test_hand_d1_n2(self):
        sys = scalar_system(1.0, 0.5, -0.5, 1.0, [1.0, 2.0], [0.0, 1.0])
        W = np.full((2, 2), 0.5)
        st0 = IterateState(0, np.array([[1.0], [3.0]]), np.array([[2.0], [0.0]]))
        z = np.zeros((2, 1))
        out = step_matrix(st0, sys, W, W, StepSchedule(0.5, 0.1), z, z)
        np.testing.assert_allclose(out.X[:, 0], [1.5, 1.5], atol=1e-15)
        np.testing.assert_allclose(out.Y[:, 0], [0.85, 1.25], atol=1e-15)

    def test_single_node_matches_scalar_loop(self):
        a11, a12, a21, a22, b1, b2 = 0.8, 0.3, -0.2, 0.6, 0.4, -0.7
        sys = scalar_system(a11, a12, a21, a22, [b1], [b2])
        s = StepSchedule(0.5, 0.1)
        rng = np.random.default_rng(3)
        noise = rng.standard_normal((50, 2))
        state = IterateState.zeros(1, 1)
        x = y = 0.0
        for k in range(50):
            a = 0.5 / (k + 1) ** (2.0 / 3.0)
            b = 0.1 / (k + 1)
            xi, psi = noise[k]
            x, y = x - a * (a11 * x + a12 * y - b1 + xi), y - b * (a21 * x + a22 * y - b2 + psi)
            state = step(state, sys, [[1.0]], [[1.0]], s, [(np.array([xi]), np.array([psi]))])
            assert state.X[0, 0] == x and state.Y[0, 0] == y

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from(["ring", "path", "star", "complete"]), st.integers(1, 7), st.integers(1, 4),
           st.integers(0, 10_000))
    def test_matrix_form_matches_per_node(self, kind, N, d, seed):
        rng = np.random.default_rng(seed)
        sys = random_instance(d, N, seed)
        W = metropolis_weights(build_topology(kind, N)).matrix
        V = lazy_weights(build_topology(kind, N), 0.3).matrix
        st0 = random_state(rng, N, d, k=int(rng.integers(0, 100)))
        Xi, Psi = rng.standard_normal((N, d)), rng.standard_normal((N, d))
        s = StepSchedule(0.7, 0.2)
        a = step(st0, sys, W, V, s, pairs(Xi, Psi))
        b = step_matrix(st0, sys, W, V, s, Xi, Psi)
        assert np.max(np.abs(a.X - b.X)) <= 1e-12
        assert np.max(np.abs(a.Y - b.Y)) <= 1e-12

    def test_shape_errors(self):
        sys = random_instance(2, 3)
        W = metropolis_weights(build_topology("ring", 3)).matrix
        with pytest.raises(AlgorithmError):
            step(IterateState.zeros(4, 2), sys, W, W, StepSchedule(0.5, 0.1), [])
        with pytest.raises(AlgorithmError):
            step(IterateState.zeros(3, 2), sys, W, W, StepSchedule(0.5, 0.1), [])

    def test_contracts_near_fixed_point(self):
        sys = scalar_system(1.0, 0.2, -0.2, 1.0, [1.0], [1.0])
        sol = exact_solution(sys)
        s = StepSchedule(0.5, 0.1)
        st0 = IterateState(0, np.array([[sol.x_star[0] + 0.1]]), np.array([[sol.y_star[0] + 0.1]]))
        z = np.zeros((1, 1))
        out = step_matrix(st0, sys, [[1.0]], [[1.0]], s, z, z)
        before = np.hypot(0.1, 0.1)
        after = np.hypot(out.X[0, 0] - sol.x_star[0], out.Y[0, 0] - sol.y_star[0])
        assert after < before


class TestAveraged:
    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from(["ring", "star", "path", "erdos_renyi"]), st.integers(2, 8), st.integers(0, 10_000))
    def test_mean_consistency(self, kind, N, seed):
        rng = np.random.default_rng(seed)
        d = 3
        p = 0.5 if kind == "erdos_renyi" else None
        topo = build_topology(kind, N, edge_prob=p, seed=seed)
        W, V = metropolis_weights(topo).matrix, lazy_weights(topo, 0.4).matrix
        sys = random_instance(d, N, seed)
        st0 = random_state(rng, N, d, k=int(rng.integers(0, 50)))
        Xi, Psi = rng.standard_normal((N, d)), rng.standard_normal((N, d))
        s = StepSchedule(0.5, 0.1)
        out = step(st0, sys, W, V, s, pairs(Xi, Psi))
        xb, yb = averaged_step(st0.X.mean(0), st0.Y.mean(0), sys, s, st0.k, Xi.mean(0), Psi.mean(0))
        assert np.max(np.abs(out.X.mean(0) - xb)) <= 1e-12
        assert np.max(np.abs(out.Y.mean(0) - yb)) <= 1e-12

    def test_fixed_point(self):
        base = random_instance(2, 1, seed=1)
        sys = BlockSystem(*base.blocks(), np.tile(base.b1, (3, 1)), np.tile(base.b2, (3, 1)))
        sol = exact_solution(sys)
        xn, yn = averaged_step(sol.x_star, sol.y_star, sys, StepSchedule(0.5, 0.1), 0, np.zeros(2), np.zeros(2))
        np.testing.assert_allclose(xn, sol.x_star, atol=1e-12)
        np.testing.assert_allclose(yn, sol.y_star, atol=1e-12)

    def test_single_node_equals_step(self):
        rng = np.random.default_rng(4)
        sys = random_instance(2, 1, seed=4)
        st0 = random_state(rng, 1, 2, k=3)
        xi, psi = rng.standard_normal(2), rng.standard_normal(2)
        s = StepSchedule(0.5, 0.1)
        out = step(st0, sys, [[1.0]], [[1.0]], s, [(xi, psi)])
        xb, yb = averaged_step(st0.X[0], st0.Y[0], sys, s, 3, xi, psi)
        np.testing.assert_allclose(out.X[0], xb, atol=1e-15)
        np.testing.assert_allclose(out.Y[0], yb, atol=1e-15)


class TestProjected:
    def setup_method(self):
        self.sys = random_heterogeneous_instance(2, 4, seed=3)
        self.W = metropolis_weights(build_topology("ring", 4)).matrix
        self.s = StepSchedule(0.5, 0.1)
        self.zero = pairs(np.zeros((4, 2)), np.zeros((4, 2)))

    def test_infinite_radius_is_unprojected(self):
        rng = np.random.default_rng(0)
        st0 = random_state(rng, 4, 2)
        out = projected_step(st0, self.sys, self.W, self.W, self.s, self.zero, math.inf)
        nb = self.sys.node_blocks
        for i in range(4):
            x = self.W[i] @ st0.X - 0.5 * (nb[i, 0] @ st0.X[i] + nb[i, 1] @ st0.Y[i] - self.sys.b1[i])
            y = self.W[i] @ st0.Y - 0.1 * (nb[i, 2] @ st0.X[i] + nb[i, 3] @ st0.Y[i] - self.sys.b2[i])
            np.testing.assert_allclose(out.X[i], x, atol=1e-14)
            np.testing.assert_allclose(out.Y[i], y, atol=1e-14)

    def test_outside_lands_on_sphere(self):
        st0 = IterateState(0, np.full((4, 2), 100.0), np.full((4, 2), -100.0))
        sol = exact_solution(self.sys)
        radius = 2.0 * max(np.linalg.norm(sol.x_star), np.linalg.norm(sol.y_star)) + 1.0
        out = projected_step(st0, self.sys, self.W, self.W, self.s, self.zero, radius)
        np.testing.assert_allclose(np.linalg.norm(out.X, axis=1), radius, rtol=1e-14)
        np.testing.assert_allclose(np.linalg.norm(out.Y, axis=1), radius, rtol=1e-14)

    def test_homogeneous_replica_matches_step(self):
        base = random_instance(2, 4, seed=5)
        nb = np.broadcast_to(np.stack(base.blocks()), (4, 4, 2, 2))
        hetero = BlockSystem(*base.blocks(), base.b1, base.b2, node_blocks=nb)
        rng = np.random.default_rng(1)
        st0 = random_state(rng, 4, 2, k=2)
        noise = pairs(rng.standard_normal((4, 2)), rng.standard_normal((4, 2)))
        a = projected_step(st0, hetero, self.W, self.W, self.s, noise, 1e6)
        b = step(st0, base, self.W, self.W, self.s, noise)
        np.testing.assert_allclose(a.X, b.X, atol=1e-13)
        np.testing.assert_allclose(a.Y, b.Y, atol=1e-13)

    def test_warns_when_ball_excludes_solution(self):
        with warnings.catch_warnings(record=True) as rec:
            warnings.simplefilter("always")
            projected_step(IterateState.zeros(4, 2), self.sys, self.W, self.W, self.s, self.zero, 1e-9)
        assert any("radius" in str(w.message) for w in rec)

    def test_requires_heterogeneous(self):
        with pytest.raises(AlgorithmError):
            projected_step(IterateState.zeros(4, 2), random_instance(2, 4), self.W, self.W, self.s, self.zero, 1.0)


class TestRun:
    def setup_method(self):
        self.sys = random_instance(2, 4, seed=0)
        self.W = metropolis_weights(build_topology("ring", 4))

    def test_k0(self):
        traj = run(self.sys, self.W, self.W, StepSchedule(0.5, 0.1), iso_noise_model(2, 0.1), K=0)
        assert traj.k == [0]
        assert traj.V == [0.0]
        assert traj.consensus_sq == [0.0]

    def test_deterministic(self):
        args = (self.sys, self.W, self.W, StepSchedule(0.5, 0.1), iso_noise_model(2, 0.1))
        a = run(*args, K=3000, record_every=7, seed=11)
        b = run(*args, K=3000, record_every=7, seed=11)
        assert a.rows() == b.rows()
        c = run(*args, K=3000, record_every=7, seed=12)
        assert a.rows() != c.rows()

    def test_record_cadence(self):
        traj = run(self.sys, self.W, self.W, StepSchedule(0.5, 0.1), K=25, record_every=10)
        assert traj.k == [0, 10, 20, 25]

    def test_matches_step_matrix(self):
        s = StepSchedule(0.5, 0.1)
        traj = run(self.sys, self.W, self.W, s, K=40, record_every=1)
        state = IterateState.zeros(4, 2)
        z = np.zeros((4, 2))
        for _ in range(40):
            state = step_matrix(state, self.sys, self.W, self.W, s, z, z)
        np.testing.assert_allclose(traj.xbar[-1], state.X.mean(0), atol=1e-13)
        np.testing.assert_allclose(traj.ybar[-1], state.Y.mean(0), atol=1e-13)

    def test_zero_noise_scalar_converges(self):
        sys = scalar_system(1.0, 0.2, -0.2, 1.0, [1.0], [1.0])
        traj = run(sys, [[1.0]], [[1.0]], StepSchedule(1.0, 1.0), K=10_000, record_every=1000)
        assert traj.mse_weighted[-1] < 1e-3

    def test_divergence(self):
        sys = scalar_system(1.0, 0.0, 0.0, 1.0, [1.0], [1.0])
        with pytest.raises(DivergenceError) as exc:
            run(sys, [[1.0]], [[1.0]], StepSchedule(1e6, 1.0), K=100)
        assert exc.value.k >= 1

    def test_noise_dimension_mismatch(self):
        with pytest.raises(AlgorithmError):
            run(self.sys, self.W, self.W, StepSchedule(0.5, 0.1), iso_noise_model(3, 0.1), K=1)

    def test_heterogeneous_run(self):
        sys = random_heterogeneous_instance(2, 4, seed=1)
        traj = run(sys, self.W, self.W, StepSchedule(0.5, 0.1), K=200, radius=50.0)
        assert len(traj) == 201
        assert np.all(np.isfinite(traj.column("mse_weighted")))


class TestTrajectory:
    def test_csv_roundtrip(self, tmp_path):
        sys = random_instance(2, 4, seed=0)
        W = metropolis_weights(build_topology("ring", 4))
        traj = run(sys, W, W, StepSchedule(0.5, 0.1), iso_noise_model(2, 0.1), K=50, seed=2)
        traj.to_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == ",".join(TRAJECTORY_COLUMNS)
        back = Trajectory.from_csv(tmp_path / "t.csv")
        assert back.rows() == traj.rows()

    def test_json_roundtrip(self, tmp_path):
        sys = random_instance(2, 3, seed=0)
        W = metropolis_weights(build_topology("path", 3))
        traj = run(sys, W, W, StepSchedule(0.5, 0.1), K=20)
        traj.to_json(tmp_path / "t.json")
        import json

        back = Trajectory.from_dict(json.loads((tmp_path / "t.json").read_text()))
        assert back.rows() == traj.rows()
        np.testing.assert_array_equal(back.xbar[-1], traj.xbar[-1])

    def test_monotone_k(self):
        t = Trajectory()
        s = StepSchedule(0.5, 0.1)
        t.record(IterateState.zeros(2, 1), s, None)
        with pytest.raises(AlgorithmError):
            t.record(IterateState.zeros(2, 1), s, None)


class TestGTDSampler:
    def setup_method(self):
        rng = np.random.default_rng(0)
        P = rng.random((4, 4)) + 0.05
        P /= P.sum(axis=1, keepdims=True)
        self.sys = gtd_instance(P, rng.random((3, 4)), rng.standard_normal((4, 2)), 0.9)

    def test_expected_blocks(self):
        # enumerate transitions: E[sampled] must reproduce the system blocks
        smp = GTDSampler(self.sys, seed=0)
        g = self.sys.gtd
        acc = [np.zeros((2, 2)) for _ in range(3)] + [np.zeros((3, 2))]
        for s in range(4):
            for sn in range(4):
                w = g.pi[s] * g.P[s, sn]
                for a, blk in zip(acc, smp.sampled_blocks(s, sn)):
                    a += w * blk
        for got, want in zip(acc, (self.sys.A11, self.sys.A12, self.sys.A21, self.sys.b1)):
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_noise_is_deviation(self):
        smp = GTDSampler(self.sys, seed=1)
        state = random_state(np.random.default_rng(2), 3, 2)
        s, sn = 0, 0
        smp._buf = (np.array([s] * 1024), np.array([sn] * 1024))
        smp._pos = 0
        Xi, Psi = smp.next(state)
        a11, a12, a21, b1 = smp.sampled_blocks(s, sn)
        ex = state.X @ (a11 - self.sys.A11).T + state.Y @ (a12 - self.sys.A12).T - (b1 - self.sys.b1)
        ey = state.X @ (a21 - self.sys.A21).T
        np.testing.assert_allclose(Xi, ex, atol=1e-13)
        np.testing.assert_allclose(Psi, ey, atol=1e-13)

    def test_requires_gtd(self):
        with pytest.raises(AlgorithmError):
            GTDSampler(random_instance(2, 3), seed=0)
