"""Distributed two-time-scale iteration.

Every node ``i`` keeps a fast iterate ``x_i`` and a slow iterate ``y_i``. One
iteration mixes neighbour values through ``W`` (fast) and ``V`` (slow) and
takes a local correction step:

    x_i <- sum_j W_ij x_j - alpha_k (A11 x_i + A12 y_i - b1_i + xi_i)
    y_i <- sum_j V_ij y_j - beta_k  (A21 x_i + A22 y_i - b2_i + psi_i)

with ``alpha_k = alpha0 / (k+1)^(2/3)`` and ``beta_k = beta0 / (k+1)``.
Iterates are stored stacked, one node per row.
"""

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .analysis import consensus_residual, weighted_mse
from .noise import CHUNK, NoiseModel, NoiseStream
from .problem import exact_solution

__all__ = [
    "AlgorithmError",
    "DivergenceError",
    "StepSchedule",
    "IterateState",
    "Trajectory",
    "TRAJECTORY_COLUMNS",
    "step_sizes",
    "step",
    "step_matrix",
    "averaged_step",
    "projected_step",
    "GTDSampler",
    "run",
]

DIVERGENCE_LIMIT = 1e12
TRAJECTORY_COLUMNS = ("k", "alpha", "beta", "V", "consensus_sq", "mse_weighted", "xbar_err", "ybar_err")


class AlgorithmError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, k):
        self.k = k
        super().__init__(f"iterates diverged at k = {k}")


@dataclass(frozen=True)
class StepSchedule:
    """Step sizes ``alpha0 / (k+1)^(2/3)`` (fast) and ``beta0 / (k+1)`` (slow)."""

    alpha0: float
    beta0: float

    def __post_init__(self):
        if self.alpha0 <= 0 or self.beta0 <= 0:
            raise AlgorithmError("alpha0 and beta0 must be positive")

    @property
    def ordered(self):
        """Whether ``beta0 <= alpha0``, which makes ``beta_k / alpha_k <= 1``."""
        return self.beta0 <= self.alpha0

    def alpha(self, k):
        return self.alpha0 / (k + 1) ** (2.0 / 3.0)

    def beta(self, k):
        return self.beta0 / (k + 1)

    def sizes(self, k):
        return self.alpha(k), self.beta(k)

    def ratio(self, k):
        """``beta_k / alpha_k``."""
        return (self.beta0 / self.alpha0) / (k + 1) ** (1.0 / 3.0)


def step_sizes(s, k):
    if k < 0:
        raise AlgorithmError("k must be >= 0")
    return s.sizes(k)


@dataclass(frozen=True)
class IterateState:
    k: int
    X: np.ndarray
    Y: np.ndarray

    @classmethod
    def zeros(cls, N, d):
        return cls(0, np.zeros((N, d)), np.zeros((N, d)))


def _mat(w):
    return np.asarray(getattr(w, "matrix", w), dtype=float)


def _check_dims(state, sys, W, V):
    N, d = sys.N, sys.d
    if state.X.shape != (N, d) or state.Y.shape != (N, d):
        raise AlgorithmError(f"iterates must be ({N}, {d}), got {state.X.shape} and {state.Y.shape}")
    if W.shape != (N, N) or V.shape != (N, N):
        raise AlgorithmError(f"weight matrices must be ({N}, {N})")


def step(state, sys, W, V, s, noise):
    """One iteration written node by node.

    ``noise`` is a sequence of ``N`` pairs ``(xi_i, psi_i)``. This is the
    literal form of the update and serves as the reference for
    :func:`step_matrix`.
    """
    W, V = _mat(W), _mat(V)
    _check_dims(state, sys, W, V)
    if len(noise) != sys.N:
        raise AlgorithmError(f"expected {sys.N} noise pairs, got {len(noise)}")
    alpha, beta = s.sizes(state.k)
    X, Y = state.X, state.Y
    X_new = np.empty_like(X)
    Y_new = np.empty_like(Y)
    for i in range(sys.N):
        xi, psi = noise[i]
        mix_x = sum(W[i, j] * X[j] for j in range(sys.N))
        mix_y = sum(V[i, j] * Y[j] for j in range(sys.N))
        X_new[i] = mix_x - alpha * (sys.A11 @ X[i] + sys.A12 @ Y[i] - sys.b1[i] + xi)
        Y_new[i] = mix_y - beta * (sys.A21 @ X[i] + sys.A22 @ Y[i] - sys.b2[i] + psi)
    return IterateState(state.k + 1, X_new, Y_new)


def step_matrix(state, sys, W, V, s, Xi, Psi):
    """Stacked form of :func:`step`; noise given as ``N x d`` matrices."""
    W, V = _mat(W), _mat(V)
    _check_dims(state, sys, W, V)
    if np.shape(Xi) != state.X.shape or np.shape(Psi) != state.Y.shape:
        raise AlgorithmError("noise matrices must match the iterate shape")
    alpha, beta = s.sizes(state.k)
    X, Y = state.X, state.Y
    X_new = W @ X - alpha * (X @ sys.A11.T + Y @ sys.A12.T - sys.b1 + Xi)
    Y_new = V @ Y - beta * (X @ sys.A21.T + Y @ sys.A22.T - sys.b2 + Psi)
    return IterateState(state.k + 1, X_new, Y_new)


def averaged_step(xbar, ybar, sys, s, k, xi_bar, psi_bar):
    """Update of the node averages implied by a doubly stochastic step.

    Averaging the distributed update over nodes removes the mixing, leaving a
    centralized two-time-scale step on ``(xbar, ybar)`` with the averaged
    offsets and noise.
    """
    alpha, beta = s.sizes(k)
    xn = xbar - alpha * (sys.A11 @ xbar + sys.A12 @ ybar - sys.mean_b1() + xi_bar)
    yn = ybar - beta * (sys.A21 @ xbar + sys.A22 @ ybar - sys.mean_b2() + psi_bar)
    return xn, yn


def _project_rows(M, radius):
    if not math.isfinite(radius):
        return M
    norms = np.linalg.norm(M, axis=1, keepdims=True)
    factor = np.where(norms > radius, radius / np.where(norms > 0, norms, 1.0), 1.0)
    return M * factor


def projected_step(state, sys, W, V, s, noise, radius, solution=None):
    """Heterogeneous update followed by projection onto a ball.

    Node ``i`` uses its own blocks ``sys.node_blocks[i]``. Each row of the new
    ``X`` and ``Y`` is projected onto the origin-centred Euclidean ball of the
    given radius; ``radius=math.inf`` disables the projection. A warning is
    issued when the ball does not strictly contain the solution.
    """
    if not sys.heterogeneous:
        raise AlgorithmError("projected_step needs a heterogeneous system")
    W, V = _mat(W), _mat(V)
    _check_dims(state, sys, W, V)
    if solution is None:
        solution = exact_solution(sys)
    if radius <= max(np.linalg.norm(solution.x_star), np.linalg.norm(solution.y_star)):
        warnings.warn("projection radius does not strictly contain the solution", stacklevel=2)
    Xi = np.array([n[0] for n in noise]).reshape(state.X.shape)
    Psi = np.array([n[1] for n in noise]).reshape(state.Y.shape)
    X_new, Y_new = _hetero_update(state, sys, W, V, s, Xi, Psi)
    return IterateState(state.k + 1, _project_rows(X_new, radius), _project_rows(Y_new, radius))


def _hetero_update(state, sys, W, V, s, Xi, Psi):
    alpha, beta = s.sizes(state.k)
    X, Y = state.X, state.Y
    nb = sys.node_blocks
    fx = np.einsum("nij,nj->ni", nb[:, 0], X) + np.einsum("nij,nj->ni", nb[:, 1], Y)
    fy = np.einsum("nij,nj->ni", nb[:, 2], X) + np.einsum("nij,nj->ni", nb[:, 3], Y)
    X_new = W @ X - alpha * (fx - sys.b1 + Xi)
    Y_new = V @ Y - beta * (fy - sys.b2 + Psi)
    return X_new, Y_new


class GTDSampler:
    """Sample-driven GTD noise from a shared Markov environment.

    At every iteration one transition ``s ~ pi``, ``s' ~ P(s, .)`` is drawn
    and observed by all agents. The sampled blocks minus their expectations,
    applied to the current iterates, give the noise matrices. The noise is
    iterate dependent, so it is not covered by the bounded-noise model.
    """

    def __init__(self, sys, seed):
        if sys.gtd is None:
            raise AlgorithmError("system was not built by gtd_instance")
        self.sys = sys
        g = sys.gtd
        S = g.P.shape[0]
        self._rng = np.random.default_rng(seed)
        self._cum_pi = np.cumsum(g.pi)
        self._cum_P = np.cumsum(g.P, axis=1)
        mean_AT = np.block([[sys.A11, sys.A12], [sys.A21, sys.A22]]).T
        mean_B = np.hstack([sys.b1, sys.b2])
        # deviations of the sampled blocks from their expectations, per transition
        self._dAT = np.empty((S, S) + mean_AT.shape)
        self._dB = np.empty((S,) + mean_B.shape)
        for s in range(S):
            a11, a12, a21, b1 = self.sampled_blocks(s, s)
            self._dB[s] = np.hstack([b1, np.zeros_like(b1)]) - mean_B
            for sn in range(S):
                a11, a12, a21, _ = self.sampled_blocks(s, sn)
                zero = np.zeros_like(a11)
                self._dAT[s, sn] = np.block([[a11, a12], [a21, zero]]).T - mean_AT
        self._buf = None
        self._pos = CHUNK

    def _refill(self):
        u = self._rng.random((CHUNK, 2))
        last = len(self._cum_pi) - 1
        s = np.minimum(np.searchsorted(self._cum_pi, u[:, 0], side="right"), last)
        s_next = (u[:, 1][:, None] >= self._cum_P[s]).sum(axis=1)
        self._buf = (s, np.minimum(s_next, last))
        self._pos = 0

    def next_transition(self):
        if self._pos >= CHUNK:
            self._refill()
        s, sn = self._buf[0][self._pos], self._buf[1][self._pos]
        self._pos += 1
        return int(s), int(sn)

    def sampled_blocks(self, s, s_next):
        """Scaled ``(A11, A12, A21, B1)`` for one observed transition."""
        g, c = self.sys.gtd, self.sys.scale
        phi, phin = g.features[s], g.features[s_next]
        a11 = c * np.outer(phi, phi)
        a12 = c * np.outer(phi, phi - g.gamma * phin)
        a21 = c * np.outer(g.gamma * phin - phi, phi)
        b1 = c * g.rewards[:, s][:, None] * phi[None, :]
        return a11, a12, a21, b1

    def next_stacked(self, Z):
        """Noise ``[Xi Psi]`` for stacked iterates ``Z = [X Y]``."""
        s, sn = self.next_transition()
        return Z @ self._dAT[s, sn] - self._dB[s]

    def next(self, state):
        d = self.sys.d
        noise = self.next_stacked(np.hstack([state.X, state.Y]))
        return noise[:, :d], noise[:, d:]


class _ZeroNoise:
    def __init__(self, N, d):
        self._z = np.zeros((N, 2 * d))
        self._d = d

    def next_stacked(self, Z):
        return self._z

    def next(self, state=None):
        return self._z[:, :self._d], self._z[:, self._d:]


class _ModelNoise:
    def __init__(self, model, N, seed):
        self._stream = NoiseStream(model, N, seed)

    def next_stacked(self, Z):
        return self._stream.next_stacked()

    def next(self, state=None):
        return self._stream.next()


class _UserNoise:
    """Adapter for caller-supplied sources exposing ``next(state) -> (Xi, Psi)``."""

    def __init__(self, source, k0):
        self._source = source
        self._k = k0
        self.d = None

    def next_stacked(self, Z):
        d = Z.shape[1] // 2
        Xi, Psi = self._source.next(IterateState(self._k, Z[:, :d], Z[:, d:]))
        self._k += 1
        return np.hstack([Xi, Psi])


@dataclass
class Trajectory:
    """Metrics recorded along one run, one entry per recorded iteration."""

    k: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    beta: list = field(default_factory=list)
    V: list = field(default_factory=list)
    consensus_sq: list = field(default_factory=list)
    mse_weighted: list = field(default_factory=list)
    xbar_err: list = field(default_factory=list)
    ybar_err: list = field(default_factory=list)
    xhat_norm: list = field(default_factory=list)
    yhat_norm: list = field(default_factory=list)
    xbar: list = field(default_factory=list)
    ybar: list = field(default_factory=list)

    def record(self, state, s, solution):
        k = state.k
        if self.k and k <= self.k[-1]:
            raise AlgorithmError("trajectory indices must be strictly increasing")
        alpha, beta = s.sizes(k)
        gamma = s.ratio(k)
        xbar = state.X.mean(axis=0)
        ybar = state.Y.mean(axis=0)
        xh = float(np.linalg.norm(state.X - xbar))
        yh = float(np.linalg.norm(state.Y - ybar))
        self.k.append(k)
        self.alpha.append(alpha)
        self.beta.append(beta)
        self.V.append(consensus_residual(state, s))
        self.consensus_sq.append(yh * yh + gamma * xh * xh)
        if solution is None:
            self.mse_weighted.append(math.nan)
            self.xbar_err.append(math.nan)
            self.ybar_err.append(math.nan)
        else:
            self.mse_weighted.append(weighted_mse(state, solution, s))
            self.xbar_err.append(float(np.sum((xbar - solution.x_star) ** 2)))
            self.ybar_err.append(float(np.sum((ybar - solution.y_star) ** 2)))
        self.xhat_norm.append(xh)
        self.yhat_norm.append(yh)
        self.xbar.append(xbar)
        self.ybar.append(ybar)

    def __len__(self):
        return len(self.k)

    def column(self, name):
        return np.asarray(getattr(self, name), dtype=float)

    def rows(self):
        cols = [getattr(self, c) for c in TRAJECTORY_COLUMNS]
        return list(zip(*cols))

    def to_csv(self, path):
        write_csv(path, TRAJECTORY_COLUMNS, self.rows())

    def to_dict(self):
        doc = {c: [_num(v) for v in getattr(self, c)] for c in TRAJECTORY_COLUMNS}
        doc["xhat_norm"] = [_num(v) for v in self.xhat_norm]
        doc["yhat_norm"] = [_num(v) for v in self.yhat_norm]
        doc["xbar"] = [[_num(v) for v in row] for row in self.xbar]
        doc["ybar"] = [[_num(v) for v in row] for row in self.ybar]
        return doc

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, doc):
        t = cls()
        for name in TRAJECTORY_COLUMNS + ("xhat_norm", "yhat_norm"):
            if name in doc:
                setattr(t, name, [int(v) if name == "k" else float(v) for v in doc[name]])
        t.xbar = [np.asarray(r, dtype=float) for r in doc.get("xbar", [])]
        t.ybar = [np.asarray(r, dtype=float) for r in doc.get("ybar", [])]
        return t

    @classmethod
    def from_csv(cls, path):
        t = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                for name in TRAJECTORY_COLUMNS:
                    getattr(t, name).append(int(row[name]) if name == "k" else float(row[name]))
        return t


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else None


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    # repr gives the shortest round-trip decimal
    return repr(float(v))


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _disagreement_norms(H, d):
    col = np.einsum("ij,ij->j", H, H)
    return math.sqrt(col[:d].sum()), math.sqrt(col[d:].sum())


def run(sys, W, V, s, noise=None, K=1000, record_every=1, seed=0, solution=None,
        auditor=None, radius=math.inf, init=None):
    """Simulate ``K`` iterations from zero initial iterates.

    Parameters
    ----------
    sys : BlockSystem
    W, V : WeightMatrix or ndarray
        Fast and slow mixing matrices.
    s : StepSchedule
    noise : NoiseModel, GTDSampler, "gtd" or None
        Observation noise. ``None`` runs noiselessly; ``"gtd"`` draws
        transitions from the system's Markov reward process.
    K : int
        Number of iterations.
    record_every : int
        Recording cadence; iterations 0 and ``K`` are always recorded.
    seed : int
        Seed of the noise streams.
    solution : Solution, optional
        Reference root for error metrics, default :func:`exact_solution`.
    auditor : object, optional
        Receives ``observe(k, xhat_k, yhat_k, xhat_k1, yhat_k1)`` with the
        Frobenius norms of the disagreement matrices before and after every
        step.
    radius : float
        Projection radius for heterogeneous systems.
    init : IterateState, optional
        Starting point; the default is all zeros.

    Returns
    -------
    Trajectory

    Raises
    ------
    DivergenceError
        If an iterate becomes non-finite or exceeds ``1e12`` in magnitude.
    """
    if K < 0:
        raise AlgorithmError("K must be >= 0")
    record_every = max(1, int(record_every))
    N, d = sys.N, sys.d
    Wm, Vm = _mat(W), _mat(V)
    state = init if init is not None else IterateState.zeros(N, d)
    _check_dims(state, sys, Wm, Vm)
    if solution is None:
        solution = exact_solution(sys)
    if noise is None:
        source = _ZeroNoise(N, d)
    elif isinstance(noise, NoiseModel):
        if noise.d != d:
            raise AlgorithmError(f"noise dimension {noise.d} does not match system dimension {d}")
        source = _ModelNoise(noise, N, seed)
    elif isinstance(noise, str) and noise == "gtd":
        source = GTDSampler(sys, seed)
    else:
        source = noise

    traj = Trajectory()
    traj.record(state, s, solution)
    if not isinstance(source, (_ZeroNoise, _ModelNoise, GTDSampler)):
        source = _UserNoise(source, state.k)
    hetero = sys.heterogeneous
    AT = np.block([[sys.A11, sys.A12], [sys.A21, sys.A22]]).T.copy()
    B = np.hstack([sys.b1, sys.b2])
    same_mixing = np.array_equal(Wm, Vm)
    # projector onto the disagreement subspace
    J = np.eye(N) - np.full((N, N), 1.0 / N)
    Z = np.hstack([state.X, state.Y])
    gains = np.empty(2 * d)
    k = state.k
    xh_prev = yh_prev = None
    if auditor is not None:
        xh_prev, yh_prev = _disagreement_norms(J @ Z, d)
    for _ in range(K):
        noise_z = source.next_stacked(Z)
        if hetero:
            cur = IterateState(k, Z[:, :d], Z[:, d:])
            X, Y = _hetero_update(cur, sys, Wm, Vm, s, noise_z[:, :d], noise_z[:, d:])
            Z = np.hstack([_project_rows(X, radius), _project_rows(Y, radius)])
        else:
            alpha, beta = s.sizes(k)
            gains[:d] = alpha
            gains[d:] = beta
            corr = (Z @ AT - B + noise_z) * gains
            if same_mixing:
                Z = Wm @ Z - corr
            else:
                Z = np.hstack([Wm @ Z[:, :d], Vm @ Z[:, d:]]) - corr
        k += 1
        if not np.abs(Z).max() < DIVERGENCE_LIMIT:
            raise DivergenceError(k)
        if auditor is not None:
            xh, yh = _disagreement_norms(J @ Z, d)
            auditor.observe(k - 1, xh_prev, yh_prev, xh, yh)
            xh_prev, yh_prev = xh, yh
        if k % record_every == 0 or k == state.k + K:
            traj.record(IterateState(k, Z[:, :d], Z[:, d:]), s, solution)
    return traj
