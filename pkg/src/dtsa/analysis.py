"""Error metrics, finite-time bound evaluation and rate fitting."""

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AnalysisError",
    "BoundParams",
    "RateFit",
    "kstar",
    "constant_D",
    "make_bound_params",
    "consensus_residual",
    "consensus_sq",
    "weighted_mse",
    "lemma1_terms",
    "lemma1_bound",
    "lemma2_bound",
    "theorem1_bound",
    "fit_rate_exponent",
    "fit_lemma2_constants",
    "InequalityAuditor",
    "proof_inequality_audit",
    "sigma_power_threshold",
]

_LOG_MAX = math.log(np.finfo(float).max)


class AnalysisError(ValueError):
    pass


def kstar(alpha0, delta, sigma):
    """Smallest admissible burn-in ``ceil((alpha0 / (delta - sigma))^(3/2))``.

    After this many iterations ``sigma + 2 alpha_k <= delta``.
    """
    if not sigma < delta < 1.0:
        raise AnalysisError(f"delta must lie in (sigma, 1) = ({sigma}, 1), got {delta}")
    # guard ceil against round-off in an exact power (e.g. 1.0000000000000002)
    val = (alpha0 / (delta - sigma)) ** 1.5
    return max(1, math.ceil(val - 1e-12 * max(1.0, val)))


def constant_D(N, R, C, alpha0, delta, Kstar):
    """Consensus constant ``2 sqrt(N) (R + C) (6 alpha0 + 1) K*^(1/3) / (1 - delta)``."""
    if delta >= 1.0:
        raise AnalysisError("delta must be < 1")
    if Kstar < 1:
        raise AnalysisError("K* must be >= 1")
    return 2.0 * math.sqrt(N) * (R + C) * (6.0 * alpha0 + 1.0) * Kstar ** (1.0 / 3.0) / (1.0 - delta)


@dataclass(frozen=True)
class BoundParams:
    """Everything needed to evaluate the finite-time bounds.

    ``sigma_W`` and ``sigma_V`` default to ``sigma`` when not known
    separately; ``D0`` and ``D1`` are the constants of the centralized
    convergence bound and must be supplied (or fitted) by the caller.
    """

    sigma: float
    delta: float
    Kstar: int
    D: float
    R: float
    C: float
    N: int
    alpha0: float
    beta0: float
    D0: float = 0.0
    D1: float = 0.0
    sigma_W: float = None
    sigma_V: float = None

    def __post_init__(self):
        if not 0.0 <= self.sigma < 1.0:
            raise AnalysisError(f"sigma must lie in [0, 1), got {self.sigma}")
        if not self.sigma < self.delta < 1.0:
            raise AnalysisError(f"delta must lie in (sigma, 1), got {self.delta}")
        if self.Kstar < kstar(self.alpha0, self.delta, self.sigma):
            raise AnalysisError(f"K* = {self.Kstar} is below the admissible minimum")
        if self.sigma_W is None:
            object.__setattr__(self, "sigma_W", self.sigma)
        if self.sigma_V is None:
            object.__setattr__(self, "sigma_V", self.sigma)

    def alpha(self, k):
        return self.alpha0 / (k + 1) ** (2.0 / 3.0)

    def beta(self, k):
        return self.beta0 / (k + 1)

    def ratio(self, k):
        return (self.beta0 / self.alpha0) / (k + 1) ** (1.0 / 3.0)


def make_bound_params(sigma_W, sigma_V, alpha0, beta0, N, R, C, delta=None, Kstar=None, D0=0.0, D1=0.0):
    """Assemble :class:`BoundParams`, defaulting ``delta`` to ``(1 + sigma) / 2``."""
    sigma = max(sigma_W, sigma_V)
    if delta is None:
        delta = 0.5 * (1.0 + sigma)
    ks = kstar(alpha0, delta, sigma)
    if Kstar is None:
        Kstar = ks
    D = constant_D(N, R, C, alpha0, delta, Kstar)
    return BoundParams(sigma, delta, Kstar, D, R, C, N, alpha0, beta0, D0, D1, sigma_W, sigma_V)


def _disagreement(M):
    return M - M.mean(axis=0)


def consensus_residual(state, s):
    """``||Y - 1 ybar^T||_F + (beta_k / alpha_k) ||X - 1 xbar^T||_F``."""
    return float(np.linalg.norm(_disagreement(state.Y)) + s.ratio(state.k) * np.linalg.norm(_disagreement(state.X)))


def consensus_sq(state, s):
    """``sum_i ||y_i - ybar||^2 + (beta_k / alpha_k) ||x_i - xbar||^2``."""
    return float(np.sum(_disagreement(state.Y) ** 2) + s.ratio(state.k) * np.sum(_disagreement(state.X) ** 2))


def weighted_mse(state, sol, s):
    """Node-averaged ``||y_i - y*||^2 + (beta_k / alpha_k) ||x_i - x*||^2``."""
    ey = np.sum((state.Y - sol.y_star) ** 2)
    ex = np.sum((state.X - sol.x_star) ** 2)
    return float((ey + s.ratio(state.k) * ex) / state.X.shape[0])


def _exp_or_inf(log_val):
    return math.inf if log_val > _LOG_MAX else math.exp(log_val)


def _lemma1_constants(p):
    """``(common, log_first)`` with the ``k``-independent parts of both terms.

    ``log_first`` is ``None`` when the first term vanishes.
    """
    common = 8.0 * p.D ** 2 * p.beta0 * p.alpha0 / (1.0 - p.sigma) ** 2
    if common == 0.0 or p.Kstar <= 1 or p.sigma == 0.0:
        return common, None
    log_first = math.log(common) + 2.0 * math.log(math.log(p.Kstar)) - 2.0 * p.Kstar * math.log(p.sigma)
    return common, log_first


def _lemma1_eval(k, common, log_first):
    second = common / (k + 2) ** (5.0 / 3.0)
    if log_first is None:
        return 0.0, second
    return _exp_or_inf(log_first - (2.0 / 3.0) * math.log(k + 1)), second


def lemma1_terms(k, p):
    """The two terms of the pathwise consensus bound, evaluated in log space.

    The first term carries ``sigma^(-2 K*)`` and saturates at ``inf`` on
    overflow; it is zero when ``K* = 1`` or ``sigma = 0``.
    """
    return _lemma1_eval(k, *_lemma1_constants(p))


def lemma1_bound(k, p):
    first, second = lemma1_terms(k, p)
    return first + second


def lemma2_bound(k, D0, D1):
    """Centralized rate ``D0 / (k+1)^(2/3) + D1 ln(k+1) / (k+1)``."""
    if D0 < 0 or D1 < 0:
        raise AnalysisError("D0 and D1 must be nonnegative")
    return D0 / (k + 1) ** (2.0 / 3.0) + D1 * math.log(k + 1) / (k + 1)


def theorem1_bound(k, p):
    """Bound on the node-averaged weighted mean-square error.

    Twice the consensus bound divided by ``N`` plus twice the centralized
    bound with the supplied ``D0``, ``D1``.
    """
    return 2.0 / p.N * lemma1_bound(k, p) + 2.0 * lemma2_bound(k, p.D0, p.D1)


@dataclass(frozen=True)
class RateFit:
    exponent: float
    intercept: float
    r_squared: float
    window: tuple
    samples: int


def fit_rate_exponent(traj, metric="mse_weighted", window=(1e3, 1e5), min_samples=10):
    """Least-squares slope of ``log(metric)`` against ``log(k)``.

    ``traj`` is a :class:`~dtsa.algorithm.Trajectory` or a ``(k, values)``
    pair of arrays. Only records with ``window[0] <= k <= window[1]`` are
    used.
    """
    if isinstance(traj, tuple):
        ks, vals = (np.asarray(a, dtype=float) for a in traj)
    else:
        ks, vals = traj.column("k"), traj.column(metric)
    lo, hi = window
    sel = (ks >= lo) & (ks <= hi) & (ks > 0)
    ks, vals = ks[sel], vals[sel]
    if ks.size < min_samples:
        raise AnalysisError(f"only {ks.size} records in window {window}; need {min_samples}")
    if np.any(~(vals > 0)):
        raise AnalysisError(f"metric {metric!r} is not strictly positive over the window")
    lx, ly = np.log(ks), np.log(vals)
    xm, ym = lx.mean(), ly.mean()
    sxx = np.sum((lx - xm) ** 2)
    slope = float(np.sum((lx - xm) * (ly - ym)) / sxx)
    intercept = float(ym - slope * xm)
    ss_res = float(np.sum((ly - intercept - slope * lx) ** 2))
    ss_tot = float(np.sum((ly - ym) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else max(0.0, 1.0 - ss_res / ss_tot)
    return RateFit(slope, intercept, r2, (float(ks[0]), float(ks[-1])), int(ks.size))


def fit_lemma2_constants(ks, errors, grid=None):
    """Smallest ``(D0, D1)`` on a grid whose bound dominates a measured curve.

    "Smallest" means minimal ``D0 + D1`` among dominating pairs, ties broken
    by smaller ``D0``. Returns ``None`` if no grid pair dominates.
    """
    ks = np.asarray(ks, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if grid is None:
        grid = np.concatenate([[0.0], np.logspace(-6, 4, 101)])
    grid = np.sort(np.asarray(grid, dtype=float))
    f0 = 1.0 / (ks + 1) ** (2.0 / 3.0)
    f1 = np.log(ks + 1) / (ks + 1)
    best = None
    for d1 in grid:
        # minimal D0 for this D1, then snapped up to the grid
        need = np.max(np.where(f0 > 0, (errors - d1 * f1) / f0, 0.0))
        idx = np.searchsorted(grid, max(need, 0.0) * (1 - 1e-12), side="left")
        if idx >= grid.size:
            continue
        d0 = grid[idx]
        # relative slack absorbs round-off when the curve sits exactly on a grid pair
        if not np.all(d0 * f0 + d1 * f1 >= errors - 1e-12 * np.abs(errors)):
            continue
        cand = (d0 + d1, d0, d1)
        if best is None or cand < best:
            best = cand
    return None if best is None else (float(best[1]), float(best[2]))


class InequalityAuditor:
    """Check the per-step contraction inequalities along a run.

    Fed the Frobenius norms of the disagreement matrices before and after
    every step, it checks

    * fast: ``|Xh'| <= (sigma_W + a)|Xh| + a|Yh| + sqrt(N)(R+C) a``
    * slow: ``|Yh'| <= (sigma_V + b)|Yh| + b|Xh| + sqrt(N)(R+C) b``
    * residual, for ``k >= K*``: ``V_{k+1} <= sigma V_k + D b``
    * pathwise consensus bound at ``k + 1`` whenever it is finite

    Each comparison allows an additive slack of ``slack * (1 + |rhs|)``.
    Violations are counted separately before and after ``K*``.
    """

    def __init__(self, p, slack=1e-9, residual_checks=True):
        self.p = p
        self.slack = slack
        self.residual_checks = residual_checks
        self.offset = math.sqrt(p.N) * (p.R + p.C)
        self.steps = 0
        self.counts = {
            name: {"checked": 0, "violations": 0, "first_violation": None}
            for name in ("fast", "slow", "residual", "lemma1_pre_kstar", "lemma1_post_kstar")
        }
        self.max_lemma1_ratio = 0.0
        self._ratio0 = p.beta0 / p.alpha0
        self._lemma1 = _lemma1_constants(p)

    def _check(self, name, k, lhs, rhs):
        c = self.counts[name]
        c["checked"] += 1
        if lhs > rhs + self.slack * (1.0 + abs(rhs)):
            c["violations"] += 1
            if c["first_violation"] is None:
                c["first_violation"] = k

    def observe(self, k, xh, yh, xh1, yh1):
        p = self.p
        a = p.alpha0 / (k + 1) ** (2.0 / 3.0)
        b = p.beta0 / (k + 1)
        self.steps += 1
        self._check("fast", k, xh1, (p.sigma_W + a) * xh + a * yh + self.offset * a)
        self._check("slow", k, yh1, (p.sigma_V + b) * yh + b * xh + self.offset * b)
        if self.residual_checks and k >= p.Kstar:
            g0 = b / a
            g1 = self._ratio0 / (k + 2) ** (1.0 / 3.0)
            v0 = yh + g0 * xh
            v1 = yh1 + g1 * xh1
            self._check("residual", k, v1, p.sigma * v0 + p.D * b)
        if self.residual_checks:
            first, second = _lemma1_eval(k + 1, *self._lemma1)
            bound = first + second
            if math.isfinite(bound):
                lhs = yh1 * yh1 + self._ratio0 / (k + 2) ** (1.0 / 3.0) * xh1 * xh1
                name = "lemma1_post_kstar" if k + 1 >= p.Kstar else "lemma1_pre_kstar"
                self._check(name, k + 1, lhs, bound)
                if bound > 0:
                    self.max_lemma1_ratio = max(self.max_lemma1_ratio, lhs / bound)

    @property
    def violations(self):
        return sum(c["violations"] for c in self.counts.values())

    def report(self):
        return {
            "steps": self.steps,
            "checks": {k: dict(v) for k, v in self.counts.items()},
            "violations": self.violations,
            "max_lemma1_ratio": self.max_lemma1_ratio,
            "ok": self.violations == 0,
        }


def proof_inequality_audit(traj, p, slack=1e-9):
    """Run :class:`InequalityAuditor` over a trajectory recorded every step."""
    ks = traj.column("k")
    if ks.size >= 2 and np.any(np.diff(ks) != 1):
        raise AnalysisError("audit needs a trajectory recorded at every step")
    xh, yh = traj.column("xhat_norm"), traj.column("yhat_norm")
    aud = InequalityAuditor(p, slack)
    for i in range(ks.size - 1):
        aud.observe(int(ks[i]), xh[i], yh[i], xh[i + 1], yh[i + 1])
    return aud.report()


def sigma_power_threshold(sigma, k_cap=10**8):
    """Smallest ``k0 >= 1`` with ``sigma^k <= 1/(k+1)`` for every ``k >= k0``.

    ``k ln(sigma) + ln(k+1)`` is concave in ``k``, so past its maximum the
    first ``k`` meeting the inequality keeps meeting it; before the maximum
    it can only hold at ``k = 0``. The scan therefore stops at the first hit.
    """
    if not 0.0 < sigma < 1.0:
        raise AnalysisError(f"sigma must lie in (0, 1), got {sigma}")
    log_s = math.log(sigma)
    k = 1
    while k <= k_cap:
        if k * log_s + math.log(k + 1) <= 0.0:
            return k
        k += 1
    raise AnalysisError(f"no threshold below {k_cap}")
