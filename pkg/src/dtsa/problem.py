"""Block linear systems solved cooperatively by the network.

A :class:`BlockSystem` holds the 2x2 block matrix

    [[A11, A12],
     [A21, A22]]

shared by all nodes (or one per node in the heterogeneous variant) together
with per-node offsets ``b1[i]``, ``b2[i]``. The distributed iteration drives
every node to the root of the node-averaged system, which is what
:func:`exact_solution` returns by default.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import (
    NumericsError,
    as_matrix,
    frobenius_norm,
    inverse,
    min_real_eigenvalue,
    solve_linear,
)

__all__ = [
    "ProblemError",
    "BlockSystem",
    "GTDData",
    "Solution",
    "stacked_matrix",
    "schur_complement",
    "exact_solution",
    "random_instance",
    "random_heterogeneous_instance",
    "scale_to_assumption2",
    "stationary_distribution",
    "gtd_instance",
    "validate_assumptions",
    "gtd_consistency_check",
    "system_to_dict",
    "system_from_dict",
    "save_system",
    "load_system",
]

BLOCK_NAMES = ("A11", "A12", "A21", "A22")


class ProblemError(ValueError):
    pass


@dataclass(frozen=True)
class GTDData:
    """Markov reward process behind a GTD block system.

    ``features`` is ``S x d``, ``rewards`` is ``N x S``. Samples drawn from it
    are multiplied by the owning system's ``scale`` so their expectation is
    the (possibly rescaled) block system.
    """

    P: np.ndarray
    rewards: np.ndarray
    features: np.ndarray
    gamma: float
    pi: np.ndarray


@dataclass(frozen=True)
class BlockSystem:
    """Linear two-block system distributed over ``N`` nodes.

    Attributes
    ----------
    A11, A12, A21, A22 : ndarray, shape (d, d)
        Blocks of the system matrix. For heterogeneous systems these are the
        node averages of ``node_blocks``.
    b1, b2 : ndarray, shape (N, d)
        Row ``i`` is the offset known to node ``i``.
    R : float
        Bound on every ``||b1[i]||`` and ``||b2[i]||``.
    node_blocks : ndarray, shape (N, 4, d, d), optional
        Per-node ``(A11, A12, A21, A22)`` for the heterogeneous variant.
    scale : float
        Cumulative factor applied by :func:`scale_to_assumption2`.
    """

    A11: np.ndarray
    A12: np.ndarray
    A21: np.ndarray
    A22: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    R: float = None
    node_blocks: np.ndarray = None
    scale: float = 1.0
    gtd: GTDData = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        blocks = [as_matrix(getattr(self, n), n) for n in BLOCK_NAMES]
        d = blocks[0].shape[0]
        for name, blk in zip(BLOCK_NAMES, blocks):
            if blk.shape != (d, d):
                raise ProblemError(f"{name} has shape {blk.shape}, expected {(d, d)}")
        b1 = as_matrix(np.atleast_2d(self.b1), "b1")
        b2 = as_matrix(np.atleast_2d(self.b2), "b2")
        if b1.shape[1] != d or b2.shape != b1.shape:
            raise ProblemError(f"b1/b2 must both be (N, {d}); got {b1.shape} and {b2.shape}")
        for name, arr in zip(BLOCK_NAMES + ("b1", "b2"), blocks + [b1, b2]):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.node_blocks is not None:
            nb = np.array(self.node_blocks, dtype=float)
            if nb.shape != (b1.shape[0], 4, d, d) or not np.all(np.isfinite(nb)):
                raise ProblemError(f"node_blocks must be finite with shape {(b1.shape[0], 4, d, d)}")
            nb.setflags(write=False)
            object.__setattr__(self, "node_blocks", nb)
        if self.R is None:
            object.__setattr__(self, "R", self.offset_bound())

    @property
    def d(self):
        return self.A11.shape[0]

    @property
    def N(self):
        return self.b1.shape[0]

    @property
    def heterogeneous(self):
        return self.node_blocks is not None

    def blocks(self):
        return self.A11, self.A12, self.A21, self.A22

    def offset_bound(self):
        """``max_i max(||b1[i]||, ||b2[i]||)``."""
        return float(max(np.max(np.linalg.norm(self.b1, axis=1)), np.max(np.linalg.norm(self.b2, axis=1))))

    def mean_b1(self):
        return self.b1.mean(axis=0)

    def mean_b2(self):
        return self.b2.mean(axis=0)


@dataclass(frozen=True)
class Solution:
    x_star: np.ndarray
    y_star: np.ndarray


def stacked_matrix(sys):
    return np.block([[sys.A11, sys.A12], [sys.A21, sys.A22]])


def schur_complement(sys):
    """``A22 - A21 A11^{-1} A12``."""
    return sys.A22 - sys.A21 @ solve_linear(sys.A11, sys.A12)


def exact_solution(sys, convention="mean"):
    """Root of the block system by Schur-complement elimination.

    Parameters
    ----------
    sys : BlockSystem
    convention : {"mean", "sum"}
        ``"mean"`` uses the node-averaged offsets, the fixed point the
        distributed iteration converges to. ``"sum"`` uses the summed offsets;
        the two differ by a factor ``N``.
    """
    if convention == "mean":
        c1, c2 = sys.mean_b1(), sys.mean_b2()
    elif convention == "sum":
        c1, c2 = sys.b1.sum(axis=0), sys.b2.sum(axis=0)
    else:
        raise ProblemError(f"unknown convention {convention!r}")
    try:
        a11_inv_a12 = solve_linear(sys.A11, sys.A12)
        a11_inv_c1 = solve_linear(sys.A11, c1)
        delta = sys.A22 - sys.A21 @ a11_inv_a12
        y = solve_linear(delta, c2 - sys.A21 @ a11_inv_c1)
    except NumericsError as exc:
        raise ProblemError(f"block system is singular: {exc}") from exc
    x = a11_inv_c1 - a11_inv_a12 @ y
    rhs = np.concatenate([c1, c2])
    resid = np.linalg.norm(stacked_matrix(sys) @ np.concatenate([x, y]) - rhs)
    if resid > 1e-9 * (1.0 + np.linalg.norm(rhs)):
        raise ProblemError(f"solution residual {resid:.3e} too large; system is ill-conditioned")
    return Solution(x, y)


def scale_to_assumption2(sys):
    """Rescale blocks and offsets so every block has Frobenius norm <= 1.

    All blocks and offsets are multiplied by the same factor
    ``c = 1 / max(1, max ||A_ij||)``, which leaves the solution unchanged and
    keeps positive stability. Returns ``(scaled_system, c)``.
    """
    norms = [frobenius_norm(b) for b in sys.blocks()]
    if sys.heterogeneous:
        norms.extend(frobenius_norm(b) for b in sys.node_blocks.reshape(-1, sys.d, sys.d))
    c = 1.0 / max(1.0, max(norms))
    if c == 1.0:
        return replace(sys, R=sys.offset_bound()), 1.0
    scaled = replace(
        sys,
        A11=c * sys.A11,
        A12=c * sys.A12,
        A21=c * sys.A21,
        A22=c * sys.A22,
        b1=c * sys.b1,
        b2=c * sys.b2,
        node_blocks=None if sys.node_blocks is None else c * sys.node_blocks,
        scale=sys.scale * c,
        R=None,
    )
    return scaled, c


def _pd_matrix(rng, d, margin):
    m = rng.standard_normal((d, d)) / np.sqrt(d)
    return m.T @ m + margin * np.eye(d)


def random_instance(d, N, seed=0, delta_margin=0.5, offset_scale=1.0):
    """Random homogeneous system satisfying the stability and norm conditions.

    ``A11`` and the Schur complement are drawn as ``M^T M + margin I``; the
    coupling blocks are free Gaussians and ``A22`` is solved for. Gaussian
    entries have variance ``1/d``. The result is rescaled with :func:`scale_to_assumption2`.
    """
    if d < 1 or N < 1:
        raise ProblemError("d and N must be >= 1")
    if delta_margin <= 0:
        raise ProblemError("delta_margin must be positive")
    rng = np.random.default_rng(seed)
    a11 = _pd_matrix(rng, d, delta_margin)
    delta = _pd_matrix(rng, d, delta_margin)
    # entries scaled by 1/sqrt(d) so block spectra stay O(1) as d grows
    a12 = rng.standard_normal((d, d)) / np.sqrt(d)
    a21 = rng.standard_normal((d, d)) / np.sqrt(d)
    a22 = delta + a21 @ solve_linear(a11, a12)
    b1 = offset_scale * rng.standard_normal((N, d))
    b2 = offset_scale * rng.standard_normal((N, d))
    sys, _ = scale_to_assumption2(BlockSystem(a11, a12, a21, a22, b1, b2))
    return sys


def random_heterogeneous_instance(d, N, seed=0, delta_margin=0.5, spread=0.2):
    """Heterogeneous system: per-node blocks scattered around a random mean.

    Node perturbations are centred so the node average equals a homogeneous
    :func:`random_instance`.
    """
    base = random_instance(d, N, seed, delta_margin)
    rng = np.random.default_rng([seed, 1])
    noise = rng.standard_normal((N, 4, d, d))
    noise -= noise.mean(axis=0)
    mean_blocks = np.stack(base.blocks())
    nodes = mean_blocks[None] + spread * noise / np.sqrt(d)
    sys = replace(base, node_blocks=nodes)
    sys, _ = scale_to_assumption2(sys)
    return sys


def _strongly_connected(P):
    s = P.shape[0]
    reach = (P > 0) | np.eye(s, dtype=bool)
    for _ in range(int(np.ceil(np.log2(max(s, 2)))) + 1):
        reach = (reach.astype(int) @ reach.astype(int)) > 0
    return bool(np.all(reach))


def stationary_distribution(P, tol=1e-12):
    """Stationary distribution of an irreducible row-stochastic matrix."""
    P = as_matrix(P, "P")
    if P.shape[0] != P.shape[1]:
        raise ProblemError("transition matrix must be square")
    if np.any(P < 0) or np.max(np.abs(P.sum(axis=1) - 1.0)) > 1e-10:
        raise ProblemError("transition matrix must be row-stochastic")
    if not _strongly_connected(P):
        raise ProblemError("Markov chain is reducible")
    vals, vecs = np.linalg.eig(P.T)
    idx = int(np.argmin(np.abs(vals - 1.0)))
    pi = np.real(vecs[:, idx])
    pi = pi / pi.sum()
    if np.any(pi < -tol) or np.max(np.abs(pi @ P - pi)) > 1e-10:
        # power-iteration fallback on the averaged chain (handles periodicity)
        lazy = 0.5 * (P + np.eye(P.shape[0]))
        pi = np.full(P.shape[0], 1.0 / P.shape[0])
        for _ in range(1_000_000):
            nxt = pi @ lazy
            if np.max(np.abs(nxt - pi)) <= tol:
                pi = nxt
                break
            pi = nxt
    return np.clip(pi, 0.0, None) / np.clip(pi, 0.0, None).sum()


def gtd_instance(P, rewards, features, gamma):
    """Expected GTD block system of a Markov reward process.

    Parameters
    ----------
    P : array_like, shape (S, S)
        Row-stochastic, irreducible transition matrix.
    rewards : array_like, shape (N, S)
        Per-agent reward of each state.
    features : array_like, shape (S, d)
        Feature table with full column rank.
    gamma : float
        Discount factor in ``(0, 1)`` (``0`` is accepted too).

    Notes
    -----
    With stationary distribution ``pi`` and ``phi'`` the next-state feature,

        A11 = E[phi phi^T],  A12 = E[phi (phi - gamma phi')^T],
        A21 = -A12^T,        A22 = 0,
        b1[i] = E[R_i phi],  b2[i] = 0.

    The returned system is not rescaled.
    """
    P = as_matrix(P, "P")
    phi = as_matrix(features, "features")
    rewards = as_matrix(np.atleast_2d(rewards), "rewards")
    S, d = phi.shape
    if P.shape != (S, S):
        raise ProblemError(f"P has shape {P.shape}, features imply {S} states")
    if rewards.shape[1] != S:
        raise ProblemError(f"rewards must be (N, {S}), got {rewards.shape}")
    if not 0.0 <= gamma < 1.0:
        raise ProblemError("gamma must lie in [0, 1)")
    if np.linalg.matrix_rank(phi) < d:
        raise ProblemError("features are rank deficient")
    pi = stationary_distribution(P)
    a11 = phi.T @ (pi[:, None] * phi)
    # E[phi(s) phi(s')^T] with s ~ pi, s' ~ P(s, .)
    cross = phi.T @ (pi[:, None] * P) @ phi
    a12 = a11 - gamma * cross
    if np.linalg.matrix_rank(a12) < d:
        raise ProblemError("A12 is singular")
    b1 = rewards @ (pi[:, None] * phi)
    b2 = np.zeros_like(b1)
    data = GTDData(P, rewards, phi, float(gamma), pi)
    return BlockSystem(a11, a12, -a12.T, np.zeros((d, d)), b1, b2, gtd=data)


def validate_assumptions(sys, R=None):
    """Report on the stability and boundedness conditions.

    The stability check runs on the (averaged) blocks. ``R`` defaults to the
    bound stored on the system.
    """
    R = sys.R if R is None else R
    report = {}
    try:
        lam11 = min_real_eigenvalue(sys.A11)
        lam_delta = min_real_eigenvalue(schur_complement(sys))
        ok1 = lam11 > 0 and lam_delta > 0
    except NumericsError as exc:
        lam11 = lam_delta = float("nan")
        ok1 = False
        report["error"] = str(exc)
    report["assumption1"] = {"ok": bool(ok1), "min_real_A11": lam11, "min_real_delta": lam_delta}
    norms = {n: frobenius_norm(b) for n, b in zip(BLOCK_NAMES, sys.blocks())}
    if sys.heterogeneous:
        norms["node_max"] = float(max(frobenius_norm(b) for b in sys.node_blocks.reshape(-1, sys.d, sys.d)))
    offsets = sys.offset_bound()
    ok2 = all(v <= 1.0 + 1e-12 for v in norms.values()) and offsets <= R * (1 + 1e-12)
    report["assumption2"] = {"ok": bool(ok2), "block_norms": norms, "max_offset_norm": offsets, "R": R}
    report["ok"] = bool(ok1 and ok2)
    return report


def gtd_consistency_check(sys, tol=1e-8):
    """Compare the closed-form GTD fixed point with the stacked-system solve.

    The closed form ``y = A12^{-1} mean(b1)``, ``x = A11^{-1}(A21^T y + mean(b1))``
    uses averaged rewards; the summed-offset solve differs by a factor ``N``.
    Both are reported, nothing is resolved.
    """
    b1 = sys.mean_b1()
    try:
        y_cf = solve_linear(sys.A12, b1)
    except NumericsError as exc:
        raise ProblemError(f"A12 is singular: {exc}") from exc
    x_cf = solve_linear(sys.A11, sys.A21.T @ y_cf + b1)
    mean_sol = exact_solution(sys, "mean")
    sum_sol = exact_solution(sys, "sum")
    diff_mean = float(np.linalg.norm(np.concatenate([x_cf - mean_sol.x_star, y_cf - mean_sol.y_star])))
    diff_sum = float(np.linalg.norm(np.concatenate([x_cf - sum_sol.x_star, y_cf - sum_sol.y_star])))
    ny = float(np.linalg.norm(y_cf))
    ratio = float(np.linalg.norm(sum_sol.y_star) / ny) if ny > 0 else float("nan")
    return {
        "closed_form": Solution(x_cf, y_cf),
        "diff_vs_mean_convention": diff_mean,
        "diff_vs_sum_convention": diff_sum,
        "agrees_mean": diff_mean <= tol * (1 + ny),
        "agrees_sum": diff_sum <= tol * (1 + ny),
        "sum_to_closed_form_ratio": ratio,
        "N": sys.N,
    }


def system_to_dict(sys):
    doc = {
        "d": sys.d,
        "N": sys.N,
        "A11": sys.A11.ravel().tolist(),
        "A12": sys.A12.ravel().tolist(),
        "A21": sys.A21.ravel().tolist(),
        "A22": sys.A22.ravel().tolist(),
        "b1": sys.b1.tolist(),
        "b2": sys.b2.tolist(),
        "R": sys.R,
        "scale": sys.scale,
    }
    if sys.heterogeneous:
        doc["node_blocks"] = sys.node_blocks.reshape(sys.N, 4, -1).tolist()
    return doc


def system_from_dict(doc):
    d = int(doc["d"])
    blocks = [np.asarray(doc[n], dtype=float).reshape(d, d) for n in BLOCK_NAMES]
    nb = doc.get("node_blocks")
    if nb is not None:
        nb = np.asarray(nb, dtype=float).reshape(-1, 4, d, d)
    b1 = np.asarray(doc["b1"], dtype=float).reshape(-1, d)
    b2 = np.asarray(doc["b2"], dtype=float).reshape(-1, d)
    if "N" in doc and b1.shape[0] != int(doc["N"]):
        raise ProblemError(f"b1 has {b1.shape[0]} rows but N = {doc['N']}")
    return BlockSystem(*blocks, b1, b2, R=doc.get("R"), node_blocks=nb, scale=doc.get("scale", 1.0))


def save_system(sys, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(system_to_dict(sys), fh, indent=2)


def load_system(path):
    with open(path, encoding="utf-8") as fh:
        return system_from_dict(json.load(fh))
