"""Bounded zero-mean observation noise with a prescribed covariance.

Each node draws a vector ``u`` of independent fair signs and emits
``z = S u`` where ``S`` is the symmetric square root of the target covariance
``Gamma``. Then ``E[z] = 0``, ``E[z z^T] = S S^T = Gamma`` exactly and
``||z|| <= ||S||_2 sqrt(2d)`` surely. ``z`` is split into the fast-iterate
noise ``xi`` (first ``d`` entries) and the slow-iterate noise ``psi``.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import as_matrix

__all__ = ["NoiseError", "NoiseModel", "make_noise_model", "iso_noise_model", "NoiseStream",
           "sample_noise", "empirical_covariance"]

# streams draw their signs in blocks of this many iterations
CHUNK = 1024


class NoiseError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    d: int
    Gamma: np.ndarray
    sqrt_Gamma: np.ndarray
    C: float

    @property
    def is_zero(self):
        return not np.any(self.sqrt_Gamma)


def make_noise_model(gamma, sym_tol=1e-10, psd_tol=1e-10):
    """Build a :class:`NoiseModel` from a ``2d x 2d`` covariance."""
    g = as_matrix(gamma, "Gamma")
    n = g.shape[0]
    if g.shape != (n, n) or n % 2:
        raise NoiseError(f"Gamma must be square with even size, got {g.shape}")
    if np.max(np.abs(g - g.T), initial=0.0) > sym_tol:
        raise NoiseError("Gamma must be symmetric")
    vals, vecs = np.linalg.eigh(g)
    if vals.size and vals.min() < -psd_tol:
        raise NoiseError(f"Gamma is indefinite (min eigenvalue {vals.min():.3e})")
    vals = np.where(vals < 0.0, 0.0, vals)
    root = (vecs * np.sqrt(vals)) @ vecs.T
    root = 0.5 * (root + root.T)
    # exact for diagonal input; avoids eigh round-off in the common case
    if not np.any(g - np.diag(np.diag(g))):
        root = np.diag(np.sqrt(np.clip(np.diag(g), 0.0, None)))
    bound = np.linalg.norm(root, 2) * np.sqrt(n)
    # nudge up so float round-off in S @ u can never exceed the bound
    bound = float(bound * (1.0 + 1e-12))
    g = g.copy()
    g.setflags(write=False)
    root.setflags(write=False)
    return NoiseModel(n // 2, g, root, bound)


def iso_noise_model(d, variance):
    """Shorthand for ``variance * I`` on ``2d`` coordinates."""
    return make_noise_model(variance * np.eye(2 * d))


class NoiseStream:
    """Reproducible per-node noise for one simulation run.

    Node ``i`` owns its own random substream; the sample handed out at
    iteration ``k`` is the ``k``-th draw of that substream, so the noise of a
    given ``(node, iteration)`` pair does not depend on evaluation order
    elsewhere. Draws are buffered in chunks for speed.
    """

    def __init__(self, model, N, seed):
        self.model = model
        self.N = N
        children = np.random.SeedSequence(seed).spawn(N)
        self._rngs = [np.random.Generator(np.random.PCG64(c)) for c in children]
        self._buf = None
        self._pos = CHUNK
        self.k = 0

    def _refill(self):
        two_d = 2 * self.model.d
        signs = np.stack([
            rng.integers(0, 2, size=(CHUNK, two_d), dtype=np.int8) for rng in self._rngs
        ], axis=1)
        u = 2.0 * signs - 1.0
        self._buf = u @ self.model.sqrt_Gamma.T
        self._pos = 0

    def next_stacked(self):
        """Next iteration's noise as one ``N x 2d`` matrix ``[Xi Psi]``."""
        if self.model.is_zero:
            z = np.zeros((self.N, 2 * self.model.d))
        else:
            if self._pos >= CHUNK:
                self._refill()
            z = self._buf[self._pos]
            self._pos += 1
        self.k += 1
        return z

    def next(self):
        """Noise matrices ``(Xi, Psi)``, each ``N x d``, for the next iteration."""
        z = self.next_stacked()
        d = self.model.d
        return z[:, :d], z[:, d:]


def sample_noise(model, rng, N):
    """Draw one ``(xi, psi)`` pair for each of ``N`` nodes from ``rng``."""
    u = 2.0 * rng.integers(0, 2, size=(N, 2 * model.d)) - 1.0
    z = u @ model.sqrt_Gamma.T
    return [(row[:model.d].copy(), row[model.d:].copy()) for row in z]


def empirical_covariance(samples):
    """Second-moment matrix of stacked samples ``(xi; psi)``; mean not removed."""
    if len(samples) == 0:
        raise NoiseError("no samples")
    z = np.array([np.concatenate([xi, psi]) for xi, psi in samples])
    return z.T @ z / z.shape[0]
