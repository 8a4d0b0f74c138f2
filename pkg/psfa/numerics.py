"""
Dense linear algebra, special functions and seeded random draws used by
the variational updates, the ELBO and the synthetic data generator.

Storage convention: arrays are plain float64 numpy arrays; whenever values
are laid out in a flat buffer (files, checkpoints) the order is column-major
(row index fastest).
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy import special

from .errors import DimensionMismatch, DomainError, InvalidParameter, NonFiniteValue, NotPositiveDefinite

logger = logging.getLogger(__name__)

JITTER_SCALE = 1e-10
SYMMETRY_RTOL = 1e-12


def dense(values, name="matrix"):
    """Return ``values`` as a finite 2-D float64 array"""
    m = np.array(values, dtype=np.float64, order='F', ndmin=2)
    if m.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteValue(f"{name} contains non-finite values")
    return m


@dataclass(frozen=True)
class SymmetricPDFactor:
    """Lower Cholesky factor of a symmetric positive definite matrix"""
    dimension: int
    factor: np.ndarray
    log_det: float
    jittered: bool = False

    def reconstruct(self):
        return self.factor @ self.factor.T


def _check_symmetric(m):
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {m.shape}")
    scale = max(np.max(np.abs(m)), np.finfo(float).tiny)
    if np.max(np.abs(m - m.T)) > SYMMETRY_RTOL * scale:
        raise InvalidParameter("matrix is not symmetric")


def pd_factorize(m):
    """
    Cholesky-factorize a symmetric positive definite matrix.

    On failure the diagonal is lifted once by 1e-10 times its mean and the
    factorization retried; a second failure raises NotPositiveDefinite.
    """
    m = np.asarray(m, dtype=np.float64)
    _check_symmetric(m)
    jittered = False
    try:
        c, _ = linalg.cho_factor(m, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError):
        jitter = JITTER_SCALE * float(np.mean(np.diag(m)))
        logger.warning("Cholesky failed on %dx%d matrix, retrying with jitter %.3g",
                       m.shape[0], m.shape[1], jitter)
        try:
            c, _ = linalg.cho_factor(m + jitter * np.eye(m.shape[0]), lower=True)
        except (linalg.LinAlgError, ValueError) as e:
            raise NotPositiveDefinite(f"matrix is not positive definite: {e}") from None
        jittered = True
    L = np.tril(c)
    d = np.diag(L)
    if not np.all(d > 0):
        raise NotPositiveDefinite("non-positive pivot in Cholesky factor")
    return SymmetricPDFactor(dimension=m.shape[0], factor=L,
                             log_det=float(2.0 * np.sum(np.log(d))), jittered=jittered)


def pd_solve(f, rhs):
    """Solve ``m @ x = rhs`` given the factor of ``m``"""
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape[0] != f.dimension:
        raise DimensionMismatch(
            f"factor has dimension {f.dimension} but right-hand side has {rhs.shape[0]} rows")
    return linalg.cho_solve((f.factor, True), rhs)


def pd_inverse(f):
    inv = pd_solve(f, np.eye(f.dimension))
    return 0.5 * (inv + inv.T)


def pd_factorize_batch(stack):
    """
    Lower Cholesky factors of a (N, D, D) stack of SPD matrices.

    Returns ``(factors, log_dets)``. Matrices are factorized together; if any
    of them fails, each one goes through ``pd_factorize`` so the jitter
    policy applies per matrix.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 3 or stack.shape[1] != stack.shape[2]:
        raise DimensionMismatch(f"expected a (N, D, D) stack, got shape {stack.shape}")
    try:
        L = np.linalg.cholesky(stack)
    except np.linalg.LinAlgError:
        L = np.empty_like(stack)
        for i in range(stack.shape[0]):
            L[i] = pd_factorize(0.5 * (stack[i] + stack[i].T)).factor
    diag = np.diagonal(L, axis1=1, axis2=2)
    if not np.all(diag > 0):
        raise NotPositiveDefinite("non-positive pivot in batched Cholesky factor")
    return L, 2.0 * np.sum(np.log(diag), axis=1)


def pd_inverse_batch(stack):
    """Inverses of a (N, D, D) SPD stack and the log determinants of the inputs"""
    L, log_dets = pd_factorize_batch(stack)
    L_inv = np.linalg.solve(L, np.broadcast_to(np.eye(L.shape[1]), L.shape))
    inverses = np.matmul(np.swapaxes(L_inv, 1, 2), L_inv)
    return 0.5 * (inverses + np.swapaxes(inverses, 1, 2)), log_dets


def _positive_argument(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(arr > 0):  # also rejects NaN
        raise DomainError(f"{name} is defined here for x > 0 only")
    return arr


def digamma(x):
    """Digamma function psi(x) for x > 0"""
    arr = _positive_argument(x, "digamma")
    out = special.psi(arr)
    return float(out) if out.ndim == 0 else out


def lgamma(x):
    """log Gamma(x) for x > 0"""
    arr = _positive_argument(x, "lgamma")
    out = special.gammaln(arr)
    return float(out) if out.ndim == 0 else out


class SeededRng:
    """
    Reproducible random stream.

    Uniform draws come from numpy's Philox counter-based generator; normal
    draws use the Box-Muller transform on pairs of uniforms so the mapping
    from seed to values is fixed and documented. ``position`` counts the
    uniforms consumed so far.
    """

    def __init__(self, seed):
        if seed < 0 or seed >= 2 ** 64:
            raise InvalidParameter(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.position = 0
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def uniform(self, n):
        """n draws from Uniform[0, 1)"""
        self.position += int(n)
        return self._gen.random(int(n))

    def state(self):
        return {'seed': self.seed, 'position': self.position, 'algorithm': 'philox4x64+box-muller'}

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, position={self.position})"


def draw_uniform(rng, n):
    return rng.uniform(n)


def draw_normal(rng, mean, sd, n):
    """n draws from N(mean, sd^2) via Box-Muller"""
    if sd < 0:
        raise InvalidParameter(f"standard deviation must be >= 0, got {sd}")
    n = int(n)
    pairs = (n + 1) // 2
    u = rng.uniform(2 * pairs).reshape(pairs, 2)
    radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
    angle = 2.0 * np.pi * u[:, 1]
    z = np.column_stack((radius * np.cos(angle), radius * np.sin(angle))).ravel()[:n]
    return mean + sd * z
