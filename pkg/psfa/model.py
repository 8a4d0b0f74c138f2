"""
Data containers, hyperparameters and the variational state, plus the
synthetic benchmark generator and dataset standardisation.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, InvalidParameter, NonFiniteValue, ZeroVariance
from .numerics import digamma, draw_normal, draw_uniform

logger = logging.getLogger(__name__)

NOISE_VARIANCE_FLOOR = 1e-8
_MAX_REDRAW_ROUNDS = 10000


@dataclass(frozen=True)
class Dataset:
    """Per-subject data blocks X^(b), each V x T^(b)"""
    X: tuple

    def __post_init__(self):
        blocks = tuple(np.array(x, dtype=np.float64, order='F', ndmin=2) for x in self.X)
        if not blocks:
            raise DimensionError("dataset needs at least one subject")
        V = blocks[0].shape[0]
        for b, x in enumerate(blocks):
            if x.ndim != 2 or x.shape[0] != V or V < 1 or x.shape[1] < 1:
                raise DimensionError(f"subject {b} has shape {x.shape}, expected ({V}, T>=1)")
            if not np.all(np.isfinite(x)):
                raise NonFiniteValue(f"subject {b} contains non-finite values")
            x.setflags(write=False)
        object.__setattr__(self, 'X', blocks)

    @classmethod
    def from_arrays(cls, arrays):
        return cls(tuple(arrays))

    @property
    def V(self):
        return self.X[0].shape[0]

    @property
    def B(self):
        return len(self.X)

    @property
    def T(self):
        return tuple(x.shape[1] for x in self.X)

    def stacked(self):
        """Temporal concatenation [X^(1) ... X^(B)], V x sum(T)"""
        return np.hstack(self.X)

    def __repr__(self):
        return f"Dataset(V={self.V}, B={self.B}, T={self.T})"


@dataclass(frozen=True)
class Hyperparameters:
    """Gamma prior shapes/rates and the subject-mean precision beta"""
    a_alpha: float = 1e-6
    b_alpha: float = 1e-6
    a_gamma: float = 1e-6
    b_gamma: float = 1e-6
    a_tau: float = 1e-6
    b_tau: float = 1e-6
    beta: float = 1e-6

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if not value > 0:
                raise InvalidParameter(f"hyperparameter {name} must be > 0, got {value}")

    @classmethod
    def vague_defaults(cls):
        return cls()

    def as_dict(self):
        return {
            'a_alpha': self.a_alpha, 'b_alpha': self.b_alpha,
            'a_gamma': self.a_gamma, 'b_gamma': self.b_gamma,
            'a_tau': self.a_tau, 'b_tau': self.b_tau,
            'beta': self.beta,
        }


@dataclass
class VariationalState:
    """
    Moments of every factor of the mean-field posterior Q.

    Shapes: mu_A (V, D), Sigma_A (V, D, D), mu_S list of (D, T^(b)),
    Sigma_S (B, D, D), mu_mu / sigma_mu (V, B) or None, alpha_rate (V, D),
    gamma_rate (D,), tau_shape (B,), tau_rate (V, B).
    """
    mu_A: np.ndarray
    Sigma_A: np.ndarray
    mu_S: list
    Sigma_S: np.ndarray
    alpha_shape: float
    alpha_rate: np.ndarray
    gamma_shape: float
    gamma_rate: np.ndarray
    tau_shape: np.ndarray
    tau_rate: np.ndarray
    mu_mu: np.ndarray = None
    sigma_mu: np.ndarray = None
    # log|Sigma| caches filled by the updates that produce the covariances
    logdet_Sigma_A: np.ndarray = field(default=None, repr=False)
    logdet_Sigma_S: np.ndarray = field(default=None, repr=False)

    @property
    def V(self):
        return self.mu_A.shape[0]

    @property
    def D(self):
        return self.mu_A.shape[1]

    @property
    def B(self):
        return len(self.mu_S)

    @property
    def T(self):
        return tuple(s.shape[1] for s in self.mu_S)

    @property
    def model_mean(self):
        return self.mu_mu is not None

    # ----- expectations -----

    def E_alpha(self):
        return self.alpha_shape / self.alpha_rate

    def E_log_alpha(self):
        return digamma(self.alpha_shape) - np.log(self.alpha_rate)

    def E_gamma(self):
        return self.gamma_shape / self.gamma_rate

    def E_log_gamma(self):
        return digamma(self.gamma_shape) - np.log(self.gamma_rate)

    def E_tau(self):
        return self.tau_shape[None, :] / self.tau_rate

    def E_log_tau(self):
        return digamma(self.tau_shape)[None, :] - np.log(self.tau_rate)

    def E_a2(self):
        """<a_vd^2> = mu_A,vd^2 + Sigma_A^v[d, d]"""
        return self.mu_A ** 2 + np.diagonal(self.Sigma_A, axis1=1, axis2=2)

    def E_mu(self):
        if self.mu_mu is None:
            return np.zeros((self.V, self.B))
        return self.mu_mu

    def E_mu2(self):
        if self.mu_mu is None:
            return np.zeros((self.V, self.B))
        return self.mu_mu ** 2 + self.sigma_mu

    def copy(self):
        def _c(a):
            return None if a is None else np.array(a, copy=True)
        return replace(
            self,
            mu_A=_c(self.mu_A), Sigma_A=_c(self.Sigma_A),
            mu_S=[np.array(s, copy=True) for s in self.mu_S], Sigma_S=_c(self.Sigma_S),
            alpha_rate=_c(self.alpha_rate), gamma_rate=_c(self.gamma_rate),
            tau_shape=_c(self.tau_shape), tau_rate=_c(self.tau_rate),
            mu_mu=_c(self.mu_mu), sigma_mu=_c(self.sigma_mu),
            logdet_Sigma_A=_c(self.logdet_Sigma_A), logdet_Sigma_S=_c(self.logdet_Sigma_S),
        )

    # ----- flat array form used by checkpoints -----

    def to_arrays(self):
        arrays = {
            'mu_A': self.mu_A, 'Sigma_A': self.Sigma_A, 'Sigma_S': self.Sigma_S,
            'alpha_shape': np.array(self.alpha_shape), 'alpha_rate': self.alpha_rate,
            'gamma_shape': np.array(self.gamma_shape), 'gamma_rate': self.gamma_rate,
            'tau_shape': self.tau_shape, 'tau_rate': self.tau_rate,
        }
        for b, s in enumerate(self.mu_S):
            arrays[f'mu_S_{b}'] = s
        if self.mu_mu is not None:
            arrays['mu_mu'] = self.mu_mu
            arrays['sigma_mu'] = self.sigma_mu
        if self.logdet_Sigma_A is not None:
            arrays['logdet_Sigma_A'] = self.logdet_Sigma_A
        if self.logdet_Sigma_S is not None:
            arrays['logdet_Sigma_S'] = self.logdet_Sigma_S
        return arrays

    @classmethod
    def from_arrays(cls, arrays):
        B = arrays['Sigma_S'].shape[0]
        return cls(
            mu_A=np.array(arrays['mu_A']), Sigma_A=np.array(arrays['Sigma_A']),
            mu_S=[np.array(arrays[f'mu_S_{b}']) for b in range(B)],
            Sigma_S=np.array(arrays['Sigma_S']),
            alpha_shape=float(arrays['alpha_shape']), alpha_rate=np.array(arrays['alpha_rate']),
            gamma_shape=float(arrays['gamma_shape']), gamma_rate=np.array(arrays['gamma_rate']),
            tau_shape=np.array(arrays['tau_shape']), tau_rate=np.array(arrays['tau_rate']),
            mu_mu=np.array(arrays['mu_mu']) if 'mu_mu' in arrays else None,
            sigma_mu=np.array(arrays['sigma_mu']) if 'sigma_mu' in arrays else None,
            logdet_Sigma_A=np.array(arrays['logdet_Sigma_A']) if 'logdet_Sigma_A' in arrays else None,
            logdet_Sigma_S=np.array(arrays['logdet_Sigma_S']) if 'logdet_Sigma_S' in arrays else None,
        )


@dataclass(frozen=True)
class SyntheticTruth:
    """Ground truth behind a generated dataset"""
    A_true: np.ndarray
    S_true: tuple
    noise_variance: np.ndarray
    mask: np.ndarray


def generate_synthetic(rng, V=1000, T=25, B=3, D_true=3, sparsity=0.5,
                       noise_mean=0.009, noise_sd=0.002):
    """
    Generate a rank-D_true group dataset with sparse spatial maps.

    A_true has N(0, 1) entries multiplied by the indicator
    Uniform(0, 1) > sparsity; sources are N(0, 1); every voxel/subject pair
    gets its own noise variance from N(noise_mean, noise_sd), redrawn until
    it exceeds 1e-8 (noise_sd is a standard deviation).

    Draw order is fixed: A, mask, then each subject's sources, then all
    noise variances, then each subject's noise.
    """
    for name, value in (('V', V), ('T', T), ('B', B), ('D_true', D_true)):
        if int(value) != value or value < 1:
            raise InvalidParameter(f"{name} must be an integer >= 1, got {value}")
    if not 0.0 <= sparsity <= 1.0:
        raise InvalidParameter(f"sparsity must be in [0, 1], got {sparsity}")
    if not noise_mean > 0:
        raise InvalidParameter(f"noise_mean must be > 0, got {noise_mean}")
    if not noise_sd >= 0:
        raise InvalidParameter(f"noise_sd must be >= 0, got {noise_sd}")
    V, T, B, D_true = int(V), int(T), int(B), int(D_true)

    A = draw_normal(rng, 0.0, 1.0, V * D_true).reshape((V, D_true), order='F')
    mask = (draw_uniform(rng, V * D_true) > sparsity).astype(np.float64).reshape((V, D_true), order='F')
    A_true = A * mask
    S_true = tuple(draw_normal(rng, 0.0, 1.0, D_true * T).reshape((D_true, T), order='F')
                   for _ in range(B))

    if noise_sd == 0:
        noise_variance = np.full((V, B), float(noise_mean))
    else:
        noise_variance = draw_normal(rng, noise_mean, noise_sd, V * B).reshape((V, B), order='F')
        bad = np.flatnonzero((noise_variance <= NOISE_VARIANCE_FLOOR).ravel(order='F'))
        rounds = 0
        if bad.size:
            logger.warning("Redrawing %d non-positive noise variances", bad.size)
        while bad.size:
            rounds += 1
            if rounds > _MAX_REDRAW_ROUNDS:
                raise InvalidParameter("noise variance distribution yields no positive draws")
            flat = noise_variance.ravel(order='F')
            flat[bad] = draw_normal(rng, noise_mean, noise_sd, bad.size)
            noise_variance = flat.reshape((V, B), order='F')
            bad = bad[flat[bad] <= NOISE_VARIANCE_FLOOR]

    X = []
    for b in range(B):
        eps = draw_normal(rng, 0.0, 1.0, V * T).reshape((V, T), order='F')
        X.append(A_true @ S_true[b] + np.sqrt(noise_variance[:, b])[:, None] * eps)

    truth = SyntheticTruth(A_true=A_true, S_true=S_true, noise_variance=noise_variance, mask=mask)
    return Dataset(tuple(X)), truth


def demean_voxels(ds):
    """Subtract each voxel's temporal mean, separately per subject"""
    return Dataset(tuple(x - x.mean(axis=1, keepdims=True) for x in ds.X))


def zscore_subjects(ds):
    """Standardise each subject's whole V x T^(b) block to mean 0, variance 1"""
    out = []
    for b, x in enumerate(ds.X):
        centred = x - x.mean()
        sd = np.sqrt(np.mean(centred ** 2))
        if sd == 0:
            raise ZeroVariance(f"subject {b} has zero variance")
        out.append(centred / sd)
    return Dataset(tuple(out))
