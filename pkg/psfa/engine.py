"""
Coordinate-ascent variational inference for group-level probabilistic
sparse factor analysis (psFA) and its non-sparse ablation (pFA).

Model, per subject b and timepoint t:

    x_t^(b) ~ N(A s_t^(b) + mu^(b), diag(tau^(b))^-1)
    a_vd ~ N(0, 1/alpha_vd),  s_td^(b) ~ N(0, 1/gamma_d),  mu^(b) ~ N(0, I/beta)
    alpha, gamma, tau ~ Gamma(a, b)

Each update sets one factor of Q to its optimum given the moments of the
others, so the ELBO never decreases across a block. The cycle order is
A, S, mu (optional), alpha (psFA only), gamma, tau.
"""

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import fileio
from .errors import (AllRestartsFailed, ConfigError, InvalidParameter, NonFinite, NonPositiveRate, NumericError,
                     PsfaError, SingularInitialization, UsageError)
from .model import Hyperparameters, VariationalState
from .numerics import SeededRng, digamma, draw_normal, lgamma, pd_factorize, pd_inverse, pd_inverse_batch, pd_solve

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
MODELS = ('psfa', 'pfa')
FORMULA_FORMS = ('corrected', 'verbatim')
MAX_INIT_ATTEMPTS = 5
INIT_CONDITION_LIMIT = 1e12
DEAD_COMPONENT_SHARE = 0.01
PRUNE_MIN_R2 = 0.9
PRUNE_WEIGHT_CUTOFF = 0.05
RESUMABLE_OPTIONS = ('max_iters', 'threads')
ELBO_TERMS = (
    'log_likelihood', 'log_p_A', 'log_p_S', 'log_p_mu', 'log_p_alpha', 'log_p_gamma', 'log_p_tau',
    'entropy_A', 'entropy_S', 'entropy_mu', 'entropy_alpha', 'entropy_gamma', 'entropy_tau',
)


@dataclass(frozen=True)
class FitOptions:
    D: int = 6
    model: str = 'psfa'
    max_iters: int = 500
    rel_tol: float = 1e-9
    restarts: int = 1
    seed: int = 0
    model_mean: bool = False
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    elbo_every: int = 1
    check_monotone: bool = True
    alpha_rate_form: str = 'corrected'
    mean_cov_form: str = 'corrected'
    threads: int = 1
    prune_every: int = 25
    prune_refine: int = 100
    prune_attempts: int = 2

    def __post_init__(self):
        if self.D < 1:
            raise InvalidParameter(f"D must be >= 1, got {self.D}")
        if self.model not in MODELS:
            raise InvalidParameter(f"model must be one of {MODELS}, got {self.model!r}")
        if self.max_iters < 1:
            raise InvalidParameter(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.rel_tol > 0:
            raise InvalidParameter(f"rel_tol must be > 0, got {self.rel_tol}")
        if self.restarts < 1:
            raise InvalidParameter(f"restarts must be >= 1, got {self.restarts}")
        if self.elbo_every < 1:
            raise InvalidParameter(f"elbo_every must be >= 1, got {self.elbo_every}")
        if self.threads < 1:
            raise InvalidParameter(f"threads must be >= 1, got {self.threads}")
        if self.prune_every < 0:
            raise InvalidParameter(f"prune_every must be >= 0, got {self.prune_every}")
        if self.prune_refine < 1 or self.prune_attempts < 1:
            raise InvalidParameter("prune_refine and prune_attempts must be >= 1")
        for name in ('alpha_rate_form', 'mean_cov_form'):
            if getattr(self, name) not in FORMULA_FORMS:
                raise InvalidParameter(f"{name} must be one of {FORMULA_FORMS}")

    def as_dict(self):
        d = asdict(self)
        d['hyper'] = self.hyper.as_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d['hyper'] = Hyperparameters(**d.get('hyper', {}))
        return cls(**d)


@dataclass
class FitReport:
    elbo_trace: list
    elbo_terms: dict
    converged: bool
    iterations_run: int
    restart_index: int
    effective_components: int
    wall_seconds: float
    initial_elbo: float = None
    seed: int = None
    monotone_violations: int = 0
    deleted_components: int = 0
    restart_elbos: list = field(default_factory=list)
    failed_restarts: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def as_dict(self):
        return asdict(self)


# ----- moment identities -----

def expected_SSt(state, b):
    """<S^(b) S^(b)T> = sum_t mu_S,t mu_S,t^T + T^(b) Sigma_S^(b)"""
    mu = state.mu_S[b]
    out = mu @ mu.T + mu.shape[1] * state.Sigma_S[b]
    return 0.5 * (out + out.T)


def expected_AtTauA(state, b, E_tau=None):
    """<A^T diag(tau^(b)) A> = sum_v <tau_v> Sigma_A^v + <A>^T diag<tau^(b)> <A>"""
    tau = state.E_tau()[:, b] if E_tau is None else E_tau[:, b]
    out = np.einsum('v,vij->ij', tau, state.Sigma_A) + state.mu_A.T @ (tau[:, None] * state.mu_A)
    return 0.5 * (out + out.T)


def expected_residual_sq(state, ds):
    """
    <||x_v^(b) - A_v S^(b) - mu_v^(b) 1||^2> for every voxel and subject, (V, B).

    Uses trace(<a_v^T S S^T a_v>) = trace(<S S^T> Sigma_A^v) + <a_v>^T <S S^T> <a_v>.
    """
    out = np.empty((state.V, state.B))
    E_mu, E_mu2 = state.E_mu(), state.E_mu2()
    for b, X in enumerate(ds.X):
        T_b = X.shape[1]
        SSt = expected_SSt(state, b)
        projection = state.mu_A @ state.mu_S[b]
        r = np.sum(X ** 2, axis=1)
        r -= 2.0 * np.sum(projection * X, axis=1)
        r += np.einsum('vij,ji->v', state.Sigma_A, SSt)
        r += np.einsum('vi,ij,vj->v', state.mu_A, SSt, state.mu_A)
        if state.model_mean:
            r += T_b * E_mu2[:, b]
            r -= 2.0 * E_mu[:, b] * X.sum(axis=1)
            r += 2.0 * projection.sum(axis=1) * E_mu[:, b]
        out[:, b] = r
    return out


# ----- initialisation -----

def initialize(ds, opts, rng):
    """
    Draw <A> from N(0, 1), back-reconstruct the time courses by least
    squares, S^(b) = (A^T A)^-1 A^T X^(b), and set every Gamma factor to its
    prior. Covariances start at the identity.
    """
    V, B, D = ds.V, ds.B, opts.D
    h = opts.hyper
    for attempt in range(1, MAX_INIT_ATTEMPTS + 1):
        mu_A = draw_normal(rng, 0.0, 1.0, V * D).reshape((V, D), order='F')
        gram = mu_A.T @ mu_A
        if np.linalg.cond(gram) < INIT_CONDITION_LIMIT:
            break
        logger.warning("Initial spatial maps are singular (attempt %d/%d), redrawing",
                       attempt, MAX_INIT_ATTEMPTS)
    else:
        raise SingularInitialization(
            f"A^T A stayed singular after {MAX_INIT_ATTEMPTS} draws (V={V}, D={D})")

    factor = pd_factorize(0.5 * (gram + gram.T))
    mu_S = [pd_solve(factor, mu_A.T @ X) for X in ds.X]

    state = VariationalState(
        mu_A=mu_A,
        Sigma_A=np.tile(np.eye(D), (V, 1, 1)),
        mu_S=mu_S,
        Sigma_S=np.tile(np.eye(D), (B, 1, 1)),
        alpha_shape=float(h.a_alpha),
        alpha_rate=np.full((V, D), float(h.b_alpha)),
        gamma_shape=float(h.a_gamma),
        gamma_rate=np.full(D, float(h.b_gamma)),
        tau_shape=np.full(B, float(h.a_tau)),
        tau_rate=np.full((V, B), float(h.b_tau)),
        mu_mu=np.zeros((V, B)) if opts.model_mean else None,
        sigma_mu=np.ones((V, B)) if opts.model_mean else None,
        logdet_Sigma_A=np.zeros(V),
        logdet_Sigma_S=np.zeros(B),
    )
    return state


# ----- update blocks -----

def update_spatial_maps(state, ds, hyper=None):
    """Q(A): one D x D Gaussian per voxel"""
    V, D = state.V, state.D
    E_tau = state.E_tau()
    E_mu = state.E_mu()
    precision = np.zeros((V, D, D))
    idx = np.arange(D)
    precision[:, idx, idx] = state.E_alpha()
    rhs = np.zeros((V, D))
    for b, X in enumerate(ds.X):
        precision += E_tau[:, b, None, None] * expected_SSt(state, b)[None, :, :]
        residual = X - E_mu[:, b, None] if state.model_mean else X
        rhs += E_tau[:, b, None] * (residual @ state.mu_S[b].T)
    Sigma_A, logdet_precision = pd_inverse_batch(precision)
    mu_A = np.einsum('vij,vj->vi', Sigma_A, rhs)
    return replace(state, mu_A=mu_A, Sigma_A=Sigma_A, logdet_Sigma_A=-logdet_precision)


def update_time_courses(state, ds, hyper=None):
    """Q(S): one covariance per subject shared across timepoints"""
    E_tau = state.E_tau()
    E_mu = state.E_mu()
    E_gamma = state.E_gamma()
    mu_S, Sigma_S, logdet = [], np.empty_like(state.Sigma_S), np.empty(state.B)
    for b, X in enumerate(ds.X):
        precision = np.diag(E_gamma) + expected_AtTauA(state, b, E_tau)
        factor = pd_factorize(precision)
        Sigma_S[b] = pd_inverse(factor)
        logdet[b] = -factor.log_det
        residual = X - E_mu[:, b, None] if state.model_mean else X
        mu_S.append(pd_solve(factor, state.mu_A.T @ (E_tau[:, b, None] * residual)))
    return replace(state, mu_S=mu_S, Sigma_S=Sigma_S, logdet_Sigma_S=logdet)


def update_subject_means(state, ds, hyper, covariance_form='corrected'):
    """
    Q(mu^(b)): diagonal Gaussian per subject.

    The corrected precision is beta + T^(b) <tau_v^(b)>; the 'verbatim' form
    drops the T^(b) factor and is kept for comparison only.
    """
    if not state.model_mean:
        return state
    E_tau = state.E_tau()
    mu_mu = np.empty((state.V, state.B))
    sigma_mu = np.empty((state.V, state.B))
    for b, X in enumerate(ds.X):
        T_b = X.shape[1]
        scale = T_b if covariance_form == 'corrected' else 1.0
        sigma_mu[:, b] = 1.0 / (hyper.beta + scale * E_tau[:, b])
        residual_sum = X.sum(axis=1) - state.mu_A @ state.mu_S[b].sum(axis=1)
        mu_mu[:, b] = sigma_mu[:, b] * E_tau[:, b] * residual_sum
    return replace(state, mu_mu=mu_mu, sigma_mu=sigma_mu)


def update_alpha(state, hyper, rate_form='corrected'):
    """Q(alpha): per-entry ARD precisions on A"""
    weight = 0.5 if rate_form == 'corrected' else 1.0
    alpha_rate = hyper.b_alpha + weight * state.E_a2()
    return replace(state, alpha_shape=hyper.a_alpha + 0.5, alpha_rate=alpha_rate)


def update_gamma(state, hyper):
    """Q(gamma): per-component precisions on the time courses"""
    total_T = sum(state.T)
    trace = np.zeros(state.D)
    for b in range(state.B):
        trace += np.diag(expected_SSt(state, b))
    return replace(state, gamma_shape=hyper.a_gamma + 0.5 * total_T,
                   gamma_rate=hyper.b_gamma + 0.5 * trace)


def update_noise(state, ds, hyper):
    """Q(tau): per-voxel, per-subject noise precisions"""
    residual = expected_residual_sq(state, ds)
    tau_rate = hyper.b_tau + 0.5 * residual
    if not np.all(tau_rate > 0):
        raise NonPositiveRate("noise rate came out non-positive")
    tau_shape = hyper.a_tau + 0.5 * np.asarray(state.T, dtype=np.float64)
    return replace(state, tau_shape=tau_shape, tau_rate=tau_rate)


def update_cycle(state, ds, opts, observer=None):
    """
    One full coordinate-ascent cycle. ``observer(block_name, state)`` is
    called after every block when given.
    """
    hyper = opts.hyper
    blocks = [
        ('A', lambda s: update_spatial_maps(s, ds, hyper)),
        ('S', lambda s: update_time_courses(s, ds, hyper)),
    ]
    if opts.model_mean:
        blocks.append(('mu', lambda s: update_subject_means(s, ds, hyper, opts.mean_cov_form)))
    if opts.model == 'psfa':
        blocks.append(('alpha', lambda s: update_alpha(s, hyper, opts.alpha_rate_form)))
    blocks.append(('gamma', lambda s: update_gamma(s, hyper)))
    blocks.append(('tau', lambda s: update_noise(s, ds, hyper)))
    for name, update in blocks:
        state = update(state)
        if observer is not None:
            observer(name, state)
    return state


# ----- evidence lower bound -----

def _gamma_entropy(shape, rate):
    return lgamma(shape) - (shape - 1.0) * digamma(shape) - np.log(rate) + shape


def _gamma_log_prior(a, b, E, E_log):
    return -lgamma(a) + a * math.log(b) + (a - 1.0) * E_log - b * E


def _logdets(state):
    logdet_A = state.logdet_Sigma_A
    if logdet_A is None:
        logdet_A = np.linalg.slogdet(state.Sigma_A)[1]
    logdet_S = state.logdet_Sigma_S
    if logdet_S is None:
        logdet_S = np.linalg.slogdet(state.Sigma_S)[1]
    return logdet_A, logdet_S


def elbo(state, ds, hyper, opts=None):
    """
    Evidence lower bound and its per-term breakdown.

    The expected log-likelihood is included alongside the expected log
    priors and the entropies of every Q factor; Q(alpha) terms are
    evaluated at the current (possibly frozen) values.
    """
    model_mean = state.model_mean if opts is None else opts.model_mean
    V, D, B = state.V, state.D, state.B
    T = np.asarray(state.T, dtype=np.float64)
    E_tau, E_log_tau = state.E_tau(), state.E_log_tau()
    E_alpha, E_log_alpha = state.E_alpha(), state.E_log_alpha()
    E_gamma, E_log_gamma = state.E_gamma(), state.E_log_gamma()
    logdet_A, logdet_S = _logdets(state)
    terms = {}

    residual = expected_residual_sq(state, ds)
    terms['log_likelihood'] = float(np.sum(
        -0.5 * T[None, :] * LOG_2PI + 0.5 * T[None, :] * E_log_tau - 0.5 * E_tau * residual))

    terms['log_p_A'] = float(np.sum(-0.5 * LOG_2PI + 0.5 * E_log_alpha - 0.5 * E_alpha * state.E_a2()))

    log_p_S = 0.0
    for b in range(B):
        log_p_S += T[b] * (-0.5 * D * LOG_2PI + 0.5 * np.sum(E_log_gamma))
        log_p_S -= 0.5 * np.sum(E_gamma * np.diag(expected_SSt(state, b)))
    terms['log_p_S'] = float(log_p_S)

    if model_mean:
        terms['log_p_mu'] = float(np.sum(
            -0.5 * LOG_2PI + 0.5 * math.log(hyper.beta) - 0.5 * hyper.beta * state.E_mu2()))
    else:
        terms['log_p_mu'] = 0.0

    terms['log_p_alpha'] = float(np.sum(_gamma_log_prior(hyper.a_alpha, hyper.b_alpha, E_alpha, E_log_alpha)))
    terms['log_p_gamma'] = float(np.sum(_gamma_log_prior(hyper.a_gamma, hyper.b_gamma, E_gamma, E_log_gamma)))
    terms['log_p_tau'] = float(np.sum(_gamma_log_prior(hyper.a_tau, hyper.b_tau, E_tau, E_log_tau)))

    gauss_const = 0.5 * (1.0 + LOG_2PI)
    terms['entropy_A'] = float(np.sum(0.5 * logdet_A) + V * D * gauss_const)
    terms['entropy_S'] = float(np.sum(T * (0.5 * logdet_S + D * gauss_const)))
    if model_mean:
        terms['entropy_mu'] = float(np.sum(0.5 * np.log(state.sigma_mu) + gauss_const))
    else:
        terms['entropy_mu'] = 0.0
    terms['entropy_alpha'] = float(np.sum(_gamma_entropy(state.alpha_shape, state.alpha_rate)))
    terms['entropy_gamma'] = float(np.sum(_gamma_entropy(state.gamma_shape, state.gamma_rate)))
    terms['entropy_tau'] = float(np.sum(_gamma_entropy(state.tau_shape[None, :], state.tau_rate)))

    total = math.fsum(terms[k] for k in ELBO_TERMS)
    if not math.isfinite(total):
        bad = [k for k in ELBO_TERMS if not math.isfinite(terms[k])]
        raise NonFinite(f"ELBO is not finite (terms {', '.join(bad)})")
    return total, terms


# ----- component deletion -----

def _time_course_regression(state, j, others):
    """
    Least-squares weights w with s_j ~ sum_k w_k s_k over the concatenated
    subject time courses, and the fraction of ||s_j||^2 they explain.
    """
    target = np.concatenate([s[j] for s in state.mu_S])
    basis = np.concatenate([s[others] for s in state.mu_S], axis=1).T
    norm = float(target @ target)
    if norm <= 0:
        return np.zeros(len(others)), 0.0
    weights = np.linalg.lstsq(basis, target, rcond=None)[0]
    return weights, float((basis @ weights) @ target) / norm


def delete_component(state, j, others, weights, opts):
    """
    Switch component ``j`` off and fold its map into ``others``.

    With s_j ~ sum_k w_k s_k, adding a_j w_k to a_k keeps <A><S> close to
    what it was. Weights below PRUNE_WEIGHT_CUTOFF of the largest are
    dropped. Component j is left at zero mean with its variances at the
    prior limit, then Q(alpha) and Q(gamma) are refreshed.
    """
    hyper = opts.hyper
    others = np.asarray(others)
    weights = np.asarray(weights, dtype=np.float64)
    folded = np.abs(weights) >= PRUNE_WEIGHT_CUTOFF * np.max(np.abs(weights))
    mu_A = state.mu_A.copy()
    mu_A[:, others[folded]] += mu_A[:, j, None] * weights[folded][None, :]
    mu_A[:, j] = 0.0
    Sigma_A = state.Sigma_A.copy()
    Sigma_A[:, j, :] = 0.0
    Sigma_A[:, :, j] = 0.0
    Sigma_A[:, j, j] = hyper.b_alpha / (hyper.a_alpha + 0.5)
    mu_S = [s.copy() for s in state.mu_S]
    for s in mu_S:
        s[j] = 0.0
    Sigma_S = state.Sigma_S.copy()
    Sigma_S[:, j, :] = 0.0
    Sigma_S[:, :, j] = 0.0
    Sigma_S[:, j, j] = hyper.b_gamma / state.gamma_shape
    candidate = replace(state, mu_A=mu_A, Sigma_A=Sigma_A, mu_S=mu_S, Sigma_S=Sigma_S,
                        logdet_Sigma_A=None, logdet_Sigma_S=None)
    if opts.model == 'psfa':
        candidate = update_alpha(candidate, hyper, opts.alpha_rate_form)
    return update_gamma(candidate, hyper)


def try_component_deletions(state, ds, opts, current):
    """
    One round of deletion moves against the ELBO ``current`` of ``state``.

    Live components are tried from the smallest signal share up, and only
    when the others explain at least PRUNE_MIN_R2 of their time courses.
    Each candidate runs ``opts.prune_refine`` cycles and is accepted only
    if its ELBO beats ``current``; the round stops at the first acceptance
    or after ``opts.prune_attempts`` candidates.

    Returns ``(state, elbo, deleted)``; ``deleted`` is None when nothing
    was accepted.
    """
    energy = component_energy(state)
    total = energy.sum()
    if total <= 0:
        return state, current, None
    share = energy / total
    live = share > DEAD_COMPONENT_SHARE
    attempts = 0
    for j in np.argsort(share, kind='stable'):
        if attempts >= opts.prune_attempts:
            break
        if not live[j]:
            continue
        others = np.flatnonzero(live & (np.arange(state.D) != j))
        if others.size == 0:
            continue
        weights, r2 = _time_course_regression(state, j, others)
        if r2 < PRUNE_MIN_R2:
            continue
        attempts += 1
        candidate = delete_component(state, j, others, weights, opts)
        try:
            for _ in range(opts.prune_refine):
                candidate = update_cycle(candidate, ds, opts)
            value, _ = elbo(candidate, ds, opts.hyper, opts)
        except NumericError as e:
            logger.debug("Deletion of component %d abandoned: %s", j, e)
            continue
        if value > current:
            logger.info("Deleted component %d (share %.4f, R^2 %.3f): ELBO %.6f -> %.6f",
                        j, share[j], r2, current, value)
            return candidate, value, int(j)
        logger.debug("Deletion of component %d rejected: ELBO %.6f <= %.6f", j, value, current)
    return state, current, None


def _deletion_due(opts, iteration, converged):
    every = opts.prune_every
    if not every or iteration < 2 * every or iteration >= opts.max_iters:
        return False
    return converged or iteration % every == 0


# ----- fitting -----

def _relative_change(new, old):
    return abs(new - old) / max(abs(old), np.finfo(float).tiny)


def run_restart(ds, opts, restart_index, checkpoint=None, on_checkpoint=None, checkpoint_every=0):
    """
    Run one restart with seed ``opts.seed + restart_index``.

    ``checkpoint`` is a dict produced by an earlier ``on_checkpoint`` call
    and resumes the run from that iteration. Every ``opts.prune_every``
    iterations, and again on convergence, a round of component-deletion
    moves runs (see try_component_deletions); the first round waits for
    2 * prune_every iterations and none runs on the final iteration.
    Returns ``(state, report)``.
    """
    start = time.perf_counter()
    seed = opts.seed + restart_index
    if checkpoint is not None:
        state = checkpoint['state']
        trace = list(checkpoint['elbo_trace'])
        initial = checkpoint['initial_elbo']
        iteration = checkpoint['iteration']
        violations = checkpoint.get('monotone_violations', 0)
        converged = checkpoint.get('converged', False)
        deleted = checkpoint.get('deleted_components', 0)
        logger.info("Restart %d resumed at iteration %d", restart_index, iteration)
    else:
        state = initialize(ds, opts, SeededRng(seed))
        initial, _ = elbo(state, ds, opts.hyper, opts)
        trace, iteration, violations, converged, deleted = [], 0, 0, False, 0
        logger.info("Restart %d (seed %d) initial ELBO %.6f", restart_index, seed, initial)

    previous = trace[-1] if trace else initial
    while iteration < opts.max_iters and not converged:
        state = update_cycle(state, ds, opts)
        iteration += 1
        evaluated = iteration % opts.elbo_every == 0 or iteration == opts.max_iters
        if evaluated:
            value, _ = elbo(state, ds, opts.hyper, opts)
            trace.append(value)
            logger.debug("restart %d iter %d ELBO %.10g", restart_index, iteration, value)
            if opts.check_monotone and value < previous - 1e-8 * abs(previous):
                violations += 1
                logger.warning("ELBO decreased at iteration %d: %.10g -> %.10g",
                               iteration, previous, value)
            converged = _relative_change(value, previous) < opts.rel_tol
            previous = value
        if evaluated and _deletion_due(opts, iteration, converged):
            state, value, removed = try_component_deletions(state, ds, opts, previous)
            if removed is not None:
                # the entry for this iteration records the state carried forward
                trace[-1] = previous = value
                converged = False
                deleted += 1
        if on_checkpoint is not None and checkpoint_every and (
                iteration % checkpoint_every == 0 or converged or iteration == opts.max_iters):
            on_checkpoint(restart_index, {
                'state': state, 'elbo_trace': trace, 'initial_elbo': initial,
                'iteration': iteration, 'monotone_violations': violations,
                'converged': converged, 'deleted_components': deleted,
            })

    total, terms = elbo(state, ds, opts.hyper, opts)
    report = FitReport(
        elbo_trace=trace,
        elbo_terms=terms,
        converged=bool(converged),
        iterations_run=iteration,
        restart_index=restart_index,
        effective_components=effective_components(state),
        wall_seconds=time.perf_counter() - start,
        initial_elbo=initial,
        seed=seed,
        monotone_violations=violations,
        deleted_components=deleted,
    )
    logger.info("Restart %d finished: %d iterations, ELBO %.6f, converged=%s, %d components deleted",
                restart_index, iteration, total, converged, deleted)
    return state, report


def fit(ds, opts, checkpoint_dir=None, checkpoint_every=0, resume=False, progress=False):
    """
    Fit the model with ``opts.restarts`` independent restarts and return the
    state and report of the restart with the highest final ELBO.

    Restarts run on ``opts.threads`` workers; each restart is itself
    sequential, so the selected result does not depend on the worker count.
    A restart raising a psfa error is logged, recorded and skipped. With
    ``resume`` a restart continues from its checkpoint in ``checkpoint_dir``,
    which must have been written with the same options (see check_resumable).
    """
    start = time.perf_counter()
    restarts = range(opts.restarts)

    def _on_checkpoint(index, snapshot):
        fileio.write_checkpoint(snapshot, opts, checkpoint_path(checkpoint_dir, index))

    def _one(index):
        snapshot = None
        if resume and checkpoint_dir is not None:
            path = checkpoint_path(checkpoint_dir, index)
            if os.path.exists(path):
                snapshot = fileio.read_checkpoint(path)
                check_resumable(snapshot['options'], opts, path)
        try:
            return index, run_restart(
                ds, opts, index, checkpoint=snapshot,
                on_checkpoint=_on_checkpoint if checkpoint_dir is not None else None,
                checkpoint_every=checkpoint_every), None
        except PsfaError as e:
            logger.warning("Restart %d failed: %s", index, e)
            return index, None, f"{type(e).__name__}: {e}"

    if opts.threads > 1 and opts.restarts > 1:
        with ThreadPoolExecutor(max_workers=opts.threads) as pool:
            results = list(_progress(pool.map(_one, restarts), opts.restarts, progress))
    else:
        results = list(_progress(map(_one, restarts), opts.restarts, progress))

    failures = [(i, err) for i, res, err in results if res is None]
    finished = [(i, res) for i, res, err in results if res is not None]
    if not finished:
        raise AllRestartsFailed(failures)

    restart_elbos = [(i, res[1].elbo_trace[-1] if res[1].elbo_trace else res[1].initial_elbo)
                     for i, res in finished]
    # ties resolve to the lowest restart index
    best_index = max(restart_elbos, key=lambda pair: (pair[1], -pair[0]))[0]
    state, report = dict(finished)[best_index]
    report.restart_elbos = [{'restart': i, 'elbo': e} for i, e in restart_elbos]
    report.failed_restarts = [{'restart': i, 'error': err} for i, err in failures]
    report.wall_seconds = time.perf_counter() - start
    if opts.model == 'pfa':
        report.notes.append("pFA: Q(alpha) frozen at its prior; ELBO not comparable with psFA runs")
    return state, report


def _progress(iterable, total, enabled):
    if not enabled:
        return iterable
    from tqdm import tqdm
    return tqdm(iterable, total=total, desc="restarts", unit="restart")


def checkpoint_path(directory, restart_index):
    return os.path.join(directory, f"checkpoint_r{restart_index:03d}.npz")


def check_resumable(stored, opts, path):
    """
    Raise ConfigError unless the options a checkpoint was written with
    match ``opts``. Only the RESUMABLE_OPTIONS may differ.
    """
    try:
        written = FitOptions.from_dict(stored).as_dict()
    except (TypeError, UsageError) as e:
        raise ConfigError(f"checkpoint {path} has unreadable options: {e}") from e
    current = opts.as_dict()
    changed = sorted(k for k in current if k not in RESUMABLE_OPTIONS and written[k] != current[k])
    if changed:
        raise ConfigError(
            f"checkpoint {path} was written with different options ({', '.join(changed)}); "
            f"only {', '.join(RESUMABLE_OPTIONS)} may change on resume")


# ----- post-fit -----

def reconstruct(state, b):
    """Posterior-mean reconstruction <A><S^(b)> + <mu^(b)>, V x T^(b)"""
    out = state.mu_A @ state.mu_S[b]
    if state.model_mean:
        out = out + state.mu_mu[:, b, None]
    return out


def component_energy(state):
    """Per-component signal variance sum_v <a_vd^2> * sum_b trace<s_d s_d^T>"""
    traces = np.zeros(state.D)
    for b in range(state.B):
        traces += np.diag(expected_SSt(state, b))
    return state.E_a2().sum(axis=0) * traces


def effective_components(state, threshold=DEAD_COMPONENT_SHARE):
    """Number of components whose share of the total signal variance exceeds ``threshold``"""
    energy = component_energy(state)
    total = energy.sum()
    if total <= 0:
        return 0
    return int(np.sum(energy / total > threshold))


def sort_components(state):
    """Reorder components by decreasing signal-variance share"""
    order = np.argsort(-component_energy(state), kind='stable')
    return replace(
        state,
        mu_A=state.mu_A[:, order],
        Sigma_A=state.Sigma_A[:, order][:, :, order],
        mu_S=[s[order] for s in state.mu_S],
        Sigma_S=state.Sigma_S[:, order][:, :, order],
        alpha_rate=state.alpha_rate[:, order],
        gamma_rate=state.gamma_rate[order],
    )
