#!/usr/bin/env python3
"""
Tests for the variational updates, the ELBO and the fitting driver
"""

import math
import sys
from dataclasses import replace

import numpy as np
import pytest
from scipy import special, stats

import psfa.engine as engine
from psfa.engine import (FitOptions, delete_component, effective_components, elbo, expected_AtTauA,
                         expected_residual_sq, expected_SSt, fit, initialize, reconstruct, run_restart,
                         sort_components, try_component_deletions, update_alpha, update_cycle, update_gamma,
                         update_noise, update_spatial_maps, update_subject_means, update_time_courses)
from psfa.errors import AllRestartsFailed, ConfigError, InvalidParameter, SingularInitialization
from psfa.model import Dataset, Hyperparameters, VariationalState, generate_synthetic
from psfa.numerics import SeededRng

HYPER = Hyperparameters()
LOG_2PI = math.log(2 * math.pi)


def _scalar_problem():
    state = VariationalState(
        mu_A=np.array([[2.0]]), Sigma_A=np.array([[[0.5]]]),
        mu_S=[np.array([[3.0]])], Sigma_S=np.array([[[0.25]]]),
        alpha_shape=2.0, alpha_rate=np.array([[4.0]]),
        gamma_shape=3.0, gamma_rate=np.array([1.5]),
        tau_shape=np.array([2.0]), tau_rate=np.array([[0.5]]),
    )
    return state, Dataset((np.array([[5.0]]),))


def _small_synthetic(seed, V=20, T=6, B=2, D_true=2):
    ds, _ = generate_synthetic(SeededRng(seed), V=V, T=T, B=B, D_true=D_true)
    return ds


# ----- single-block updates -----

def test_scalar_spatial_map_update():
    state, ds = _scalar_problem()
    new = update_spatial_maps(state, ds, HYPER)
    # precision = <alpha> + <tau>(mu_s^2 + Sigma_s) = 0.5 + 4 * 9.25
    assert new.Sigma_A[0, 0, 0] == pytest.approx(1 / 37.5, rel=1e-12)
    assert new.mu_A[0, 0] == pytest.approx(60 / 37.5, rel=1e-12)
    assert new.logdet_Sigma_A[0] == pytest.approx(-math.log(37.5), rel=1e-12)


def test_scalar_time_course_update():
    state, ds = _scalar_problem()
    new = update_time_courses(state, ds, HYPER)
    assert new.Sigma_S[0, 0, 0] == pytest.approx(0.05, rel=1e-12)
    assert new.mu_S[0][0, 0] == pytest.approx(2.0, rel=1e-12)


def test_scalar_precision_updates():
    state, ds = _scalar_problem()
    a = update_alpha(state, HYPER)
    assert a.alpha_shape == pytest.approx(0.5 + 1e-6)
    assert a.alpha_rate[0, 0] == pytest.approx(2.25 + 1e-6, rel=1e-12)
    verbatim = update_alpha(state, HYPER, 'verbatim')
    assert verbatim.alpha_rate[0, 0] == pytest.approx(4.5 + 1e-6, rel=1e-12)

    g = update_gamma(state, HYPER)
    assert g.gamma_shape == pytest.approx(0.5 + 1e-6)
    assert g.gamma_rate[0] == pytest.approx(4.625 + 1e-6, rel=1e-12)

    n = update_noise(state, ds, HYPER)
    # (5 - 6)^2 + 4 * 0.25 + 9 * 0.5 + 0.5 * 0.25
    assert n.tau_rate[0, 0] == pytest.approx(1e-6 + 0.5 * 6.625, rel=1e-12)
    np.testing.assert_allclose(n.tau_shape, [0.5 + 1e-6])


# ----- degenerate moments -----

def test_time_courses_fall_back_to_the_prior_without_maps(make_dataset, make_state):
    ds = make_dataset(V=6, T=(4, 5))
    state = make_state(ds, D=3)
    state = replace(state, mu_A=np.zeros((6, 3)), Sigma_A=np.zeros((6, 3, 3)))
    new = update_time_courses(state, ds, HYPER)
    for b in range(2):
        np.testing.assert_array_equal(new.mu_S[b], 0.0)
        np.testing.assert_allclose(new.Sigma_S[b], np.diag(1.0 / state.E_gamma()), rtol=1e-12)
    np.testing.assert_allclose(new.logdet_Sigma_S, -np.sum(np.log(state.E_gamma())), rtol=1e-12)


def test_huge_ard_precision_shrinks_the_maps(make_dataset, make_state):
    ds = make_dataset(V=6, T=(4, 5))
    state = make_state(ds, D=3)
    new = update_spatial_maps(replace(state, alpha_rate=np.full((6, 3), 1e-12)), ds, HYPER)
    assert np.max(np.abs(new.mu_A)) < 1e-8
    assert np.max(np.abs(update_spatial_maps(state, ds, HYPER).mu_A)) > 1e-3


def test_subject_means_vanish(make_dataset, make_state):
    ds = make_dataset(V=6, T=(4, 5))
    state = make_state(ds, D=2, model_mean=True)
    stiff = update_subject_means(state, ds, Hyperparameters(beta=1e12))
    assert np.max(np.abs(stiff.mu_mu)) < 1e-9
    assert np.all(stiff.sigma_mu <= 1e-12)

    explained = Dataset(tuple(state.mu_A @ s for s in state.mu_S))
    new = update_subject_means(state, explained, HYPER)
    np.testing.assert_allclose(new.mu_mu, 0.0, atol=1e-10)


def test_zero_moments_leave_prior_rates(make_dataset, make_state):
    ds = make_dataset(V=6, T=(4, 5))
    state = make_state(ds, D=3)
    state = replace(state, mu_A=np.zeros((6, 3)), Sigma_A=np.zeros((6, 3, 3)),
                    mu_S=[np.zeros((3, 4)), np.zeros((3, 5))], Sigma_S=np.zeros((2, 3, 3)))
    g = update_gamma(state, HYPER)
    np.testing.assert_array_equal(g.gamma_rate, HYPER.b_gamma)
    assert g.gamma_shape == pytest.approx(HYPER.a_gamma + 4.5, rel=1e-12)

    silent = Dataset((np.zeros((6, 4)), np.zeros((6, 5))))
    n = update_noise(state, silent, HYPER)
    np.testing.assert_array_equal(n.tau_rate, HYPER.b_tau)
    np.testing.assert_allclose(n.tau_shape, [HYPER.a_tau + 2.0, HYPER.a_tau + 2.5])


def test_alpha_with_zero_second_moment():
    state, _ = _scalar_problem()
    state = replace(state, mu_A=np.zeros((1, 1)), Sigma_A=np.zeros((1, 1, 1)))
    new = update_alpha(state, HYPER)
    assert new.alpha_shape == pytest.approx(0.500001, rel=1e-15)
    assert new.E_alpha()[0, 0] == pytest.approx(5.00001e5, rel=1e-12)


def test_map_prior_term_at_unit_precision(make_dataset, make_state, monkeypatch):
    ds = make_dataset(V=5, T=(3, 4))
    state = make_state(ds, D=2)
    state = replace(state, mu_A=np.zeros((5, 2)), Sigma_A=np.zeros((5, 2, 2)), logdet_Sigma_A=np.zeros(5))
    monkeypatch.setattr(state, 'E_alpha', lambda: np.ones((5, 2)))
    monkeypatch.setattr(state, 'E_log_alpha', lambda: np.zeros((5, 2)))
    _, terms = elbo(state, ds, HYPER)
    assert terms['log_p_A'] == pytest.approx(-0.5 * 5 * 2 * LOG_2PI, rel=1e-14)


def test_unit_gamma_entropy(make_dataset, make_state):
    ds = make_dataset(V=5, T=(3, 4))
    state = replace(make_state(ds, D=4), gamma_shape=1.0, gamma_rate=np.ones(4))
    _, terms = elbo(state, ds, HYPER)
    assert terms['entropy_gamma'] == pytest.approx(4.0, rel=1e-14)


def test_subject_mean_forms(make_dataset, make_state):
    ds = make_dataset(V=5, T=(4, 6))
    state = make_state(ds, D=2, model_mean=True)
    corrected = update_subject_means(state, ds, HYPER)
    verbatim = update_subject_means(state, ds, HYPER, 'verbatim')
    E_tau = state.E_tau()
    np.testing.assert_allclose(corrected.sigma_mu[:, 1], 1 / (HYPER.beta + 6 * E_tau[:, 1]), rtol=1e-12)
    np.testing.assert_allclose(verbatim.sigma_mu[:, 1], 1 / (HYPER.beta + E_tau[:, 1]), rtol=1e-12)
    # no mean factor, no change
    plain = make_state(ds, D=2)
    assert update_subject_means(plain, ds, HYPER) is plain


def test_subject_mean_forms_agree_for_single_timepoint(make_dataset, make_state):
    ds = make_dataset(V=4, T=(1, 1))
    state = make_state(ds, D=2, model_mean=True)
    a = update_subject_means(state, ds, HYPER)
    b = update_subject_means(state, ds, HYPER, 'verbatim')
    np.testing.assert_array_equal(a.sigma_mu, b.sigma_mu)
    np.testing.assert_array_equal(a.mu_mu, b.mu_mu)


# ----- moment identities -----

def test_expected_SSt_identity(make_dataset, make_state):
    ds = make_dataset(V=6, T=(4, 9))
    state = make_state(ds, D=3)
    for b in range(ds.B):
        explicit = sum(np.outer(state.mu_S[b][:, t], state.mu_S[b][:, t]) + state.Sigma_S[b]
                       for t in range(ds.T[b]))
        np.testing.assert_allclose(expected_SSt(state, b), explicit, rtol=0, atol=1e-12 * np.abs(explicit).max())


def test_expected_AtTauA_identity(make_dataset, make_state):
    ds = make_dataset(V=6, T=(4, 9))
    state = make_state(ds, D=3)
    E_tau = state.E_tau()
    for b in range(ds.B):
        explicit = sum(E_tau[v, b] * (state.Sigma_A[v] + np.outer(state.mu_A[v], state.mu_A[v]))
                       for v in range(ds.V))
        np.testing.assert_allclose(expected_AtTauA(state, b), explicit, rtol=0,
                                   atol=1e-12 * np.abs(explicit).max())


@pytest.mark.parametrize('model_mean', [False, True])
def test_expected_residual_matches_elementwise(make_dataset, make_state, model_mean):
    ds = make_dataset(V=4, T=(3, 5))
    state = make_state(ds, D=2, model_mean=model_mean)
    got = expected_residual_sq(state, ds)
    for b, X in enumerate(ds.X):
        for v in range(ds.V):
            total = sum(_expected_sq_error(state, X, v, b, t) for t in range(ds.T[b]))
            assert got[v, b] == pytest.approx(total, rel=1e-11)


# ----- ELBO against a direct elementwise evaluation -----

def _expected_sq_error(state, X, v, b, t):
    a, s = state.mu_A[v], state.mu_S[b][:, t]
    SA, SS = state.Sigma_A[v], state.Sigma_S[b]
    m_mu = state.mu_mu[v, b] if state.model_mean else 0.0
    s_mu = state.sigma_mu[v, b] if state.model_mean else 0.0
    return ((X[v, t] - a @ s - m_mu) ** 2 + a @ SS @ a + s @ SA @ s + np.trace(SA @ SS) + s_mu)


def _gamma_prior(a, b, shape, rate):
    E, E_log = shape / rate, special.psi(shape) - math.log(rate)
    return a * math.log(b) - special.gammaln(a) + (a - 1) * E_log - b * E


def _naive_elbo_terms(state, ds, h):
    terms = dict.fromkeys(engine.ELBO_TERMS, 0.0)
    V, D = state.V, state.D
    for b, X in enumerate(ds.X):
        for v in range(V):
            shape, rate = state.tau_shape[b], state.tau_rate[v, b]
            E_log_tau = special.psi(shape) - math.log(rate)
            for t in range(X.shape[1]):
                terms['log_likelihood'] += (0.5 * E_log_tau - 0.5 * LOG_2PI
                                            - 0.5 * shape / rate * _expected_sq_error(state, X, v, b, t))
            terms['log_p_tau'] += _gamma_prior(h.a_tau, h.b_tau, shape, rate)
            terms['entropy_tau'] += stats.gamma(shape, scale=1 / rate).entropy()
            if state.model_mean:
                E_mu2 = state.mu_mu[v, b] ** 2 + state.sigma_mu[v, b]
                terms['log_p_mu'] += -0.5 * LOG_2PI + 0.5 * math.log(h.beta) - 0.5 * h.beta * E_mu2
                terms['entropy_mu'] += stats.norm(scale=math.sqrt(state.sigma_mu[v, b])).entropy()
        S_entropy = stats.multivariate_normal(mean=np.zeros(D), cov=state.Sigma_S[b]).entropy()
        for t in range(X.shape[1]):
            terms['entropy_S'] += S_entropy
            for d in range(D):
                shape, rate = state.gamma_shape, state.gamma_rate[d]
                E_s2 = state.mu_S[b][d, t] ** 2 + state.Sigma_S[b][d, d]
                terms['log_p_S'] += (-0.5 * LOG_2PI + 0.5 * (special.psi(shape) - math.log(rate))
                                     - 0.5 * shape / rate * E_s2)
    for v in range(V):
        terms['entropy_A'] += stats.multivariate_normal(mean=np.zeros(D), cov=state.Sigma_A[v]).entropy()
        for d in range(D):
            shape, rate = state.alpha_shape, state.alpha_rate[v, d]
            E_a2 = state.mu_A[v, d] ** 2 + state.Sigma_A[v][d, d]
            terms['log_p_A'] += (-0.5 * LOG_2PI + 0.5 * (special.psi(shape) - math.log(rate))
                                 - 0.5 * shape / rate * E_a2)
            terms['log_p_alpha'] += _gamma_prior(h.a_alpha, h.b_alpha, shape, rate)
            terms['entropy_alpha'] += stats.gamma(shape, scale=1 / rate).entropy()
    for d in range(D):
        terms['log_p_gamma'] += _gamma_prior(h.a_gamma, h.b_gamma, state.gamma_shape, state.gamma_rate[d])
        terms['entropy_gamma'] += stats.gamma(state.gamma_shape, scale=1 / state.gamma_rate[d]).entropy()
    return terms


@pytest.mark.parametrize('model_mean', [False, True])
def test_elbo_matches_elementwise_evaluation(make_dataset, make_state, model_mean):
    ds = make_dataset(V=4, T=(3, 3), seed=11)
    state = make_state(ds, D=2, seed=5, model_mean=model_mean)
    h = Hyperparameters(a_alpha=1.5, b_alpha=0.7, a_gamma=2.0, b_gamma=0.4, a_tau=1.2, b_tau=0.9, beta=0.3)
    total, terms = elbo(state, ds, h)
    expected = _naive_elbo_terms(state, ds, h)
    for key in engine.ELBO_TERMS:
        assert terms[key] == pytest.approx(expected[key], rel=1e-9, abs=1e-9), key
    assert total == pytest.approx(sum(expected.values()), rel=1e-9)


def test_elbo_uses_cached_logdets(make_dataset, make_state):
    ds = make_dataset(V=4, T=(3, 3))
    state = make_state(ds, D=2)
    cached = replace(state, logdet_Sigma_A=np.linalg.slogdet(state.Sigma_A)[1],
                     logdet_Sigma_S=np.linalg.slogdet(state.Sigma_S)[1])
    assert elbo(cached, ds, HYPER)[0] == pytest.approx(elbo(state, ds, HYPER)[0], rel=1e-12)


# ----- monotonicity -----

@pytest.mark.parametrize('seed', range(20))
def test_every_block_increases_elbo(seed):
    ds = _small_synthetic(seed)
    opts = FitOptions(D=3, model='psfa' if seed % 4 else 'pfa', model_mean=bool(seed % 2))
    state = initialize(ds, opts, SeededRng(seed + 100))
    values = [elbo(state, ds, opts.hyper, opts)[0]]
    steps = []

    def observe(name, s):
        values.append(elbo(s, ds, opts.hyper, opts)[0])
        steps.append(name)

    for _ in range(5):
        state = update_cycle(state, ds, opts, observer=observe)
    for i in range(1, len(values)):
        prev = values[i - 1]
        assert values[i] >= prev - 1e-9 * max(1.0, abs(prev)), f"block {steps[i - 1]} decreased the ELBO"


def test_cycle_block_order():
    ds = _small_synthetic(1)
    seen = []
    opts = FitOptions(D=2, model_mean=True)
    update_cycle(initialize(ds, opts, SeededRng(0)), ds, opts, observer=lambda name, s: seen.append(name))
    assert seen == ['A', 'S', 'mu', 'alpha', 'gamma', 'tau']
    seen.clear()
    opts = FitOptions(D=2, model='pfa')
    update_cycle(initialize(ds, opts, SeededRng(0)), ds, opts, observer=lambda name, s: seen.append(name))
    assert seen == ['A', 'S', 'gamma', 'tau']


def _warm_state(seed=3, model_mean=False):
    ds = _small_synthetic(seed)
    opts = FitOptions(D=3, model_mean=model_mean)
    state = initialize(ds, opts, SeededRng(seed))
    for _ in range(10):
        state = update_cycle(state, ds, opts)
    return ds, opts, state


def test_verbatim_alpha_rate_lowers_elbo():
    ds, opts, state = _warm_state()
    at_optimum = update_alpha(state, opts.hyper)
    best = elbo(at_optimum, ds, opts.hyper, opts)[0]
    verbatim = elbo(update_alpha(at_optimum, opts.hyper, 'verbatim'), ds, opts.hyper, opts)[0]
    assert verbatim < best


def test_verbatim_mean_covariance_lowers_elbo():
    ds, opts, state = _warm_state(model_mean=True)
    at_optimum = update_subject_means(state, ds, opts.hyper)
    best = elbo(at_optimum, ds, opts.hyper, opts)[0]
    verbatim = elbo(update_subject_means(at_optimum, ds, opts.hyper, 'verbatim'), ds, opts.hyper, opts)[0]
    assert verbatim < best


# ----- initialisation -----

def test_initialize_back_reconstructs_time_courses():
    ds = _small_synthetic(2)
    opts = FitOptions(D=3)
    state = initialize(ds, opts, SeededRng(7))
    for b, X in enumerate(ds.X):
        lstsq = np.linalg.lstsq(state.mu_A, X, rcond=None)[0]
        np.testing.assert_allclose(state.mu_S[b], lstsq, rtol=1e-8, atol=1e-10)
    np.testing.assert_array_equal(state.Sigma_A[0], np.eye(3))
    assert state.alpha_shape == opts.hyper.a_alpha
    np.testing.assert_array_equal(state.tau_rate, np.full((ds.V, ds.B), opts.hyper.b_tau))


def test_initialize_singular_when_too_few_voxels():
    ds = Dataset((np.ones((1, 4)),))
    with pytest.raises(SingularInitialization):
        initialize(ds, FitOptions(D=2), SeededRng(0))


# ----- options -----

@pytest.mark.parametrize('kwargs', [
    {'D': 0}, {'model': 'ica'}, {'max_iters': 0}, {'rel_tol': 0.0}, {'restarts': 0},
    {'elbo_every': 0}, {'threads': 0}, {'alpha_rate_form': 'other'}, {'prune_every': -1},
    {'prune_refine': 0}, {'prune_attempts': 0},
])
def test_fit_options_validation(kwargs):
    with pytest.raises(InvalidParameter):
        FitOptions(**kwargs)


def test_fit_options_dict_round_trip():
    opts = FitOptions(D=4, model='pfa', restarts=3, hyper=Hyperparameters(beta=0.5))
    assert FitOptions.from_dict(opts.as_dict()) == opts


# ----- fitting driver -----

def test_fit_shapes_and_report():
    ds = _small_synthetic(4, T=7)
    state, report = fit(ds, FitOptions(D=4, max_iters=15, restarts=2, seed=3))
    assert state.mu_A.shape == (20, 4)
    assert state.Sigma_A.shape == (20, 4, 4)
    assert [s.shape for s in state.mu_S] == [(4, 7), (4, 7)]
    assert state.tau_rate.shape == (20, 2)
    assert 1 <= report.iterations_run <= 15
    assert len(report.elbo_trace) == report.iterations_run
    assert report.restart_index in (0, 1)
    assert report.seed == 3 + report.restart_index
    assert set(report.elbo_terms) == set(engine.ELBO_TERMS)
    assert len(report.restart_elbos) == 2
    assert report.monotone_violations == 0
    best = max(r['elbo'] for r in report.restart_elbos)
    assert report.elbo_trace[-1] == best
    assert 0 <= report.effective_components <= 4


def test_infinite_tolerance_stops_after_one_iteration():
    ds = _small_synthetic(5)
    _, report = fit(ds, FitOptions(D=2, rel_tol=math.inf, max_iters=50))
    assert report.iterations_run == 1
    assert report.converged


def test_elbo_every_skips_evaluations():
    ds = _small_synthetic(5)
    _, report = fit(ds, FitOptions(D=2, rel_tol=1e-300, max_iters=7, elbo_every=3))
    # iterations 3, 6 and the last one
    assert report.iterations_run == 7
    assert len(report.elbo_trace) == 3


def test_fit_is_deterministic_across_thread_counts():
    ds = _small_synthetic(6)
    a_state, a_report = fit(ds, FitOptions(D=3, max_iters=20, restarts=3, seed=11, threads=1))
    b_state, b_report = fit(ds, FitOptions(D=3, max_iters=20, restarts=3, seed=11, threads=3))
    np.testing.assert_array_equal(a_state.mu_A, b_state.mu_A)
    assert a_report.elbo_trace == b_report.elbo_trace
    assert a_report.restart_index == b_report.restart_index


def test_pfa_keeps_alpha_at_prior():
    ds = _small_synthetic(7)
    state, report = fit(ds, FitOptions(D=3, model='pfa', max_iters=10))
    assert state.alpha_shape == HYPER.a_alpha
    np.testing.assert_array_equal(state.alpha_rate, np.full((20, 3), HYPER.b_alpha))
    assert report.notes


def test_failed_restarts_are_skipped(monkeypatch):
    ds = _small_synthetic(8)
    original = engine.initialize

    def flaky(ds_, opts, rng):
        if rng.seed == 1:
            raise SingularInitialization("forced")
        return original(ds_, opts, rng)

    monkeypatch.setattr(engine, 'initialize', flaky)
    _, report = fit(ds, FitOptions(D=2, max_iters=5, restarts=3))
    assert [f['restart'] for f in report.failed_restarts] == [1]
    assert 'forced' in report.failed_restarts[0]['error']
    assert report.restart_index in (0, 2)


def test_all_restarts_failing(monkeypatch):
    def broken(ds_, opts, rng):
        raise SingularInitialization("forced")

    monkeypatch.setattr(engine, 'initialize', broken)
    with pytest.raises(AllRestartsFailed) as info:
        fit(_small_synthetic(8), FitOptions(D=2, restarts=2))
    assert info.value.exit_code == 3


def test_resume_matches_uninterrupted_run():
    ds = _small_synthetic(9)
    opts = FitOptions(D=3, max_iters=8, rel_tol=1e-300)
    snapshots = []

    def keep(index, snapshot):
        snapshots.append(dict(snapshot, state=snapshot['state'].copy(),
                              elbo_trace=list(snapshot['elbo_trace'])))

    full_state, full_report = run_restart(ds, opts, 0, on_checkpoint=keep, checkpoint_every=3)
    assert [s['iteration'] for s in snapshots] == [3, 6, 8]
    resumed_state, resumed_report = run_restart(ds, opts, 0, checkpoint=snapshots[0])
    np.testing.assert_array_equal(full_state.mu_A, resumed_state.mu_A)
    assert full_report.elbo_trace == resumed_report.elbo_trace
    assert resumed_report.iterations_run == 8


def test_resume_from_checkpoint_files(tmp_path):
    ds = _small_synthetic(10)
    short = FitOptions(D=2, max_iters=4, rel_tol=1e-300)
    fit(ds, short, checkpoint_dir=str(tmp_path), checkpoint_every=2)
    assert (tmp_path / 'checkpoint_r000.npz').exists()
    longer = replace(short, max_iters=8)
    resumed_state, resumed = fit(ds, longer, checkpoint_dir=str(tmp_path), checkpoint_every=2, resume=True)
    direct_state, direct = fit(ds, longer)
    assert resumed.elbo_trace == direct.elbo_trace
    np.testing.assert_array_equal(resumed_state.mu_A, direct_state.mu_A)


def test_resume_rejects_changed_options(tmp_path):
    ds = _small_synthetic(10)
    old = FitOptions(D=2, max_iters=4, rel_tol=1e-300, seed=0)
    fit(ds, old, checkpoint_dir=str(tmp_path), checkpoint_every=2)
    changed = replace(old, D=4, seed=99, max_iters=6)
    with pytest.raises(ConfigError) as info:
        fit(ds, changed, checkpoint_dir=str(tmp_path), checkpoint_every=2, resume=True)
    assert 'D, seed' in str(info.value)
    assert info.value.exit_code == 1

    state, report = fit(ds, replace(old, max_iters=6, threads=2), checkpoint_dir=str(tmp_path),
                        checkpoint_every=2, resume=True)
    assert state.D == 2
    assert report.iterations_run == 6


# ----- component deletion -----

def _split_state(seed=4):
    """
    A converged two-component fit re-expressed with three components:
    component 0 is split into two identical halves, 0 and 2.
    """
    ds, _ = generate_synthetic(SeededRng(seed), V=40, T=10, B=2, D_true=2)
    fitted, _ = fit(ds, FitOptions(D=2, max_iters=200, prune_every=0))
    halves = np.array([[0.5, 0.0], [0.0, 1.0], [0.5, 0.0]])
    Sigma_A = np.zeros((ds.V, 3, 3))
    Sigma_A[:, :2, :2] = fitted.Sigma_A
    Sigma_A[:, 2, 2] = fitted.Sigma_A[:, 0, 0]
    split = VariationalState(
        mu_A=fitted.mu_A[:, [0, 1, 0]],
        Sigma_A=Sigma_A,
        mu_S=[halves @ s for s in fitted.mu_S],
        Sigma_S=np.stack([halves @ c @ halves.T for c in fitted.Sigma_S]),
        alpha_shape=fitted.alpha_shape,
        alpha_rate=fitted.alpha_rate[:, [0, 1, 0]],
        gamma_shape=fitted.gamma_shape,
        gamma_rate=fitted.gamma_rate[[0, 1, 0]],
        tau_shape=fitted.tau_shape,
        tau_rate=fitted.tau_rate,
    )
    return ds, split


def test_delete_component_folds_the_map_into_its_twin():
    ds, split = _split_state()
    opts = FitOptions(D=3)
    new = delete_component(split, 2, [0, 1], [1.0, 0.0], opts)
    np.testing.assert_array_equal(new.mu_A[:, 2], 0.0)
    np.testing.assert_allclose(new.mu_A[:, 0], 2.0 * split.mu_A[:, 0], rtol=1e-14)
    np.testing.assert_array_equal(new.mu_A[:, 1], split.mu_A[:, 1])
    for b in range(ds.B):
        np.testing.assert_array_equal(new.mu_S[b][2], 0.0)
        np.testing.assert_allclose(reconstruct(new, b), reconstruct(split, b), rtol=1e-12, atol=1e-12)
        np.testing.assert_array_equal(new.Sigma_S[b, 2, :2], 0.0)
    np.testing.assert_array_equal(new.Sigma_A[:, 2, :2], 0.0)
    np.testing.assert_allclose(new.Sigma_A[:, 2, 2], HYPER.b_alpha / (HYPER.a_alpha + 0.5))
    assert new.E_gamma()[2] > 1e6
    assert new.E_alpha()[:, 2].min() > 1e5
    assert effective_components(new) == 2


def test_deletion_move_removes_a_split_component():
    ds, split = _split_state()
    opts = FitOptions(D=3, prune_refine=50)
    for _ in range(3):
        split = update_cycle(split, ds, opts)
    current, _ = elbo(split, ds, opts.hyper, opts)
    assert effective_components(split) == 3

    new, value, deleted = try_component_deletions(split, ds, opts, current)
    assert deleted in (0, 2)
    assert value > current
    assert value == elbo(new, ds, opts.hyper, opts)[0]
    assert effective_components(new) == 2


def test_deletion_round_without_candidates_keeps_the_state(make_dataset, make_state):
    ds = make_dataset(V=6, T=(4, 5))
    state = make_state(ds, D=3)
    silent = replace(state, mu_A=np.zeros((6, 3)), Sigma_A=np.zeros((6, 3, 3)))
    new, value, deleted = try_component_deletions(silent, ds, FitOptions(D=3), -1.0)
    assert new is silent and value == -1.0 and deleted is None


@pytest.mark.parametrize('iteration,converged,due', [
    (25, False, False), (49, True, False), (50, False, True), (51, False, False),
    (51, True, True), (75, False, True), (100, False, False),
])
def test_deletion_schedule(iteration, converged, due):
    opts = FitOptions(max_iters=100, prune_every=25)
    assert engine._deletion_due(opts, iteration, converged) is due
    assert engine._deletion_due(replace(opts, prune_every=0), iteration, converged) is False


def test_trace_stays_monotone_with_deletions():
    ds = _small_synthetic(6, V=30, T=8, D_true=2)
    state, report = fit(ds, FitOptions(D=4, max_iters=60, rel_tol=1e-300, prune_every=10, prune_refine=20))
    trace = [report.initial_elbo] + report.elbo_trace
    assert all(b >= a - 1e-8 * abs(a) for a, b in zip(trace, trace[1:]))
    assert len(report.elbo_trace) == 60
    assert report.elbo_trace[-1] == elbo(state, ds, HYPER)[0]
    assert report.deleted_components >= 0
    assert report.effective_components <= 4


# ----- post-fit helpers -----

def test_effective_components_edge_cases(make_dataset, make_state):
    ds = make_dataset(V=5, T=(4, 4))
    state = make_state(ds, D=3)
    silent = replace(state, mu_A=np.zeros((5, 3)), Sigma_A=np.zeros((5, 3, 3)))
    assert engine.effective_components(silent) == 0
    one = silent.mu_A.copy()
    one[:, 0] = 1.0
    assert engine.effective_components(replace(silent, mu_A=one)) == 1


def test_sort_components_orders_energy_and_keeps_elbo(make_dataset, make_state):
    ds = make_dataset(V=6, T=(5, 4))
    state = make_state(ds, D=3, seed=2)
    state = replace(state, mu_A=state.mu_A * np.array([0.1, 3.0, 1.0]))
    ordered = sort_components(state)
    energy = engine.component_energy(ordered)
    assert np.all(np.diff(energy) <= 0)
    assert elbo(ordered, ds, HYPER)[0] == pytest.approx(elbo(state, ds, HYPER)[0], rel=1e-12)


def test_effective_components_zero_threshold_counts_all(make_dataset, make_state):
    ds = make_dataset(V=5, T=(4, 4))
    assert engine.effective_components(make_state(ds, D=3), threshold=0.0) == 3


def test_shape_parameters_after_fit():
    ds, _ = generate_synthetic(SeededRng(13), V=20, T=5, B=2, D_true=2)
    ds = Dataset((ds.X[0], ds.X[1][:, :3]))
    state, _ = fit(ds, FitOptions(D=3, max_iters=5))
    assert state.alpha_shape == HYPER.a_alpha + 0.5
    assert state.gamma_shape == HYPER.a_gamma + 0.5 * 8
    np.testing.assert_array_equal(state.tau_shape, [HYPER.a_tau + 2.5, HYPER.a_tau + 1.5])


def test_reconstruct_zero_state(make_dataset, make_state):
    ds = make_dataset(V=4, T=(3, 2))
    state = make_state(ds, D=2)
    zero = replace(state, mu_A=np.zeros((4, 2)))
    np.testing.assert_array_equal(reconstruct(zero, 1), np.zeros((4, 2)))


def test_reconstruction_reaches_the_noise_floor():
    ds, _ = generate_synthetic(SeededRng(14), V=50, T=12, B=2, D_true=2, noise_mean=1e-4, noise_sd=0.0)
    state, _ = fit(ds, FitOptions(D=3, max_iters=300))
    for b, X in enumerate(ds.X):
        assert np.linalg.norm(X - reconstruct(state, b)) / np.linalg.norm(X) < 0.05


def test_reconstruct_adds_subject_mean(make_dataset, make_state):
    ds = make_dataset(V=4, T=(3, 2))
    state = make_state(ds, D=2, model_mean=True)
    np.testing.assert_allclose(reconstruct(state, 1), state.mu_A @ state.mu_S[1] + state.mu_mu[:, 1:2])
    plain = make_state(ds, D=2)
    np.testing.assert_allclose(reconstruct(plain, 0), plain.mu_A @ plain.mu_S[0])


def test_elbo_evaluation_speed(benchmark, benchmark_data):
    ds, _ = benchmark_data
    opts = FitOptions(D=6)
    state = update_cycle(initialize(ds, opts, SeededRng(0)), ds, opts)
    total, _ = benchmark(elbo, state, ds, opts.hyper, opts)
    assert math.isfinite(total)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
