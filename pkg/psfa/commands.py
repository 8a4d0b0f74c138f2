"""
Command line interface: psfa {generate,fit,eval,compare,validate}

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import logging
import os
import sys
import time

import numpy as np

from .baselines import group_pca
from .config import RunConfig, default_threads
from .engine import FitOptions, fit, sort_components
from .errors import PsfaError, UsageError
from .fileio import (DATASET_MAGIC, read_dataset, read_matrix, validate_dataset, write_dataset, write_matrix,
                     write_report)
from .metrics import evaluate_maps, mean_log_precision_map, noise_recovery
from .model import Hyperparameters, generate_synthetic
from .numerics import SeededRng

logger = logging.getLogger(__name__)

ITERATION_FLAGS = ('max_iters', 'tol', 'restarts', 'mean', 'checkpoint_every', 'elbo_every',
                   'alpha_rate_form', 'mean_cov_form', 'prune_every')


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that exits with code 1 on usage errors"""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser():
    parser = _Parser(prog='psfa', description='psfa - group-level probabilistic sparse factor analysis')
    parser.add_argument('--version', action='store_true', help='Show version information')
    parser.add_argument('--help-psfa', action='store_true', help='Show psfa library help')
    parser.add_argument('--verbose', action='store_true', help='Log progress (INFO level)')
    parser.add_argument('--debug', action='store_true', help='Log per-iteration details (DEBUG level)')
    sub = parser.add_subparsers(dest='command')

    g = sub.add_parser('generate', help='Generate a synthetic benchmark dataset')
    g.add_argument('--config', help='key=value configuration file')
    g.add_argument('--voxels', type=int, help='Number of voxels V (default 1000)')
    g.add_argument('--timepoints', type=int, help='Timepoints per subject T (default 25)')
    g.add_argument('--subjects', type=int, help='Number of subjects B (default 3)')
    g.add_argument('--components', type=int, help='True number of components (default 3)')
    g.add_argument('--sparsity', type=float, help='Probability that a map entry is zero (default 0.5)')
    g.add_argument('--noise-mean', type=float, help='Mean noise variance (default 0.009)')
    g.add_argument('--noise-sd', type=float, help='Standard deviation of the noise variance (default 0.002)')
    g.add_argument('--seed', type=int, help='Random seed (default 0)')
    g.add_argument('--out', help='Output directory')

    f = sub.add_parser('fit', help='Fit psFA, pFA or group PCA to a dataset')
    f.add_argument('--config', help='key=value configuration file')
    f.add_argument('--model', choices=('psfa', 'pfa', 'pca'))
    f.add_argument('--components', type=int, help='Latent dimension D (default 6)')
    f.add_argument('--max-iters', type=int, help='Iterations per restart (default 500)')
    f.add_argument('--tol', type=float, help='Relative ELBO change threshold (default 1e-9)')
    f.add_argument('--restarts', type=int, help='Number of random restarts (default 1)')
    f.add_argument('--seed', type=int, help='Seed of restart 0; restart i uses seed+i')
    f.add_argument('--mean', dest='mean', action='store_const', const=True, help='Model subject means')
    f.add_argument('--no-mean', dest='mean', action='store_const', const=False, help='Do not model subject means')
    f.add_argument('--elbo-every', type=int, help='Iterations between ELBO evaluations (default 1)')
    f.add_argument('--alpha-rate-form', choices=('corrected', 'verbatim'))
    f.add_argument('--mean-cov-form', choices=('corrected', 'verbatim'))
    f.add_argument('--prune-every', type=int, metavar='N',
                   help='Iterations between component-deletion rounds, 0 disables them (default 25)')
    f.add_argument('--checkpoint-every', type=int, metavar='N', help='Write a full-state snapshot every N iterations')
    f.add_argument('--resume', action='store_true', help='Resume restarts from their checkpoints in --out')
    f.add_argument('--threads', type=int, help='Worker threads for restarts (default: PSFA_THREADS or CPU count)')
    f.add_argument('--in', dest='in_', metavar='IN', help='Input dataset (.psfa)')
    f.add_argument('--out', help='Output directory')

    e = sub.add_parser('eval', help='Compare estimated spatial maps with reference maps')
    e.add_argument('--config', help='key=value configuration file')
    e.add_argument('--est', help='Estimated maps (V x D, .psfm or .csv)')
    e.add_argument('--ref', help='Reference maps (V x D_r, .psfm or .csv)')
    e.add_argument('--truth-noise', help='True noise variances (V x B)')
    e.add_argument('--est-noise', help='Estimated noise variances (V x B), e.g. noise_variance.psfm from fit')
    e.add_argument('--out', help='Output JSON report (default: print to stdout)')

    c = sub.add_parser('compare', help='Run psFA, pFA and group PCA on one dataset and score them')
    c.add_argument('--config', help='key=value configuration file')
    c.add_argument('--in', dest='in_', metavar='IN', help='Input dataset (.psfa)')
    c.add_argument('--truth-dir', help='Directory written by "psfa generate"')
    c.add_argument('--components', type=int)
    c.add_argument('--max-iters', type=int)
    c.add_argument('--tol', type=float)
    c.add_argument('--restarts', type=int)
    c.add_argument('--seed', type=int)
    c.add_argument('--threads', type=int)
    c.add_argument('--out', help='Output directory')

    v = sub.add_parser('validate', help='Validate a dataset or matrix file')
    v.add_argument('path')
    return parser


def _resolve_config(command, args, skip=('config', 'command', 'version', 'help_psfa', 'verbose', 'debug',
                                          'resume', 'path')):
    config = RunConfig.load(command, args.config) if getattr(args, 'config', None) else RunConfig(command)
    given = {}
    for key, value in vars(args).items():
        if key in skip:
            continue
        given['in' if key == 'in_' else key] = value
    return config.update(given)


def _require_input(path, what):
    if not path:
        raise UsageError(f"{what} is required")
    if not os.path.isfile(path):
        raise UsageError(f"{what} does not exist: {path}")


def _prepare_out_dir(path):
    if not path:
        raise UsageError("--out is required")
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {path}: {e}") from None
    return path


def _threads(config):
    threads = config['threads']
    return default_threads() if threads is None else threads


# ----- commands -----

def cmd_generate(args):
    config = _resolve_config('generate', args)
    if not config['noise_mean'] > 0:
        raise UsageError(f"--noise-mean must be > 0, got {config['noise_mean']}")
    out = _prepare_out_dir(config['out'])
    rng = SeededRng(config['seed'])
    ds, truth = generate_synthetic(
        rng, V=config['voxels'], T=config['timepoints'], B=config['subjects'],
        D_true=config['components'], sparsity=config['sparsity'],
        noise_mean=config['noise_mean'], noise_sd=config['noise_sd'])

    write_dataset(ds, os.path.join(out, 'dataset.psfa'))
    write_matrix(truth.A_true, os.path.join(out, 'A_true.psfm'))
    write_matrix(truth.mask, os.path.join(out, 'mask.psfm'))
    write_matrix(truth.noise_variance, os.path.join(out, 'noise_variance.psfm'))
    for b, s in enumerate(truth.S_true):
        write_matrix(s, os.path.join(out, f'S_true_b{b:02d}.psfm'))
    config.save(os.path.join(out, 'run-config.txt'))
    write_report({
        'command': 'generate',
        'config': config.as_dict(),
        'rng': rng.state(),
        'noise_sd_interpretation': 'standard_deviation',
        'mask_rule': 'Uniform(0,1) > sparsity',
        'shape': {'V': ds.V, 'B': ds.B, 'T': list(ds.T)},
    }, os.path.join(out, 'generate.json'))
    print(f"Generated dataset V={ds.V} B={ds.B} T={ds.T[0]} D_true={config['components']} in {out}")
    return 0


def _fit_options(config, threads):
    hyper = Hyperparameters(**{k: config[k] for k in Hyperparameters().as_dict()})
    return FitOptions(
        D=config['components'], model=config['model'], max_iters=config['max_iters'],
        rel_tol=config['tol'], restarts=config['restarts'], seed=config['seed'],
        model_mean=config['mean'], hyper=hyper, elbo_every=config['elbo_every'],
        check_monotone=config['check_monotone'], alpha_rate_form=config['alpha_rate_form'],
        mean_cov_form=config['mean_cov_form'], threads=threads, prune_every=config['prune_every'])


def cmd_fit(args):
    config = _resolve_config('fit', args)
    _require_input(config['in'], '--in')
    out = _prepare_out_dir(config['out'])
    threads = _threads(config)
    ds = read_dataset(config['in'])
    start = time.perf_counter()

    if config['model'] == 'pca':
        ignored = [k for k in ITERATION_FLAGS if getattr(args, k, None) not in (None, False)]
        if ignored:
            logger.warning("--model pca ignores %s", ', '.join('--' + k.replace('_', '-') for k in ignored))
        result = group_pca(ds, config['components'])
        write_matrix(result.spatial_maps, os.path.join(out, 'A.psfm'))
        for b, tc in enumerate(result.timecourses):
            write_matrix(tc, os.path.join(out, f'S_b{b:02d}.psfm'))
        config.save(os.path.join(out, 'run-config.txt'))
        write_report({
            'command': 'fit',
            'model': 'pca',
            'config': config.as_dict(),
            'singular_values': result.singular_values,
            'explained_variance_ratio': result.explained_variance_ratio,
            'wall_seconds': time.perf_counter() - start,
        }, os.path.join(out, 'report.json'))
        print(f"Group PCA with D={result.D} written to {out}")
        return 0

    opts = _fit_options(config, threads)
    checkpoint_every = config['checkpoint_every'] or 0
    checkpoint_dir = os.path.join(out, 'checkpoints') if (checkpoint_every or args.resume) else None
    state, report = fit(ds, opts, checkpoint_dir=checkpoint_dir, checkpoint_every=checkpoint_every,
                        resume=args.resume, progress=sys.stderr.isatty())
    state = sort_components(state)

    write_matrix(state.mu_A, os.path.join(out, 'A.psfm'))
    for b, s in enumerate(state.mu_S):
        write_matrix(s, os.path.join(out, f'S_b{b:02d}.psfm'))
    write_matrix(state.tau_shape, os.path.join(out, 'tau_shape.psfm'))
    write_matrix(state.tau_rate, os.path.join(out, 'tau_rate.psfm'))
    write_matrix(state.tau_rate / state.tau_shape[None, :], os.path.join(out, 'noise_variance.psfm'))
    write_matrix(mean_log_precision_map(state), os.path.join(out, 'mean_log_precision.psfm'))
    if state.model_mean:
        write_matrix(state.mu_mu, os.path.join(out, 'mu.psfm'))
    config.save(os.path.join(out, 'run-config.txt'))
    write_report({
        'command': 'fit',
        'model': opts.model,
        'config': config.as_dict(),
        'options': opts.as_dict(),
        'seeds': [opts.seed + i for i in range(opts.restarts)],
        'best_restart': report.restart_index,
        'elbo_trace': report.elbo_trace,
        'initial_elbo': report.initial_elbo,
        'elbo_terms': report.elbo_terms,
        'converged': report.converged,
        'iterations_run': report.iterations_run,
        'effective_components': report.effective_components,
        'monotone_violations': report.monotone_violations,
        'deleted_components': report.deleted_components,
        'restart_elbos': report.restart_elbos,
        'failed_restarts': report.failed_restarts,
        'formula_variants': {'alpha_rate': opts.alpha_rate_form, 'mean_covariance': opts.mean_cov_form},
        'beta_source': 'default' if config['beta'] == 1e-6 else 'user',
        'threads': threads,
        'deterministic_reduction': True,
        'notes': report.notes,
        'wall_seconds': time.perf_counter() - start,
    }, os.path.join(out, 'report.json'))

    for failure in report.failed_restarts:
        print(f"Warning: restart {failure['restart']} failed: {failure['error']}", file=sys.stderr)
    print(f"{opts.model} fit: best restart {report.restart_index}, ELBO {report.elbo_trace[-1]:.6f}, "
          f"{report.effective_components} effective components, results in {out}")
    return 0


def cmd_eval(args):
    config = _resolve_config('eval', args)
    _require_input(config['est'], '--est')
    _require_input(config['ref'], '--ref')
    est, ref = read_matrix(config['est']), read_matrix(config['ref'])
    report = {'command': 'eval', 'config': config.as_dict(), **evaluate_maps(est, ref)}
    if config['truth_noise'] or config['est_noise']:
        _require_input(config['truth_noise'], '--truth-noise')
        _require_input(config['est_noise'], '--est-noise')
        report['noise_recovery_pearson'] = noise_recovery(
            read_matrix(config['truth_noise']), read_matrix(config['est_noise']))
    if config['out']:
        write_report(report, config['out'])
        print(f"avg |corr| {report['avg_abs_correlation']:.3f}, Amari {report['amari_index']}, "
              f"report in {config['out']}")
    else:
        import json
        print(json.dumps(report, indent=2, default=float))
    return 0


def cmd_compare(args):
    config = _resolve_config('compare', args)
    _require_input(config['in'], '--in')
    if not config['truth_dir']:
        raise UsageError("--truth-dir is required")
    _require_input(os.path.join(config['truth_dir'], 'A_true.psfm'), 'A_true.psfm in --truth-dir')
    out = _prepare_out_dir(config['out'])
    ds = read_dataset(config['in'])
    A_true = read_matrix(os.path.join(config['truth_dir'], 'A_true.psfm'))
    noise_path = os.path.join(config['truth_dir'], 'noise_variance.psfm')
    true_noise = read_matrix(noise_path) if os.path.isfile(noise_path) else None
    threads = _threads(config)

    results = {}
    pca = group_pca(ds, config['components'])
    results['pca'] = evaluate_maps(pca.spatial_maps, A_true)
    for model in ('psfa', 'pfa'):
        opts = FitOptions(D=config['components'], model=model, max_iters=config['max_iters'],
                          rel_tol=config['tol'], restarts=config['restarts'], seed=config['seed'],
                          threads=threads)
        state, report = fit(ds, opts)
        scores = evaluate_maps(state.mu_A, A_true)
        scores['best_elbo'] = report.elbo_trace[-1]
        scores['effective_components'] = report.effective_components
        if true_noise is not None:
            scores['noise_recovery_pearson'] = noise_recovery(true_noise, state.tau_rate / state.tau_shape)
        results[model] = scores
        write_matrix(state.mu_A, os.path.join(out, f'A_{model}.psfm'))
    write_matrix(pca.spatial_maps, os.path.join(out, 'A_pca.psfm'))
    config.save(os.path.join(out, 'run-config.txt'))
    write_report({'command': 'compare', 'config': config.as_dict(), 'threads': threads,
                  'results': results}, os.path.join(out, 'compare.json'))

    print(f"{'method':<8}{'avg|corr|':>12}{'Amari':>10}{'kurtosis':>10}")
    for name, scores in results.items():
        amari = scores['amari_index']
        print(f"{name:<8}{scores['avg_abs_correlation']:>12.3f}"
              f"{(f'{amari:.3f}' if amari is not None else '-'):>10}{scores['median_kurtosis']:>10.2f}")
    return 0


def cmd_validate(args):
    path = args.path
    if not os.path.isfile(path):
        print(f"File validation failed: not found: {path}")
        return 2
    with open(path, 'rb') as f:
        head = f.read(4)
    if head == DATASET_MAGIC:
        result = validate_dataset(path)
        if result['valid']:
            print(f"Dataset is valid: V={result['V']}, B={result['B']}, T={result['T']}")
            return 0
        print(f"Dataset validation failed: {result['error']}")
        return 2
    m = read_matrix(path)
    print(f"Matrix is valid: {m.shape[0]}x{m.shape[1]}, finite={bool(np.all(np.isfinite(m)))}")
    return 0


COMMANDS = {
    'generate': cmd_generate,
    'fit': cmd_fit,
    'eval': cmd_eval,
    'compare': cmd_compare,
    'validate': cmd_validate,
}


def main(argv=None):
    from . import help as show_help, version

    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.debug else logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s')

    if args.version:
        info = version()
        print(f"psfa version {info['version']}")
        print(f"numpy {info['numpy']}, scipy {info['scipy']}")
        return 0
    if args.help_psfa:
        show_help()
        return 0
    if not args.command:
        parser.print_help()
        return 1

    try:
        return COMMANDS[args.command](args)
    except PsfaError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return 2
