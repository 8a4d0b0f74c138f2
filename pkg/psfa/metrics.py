"""
Evaluation of estimated decompositions against reference maps.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DimensionError, InvalidParameter, SingularReference, ZeroVariance
from .numerics import digamma

AMARI_DEFINITION = (
    "P = pinv(ref) @ est; d(P) = 1/(2D) * [sum_i(sum_j|p_ij|/max_j|p_ij| - 1)"
    " + sum_j(sum_i|p_ij|/max_i|p_ij| - 1)]"
)
REFERENCE_CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class ComponentMatch:
    """
    est_indices[k] is matched to ref_indices[k]; pairs are ordered by
    reference index. ``correlations`` are after sign correction, so >= 0.
    """
    est_indices: tuple
    ref_indices: tuple
    signs: tuple
    correlations: tuple

    def as_dict(self):
        return {
            'assignment': [{'est': int(e), 'ref': int(r), 'sign': int(s), 'correlation': float(c)}
                           for e, r, s, c in zip(self.est_indices, self.ref_indices,
                                                 self.signs, self.correlations)],
        }


def _as_columns(m, name):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2 or m.shape[1] < 1:
        raise DimensionError(f"{name} must be a V x D matrix, got shape {m.shape}")
    return m


def pearson_matrix(est, ref):
    """Column-wise Pearson correlations (population normalisation), D_e x D_r"""
    est, ref = _as_columns(est, "est"), _as_columns(ref, "ref")
    if est.shape[0] != ref.shape[0]:
        raise DimensionError(f"est has shape {est.shape} but ref has shape {ref.shape}")
    ec = est - est.mean(axis=0)
    rc = ref - ref.mean(axis=0)
    es = np.sqrt(np.mean(ec ** 2, axis=0))
    rs = np.sqrt(np.mean(rc ** 2, axis=0))
    with np.errstate(divide='ignore', invalid='ignore'):
        c = (ec.T @ rc) / est.shape[0] / np.outer(es, rs)
    c = np.nan_to_num(c, nan=0.0, posinf=0.0, neginf=0.0)
    return np.clip(c, -1.0, 1.0)


def match_components(est, ref):
    """Assignment maximising total |Pearson correlation| over min(D_e, D_r) pairs"""
    c = pearson_matrix(est, ref)
    rows, cols = linear_sum_assignment(-np.abs(c))
    order = np.argsort(cols, kind='stable')
    rows, cols = rows[order], cols[order]
    picked = c[rows, cols]
    signs = np.where(picked < 0, -1, 1)
    return ComponentMatch(
        est_indices=tuple(int(i) for i in rows),
        ref_indices=tuple(int(j) for j in cols),
        signs=tuple(int(s) for s in signs),
        correlations=tuple(float(v) for v in np.abs(picked)),
    )


def avg_abs_correlation(match):
    if not match.correlations:
        raise InvalidParameter("empty component match")
    return float(np.mean(np.abs(match.correlations)))


def aligned_maps(est, match):
    """Matched, sign-corrected estimated columns in reference order"""
    est = _as_columns(est, "est")
    return est[:, list(match.est_indices)] * np.asarray(match.signs, dtype=np.float64)


def amari_index(est, ref):
    """
    Amari distance between ``est`` and ``ref`` (both V x D).

    Zero iff pinv(ref) @ est is a scaled permutation; bounded by D - 1.
    """
    est, ref = _as_columns(est, "est"), _as_columns(ref, "ref")
    if est.shape != ref.shape:
        raise DimensionError(f"est has shape {est.shape} but ref has shape {ref.shape}")
    if np.linalg.cond(ref) > REFERENCE_CONDITION_LIMIT:
        raise SingularReference("reference maps are rank deficient")
    P = np.abs(np.linalg.pinv(ref) @ est)
    D = P.shape[0]
    row_max = P.max(axis=1)
    col_max = P.max(axis=0)
    if np.any(row_max == 0) or np.any(col_max == 0):
        raise SingularReference("estimated maps have no component along a reference direction")
    rows = np.sum(P.sum(axis=1) / row_max - 1.0)
    cols = np.sum(P.sum(axis=0) / col_max - 1.0)
    return float((rows + cols) / (2.0 * D))


def empirical_kurtosis(values):
    """m4 / m2^2 with central moments; 3 for a Gaussian"""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 4:
        raise InvalidParameter(f"kurtosis needs at least 4 values, got {x.size}")
    c = x - x.mean()
    m2 = np.mean(c ** 2)
    if m2 == 0:
        raise ZeroVariance("values have zero variance")
    return float(np.mean(c ** 4) / m2 ** 2)


def zscore_threshold_map(values, threshold=1.0):
    """+1 where z > threshold, -1 where z < -threshold, 0 elsewhere"""
    x = np.asarray(values, dtype=np.float64).ravel()
    sd = x.std()
    if sd == 0:
        raise ZeroVariance("map has zero variance")
    z = (x - x.mean()) / sd
    out = np.zeros(x.shape, dtype=np.int8)
    out[z > threshold] = 1
    out[z < -threshold] = -1
    return out


def mean_log_precision_map(state):
    """<log tau_v^(b)> averaged over subjects, length V"""
    return np.mean(digamma(state.tau_shape)[None, :] - np.log(state.tau_rate), axis=1)


def map_histogram(values, bins=100):
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64).ravel(), bins=bins)
    return counts, edges


def mean_timecourse(timecourses, component):
    """Mean over subjects of one component's time course; needs equal T^(b)"""
    lengths = {tc.shape[1] for tc in timecourses}
    if len(lengths) != 1:
        raise DimensionError(f"subjects have different lengths {sorted(lengths)}")
    return np.mean([tc[component] for tc in timecourses], axis=0)


def noise_recovery(true_variance, est_variance):
    """Pearson correlation between true and estimated noise variances"""
    t = np.asarray(true_variance, dtype=np.float64).ravel()
    e = np.asarray(est_variance, dtype=np.float64).ravel()
    if t.shape != e.shape:
        raise DimensionError(f"true noise has {t.size} entries, estimate has {e.size}")
    return float(pearson_matrix(t, e)[0, 0])


def evaluate_maps(est, ref):
    """Match, align and score estimated maps against a reference; returns a dict"""
    est, ref = _as_columns(est, "est"), _as_columns(ref, "ref")
    match = match_components(est, ref)
    aligned = aligned_maps(est, match)
    report = {
        'est_shape': list(est.shape),
        'ref_shape': list(ref.shape),
        **match.as_dict(),
        'correlations': list(match.correlations),
        'avg_abs_correlation': avg_abs_correlation(match),
        'kurtosis': [empirical_kurtosis(aligned[:, k]) for k in range(aligned.shape[1])],
        'amari_definition': AMARI_DEFINITION,
    }
    if aligned.shape[1] == ref.shape[1]:
        report['amari_index'] = amari_index(aligned, ref)
    else:
        report['amari_index'] = None
    report['median_kurtosis'] = float(np.median(report['kurtosis']))
    return report
