"""
Group PCA on temporally concatenated data.
"""

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import DimensionError


@dataclass(frozen=True)
class PcaResult:
    spatial_maps: np.ndarray        # V x D, orthonormal columns
    timecourses: tuple              # per subject D x T^(b)
    singular_values: np.ndarray     # full spectrum, non-increasing
    explained_variance_ratio: np.ndarray  # top D

    @property
    def D(self):
        return self.spatial_maps.shape[1]

    def reconstruct(self, b):
        return self.spatial_maps @ self.timecourses[b]


def group_pca(ds, D):
    """
    Top-D left singular vectors of [X^(1) ... X^(B)].

    The SVD is taken on the V x sum(T) concatenation directly. Each
    component's sign is fixed so that its largest-magnitude map entry is
    positive. No centring is applied; demean the dataset first if needed.
    """
    X = ds.stacked()
    if not 1 <= D <= min(X.shape):
        raise DimensionError(f"D must be in [1, {min(X.shape)}] for data of shape {X.shape}, got {D}")
    U, s, _ = linalg.svd(X, full_matrices=False, lapack_driver='gesdd')
    maps = U[:, :D].copy()
    peak = np.argmax(np.abs(maps), axis=0)
    signs = np.sign(maps[peak, np.arange(D)])
    signs[signs == 0] = 1.0
    maps *= signs
    timecourses = tuple(maps.T @ x for x in ds.X)
    energy = s ** 2
    total = energy.sum()
    ratio = energy[:D] / total if total > 0 else np.zeros(D)
    return PcaResult(spatial_maps=maps, timecourses=timecourses,
                     singular_values=s, explained_variance_ratio=ratio)
