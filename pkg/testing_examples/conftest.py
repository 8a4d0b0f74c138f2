"""
Shared fixtures for the psfa test suite
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from psfa.model import Dataset, VariationalState, generate_synthetic  # noqa: E402
from psfa.numerics import SeededRng  # noqa: E402


def _spd(gen, d, scale=1.0):
    m = gen.normal(size=(d, d))
    return scale * (m @ m.T / d + 0.5 * np.eye(d))


@pytest.fixture
def make_dataset():
    def _make(V=7, T=(5, 5), B=None, seed=0):
        gen = np.random.default_rng(seed)
        if isinstance(T, int):
            T = (T,) * (B or 1)
        return Dataset(tuple(gen.normal(size=(V, t)) for t in T))
    return _make


@pytest.fixture
def make_state():
    """Random but valid variational state matching a dataset"""
    def _make(ds, D=3, seed=0, model_mean=False):
        gen = np.random.default_rng(seed + 1000)
        V, B = ds.V, ds.B
        return VariationalState(
            mu_A=gen.normal(size=(V, D)),
            Sigma_A=np.stack([_spd(gen, D, 0.3) for _ in range(V)]),
            mu_S=[gen.normal(size=(D, t)) for t in ds.T],
            Sigma_S=np.stack([_spd(gen, D, 0.3) for _ in range(B)]),
            alpha_shape=float(gen.uniform(0.5, 3.0)),
            alpha_rate=gen.uniform(0.5, 2.0, size=(V, D)),
            gamma_shape=float(gen.uniform(0.5, 3.0)),
            gamma_rate=gen.uniform(0.5, 2.0, size=D),
            tau_shape=gen.uniform(1.0, 4.0, size=B),
            tau_rate=gen.uniform(0.5, 2.0, size=(V, B)),
            mu_mu=gen.normal(size=(V, B)) if model_mean else None,
            sigma_mu=gen.uniform(0.1, 1.0, size=(V, B)) if model_mean else None,
        )
    return _make


@pytest.fixture(scope='session')
def benchmark_data():
    """The synthetic benchmark configuration: V=1000, T=25, B=3, three sparse sources"""
    return generate_synthetic(SeededRng(2016))
