"""
psfa - Group-level probabilistic sparse factor analysis
Variational Bayes factor analysis with ARD sparsity and heteroscedastic noise
"""

import logging

__version__ = '1.0.0'

logging.getLogger(__name__).addHandler(logging.NullHandler())

from .errors import PsfaError  # noqa: E402
from .model import Dataset, Hyperparameters, SyntheticTruth, VariationalState, demean_voxels, generate_synthetic, zscore_subjects  # noqa: E402
from .numerics import SeededRng  # noqa: E402
from .engine import FitOptions, FitReport, elbo, fit, reconstruct, effective_components, sort_components  # noqa: E402
from .baselines import group_pca  # noqa: E402
from .metrics import amari_index, avg_abs_correlation, empirical_kurtosis, match_components, mean_log_precision_map  # noqa: E402
from .fileio import read_dataset, read_matrix, validate_dataset, write_dataset, write_matrix  # noqa: E402


def help():
    """Display help information for the psfa package"""
    print("psfa - Group-level Probabilistic Sparse Factor Analysis")
    print("=" * 56)
    print()
    print("Available functions:")
    print("  psfa.help() - Display this help")
    print("  psfa.version() - Show version information")
    print("  psfa.generate_synthetic(rng, ...) - Synthetic benchmark dataset")
    print("  psfa.fit(dataset, options) - Variational Bayes fit with restarts")
    print("  psfa.group_pca(dataset, D) - Group PCA baseline")
    print("  psfa.match_components(est, ref) - Correlation matching of maps")
    print("  psfa.amari_index(est, ref) - Amari distance between bases")
    print()
    print("Command line:")
    print("  psfa generate --out DIR")
    print("  psfa fit --in DIR/dataset.psfa --out RUN [--model psfa|pfa|pca]")
    print("  psfa eval --est RUN/A.psfm --ref DIR/A_true.psfm")
    print("  psfa compare --in DIR/dataset.psfa --truth-dir DIR --out CMP")
    print("  psfa validate FILE")


def version():
    """Get version information"""
    import numpy
    import scipy
    return {
        'version': __version__,
        'mode': 'Python',
        'numpy': numpy.__version__,
        'scipy': scipy.__version__,
    }


def cli(argv=None):
    """Command line interface"""
    from .commands import main
    return main(argv)
