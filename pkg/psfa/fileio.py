"""
File formats: binary datasets (.psfa), binary matrices (.psfm), CSV
matrices, checkpoints (.npz) and JSON reports.

Binary layouts (all integers and floats little-endian):

    dataset: b"PSFA" | u32 version=1 | u64 V | u64 B | B x u64 T^(b) |
             B blocks of V*T^(b) float64, column-major (voxel index fastest)
    matrix:  b"PSFM" | u32 version=1 | u64 rows | u64 cols |
             rows*cols float64, column-major
"""

import csv
import json
import logging
import os
import struct

import numpy as np

from .errors import BadMagic, CsvParseError, DataError, NonFiniteValue, TruncatedFile, UnsupportedVersion
from .model import Dataset, VariationalState

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"PSFA"
MATRIX_MAGIC = b"PSFM"
FORMAT_VERSION = 1
_F64 = np.dtype('<f8')


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise TruncatedFile(f"file ended while reading {what} ({len(data)} of {n} bytes)")
    return data


def _read_header(f, magic):
    found = _read_exact(f, 4, "magic bytes")
    if found != magic:
        raise BadMagic(f"expected magic {magic!r}, found {found!r}")
    (version,) = struct.unpack('<I', _read_exact(f, 4, "version"))
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"format version {version} is not supported (expected {FORMAT_VERSION})")


def _read_block(f, rows, cols, what):
    values = np.frombuffer(_read_exact(f, 8 * rows * cols, what), dtype=_F64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteValue(f"{what} contains non-finite values")
    return values.reshape((rows, cols), order='F').astype(np.float64)


def _block_bytes(m):
    return np.asarray(m, dtype=_F64).ravel(order='F').tobytes()


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def write_dataset(ds, path):
    _ensure_parent(path)
    with open(path, 'wb') as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack('<IQQ', FORMAT_VERSION, ds.V, ds.B))
        f.write(struct.pack(f'<{ds.B}Q', *ds.T))
        for x in ds.X:
            f.write(_block_bytes(x))
    logger.info("Wrote dataset %s (V=%d, B=%d)", path, ds.V, ds.B)


def read_dataset(path):
    with open(path, 'rb') as f:
        _read_header(f, DATASET_MAGIC)
        V, B = struct.unpack('<QQ', _read_exact(f, 16, "V and B"))
        T = struct.unpack(f'<{B}Q', _read_exact(f, 8 * B, "timepoint counts"))
        blocks = [_read_block(f, V, T[b], f"subject {b}") for b in range(B)]
        if f.read(1):
            raise DataError(f"trailing bytes after the last subject block in {path}")
    return Dataset(tuple(blocks))


def write_matrix(m, path):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    _ensure_parent(path)
    if path.lower().endswith('.csv'):
        np.savetxt(path, m, delimiter=',', fmt='%.17g')
        return
    with open(path, 'wb') as f:
        f.write(MATRIX_MAGIC)
        f.write(struct.pack('<IQQ', FORMAT_VERSION, m.shape[0], m.shape[1]))
        f.write(_block_bytes(m))


def read_matrix(path):
    """Read a binary .psfm matrix, or a CSV file with one row per line"""
    with open(path, 'rb') as f:
        head = f.read(4)
    if head == MATRIX_MAGIC:
        with open(path, 'rb') as f:
            _read_header(f, MATRIX_MAGIC)
            rows, cols = struct.unpack('<QQ', _read_exact(f, 16, "shape"))
            return _read_block(f, rows, cols, "matrix")
    if head == DATASET_MAGIC:
        raise BadMagic(f"{path} is a dataset file, not a matrix")
    return read_csv_matrix(path)


def read_csv_matrix(path):
    rows = []
    with open(path, newline='', encoding='utf-8') as f:
        for lineno, row in enumerate(csv.reader(f), 1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                raise CsvParseError(f"{path}:{lineno}: non-numeric value in {row!r}") from None
            if len(rows[-1]) != len(rows[0]):
                raise CsvParseError(
                    f"{path}:{lineno}: expected {len(rows[0])} columns, found {len(rows[-1])}")
    if not rows:
        raise CsvParseError(f"{path}: no data rows")
    m = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise NonFiniteValue(f"{path} contains non-finite values")
    return m


def validate_dataset(path):
    """Check a dataset file and report its properties instead of raising"""
    try:
        ds = read_dataset(path)
        total = sum(x.size for x in ds.X)
        return {
            'valid': True,
            'V': ds.V,
            'B': ds.B,
            'T': list(ds.T),
            'values': total,
            'file_bytes': os.path.getsize(path),
        }
    except FileNotFoundError:
        return {'valid': False, 'error': f'File not found: {path}'}
    except DataError as e:
        return {'valid': False, 'error': f'{type(e).__name__}: {e}'}


# ----- checkpoints -----

def write_checkpoint(snapshot, opts, path):
    """Full-state snapshot of one restart"""
    _ensure_parent(path)
    arrays = {f'state__{k}': v for k, v in snapshot['state'].to_arrays().items()}
    arrays['elbo_trace'] = np.asarray(snapshot['elbo_trace'], dtype=np.float64)
    arrays['initial_elbo'] = np.array(snapshot['initial_elbo'])
    arrays['iteration'] = np.array(snapshot['iteration'])
    arrays['monotone_violations'] = np.array(snapshot['monotone_violations'])
    arrays['converged'] = np.array(bool(snapshot['converged']))
    arrays['deleted_components'] = np.array(snapshot.get('deleted_components', 0))
    arrays['options'] = np.array(json.dumps(opts.as_dict(), sort_keys=True))
    tmp = path + '.tmp.npz'
    np.savez(tmp, **arrays)
    os.replace(tmp, path)
    logger.info("Checkpoint %s at iteration %d", path, snapshot['iteration'])


def read_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        state_arrays = {k[len('state__'):]: z[k] for k in z.files if k.startswith('state__')}
        return {
            'state': VariationalState.from_arrays(state_arrays),
            'elbo_trace': [float(v) for v in z['elbo_trace']],
            'initial_elbo': float(z['initial_elbo']),
            'iteration': int(z['iteration']),
            'monotone_violations': int(z['monotone_violations']),
            'converged': bool(z['converged']),
            'deleted_components': int(z['deleted_components']) if 'deleted_components' in z.files else 0,
            'options': json.loads(str(z['options'])),
        }


# ----- reports -----

def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return str(value)
    return value


def write_report(report, path):
    _ensure_parent(path)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(_jsonable(report), f, indent=2, sort_keys=False)
        f.write('\n')


def read_report(path):
    with open(path, encoding='utf-8') as f:
        return json.load(f)
