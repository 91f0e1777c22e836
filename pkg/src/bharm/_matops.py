"""Dense/sparse dispatch helpers for per-level matrices.

Level matrices are stored dense (numpy) for small levels and CSR for large
ones; these helpers keep the callers agnostic.
"""
import numpy as np
import scipy.sparse as sp

# Level matrices switch to CSR once either dimension exceeds this.
SPARSE_THRESHOLD = 512


def is_sparse(m) -> bool:
    return sp.issparse(m)


def matvec(m, v: np.ndarray) -> np.ndarray:
    """m @ v as a dense 1-d array."""
    out = m @ v
    return np.asarray(out).reshape(-1)


def rmatvec(m, v: np.ndarray) -> np.ndarray:
    """m.T @ v as a dense 1-d array."""
    out = m.T @ v
    return np.asarray(out).reshape(-1)


def row_sums(m) -> np.ndarray:
    if sp.issparse(m):
        return np.asarray(m.sum(axis=1)).reshape(-1)
    return m.sum(axis=1)


def col_sums(m) -> np.ndarray:
    if sp.issparse(m):
        return np.asarray(m.sum(axis=0)).reshape(-1)
    return m.sum(axis=0)


def scale_rows(m, s: np.ndarray):
    """diag(s) @ m, preserving storage kind."""
    if sp.issparse(m):
        return sp.diags(s) @ m
    return s[:, None] * m


def to_dense(m) -> np.ndarray:
    if sp.issparse(m):
        return m.toarray()
    return np.asarray(m)


def nonzero_entries(m):
    """Yield (i, j, value) over stored nonzeros."""
    if sp.issparse(m):
        coo = m.tocoo()
        yield from zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist())
    else:
        arr = np.asarray(m)
        for i, j in zip(*np.nonzero(arr)):
            yield int(i), int(j), float(arr[i, j])


def maybe_sparse(dense: np.ndarray, threshold: int = SPARSE_THRESHOLD):
    """Return `dense` as CSR when a dimension exceeds the threshold."""
    if max(dense.shape) > threshold:
        return sp.csr_matrix(dense)
    return dense
