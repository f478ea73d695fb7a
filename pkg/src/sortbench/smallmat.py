"""Dense kernels for the tiny fixed-shape matrices of the tracking pipeline.

Matrices are plain C-contiguous ``float64`` numpy arrays with at most
``MAX_DIM`` rows and columns. Every kernel comes in two flavours:

* ``*_into`` functions are numba-compiled, write into caller-provided
  buffers and never allocate. The tracker calls these on its hot path.
* The unsuffixed functions (``matmul``, ``cholesky``, ...) validate shapes
  and finiteness, allocate the result unless ``out=`` is given, and raise
  on contract violations.
"""

from __future__ import annotations

import numba
import numpy as np

MAX_DIM = 16
SYMMETRY_TOL = 1e-9

EW_ADD = 0
EW_SUB = 1
EW_MUL = 2
EW_MIN = 3
_EW_OPS = {"add": EW_ADD, "sub": EW_SUB, "mul": EW_MUL, "min": EW_MIN}

jit = numba.njit(cache=True, nogil=True, fastmath=False)


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class DecompositionError(np.linalg.LinAlgError):
    """Matrix is not symmetric positive definite."""


# ---------------------------------------------------------------------------
# compiled kernels


@jit
def matmul_into(a, b, out):
    # i-t-j order: terms are summed in t order, so skipping zero a[i, t]
    # (sparse F and H) leaves results bit-identical for finite inputs
    n, k = a.shape
    m = b.shape[1]
    for i in range(n):
        for j in range(m):
            out[i, j] = 0.0
        for t in range(k):
            ait = a[i, t]
            if ait != 0.0:
                for j in range(m):
                    out[i, j] += ait * b[t, j]


@jit
def matmul_nt_into(a, b, out):
    """out = a @ b.T without materialising the transpose; zero b[j, t] skipped."""
    n, k = a.shape
    m = b.shape[0]
    for i in range(n):
        for j in range(m):
            out[i, j] = 0.0
    for j in range(m):
        for t in range(k):
            bjt = b[j, t]
            if bjt != 0.0:
                for i in range(n):
                    out[i, j] += a[i, t] * bjt


@jit
def matvec_into(a, v, out):
    n, k = a.shape
    for i in range(n):
        s = 0.0
        for t in range(k):
            ait = a[i, t]
            if ait != 0.0:
                s += ait * v[t]
        out[i] = s


@jit
def transpose_into(a, out):
    n, m = a.shape
    for i in range(n):
        for j in range(m):
            out[j, i] = a[i, j]


@jit
def symmetrize_inplace(a):
    n = a.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            s = 0.5 * (a[i, j] + a[j, i])
            a[i, j] = s
            a[j, i] = s


@jit
def cholesky_into(a, out):
    """Lower Cholesky factor of ``a`` (lower triangle read only).

    Returns False, leaving ``out`` partially written, when a pivot is not
    strictly positive.
    """
    n = a.shape[0]
    for i in range(n):
        for j in range(n):
            out[i, j] = 0.0
    for j in range(n):
        d = a[j, j]
        for t in range(j):
            d -= out[j, t] * out[j, t]
        if not d > 0.0:
            return False
        ljj = np.sqrt(d)
        out[j, j] = ljj
        for i in range(j + 1, n):
            s = a[i, j]
            for t in range(j):
                s -= out[i, t] * out[j, t]
            out[i, j] = s / ljj
    return True


@jit
def inverse_spd_into(a, out, work):
    """Inverse of an SPD matrix via its Cholesky factor.

    ``work`` receives the factor L. Each column of the inverse is found by a
    forward solve with L followed by a back solve with L.T.
    """
    n = a.shape[0]
    if not cholesky_into(a, work):
        return False
    for c in range(n):
        # forward: L y = e_c, y stored in out[:, c]
        for i in range(n):
            s = 1.0 if i == c else 0.0
            for t in range(i):
                s -= work[i, t] * out[t, c]
            out[i, c] = s / work[i, i]
        # backward: L.T x = y
        for i in range(n - 1, -1, -1):
            s = out[i, c]
            for t in range(i + 1, n):
                s -= work[t, i] * out[t, c]
            out[i, c] = s / work[i, i]
    symmetrize_inplace(out)
    return True


@jit
def ew_into(op, a, b, out):
    """Elementwise binary op over flat arrays; op is one of the EW_* codes."""
    for i in range(a.shape[0]):
        x = a[i]
        y = b[i]
        if op == EW_ADD:
            out[i] = x + y
        elif op == EW_SUB:
            out[i] = x - y
        elif op == EW_MUL:
            out[i] = x * y
        else:
            out[i] = x if x <= y else y


@jit
def scale_into(a, k, out):
    for i in range(a.shape[0]):
        out[i] = a[i] * k


# ---------------------------------------------------------------------------
# validated API


def _as_array(a, ndim: int, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise ShapeError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if arr.size == 0 or max(arr.shape) > MAX_DIM:
        raise ShapeError(f"{name}: dimensions must lie in 1..{MAX_DIM}, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: non-finite entries")
    return arr


def as_mat(a, name: str = "matrix") -> np.ndarray:
    return _as_array(a, 2, name)


def as_vec(v, name: str = "vector") -> np.ndarray:
    return _as_array(v, 1, name)


def _as_any(a, name: str) -> np.ndarray:
    arr = np.asarray(a)
    return as_vec(arr, name) if arr.ndim == 1 else as_mat(arr, name)


def _target(out, shape, name="out") -> np.ndarray:
    if out is None:
        return np.empty(shape)
    if out.shape != shape or out.dtype != np.float64 or not out.flags.c_contiguous:
        raise ShapeError(f"{name}: need C-contiguous float64 {shape}, got {out.dtype} {out.shape}")
    return out


def _finite(out: np.ndarray) -> np.ndarray:
    if not np.isfinite(out).all():
        raise FloatingPointError("kernel produced non-finite values")
    return out


def matmul(a, b, out=None) -> np.ndarray:
    a, b = as_mat(a, "a"), as_mat(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    out = _target(out, (a.shape[0], b.shape[1]))
    matmul_into(a, b, out)
    return _finite(out)


def matvec(a, v, out=None) -> np.ndarray:
    a, v = as_mat(a, "a"), as_vec(v, "v")
    if a.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: {a.shape} x {v.shape}")
    out = _target(out, (a.shape[0],))
    matvec_into(a, v, out)
    return _finite(out)


def transpose(a, out=None) -> np.ndarray:
    a = as_mat(a, "a")
    out = _target(out, (a.shape[1], a.shape[0]))
    transpose_into(a, out)
    return out


def _check_symmetric(a: np.ndarray) -> None:
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    if np.max(np.abs(a - a.T)) > SYMMETRY_TOL:
        raise DecompositionError("matrix is not symmetric")


def cholesky(a, out=None) -> np.ndarray:
    """Lower-triangular L with L @ L.T == a.

    Raises DecompositionError if ``a`` is not symmetric positive definite.
    """
    a = as_mat(a, "a")
    _check_symmetric(a)
    out = _target(out, a.shape)
    if not cholesky_into(a, out):
        raise DecompositionError("matrix is not positive definite")
    return out


def inverse_spd(a, out=None) -> np.ndarray:
    a = as_mat(a, "a")
    _check_symmetric(a)
    out = _target(out, a.shape)
    work = np.empty(a.shape)
    if not inverse_spd_into(a, out, work):
        raise DecompositionError("matrix is not positive definite")
    return _finite(out)


def ew_binary(op: str, a, b, out=None) -> np.ndarray:
    """Elementwise ``add``, ``sub``, ``mul`` or ``min`` of same-shape operands."""
    try:
        code = _EW_OPS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    a, b = _as_any(a, "a"), _as_any(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"{op}: {a.shape} vs {b.shape}")
    out = _target(out, a.shape)
    ew_into(code, a.reshape(-1), b.reshape(-1), out.reshape(-1))
    return _finite(out)


def scale(a, k: float, out=None) -> np.ndarray:
    a = _as_any(a, "a")
    out = _target(out, a.shape)
    scale_into(a.reshape(-1), float(k), out.reshape(-1))
    return _finite(out)
