"""Dense row-major kernels over 2-D numpy arrays.

Matrices are plain ``numpy.ndarray`` objects of ndim 2. The working element
type is float32; float64 inputs are accepted so verification oracles can run
the same code paths in double precision. Every function returns a fresh array
and never mutates its arguments.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .errors import BoundsError, ShapeError

DTYPE = np.float32

Matrix = np.ndarray


def as_matrix(data, dtype=DTYPE) -> Matrix:
    """Copy ``data`` into a C-contiguous 2-D array of ``dtype``."""
    arr = np.array(data, dtype=dtype, order="C", copy=True)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def zeros(rows: int, cols: int, dtype=DTYPE) -> Matrix:
    return np.zeros((rows, cols), dtype=dtype)


def _check_2d(*mats: Matrix) -> None:
    for m in mats:
        if m.ndim != 2:
            raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with a fixed accumulation order.

    Output element ``(i, j)`` is accumulated as
    ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + a[i,2]*b[2,j]) + ...`` in the
    result dtype, one rounding per multiply and per add. Each output row
    depends only on the matching input row, so re-batching rows (fusing
    buckets, splitting them) never changes a single bit of the result.
    BLAS gives no such guarantee, which is why it is not used here.
    """
    _check_2d(a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    dtype = np.result_type(a, b)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    if out.size == 0:
        return out
    a = a.astype(dtype, copy=False)
    b = b.astype(dtype, copy=False)
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[k]
    return out


def relu(a: Matrix) -> Matrix:
    _check_2d(a)
    return np.maximum(a, 0).astype(a.dtype, copy=False)


def add_into(accumulator: Matrix, addend: Matrix) -> Matrix:
    """Element-wise ``accumulator + addend`` as a new array."""
    _check_2d(accumulator, addend)
    if accumulator.shape != addend.shape:
        raise ShapeError(
            f"add shape mismatch: {accumulator.shape} + {addend.shape}"
        )
    return accumulator + addend


def scale_rows(a: Matrix, scale: np.ndarray) -> Matrix:
    """Multiply row ``t`` of ``a`` by ``scale[t]``."""
    _check_2d(a)
    scale = np.asarray(scale)
    if scale.shape != (a.shape[0],):
        raise ShapeError(f"row scale of shape {scale.shape} for matrix {a.shape}")
    return a * scale.astype(a.dtype, copy=False)[:, None]


def _check_range(lo: int, hi: int, bound: int, axis: str) -> None:
    if not 0 <= lo <= hi <= bound:
        raise BoundsError(f"{axis} range [{lo}, {hi}) outside [0, {bound})")


def slice_cols(a: Matrix, lo: int, hi: int) -> Matrix:
    _check_2d(a)
    _check_range(lo, hi, a.shape[1], "column")
    return a[:, lo:hi].copy()


def slice_rows(a: Matrix, lo: int, hi: int) -> Matrix:
    _check_2d(a)
    _check_range(lo, hi, a.shape[0], "row")
    return a[lo:hi].copy()


def concat_rows(parts: Sequence[Matrix], cols: int | None = None, dtype=None) -> Matrix:
    """Stack ``parts`` vertically, preserving order.

    ``cols``/``dtype`` define the result when ``parts`` is empty.
    """
    if not parts:
        if cols is None:
            raise ShapeError("concat_rows of no parts needs an explicit column count")
        return np.zeros((0, cols), dtype=dtype or DTYPE)
    _check_2d(*parts)
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows column counts differ: {sorted(widths)}")
    if cols is not None and cols not in widths:
        raise ShapeError(f"concat_rows expected {cols} columns, got {widths.pop()}")
    return np.concatenate(parts, axis=0)
