"""Pure-Python (numpy) versions of the compiled kernels.

Same accumulation order as ``_kernels.pyx``: each step is one rounded product
and one rounded add, vectorised across the non-reduced axis.
"""
import numpy as np


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    if b.shape[0] != k:
        raise ValueError(f"inner dimensions differ: {k} vs {b.shape[0]}")
    out = np.zeros((m, b.shape[1]), dtype=a.dtype)
    for p in range(k):
        out += a[:, p : p + 1] * b[p : p + 1, :]
    return out


def row_sum(x: np.ndarray) -> np.ndarray:
    out = np.zeros(x.shape[0], dtype=x.dtype)
    for j in range(x.shape[1]):
        out += x[:, j]
    return out


def col_sum(x: np.ndarray) -> np.ndarray:
    out = np.zeros(x.shape[1], dtype=x.dtype)
    for i in range(x.shape[0]):
        out += x[i]
    return out
