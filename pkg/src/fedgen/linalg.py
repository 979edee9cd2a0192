"""Dense matrix helpers and seeded random streams.

Matrices are plain two-dimensional ``float64`` numpy arrays. The helpers here
add the shape checks and error messages the rest of the package relies on.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError

Matrix = np.ndarray


def as_matrix(a, name: str = "matrix") -> Matrix:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product ``a @ b`` with an explicit shape check."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def add(a: Matrix, b: Matrix) -> Matrix:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"cannot add {a.shape} and {b.shape}")
    return a + b


def scale(a: Matrix, s: float) -> Matrix:
    return as_matrix(a) * float(s)


def transpose(a: Matrix) -> Matrix:
    return as_matrix(a).T.copy()


def zeros(rows: int, cols: int) -> Matrix:
    if rows < 1 or cols < 1:
        raise ShapeError(f"matrix dimensions must be positive, got ({rows}, {cols})")
    return np.zeros((rows, cols))


def gaussian_init(rng: np.random.Generator, rows: int, cols: int, stddev: float) -> Matrix:
    """I.i.d. normal(0, stddev**2) entries."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"matrix dimensions must be positive, got ({rows}, {cols})")
    return rng.normal(0.0, stddev, size=(rows, cols))


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for ``(seed, *stream)``.

    Distinct stream keys give statistically independent sequences, so e.g.
    client selection can be varied without disturbing model initialization.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


def dirichlet_sample(rng: np.random.Generator, alpha: float, dim: int) -> np.ndarray:
    """Draw a probability vector from a symmetric Dirichlet(alpha).

    Normalized Gamma(alpha, 1) variates. For ``alpha < 1`` the draws are
    made as Gamma(alpha + 1) * U**(1/alpha) and kept in log space, otherwise
    small concentrations underflow to an all-zero vector.
    """
    if not alpha > 0:
        raise DomainError(f"dirichlet concentration must be positive, got {alpha}")
    if dim < 1:
        raise DomainError(f"dirichlet dimension must be >= 1, got {dim}")
    if alpha < 1.0:
        log_g = np.log(rng.standard_gamma(alpha + 1.0, size=dim))
        log_g += np.log(rng.random(size=dim)) / alpha
    else:
        log_g = np.log(rng.standard_gamma(alpha, size=dim))
    w = np.exp(log_g - log_g.max())
    return w / w.sum()
