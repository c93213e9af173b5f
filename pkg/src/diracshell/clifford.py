"""Dirac/Pauli matrix algebra, chiral projections and spin operators.

All spinor matrices are plain ``numpy`` arrays of shape ``(4, 4)`` and dtype
``complex128``.  Values returned by this module are freshly allocated (or
marked read-only for the module-level constants), so they can be shared
freely across threads.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "SIGMA",
    "ALPHA",
    "BETA",
    "I4",
    "alpha",
    "beta",
    "gamma5",
    "alpha_dot",
    "spin_dot",
    "proj_pm",
    "frobenius_norm",
    "spectral_norm",
    "is_unit_vector",
]

_I2 = np.eye(2, dtype=complex)

SIGMA = np.array(
    [
        [[0, 1], [1, 0]],
        [[0, -1j], [1j, 0]],
        [[1, 0], [0, -1]],
    ],
    dtype=complex,
)

ALPHA = np.zeros((3, 4, 4), dtype=complex)
for _j in range(3):
    ALPHA[_j, :2, 2:] = SIGMA[_j]
    ALPHA[_j, 2:, :2] = SIGMA[_j]

BETA = np.zeros((4, 4), dtype=complex)
BETA[:2, :2] = _I2
BETA[2:, 2:] = -_I2

I4 = np.eye(4, dtype=complex)

_GAMMA5 = -1j * ALPHA[0] @ ALPHA[1] @ ALPHA[2]

for _m in (SIGMA, ALPHA, BETA, I4, _GAMMA5):
    _m.setflags(write=False)

UNIT_TOL = 1e-14


def alpha(j):
    """Return the j-th Dirac alpha matrix, j in {1, 2, 3}."""
    if j not in (1, 2, 3):
        raise ValueError(f"alpha index must be 1, 2 or 3, got {j}")
    return ALPHA[j - 1].copy()


def beta():
    """Return the Dirac beta matrix diag(I2, -I2)."""
    return BETA.copy()


def gamma5():
    """Return the chirality matrix -i a1 a2 a3 (antidiagonal I2 blocks)."""
    return _GAMMA5.copy()


def alpha_dot(x):
    """Return sum_j alpha_j x_j for a real or complex 3-vector x."""
    x = np.asarray(x)
    return np.tensordot(x, ALPHA, axes=(0, 0))


def spin_dot(x):
    """Spin angular momentum S.x = -gamma5 (alpha.x)."""
    return -_GAMMA5 @ alpha_dot(x)


def is_unit_vector(v, tol=UNIT_TOL):
    v = np.asarray(v, dtype=float)
    return v.shape == (3,) and abs(np.linalg.norm(v) - 1.0) <= tol


def proj_pm(nu, sign):
    """Orthogonal projection (I4 -/+ i beta alpha.nu)/2 for a unit normal nu.

    ``sign=+1`` gives the projection with the minus sign in front of
    ``i beta alpha.nu`` (the "+" projection), ``sign=-1`` the complementary
    one.  Raises for non-unit normals.
    """
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    nu = np.asarray(nu, dtype=float)
    if not is_unit_vector(nu, tol=1e-12):
        raise ValueError(f"normal must be a unit vector, |nu| = {np.linalg.norm(nu)!r}")
    return 0.5 * (I4 - sign * 1j * BETA @ alpha_dot(nu))


def frobenius_norm(a):
    return float(np.linalg.norm(np.asarray(a)))


def spectral_norm(a):
    return float(np.linalg.norm(np.asarray(a), ord=2))
