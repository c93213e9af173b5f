"""Fundamental solution of the free Dirac operator and its singular split.

The kernel of ``(D_m - z)^{-1}`` is

    phi(x) = e^{ik|x|}/(4 pi |x|) (z + m beta + (1 - ik|x|) i alpha.x / |x|^2)

with ``k = sqrt(z^2 - m^2)`` on the branch ``Im k > 0``.  Everything here is a
pure function; vectorised variants evaluate the kernel on point clouds and
are the workhorses of the assembly routines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clifford import ALPHA, BETA, I4, alpha_dot

__all__ = [
    "SpectralPoint",
    "branch_sqrt",
    "phi",
    "phi_block",
    "kernel_split",
    "dirac_apply_grid",
]

BRANCH_POINT_TOL = 1e-10


def branch_sqrt(z, m):
    """sqrt(z^2 - m^2) on the branch with positive imaginary part.

    Rejects the branch points ``z = +/- m`` and the essential-spectrum rays
    ``z`` real with ``z^2 >= m^2`` where no such branch value exists.
    """
    z = complex(z)
    m = float(m)
    if abs(z - m) < BRANCH_POINT_TOL or abs(z + m) < BRANCH_POINT_TOL:
        raise ValueError(f"z = {z} is too close to a branch point +/-{m}")
    w = z * z - m * m
    if w.imag == 0.0 and w.real >= 0.0:
        raise ValueError(
            f"z = {z} lies on the essential-spectrum set (z^2 - m^2 real >= 0); "
            "no branch value with Im > 0 exists"
        )
    k = np.sqrt(complex(w))
    if k.imag <= 0.0:
        k = -k
    return complex(k)


@dataclass(frozen=True)
class SpectralPoint:
    """Spectral parameter z, mass m and momentum k = sqrt(z^2 - m^2), Im k > 0.

    ``limiting_from_above`` builds the boundary value ``k(z + i0)`` for real z
    beyond the mass gap; it is used by the real-axis eigenvalue scans where
    the strict branch is undefined.
    """

    z: complex
    m: float
    k: complex

    def __post_init__(self):
        if self.m <= 0:
            raise ValueError("mass must be positive")
        if abs(self.k**2 - (self.z**2 - self.m**2)) > 1e-13 * max(
            1.0, abs(self.z) ** 2 + self.m**2
        ):
            raise ValueError("k is not a square root of z^2 - m^2")

    @classmethod
    def make(cls, z, m):
        return cls(z=complex(z), m=float(m), k=branch_sqrt(z, m))

    @classmethod
    def limiting_from_above(cls, z, m):
        """Boundary value of the resolvent kernel for z real, approached from Im z > 0."""
        z = complex(z)
        m = float(m)
        if abs(z - m) < BRANCH_POINT_TOL or abs(z + m) < BRANCH_POINT_TOL:
            raise ValueError(f"z = {z} is too close to a branch point +/-{m}")
        w = z * z - m * m
        if w.imag != 0.0 or w.real < 0.0:
            return cls.make(z, m)
        k = np.sqrt(w.real)
        if z.real < 0:
            k = -k
        return cls(z=z, m=m, k=complex(k))

    def with_mass(self, m):
        return SpectralPoint.make(self.z, m)


def phi(sp: SpectralPoint, x):
    """Fundamental-solution matrix at a single offset x != 0."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x)
    if r == 0.0:
        raise ValueError("kernel evaluated at x = 0")
    k = sp.k
    osc = np.exp(1j * k * r) / (4 * np.pi * r)
    return osc * ((sp.z + 0j) * I4 + sp.m * BETA + (1 - 1j * k * r) * 1j * alpha_dot(x) / r**2)


def phi_block(sp: SpectralPoint, targets, sources, min_dist=None):
    """Kernel evaluated pairwise: returns array of shape (nt, ns, 4, 4).

    ``targets`` (nt, 3) and ``sources`` (ns, 3) must be disjoint point sets;
    a positive ``min_dist`` raises if any pair comes closer than the guard.
    """
    t = np.asarray(targets, dtype=float).reshape(-1, 3)
    s = np.asarray(sources, dtype=float).reshape(-1, 3)
    d = t[:, None, :] - s[None, :, :]
    r = np.linalg.norm(d, axis=2)
    if min_dist is not None and r.min(initial=np.inf) < min_dist:
        raise ValueError(
            f"target within guard distance of a source node "
            f"(min pair distance {r.min():.3e} < {min_dist:.3e})"
        )
    if (r == 0.0).any():
        raise ValueError("kernel evaluated at coincident target/source")
    k = sp.k
    osc = np.exp(1j * k * r) / (4 * np.pi * r)
    ax = np.tensordot(d, ALPHA, axes=(2, 0))  # (nt, ns, 4, 4)
    out = ((1 - 1j * k * r) * 1j / r**2)[..., None, None] * ax
    out += sp.z * I4 + sp.m * BETA
    out *= osc[..., None, None]
    return out


def kernel_split(sp: SpectralPoint, x):
    """Split phi = weak + strong with strong(x) = i alpha.x/(4 pi |x|^3).

    The strong part is the odd, homogeneous degree -2 Riesz kernel; the weak
    remainder is O(1/|x|) at the origin.
    """
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x)
    if r == 0.0:
        raise ValueError("kernel evaluated at x = 0")
    strong = 1j * alpha_dot(x) / (4 * np.pi * r**3)
    weak = phi(sp, x) - strong
    return weak, strong


_FD4_OFFSETS = np.array([-2.0, -1.0, 1.0, 2.0])
_FD4_WEIGHTS = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0


def dirac_apply_grid(fun, x, m, step=1e-4):
    """(D_m u)(x) = -i alpha.grad u + m beta u via a 4th-order stencil.

    ``fun`` maps a 3-vector to a C^4 value; used as the independent
    finite-difference oracle when checking that kernel columns and resolvent
    outputs satisfy the Dirac equation off the singular support.
    """
    x = np.asarray(x, dtype=float)
    u0 = np.asarray(fun(x))
    grad = np.zeros((3,) + u0.shape, dtype=complex)
    for j in range(3):
        acc = np.zeros_like(u0)
        for off, w in zip(_FD4_OFFSETS, _FD4_WEIGHTS):
            xp = x.copy()
            xp[j] += off * step
            acc = acc + w * np.asarray(fun(xp))
        grad[j] = acc / step
    du = -1j * np.einsum("jab,jb->a", ALPHA, grad) + m * (BETA @ u0)
    return du
