"""Closed analytic surfaces with product quadrature, parallel surfaces and shells.

Surfaces are sampled on a Gauss-Legendre (polar, in cos theta) x uniform
(azimuthal) product grid; normals and Weingarten maps are analytic, so the
only discretisation error in downstream operators is the quadrature itself.

Sign convention: the Weingarten map is W = -(d nu), i.e. the *negative*
differential of the outward normal.  A sphere of radius R therefore has
W = -(1/R) * (tangent projector), all principal curvatures equal to -1/R,
and det(1 - eps W) = (1 + eps/R)^2 *grows* with eps.  Most differential
geometry texts use the opposite sign; every jacobian in this package uses
this convention consistently.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SurfaceQuadrature",
    "ShellQuadrature",
    "Density",
    "make_sphere",
    "make_ellipsoid",
    "parallel_surface",
    "transform_eps",
    "transform_eps_inv",
    "shell_quadrature",
    "jacobian_det",
    "mesh_to_csv",
]


@dataclass(frozen=True)
class SurfaceQuadrature:
    """Quadrature nodes/weights plus analytic normal and curvature data.

    ``normals`` is the orientation normal stored with the surface: the
    outward normal of the enclosed domain for a base surface, and
    ``N = -nu o p^{-1}`` (outward with respect to the exterior domain) for a
    parallel surface.  ``nu_transport`` is always the base outward normal
    transported along the offset; it is what jacobians and further offsets
    are built from.  ``weingarten`` is the 3x3 map (acting on the tangent
    plane, zero on the normal) of the *base* surface at the pre-image node,
    in the W = -(d nu) convention.
    """

    nodes: np.ndarray
    weights: np.ndarray
    normals: np.ndarray
    weingarten: np.ndarray
    chart_id: str
    resolution: int
    nu_transport: np.ndarray = None
    parallel_of: tuple = None  # (base SurfaceQuadrature, eps) for parallel surfaces

    def __post_init__(self):
        if self.nu_transport is None:
            object.__setattr__(self, "nu_transport", self.normals)
        for name in ("nodes", "weights", "normals", "weingarten", "nu_transport"):
            getattr(self, name).setflags(write=False)

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    def principal_curvatures(self):
        """Eigenvalues of the Weingarten maps restricted to the tangent planes, (n, 2)."""
        eigs = np.linalg.eigvalsh(self.weingarten)
        # each 3x3 has a structural zero eigenvalue along the normal; drop it
        idx = np.argmin(np.abs(eigs), axis=1)
        keep = np.ones_like(eigs, dtype=bool)
        keep[np.arange(len(idx)), idx] = False
        return eigs[keep].reshape(-1, 2)

    def max_curvature(self):
        return float(np.abs(self.principal_curvatures()).max())

    def area(self):
        return float(self.weights.sum())

    def content_key(self):
        """Stable content hash of the geometric data (used by operator caches)."""
        import hashlib

        h = hashlib.sha256()
        for a in (self.nodes, self.weights, self.normals):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class ShellQuadrature:
    """Tensor (surface x radial Gauss) quadrature of the tubular shell."""

    base: SurfaceQuadrature
    epsilon: float
    radial_nodes: np.ndarray
    radial_weights: np.ndarray
    nodes: np.ndarray      # (n_surf * n_radial, 3)
    weights: np.ndarray    # includes det(1 - t W) jacobians

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    def volume(self):
        return float(self.weights.sum())


@dataclass
class Density:
    """A C^4 value per node of a surface quadrature."""

    surface: SurfaceQuadrature
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != (self.surface.n_nodes, 4):
            raise ValueError(
                f"density shape {self.values.shape} does not match surface "
                f"with {self.surface.n_nodes} nodes"
            )

    def norm(self):
        """Discrete L^2 norm (sum_i w_i |f_i|^2)^(1/2)."""
        return float(
            np.sqrt(np.sum(self.surface.weights * np.sum(np.abs(self.values) ** 2, axis=1)))
        )


def _grid(n_polar, n_azimuth):
    u, gw = np.polynomial.legendre.leggauss(n_polar)  # u = cos(theta)
    phi = 2 * np.pi * np.arange(n_azimuth) / n_azimuth
    dphi = 2 * np.pi / n_azimuth
    return u, gw, phi, dphi


def make_sphere(radius, N):
    """Sphere of the given radius; N polar Gauss nodes x 2N uniform azimuthal."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if N < 4:
        raise ValueError("resolution N must be at least 4")
    u, gw, phi, dphi = _grid(N, 2 * N)
    su = np.sqrt(1 - u**2)
    x = radius * np.outer(su, np.cos(phi))
    y = radius * np.outer(su, np.sin(phi))
    z = radius * np.outer(u, np.ones_like(phi))
    nodes = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    weights = (radius**2 * np.outer(gw, np.full_like(phi, dphi))).reshape(-1)
    normals = nodes / radius
    tang = np.eye(3) - normals[:, :, None] * normals[:, None, :]
    weingarten = -tang / radius
    return SurfaceQuadrature(
        nodes=nodes,
        weights=weights,
        normals=normals,
        weingarten=weingarten,
        chart_id=f"sphere(R={radius})",
        resolution=N,
    )


def make_ellipsoid(semiaxes, N):
    """Ellipsoid x^2/a^2 + y^2/b^2 + z^2/c^2 = 1 on the same product grid."""
    a, b, c = (float(s) for s in semiaxes)
    if min(a, b, c) <= 0:
        raise ValueError(f"degenerate semiaxes {semiaxes}")
    if N < 4:
        raise ValueError("resolution N must be at least 4")
    u, gw, phi, dphi = _grid(N, 2 * N)
    su = np.sqrt(1 - u**2)
    x = a * np.outer(su, np.cos(phi))
    y = b * np.outer(su, np.sin(phi))
    z = c * np.outer(u, np.ones_like(phi))
    nodes = np.stack([x, y, z], axis=-1).reshape(-1, 3)

    # surface element in (u, phi): |T_theta x T_phi| / sin(theta)
    uu = np.repeat(u, 2 * N)
    pp = np.tile(phi, N)
    ww = np.repeat(gw, 2 * N) * dphi
    # T_theta = d(node)/d(theta), with u = cos theta
    st = np.sqrt(1 - uu**2)
    t_theta = np.stack([a * uu * np.cos(pp), b * uu * np.sin(pp), -c * st], axis=1)
    t_phi = np.stack([-a * st * np.sin(pp), b * st * np.cos(pp), np.zeros_like(pp)], axis=1)
    cross = np.cross(t_theta, t_phi)
    jac = np.linalg.norm(cross, axis=1) / st
    weights = ww * jac

    grad = 2 * nodes / np.array([a**2, b**2, c**2])
    gn = np.linalg.norm(grad, axis=1)
    normals = grad / gn[:, None]
    tang = np.eye(3) - normals[:, :, None] * normals[:, None, :]
    hess = np.diag([2 / a**2, 2 / b**2, 2 / c**2])
    weingarten = -np.einsum("nij,jk,nkl->nil", tang, hess, tang) / gn[:, None, None]
    return SurfaceQuadrature(
        nodes=nodes,
        weights=weights,
        normals=normals,
        weingarten=weingarten,
        chart_id=f"ellipsoid(a={a},b={b},c={c})",
        resolution=N,
    )


def jacobian_det(surface, t):
    """det(1 - t W) at every node, for a scalar or per-node offset t."""
    t = np.asarray(t, dtype=float)
    w = surface.weingarten
    mats = np.eye(3) - t.reshape(-1, 1, 1) * w if t.ndim else np.eye(3) - t * w
    det = np.linalg.det(mats)
    # W kills the normal direction, so det includes a structural factor 1
    return det


def check_eps_guard(surface, eps):
    kmax = surface.max_curvature()
    if kmax > 0 and eps > 0.5 / kmax:
        raise ValueError(
            f"eps = {eps} exceeds the embedding guard 0.5/max|curvature| = {0.5 / kmax:.4g}"
        )


def parallel_surface(base, eps):
    """Surface at distance eps along the outward normal of ``base``.

    Nodes move by ``eps * nu``, weights pick up det(1 - eps W), and the
    stored orientation normal is N = -nu (outward with respect to the
    exterior domain).  Offsetting a parallel surface composes the offsets on
    the original base surface.
    """
    if base.parallel_of is not None:
        root, e0 = base.parallel_of
        return parallel_surface(root, e0 + eps)
    if eps == 0:
        return base
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    check_eps_guard(base, eps)
    det = jacobian_det(base, eps)
    if det.min() <= 0:
        raise ValueError("parallel surface not embedded: jacobian det(1 - eps W) <= 0")
    nodes = base.nodes + eps * base.nu_transport
    weights = base.weights * det
    return SurfaceQuadrature(
        nodes=nodes,
        weights=weights,
        normals=-base.nu_transport,
        weingarten=base.weingarten,
        chart_id=f"{base.chart_id}+eps({eps})",
        resolution=base.resolution,
        nu_transport=base.nu_transport,
        parallel_of=(base, eps),
    )


def transform_eps(f: Density, eps) -> Density:
    """Transport a density from the base surface to its eps-parallel surface.

    Pointwise ``psi(p^{-1}(x)) / det(1 - eps W(x_base))``, matching the node
    pairing of ``parallel_surface``.
    """
    target = parallel_surface(f.surface, eps)
    det = jacobian_det(f.surface, eps)
    return Density(surface=target, values=f.values / det[:, None])


def transform_eps_inv(g: Density) -> Density:
    """Inverse transport: multiply by det(1 - eps W) and return to the base mesh."""
    if g.surface.parallel_of is None:
        raise ValueError("density does not live on a parallel surface")
    base, eps = g.surface.parallel_of
    det = jacobian_det(base, eps)
    return Density(surface=base, values=g.values * det[:, None])


def shell_quadrature(base, eps, n_radial):
    """Tensor quadrature of the shell {x + t nu : t in (0, eps)}."""
    if n_radial < 2:
        raise ValueError("need at least 2 radial Gauss points")
    check_eps_guard(base, eps)
    t, tw = np.polynomial.legendre.leggauss(n_radial)
    t = 0.5 * eps * (t + 1.0)
    tw = 0.5 * eps * tw
    nodes = (base.nodes[:, None, :] + t[None, :, None] * base.nu_transport[:, None, :]).reshape(
        -1, 3
    )
    det = np.stack([jacobian_det(base, ti) for ti in t], axis=1)  # (n_surf, n_radial)
    weights = (base.weights[:, None] * tw[None, :] * det).reshape(-1)
    if (det <= 0).any():
        raise ValueError("shell not embedded for this eps")
    return ShellQuadrature(
        base=base,
        epsilon=float(eps),
        radial_nodes=t,
        radial_weights=tw,
        nodes=nodes,
        weights=weights,
    )


def mesh_to_csv(surface, path_or_buf):
    """Dump the mesh as CSV: index, node xyz, weight, normal xyz, two curvatures."""
    curv = surface.principal_curvatures()
    header = "index,x,y,z,weight,nx,ny,nz,kappa1,kappa2"
    rows = np.column_stack(
        [
            np.arange(surface.n_nodes, dtype=float),
            surface.nodes,
            surface.weights,
            surface.normals,
            curv,
        ]
    )
    if isinstance(path_or_buf, (str, bytes)):
        with open(path_or_buf, "w") as fh:
            _write_csv(fh, header, rows)
    else:
        _write_csv(path_or_buf, header, rows)


def _write_csv(fh, header, rows):
    fh.write(header + "\n")
    for row in rows:
        fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
