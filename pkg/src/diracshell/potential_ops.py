"""Discretised layer potentials, singular Cauchy operators and Poincare-Steklov maps.

Densities are flattened node-major: a C^4 value per quadrature node gives a
vector of length 4n.  Operators are dense complex matrices acting on such
vectors, wrapped in :class:`BlockOperator` together with their source/target
quadratures so weighted norms can be computed.

Principal value discretisation
------------------------------
The Cauchy operator is assembled by puncturing the diagonal node.  On the
azimuthally uniform product grids of :mod:`.geometry` the odd, degree -2 part
of the kernel then cancels pairwise, which yields a consistent principal
value.  The remaining (weak) part of the kernel loses the contribution of the
punctured cell; by default that cell is restored analytically by integrating
the flat-patch limit of the weak kernel over an equal-area disc,

    diag_i += (z + m beta) * (e^{i k r_i} - 1) / (2 i k),   r_i = sqrt(w_i / pi).

For masses of order one this term is O(h) and only sharpens convergence, but
for the large shell masses used here it tends to beta/2 and is *not* small:
without it every large-mass operator would be off at order one.  Pass
``local_patch=False`` for the bare punctured sum.

Side conventions
----------------
``trace_limits(surf, sp, side)`` returns the one-sided trace operator
``-/+ (i/2) alpha.n + C`` with respect to the surface's *stored* normal
``n``; ``side=+1`` is the limit taken from the domain the stored normal
points out of.  :data:`SIDE_OF_DOMAIN` maps named regions to sides; it is the
single place where the geometry of the shell enters the trace bookkeeping.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .clifford import BETA, I4, ALPHA, alpha_dot, proj_pm
from .geometry import SurfaceQuadrature
from .kernel import SpectralPoint, phi_block

__all__ = [
    "BlockOperator",
    "SingularOperatorError",
    "SIDE_OF_DOMAIN",
    "flatten",
    "unflatten",
    "block_diag_apply",
    "block_diag_expand",
    "projector_blocks",
    "assemble_layer",
    "assemble_cauchy",
    "trace_limits",
    "lambda_pm",
    "invert",
    "volume_potential",
    "ps_fixed",
    "ps_eps",
    "ShellOperators",
    "weighted_operator_norm",
    "probe_operator_norm",
    "cauchy_product_defect",
    "OperatorCache",
]

CHUNK_TARGET_NODES = 128
COND_LIMIT = 1e12


class SingularOperatorError(RuntimeError):
    """Raised when a boundary system is numerically singular."""


# side = +1: non-tangential limit from the domain the stored normal points out of
SIDE_OF_DOMAIN = {
    ("base", "omega_plus"): +1,
    ("base", "shell"): -1,
    ("base", "omega_minus"): -1,
    ("parallel", "omega_minus_eps"): +1,
    ("parallel", "shell"): -1,
}


def flatten(values):
    return np.asarray(values, dtype=complex).reshape(-1)


def unflatten(vec):
    return np.asarray(vec, dtype=complex).reshape(-1, 4)


def block_diag_apply(mats, vec):
    """Apply per-node 4x4 blocks (n,4,4) to a flat vector of length 4n."""
    v = unflatten(vec)
    return np.einsum("nab,nb->na", mats, v).reshape(-1)


def block_diag_expand(mats):
    """Dense (4n, 4n) matrix with the given 4x4 blocks on the diagonal."""
    n = mats.shape[0]
    out = np.zeros((4 * n, 4 * n), dtype=complex)
    for i in range(n):
        out[4 * i : 4 * i + 4, 4 * i : 4 * i + 4] = mats[i]
    return out


def left_block_scale(mats, matrix):
    """Left-multiply a (4n, m) matrix by per-target-node 4x4 blocks."""
    n = mats.shape[0]
    m = matrix.shape[1]
    resh = matrix.reshape(n, 4, m)
    return np.einsum("nab,nbm->nam", mats, resh).reshape(4 * n, m)


def projector_blocks(surface, sign, use_transport=True):
    """(n,4,4) array of projections (I -/+ i beta alpha.nu)/2 at the nodes.

    ``use_transport`` selects the transported base normal (the fixed normal
    of the Krein formulas); otherwise the stored orientation normal is used.
    """
    nus = surface.nu_transport if use_transport else surface.normals
    a = np.tensordot(nus, ALPHA, axes=(1, 0))  # (n,4,4)
    blocks = 0.5 * (I4[None] - sign * 1j * (BETA[None] @ a))
    return blocks


@dataclass
class BlockOperator:
    """Dense operator between density spaces with quadrature metadata."""

    matrix: np.ndarray
    source: object
    target: object
    sp: SpectralPoint
    kind: str

    def apply(self, vec):
        return self.matrix @ np.asarray(vec, dtype=complex).reshape(-1)

    @property
    def shape(self):
        return self.matrix.shape


def _source_weights(source):
    if isinstance(source, SurfaceQuadrature):
        return source.weights
    return np.asarray(source)


def assemble_layer(src, targets, sp, min_dist=None, chunk=CHUNK_TARGET_NODES):
    """Potential operator: (Phi f)(t) = sum_i w_i phi(t - y_i) f_i.

    ``targets`` may be a point array or another SurfaceQuadrature (for
    cross-surface blocks).  Targets must stay clear of the source nodes;
    ``min_dist`` (default: half the local mesh spacing estimate) guards this.
    """
    tgt_surface = targets if isinstance(targets, SurfaceQuadrature) else None
    pts = targets.nodes if tgt_surface is not None else np.asarray(targets, dtype=float)
    pts = pts.reshape(-1, 3)
    if min_dist is None:
        min_dist = 0.05 * np.sqrt(np.median(src.weights))
    nt, ns = pts.shape[0], src.n_nodes
    out = np.empty((4 * nt, 4 * ns), dtype=complex)
    for lo in range(0, nt, chunk):
        hi = min(lo + chunk, nt)
        blk = phi_block(sp, pts[lo:hi], src.nodes, min_dist=min_dist)
        blk *= src.weights[None, :, None, None]
        out[4 * lo : 4 * hi] = blk.transpose(0, 2, 1, 3).reshape(4 * (hi - lo), 4 * ns)
    return BlockOperator(
        matrix=out,
        source=src,
        target=tgt_surface if tgt_surface is not None else pts,
        sp=sp,
        kind="layer",
    )


def _patch_blocks(surface, sp):
    """Flat-patch integral of the weak kernel over the punctured cells, (n,4,4)."""
    r = np.sqrt(surface.weights / np.pi)
    k = sp.k
    fac = (np.exp(1j * k * r) - 1.0) / (2j * k)
    zb = sp.z * I4 + sp.m * BETA
    return fac[:, None, None] * zb[None]


def riesz_momentum(surface):
    """Exact principal value of the Riesz kernel against a reference density.

    Returns ``(rho, m)`` with ``rho`` a positive density per node and ``m``
    per-node 3-vectors such that

        PV int (x - y) rho(y) / (4 pi |x - y|^3) dsigma(y) = m(x).

    For spheres (including parallel surfaces of spheres) ``rho = 1`` and
    ``m = nu/2`` with the outward ball normal.  For base ellipsoids the
    homoeoid density ``rho = 1/|grad G|`` has a constant interior potential,
    so its exterior gradient (elementary in ellipsoidal coordinates) gives
    the principal value exactly.
    """
    root, offset = surface, 0.0
    while root.parallel_of is not None:
        root, eps = root.parallel_of
        offset += eps
    cid = root.chart_id
    if cid.startswith("sphere"):
        n = surface.n_nodes
        return np.ones(n), 0.5 * surface.nu_transport
    if cid.startswith("ellipsoid"):
        if offset != 0.0:
            raise NotImplementedError(
                "exact Riesz momentum is not available for parallel surfaces of ellipsoids"
            )
        a, b, c = _ellipsoid_semiaxes(cid)
        grad_norm = 2.0 * np.linalg.norm(
            surface.nodes / np.array([a**2, b**2, c**2]), axis=1
        )
        rho = 1.0 / grad_norm
        q_total = float(np.sum(surface.weights * rho))
        m = (q_total / (4 * np.pi * a * b * c)) * surface.nu_transport * rho[:, None]
        return rho, m
    raise NotImplementedError(f"no exact Riesz momentum for surface {cid!r}")


def _ellipsoid_semiaxes(chart_id):
    inner = chart_id[len("ellipsoid(") : -1]
    parts = dict(p.split("=") for p in inner.split(","))
    return float(parts["a"]), float(parts["b"]), float(parts["c"])


def strong_part_row_sums(surf, chunk=4 * CHUNK_TARGET_NODES):
    """s_i = sum_{j != i} w_j rho_j (x_i - y_j) / (4 pi r^3), per node."""
    rho, _ = riesz_momentum(surf)
    n = surf.n_nodes
    s = np.empty((n, 3))
    wr = surf.weights * rho
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        d = surf.nodes[lo:hi, None, :] - surf.nodes[None, :, :]
        r = np.linalg.norm(d, axis=2)
        sub = np.arange(lo, hi)
        r[np.arange(hi - lo), sub] = 1.0
        v = wr[None, :, None] * d / r[..., None] ** 3
        v[np.arange(hi - lo), sub] = 0.0
        s[lo:hi] = v.sum(axis=1) / (4 * np.pi)
    return s


def assemble_cauchy(surf, sp, local_patch=True, calibrate=False, chunk=CHUNK_TARGET_NODES):
    """Principal-value Cauchy operator on a closed surface.

    Punctured-diagonal Nystrom sum with two analytic diagonal corrections:

    * singularity subtraction of the odd, degree -2 part of the kernel
      against the exact Riesz momentum of the surface (the punctured sum of
      that part alone does not converge on a polar-asymmetric grid), and
    * the flat-patch integral of the weak kernel over the punctured cell
      (``local_patch``), which is O(h) at mass of order one but O(1) for the
      large shell masses.

    Both amount to adding a 4x4 block per diagonal node.  ``calibrate``
    additionally applies the least-squares diagonal adjustment enforcing
    ((alpha.n) C)^2 = -1/4 on constant densities; it is an accuracy booster
    and never enabled implicitly.
    """
    n = surf.n_nodes
    out = np.empty((4 * n, 4 * n), dtype=complex)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        blk = _punctured_block(surf, sp, lo, hi)
        out[4 * lo : 4 * hi] = blk
    diag = _cauchy_diagonal(surf, sp, local_patch, matrix=out)
    for i in range(n):
        out[4 * i : 4 * i + 4, 4 * i : 4 * i + 4] += diag[i]
    op = BlockOperator(matrix=out, source=surf, target=surf, sp=sp, kind="cauchy")
    if calibrate:
        _calibrate_diagonal(op)
    return op


def sphere_self_moment(sp, radius):
    """Exact principal value of the full kernel over a sphere, against 1.

    For a target on the sphere the azimuthal average removes the principal
    value divergence, leaving a bounded axisymmetric 1D integrand; a graded
    Gauss rule resolves the large-mass peak.  Returns (A, B, C) so that the
    moment at a node with outward radial direction n is A I4 + B beta +
    C alpha.n.
    """
    k = sp.k
    width = min(0.5, 1.0 / (radius * (abs(k) + 1.0)))
    edges = [0.0]
    w = width
    while w < np.pi:
        edges.append(w)
        w *= 3.0
    edges.append(np.pi)
    gl_x, gl_w = np.polynomial.legendre.leggauss(32)
    A = B = C = 0.0 + 0.0j
    for lo, hi in zip(edges[:-1], edges[1:]):
        th = 0.5 * (hi - lo) * (gl_x + 1) + lo
        ww = 0.5 * (hi - lo) * gl_w
        r = 2.0 * radius * np.sin(th / 2.0)
        osc = np.exp(1j * k * r) / (4 * np.pi * r)
        ring = 2 * np.pi * radius**2 * np.sin(th)
        A += np.sum(ww * ring * osc * sp.z)
        B += np.sum(ww * ring * osc * sp.m)
        # ring integral of the odd part: direction = outward radial at the target
        zcomp = radius * (1.0 - np.cos(th))
        C += np.sum(ww * ring * 1j * (1 - 1j * k * r) * osc / r**2 * zcomp)
    return A, B, C


def _cauchy_diagonal(surf, sp, local_patch, matrix=None):
    """Diagonal 4x4 blocks restoring consistency of the punctured sum.

    For sphere-rooted surfaces the diagonal calibrates each row against the
    exact principal-value moment of the full kernel (semi-analytic, valid at
    every mass): D_i = Q_i - sum_{j != i} w_j phi_ij, which makes the
    operator exact on constant densities.  Other surfaces fall back to the
    Riesz-momentum subtraction plus the flat-patch weak-kernel model.
    ``matrix`` must then hold the assembled punctured entries.
    """
    root = _root_of(surf)
    if root.chart_id.startswith("sphere") and matrix is not None:
        radius = float(root.chart_id[len("sphere(R=") : -1]) + _offset_of(surf)
        qa, qb, qc = sphere_self_moment(sp, radius)
        n = surf.n_nodes
        rowsums = matrix.reshape(n, 4, n, 4).sum(axis=2)
        diag = np.empty((n, 4, 4), dtype=complex)
        for i in range(n):
            q = qa * I4 + qb * BETA + qc * alpha_dot(surf.nu_transport[i])
            diag[i] = q - rowsums[i]
        return diag
    rho, m = riesz_momentum(surf)
    s = strong_part_row_sums(surf)
    diag = 1j * np.tensordot((m - s) / rho[:, None], ALPHA, axes=(1, 0))
    if local_patch:
        diag = diag + _patch_blocks(surf, sp)
    return diag


def _punctured_block(surf, sp, lo, hi):
    pts = surf.nodes[lo:hi]
    d = pts[:, None, :] - surf.nodes[None, :, :]
    r = np.linalg.norm(d, axis=2)
    sub = np.arange(lo, hi)
    r[np.arange(hi - lo), sub] = 1.0  # placeholder; rows zeroed below
    k = sp.k
    osc = np.exp(1j * k * r) / (4 * np.pi * r)
    ax = np.tensordot(d, ALPHA, axes=(2, 0))
    blk = ((1 - 1j * k * r) * 1j / r**2)[..., None, None] * ax
    blk += sp.z * I4 + sp.m * BETA
    blk *= osc[..., None, None]
    blk[np.arange(hi - lo), sub] = 0.0
    blk *= surf.weights[None, :, None, None]
    return blk.transpose(0, 2, 1, 3).reshape(4 * (hi - lo), -1)


def _calibrate_diagonal(op):
    """Least-squares diagonal block update enforcing ((a.n) C)^2 = -1/4 I.

    Linearised in the update: with X = (alpha.n) C and D' the per-node
    correction to X, solve  X D' + D' X = -(X^2 + 1/4)  on the four constant
    spinor densities in the least-squares sense.  Dense; intended for small
    meshes only.
    """
    surf = op.source
    n = surf.n_nodes
    if n > 2048:
        raise ValueError("calibrated mode is restricted to meshes with <= 2048 nodes")
    an = np.tensordot(surf.normals, ALPHA, axes=(1, 0))
    X = left_block_scale(an, op.matrix)
    resid = X @ X + 0.25 * np.eye(4 * n)
    # unknowns: per-node 4x4 blocks of D', stacked (n*16,)
    consts = np.zeros((4 * n, 4), dtype=complex)
    for c in range(4):
        consts[c::4, c] = 1.0
    rhs = -(resid @ consts)  # (4n, 4)
    # equations: (X D' + D' X) e_c = rhs_c
    # (D' X e_c)_i = D'_i (X e_c)_i  -> block-diagonal in unknowns
    # (X D' e_c)_i = sum_j X_ij D'_j (e_c)_j
    ncols = 16 * n
    A = np.zeros((4 * n * 4, ncols), dtype=complex)
    Xe = X @ consts  # (4n, 4)
    for c in range(4):
        for j in range(n):
            colbase = 16 * j
            # D'_j acts on (X e_c)_j and on (e_c)_j
            xe_j = Xe[4 * j : 4 * j + 4, c]
            e_j = consts[4 * j : 4 * j + 4, c]
            for a in range(4):
                for b in range(4):
                    col = colbase + 4 * a + b
                    # D' X e_c contribution (block-diagonal rows j)
                    A[c * 4 * n + 4 * j + a, col] += xe_j[b]
                    # X D' e_c contribution: X[:, 4j+a] * e_j[b]
                    A[c * 4 * n : (c + 1) * 4 * n, col] += X[:, 4 * j + a] * e_j[b]
    sol, *_ = np.linalg.lstsq(A, rhs.T.reshape(-1), rcond=None)
    Dp = sol.reshape(n, 4, 4)
    # C update: C += (alpha.n)^{-1} D' = (alpha.n) D' (since (alpha.n)^2 = 1)
    upd = np.einsum("nab,nbc->nac", an, Dp)
    for i in range(n):
        op.matrix[4 * i : 4 * i + 4, 4 * i : 4 * i + 4] += upd[i]


def trace_limits(surf, sp, side, cauchy=None, local_patch=True):
    """One-sided trace C_side = -side * (i/2)(alpha.n) + C, stored normal n."""
    if side not in (1, -1):
        raise ValueError("side must be +1 or -1")
    op = cauchy if cauchy is not None else assemble_cauchy(surf, sp, local_patch=local_patch)
    out = op.matrix.copy()
    an = np.tensordot(surf.normals, ALPHA, axes=(1, 0))
    jump = -side * 0.5j * an
    for i in range(surf.n_nodes):
        out[4 * i : 4 * i + 4, 4 * i : 4 * i + 4] += jump[i]
    return BlockOperator(matrix=out, source=surf, target=surf, sp=sp, kind="trace")


def jump_blocks(surf, side):
    """Block-diagonal jump term -side (i/2)(alpha.n) of the one-sided trace."""
    an = np.tensordot(surf.normals, ALPHA, axes=(1, 0))
    return -side * 0.5j * an


def lambda_pm(surf, sp, sign, cauchy=None, local_patch=True):
    """Lambda_{+/-} = beta/2 +/- C as a dense operator."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    op = cauchy if cauchy is not None else assemble_cauchy(surf, sp, local_patch=local_patch)
    out = sign * op.matrix  # fresh array either way
    half_beta = 0.5 * BETA
    for i in range(surf.n_nodes):
        out[4 * i : 4 * i + 4, 4 * i : 4 * i + 4] += half_beta
    return BlockOperator(matrix=out, source=surf, target=surf, sp=sp, kind="lambda")


def invert(op, cond_limit=COND_LIMIT):
    """Dense inverse with a condition-number guard."""
    lu, piv = sla.lu_factor(op.matrix)
    cond = _lu_condition(op.matrix, lu, piv)
    if cond > cond_limit:
        raise SingularOperatorError(
            f"operator of kind '{op.kind}' is numerically singular "
            f"(condition estimate {cond:.3e} > {cond_limit:.1e})"
        )
    inv = sla.lu_solve((lu, piv), np.eye(op.matrix.shape[0], dtype=complex))
    return BlockOperator(
        matrix=inv, source=op.target, target=op.source, sp=op.sp, kind=op.kind + "-inv"
    )


def _lu_condition(matrix, lu, piv):
    norm1 = np.max(np.sum(np.abs(matrix), axis=0))
    gecon = sla.get_lapack_funcs("gecon", (matrix,))
    rcond, _ = gecon(lu, norm1)
    if rcond <= 0:
        return np.inf
    return 1.0 / rcond


def lu_factorize(op, cond_limit=COND_LIMIT, check=True):
    """LU factorisation handle for repeated solves, with the same guard."""
    lu, piv = sla.lu_factor(op.matrix)
    if check:
        cond = _lu_condition(op.matrix, lu, piv)
        if cond > cond_limit:
            raise SingularOperatorError(
                f"operator of kind '{op.kind}' is numerically singular "
                f"(condition estimate {cond:.3e} > {cond_limit:.1e})"
            )
    return lu, piv


def plane_moment(sp, dist, n_hat):
    """Exact integral of the kernel over an infinite plane at the given distance.

    ``n_hat`` is the unit vector pointing from the plane toward the target.
    Closed form: e^{ik d} [ i (z + m beta)/(2k) + (i/2) alpha.n_hat ].
    Used to restore unresolved near-surface kernel mass by subtraction: for
    separations below the mesh spacing the plain quadrature sees a spike on
    the aligned node instead of the true kernel mass.
    """
    k = sp.k
    q = 1j * (sp.z * I4 + sp.m * BETA) / (2 * k) + 0.5j * alpha_dot(n_hat)
    return np.exp(1j * k * dist) * q


def slab_moment(sp, a, thickness, n_hat):
    """Exact kernel integral over a flat slab starting at distance ``a``.

    The slab occupies distances (a, a + thickness) on the side ``-n_hat`` of
    the target (``n_hat`` points from the slab toward the target); ``a`` may
    be zero for a target sitting on the slab face.
    """
    k = sp.k
    q = 1j * (sp.z * I4 + sp.m * BETA) / (2 * k) + 0.5j * alpha_dot(n_hat)
    fac = np.exp(1j * k * a) * (np.exp(1j * k * thickness) - 1.0) / (1j * k)
    return fac * q


def sphere_pair_moment(sp, r_src, r_tgt):
    """Exact kernel integral over a sphere of radius ``r_src`` for a target
    at radius ``r_tgt`` (concentric spheres).

    By rotational covariance the moment has the form A I4 + B beta +
    C alpha.n_hat with n_hat the radial direction at the target; (A, B, C)
    come from a graded 1D polar quadrature (machine accurate, the integrand
    peak at the aligned pole is resolved by geometric panels).
    """
    from .kernel import phi

    gap = abs(r_tgt - r_src)
    if gap <= 0:
        raise ValueError("coincident spheres")
    width = max(gap, 1.0 / (abs(sp.k) + 1.0)) / r_src
    edges = [0.0]
    w = min(width, np.pi / 4)
    while w < np.pi:
        edges.append(w)
        w *= 3.0
    edges.append(np.pi)
    gl_x, gl_w = np.polynomial.legendre.leggauss(24)
    target = np.array([0.0, 0.0, r_tgt])
    M = np.zeros((4, 4), dtype=complex)
    for lo, hi in zip(edges[:-1], edges[1:]):
        th = 0.5 * (hi - lo) * (gl_x + 1) + lo
        ww = 0.5 * (hi - lo) * gl_w
        for t, wt in zip(th, ww):
            y = r_src * np.array([np.sin(t), 0.0, np.cos(t)])
            M += wt * 2 * np.pi * r_src**2 * np.sin(t) * phi(sp, target - y)
    A = 0.5 * (M[0, 0] + M[2, 2])
    B = 0.5 * (M[0, 0] - M[2, 2])
    C = M[0, 2]
    return A, B, C


def _aligned_moments(src, tgt, sp):
    """Per-target aligned moments of the kernel over the source surface.

    Exact (1D quadrature) for sphere-rooted pairs, flat-plane model
    otherwise.  Returns an (n_tgt, 4, 4) array; the radial direction is the
    transported base normal, signed from source toward target.
    """
    root = _root_of(src)
    eps = abs(_offset_of(tgt) - _offset_of(src))
    sign = 1.0 if _offset_of(tgt) > _offset_of(src) else -1.0
    n_hats = sign * tgt.nu_transport
    if root.chart_id.startswith("sphere"):
        r_root = float(root.chart_id[len("sphere(R=") : -1])
        a, b, c = sphere_pair_moment(
            sp, r_root + _offset_of(src), r_root + _offset_of(tgt)
        )
        # C was computed for the outward radial direction at the target
        out = np.empty((tgt.n_nodes, 4, 4), dtype=complex)
        radial = tgt.nu_transport
        for i in range(tgt.n_nodes):
            out[i] = a * I4 + b * BETA + c * alpha_dot(radial[i])
        return out
    return np.stack([plane_moment(sp, eps, n_hats[i]) for i in range(tgt.n_nodes)])


def aligned_layer_correction(matrix, src, targets_aligned, sp):
    """Subtraction correction of a layer matrix for sub-mesh separations.

    ``targets_aligned`` is a sequence of ``(target_row, src_index, dist,
    n_hat)``: for each such target the matrix row block is corrected so that
    the operator evaluates ``sum_j w_j phi_ij (f_j - f_{j*}) + M_i f_{j*}``
    with the exact flat-plane moment ``M_i``; the quadrature's unresolved
    spike cancels in the difference.
    """
    n = src.n_nodes
    for (ti, j, dist, n_hat) in targets_aligned:
        row = matrix[4 * ti : 4 * ti + 4]
        rowsum = row.reshape(4, n, 4).sum(axis=1)
        corr = plane_moment(sp, dist, n_hat) - rowsum
        matrix[4 * ti : 4 * ti + 4, 4 * j : 4 * j + 4] += corr
    return matrix


def cross_surface_layer(src, tgt, sp):
    """Layer operator between a base surface and its parallel mate.

    The two meshes are node-aligned at separation eps along the transported
    normal; an aligned-column subtraction against the exact pair moment
    keeps the operator accurate when eps is far below the mesh spacing (the
    regime of the large-mass studies): the operator evaluates

        sum_j w_j phi_ij (f_j - f_i*) + M_i f_i*

    so the unresolved kernel spike cancels in the difference.
    """
    pair_eps = _parallel_separation(src, tgt)
    op = assemble_layer(src, tgt, sp, min_dist=0.25 * pair_eps)
    moments = _aligned_moments(src, tgt, sp)
    n = src.n_nodes
    for i in range(tgt.n_nodes):
        row = op.matrix[4 * i : 4 * i + 4]
        rowsum = row.reshape(4, n, 4).sum(axis=1)
        op.matrix[4 * i : 4 * i + 4, 4 * i : 4 * i + 4] += moments[i] - rowsum
    return op


def _offset_of(surface):
    off = 0.0
    s = surface
    while s.parallel_of is not None:
        s, eps = s.parallel_of
        off += eps
    return off


def _parallel_separation(a, b):
    ra, rb = _root_of(a), _root_of(b)
    if ra is not rb:
        raise ValueError("cross_surface_layer expects parallel surfaces of one base")
    eps = abs(_offset_of(a) - _offset_of(b))
    if eps == 0.0:
        raise ValueError("surfaces coincide")
    return eps


def _root_of(surface):
    s = surface
    while s.parallel_of is not None:
        s = s.parallel_of[0]
    return s


def volume_potential(nodes, weights, fvals, sp, targets, min_dist=1e-8, chunk=CHUNK_TARGET_NODES):
    """Newton potential sum_j v_j phi(t - y_j) f_j of a compactly supported f."""
    nodes = np.asarray(nodes, dtype=float).reshape(-1, 3)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    f = np.asarray(fvals, dtype=complex).reshape(-1, 4)
    pts = np.asarray(targets, dtype=float).reshape(-1, 3)
    wf = weights[:, None] * f
    out = np.empty((pts.shape[0], 4), dtype=complex)
    for lo in range(0, pts.shape[0], chunk):
        hi = min(lo + chunk, pts.shape[0])
        blk = phi_block(sp, pts[lo:hi], nodes, min_dist=min_dist)
        out[lo:hi] = np.einsum("tsab,sb->ta", blk, wf)
    return out


def weight_vector(surface):
    return np.repeat(surface.weights, 4)


def weighted_operator_norm(op):
    """Largest singular value of W_t^{1/2} A W_s^{-1/2} (dense SVD)."""
    wt = np.sqrt(weight_vector(op.target if isinstance(op.target, SurfaceQuadrature) else op.source))
    ws = np.sqrt(weight_vector(op.source))
    sym = (wt[:, None] * op.matrix) / ws[None, :]
    return float(np.linalg.norm(sym, ord=2))


def probe_operator_norm(apply_fn, wt, ws, n_src, probes=8, seed=0, iterations=0):
    """Weighted operator-norm estimate from seeded random probes.

    With ``iterations > 0`` runs that many rounds of power iteration on the
    weight-symmetrised operator (requires ``apply_fn`` to also provide the
    adjoint via a pair).  With ``iterations == 0`` reports the max Rayleigh
    quotient over the probes, which is a reproducible lower-bound estimate.
    """
    rng = np.random.default_rng(seed)
    fwd, adj = apply_fn if isinstance(apply_fn, tuple) else (apply_fn, None)
    vs = rng.normal(size=(n_src, probes)) + 1j * rng.normal(size=(n_src, probes))
    sw_t, sw_s = np.sqrt(wt), np.sqrt(ws)

    def sym_apply(block):
        cols = [sw_t * fwd(block[:, j] / sw_s) for j in range(block.shape[1])]
        return np.stack(cols, axis=1)

    def sym_adj(block):
        cols = [adj(block[:, j] * sw_t) / sw_s for j in range(block.shape[1])]
        return np.stack(cols, axis=1)

    if iterations and adj is not None:
        q, _ = np.linalg.qr(vs)
        for _ in range(iterations):
            q, _ = np.linalg.qr(sym_adj(sym_apply(q)))
        svals = np.linalg.svd(sym_apply(q), compute_uv=False)
        return float(svals.max())
    y = sym_apply(vs)
    ratios = np.linalg.norm(y, axis=0) / np.linalg.norm(vs, axis=0)
    return float(ratios.max())


def smooth_probe_densities(surf, probes=8, seed=0, max_wavenumber=3.0, n_waves=6):
    """Mesh-independent smooth probe densities: plane-wave mixtures at the nodes.

    The same seeded continuum functions are sampled on any mesh, so norms of
    operator defects on these probes are comparable across refinements.
    """
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_waves, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    kvecs = dirs * rng.uniform(0.5, max_wavenumber, size=(n_waves, 1))
    coeff = rng.normal(size=(probes, n_waves, 4)) + 1j * rng.normal(size=(probes, n_waves, 4))
    phase = np.exp(1j * surf.nodes @ kvecs.T)  # (n, n_waves)
    vals = np.einsum("nw,pwc->pnc", phase, coeff)  # (probes, n, 4)
    return vals.reshape(probes, -1).T  # (4n, probes)


def cauchy_product_defect(surf, sp, probes=8, seed=0, local_patch=True, mem_budget=1.2e9):
    """Weighted-norm estimate of 4 ((alpha.n) C)^2 + I on smooth probe densities.

    The probes are seeded plane-wave mixtures (mesh-independent continuum
    functions), so the estimate is comparable across mesh refinements.
    Assembles densely when the matrix fits the memory budget, otherwise
    streams the kernel in row chunks (twice per probe batch).
    """
    n = surf.n_nodes
    dim = 4 * n
    v = smooth_probe_densities(surf, probes=probes, seed=seed)
    w = weight_vector(surf)
    sw = np.sqrt(w)
    an = np.tensordot(surf.normals, ALPHA, axes=(1, 0))

    if 16 * dim * dim <= mem_budget:
        cop = assemble_cauchy(surf, sp, local_patch=local_patch)
        X = 2.0 * left_block_scale(an, cop.matrix)
        del cop
        y = X @ (X @ v) + v
    else:
        def punct_apply(block):
            out = np.zeros_like(block)
            for lo in range(0, n, CHUNK_TARGET_NODES):
                hi = min(lo + CHUNK_TARGET_NODES, n)
                blk = _punctured_block(surf, sp, lo, hi)
                out[4 * lo : 4 * hi] = blk @ block
            return out

        consts = np.zeros((dim, 4), dtype=complex)
        for ccol in range(4):
            consts[ccol::4, ccol] = 1.0
        rowsums = punct_apply(consts).reshape(n, 4, 4)
        root = _root_of(surf)
        radius = float(root.chart_id[len("sphere(R=") : -1]) + _offset_of(surf)
        qa, qb, qc = sphere_self_moment(sp, radius)
        diag = np.empty((n, 4, 4), dtype=complex)
        for i in range(n):
            q = qa * I4 + qb * BETA + qc * alpha_dot(surf.nu_transport[i])
            diag[i] = q - rowsums[i]

        def capply(block):
            out = punct_apply(block)
            resh = block.reshape(n, 4, -1)
            out += np.einsum("nab,nbm->nam", diag, resh).reshape(dim, -1)
            return out

        z = v
        for _ in range(2):
            z = capply(z)
            z = 2.0 * np.einsum("nab,nbm->nam", an, z.reshape(n, 4, -1)).reshape(dim, -1)
        y = z + v
    num = np.linalg.norm(sw[:, None] * y, axis=0)
    den = np.linalg.norm(sw[:, None] * v, axis=0)
    return float((num / den).max())


def ps_fixed(surf, sp, lam_plus=None):
    """Poincare-Steklov map -P_+ beta Lambda_+^{-1} P_- on a base surface."""
    lam = lam_plus if lam_plus is not None else lambda_pm(surf, sp, +1)
    lam_inv = invert(lam)
    pplus = projector_blocks(surf, +1)
    pminus = projector_blocks(surf, -1)
    mat = -left_block_scale(pplus, left_block_scale(np.broadcast_to(BETA, pplus.shape), lam_inv.matrix))
    mat = mat @ block_diag_expand(pminus)
    return BlockOperator(matrix=mat, source=surf, target=surf, sp=sp, kind="ps")


def ps_eps(surf_eps, sp, lam_plus=None):
    """Poincare-Steklov map of the exterior parallel-surface problem.

    In the transported-normal projections this is -P_- beta Lambda_+^{-1} P_+
    (the projections flip on the parallel surface).
    """
    lam = lam_plus if lam_plus is not None else lambda_pm(surf_eps, sp, +1)
    lam_inv = invert(lam)
    pplus = projector_blocks(surf_eps, +1)
    pminus = projector_blocks(surf_eps, -1)
    mat = -left_block_scale(pminus, left_block_scale(np.broadcast_to(BETA, pminus.shape), lam_inv.matrix))
    mat = mat @ block_diag_expand(pplus)
    return BlockOperator(matrix=mat, source=surf_eps, target=surf_eps, sp=sp, kind="ps")


class ShellOperators:
    """Exactly coupled two-surface boundary machinery of the tubular shell.

    Solves (D_{m+M} - z) u = f in the shell with data P_+ t u = h_+ on the
    inner surface and P_- t u = h_eps on the outer one (transported-normal
    projections), via densities on both surfaces:

        [Lambda_+(Sigma)        K(Sigma_eps->Sigma) ] [g1]   [h_+  - t F]
        [K(Sigma->Sigma_eps)    Lambda_+(Sigma_eps) ] [g2] = [h_eps - t F]

    The one-sided traces on the shell side then produce the complementary
    projections; the cross blocks K decay like e^{-kappa eps} and the system
    degenerates to two independent single-surface solves as the mass grows.
    """

    def __init__(self, sigma, sigma_eps, sp, local_patch=True):
        self.sigma = sigma
        self.sigma_eps = sigma_eps
        self.sp = sp
        n1, n2 = 4 * sigma.n_nodes, 4 * sigma_eps.n_nodes
        self.n1, self.n2 = n1, n2
        lam1 = lambda_pm(sigma, sp, +1, local_patch=local_patch)
        lam2 = lambda_pm(sigma_eps, sp, +1, local_patch=local_patch)
        k21 = cross_surface_layer(sigma_eps, sigma, sp)  # sources on Sigma_eps, targets Sigma
        k12 = cross_surface_layer(sigma, sigma_eps, sp)  # sources on Sigma, targets Sigma_eps
        S = np.empty((n1 + n2, n1 + n2), dtype=complex)
        S[:n1, :n1] = lam1.matrix
        S[:n1, n1:] = k21.matrix
        S[n1:, :n1] = k12.matrix
        S[n1:, n1:] = lam2.matrix
        del lam1, lam2
        self._k21 = k21.matrix
        self._k12 = k12.matrix
        self.S = S
        try:
            self.lu = sla.lu_factor(S.copy())
        except Exception as exc:  # pragma: no cover
            raise SingularOperatorError(f"shell boundary system failed to factor: {exc}")
        # shell-side one-sided trace adjustments (relative to Lambda_+ blocks)
        nu1 = self.sigma.nu_transport
        nu2 = self.sigma_eps.nu_transport
        self._delta1 = -0.5 * BETA[None] + 0.5j * np.tensordot(nu1, ALPHA, axes=(1, 0))
        self._delta2 = -0.5 * BETA[None] - 0.5j * np.tensordot(nu2, ALPHA, axes=(1, 0))
        self._pp1 = projector_blocks(sigma, +1)
        self._pm1 = projector_blocks(sigma, -1)
        self._pp2 = projector_blocks(sigma_eps, +1)
        self._pm2 = projector_blocks(sigma_eps, -1)

    # -- density solves -------------------------------------------------
    def solve_densities(self, h_plus, h_eps):
        rhs = np.concatenate(
            [block_diag_apply(self._pp1, h_plus), block_diag_apply(self._pm2, h_eps)]
        )
        g = sla.lu_solve(self.lu, rhs)
        return g[: self.n1], g[self.n1 :]

    def solve_densities_raw(self, rhs1, rhs2):
        g = sla.lu_solve(self.lu, np.concatenate([rhs1, rhs2]))
        return g[: self.n1], g[self.n1 :]

    # -- shell-side traces of the layer ansatz ---------------------------
    def shell_trace_sigma(self, g1, g2):
        v = self.S[: self.n1, : self.n1] @ g1 + block_diag_apply(self._delta1, g1)
        v += self._k21 @ g2
        return v

    def shell_trace_sigma_eps(self, g1, g2):
        v = self.S[self.n1 :, self.n1 :] @ g2 + block_diag_apply(self._delta2, g2)
        v += self._k12 @ g1
        return v

    # -- Poincare-Steklov action -----------------------------------------
    def ps_apply(self, h_plus, h_eps):
        """(P_- trace on Sigma, P_+ trace on Sigma_eps) of the lifting."""
        g1, g2 = self.solve_densities(h_plus, h_eps)
        out1 = block_diag_apply(self._pm1, self.shell_trace_sigma(g1, g2))
        out2 = block_diag_apply(self._pp2, self.shell_trace_sigma_eps(g1, g2))
        return out1, out2

    def ps_apply_adjoint(self, y1, y2):
        """Adjoint of ps_apply in the plain (unweighted) inner product."""
        # forward: out = U S^{-1} T h  with T, U as in solve/trace blocks
        w1 = block_diag_apply(self._pm1.conj().transpose(0, 2, 1), y1)
        w2 = block_diag_apply(self._pp2.conj().transpose(0, 2, 1), y2)
        # U^H w
        u1 = (
            self.S[: self.n1, : self.n1].conj().T @ w1
            + block_diag_apply(self._delta1.conj().transpose(0, 2, 1), w1)
            + self._k12.conj().T @ w2
        )
        u2 = (
            self.S[self.n1 :, self.n1 :].conj().T @ w2
            + block_diag_apply(self._delta2.conj().transpose(0, 2, 1), w2)
            + self._k21.conj().T @ w1
        )
        g = sla.lu_solve(self.lu, np.concatenate([u1, u2]), trans=2)
        t1 = block_diag_apply(self._pp1.conj().transpose(0, 2, 1), g[: self.n1])
        t2 = block_diag_apply(self._pm2.conj().transpose(0, 2, 1), g[self.n1 :])
        return t1, t2

    def ps_blocks(self):
        """Dense 2x2 block matrix of the shell Poincare-Steklov operator."""
        dim = self.n1 + self.n2
        T = np.zeros((dim, dim), dtype=complex)
        T[: self.n1, : self.n1] = block_diag_expand(self._pp1)
        T[self.n1 :, self.n1 :] = block_diag_expand(self._pm2)
        G = sla.lu_solve(self.lu, T)
        U = np.empty_like(G)
        U[: self.n1] = (
            self.S[: self.n1, : self.n1] @ G[: self.n1]
            + left_block_scale(self._delta1, G[: self.n1])
            + self._k21 @ G[self.n1 :]
        )
        U[self.n1 :] = (
            self.S[self.n1 :, self.n1 :] @ G[self.n1 :]
            + left_block_scale(self._delta2, G[self.n1 :])
            + self._k12 @ G[: self.n1]
        )
        U[: self.n1] = left_block_scale(self._pm1, U[: self.n1])
        U[self.n1 :] = left_block_scale(self._pp2, U[self.n1 :])
        return U

    def cross_block_norms(self):
        """Weighted norms of the two cross-surface kernel blocks."""
        k21 = BlockOperator(self._k21, self.sigma_eps, self.sigma, self.sp, "layer")
        k12 = BlockOperator(self._k12, self.sigma, self.sigma_eps, self.sp, "layer")
        return weighted_operator_norm(k21), weighted_operator_norm(k12)

    def norm_estimate(self, probes=8, seed=3, parts="diagonal"):
        """Weighted norm surrogate of the Poincare-Steklov block map.

        Measured as the largest Rayleigh quotient over smooth probe
        densities projected into the operator's domain.  Smooth probes keep
        the surrogate comparable across meshes and masses; the full discrete
        SVD norm is dominated by grid-scale modes the quadrature cannot
        represent and does not reflect the continuum operator.

        ``parts`` selects which blocks enter:

        * ``"diagonal"`` - the two single-surface maps (data on one surface,
          complementary trace on the same surface).  These are the operators
          with the O(1/mass) bound; they are the default.
        * ``"cross"`` - the transmission blocks (data on one surface, trace
          on the other).  Under the coupling eps = 1/M their norm saturates
          at about e^{-kappa eps}; they decay in M only at fixed eps.
        * ``"full"`` - the whole 2x2 block map.
        """
        w1 = weight_vector(self.sigma)
        w2 = weight_vector(self.sigma_eps)
        v1 = smooth_probe_densities(self.sigma, probes=probes, seed=seed)
        v2 = smooth_probe_densities(self.sigma_eps, probes=probes, seed=seed + 1)
        z1 = np.zeros(self.n1, dtype=complex)
        z2 = np.zeros(self.n2, dtype=complex)
        best = 0.0
        for j in range(probes):
            h1 = block_diag_apply(self._pp1, v1[:, j])
            h2 = block_diag_apply(self._pm2, v2[:, j])
            a1, a2 = self.ps_apply(h1, z2)
            b1, b2 = self.ps_apply(z1, h2)
            d1 = np.sqrt(np.sum(w1 * np.abs(h1) ** 2))
            d2 = np.sqrt(np.sum(w2 * np.abs(h2) ** 2))
            if parts == "diagonal":
                ratios = (
                    np.sqrt(np.sum(w1 * np.abs(a1) ** 2)) / d1,
                    np.sqrt(np.sum(w2 * np.abs(b2) ** 2)) / d2,
                )
            elif parts == "cross":
                ratios = (
                    np.sqrt(np.sum(w2 * np.abs(a2) ** 2)) / d1,
                    np.sqrt(np.sum(w1 * np.abs(b1) ** 2)) / d2,
                )
            elif parts == "full":
                o1, o2 = self.ps_apply(h1, h2)
                num = np.sqrt(np.sum(w1 * np.abs(o1) ** 2) + np.sum(w2 * np.abs(o2) ** 2))
                ratios = (num / np.sqrt(d1**2 + d2**2),)
            else:
                raise ValueError(f"unknown parts {parts!r}")
            best = max(best, *ratios)
        return float(best)


# ---------------------------------------------------------------------------
# binary operator cache

_MAGIC = b"DSOP"
_VERSION = 1


class OperatorCache:
    """Binary cache of assembled matrices keyed by (surface hash, sp, kind).

    Layout: magic, version u32, key hash (32 raw bytes), rows u64, cols u64,
    then row-major complex128 payload.
    """

    def __init__(self, directory):
        import os

        self.directory = directory
        os.makedirs(directory, exist_ok=True)

    @staticmethod
    def key(surface, sp, kind):
        h = hashlib.sha256()
        h.update(surface.content_key().encode())
        h.update(repr((sp.z, sp.m, sp.k)).encode())
        h.update(kind.encode())
        return h.hexdigest()

    def _path(self, key):
        import os

        return os.path.join(self.directory, key[:32] + ".dsop")

    def store(self, key, matrix):
        path = self._path(key)
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", _VERSION))
            fh.write(bytes.fromhex(key)[:32])
            fh.write(struct.pack("<QQ", *matrix.shape))
            fh.write(np.ascontiguousarray(matrix, dtype=complex).tobytes())

    def load(self, key):
        import os

        path = self._path(key)
        if not os.path.exists(path):
            return None
        with open(path, "rb") as fh:
            if fh.read(4) != _MAGIC:
                raise ValueError("not an operator cache file")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != _VERSION:
                raise ValueError(f"unsupported cache version {version}")
            stored = fh.read(32)
            if stored != bytes.fromhex(key)[:32]:
                raise ValueError("cache key mismatch")
            rows, cols = struct.unpack("<QQ", fh.read(16))
            data = np.frombuffer(fh.read(rows * cols * 16), dtype=complex)
        return data.reshape(rows, cols).copy()

    def get_or_assemble(self, surface, sp, kind, assemble_fn):
        key = self.key(surface, sp, kind)
        mat = self.load(key)
        if mat is None:
            op = assemble_fn()
            self.store(key, op.matrix)
            return op
        return BlockOperator(matrix=mat, source=surface, target=surface, sp=sp, kind=kind)
