"""Reference bases, quadrature and DOF enumeration for the discrete spaces.

Five spaces are provided at order ``ell`` in {1, 2, 3}:

* displacement: H(div)-conforming BDM_ell (full vector polynomials of
  degree ell, normal component glued across facets),
* facet displacement: tangential vector polynomials of degree ell,
* flux: element-broken RT_{ell-1} per network,
* pressure: discontinuous P_{ell-1} per network,
* facet pressure: scalar polynomials of degree ell-1 per facet.

Vector bases are constructed on the reference triangle by inverting a
moment matrix (edge Legendre moments plus interior moments) and mapped
with the contravariant Piola transform.  Edge DOFs of the displacement
space use raw integral moments so that the mapped traces from the two
sides of a facet agree; a per-element sign fixes global normal direction
and edge orientation.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss, legvander

from .mesh import LOCAL_EDGE_VERTICES, build_affine_map

__all__ = [
    "SpaceOrder",
    "QuadratureRule",
    "triangle_quadrature",
    "segment_quadrature",
    "eval_basis",
    "piola_map",
    "SpaceSet",
    "dof_counts",
]

SUPPORTED_ORDERS = (1, 2, 3)

# reference triangle edge data, edge j opposite vertex j
_REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
_REF_EDGE_NORMALS = np.array(
    [[1.0 / np.sqrt(2.0), 1.0 / np.sqrt(2.0)], [-1.0, 0.0], [0.0, -1.0]]
)
_REF_EDGE_LENGTHS = np.array([np.sqrt(2.0), 1.0, 1.0])


@dataclass(frozen=True)
class SpaceOrder:
    """Polynomial order of the displacement space; flux/pressure follow at ell-1."""

    ell: int

    def __post_init__(self):
        if self.ell not in SUPPORTED_ORDERS:
            raise ValueError(f"unsupported order {self.ell}; supported: {SUPPORTED_ORDERS}")


# ----------------------------------------------------------------------
# quadrature
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    degree: int


@lru_cache(maxsize=None)
def triangle_quadrature(degree):
    """Rule on the reference triangle, exact for polynomials up to ``degree``.

    Built by collapsing a Gauss-Legendre tensor rule on the unit square
    (Duffy transform); the extra Jacobian factor raises the required
    one-dimensional degree by one.
    """
    n = (degree + 2) // 2 + 1
    x, wx = leggauss(n)
    u = 0.5 * (x + 1.0)
    wu = 0.5 * wx
    pts, wts = [], []
    for i in range(n):
        for j in range(n):
            pts.append((u[i], u[j] * (1.0 - u[i])))
            wts.append(wu[i] * wu[j] * (1.0 - u[i]))
    rule = QuadratureRule(np.array(pts), np.array(wts), degree)
    rule.points.setflags(write=False)
    rule.weights.setflags(write=False)
    return rule


@lru_cache(maxsize=None)
def segment_quadrature(degree):
    """Gauss-Legendre rule on [-1, 1], exact up to ``degree``."""
    n = degree // 2 + 1
    x, w = leggauss(n)
    rule = QuadratureRule(x, w, degree)
    rule.points.setflags(write=False)
    rule.weights.setflags(write=False)
    return rule


# ----------------------------------------------------------------------
# scalar polynomial basis (monomials, constant first)
# ----------------------------------------------------------------------


def _monomial_exponents(degree):
    return [(a, d - a) for d in range(degree + 1) for a in range(d, -1, -1)]


class ScalarPolyBasis:
    """Monomial basis of P_degree on the reference triangle, constant first."""

    def __init__(self, degree):
        self.degree = degree
        self.exponents = _monomial_exponents(degree)
        self.n_dofs = len(self.exponents)

    def eval(self, points):
        points = np.atleast_2d(points)
        x, y = points[:, 0], points[:, 1]
        return np.array([x**a * y**b for a, b in self.exponents])

    def eval_grad(self, points):
        points = np.atleast_2d(points)
        x, y = points[:, 0], points[:, 1]
        out = np.zeros((self.n_dofs, len(points), 2))
        for i, (a, b) in enumerate(self.exponents):
            if a > 0:
                out[i, :, 0] = a * x ** (a - 1) * y**b
            if b > 0:
                out[i, :, 1] = b * x**a * y ** (b - 1)
        return out

    def eval_hess(self, points):
        points = np.atleast_2d(points)
        x, y = points[:, 0], points[:, 1]
        out = np.zeros((self.n_dofs, len(points), 2, 2))
        for i, (a, b) in enumerate(self.exponents):
            if a > 1:
                out[i, :, 0, 0] = a * (a - 1) * x ** (a - 2) * y**b
            if a > 0 and b > 0:
                xy = a * b * x ** (a - 1) * y ** (b - 1)
                out[i, :, 0, 1] = xy
                out[i, :, 1, 0] = xy
            if b > 1:
                out[i, :, 1, 1] = b * (b - 1) * x**a * y ** (b - 2)
        return out


# ----------------------------------------------------------------------
# vector monomials and moment-fitted H(div) bases
# ----------------------------------------------------------------------


class _VectorMonomials:
    """Monomial set for BDM (full (P_ell)^2) or RT ((P_k)^2 plus x * homogeneous P_k)."""

    def __init__(self, family, order):
        self.family = family
        if family == "bdm":
            scalars = _monomial_exponents(order)
            self.terms = [("c", comp, a, b) for comp in (0, 1) for a, b in scalars]
        elif family == "rt":
            scalars = _monomial_exponents(order)
            self.terms = [("c", comp, a, b) for comp in (0, 1) for a, b in scalars]
            self.terms += [("x", None, a, order - a) for a in range(order, -1, -1)]
        else:
            raise ValueError(family)
        self.n = len(self.terms)

    def eval(self, points):
        points = np.atleast_2d(points)
        x, y = points[:, 0], points[:, 1]
        out = np.zeros((self.n, len(points), 2))
        for i, (kind, comp, a, b) in enumerate(self.terms):
            s = x**a * y**b
            if kind == "c":
                out[i, :, comp] = s
            else:
                out[i, :, 0] = x * s
                out[i, :, 1] = y * s
        return out

    def eval_div(self, points):
        points = np.atleast_2d(points)
        x, y = points[:, 0], points[:, 1]
        out = np.zeros((self.n, len(points)))
        for i, (kind, comp, a, b) in enumerate(self.terms):
            if kind == "c":
                if comp == 0 and a > 0:
                    out[i] = a * x ** (a - 1) * y**b
                elif comp == 1 and b > 0:
                    out[i] = b * x**a * y ** (b - 1)
            else:
                # div(x * x^a y^b) = (2 + a + b) x^a y^b
                out[i] = (2 + a + b) * x**a * y**b
        return out

    def eval_grad(self, points):
        """grad[i, p, r, c] = d(v_r)/d(x_c)."""
        points = np.atleast_2d(points)
        x, y = points[:, 0], points[:, 1]
        out = np.zeros((self.n, len(points), 2, 2))
        for i, (kind, comp, a, b) in enumerate(self.terms):
            dx = a * x ** (a - 1) * y**b if a > 0 else 0.0
            dy = b * x**a * y ** (b - 1) if b > 0 else 0.0
            if kind == "c":
                out[i, :, comp, 0] = dx
                out[i, :, comp, 1] = dy
            else:
                s = x**a * y**b
                out[i, :, 0, 0] = s + x * dx
                out[i, :, 0, 1] = x * dy
                out[i, :, 1, 0] = y * dx
                out[i, :, 1, 1] = s + y * dy
        return out

    def eval_hess(self, points):
        """hess[i, p, r, c, d] = d^2(v_r)/(d x_c d x_d)."""
        points = np.atleast_2d(points)
        x, y = points[:, 0], points[:, 1]
        npts = len(points)
        out = np.zeros((self.n, npts, 2, 2, 2))
        for i, (kind, comp, a, b) in enumerate(self.terms):
            dxx = a * (a - 1) * x ** (a - 2) * y**b if a > 1 else np.zeros(npts)
            dyy = b * (b - 1) * x**a * y ** (b - 2) if b > 1 else np.zeros(npts)
            dxy = a * b * x ** (a - 1) * y ** (b - 1) if (a > 0 and b > 0) else np.zeros(npts)
            if kind == "c":
                out[i, :, comp, 0, 0] = dxx
                out[i, :, comp, 0, 1] = dxy
                out[i, :, comp, 1, 0] = dxy
                out[i, :, comp, 1, 1] = dyy
            else:
                dx = a * x ** (a - 1) * y**b if a > 0 else np.zeros(npts)
                dy = b * x**a * y ** (b - 1) if b > 0 else np.zeros(npts)
                # v = (x s, y s)
                out[i, :, 0, 0, 0] = 2 * dx + x * dxx
                out[i, :, 0, 0, 1] = dy + x * dxy
                out[i, :, 0, 1, 0] = dy + x * dxy
                out[i, :, 0, 1, 1] = x * dyy
                out[i, :, 1, 0, 0] = y * dxx
                out[i, :, 1, 0, 1] = dx + y * dxy
                out[i, :, 1, 1, 0] = dx + y * dxy
                out[i, :, 1, 1, 1] = 2 * dy + y * dyy
        return out


def _edge_points(local_edge, t):
    """Reference coordinates of edge parameter values t in [-1, 1]."""
    a, b = LOCAL_EDGE_VERTICES[local_edge]
    pa, pb = _REF_VERTICES[a], _REF_VERTICES[b]
    t = np.atleast_1d(np.asarray(t, dtype=float))
    return 0.5 * (pa + pb) + 0.5 * np.outer(t, pb - pa)


class HdivReferenceBasis:
    """Moment-fitted H(div) basis on the reference triangle.

    DOF ordering: edge 0 modes 0..m, edge 1, edge 2, then interior.
    Edge functionals are Legendre moments of the normal trace; BDM uses
    raw integrals (required for cross-element gluing), RT uses mean
    values so the RT_0 basis has unit normal trace on its own edge.
    """

    def __init__(self, family, ell):
        self.family = family
        self.ell = ell
        if family == "bdm":
            self.mono = _VectorMonomials("bdm", ell)
            self.n_edge_modes = ell + 1
            normalized = False
        else:
            k = ell - 1
            self.mono = _VectorMonomials("rt", k)
            self.n_edge_modes = k + 1
            normalized = True
        self.n_dofs = self.mono.n
        self.n_interior = self.n_dofs - 3 * self.n_edge_modes
        self.coeffs = self._fit(normalized)

    def _fit(self, normalized):
        nd = self.n_dofs
        vmat = np.zeros((nd, nd))
        row = 0
        edge_rule = segment_quadrature(2 * self.ell + 2)
        leg = legvander(edge_rule.points, self.n_edge_modes - 1).T  # (modes, nq)
        for j in range(3):
            pts = _edge_points(j, edge_rule.points)
            vals = self.mono.eval(pts)                      # (n, nq, 2)
            vn = vals @ _REF_EDGE_NORMALS[j]                # (n, nq)
            scale = _REF_EDGE_LENGTHS[j] / 2.0
            if normalized:
                scale /= _REF_EDGE_LENGTHS[j]
            for m in range(self.n_edge_modes):
                vmat[row] = (vn * leg[m] * edge_rule.weights).sum(axis=1) * scale
                row += 1
        for w in self._interior_weights():
            vol = triangle_quadrature(2 * self.ell + 2)
            vals = self.mono.eval(vol.points)
            wvals = w(vol.points)                           # (nq, 2)
            vmat[row] = np.einsum("nqc,qc,q->n", vals, wvals, vol.weights)
            row += 1
        assert row == nd
        cond = np.linalg.cond(vmat)
        if not np.isfinite(cond) or cond > 1e12:
            raise ValueError(f"moment matrix for {self.family}_{self.ell} is singular")
        return np.linalg.inv(vmat)

    def _interior_weights(self):
        weights = []
        if self.family == "bdm":
            # gradients of P_{ell-1} beyond constants, plus curls of bubble
            # times P_{ell-2}; classical unisolvent complement for BDM
            grads = ScalarPolyBasis(self.ell - 1)
            for i in range(1, grads.n_dofs):
                weights.append(lambda pts, i=i, g=grads: g.eval_grad(pts)[i])
            if self.ell >= 2:
                bub = ScalarPolyBasis(self.ell - 2)
                for i in range(bub.n_dofs):
                    def curl_bubble(pts, i=i, sb=bub):
                        pts = np.atleast_2d(pts)
                        x, y = pts[:, 0], pts[:, 1]
                        b = x * y * (1.0 - x - y)
                        db = np.stack([y - 2 * x * y - y**2, x - x**2 - 2 * x * y], axis=1)
                        m = sb.eval(pts)[i]
                        dm = sb.eval_grad(pts)[i]
                        dy_total = b * dm[:, 1] + m * db[:, 1]
                        dx_total = b * dm[:, 0] + m * db[:, 0]
                        return np.stack([dy_total, -dx_total], axis=1)
                    weights.append(curl_bubble)
        else:
            k = self.ell - 1
            if k >= 1:
                scal = ScalarPolyBasis(k - 1)
                for comp in (0, 1):
                    for i in range(scal.n_dofs):
                        def vec_mono(pts, comp=comp, i=i, s=scal):
                            v = np.zeros((len(np.atleast_2d(pts)), 2))
                            v[:, comp] = s.eval(pts)[i]
                            return v
                        weights.append(vec_mono)
        assert len(weights) == self.n_interior
        return weights

    def eval(self, points):
        return np.einsum("nd,npc->dpc", self.coeffs, self.mono.eval(points))

    def eval_div(self, points):
        return np.einsum("nd,np->dp", self.coeffs, self.mono.eval_div(points))

    def eval_grad(self, points):
        return np.einsum("nd,nprc->dprc", self.coeffs, self.mono.eval_grad(points))

    def eval_hess(self, points):
        return np.einsum("nk,nprcd->kprcd", self.coeffs, self.mono.eval_hess(points))


@lru_cache(maxsize=None)
def _reference_basis(family, ell):
    if family in ("bdm", "rt"):
        return HdivReferenceBasis(family, ell)
    if family == "p":
        return ScalarPolyBasis(ell)
    raise ValueError(f"unknown space id {family!r}")


def eval_basis(space, ell, points):
    """Evaluate a reference basis.

    Parameters
    ----------
    space : {"bdm", "rt", "p"}
        "p" is the scalar polynomial space of degree ``ell`` here; the
        pressure space of an order-``ell`` discretization is ``("p", ell-1)``.
    ell : int
    points : (m, 2) array of reference coordinates

    Returns
    -------
    values, derivatives, second_derivatives
        Shapes (nd, m, 2)/(nd, m, 2, 2)/(nd, m, 2, 2, 2) for vector
        spaces and (nd, m)/(nd, m, 2)/(nd, m, 2, 2) for "p".
    """
    if space in ("bdm", "rt"):
        if ell not in SUPPORTED_ORDERS:
            raise ValueError(f"unsupported order {ell}")
        basis = _reference_basis(space, ell)
        return basis.eval(points), basis.eval_grad(points), basis.eval_hess(points)
    if space == "p":
        if not 0 <= ell <= max(SUPPORTED_ORDERS) - 1:
            raise ValueError(f"unsupported degree {ell}")
        basis = _reference_basis("p", ell)
        return basis.eval(points), basis.eval_grad(points), basis.eval_hess(points)
    raise ValueError(f"unknown space id {space!r}")


# ----------------------------------------------------------------------
# Piola transform
# ----------------------------------------------------------------------


def piola_map(amap, ref_values):
    """Contravariant Piola transform of vector values: v = J v_ref / det J."""
    return np.einsum("ab,...b->...a", amap.jacobian, ref_values) / amap.det


def piola_div(amap, ref_divs):
    """Divergence under the Piola transform: div v = div_ref v / det J."""
    return ref_divs / amap.det


def piola_grad(amap, ref_grads):
    """Gradient of Piola-mapped values; grad[..., r, c] = d v_r / d x_c."""
    jinv = amap.inv_transpose.T
    return np.einsum("ar,...rc,cb->...ab", amap.jacobian, ref_grads, jinv) / amap.det


def piola_hess(amap, ref_hess):
    jinv = amap.inv_transpose.T
    return (
        np.einsum("ar,...rcd,cb,de->...abe", amap.jacobian, ref_hess, jinv, jinv)
        / amap.det
    )


def scalar_grad(amap, ref_grads):
    """Physical gradient of reference scalar gradients."""
    return np.einsum("...c,ca->...a", ref_grads, amap.inv_transpose.T)


def scalar_hess(amap, ref_hess):
    jinv = amap.inv_transpose.T
    return np.einsum("...cd,ca,db->...ab", ref_hess, jinv, jinv)


# ----------------------------------------------------------------------
# global DOF layout
# ----------------------------------------------------------------------


class SpaceSet:
    """DOF layout and reference caches for all spaces on a mesh.

    Global displacement DOFs are facet-major (``facet * (ell+1) + mode``)
    followed by element interiors.  Flux and pressure DOFs are broken,
    element-major per network; facet pressures are facet-major.

    Immutable after construction.
    """

    def __init__(self, mesh, ell, n_networks, quad_degree=None):
        if isinstance(ell, SpaceOrder):
            ell = ell.ell
        if ell not in SUPPORTED_ORDERS:
            raise ValueError(f"unsupported order {ell}")
        self.mesh = mesh
        self.ell = ell
        self.n_networks = int(n_networks)
        self.quad_degree = quad_degree if quad_degree is not None else 2 * ell + 2

        self.bdm = _reference_basis("bdm", ell)
        self.rt = _reference_basis("rt", ell)
        self.p = _reference_basis("p", ell - 1)

        self.n_u_edge = ell + 1         # per facet
        self.n_u_int = self.bdm.n_interior
        self.n_uhat = ell + 1           # per facet
        self.n_w = self.rt.n_dofs       # per element
        self.n_p = self.p.n_dofs        # per element
        self.n_phat = ell               # per facet

        nf, ne = mesh.n_facets, mesh.n_elements
        self.size_u = nf * self.n_u_edge + ne * self.n_u_int
        self.size_uhat = nf * self.n_uhat
        self.size_w = ne * self.n_w
        self.size_p = ne * self.n_p
        self.size_phat = nf * self.n_phat

        self._build_u_dofmap()
        self._build_caches()

    # -- DOF maps ------------------------------------------------------

    def _build_u_dofmap(self):
        mesh, ell = self.mesh, self.ell
        ne, nf = mesh.n_elements, mesh.n_facets
        n_loc = self.bdm.n_dofs
        self.u_dofmap = np.empty((ne, n_loc), dtype=int)
        self.u_signs = np.empty((ne, n_loc))
        for t in range(ne):
            col = 0
            for j in range(3):
                f = mesh.element_facets[t, j]
                sigma = mesh.facet_sign[t, j]
                o = mesh.facet_direction[t, j]
                for m in range(self.n_u_edge):
                    self.u_dofmap[t, col] = f * self.n_u_edge + m
                    self.u_signs[t, col] = sigma * (o**m)
                    col += 1
            for r in range(self.n_u_int):
                self.u_dofmap[t, col] = nf * self.n_u_edge + t * self.n_u_int + r
                self.u_signs[t, col] = 1.0
                col += 1
        self.u_dofmap.setflags(write=False)
        self.u_signs.setflags(write=False)

    def uhat_dofs(self, facet):
        return np.arange(facet * self.n_uhat, (facet + 1) * self.n_uhat)

    def phat_dofs(self, facet):
        return np.arange(facet * self.n_phat, (facet + 1) * self.n_phat)

    def w_dofs(self, element):
        return np.arange(element * self.n_w, (element + 1) * self.n_w)

    def p_dofs(self, element):
        return np.arange(element * self.n_p, (element + 1) * self.n_p)

    # -- caches --------------------------------------------------------

    def _build_caches(self):
        vol = triangle_quadrature(self.quad_degree)
        self.vol_rule = vol
        self.bdm_vals = self.bdm.eval(vol.points)
        self.bdm_grads = self.bdm.eval_grad(vol.points)
        self.bdm_divs = self.bdm.eval_div(vol.points)
        self.rt_vals = self.rt.eval(vol.points)
        self.rt_divs = self.rt.eval_div(vol.points)
        self.p_vals = self.p.eval(vol.points)
        self.p_grads = self.p.eval_grad(vol.points)

        edge = segment_quadrature(self.quad_degree)
        self.edge_rule = edge
        nqe = len(edge.points)
        # traces at edge quadrature points, local edge parametrization
        self.bdm_edge_vals = []
        self.bdm_edge_grads = []
        self.rt_edge_vals = []
        self.p_edge_vals = []
        self.edge_ref_points = []
        for j in range(3):
            pts = _edge_points(j, edge.points)
            self.edge_ref_points.append(pts)
            self.bdm_edge_vals.append(self.bdm.eval(pts))
            self.bdm_edge_grads.append(self.bdm.eval_grad(pts))
            self.rt_edge_vals.append(self.rt.eval(pts))
            self.p_edge_vals.append(self.p.eval(pts))
        # Legendre values at the edge rule, for facet-space bases
        max_modes = max(self.n_uhat, self.n_phat)
        self.leg_edge = legvander(edge.points, max_modes - 1).T

    def facet_trace(self, cache, element, local_edge):
        """Trace values from ``cache`` reordered to the global facet direction.

        Gauss points are symmetric, so reversing the quadrature axis
        evaluates at ``-t``.
        """
        o = self.mesh.facet_direction[element, local_edge]
        vals = cache[local_edge]
        return vals if o == 1 else vals[:, ::-1, ...]

    # -- interpolation -------------------------------------------------

    def interpolate_u(self, f, degree=None):
        """BDM interpolation of a vector field ``f(x) -> (2,)`` by moments."""
        degree = degree or 2 * self.ell + 8
        coeffs = np.zeros(self.size_u)
        edge_rule = segment_quadrature(degree)
        vol_rule = triangle_quadrature(degree)
        leg = legvander(edge_rule.points, self.n_u_edge - 1).T
        weights = self.bdm._interior_weights()
        for t in range(self.mesh.n_elements):
            amap = build_affine_map(self.mesh, t)
            moments = np.empty(self.bdm.n_dofs)
            row = 0
            for j in range(3):
                pts = _edge_points(j, edge_rule.points)
                phys = amap.to_physical(pts)
                fv = np.array([f(x) for x in phys])
                pullback = amap.det * np.einsum("ab,qb->qa", amap.inv_transpose.T, fv)
                vn = pullback @ _REF_EDGE_NORMALS[j]
                scale = _REF_EDGE_LENGTHS[j] / 2.0
                for m in range(self.n_u_edge):
                    moments[row] = (vn * leg[m] * edge_rule.weights).sum() * scale
                    row += 1
            if self.n_u_int:
                phys = amap.to_physical(vol_rule.points)
                fv = np.array([f(x) for x in phys])
                pullback = amap.det * np.einsum("ab,qb->qa", amap.inv_transpose.T, fv)
                for w in weights:
                    wv = w(vol_rule.points)
                    moments[row] = np.einsum("qc,qc,q->", pullback, wv, vol_rule.weights)
                    row += 1
            coeffs[self.u_dofmap[t]] = self.u_signs[t] * moments
        return coeffs

    def interpolate_w(self, f, degree=None):
        """Broken RT interpolation of a vector field, element by element."""
        degree = degree or 2 * self.ell + 8
        coeffs = np.zeros(self.size_w)
        edge_rule = segment_quadrature(degree)
        vol_rule = triangle_quadrature(degree)
        leg = legvander(edge_rule.points, self.rt.n_edge_modes - 1).T
        weights = self.rt._interior_weights()
        for t in range(self.mesh.n_elements):
            amap = build_affine_map(self.mesh, t)
            moments = np.empty(self.rt.n_dofs)
            row = 0
            for j in range(3):
                pts = _edge_points(j, edge_rule.points)
                phys = amap.to_physical(pts)
                fv = np.array([f(x) for x in phys])
                pullback = amap.det * np.einsum("ab,qb->qa", amap.inv_transpose.T, fv)
                vn = pullback @ _REF_EDGE_NORMALS[j]
                for m in range(self.rt.n_edge_modes):
                    moments[row] = (vn * leg[m] * edge_rule.weights).sum() / 2.0
                    row += 1
            if self.rt.n_interior:
                phys = amap.to_physical(vol_rule.points)
                fv = np.array([f(x) for x in phys])
                pullback = amap.det * np.einsum("ab,qb->qa", amap.inv_transpose.T, fv)
                for w in weights:
                    wv = w(vol_rule.points)
                    moments[row] = np.einsum("qc,qc,q->", pullback, wv, vol_rule.weights)
                    row += 1
            coeffs[self.w_dofs(t)] = moments
        return coeffs

    def interpolate_p(self, f, degree=None):
        """Element-wise L2 projection of a scalar field onto P_{ell-1}."""
        degree = degree or 2 * self.ell + 8
        rule = triangle_quadrature(degree)
        vals = self.p.eval(rule.points)
        mass = np.einsum("iq,jq,q->ij", vals, vals, rule.weights)
        coeffs = np.zeros(self.size_p)
        for t in range(self.mesh.n_elements):
            amap = build_affine_map(self.mesh, t)
            phys = amap.to_physical(rule.points)
            fv = np.array([f(x) for x in phys])
            rhs = np.einsum("iq,q,q->i", vals, fv, rule.weights)
            coeffs[self.p_dofs(t)] = np.linalg.solve(mass, rhs)
        return coeffs

    def interpolate_phat(self, f, degree=None):
        """Per-facet Legendre projection of a scalar trace."""
        degree = degree or 2 * self.ell + 8
        rule = segment_quadrature(degree)
        leg = legvander(rule.points, self.n_phat - 1).T
        coeffs = np.zeros(self.size_phat)
        mesh = self.mesh
        for fct in range(mesh.n_facets):
            va, vb = mesh.facet_vertices[fct]
            mid = mesh.facet_midpoint[fct]
            half = 0.5 * (mesh.vertices[vb] - mesh.vertices[va])
            phys = mid + np.outer(rule.points, half)
            fv = np.array([f(x) for x in phys])
            for m in range(self.n_phat):
                c = (2 * m + 1) / 2.0 * (fv * leg[m] * rule.weights).sum()
                coeffs[fct * self.n_phat + m] = c
        return coeffs

    def interpolate_uhat(self, f, degree=None):
        """Per-facet Legendre projection of the tangential trace of ``f``."""
        degree = degree or 2 * self.ell + 8
        rule = segment_quadrature(degree)
        leg = legvander(rule.points, self.n_uhat - 1).T
        coeffs = np.zeros(self.size_uhat)
        mesh = self.mesh
        for fct in range(mesh.n_facets):
            va, vb = mesh.facet_vertices[fct]
            mid = mesh.facet_midpoint[fct]
            half = 0.5 * (mesh.vertices[vb] - mesh.vertices[va])
            phys = mid + np.outer(rule.points, half)
            tang = mesh.facet_tangent[fct]
            fv = np.array([float(np.dot(f(x), tang)) for x in phys])
            for m in range(self.n_uhat):
                c = (2 * m + 1) / 2.0 * (fv * leg[m] * rule.weights).sum()
                coeffs[fct * self.n_uhat + m] = c
        return coeffs


def dof_counts(mesh, ell, n_networks):
    """Global DOF counts with the analysis boundary conditions applied.

    Displacement normal and tangential facet DOFs on the boundary are
    constrained (homogeneous Dirichlet for u), flux spaces are broken so
    all their DOFs remain, facet pressures stay free (zero-flux data).
    """
    if isinstance(ell, SpaceOrder):
        ell = ell.ell
    if ell not in SUPPORTED_ORDERS:
        raise ValueError(f"unsupported order {ell}")
    bdm = _reference_basis("bdm", ell)
    rt = _reference_basis("rt", ell)
    p = _reference_basis("p", ell - 1)
    n_int_facets = len(mesh.interior_facets)
    ne, nf = mesh.n_elements, mesh.n_facets
    return {
        "u": n_int_facets * (ell + 1) + ne * bdm.n_interior,
        "uhat": n_int_facets * (ell + 1),
        "w": n_networks * ne * rt.n_dofs,
        "p": n_networks * ne * p.n_dofs,
        "phat": n_networks * nf * ell,
    }
