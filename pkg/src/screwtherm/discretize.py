"""Galerkin isogeometric discretization.

Multi-patch function spaces with C0 interface coupling (exact DOF merging),
Dirichlet handling by elimination, tensor-product Gauss quadrature, sparse
assembly of the elasticity/Laplace bilinear forms and load functionals, and
an SPD linear solve.

Degenerate (collapsed) patch sides declared by the geometry are handled by
merging all coefficients along the collapsed direction, which keeps the
pushed-forward basis conforming across the singularity.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy import sparse
import scipy.sparse.linalg as spla

from .errors import AssemblyError, GeometryError, SolverError
from .geomgen import MultiPatchModel
from .splinecore import TensorPatch, basis_derivatives, basis_values, parse_side

#: quadrature nodes with |det J| below this are treated as a geometry defect
DETJ_GUARD = 1e-14


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Tensor-product Gauss-Legendre rule on the unit element [0,1]^d."""

    nodes: np.ndarray
    weights: np.ndarray


def gauss_rule(points_per_direction, par_dim: int) -> QuadratureRule:
    """Gauss-Legendre rule, exact for degree 2*points-1 per direction."""
    if np.isscalar(points_per_direction):
        counts = (int(points_per_direction),) * par_dim
    else:
        counts = tuple(int(n) for n in points_per_direction)
    if len(counts) != par_dim or any(n < 1 for n in counts):
        raise AssemblyError("need at least one quadrature point per direction")
    nodes1, weights1 = [], []
    for n in counts:
        x, w = np.polynomial.legendre.leggauss(n)
        nodes1.append(0.5 * (x + 1.0))
        weights1.append(0.5 * w)
    grids = np.meshgrid(*nodes1, indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    wgrids = np.meshgrid(*weights1, indexing="ij")
    weights = np.ones(nodes.shape[0])
    for g in wgrids:
        weights = weights * g.ravel()
    return QuadratureRule(nodes, weights)


# ---------------------------------------------------------------------------
# discrete spaces
# ---------------------------------------------------------------------------

class _UnionFind:
    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)

    def find(self, i: int) -> int:
        p = self.parent
        root = i
        while p[root] != root:
            root = p[root]
        while p[i] != root:
            p[i], i = root, p[i]
        return root

    def union(self, i: int, j: int):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            # keep the smaller index as representative for determinism
            lo, hi = (ri, rj) if ri < rj else (rj, ri)
            self.parent[hi] = lo


def _side_linear_indices(grid_shape: tuple[int, ...], side: str) -> np.ndarray:
    lin = np.arange(int(np.prod(grid_shape)), dtype=np.int64).reshape(grid_shape)
    axis, end = parse_side(side)
    idx: list = [slice(None)] * len(grid_shape)
    idx[axis] = 0 if end == 0 else -1
    return lin[tuple(idx)]


@dataclass(frozen=True)
class DiscreteSpace:
    """Global numbering of a (possibly vector-valued) multi-patch spline space.

    ``patch_dofs[p]`` maps each control coefficient of patch ``p`` to its
    global scalar index (interface-coupled coefficients share one index).
    Vector degrees of freedom are interleaved: ``scalar * components + c``.
    Constrained (Dirichlet) dofs are eliminated; ``free_index`` maps vector
    dofs to 0..K-1 or -1.
    """

    model: MultiPatchModel
    components: int
    patch_dofs: tuple[np.ndarray, ...]
    num_scalar: int
    free_index: np.ndarray
    constrained_dofs: np.ndarray
    dirichlet: dict
    rep_points: np.ndarray

    @property
    def num_vector(self) -> int:
        return self.num_scalar * self.components

    @property
    def num_free(self) -> int:
        return self.num_vector - len(self.constrained_dofs)

    def dirichlet_values(self, functions: Mapping[str, Callable]) -> np.ndarray:
        """Values for constrained dofs from per-boundary coefficient functions.

        Each callable receives the representative control points (n, geo_dim)
        of the boundary's scalar dofs and returns per-component coefficient
        values (n, components) or (n,). By linear precision, evaluating a
        linear field at control points reproduces it exactly.
        """
        values = np.zeros(self.num_vector)
        for name, fn in functions.items():
            comps, scalars = self._boundary_scalars(name)
            vals = np.asarray(fn(self.rep_points[scalars]), dtype=float)
            if vals.ndim == 1:
                vals = vals[:, None]
            for c in comps:
                col = vals[:, c] if vals.shape[1] == self.components else vals[:, 0]
                values[scalars * self.components + c] = col
        return values[self.constrained_dofs]

    def _boundary_scalars(self, name: str):
        spec = self.dirichlet.get(name)
        if spec is None:
            raise AssemblyError(f"boundary {name!r} carries no Dirichlet constraint")
        scalars = set()
        for p, side in self.model.boundary_sides(name):
            sel = _side_linear_indices(self.model.patches[p].grid_shape, side)
            scalars.update(self.patch_dofs[p].ravel()[sel.ravel()].tolist())
        return spec, np.array(sorted(scalars), dtype=np.int64)


def build_space(model: MultiPatchModel, components: int,
                dirichlet: Optional[Mapping[str, object]] = None,
                point_constraints: Sequence[tuple] = ()) -> DiscreteSpace:
    """Number a scalar/vector spline space over a multi-patch model.

    ``dirichlet`` maps boundary names to "all" or a sequence of component
    indices to constrain (homogeneous value unless supplied at solve time).
    ``point_constraints`` pins single control coefficients:
    (patch, grid_index, components); patch-corner coefficients are
    interpolatory, so this pins point values.
    """
    dirichlet = dict(dirichlet or {})
    sizes = [int(np.prod(p.grid_shape)) for p in model.patches]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    uf = _UnionFind(int(offsets[-1]))

    for itf in model.interfaces:
        pa, pb = model.patches[itf.patch_a], model.patches[itf.patch_b]
        axis_a, _ = parse_side(itf.side_a)
        axis_b, _ = parse_side(itf.side_b)
        kvs_a = [kv for i, kv in enumerate(pa.knot_vectors) if i != axis_a]
        kvs_b = [kv for i, kv in enumerate(pb.knot_vectors) if i != axis_b]
        conforming = len(kvs_a) == len(kvs_b) and all(
            a.degree == b.degree and a.knots.shape == b.knots.shape
            and np.array_equal(a.knots, b.knots) for a, b in zip(kvs_a, kvs_b))
        if not conforming:
            raise AssemblyError(f"non-conforming interface: {itf}")
        ia = _side_linear_indices(pa.grid_shape, itf.side_a) + offsets[itf.patch_a]
        ib = _side_linear_indices(pb.grid_shape, itf.side_b) + offsets[itf.patch_b]
        ib = itf.orientation.apply(ib, trailing=0)
        if ia.shape != ib.shape:
            raise AssemblyError(f"interface side grids differ in shape: {itf}")
        for a, b in zip(ia.ravel(), ib.ravel()):
            uf.union(int(a), int(b))

    for sing in model.singular_sides:
        patch = model.patches[sing.patch]
        slab = _side_linear_indices(patch.grid_shape, sing.side) + offsets[sing.patch]
        fixed_axis, _ = parse_side(sing.side)
        side_axes = [a for a in range(patch.par_dim) if a != fixed_axis]
        collapse_pos = side_axes.index(parse_side(sing.collapsed_axis + "0")[0])
        flat = np.moveaxis(slab, collapse_pos, 0).reshape(slab.shape[collapse_pos], -1)
        for row in flat[1:]:
            for a, b in zip(flat[0], row):
                uf.union(int(a), int(b))

    roots = np.array([uf.find(i) for i in range(int(offsets[-1]))], dtype=np.int64)
    unique_roots, scalar_ids = np.unique(roots, return_inverse=True)
    num_scalar = len(unique_roots)

    patch_dofs = tuple(
        scalar_ids[offsets[p]:offsets[p + 1]].reshape(model.patches[p].grid_shape)
        for p in range(len(model.patches)))

    geo_dim = model.patches[0].geo_dim
    rep_points = np.zeros((num_scalar, geo_dim))
    seen = np.zeros(num_scalar, dtype=bool)
    for p, patch in enumerate(model.patches):
        ids = patch_dofs[p].ravel()
        pts = patch.control_points.reshape(-1, geo_dim)
        new = ~seen[ids]
        rep_points[ids[new]] = pts[new]
        seen[ids[new]] = True

    constrained = np.zeros(num_scalar * components, dtype=bool)
    for name, spec in dirichlet.items():
        comps = tuple(range(components)) if spec == "all" else tuple(int(c) for c in spec)
        if any(not 0 <= c < components for c in comps):
            raise AssemblyError(f"invalid component in Dirichlet spec for {name!r}")
        dirichlet[name] = comps
        for p, side in model.boundary_sides(name):
            sel = _side_linear_indices(model.patches[p].grid_shape, side)
            ids = patch_dofs[p].ravel()[sel.ravel()]
            for c in comps:
                constrained[ids * components + c] = True
    for p, grid_index, comps in point_constraints:
        sid = patch_dofs[p][tuple(grid_index)]
        for c in comps:
            constrained[int(sid) * components + int(c)] = True

    free_index = np.full(num_scalar * components, -1, dtype=np.int64)
    free_index[~constrained] = np.arange(int((~constrained).sum()))
    return DiscreteSpace(model, components, patch_dofs, num_scalar, free_index,
                         np.nonzero(constrained)[0], dirichlet, rep_points)


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscreteField:
    """Coefficient vector over the free dofs of a space (plus Dirichlet
    values for the constrained ones)."""

    space: DiscreteSpace
    coefficients: np.ndarray
    dirichlet_values: Optional[np.ndarray] = None

    def __post_init__(self):
        coeffs = np.asarray(self.coefficients, dtype=float)
        if coeffs.shape != (self.space.num_free,):
            raise AssemblyError(
                f"coefficient count {coeffs.shape} != free dof count {self.space.num_free}")
        object.__setattr__(self, "coefficients", coeffs)

    def full_vector(self) -> np.ndarray:
        full = np.zeros(self.space.num_vector)
        free = self.space.free_index >= 0
        full[free] = self.coefficients[self.space.free_index[free]]
        if self.dirichlet_values is not None:
            full[self.space.constrained_dofs] = self.dirichlet_values
        return full

    def _coefficient_patch(self, patch_index: int) -> TensorPatch:
        space = self.space
        patch = space.model.patches[patch_index]
        full = self.full_vector()
        ids = space.patch_dofs[patch_index][..., None] * space.components \
            + np.arange(space.components)
        return TensorPatch(patch.knot_vectors, full[ids], patch.weights)

    def evaluate(self, patch_index: int, params) -> np.ndarray:
        """Field values at patch parameters, shape (n, components)."""
        return self._coefficient_patch(patch_index).evaluate(params)

    def gradient(self, patch_index: int, params) -> np.ndarray:
        """Physical gradient, shape (n, components, geo_dim)."""
        coeff = self._coefficient_patch(patch_index)
        geo = self.space.model.patches[patch_index]
        dpar = np.atleast_3d(coeff.jacobian(params))
        jac = np.atleast_3d(geo.jacobian(params))
        return dpar @ np.linalg.inv(jac)


# ---------------------------------------------------------------------------
# element quadrature tables
# ---------------------------------------------------------------------------

class _DirectionTables:
    def __init__(self, kv, n_quad: int):
        x, w = np.polynomial.legendre.leggauss(n_quad)
        nodes = 0.5 * (x + 1.0)
        wts = 0.5 * w
        spans = kv.spans()
        self.num_elements = len(spans)
        self.lows = np.array([s[1] for s in spans])
        self.highs = np.array([s[2] for s in spans])
        self.widths = self.highs - self.lows
        self.first = np.array([s[0] - kv.degree for s in spans], dtype=np.int64)
        pts = self.lows[:, None] + self.widths[:, None] * nodes[None, :]
        _, ders = basis_derivatives(kv, pts.ravel(), 1)
        self.table = ders.reshape(self.num_elements, n_quad, 2, kv.degree + 1)
        self.params = pts
        self.quad_weights = wts
        self.n_quad = n_quad
        self.n_active = kv.degree + 1


class PatchQuadrature:
    """Batched element quadrature data for one patch.

    Iterating yields element batches carrying active coefficient indices,
    physical quadrature weights, basis values, physical basis gradients and
    quadrature point locations. Rational patches use the rational basis.
    """

    def __init__(self, patch: TensorPatch, points_per_direction=None):
        self.patch = patch
        if points_per_direction is None:
            counts = tuple(kv.degree + 1 for kv in patch.knot_vectors)
        elif np.isscalar(points_per_direction):
            counts = (int(points_per_direction),) * patch.par_dim
        else:
            counts = tuple(int(n) for n in points_per_direction)
        self.dirs = [_DirectionTables(kv, n) for kv, n in zip(patch.knot_vectors, counts)]
        shape = tuple(d.num_elements for d in self.dirs)
        self.element_grid = np.stack(
            [g.ravel() for g in np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")],
            axis=-1) if shape else np.empty((0, 0), dtype=int)
        self.num_elements = self.element_grid.shape[0]

    def batches(self, chunk: int = 16, gradients: bool = True):
        for start in range(0, self.num_elements, chunk):
            yield self._build(self.element_grid[start:start + chunk], gradients)

    def _build(self, elems: np.ndarray, gradients: bool):
        patch = self.patch
        dim = patch.par_dim
        E = elems.shape[0]
        tabs = [d.table[elems[:, i]] for i, d in enumerate(self.dirs)]  # (E,q,2,p+1)
        firsts = [d.first[elems[:, i]] for i, d in enumerate(self.dirs)]
        n_act = [d.n_active for d in self.dirs]
        n_q = [d.n_quad for d in self.dirs]

        # active coefficient (linear) indices in the patch control grid
        grids = [firsts[i][:, None] + np.arange(n_act[i]) for i in range(dim)]
        strides = np.array(patch.grid_shape[1:] + (1,))[::-1].cumprod()[::-1]
        if dim == 1:
            active = grids[0] * strides[0]
        elif dim == 2:
            active = (grids[0][:, :, None] * strides[0]
                      + grids[1][:, None, :] * strides[1]).reshape(E, -1)
        else:
            active = (grids[0][:, :, None, None] * strides[0]
                      + grids[1][:, None, :, None] * strides[1]
                      + grids[2][:, None, None, :] * strides[2]).reshape(E, -1)

        # tensor-product values and parametric gradients
        vals_d = [t[:, :, 0, :] for t in tabs]
        ders_d = [t[:, :, 1, :] for t in tabs]
        if dim == 1:
            values = vals_d[0]
            dpar = ders_d[0][..., None]
            params = self.dirs[0].params[elems[:, 0]][..., None]
            wref = np.broadcast_to(self.dirs[0].quad_weights, values.shape[:2]).copy()
            wref *= self.dirs[0].widths[elems[:, 0]][:, None]
        elif dim == 2:
            values = np.einsum("eqa,erb->eqrab", vals_d[0], vals_d[1]).reshape(
                E, n_q[0] * n_q[1], -1)
            g0 = np.einsum("eqa,erb->eqrab", ders_d[0], vals_d[1]).reshape(values.shape)
            g1 = np.einsum("eqa,erb->eqrab", vals_d[0], ders_d[1]).reshape(values.shape)
            dpar = np.stack([g0, g1], axis=-1)
            p0 = self.dirs[0].params[elems[:, 0]]
            p1 = self.dirs[1].params[elems[:, 1]]
            params = np.stack([
                np.repeat(p0, n_q[1], axis=1),
                np.tile(p1, (1, n_q[0]))], axis=-1)
            wq = np.outer(self.dirs[0].quad_weights, self.dirs[1].quad_weights).ravel()
            wref = wq[None, :] * (self.dirs[0].widths[elems[:, 0]]
                                  * self.dirs[1].widths[elems[:, 1]])[:, None]
        else:
            values = np.einsum("eqa,erb,esc->eqrsabc", vals_d[0], vals_d[1],
                               vals_d[2]).reshape(E, n_q[0] * n_q[1] * n_q[2], -1)
            g0 = np.einsum("eqa,erb,esc->eqrsabc", ders_d[0], vals_d[1],
                           vals_d[2]).reshape(values.shape)
            g1 = np.einsum("eqa,erb,esc->eqrsabc", vals_d[0], ders_d[1],
                           vals_d[2]).reshape(values.shape)
            g2 = np.einsum("eqa,erb,esc->eqrsabc", vals_d[0], vals_d[1],
                           ders_d[2]).reshape(values.shape)
            dpar = np.stack([g0, g1, g2], axis=-1)
            p0 = self.dirs[0].params[elems[:, 0]]
            p1 = self.dirs[1].params[elems[:, 1]]
            p2 = self.dirs[2].params[elems[:, 2]]
            params = np.stack([
                np.repeat(p0, n_q[1] * n_q[2], axis=1),
                np.tile(np.repeat(p1, n_q[2], axis=1), (1, n_q[0])),
                np.tile(p2, (1, n_q[0] * n_q[1]))], axis=-1)
            wq = (self.dirs[0].quad_weights[:, None, None]
                  * self.dirs[1].quad_weights[None, :, None]
                  * self.dirs[2].quad_weights[None, None, :]).ravel()
            wref = wq[None, :] * (self.dirs[0].widths[elems[:, 0]]
                                  * self.dirs[1].widths[elems[:, 1]]
                                  * self.dirs[2].widths[elems[:, 2]])[:, None]

        cp = patch.control_points.reshape(-1, patch.geo_dim)[active]  # (E,A,g)
        if patch.is_rational:
            wts = patch.weights.ravel()[active]  # (E,A)
            W = np.einsum("eqa,ea->eq", values, wts)
            dW = np.einsum("eqad,ea->eqd", dpar, wts)
            values = values * wts[:, None, :] / W[:, :, None]
            dpar = (dpar * wts[:, None, :, None]
                    - values[..., None] * dW[:, :, None, :]) / W[:, :, None, None]

        jac = np.einsum("eqad,eag->eqgd", dpar, cp)
        det = np.linalg.det(jac)
        if det.min() <= DETJ_GUARD:
            raise AssemblyError(
                f"geometry Jacobian not positive at a quadrature point "
                f"(min det {det.min():.3e}); refine or fix the parametrization")
        grads = None
        if gradients:
            grads = dpar @ np.linalg.inv(jac)
        points = np.einsum("eqa,eag->eqg", values, cp)
        return _Batch(active, values, grads, wref * det, points, params, det)


@dataclass
class _Batch:
    active: np.ndarray      # (E, A) linear coefficient indices in the patch grid
    values: np.ndarray      # (E, Q, A)
    grads: np.ndarray       # (E, Q, A, d) physical, or None
    weights: np.ndarray     # (E, Q) physical measure
    points: np.ndarray      # (E, Q, geo_dim)
    params: np.ndarray      # (E, Q, par_dim)
    det: np.ndarray         # (E, Q)


class FaceQuadrature:
    """Quadrature over one patch side with outward normals and surface
    measure (used for traction loads and face integrals)."""

    def __init__(self, patch: TensorPatch, side: str, points_per_direction=None):
        self.patch = patch
        axis, end = parse_side(side)
        self.axis, self.end = axis, end
        kv = patch.knot_vectors[axis]
        lo, hi = kv.domain
        self.fixed_value = lo if end == 0 else hi
        face_dirs = [i for i in range(patch.par_dim) if i != axis]
        if points_per_direction is None:
            counts = {i: patch.knot_vectors[i].degree + 1 for i in face_dirs}
        elif np.isscalar(points_per_direction):
            counts = {i: int(points_per_direction) for i in face_dirs}
        else:
            counts = {i: int(points_per_direction[k]) for k, i in enumerate(face_dirs)}
        self.face_dirs = face_dirs
        self.dirs = {i: _DirectionTables(patch.knot_vectors[i], counts[i]) for i in face_dirs}
        # fixed-direction basis values at the side (only the edge function is
        # non-zero on a clamped side)
        _, ders = basis_derivatives(kv, np.array([self.fixed_value]), 1)
        self.fixed_table = ders[0]  # (2, p+1)
        self.fixed_first = kv.span(self.fixed_value) - kv.degree
        shape = tuple(self.dirs[i].num_elements for i in face_dirs)
        self.element_grid = np.stack(
            [g.ravel() for g in np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")],
            axis=-1) if shape else np.zeros((1, 0), dtype=int)
        self.num_elements = self.element_grid.shape[0]

    def batches(self, chunk: int = 64):
        for start in range(0, self.num_elements, chunk):
            yield self._build(self.element_grid[start:start + chunk])

    def _build(self, elems: np.ndarray):
        patch = self.patch
        dim = patch.par_dim
        E = elems.shape[0]
        ax = self.axis

        tabs, firsts, nq = {}, {}, {}
        for k, i in enumerate(self.face_dirs):
            d = self.dirs[i]
            tabs[i] = d.table[elems[:, k]]
            firsts[i] = d.first[elems[:, k]]
            nq[i] = d.n_quad
        p_ax = patch.knot_vectors[ax].degree

        def dir_values(i, deriv):
            if i == ax:
                row = self.fixed_table[deriv][None, None, :]
                return np.broadcast_to(row, (E, 1, p_ax + 1))
            return tabs[i][:, :, deriv, :]

        def dir_first(i):
            if i == ax:
                return np.full(E, self.fixed_first, dtype=np.int64)
            return firsts[i]

        def dir_params(i):
            if i == ax:
                return np.full((E, 1), self.fixed_value)
            k = self.face_dirs.index(i)
            return self.dirs[i].params[elems[:, k]]

        n_act = [patch.knot_vectors[i].degree + 1 for i in range(dim)]
        grids = [dir_first(i)[:, None] + np.arange(n_act[i]) for i in range(dim)]
        strides = np.array(patch.grid_shape[1:] + (1,))[::-1].cumprod()[::-1]
        if dim == 2:
            active = (grids[0][:, :, None] * strides[0]
                      + grids[1][:, None, :] * strides[1]).reshape(E, -1)
            v = [dir_values(i, 0) for i in range(2)]
            g = [dir_values(i, 1) for i in range(2)]
            values = np.einsum("eqa,erb->eqrab", v[0], v[1]).reshape(E, -1, n_act[0] * n_act[1])
            dpar = np.stack([
                np.einsum("eqa,erb->eqrab", g[0], v[1]).reshape(values.shape),
                np.einsum("eqa,erb->eqrab", v[0], g[1]).reshape(values.shape)], axis=-1)
            pp = [dir_params(i) for i in range(2)]
            q0, q1 = pp[0].shape[1], pp[1].shape[1]
            params = np.stack([np.repeat(pp[0], q1, axis=1),
                               np.tile(pp[1], (1, q0))], axis=-1)
        else:
            active = (grids[0][:, :, None, None] * strides[0]
                      + grids[1][:, None, :, None] * strides[1]
                      + grids[2][:, None, None, :] * strides[2]).reshape(E, -1)
            v = [dir_values(i, 0) for i in range(3)]
            g = [dir_values(i, 1) for i in range(3)]
            values = np.einsum("eqa,erb,esc->eqrsabc", v[0], v[1], v[2]).reshape(
                E, -1, n_act[0] * n_act[1] * n_act[2])
            dpar = np.stack([
                np.einsum("eqa,erb,esc->eqrsabc", g[0], v[1], v[2]).reshape(values.shape),
                np.einsum("eqa,erb,esc->eqrsabc", v[0], g[1], v[2]).reshape(values.shape),
                np.einsum("eqa,erb,esc->eqrsabc", v[0], v[1], g[2]).reshape(values.shape)],
                axis=-1)
            pp = [dir_params(i) for i in range(3)]
            q = [p.shape[1] for p in pp]
            params = np.stack([
                np.repeat(pp[0], q[1] * q[2], axis=1),
                np.tile(np.repeat(pp[1], q[2], axis=1), (1, q[0])),
                np.tile(pp[2], (1, q[0] * q[1]))], axis=-1)

        wref = np.ones((E, values.shape[1]))
        wq_parts = []
        for k, i in enumerate(self.face_dirs):
            wq_parts.append((self.dirs[i].quad_weights,
                             self.dirs[i].widths[elems[:, k]]))
        if dim == 2:
            (w0, s0), = wq_parts
            wref = w0[None, :] * s0[:, None]
        else:
            (w0, s0), (w1, s1) = wq_parts
            wref = np.outer(w0, w1).ravel()[None, :] * (s0 * s1)[:, None]

        cp = patch.control_points.reshape(-1, patch.geo_dim)[active]
        if patch.is_rational:
            wts = patch.weights.ravel()[active]
            W = np.einsum("eqa,ea->eq", values, wts)
            dW = np.einsum("eqad,ea->eqd", dpar, wts)
            values = values * wts[:, None, :] / W[:, :, None]
            dpar = (dpar * wts[:, None, :, None]
                    - values[..., None] * dW[:, :, None, :]) / W[:, :, None, None]

        jac = np.einsum("eqad,eag->eqgd", dpar, cp)
        det = np.linalg.det(jac)
        sign = 1.0 if self.end == 1 else -1.0
        # n dS = sign * det(J) * J^{-T} e_axis dxi
        jinv = np.linalg.inv(jac)
        nvec = sign * det[..., None] * jinv[:, :, self.axis, :]
        measure = np.linalg.norm(nvec, axis=-1)
        normals = nvec / measure[..., None]
        points = np.einsum("eqa,eag->eqg", values, cp)
        return _FaceBatch(active, values, wref * measure, points, params, normals)


@dataclass
class _FaceBatch:
    active: np.ndarray
    values: np.ndarray
    weights: np.ndarray
    points: np.ndarray
    params: np.ndarray
    normals: np.ndarray


# ---------------------------------------------------------------------------
# linear systems and assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearSystem:
    """Sparse symmetric system A q = r over a discrete space.

    Assembled unreduced (all vector dofs); ``reduce`` eliminates Dirichlet
    dofs, shifting their values to the right-hand side, and yields the SPD
    system on the free dofs.
    """

    matrix: sparse.csr_matrix
    rhs: np.ndarray
    space: DiscreteSpace
    reduced: bool = False

    def with_rhs(self, rhs: np.ndarray) -> "LinearSystem":
        if self.reduced:
            raise AssemblyError("cannot replace the rhs of a reduced system")
        if rhs.shape != (self.space.num_vector,):
            raise AssemblyError("rhs size mismatch")
        return replace(self, rhs=np.asarray(rhs, dtype=float))

    def reduce(self, dirichlet_values: Optional[np.ndarray] = None) -> "LinearSystem":
        if self.reduced:
            return self
        space = self.space
        free = np.nonzero(space.free_index >= 0)[0]
        a_ff = self.matrix[free][:, free].tocsr()
        rhs = self.rhs[free]
        if dirichlet_values is not None and len(space.constrained_dofs):
            g = np.asarray(dirichlet_values, dtype=float)
            if g.shape != space.constrained_dofs.shape:
                raise AssemblyError("dirichlet value vector has wrong length")
            rhs = rhs - self.matrix[free][:, space.constrained_dofs] @ g
        return LinearSystem(a_ff, rhs, space, reduced=True)


def _accumulate(space: DiscreteSpace, patch_index: int, batch, local: np.ndarray,
                rows: list, cols: list, vals: list):
    d = space.components
    gd = space.patch_dofs[patch_index].ravel()[batch.active]        # (E, A)
    vdofs = (gd[:, :, None] * d + np.arange(d)).reshape(gd.shape[0], -1)  # (E, A*d)
    E, n = vdofs.shape
    r = np.repeat(vdofs, n, axis=1).ravel()
    c = np.tile(vdofs, (1, n)).ravel()
    rows.append(r.astype(np.int32))
    cols.append(c.astype(np.int32))
    vals.append(local.reshape(-1))


def _finalize(space: DiscreteSpace, rows, cols, vals) -> sparse.csr_matrix:
    n = space.num_vector
    if not rows:
        return sparse.csr_matrix((n, n))
    mat = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n)).tocsr()
    mat.sum_duplicates()
    return mat


def assemble_elasticity(space: DiscreteSpace, material,
                        quadrature_points=None, chunk: int = 16) -> LinearSystem:
    """Stiffness of the linear elasticity bilinear form
    a(u, v) = int 2 mu eps(u):eps(v) + lambda div u div v."""
    d = space.components
    if d != space.model.patches[0].geo_dim:
        raise AssemblyError("elasticity requires one component per geometric dimension")
    mu, lam = material.mu, material.lam
    mat = None
    eye = np.eye(d)
    for ip, patch in enumerate(space.model.patches):
        rows, cols, vals = [], [], []
        pq = PatchQuadrature(patch, quadrature_points)
        for batch in pq.batches(chunk):
            # P[a,i,b,j] = sum_q w G[q,a,i] G[q,b,j]
            P = np.einsum("eq,eqai,eqbj->eaibj", batch.weights, batch.grads, batch.grads,
                          optimize=True)
            M1 = np.einsum("eaibi->eab", P)
            local = mu * (np.einsum("eab,ij->eaibj", M1, eye) + P.transpose(0, 1, 4, 3, 2)) \
                + lam * P
            _accumulate(space, ip, batch, local, rows, cols, vals)
        part = _finalize(space, rows, cols, vals)
        mat = part if mat is None else mat + part
    return LinearSystem(mat, np.zeros(space.num_vector), space)


def assemble_laplace(space: DiscreteSpace, conductivity: float = 1.0,
                     quadrature_points=None, chunk: int = 32) -> LinearSystem:
    """Stiffness of int kappa grad T . grad v."""
    if space.components != 1:
        raise AssemblyError("Laplace assembly requires a scalar space")
    mat = None
    for ip, patch in enumerate(space.model.patches):
        rows, cols, vals = [], [], []
        pq = PatchQuadrature(patch, quadrature_points)
        for batch in pq.batches(chunk):
            local = conductivity * np.einsum(
                "eq,eqad,eqbd->eab", batch.weights, batch.grads, batch.grads, optimize=True)
            _accumulate(space, ip, batch, local, rows, cols, vals)
        part = _finalize(space, rows, cols, vals)
        mat = part if mat is None else mat + part
    return LinearSystem(mat, np.zeros(space.num_vector), space)


def assemble_thermal_load(space: DiscreteSpace, material, temperature,
                          quadrature_points=None, chunk: int = 16) -> np.ndarray:
    """Thermal right-hand side in integrated-by-parts form:
    int sigma(eps_T) : grad^s v = int (2 mu + d lambda) alpha (T - T0) div v.

    Algebraically identical to assembling (g - div sigma_T, v) plus the
    boundary term sigma_T . n on the Neumann boundary, because test
    functions vanish on the Dirichlet boundary.
    """
    d = space.components
    coeff = (2.0 * material.mu + d * material.lam) * material.alpha
    rhs = np.zeros(space.num_vector)
    for ip, patch in enumerate(space.model.patches):
        pq = PatchQuadrature(patch, quadrature_points)
        for batch in pq.batches(chunk):
            dt = temperature.evaluate(ip, batch.params.reshape(-1, patch.par_dim),
                                      batch.points.reshape(-1, patch.geo_dim))
            dt = np.asarray(dt, dtype=float).reshape(batch.weights.shape) - material.t0
            local = coeff * np.einsum("eq,eq,eqai->eai", batch.weights, dt, batch.grads)
            gd = space.patch_dofs[ip].ravel()[batch.active]
            vdofs = gd[:, :, None] * d + np.arange(d)
            np.add.at(rhs, vdofs.ravel(), local.ravel())
    return rhs


def assemble_traction_load(space: DiscreteSpace, boundary_name: str, traction,
                           quadrature_points=None) -> np.ndarray:
    """Surface load int f . v over a named boundary.

    ``traction`` is a constant vector (N/mm^2), a scalar pressure applied
    along the outward normal, or a callable points -> (n, d) tractions.
    """
    d = space.components
    rhs = np.zeros(space.num_vector)
    for ip, side in space.model.boundary_sides(boundary_name):
        patch = space.model.patches[ip]
        fq = FaceQuadrature(patch, side, quadrature_points)
        for batch in fq.batches():
            if callable(traction):
                f = np.asarray(traction(batch.points.reshape(-1, patch.geo_dim)))
                f = f.reshape(batch.normals.shape)
            elif np.isscalar(traction):
                f = float(traction) * batch.normals
            else:
                f = np.broadcast_to(np.asarray(traction, dtype=float), batch.normals.shape)
            local = np.einsum("eq,eqi,eqa->eai", batch.weights, f, batch.values)
            gd = space.patch_dofs[ip].ravel()[batch.active]
            vdofs = gd[:, :, None] * d + np.arange(d)
            np.add.at(rhs, vdofs.ravel(), local.ravel())
    return rhs


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------

def make_solver(system: LinearSystem, method: str = "auto", tol: float = 1e-10):
    """Prepare a solve handle for the reduced SPD system (factorization or
    preconditioner is reused across right-hand sides).

    ``method``: "direct" (sparse LU), "cg" (Jacobi-preconditioned conjugate
    gradients), "amg" (smoothed-aggregation preconditioned CG, if pyamg is
    available) or "auto". The returned callable maps a rhs to coefficients
    with relative residual at most ``tol``.
    """
    if not system.reduced:
        raise SolverError("solve expects a reduced (Dirichlet-eliminated) system")
    a = system.matrix
    n = a.shape[0]
    if n == 0:
        return lambda b: np.zeros(0)
    diag = a.diagonal()
    if np.any(diag <= 0):
        raise SolverError(
            "matrix is not positive definite (non-positive diagonal entry); "
            "check boundary conditions constrain all rigid-body modes")
    if method == "auto":
        method = "direct" if n <= 60000 else "amg"

    if method == "direct":
        try:
            lu = spla.splu(a.tocsc())
        except RuntimeError as exc:
            raise SolverError(f"sparse factorization failed: {exc}") from exc

        def run(b):
            return lu.solve(b)
    elif method in ("cg", "amg"):
        pre = None
        if method == "amg":
            try:
                import pyamg

                ml = pyamg.smoothed_aggregation_solver(a.tocsr())
                pre = ml.aspreconditioner(cycle="V")
            except ImportError:
                pre = None
        if pre is None:
            inv_diag = 1.0 / diag
            pre = spla.LinearOperator(a.shape, matvec=lambda x: inv_diag * x)

        def run(b):
            q, info = spla.cg(a, b, rtol=min(tol, 1e-11), atol=0.0, M=pre,
                              maxiter=50 * int(np.sqrt(n) + 100))
            if info != 0:
                raise SolverError(
                    f"conjugate gradients did not converge (info={info}); "
                    "matrix may not be SPD")
            return q
    else:
        raise SolverError(f"unknown solver method {method!r}")

    def checked(b):
        q = run(b)
        if not np.all(np.isfinite(q)):
            raise SolverError("solver produced non-finite values; matrix may be singular")
        res = np.linalg.norm(a @ q - b)
        ref = np.linalg.norm(b)
        if ref > 0 and res > tol * ref:
            raise SolverError(
                f"residual contract violated: |Aq-r| = {res:.3e} > "
                f"{tol:.1e} * |r| = {tol * ref:.3e}")
        return q

    return checked


def solve(system: LinearSystem, method: str = "auto", tol: float = 1e-10) -> np.ndarray:
    """Solve the reduced SPD system to a relative residual of ``tol``."""
    return make_solver(system, method, tol)(system.rhs)
