"""Geometric model construction for twin-screw compressor analysis.

Builds B-spline curves from rotor point clouds (least-squares fitting with
sharp-corner knots), exact NURBS casing arcs, scaled-boundary 2D rotor
cross-sections, twisted 3D rotor lofts and the multi-patch casing, plus a
conformity/quality validator for the resulting models.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from .errors import FitError, GeometryError
from .splinecore import (
    KnotVector,
    TensorPatch,
    basis_values,
    curve_derivatives,
    open_uniform_knots,
    parse_side,
    side_name,
)

# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PointCloud2D:
    """Ordered planar profile points in mm.

    ``closed`` marks a loop (closure implied, first point not repeated);
    ``corner_indices`` are indices of points where the profile has a sharp
    corner.
    """

    points: np.ndarray
    closed: bool = False
    corner_indices: tuple[int, ...] = ()

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "corner_indices", tuple(int(i) for i in self.corner_indices))
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise GeometryError("point cloud must have shape (n, 2)")
        if self.closed and np.allclose(pts[0], pts[-1]):
            raise GeometryError("closed cloud must not repeat the first point")
        for i in self.corner_indices:
            if not 0 <= i < len(pts):
                raise GeometryError(f"corner index {i} out of range")


@dataclass(frozen=True)
class FitReport:
    max_deviation: float
    control_point_count: int
    degree: int

    def __post_init__(self):
        if self.max_deviation < 0:
            raise GeometryError("max_deviation must be non-negative")


@dataclass(frozen=True)
class Orientation:
    """How side B's control slab maps onto side A's: optional transpose of
    the two in-side axes (3D only) followed by per-axis reversals."""

    swap: bool = False
    flips: tuple[bool, ...] = ()

    def apply(self, slab: np.ndarray, trailing: int = 1) -> np.ndarray:
        """Reorder a side control slab (grid dims + ``trailing`` data axes)."""
        grid_dims = slab.ndim - trailing
        if self.swap:
            if grid_dims != 2:
                raise GeometryError("swap orientation requires a 2D side grid")
            slab = np.swapaxes(slab, 0, 1)
        for ax, flip in enumerate(self.flips):
            if flip:
                slab = np.flip(slab, axis=ax)
        return slab


@dataclass(frozen=True)
class Interface:
    patch_a: int
    side_a: str
    patch_b: int
    side_b: str
    orientation: Orientation = Orientation()

    def __str__(self):
        return f"patch {self.patch_a} side {self.side_a} <-> patch {self.patch_b} side {self.side_b}"


@dataclass(frozen=True)
class SingularSide:
    """A declared degenerate side (control layer collapsed along an axis)."""

    patch: int
    side: str
    collapsed_axis: str = "u"


@dataclass(frozen=True)
class MultiPatchModel:
    """Patches plus interface topology and named boundary regions."""

    patches: tuple[TensorPatch, ...]
    interfaces: tuple[Interface, ...] = ()
    boundaries: dict = field(default_factory=dict)
    singular_sides: tuple[SingularSide, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "patches", tuple(self.patches))
        object.__setattr__(self, "interfaces", tuple(self.interfaces))
        object.__setattr__(self, "singular_sides", tuple(self.singular_sides))
        bmap = {name: tuple((int(p), str(s)) for p, s in sides)
                for name, sides in dict(self.boundaries).items()}
        object.__setattr__(self, "boundaries", bmap)
        npatch = len(self.patches)
        for itf in self.interfaces:
            if not (0 <= itf.patch_a < npatch and 0 <= itf.patch_b < npatch):
                raise GeometryError(f"interface references missing patch: {itf}")
        for name, sides in bmap.items():
            for p, s in sides:
                if not 0 <= p < npatch:
                    raise GeometryError(f"boundary {name!r} references missing patch {p}")
                parse_side(s)

    @property
    def par_dim(self) -> int:
        return self.patches[0].par_dim

    def boundary_sides(self, name: str) -> tuple[tuple[int, str], ...]:
        try:
            return self.boundaries[name]
        except KeyError:
            raise GeometryError(f"unknown boundary {name!r}; have {sorted(self.boundaries)}")

    def refined(self, times: int = 1) -> "MultiPatchModel":
        """Uniformly refine every patch; topology is preserved because
        matching sides carry identical knot vectors."""
        return replace(self, patches=tuple(p.uniform_refined(times) for p in self.patches))

    def translated(self, offset) -> "MultiPatchModel":
        return replace(self, patches=tuple(p.translated(offset) for p in self.patches))


# ---------------------------------------------------------------------------
# closest-point queries and deviation measurement
# ---------------------------------------------------------------------------

def _sample_params(curve: TensorPatch, n: int) -> np.ndarray:
    lo, hi = curve.knot_vectors[0].domain
    return np.linspace(lo, hi, n)


def closest_point_params(curve: TensorPatch, query: np.ndarray,
                         samples: int = 2048, newton_steps: int = 3):
    """Per query point: parameter and distance of the closest curve point.

    Dense sampling seeds a few Newton steps on the footpoint equation; the
    seed distance is kept whenever Newton does not improve it. Closed curves
    wrap across the seam instead of clamping.
    """
    query = np.atleast_2d(np.asarray(query, dtype=float))
    ts = _sample_params(curve, samples)
    pts = curve.evaluate(ts[:, None])
    _, idx = cKDTree(pts).query(query)
    t = ts[idx]
    lo, hi = curve.knot_vectors[0].domain
    scale = max(float(np.abs(curve.control_points).max()), 1.0)
    closed = np.linalg.norm(pts[0] - pts[-1]) <= 1e-9 * scale
    best_t = t.copy()
    d = curve.evaluate(t[:, None]) - query
    best_d2 = np.einsum("nc,nc->n", d, d)
    for _ in range(newton_steps):
        der = curve_derivatives(curve, t, 2)
        r = der[:, 0] - query
        f = np.einsum("nc,nc->n", r, der[:, 1])
        fp = np.einsum("nc,nc->n", der[:, 1], der[:, 1]) + np.einsum("nc,nc->n", r, der[:, 2])
        step = np.where(np.abs(fp) > 1e-30, f / np.where(fp == 0, 1.0, fp), 0.0)
        t = t - step
        if closed:
            t = lo + np.mod(t - lo, hi - lo)
        else:
            t = np.clip(t, lo, hi)
        d = curve.evaluate(t[:, None]) - query
        d2 = np.einsum("nc,nc->n", d, d)
        better = d2 < best_d2
        best_d2 = np.where(better, d2, best_d2)
        best_t = np.where(better, t, best_t)
        t = best_t.copy()
    return best_t, np.sqrt(best_d2)


def max_deviation(curve: TensorPatch, cloud: PointCloud2D,
                  samples: int = 2048, newton_steps: int = 3) -> float:
    """Max over cloud points of the minimal distance to the curve (mm)."""
    _, dist = closest_point_params(curve, cloud.points, samples, newton_steps)
    return float(dist.max())


# ---------------------------------------------------------------------------
# curve fitting
# ---------------------------------------------------------------------------

def _chord_parameters(points: np.ndarray, closed: bool) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    if closed:
        seg = np.append(seg, np.linalg.norm(points[0] - points[-1]))
        total = seg.sum()
        return np.concatenate([[0.0], np.cumsum(seg[:-1])]) / total
    total = seg.sum()
    if total <= 0:
        raise GeometryError("degenerate point cloud (zero chord length)")
    return np.concatenate([[0.0], np.cumsum(seg)]) / total


def _fit_knot_vector(degree: int, corner_params: Sequence[float],
                     extra_interior: Sequence[float]) -> KnotVector:
    interior = []
    for c in corner_params:
        interior.extend([c] * degree)
    interior.extend(extra_interior)
    interior = np.sort(np.asarray(interior, dtype=float))
    knots = np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])
    return KnotVector(degree, knots)


def _assemble_controls(kv: KnotVector, closed: bool, coeffs: np.ndarray,
                       points: np.ndarray) -> TensorPatch:
    n = kv.num_basis
    ctrl = np.empty((n, points.shape[1]))
    if closed:
        ctrl[:-1] = coeffs
        ctrl[-1] = coeffs[0]
    else:
        ctrl[0] = points[0]
        ctrl[-1] = points[-1]
        ctrl[1:-1] = coeffs
    return TensorPatch((kv,), ctrl)


def _solve_least_squares(kv: KnotVector, params: np.ndarray, points: np.ndarray,
                         closed: bool) -> TensorPatch:
    """Plain least-squares control points for fixed knots and parameters.

    Closed fits merge the first and last control point; open fits
    interpolate the first and last cloud point exactly.
    """
    n = kv.num_basis
    p = kv.degree
    npts = len(points)
    spans, vals = basis_values(kv, params)
    rows = np.repeat(np.arange(npts), p + 1)
    cols = (spans[:, None] - p + np.arange(p + 1)).ravel()
    data = vals.ravel()

    if closed:
        n_unknown = n - 1
        a = sparse.coo_matrix((data, (rows, cols % n_unknown)),
                              shape=(npts, n_unknown)).tocsr()
        rhs = points
    else:
        # eliminate clamped endpoint controls (interpolation constraints)
        n_unknown = n - 2
        keep = (cols >= 1) & (cols <= n - 2)
        a = sparse.coo_matrix((data[keep], (rows[keep], cols[keep] - 1)),
                              shape=(npts, n_unknown)).tocsr()
        rhs = points.copy()
        first = (cols == 0)
        last = (cols == n - 1)
        rhs[rows[first]] -= np.outer(data[first], points[0])
        rhs[rows[last]] -= np.outer(data[last], points[-1])

    gram = (a.T @ a).tocsc()
    if np.any(gram.diagonal() <= 0):
        raise FitError("a basis function has no data support; cannot fit")
    coeffs = np.column_stack([spsolve(gram, a.T @ rhs[:, k]) for k in range(points.shape[1])])
    return _assemble_controls(kv, closed, coeffs, points)


def _solve_normal_distance(kv: KnotVector, params: np.ndarray, points: np.ndarray,
                           closed: bool, curve: TensorPatch,
                           tangent_weight: float = 0.05) -> TensorPatch:
    """Least squares on normal distances with a small tangential weight.

    Point-distance minimization stalls once the residual is mostly
    tangential (a pure reparametrization); projecting residuals onto the
    local curve normals converges fast near the optimum. The tangential
    equations keep the system full rank.
    """
    n = kv.num_basis
    p = kv.degree
    npts = len(points)
    spans, vals = basis_values(kv, params)
    der = curve_derivatives(curve, params, 1)
    speed = np.linalg.norm(der[:, 1], axis=1, keepdims=True)
    tau = der[:, 1] / np.where(speed > 0, speed, 1.0)
    nor = np.column_stack([-tau[:, 1], tau[:, 0]])

    n_unknown = (n - 1 if closed else n - 2) * 2
    rows, cols, data = [], [], []
    rhs = []
    for eq, (dirs, w) in enumerate(((nor, 1.0), (tau, tangent_weight))):
        b = np.einsum("nc,nc->n", dirs, points) * w
        for j in range(p + 1):
            c = spans - p + j
            v = vals[:, j] * w
            for comp in range(2):
                r = np.arange(npts) + eq * npts
                entries = v * dirs[:, comp]
                if closed:
                    rows.append(r)
                    cols.append((c % (n - 1)) * 2 + comp)
                    data.append(entries)
                else:
                    inside = (c >= 1) & (c <= n - 2)
                    rows.append(r[inside])
                    cols.append((c[inside] - 1) * 2 + comp)
                    data.append(entries[inside])
                    for cf, pf in ((0, points[0]), (n - 1, points[-1])):
                        m = c == cf
                        if m.any():
                            b[m] -= entries[m] * pf[comp]
        rhs.append(b)
    a = sparse.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(2 * npts, n_unknown)).tocsr()
    gram = (a.T @ a).tocsc()
    if np.any(gram.diagonal() <= 0):
        raise FitError("a basis function has no data support; cannot fit")
    coeffs = spsolve(gram, a.T @ np.concatenate(rhs)).reshape(-1, 2)
    return _assemble_controls(kv, closed, coeffs, points)


def _correct_parameters(curve: TensorPatch, points: np.ndarray, params: np.ndarray,
                        closed: bool, steps: int = 3) -> np.ndarray:
    """Newton footpoint correction; closed curves wrap across the seam."""
    lo, hi = curve.knot_vectors[0].domain
    t = params.copy()
    for _ in range(steps):
        der = curve_derivatives(curve, t, 2)
        r = der[:, 0] - points
        f = np.einsum("nc,nc->n", r, der[:, 1])
        fp = np.einsum("nc,nc->n", der[:, 1], der[:, 1]) + np.einsum("nc,nc->n", r, der[:, 2])
        step = np.where(np.abs(fp) > 1e-30, f / np.where(fp == 0, 1.0, fp), 0.0)
        t = t - step
        if closed:
            t = lo + np.mod(t - lo, hi - lo)
        else:
            t = np.clip(t, lo, hi)
    if not closed:
        t[0], t[-1] = lo, hi
    return t


def fit_curve(cloud: PointCloud2D, degree: int = 3, tolerance: float = 1e-3,
              max_control_points: int = 160) -> tuple[TensorPatch, FitReport]:
    """Least-squares B-spline approximation of a point cloud.

    Control points are added adaptively (knot inserted in the span of worst
    deviation) until the deviation is at or below ``tolerance`` (mm). Marked
    corners receive interior knots of multiplicity ``degree`` so the curve is
    C0 there; closed clouds produce a clamped curve with coincident end
    control points, with the seam rotated onto the first marked corner.
    """
    if tolerance <= 0:
        raise GeometryError("tolerance must be positive")
    if degree < 1:
        raise GeometryError("degree must be at least 1")
    points = np.asarray(cloud.points, dtype=float)
    if len(points) < degree + 1:
        raise FitError(f"cloud has {len(points)} points, need at least {degree + 1}")

    corners = sorted(cloud.corner_indices)
    if cloud.closed and corners:
        shift = corners[0]
        points = np.roll(points, -shift, axis=0)
        corners = [(c - shift) % len(points) for c in corners]
        corners.sort()

    params = _chord_parameters(points, cloud.closed)
    corner_params = [params[c] for c in corners if c != 0]

    kv = _fit_knot_vector(degree, corner_params, [])
    if kv.num_basis > len(points):
        raise FitError("fewer cloud points than control points required by corners")

    def residuals(curve, t):
        return np.linalg.norm(curve.evaluate(t[:, None]) - points, axis=1)

    curve = None
    deviation = np.inf
    for _ in range(3 * max_control_points):
        curve = _solve_least_squares(kv, params, points, cloud.closed)
        params = _correct_parameters(curve, points, params, cloud.closed)
        deviation = float(residuals(curve, params).max())
        # polish with normal-distance steps while they keep improving
        for _ in range(30):
            if deviation <= tolerance:
                break
            cand = _solve_normal_distance(kv, params, points, cloud.closed, curve)
            cand_params = _correct_parameters(cand, points, params, cloud.closed)
            cand_dev = float(residuals(cand, cand_params).max())
            strong = cand_dev <= 0.5 * deviation
            if cand_dev < deviation:
                curve, params, deviation = cand, cand_params, cand_dev
            if not strong:
                break
        if deviation <= tolerance:
            break
        if kv.num_basis >= max_control_points:
            raise FitError(
                f"tolerance {tolerance} mm unreachable within {max_control_points} "
                f"control points (deviation {deviation:.3e} mm)")
        # bisect the spans holding the worst points (a few per round)
        resid = residuals(curve, params)
        budget_left = max_control_points - kv.num_basis
        new_knots = []
        order = np.argsort(resid)[::-1]
        for k in order:
            if len(new_knots) >= min(4, budget_left):
                break
            if resid[k] <= tolerance:
                break
            span = kv.span(params[k])
            lo, hi = kv.knots[span], kv.knots[span + 1]
            mid = 0.5 * (lo + hi)
            if hi > lo and all(abs(mid - m) > 0.25 * (hi - lo) for m in new_knots):
                new_knots.append(mid)
        if not new_knots:
            raise FitError(
                f"fit stalled at deviation {deviation:.3e} mm (tolerance {tolerance})")
        kv = KnotVector(degree, np.sort(np.concatenate([kv.knots, new_knots])))
    else:
        raise FitError(
            f"fit did not converge to {tolerance} mm (deviation {deviation:.3e} mm)")

    final_dev = max_deviation(curve, PointCloud2D(cloud.points, closed=cloud.closed))
    if final_dev > tolerance:
        # footpoint distances can only be smaller than residuals at assigned
        # parameters; re-check against the authoritative metric
        if final_dev > tolerance * (1 + 1e-9):
            raise FitError(f"fit verification failed: deviation {final_dev} > {tolerance}")
    report = FitReport(final_dev, curve.grid_shape[0], degree)
    return curve, report


# ---------------------------------------------------------------------------
# exact circular arcs
# ---------------------------------------------------------------------------

def circular_arc(center, radius: float, start_angle: float, end_angle: float,
                 segments: Optional[int] = None) -> TensorPatch:
    """Exact rational quadratic arc, split internally into <= 90 deg pieces.

    Angles in radians, swept counterclockwise from start to end;
    0 < sweep <= 2*pi.
    """
    center = np.asarray(center, dtype=float)
    sweep = end_angle - start_angle
    if radius <= 0:
        raise GeometryError("radius must be positive")
    if not 0 < sweep <= 2 * math.pi + 1e-12:
        raise GeometryError(f"arc sweep must be in (0, 2*pi], got {sweep}")
    nseg = segments if segments is not None else max(1, math.ceil(sweep / (math.pi / 2) - 1e-12))
    delta = sweep / nseg
    w_mid = math.cos(delta / 2)
    if w_mid <= 0:
        raise GeometryError("arc segments must sweep less than 180 degrees")

    ctrl = np.empty((2 * nseg + 1, 2))
    weights = np.ones(2 * nseg + 1)
    for k in range(nseg):
        a0 = start_angle + k * delta
        a1 = a0 + delta
        am = 0.5 * (a0 + a1)
        ctrl[2 * k] = center + radius * np.array([math.cos(a0), math.sin(a0)])
        ctrl[2 * k + 1] = center + (radius / w_mid) * np.array([math.cos(am), math.sin(am)])
        weights[2 * k + 1] = w_mid
    ctrl[-1] = center + radius * np.array([math.cos(end_angle), math.sin(end_angle)])

    interior = np.repeat(np.arange(1, nseg) / nseg, 2)
    knots = np.concatenate([np.zeros(3), interior, np.ones(3)])
    return TensorPatch((KnotVector(2, knots),), ctrl, weights)


def full_circle(center, radius: float, segments: int = 4) -> TensorPatch:
    return circular_arc(center, radius, 0.0, 2 * math.pi, segments=segments)


# ---------------------------------------------------------------------------
# scaled-boundary cross-sections
# ---------------------------------------------------------------------------

def _signed_area(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _winding_number(points: np.ndarray, center: np.ndarray) -> float:
    rel = points - center
    ang = np.arctan2(rel[:, 1], rel[:, 0])
    dang = np.diff(np.append(ang, ang[0]))
    dang = (dang + math.pi) % (2 * math.pi) - math.pi
    return float(dang.sum() / (2 * math.pi))


def _ruled_rows(inner_h: np.ndarray, outer_h: np.ndarray, fractions: np.ndarray) -> np.ndarray:
    """Homogeneous control net blending two compatible curves linearly.

    The blend fraction runs along the first (radial) patch axis so that
    (radial, angular) is right-handed for counterclockwise rails.
    """
    return (1 - fractions)[:, None, None] * inner_h[None, :, :] \
        + fractions[:, None, None] * outer_h[None, :, :]


def _curve_homogeneous(curve: TensorPatch) -> np.ndarray:
    w = curve.weights if curve.is_rational else np.ones(curve.grid_shape)
    return np.concatenate([curve.control_points * w[:, None], w[:, None]], axis=-1)


def _patch_from_homogeneous(kvs, data, rational: bool) -> TensorPatch:
    w = data[..., -1]
    cp = data[..., :-1] / w[..., None]
    return TensorPatch(tuple(kvs), cp, w if rational else None)


def build_scaled_boundary(boundary: TensorPatch, core_radius: float, center,
                          radial_degree: int = 3) -> MultiPatchModel:
    """Two-patch scaled-boundary parametrization of a closed 2D profile.

    Patch 0 is the central disk-like patch (control layer collapsed onto
    ``center``; the map is intentionally not bijective there). Patch 1 is the
    outer layer ruled between the core curve and the boundary. The core curve
    is the boundary scaled about ``center`` so that its minimal distance to
    the center equals ``core_radius`` -- exactly circular whenever the
    boundary is a circle.
    """
    if boundary.par_dim != 1 or boundary.geo_dim != 2:
        raise GeometryError("boundary must be a planar curve")
    center = np.asarray(center, dtype=float)
    lo, hi = boundary.knot_vectors[0].domain
    ends = boundary.evaluate(np.array([[lo], [hi]]))
    scale = float(np.abs(boundary.control_points - center).max())
    if np.linalg.norm(ends[0] - ends[1]) > 1e-9 * max(scale, 1.0):
        raise GeometryError("boundary curve must be closed")

    samples = boundary.evaluate(_sample_params(boundary, 1024)[:-1][:, None])
    if abs(_winding_number(samples, center) - 1.0) > 0.1:
        raise GeometryError("center outside boundary (winding number != 1)")
    if _signed_area(samples) <= 0:
        raise GeometryError("orientation mismatch: boundary must run counterclockwise")

    _, dist = closest_point_params(boundary, center[None, :])
    d_min = float(dist[0])
    if not 0 < core_radius < d_min * (1 - 1e-9):
        raise GeometryError(
            f"core radius {core_radius} must be positive and below the minimal "
            f"boundary distance {d_min:.6g}")
    sigma = core_radius / d_min

    bnd_h = _curve_homogeneous(boundary)
    core_h = bnd_h.copy()
    core_h[:, :2] = center * bnd_h[:, 2:] + sigma * (bnd_h[:, :2] - center * bnd_h[:, 2:])
    center_h = np.concatenate([center[None, :] * bnd_h[:, 2:], bnd_h[:, 2:]], axis=-1)

    # u runs radially outward, v along the (counterclockwise) profile
    kv_u = open_uniform_knots(radial_degree, radial_degree + 1)
    kv_v = boundary.knot_vectors[0]
    fractions = np.linspace(0.0, 1.0, radial_degree + 1)
    rational = boundary.is_rational

    disk = _patch_from_homogeneous((kv_u, kv_v), _ruled_rows(center_h, core_h, fractions),
                                   rational)
    outer = _patch_from_homogeneous((kv_u, kv_v), _ruled_rows(core_h, bnd_h, fractions),
                                    rational)

    interfaces = (
        Interface(0, "u1", 1, "u0", Orientation(flips=(False,))),
        Interface(0, "v0", 0, "v1", Orientation(flips=(False,))),
        Interface(1, "v0", 1, "v1", Orientation(flips=(False,))),
    )
    return MultiPatchModel(
        patches=(disk, outer),
        interfaces=interfaces,
        boundaries={"boundary": ((1, "u1"),)},
        singular_sides=(SingularSide(0, "u0", "v"),),
    )


# ---------------------------------------------------------------------------
# casing
# ---------------------------------------------------------------------------

def _bore_intersection(r_a: float, r_b: float, a: float):
    """Intersection (x, y>0) of circles centered at (0,0) and (a,0)."""
    if a == 0:
        if abs(r_a - r_b) > 1e-12 * max(r_a, r_b):
            raise GeometryError("coincident bore axes require equal radii")
        return 0.0, r_a
    x = (a * a + r_a * r_a - r_b * r_b) / (2 * a)
    y2 = r_a * r_a - x * x
    if y2 <= 0:
        raise GeometryError("bores do not overlap")
    return x, math.sqrt(y2)


def build_casing(male_bore: float, female_bore: float, axis_distance: float,
                 thickness: float, radial_degree: int = 2) -> MultiPatchModel:
    """2D casing: annular region between the two-bore inner profile and its
    outward offset, one patch per bore side, exact NURBS arcs on both rims.

    The male bore is centered at the origin, the female at
    (axis_distance, 0).
    """
    if thickness <= 0:
        raise GeometryError("casing thickness must be positive")
    if male_bore <= 0 or female_bore <= 0 or axis_distance < 0:
        raise GeometryError("bore radii must be positive and axis distance non-negative")
    if axis_distance >= male_bore + female_bore:
        raise GeometryError("bores do not overlap")

    xi, yi = _bore_intersection(male_bore, female_bore, axis_distance)
    xo, yo = _bore_intersection(male_bore + thickness, female_bore + thickness, axis_distance)
    c_m = np.array([0.0, 0.0])
    c_f = np.array([axis_distance, 0.0])

    theta_i = math.atan2(yi, xi)
    theta_o = math.atan2(yo, xo)
    phi_i = math.atan2(yi, xi - axis_distance)
    phi_o = math.atan2(yo, xo - axis_distance)

    p_plus, p_minus = np.array([xi, yi]), np.array([xi, -yi])
    q_plus, q_minus = np.array([xo, yo]), np.array([xo, -yo])

    def snapped(arc, start, end):
        cp = arc.control_points.copy()
        cp[0], cp[-1] = start, end
        return TensorPatch(arc.knot_vectors, cp, arc.weights)

    nseg = max(math.ceil((2 * math.pi - 2 * theta_i) / (math.pi / 2)),
               math.ceil(2 * phi_i / (math.pi / 2)))
    # male side: counterclockwise around its center from P+ over the far side to P-
    male_in = snapped(circular_arc(c_m, male_bore, theta_i, 2 * math.pi - theta_i, nseg),
                      p_plus, p_minus)
    male_out = snapped(circular_arc(c_m, male_bore + thickness, theta_o,
                                    2 * math.pi - theta_o, nseg), q_plus, q_minus)
    # female side: counterclockwise around its center from P- over the far side to P+
    female_in = snapped(circular_arc(c_f, female_bore, -phi_i, phi_i, nseg),
                        p_minus, p_plus)
    female_out = snapped(circular_arc(c_f, female_bore + thickness, -phi_o, phi_o, nseg),
                         q_minus, q_plus)

    kv_u = open_uniform_knots(radial_degree, radial_degree + 1)
    fractions = np.linspace(0.0, 1.0, radial_degree + 1)
    male = _patch_from_homogeneous(
        (kv_u, male_in.knot_vectors[0]),
        _ruled_rows(_curve_homogeneous(male_in), _curve_homogeneous(male_out), fractions),
        True)
    female = _patch_from_homogeneous(
        (kv_u, female_in.knot_vectors[0]),
        _ruled_rows(_curve_homogeneous(female_in), _curve_homogeneous(female_out), fractions),
        True)

    interfaces = (
        # male starts at P+ where female ends; male ends at P- where female starts
        Interface(0, "v0", 1, "v1", Orientation(flips=(False,))),
        Interface(0, "v1", 1, "v0", Orientation(flips=(False,))),
    )
    return MultiPatchModel(
        patches=(male, female),
        interfaces=interfaces,
        boundaries={
            "casingInner": ((0, "u0"), (1, "u0")),
            "casingOuter": ((0, "u1"), (1, "u1")),
        },
    )


# ---------------------------------------------------------------------------
# lofting (twisted extrusion) and straight extrusion
# ---------------------------------------------------------------------------

def _rotated_xy(points: np.ndarray, angle: float, center: np.ndarray) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rel = points - center
    out = np.empty_like(points)
    out[..., 0] = center[0] + rel[..., 0] * c - rel[..., 1] * s
    out[..., 1] = center[1] + rel[..., 0] * s + rel[..., 1] * c
    return out


def _loft_patch(patch2d: TensorPatch, kv_z: KnotVector, z_stations: np.ndarray,
                angles: np.ndarray, axis_point: np.ndarray) -> TensorPatch:
    """Stack rotated copies of a 2D control net along z.

    Because the axial control z-coordinates sit at the Greville abscissae of
    ``kv_z`` the physical z-coordinate equals the axial parameter times the
    length (linear precision).
    """
    nu, nv = patch2d.grid_shape
    nz = len(z_stations)
    ctrl = np.empty((nu, nv, nz, 3))
    for k in range(nz):
        ctrl[:, :, k, :2] = _rotated_xy(patch2d.control_points, angles[k], axis_point)
        ctrl[:, :, k, 2] = z_stations[k]
    weights = None
    if patch2d.is_rational:
        weights = np.repeat(patch2d.weights[:, :, None], nz, axis=2)
    return TensorPatch(patch2d.knot_vectors + (kv_z,), ctrl, weights)


def _lift_interfaces(interfaces: Sequence[Interface]) -> tuple[Interface, ...]:
    return tuple(
        Interface(i.patch_a, i.side_a, i.patch_b, i.side_b,
                  Orientation(i.orientation.swap, tuple(i.orientation.flips) + (False,)))
        for i in interfaces)


def extrude_model(model: MultiPatchModel, length: float, layers: Optional[int] = None,
                  axial_degree: int = 2, z0: float = 0.0,
                  end_prefix: str = "") -> MultiPatchModel:
    """Straight extrusion of a 2D multi-patch model along z."""
    if model.par_dim != 2:
        raise GeometryError("extrude_model expects a 2D model")
    if layers is None:
        layers = axial_degree + 1
    if layers < axial_degree + 1:
        raise GeometryError("layers must be at least axial_degree+1")
    kv_z = open_uniform_knots(axial_degree, layers)
    z = z0 + kv_z.greville() * length
    origin = np.zeros(2)
    patches = tuple(_loft_patch(p, kv_z, z, np.zeros(layers), origin) for p in model.patches)
    boundaries = {name: tuple(sides) for name, sides in model.boundaries.items()}
    low = tuple((i, "w0") for i in range(len(patches)))
    high = tuple((i, "w1") for i in range(len(patches)))
    boundaries[f"{end_prefix}LowEnd" if end_prefix else "lowEnd"] = low
    boundaries[f"{end_prefix}HighEnd" if end_prefix else "highEnd"] = high
    singular = tuple(SingularSide(s.patch, s.side, s.collapsed_axis)
                     for s in model.singular_sides)
    return MultiPatchModel(patches, _lift_interfaces(model.interfaces), boundaries, singular)


def loft_twisted(cross_section: MultiPatchModel, length: float, pitch_deg: float,
                 layers: int = 20, axial_degree: int = 2,
                 shaft_extension: float = 30.0, axis_point=(0.0, 0.0)) -> MultiPatchModel:
    """Twisted loft of a scaled-boundary rotor cross-section into a 4-patch
    3D rotor: outer layer and central core over the body length (control
    layers rotated by pitch * z/length about the rotor axis) plus straight
    shaft extensions at both ends built from the core patch.
    """
    if cross_section.par_dim != 2 or len(cross_section.patches) != 2:
        raise GeometryError("cross-section must be a 2-patch scaled-boundary model")
    if layers < axial_degree + 1:
        raise GeometryError(f"layers {layers} too few for axial degree {axial_degree}")
    if not cross_section.singular_sides:
        raise GeometryError("cross-section must declare its singular center side")
    if length <= 0 or shaft_extension <= 0:
        raise GeometryError("length and shaft extension must be positive")

    disk_idx = cross_section.singular_sides[0].patch
    outer_idx = 1 - disk_idx
    disk2d = cross_section.patches[disk_idx]
    outer2d = cross_section.patches[outer_idx]
    axis_point = np.asarray(axis_point, dtype=float)
    pitch = math.radians(pitch_deg)

    kv_body = open_uniform_knots(axial_degree, layers)
    gamma = kv_body.greville()
    z_body = gamma * length
    angles = pitch * gamma

    outer3d = _loft_patch(outer2d, kv_body, z_body, angles, axis_point)
    core3d = _loft_patch(disk2d, kv_body, z_body, angles, axis_point)

    kv_ext = open_uniform_knots(axial_degree, axial_degree + 1)
    g_ext = kv_ext.greville()
    nz_ext = axial_degree + 1
    ext_low = _loft_patch(disk2d, kv_ext, -shaft_extension + g_ext * shaft_extension,
                          np.zeros(nz_ext), axis_point)
    ext_high = _loft_patch(disk2d, kv_ext, length + g_ext * shaft_extension,
                           np.full(nz_ext, pitch), axis_point)

    patches = (outer3d, core3d, ext_low, ext_high)
    seam = Orientation(flips=(False, False))
    interfaces = (
        Interface(1, "u1", 0, "u0", seam),   # core outer surface <-> outer layer inner
        Interface(1, "w0", 2, "w1", seam),   # core low end <-> low shaft extension
        Interface(1, "w1", 3, "w0", seam),   # core high end <-> high shaft extension
        Interface(0, "v0", 0, "v1", seam),   # profile seams
        Interface(1, "v0", 1, "v1", seam),
        Interface(2, "v0", 2, "v1", seam),
        Interface(3, "v0", 3, "v1", seam),
    )
    boundaries = {
        "lateral": ((0, "u1"),),
        "lowPressureEnd": ((0, "w0"),),
        "highPressureEnd": ((0, "w1"),),
        "shaftLowEnd": ((2, "w0"),),
        "shaftHighEnd": ((3, "w1"),),
        "shaftLateral": ((2, "u1"), (3, "u1")),
    }
    singular = (SingularSide(1, "u0", "v"), SingularSide(2, "u0", "v"),
                SingularSide(3, "u0", "v"))
    return MultiPatchModel(patches, interfaces, boundaries, singular)


# ---------------------------------------------------------------------------
# simple box model (bar benchmarks)
# ---------------------------------------------------------------------------

def box_model(sizes: Sequence[float], degrees: Sequence[int] = (1, 1, 1),
              elements: Sequence[int] = (1, 1, 1)) -> MultiPatchModel:
    """Axis-aligned box [0, lx] x [0, ly] x [0, lz] as a single patch.

    Control coordinates sit at scaled Greville abscissae, so the geometry map
    is the exact affine scaling.
    """
    if len(sizes) != 3:
        raise GeometryError("box_model expects three sizes")
    kvs = tuple(open_uniform_knots(p, p + ne) for p, ne in zip(degrees, elements))
    axes = [kv.greville() * s for kv, s in zip(kvs, sizes)]
    ctrl = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    patch = TensorPatch(kvs, ctrl)
    boundaries = {
        "lowEnd": ((0, "w0"),),
        "highEnd": ((0, "w1"),),
        "lateral": ((0, "u0"), (0, "u1"), (0, "v0"), (0, "v1")),
    }
    return MultiPatchModel((patch,), (), boundaries, ())


# ---------------------------------------------------------------------------
# model validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Finding:
    kind: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...]
    singular_lines: tuple[tuple[np.ndarray, np.ndarray], ...]

    @property
    def ok(self) -> bool:
        return not self.findings


def _side_slab(patch: TensorPatch, side: str):
    idx = patch.side_slice(side)
    cp = patch.control_points[idx]
    w = patch.weights[idx] if patch.is_rational else np.ones(cp.shape[:-1])
    axis, _ = parse_side(side)
    kvs = tuple(kv for i, kv in enumerate(patch.knot_vectors) if i != axis)
    return cp, w, kvs


def _group_singular_lines(model: MultiPatchModel, tol: float):
    lines = []
    for sing in model.singular_sides:
        patch = model.patches[sing.patch]
        cp, _, _ = _side_slab(patch, sing.side)
        pts = cp.reshape(-1, patch.geo_dim)
        origin = pts.mean(axis=0)
        rel = pts - origin
        if np.linalg.norm(rel, axis=1).max() <= tol:
            direction = np.zeros(patch.geo_dim)  # collapsed to a point
        else:
            _, _, vt = np.linalg.svd(rel, full_matrices=False)
            direction = vt[0]
        matched = False
        for o, d in lines:
            along = (origin - o) - np.dot(origin - o, d) * d if np.linalg.norm(d) else origin - o
            same_dir = (np.linalg.norm(direction) == 0 or np.linalg.norm(d) == 0
                        or abs(abs(np.dot(direction, d)) - 1) < 1e-8)
            if same_dir and np.linalg.norm(along) <= tol:
                matched = True
                break
        if not matched:
            lines.append((origin, direction))
    return tuple(lines)


def validate_model(model: MultiPatchModel, grid: int = 10) -> ValidationReport:
    """Check interface conformity, Jacobian positivity on a sample grid
    (declared singular locations excluded) and boundary bookkeeping."""
    findings: list[Finding] = []
    scale = max(float(np.abs(p.control_points).max()) for p in model.patches)
    tol = 1e-9 * max(scale, 1.0)

    side_use: dict[tuple[int, str], int] = {}
    for itf in model.interfaces:
        for key in ((itf.patch_a, itf.side_a), (itf.patch_b, itf.side_b)):
            side_use[key] = side_use.get(key, 0) + 1
        cp_a, w_a, kvs_a = _side_slab(model.patches[itf.patch_a], itf.side_a)
        cp_b, w_b, kvs_b = _side_slab(model.patches[itf.patch_b], itf.side_b)
        cp_b = itf.orientation.apply(cp_b)
        w_b = itf.orientation.apply(w_b, trailing=0)
        kv_mismatch = len(kvs_a) != len(kvs_b) or any(
            a.degree != b.degree or a.knots.shape != b.knots.shape
            or np.any(a.knots != b.knots) for a, b in zip(kvs_a, kvs_b))
        if kv_mismatch:
            findings.append(Finding("interface-mismatch",
                                    f"knot vectors differ on {itf}"))
            continue
        if cp_a.shape != cp_b.shape or np.abs(cp_a - cp_b).max() > tol:
            findings.append(Finding("interface-mismatch",
                                    f"control points differ on {itf}"))
        elif np.abs(w_a - w_b).max() > 1e-12:
            findings.append(Finding("interface-mismatch", f"weights differ on {itf}"))

    for key, count in side_use.items():
        if count > 1:
            findings.append(Finding(
                "side-overlap", f"patch {key[0]} side {key[1]} on {count} interfaces"))

    singular_by_patch: dict[int, list[str]] = {}
    for s in model.singular_sides:
        singular_by_patch.setdefault(s.patch, []).append(s.side)

    for ip, patch in enumerate(model.patches):
        if patch.par_dim != patch.geo_dim:
            continue
        axes = [np.linspace(0.0, 1.0, grid) for _ in range(patch.par_dim)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, patch.par_dim)
        mask = np.ones(len(pts), dtype=bool)
        for side in singular_by_patch.get(ip, []):
            axis, end = parse_side(side)
            mask &= pts[:, axis] != float(end)
        if not mask.any():
            continue
        det = np.linalg.det(patch.jacobian(pts[mask]))
        if det.min() <= 0:
            bad = pts[mask][int(np.argmin(det))]
            findings.append(Finding(
                "jacobian",
                f"non-positive Jacobian determinant on patch {ip} near {bad.tolist()} "
                f"(det {det.min():.3e})"))

    for name, sides in model.boundaries.items():
        for p, s in sides:
            if (p, s) in side_use:
                findings.append(Finding(
                    "boundary-ref", f"boundary {name!r} side ({p}, {s}) is also an interface"))

    return ValidationReport(tuple(findings), _group_singular_lines(model, tol))
