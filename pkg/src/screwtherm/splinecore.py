"""B-spline/NURBS evaluation kernel.

Knot vectors, Cox-de Boor basis evaluation with derivatives, tensor-product
patches (curves, surfaces, volumes), knot insertion and uniform refinement.

Conventions:
- knot vectors are open (clamped): the first and last ``degree + 1`` knots
  coincide, and parameter domains are normalized to the clamped interval;
- at a knot, basis values are taken from the right span; the right domain
  endpoint evaluates in the last non-empty span so that geometry maps cover
  closed parameter boxes;
- rational patches store strictly positive weights and are evaluated in
  projective (homogeneous) coordinates, dividing through at the end;
  polynomial patches carry no weights at all.

All types are immutable after construction; evaluation is pure and safe to
call concurrently.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, GeometryError

AXIS_NAMES = "uvw"

#: tolerance used when checking whether a parameter lies inside the domain
DOMAIN_EPS = 1e-12


def side_name(axis: int, end: int) -> str:
    """String id of a patch side, e.g. ``(0, 1) -> "u1"``."""
    return f"{AXIS_NAMES[axis]}{end}"


def parse_side(name: str) -> tuple[int, int]:
    """Inverse of :func:`side_name`."""
    axis = AXIS_NAMES.index(name[0])
    end = int(name[1])
    if end not in (0, 1):
        raise GeometryError(f"invalid side name {name!r}")
    return axis, end


# ---------------------------------------------------------------------------
# knot vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KnotVector:
    """Open (clamped) non-decreasing knot sequence with a polynomial degree."""

    degree: int
    knots: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        p = self.degree
        if p < 0:
            raise GeometryError("degree must be non-negative")
        if knots.ndim != 1 or knots.size < 2 * (p + 1):
            raise GeometryError("knot vector needs at least 2*(degree+1) knots")
        if np.any(np.diff(knots) < 0):
            raise GeometryError("knots must be non-decreasing")
        if knots[0] != knots[p] or knots[-1] != knots[-p - 1]:
            raise GeometryError("knot vector must be open (clamped)")
        # interior multiplicity bound: mu <= degree + 1
        interior = knots[(knots > knots[0]) & (knots < knots[-1])]
        if interior.size:
            _, counts = np.unique(interior, return_counts=True)
            if counts.max() > p + 1:
                raise GeometryError("interior knot multiplicity exceeds degree+1")

    # -- basic queries ------------------------------------------------------

    @property
    def num_basis(self) -> int:
        return self.knots.size - self.degree - 1

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.knots[self.degree]), float(self.knots[-self.degree - 1])

    @property
    def breakpoints(self) -> np.ndarray:
        """Distinct knot values inside the domain, endpoints included."""
        lo, hi = self.domain
        inside = self.knots[(self.knots >= lo) & (self.knots <= hi)]
        return np.unique(inside)

    def spans(self) -> list[tuple[int, float, float]]:
        """Non-empty spans as (span index, lower, upper)."""
        out = []
        for i in range(self.degree, self.num_basis):
            if self.knots[i] < self.knots[i + 1]:
                out.append((i, float(self.knots[i]), float(self.knots[i + 1])))
        return out

    def greville(self) -> np.ndarray:
        """Greville abscissae (knot averages), one per basis function."""
        p = self.degree
        if p == 0:
            return 0.5 * (self.knots[:-1] + self.knots[1:])
        return np.array([self.knots[i + 1:i + p + 1].mean() for i in range(self.num_basis)])

    def multiplicity(self, value: float) -> int:
        return int(np.count_nonzero(np.abs(self.knots - value) == 0.0))

    # -- span location ------------------------------------------------------

    def _check_domain(self, t: np.ndarray):
        lo, hi = self.domain
        scale = max(hi - lo, 1.0)
        if np.any(t < lo - DOMAIN_EPS * scale) or np.any(t > hi + DOMAIN_EPS * scale):
            bad = t[(t < lo - DOMAIN_EPS * scale) | (t > hi + DOMAIN_EPS * scale)]
            raise DomainError(
                f"parameter {float(np.ravel(bad)[0])!r} outside domain [{lo}, {hi}]")

    def span(self, t: float) -> int:
        """Index i with knots[i] <= t < knots[i+1]; right endpoint maps to
        the last non-empty span."""
        return int(self.span_array(np.asarray([t]))[0])

    def span_array(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        self._check_domain(t)
        lo, hi = self.domain
        tc = np.clip(t, lo, hi)
        idx = np.searchsorted(self.knots, tc, side="right") - 1
        return np.clip(idx, self.degree, self.num_basis - 1).astype(int)


def open_uniform_knots(degree: int, num_basis: int, lo: float = 0.0, hi: float = 1.0) -> KnotVector:
    """Open knot vector with uniformly spaced interior knots."""
    n_span = num_basis - degree
    if n_span < 1:
        raise GeometryError("num_basis must be at least degree+1")
    interior = np.linspace(lo, hi, n_span + 1)[1:-1]
    knots = np.concatenate([np.full(degree + 1, lo), interior, np.full(degree + 1, hi)])
    return KnotVector(degree, knots)


# ---------------------------------------------------------------------------
# basis evaluation (vectorized Cox-de Boor recursion, NURBS-book layout)
# ---------------------------------------------------------------------------

def basis_values(kv: KnotVector, t) -> tuple[np.ndarray, np.ndarray]:
    """Non-vanishing basis values at each parameter.

    Returns (spans, values) with values of shape (n, degree+1); column r holds
    N_{span-degree+r}. The recursion is organized span-locally, so the
    zero-denominator rule never produces an actual division by zero.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    spans = kv.span_array(t)
    p = self_p = kv.degree
    knots = kv.knots
    n = t.size
    N = np.zeros((n, p + 1))
    N[:, 0] = 1.0
    left = np.zeros((n, p + 1))
    right = np.zeros((n, p + 1))
    for j in range(1, self_p + 1):
        left[:, j] = t - knots[spans + 1 - j]
        right[:, j] = knots[spans + j] - t
        saved = np.zeros(n)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = N[:, r] / denom
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved
    return spans, N


def basis_derivatives(kv: KnotVector, t, up_to: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-vanishing basis values and derivatives up to order ``up_to``.

    Returns (spans, ders) with ders of shape (n, up_to+1, degree+1); row k of
    ders[i] holds the k-th derivatives of the active functions at t[i]
    (row 0 are the values). ``up_to`` must not exceed the degree.
    """
    p = kv.degree
    if up_to > p:
        raise GeometryError(f"derivative order {up_to} exceeds degree {p}")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    spans = kv.span_array(t)
    knots = kv.knots
    n = t.size

    ndu = np.zeros((n, p + 1, p + 1))
    ndu[:, 0, 0] = 1.0
    left = np.zeros((n, p + 1))
    right = np.zeros((n, p + 1))
    for j in range(1, p + 1):
        left[:, j] = t - knots[spans + 1 - j]
        right[:, j] = knots[spans + j] - t
        saved = np.zeros(n)
        for r in range(j):
            ndu[:, j, r] = right[:, r + 1] + left[:, j - r]
            temp = ndu[:, r, j - 1] / ndu[:, j, r]
            ndu[:, r, j] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        ndu[:, j, j] = saved

    ders = np.zeros((n, up_to + 1, p + 1))
    ders[:, 0, :] = ndu[:, :, p]

    a = np.zeros((n, 2, p + 1))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[:, 0, :] = 0.0
        a[:, 1, :] = 0.0
        a[:, 0, 0] = 1.0
        for k in range(1, up_to + 1):
            d = np.zeros(n)
            rk = r - k
            pk = p - k
            if r >= k:
                a[:, s2, 0] = a[:, s1, 0] / ndu[:, pk + 1, rk]
                d = a[:, s2, 0] * ndu[:, rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if (r - 1) <= pk else p - r
            for j in range(j1, j2 + 1):
                a[:, s2, j] = (a[:, s1, j] - a[:, s1, j - 1]) / ndu[:, pk + 1, rk + j]
                d = d + a[:, s2, j] * ndu[:, rk + j, pk]
            if r <= pk:
                a[:, s2, k] = -a[:, s1, k - 1] / ndu[:, pk + 1, r]
                d = d + a[:, s2, k] * ndu[:, r, pk]
            ders[:, k, r] = d
            s1, s2 = s2, s1

    fac = float(p)
    for k in range(1, up_to + 1):
        ders[:, k, :] *= fac
        fac *= (p - k)
    return spans, ders


@dataclass(frozen=True)
class BasisSpan:
    """Active basis values (and optional derivative rows) at one parameter.

    ``values[r]`` is the value of basis function ``first_index + r``;
    ``derivatives[k-1, r]`` its k-th derivative.
    """

    first_index: int
    values: np.ndarray
    derivatives: Optional[np.ndarray] = None


def find_span(kv: KnotVector, t: float) -> int:
    """Span index i with knots[i] <= t < knots[i+1] (right endpoint: last
    non-empty span)."""
    return kv.span(t)


def eval_basis(kv: KnotVector, t: float) -> BasisSpan:
    """Values of the degree+1 non-vanishing basis functions at t."""
    spans, vals = basis_values(kv, t)
    return BasisSpan(int(spans[0]) - kv.degree, vals[0])


def eval_basis_derivatives(kv: KnotVector, t: float, up_to: int) -> BasisSpan:
    """Values and derivatives (orders 1..up_to) of the active basis at t."""
    spans, ders = basis_derivatives(kv, t, up_to)
    return BasisSpan(int(spans[0]) - kv.degree, ders[0, 0], ders[0, 1:])


# ---------------------------------------------------------------------------
# tensor-product patches
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TensorPatch:
    """Tensor-product B-spline or NURBS mapping from the parameter box into
    physical space.

    ``control_points`` has shape ``grid_shape + (geo_dim,)`` in mm; ``weights``
    (same grid shape) is None for polynomial patches and strictly positive
    for rational ones.
    """

    knot_vectors: tuple[KnotVector, ...]
    control_points: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        kvs = tuple(self.knot_vectors)
        cp = np.asarray(self.control_points, dtype=float)
        cp.setflags(write=False)
        object.__setattr__(self, "knot_vectors", kvs)
        object.__setattr__(self, "control_points", cp)
        if not 1 <= len(kvs) <= 3:
            raise GeometryError("parametric dimension must be 1, 2 or 3")
        expect = tuple(kv.num_basis for kv in kvs)
        if cp.ndim != len(kvs) + 1 or cp.shape[:-1] != expect:
            raise GeometryError(
                f"control grid {cp.shape[:-1]} does not match basis counts {expect}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)
            if w.shape != expect:
                raise GeometryError("weight grid does not match basis counts")
            if np.any(w <= 0):
                raise GeometryError("all weights must be strictly positive")

    # -- shape queries ------------------------------------------------------

    @property
    def par_dim(self) -> int:
        return len(self.knot_vectors)

    @property
    def geo_dim(self) -> int:
        return self.control_points.shape[-1]

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return self.control_points.shape[:-1]

    @property
    def is_rational(self) -> bool:
        return self.weights is not None

    @property
    def degrees(self) -> tuple[int, ...]:
        return tuple(kv.degree for kv in self.knot_vectors)

    def num_elements(self) -> int:
        n = 1
        for kv in self.knot_vectors:
            n *= len(kv.spans())
        return n

    # -- homogeneous representation ------------------------------------------

    def _homogeneous(self) -> np.ndarray:
        """Control grid lifted to projective space: (w*P, w); polynomial
        patches get unit weights."""
        if self.weights is None:
            w = np.ones(self.grid_shape)
        else:
            w = self.weights
        return np.concatenate([self.control_points * w[..., None], w[..., None]], axis=-1)

    # -- evaluation ----------------------------------------------------------

    def _prepare_params(self, params) -> tuple[np.ndarray, bool]:
        arr = np.asarray(params, dtype=float)
        single = arr.ndim == 1
        arr = np.atleast_2d(arr)
        if arr.shape[1] != self.par_dim:
            raise DomainError(
                f"expected parameters of dimension {self.par_dim}, got shape {arr.shape}")
        return arr, single

    def evaluate(self, params) -> np.ndarray:
        """Map parameters (shape (n, par_dim) or (par_dim,)) to physical points."""
        arr, single = self._prepare_params(params)
        data = self._homogeneous() if self.is_rational else self.control_points
        val = _tensor_contract(self.knot_vectors, data, arr, derivative_axis=None)
        if self.is_rational:
            val = val[:, :-1] / val[:, -1:]
        return val[0] if single else val

    def jacobian(self, params) -> np.ndarray:
        """Jacobian of the geometry map, shape (n, geo_dim, par_dim).

        Rank deficiency (collapsed edges/faces) is reported as-is, not as an
        error.
        """
        arr, single = self._prepare_params(params)
        data = self._homogeneous() if self.is_rational else self.control_points
        cols = []
        if self.is_rational:
            val = _tensor_contract(self.knot_vectors, data, arr, None)
            w = val[:, -1:]
            x = val[:, :-1] / w
        for axis in range(self.par_dim):
            dv = _tensor_contract(self.knot_vectors, data, arr, axis)
            if self.is_rational:
                cols.append((dv[:, :-1] - x * dv[:, -1:]) / w)
            else:
                cols.append(dv)
        jac = np.stack(cols, axis=-1)
        return jac[0] if single else jac

    # -- refinement ----------------------------------------------------------

    def insert_knot(self, axis: int, value: float, times: int = 1) -> "TensorPatch":
        """Insert ``value`` into direction ``axis`` ``times`` times.

        Geometry-preserving (Boehm's rule on homogeneous coordinates). The
        resulting interior multiplicity must not exceed the degree, so the
        map stays continuous.
        """
        kv = self.knot_vectors[axis]
        lo, hi = kv.domain
        if not (lo < value < hi):
            raise DomainError(f"knot {value} not interior to domain [{lo}, {hi}]")
        p = kv.degree
        mult = kv.multiplicity(value)
        if mult + times > p:
            raise GeometryError(
                f"inserting {value} {times}x would raise multiplicity to "
                f"{mult + times} > degree {p}")

        data = self._homogeneous()
        # move the working axis to the front
        data = np.moveaxis(data, axis, 0)
        knots = kv.knots.copy()
        for _ in range(times):
            k = int(np.searchsorted(knots, value, side="right") - 1)
            n = data.shape[0]
            new = np.empty((n + 1,) + data.shape[1:])
            new[:k - p + 1] = data[:k - p + 1]
            new[k + 1:] = data[k:]
            for i in range(k - p + 1, k + 1):
                a = (value - knots[i]) / (knots[i + p] - knots[i])
                new[i] = a * data[i] + (1.0 - a) * data[i - 1]
            data = new
            knots = np.insert(knots, k + 1, value)
        data = np.moveaxis(data, 0, axis)

        kvs = list(self.knot_vectors)
        kvs[axis] = KnotVector(p, knots)
        w = data[..., -1]
        cp = data[..., :-1] / w[..., None]
        return TensorPatch(tuple(kvs), cp, w if self.is_rational else None)

    def uniform_refined(self, times: int = 1) -> "TensorPatch":
        """Bisect every non-empty knot span in every direction, repeatedly."""
        if times < 1:
            raise GeometryError("times must be >= 1")
        patch = self
        for _ in range(times):
            for axis in range(patch.par_dim):
                for _, lo, hi in patch.knot_vectors[axis].spans():
                    patch = patch.insert_knot(axis, 0.5 * (lo + hi))
        return patch

    # -- geometric transforms -------------------------------------------------

    def translated(self, offset) -> "TensorPatch":
        cp = self.control_points + np.asarray(offset, dtype=float)
        return TensorPatch(self.knot_vectors, cp, self.weights)

    def side_slice(self, side: str) -> tuple:
        """Numpy index selecting the control layer of a side, e.g. "u0"."""
        axis, end = parse_side(side)
        idx: list = [slice(None)] * self.par_dim
        idx[axis] = 0 if end == 0 else -1
        return tuple(idx)


def _tensor_contract(kvs, data, params, derivative_axis):
    """Sum of basis products times control data at each parameter row.

    ``data`` has shape grid + (c,); returns (n, c). If ``derivative_axis`` is
    not None the first derivative is used in that direction.
    """
    n = params.shape[0]
    dim = len(kvs)
    tabs = []
    starts = []
    for axis in range(dim):
        if axis == derivative_axis:
            spans, ders = basis_derivatives(kvs[axis], params[:, axis], 1)
            tabs.append(ders[:, 1, :])
        else:
            spans, vals = basis_values(kvs[axis], params[:, axis])
            tabs.append(vals)
        starts.append(spans - kvs[axis].degree)

    if dim == 1:
        i = starts[0][:, None] + np.arange(kvs[0].degree + 1)
        return np.einsum("na,nac->nc", tabs[0], data[i])
    if dim == 2:
        i = starts[0][:, None] + np.arange(kvs[0].degree + 1)
        j = starts[1][:, None] + np.arange(kvs[1].degree + 1)
        gathered = data[i[:, :, None], j[:, None, :]]
        return np.einsum("na,nb,nabc->nc", tabs[0], tabs[1], gathered)
    i = starts[0][:, None] + np.arange(kvs[0].degree + 1)
    j = starts[1][:, None] + np.arange(kvs[1].degree + 1)
    k = starts[2][:, None] + np.arange(kvs[2].degree + 1)
    gathered = data[i[:, :, None, None], j[:, None, :, None], k[:, None, None, :]]
    return np.einsum("na,nb,nk,nabkc->nc", tabs[0], tabs[1], tabs[2], gathered)


def curve_derivatives(curve: TensorPatch, t, up_to: int = 2) -> np.ndarray:
    """Point and derivatives of a curve, shape (n, up_to+1, geo_dim).

    Rational curves use the quotient rule up to second order.
    """
    if curve.par_dim != 1:
        raise GeometryError("curve_derivatives requires a curve (par_dim == 1)")
    kv = curve.knot_vectors[0]
    order = min(up_to, kv.degree)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    spans, ders = basis_derivatives(kv, t, order)
    idx = (spans - kv.degree)[:, None] + np.arange(kv.degree + 1)
    data = curve._homogeneous() if curve.is_rational else curve.control_points
    d = np.einsum("nkr,nrc->nkc", ders, data[idx])
    if up_to > order:
        pad = np.zeros((t.size, up_to - order, d.shape[-1]))
        d = np.concatenate([d, pad], axis=1)
    if not curve.is_rational:
        return d
    w = d[..., -1]
    a = d[..., :-1]
    out = np.empty_like(a)
    out[:, 0] = a[:, 0] / w[:, 0, None]
    if up_to >= 1:
        out[:, 1] = (a[:, 1] - out[:, 0] * w[:, 1, None]) / w[:, 0, None]
    if up_to >= 2:
        out[:, 2] = (a[:, 2] - 2.0 * out[:, 1] * w[:, 1, None]
                     - out[:, 0] * w[:, 2, None]) / w[:, 0, None]
    return out
