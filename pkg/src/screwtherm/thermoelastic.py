"""Stationary linear thermoelasticity.

Material model (Lame parameters, thermal expansion), prescribed temperature
fields, boundary-condition bookkeeping and the end-to-end solve: heating from
the reference temperature T0 induces the thermal strain alpha*(T-T0)*I; its
stress divergence is moved to the right-hand side of the elasticity system,
which is then solved by Galerkin projection. One-way coupling only: the
deformation does not feed back into the temperature.

Units: mm, N, N/mm^2 (MPa), degrees C throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .discretize import (
    DiscreteField,
    PatchQuadrature,
    assemble_elasticity,
    assemble_laplace,
    assemble_thermal_load,
    assemble_traction_load,
    build_space,
    make_solver,
)
from .errors import AssemblyError, GeometryError
from .geomgen import MultiPatchModel


# ---------------------------------------------------------------------------
# material
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Material:
    """Isotropic thermoelastic constants.

    lam, mu: Lame parameters (N/mm^2); alpha: thermal expansion (1/K);
    t0: stress-free reference temperature (deg C).
    """

    lam: float
    mu: float
    alpha: float
    t0: float

    def __post_init__(self):
        if self.mu <= 0:
            raise GeometryError("shear modulus mu must be positive")
        if 3 * self.lam + 2 * self.mu <= 0:
            raise GeometryError("bulk modulus 3*lambda + 2*mu must be positive")
        if self.alpha < 0:
            raise GeometryError("thermal expansion coefficient must be non-negative")


def material_from_engineering(e: float, nu: float, alpha: float, t0: float) -> Material:
    """Material from Young's modulus (N/mm^2) and Poisson's ratio."""
    if e <= 0:
        raise GeometryError("Young's modulus must be positive")
    if not -1.0 < nu < 0.5:
        raise GeometryError(f"Poisson's ratio {nu} must lie in (-1, 0.5)")
    lam = e * nu / ((1 + nu) * (1 - 2 * nu))
    mu = e / (2 * (1 + nu))
    return Material(lam, mu, alpha, t0)


def thermal_strain(material: Material, temperature: float, dim: int = 3) -> np.ndarray:
    """Isotropic thermal strain alpha * (T - T0) * I."""
    return material.alpha * (temperature - material.t0) * np.eye(dim)


def stress(material: Material, strain: np.ndarray) -> np.ndarray:
    """Hooke's law sigma = 2 mu eps + lambda tr(eps) I for symmetric strain."""
    strain = np.asarray(strain, dtype=float)
    if strain.shape[-1] != strain.shape[-2] or not np.allclose(
            strain, np.swapaxes(strain, -1, -2), atol=1e-12 * max(1.0, np.abs(strain).max())):
        raise GeometryError("strain tensor must be symmetric")
    dim = strain.shape[-1]
    tr = np.trace(strain, axis1=-2, axis2=-1)
    return 2 * material.mu * strain + material.lam * tr[..., None, None] * np.eye(dim)


# ---------------------------------------------------------------------------
# temperature fields
# ---------------------------------------------------------------------------

class UniformTemperature:
    def __init__(self, value: float):
        self.value = float(value)

    def evaluate(self, patch_index, params, points):
        return np.full(len(points), self.value)


class LinearAxialTemperature:
    """T grows linearly along one axis between two stations and is clamped to
    the endpoint values outside (shaft ends held at the end temperatures)."""

    def __init__(self, z0: float, z1: float, t_low: float, t_high: float, axis: int = 2):
        if z0 == z1:
            raise GeometryError("degenerate axis: z0 must differ from z1")
        self.z0, self.z1 = float(z0), float(z1)
        self.t_low, self.t_high = float(t_low), float(t_high)
        self.axis = axis

    def __call__(self, points: np.ndarray) -> np.ndarray:
        z = np.asarray(points)[..., self.axis]
        s = np.clip((z - self.z0) / (self.z1 - self.z0), 0.0, 1.0)
        return self.t_low + (self.t_high - self.t_low) * s

    def evaluate(self, patch_index, params, points):
        return self(points)


class ThicknessBlendTemperature:
    """Casing temperature: prescribed on the inner rim, constant on the outer
    rim, blended linearly through the thickness parameter."""

    def __init__(self, inner, outer_value: float, thickness_axis: int = 0):
        self.inner = inner
        self.outer_value = float(outer_value)
        self.axis = thickness_axis

    def evaluate(self, patch_index, params, points):
        s = np.asarray(params)[..., self.axis]
        inner = self.inner(points) if callable(self.inner) else float(self.inner)
        return (1.0 - s) * inner + s * self.outer_value


class DiscreteTemperature:
    """Scalar discrete field (e.g. a steady heat solution) used as T."""

    def __init__(self, field: DiscreteField):
        if field.space.components != 1:
            raise GeometryError("temperature field must be scalar")
        self.field = field

    def evaluate(self, patch_index, params, points):
        return self.field.evaluate(patch_index, params)[:, 0]


# ---------------------------------------------------------------------------
# boundary conditions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundaryConditionSet:
    """Displacement boundary conditions by boundary name.

    fixed: u = 0 in all components. sliding_axial: behaviour depends on
    ``sliding_mode`` -- "sliding" fixes the lateral components and leaves the
    axial one free, "free" leaves the boundary entirely unconstrained.
    axial_only: the axial component is fixed, lateral ones are free.
    tractions: (boundary, constant vector or scalar pressure along the
    outward normal). point_pins: (patch, control grid index, components),
    used to pin the remaining rigid-body modes of weakly constrained set-ups.
    """

    fixed: tuple[str, ...] = ()
    sliding_axial: tuple[str, ...] = ()
    sliding_mode: str = "free"
    axial_only: tuple[str, ...] = ()
    tractions: tuple = ()
    point_pins: tuple = ()

    def __post_init__(self):
        if self.sliding_mode not in ("sliding", "free"):
            raise GeometryError("sliding_mode must be 'sliding' or 'free'")
        cats = [set(self.fixed), set(self.sliding_axial), set(self.axial_only)]
        for i in range(len(cats)):
            for j in range(i + 1, len(cats)):
                overlap = cats[i] & cats[j]
                if overlap:
                    raise GeometryError(
                        f"boundary in two displacement categories: {sorted(overlap)}")

    def dirichlet_spec(self, components: int, axis: int) -> dict:
        spec: dict = {name: "all" for name in self.fixed}
        lateral = tuple(c for c in range(components) if c != axis)
        if self.sliding_mode == "sliding":
            for name in self.sliding_axial:
                spec[name] = lateral
        for name in self.axial_only:
            spec[name] = (axis,)
        return spec


# ---------------------------------------------------------------------------
# end-to-end solve
# ---------------------------------------------------------------------------

def solve_thermoelastic(model: MultiPatchModel, material: Material, temperature,
                        bcs: BoundaryConditionSet, refine: int = 0,
                        quadrature_points=None, solver: str = "auto",
                        axis: Optional[int] = None,
                        extra_loads: Sequence[np.ndarray] = ()) -> DiscreteField:
    """Displacement field of the stationary thermoelastic problem.

    Orchestrates space construction, stiffness and load assembly (thermal
    load in integrated-by-parts form plus optional tractions) and the SPD
    solve. Returns displacements in mm.
    """
    if refine:
        model = model.refined(refine)
    dim = model.patches[0].geo_dim
    if axis is None:
        axis = dim - 1
    space = build_space(model, dim, bcs.dirichlet_spec(dim, axis),
                        point_constraints=bcs.point_pins)
    if len(space.constrained_dofs) == 0:
        raise AssemblyError("boundary conditions leave all rigid-body modes free")

    system = assemble_elasticity(space, material, quadrature_points)
    rhs = assemble_thermal_load(space, material, temperature, quadrature_points)
    for name, traction in bcs.tractions:
        rhs = rhs + assemble_traction_load(space, name, traction, quadrature_points)
    for load in extra_loads:
        rhs = rhs + load
    reduced = system.with_rhs(rhs).reduce()
    coeffs = make_solver(reduced, solver)(reduced.rhs)
    return DiscreteField(space, coeffs)


def max_total_stress(displacement: DiscreteField, material: Material, temperature,
                     quadrature_points=None) -> float:
    """Max Frobenius norm over all quadrature points of the total stress
    sigma(eps(u) - eps_T) -- zero for unconstrained uniform heating."""
    space = displacement.space
    worst = 0.0
    for ip, patch in enumerate(space.model.patches):
        pq = PatchQuadrature(patch, quadrature_points)
        for batch in pq.batches():
            params = batch.params.reshape(-1, patch.par_dim)
            points = batch.points.reshape(-1, patch.geo_dim)
            grad = displacement.gradient(ip, params)
            eps = 0.5 * (grad + np.swapaxes(grad, -1, -2))
            t_vals = np.asarray(temperature.evaluate(ip, params, points), dtype=float)
            eps_t = material.alpha * (t_vals - material.t0)
            eye = np.eye(patch.geo_dim)
            elastic = eps - eps_t[:, None, None] * eye
            tr = np.trace(elastic, axis1=-2, axis2=-1)
            sig = 2 * material.mu * elastic + material.lam * tr[:, None, None] * eye
            worst = max(worst, float(np.sqrt((sig ** 2).sum(axis=(-2, -1))).max()))
    return worst
