"""Staggered marker-and-cell grid storage and discrete operators for 2D fields.

Layout conventions (h = cell width, index [i, j] maps to (x, y)):
  cell centers   (i + 0.5, j + 0.5) * h   -> ScalarField.values, shape (nx, ny)
  u face centers (i,       j + 0.5) * h   -> MacVelocityField.u, shape (nx+1, ny)
  v face centers (i + 0.5, j      ) * h   -> MacVelocityField.v, shape (nx, ny+1)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DimensionMismatchError, DomainError

# Exact brute-force distance transform up to this edge length; the separable
# exact transform (scipy) takes over for larger grids.
_BRUTE_FORCE_MAX_CELLS = 64 * 64


@dataclass(frozen=True)
class GridDims:
    nx: int
    ny: int
    h: float = 1.0

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ArgumentError(f"grid must be at least 4x4, got {self.nx}x{self.ny}")
        if not self.h > 0:
            raise ArgumentError(f"cell width must be positive, got {self.h}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)


@dataclass
class ScalarField:
    dims: GridDims
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.dims.shape:
            raise DimensionMismatchError(
                f"scalar field shape {self.values.shape} != grid {self.dims.shape}"
            )

    @classmethod
    def zeros(cls, dims: GridDims) -> "ScalarField":
        return cls(dims, np.zeros(dims.shape))

    def copy(self) -> "ScalarField":
        return ScalarField(self.dims, self.values.copy())


@dataclass
class MacVelocityField:
    dims: GridDims
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        nx, ny = self.dims.shape
        if self.u.shape != (nx + 1, ny):
            raise DimensionMismatchError(
                f"u shape {self.u.shape} != staggered layout {(nx + 1, ny)}"
            )
        if self.v.shape != (nx, ny + 1):
            raise DimensionMismatchError(
                f"v shape {self.v.shape} != staggered layout {(nx, ny + 1)}"
            )

    @classmethod
    def zeros(cls, dims: GridDims) -> "MacVelocityField":
        nx, ny = dims.shape
        return cls(dims, np.zeros((nx + 1, ny)), np.zeros((nx, ny + 1)))

    def copy(self) -> "MacVelocityField":
        return MacVelocityField(self.dims, self.u.copy(), self.v.copy())


@dataclass
class GeometryField:
    """Cell occupancy plus the distance-to-nearest-solid field (cell widths).

    ``solid`` is a boolean (nx, ny) mask; border cells are always solid
    (the domain wall). Face masks mark faces flanked by two fluid cells.
    """

    dims: GridDims
    solid: np.ndarray
    distance: ScalarField
    u_fluid: np.ndarray = field(init=False, repr=False)
    v_fluid: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.solid = np.asarray(self.solid, dtype=bool)
        if self.solid.shape != self.dims.shape:
            raise DimensionMismatchError(
                f"occupancy shape {self.solid.shape} != grid {self.dims.shape}"
            )
        border = np.zeros(self.dims.shape, dtype=bool)
        border[0, :] = border[-1, :] = True
        border[:, 0] = border[:, -1] = True
        if not self.solid[border].all():
            raise DomainError("domain border cells must be solid")
        fluid = ~self.solid
        # A face is fluid only when both adjacent cells are fluid; faces on
        # the domain boundary touch the wall and are never fluid.
        nx, ny = self.dims.shape
        self.u_fluid = np.zeros((nx + 1, ny), dtype=bool)
        self.u_fluid[1:nx, :] = fluid[:-1, :] & fluid[1:, :]
        self.v_fluid = np.zeros((nx, ny + 1), dtype=bool)
        self.v_fluid[:, 1:ny] = fluid[:, :-1] & fluid[:, 1:]

    @property
    def fluid(self) -> np.ndarray:
        return ~self.solid

    @classmethod
    def build(cls, dims: GridDims, solid: np.ndarray | None = None) -> "GeometryField":
        """Construct geometry from an occupancy mask, walling the border and
        computing the distance field."""
        nx, ny = dims.shape
        mask = np.zeros((nx, ny), dtype=bool) if solid is None else np.array(solid, dtype=bool)
        mask[0, :] = mask[-1, :] = True
        mask[:, 0] = mask[:, -1] = True
        return cls(dims, mask, compute_distance_field(mask, dims))

    def num_fluid(self) -> int:
        return int(self.fluid.sum())


def compute_distance_field(solid: np.ndarray, dims: GridDims | None = None) -> ScalarField:
    """Per-cell Euclidean distance (in cell widths) to the nearest solid cell center.

    Exact by brute force on small grids; exact separable transform otherwise.
    Solid cells hold 0.
    """
    solid = np.asarray(solid, dtype=bool)
    nx, ny = solid.shape
    if dims is None:
        dims = GridDims(nx, ny)
    if not solid.any():
        raise DomainError("distance field needs at least one solid cell")
    if solid.all():
        return ScalarField(dims, np.zeros((nx, ny)))
    if nx * ny <= _BRUTE_FORCE_MAX_CELLS:
        dist = _brute_force_distance(solid)
    else:
        from scipy.ndimage import distance_transform_edt

        dist = distance_transform_edt(~solid)
    return ScalarField(dims, dist)


def _brute_force_distance(solid: np.ndarray) -> np.ndarray:
    nx, ny = solid.shape
    si, sj = np.nonzero(solid)
    jj = np.arange(ny)
    dist = np.zeros((nx, ny))
    for i in range(nx):  # row at a time keeps the pairwise matrix small
        d2 = (i - si)[:, None] ** 2 + (jj[None, :] - sj[:, None]) ** 2
        dist[i, :] = np.sqrt(d2.min(axis=0))
    dist[solid] = 0.0
    return dist


def _check_same_dims(*dims: GridDims) -> None:
    first = dims[0]
    for d in dims[1:]:
        if d != first:
            raise DimensionMismatchError(f"grid dims differ: {first} vs {d}")


def divergence(vel: MacVelocityField, geo: GeometryField) -> ScalarField:
    """Cell-centered divergence of a MAC velocity field.

    Faces touching a solid cell are treated as zero before differencing;
    solid cells hold exactly 0.
    """
    _check_same_dims(vel.dims, geo.dims)
    h = vel.dims.h
    u = np.where(geo.u_fluid, vel.u, 0.0)
    v = np.where(geo.v_fluid, vel.v, 0.0)
    div = (u[1:, :] - u[:-1, :] + v[:, 1:] - v[:, :-1]) / h
    div[geo.solid] = 0.0
    return ScalarField(vel.dims, div)


def subtract_pressure_gradient(
    vel: MacVelocityField,
    p: ScalarField,
    geo: GeometryField,
    dt: float,
    rho: float,
) -> MacVelocityField:
    """Velocity update u <- u - dt/rho * grad(p) on fluid faces.

    Faces touching a solid cell are forced to 0 (no-slip normal component).
    """
    _check_same_dims(vel.dims, p.dims, geo.dims)
    if not dt > 0:
        raise ArgumentError(f"dt must be positive, got {dt}")
    if not rho > 0:
        raise ArgumentError(f"rho must be positive, got {rho}")
    h = vel.dims.h
    scale = dt / (rho * h)
    nx, ny = vel.dims.shape
    u = np.zeros_like(vel.u)
    v = np.zeros_like(vel.v)
    du = vel.u[1:nx, :] - scale * (p.values[1:, :] - p.values[:-1, :])
    dv = vel.v[:, 1:ny] - scale * (p.values[:, 1:] - p.values[:, :-1])
    u[1:nx, :] = np.where(geo.u_fluid[1:nx, :], du, 0.0)
    v[:, 1:ny] = np.where(geo.v_fluid[:, 1:ny], dv, 0.0)
    return MacVelocityField(vel.dims, u, v)


def _sample_grid(values: np.ndarray, gx: float, gy: float) -> float:
    """Bilinear lookup at fractional index (gx, gy), clamped to the array."""
    nx, ny = values.shape
    gx = min(max(gx, 0.0), nx - 1.0)
    gy = min(max(gy, 0.0), ny - 1.0)
    i0 = min(int(gx), nx - 2) if nx > 1 else 0
    j0 = min(int(gy), ny - 2) if ny > 1 else 0
    i1 = min(i0 + 1, nx - 1)
    j1 = min(j0 + 1, ny - 1)
    tx = gx - i0
    ty = gy - j0
    a = values[i0, j0] * (1.0 - tx) + values[i1, j0] * tx
    b = values[i0, j1] * (1.0 - tx) + values[i1, j1] * tx
    return float(a * (1.0 - ty) + b * ty)


def sample_scalar(field: ScalarField, x: float, y: float) -> float:
    h = field.dims.h
    return _sample_grid(field.values, x / h - 0.5, y / h - 0.5)


def sample_u(vel: MacVelocityField, x: float, y: float) -> float:
    h = vel.dims.h
    return _sample_grid(vel.u, x / h, y / h - 0.5)


def sample_v(vel: MacVelocityField, x: float, y: float) -> float:
    h = vel.dims.h
    return _sample_grid(vel.v, x / h - 0.5, y / h)


def sample_bilinear(field, x: float, y: float):
    """Bilinear interpolation honoring the staggered sample locations.

    Returns a float for a ScalarField, an (u, v) pair for a MacVelocityField.
    Coordinates outside the sampling rectangle are clamped.
    """
    if isinstance(field, ScalarField):
        return sample_scalar(field, x, y)
    if isinstance(field, MacVelocityField):
        return sample_u(field, x, y), sample_v(field, x, y)
    raise ArgumentError(f"cannot sample object of type {type(field).__name__}")
