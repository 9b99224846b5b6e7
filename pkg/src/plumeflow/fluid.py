"""Operator-split Euler time stepping and the two quality metrics.

One step follows the classic split: semi-Lagrangian advection of smoke and
velocity, body forces (gravity + density-proportional buoyancy), then
pressure projection through a pluggable solver. The two metrics:

  quality_loss  mean absolute per-cell difference of two smoke fields
  div_norm      sum over fluid cells of w * div^2, w = max(1, kappa - d)
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import ArgumentError, DimensionMismatchError
from .grid import (
    GeometryField,
    MacVelocityField,
    ScalarField,
    subtract_pressure_gradient,
)

# flop estimate per cell for one advect+force pass (backtrace, two bilinear
# lerps, force update); used by the deterministic cost model
STENCIL_FLOPS_PER_CELL = 40


@dataclass
class StepCost:
    wall_time: float = 0.0
    flops: int = 0

    def __post_init__(self):
        if self.wall_time < 0 or self.flops < 0:
            raise ArgumentError("costs must be non-negative")

    def __add__(self, other: "StepCost") -> "StepCost":
        return StepCost(self.wall_time + other.wall_time, self.flops + other.flops)


class PressureSolver(Protocol):
    solver_id: str

    def solve(self, div: ScalarField, geo: GeometryField) -> tuple[ScalarField, StepCost]:
        ...


@dataclass
class InflowSpec:
    """Continuous smoke source: region mask gets `rate * dt` added per step."""

    region: np.ndarray
    rate: float = 1.0


@dataclass
class SimConfig:
    n_steps: int = 128
    dt: float = 0.1
    gravity: tuple[float, float] = (0.0, 0.0)
    buoyancy: float = 0.0
    kappa: float = 3.0
    rho: float = 1.0
    inflow: InflowSpec | None = None

    def __post_init__(self):
        if self.n_steps < 0:
            raise ArgumentError(f"n_steps must be >= 0, got {self.n_steps}")
        if not self.dt > 0:
            raise ArgumentError(f"dt must be positive, got {self.dt}")
        if not self.kappa >= 1:
            raise ArgumentError(f"kappa must be >= 1, got {self.kappa}")


@dataclass
class SimState:
    step: int
    vel: MacVelocityField
    pressure: ScalarField
    density: ScalarField
    geo: GeometryField
    dt: float

    def __post_init__(self):
        if self.step < 0:
            raise ArgumentError("step must be >= 0")
        if not self.dt > 0:
            raise ArgumentError("dt must be positive")
        dims = self.geo.dims
        for f in (self.vel, self.pressure, self.density):
            if f.dims != dims:
                raise DimensionMismatchError("state fields must share grid dims")

    @classmethod
    def initial(cls, geo: GeometryField, dt: float,
                vel: MacVelocityField | None = None,
                density: ScalarField | None = None) -> "SimState":
        dims = geo.dims
        return cls(
            step=0,
            vel=vel.copy() if vel is not None else MacVelocityField.zeros(dims),
            pressure=ScalarField.zeros(dims),
            density=density.copy() if density is not None else ScalarField.zeros(dims),
            geo=geo,
            dt=dt,
        )

    def copy(self) -> "SimState":
        return SimState(self.step, self.vel.copy(), self.pressure.copy(),
                        self.density.copy(), self.geo, self.dt)


def advect(fld, vel: MacVelocityField, dt: float, geo: GeometryField):
    """Semi-Lagrangian transport: single backward-Euler backtrace per sample
    point along `vel`, bilinear lookup into `fld`. Solid-cell (or solid-face)
    values are unchanged."""
    if not dt > 0:
        raise ArgumentError(f"dt must be positive, got {dt}")
    if fld.dims != vel.dims or vel.dims != geo.dims:
        raise DimensionMismatchError("advect needs matching grid dims")
    if isinstance(fld, ScalarField):
        return _advect_scalar(fld, vel, dt, geo)
    if isinstance(fld, MacVelocityField):
        return _advect_velocity(fld, vel, dt, geo)
    raise ArgumentError(f"cannot advect object of type {type(fld).__name__}")


def _advect_scalar(fld: ScalarField, vel: MacVelocityField, dt: float,
                   geo: GeometryField) -> ScalarField:
    h = fld.dims.h
    nx, ny = fld.dims.shape
    ci = (np.arange(nx) + 0.5)[:, None] * h
    cj = (np.arange(ny) + 0.5)[None, :] * h
    x = np.broadcast_to(ci, (nx, ny))
    y = np.broadcast_to(cj, (nx, ny))
    uc = _bilinear_grid(vel.u, x / h, y / h - 0.5)
    vc = _bilinear_grid(vel.v, x / h - 0.5, y / h)
    bx = x - dt * uc
    by = y - dt * vc
    sampled = _bilinear_grid(fld.values, bx / h - 0.5, by / h - 0.5)
    out = np.where(geo.solid, fld.values, sampled)
    return ScalarField(fld.dims, out)


def _advect_velocity(fld: MacVelocityField, vel: MacVelocityField, dt: float,
                     geo: GeometryField) -> MacVelocityField:
    h = fld.dims.h
    nx, ny = fld.dims.shape

    # u samples sit at vel's own u locations, so the u carrier is exact there
    xi = np.arange(nx + 1)[:, None] * h
    yj = (np.arange(ny) + 0.5)[None, :] * h
    x = np.broadcast_to(xi, (nx + 1, ny))
    y = np.broadcast_to(yj, (nx + 1, ny))
    vu = _bilinear_grid(vel.v, x / h - 0.5, y / h)
    bx = x - dt * vel.u
    by = y - dt * vu
    u_new = _bilinear_grid(fld.u, bx / h, by / h - 0.5)
    u = np.where(geo.u_fluid, u_new, fld.u)

    xi = (np.arange(nx) + 0.5)[:, None] * h
    yj = np.arange(ny + 1)[None, :] * h
    x = np.broadcast_to(xi, (nx, ny + 1))
    y = np.broadcast_to(yj, (nx, ny + 1))
    uv = _bilinear_grid(vel.u, x / h, y / h - 0.5)
    bx = x - dt * uv
    by = y - dt * vel.v
    v_new = _bilinear_grid(fld.v, bx / h - 0.5, by / h)
    v = np.where(geo.v_fluid, v_new, fld.v)
    return MacVelocityField(fld.dims, u, v)


def _bilinear_grid(values: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    nx, ny = values.shape
    gx = np.clip(gx, 0.0, nx - 1.0)
    gy = np.clip(gy, 0.0, ny - 1.0)
    i0 = np.minimum(gx.astype(np.int64), nx - 2) if nx > 1 else np.zeros_like(gx, dtype=np.int64)
    j0 = np.minimum(gy.astype(np.int64), ny - 2) if ny > 1 else np.zeros_like(gy, dtype=np.int64)
    i1 = np.minimum(i0 + 1, nx - 1)
    j1 = np.minimum(j0 + 1, ny - 1)
    tx = gx - i0
    ty = gy - j0
    a = values[i0, j0] * (1 - tx) + values[i1, j0] * tx
    b = values[i0, j1] * (1 - tx) + values[i1, j1] * tx
    return a * (1 - ty) + b * ty


def add_body_force(vel: MacVelocityField, density: ScalarField, geo: GeometryField,
                   cfg: SimConfig) -> MacVelocityField:
    """u <- u + dt * (g + buoyancy * density * e_y), sampled to fluid faces."""
    if vel.dims != density.dims or vel.dims != geo.dims:
        raise DimensionMismatchError("add_body_force needs matching grid dims")
    gx, gy = cfg.gravity
    u = vel.u.copy()
    v = vel.v.copy()
    nx, ny = vel.dims.shape
    u[1:nx, :] = np.where(geo.u_fluid[1:nx, :], u[1:nx, :] + cfg.dt * gx, u[1:nx, :])
    rho_face = 0.5 * (density.values[:, :-1] + density.values[:, 1:])
    dv = cfg.dt * (gy + cfg.buoyancy * rho_face)
    v[:, 1:ny] = np.where(geo.v_fluid[:, 1:ny], v[:, 1:ny] + dv, v[:, 1:ny])
    return MacVelocityField(vel.dims, u, v)


def project(vel: MacVelocityField, geo: GeometryField, solver: PressureSolver,
            dt: float, rho: float) -> tuple[MacVelocityField, ScalarField, StepCost]:
    """Divergence, solver, gradient subtraction. The exact solver bounds the
    residual divergence; surrogates carry no guarantee."""
    from .grid import divergence as _div

    div = _div(vel, geo)
    pressure, cost = solver.solve(div, geo)
    out = subtract_pressure_gradient(vel, pressure, geo, dt, rho)
    return out, pressure, cost


def step(state: SimState, solver: PressureSolver, cfg: SimConfig) -> tuple[SimState, StepCost]:
    """One operator-split step; uses the vectorized advection paths."""
    if state.step >= cfg.n_steps:
        raise ArgumentError(f"step {state.step} already at n_steps={cfg.n_steps}")
    t0 = time.perf_counter()
    geo = state.geo
    density = _advect_scalar(state.density, state.vel, cfg.dt, geo)
    if cfg.inflow is not None:
        vals = density.values
        region = cfg.inflow.region
        vals[region] = np.minimum(vals[region] + cfg.inflow.rate * cfg.dt, 1.0)
    vel_a = _advect_velocity(state.vel, state.vel, cfg.dt, geo)
    vel_b = add_body_force(vel_a, density, geo, cfg)
    vel_new, pressure, solve_cost = project(vel_b, geo, solver, cfg.dt, cfg.rho)
    if not np.isfinite(density.values).all():
        raise ArgumentError("density became non-finite")
    wall = time.perf_counter() - t0
    nx, ny = geo.dims.shape
    cost = StepCost(wall, solve_cost.flops + STENCIL_FLOPS_PER_CELL * nx * ny)
    new_state = SimState(state.step + 1, vel_new, pressure, density, geo, state.dt)
    return new_state, cost


@dataclass
class Trajectory:
    states: list[SimState]
    div_norms: list[float]  # one per completed step
    costs: list[StepCost]
    solver_ids: list[str]

    @property
    def cum_div_norms(self) -> list[float]:
        out = []
        total = 0.0
        for v in self.div_norms:
            total += v
            out.append(total)
        return out

    @property
    def total_cost(self) -> StepCost:
        total = StepCost()
        for c in self.costs:
            total = total + c
        return total

    @property
    def final(self) -> SimState:
        return self.states[-1]


Schedule = Callable[[int], PressureSolver]


def _as_schedule(schedule, n_steps: int) -> Schedule:
    if callable(schedule):
        return schedule
    if isinstance(schedule, Sequence):
        solvers = list(schedule)
        if len(solvers) < n_steps:
            raise ArgumentError(f"schedule supplies {len(solvers)} solvers for {n_steps} steps")
        return lambda i: solvers[i]
    return lambda i: schedule  # single solver for every step


def simulate(initial: SimState, cfg: SimConfig, schedule,
             modeled_time: float | None = None) -> Trajectory:
    """Run cfg.n_steps steps, recording snapshots, per-step DivNorm and cost.

    With `modeled_time` set (seconds per flop), StepCost.wall_time is replaced
    by the deterministic flops-based model so persisted artifacts are
    byte-reproducible.
    """
    pick = _as_schedule(schedule, cfg.n_steps)
    state = initial.copy()
    states = [state.copy()]
    div_norms: list[float] = []
    costs: list[StepCost] = []
    ids: list[str] = []
    for i in range(cfg.n_steps):
        solver = pick(i)
        state, cost = step(state, solver, cfg)
        if modeled_time is not None:
            cost = StepCost(cost.flops * modeled_time, cost.flops)
        states.append(state.copy())
        div_norms.append(div_norm(state.vel, state.geo, cfg.kappa))
        costs.append(cost)
        ids.append(getattr(solver, "solver_id", "?"))
    return Trajectory(states, div_norms, costs, ids)


def quality_loss(rho_star: ScalarField, rho: ScalarField) -> float:
    """Mean absolute per-cell difference between two smoke density fields."""
    if rho_star.dims != rho.dims:
        raise DimensionMismatchError("quality_loss needs matching grid dims")
    return float(np.abs(rho_star.values - rho.values).mean())


def div_norm(vel: MacVelocityField, geo: GeometryField, kappa: float) -> float:
    """Weighted squared-divergence sum over fluid cells."""
    if not kappa >= 1:
        raise ArgumentError(f"kappa must be >= 1, got {kappa}")
    from .grid import divergence as _div

    div = _div(vel, geo).values
    w = np.maximum(1.0, kappa - geo.distance.values)
    return float((w * div * div)[geo.fluid].sum())


# ---------------------------------------------------------------------------
# export helpers


def trajectory_rows(traj: Trajectory) -> list[list]:
    """CSV rows: one per completed step."""
    rows = []
    cum = 0.0
    for i, (dn, cost) in enumerate(zip(traj.div_norms, traj.costs), start=1):
        cum += dn
        rows.append([i, dn, cum, cost.wall_time, cost.flops])
    return rows


TRAJECTORY_HEADER = ["step", "DivNorm", "CumDivNorm", "wall_time", "flops"]


def write_pgm(path, field: ScalarField) -> None:
    """8-bit ASCII PGM dump of a scalar field clamped to [0, 1]."""
    vals = np.clip(field.values, 0.0, 1.0)
    quant = np.rint(vals * 255).astype(int)
    nx, ny = field.dims.shape
    lines = ["P2", f"{nx} {ny}", "255"]
    # image rows scan y downward so plumes render upright
    for j in range(ny - 1, -1, -1):
        lines.append(" ".join(str(quant[i, j]) for i in range(nx)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
