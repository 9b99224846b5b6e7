"""Procedural input problems: walled domains with random obstacles, a smoke
source, and a pseudo-random turbulent initial velocity.

The initial velocity derives from a random-phase sinusoidal stream function
sampled at grid nodes and differenced onto faces, so its discrete divergence
is zero to machine precision. The stream function is tapered to zero near
solids, which also zeroes wall/obstacle faces without breaking that property.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DomainError
from ..fluid import InflowSpec, SimConfig, SimState
from ..grid import GeometryField, GridDims, MacVelocityField, ScalarField


@dataclass(frozen=True)
class Obstacle:
    shape: str  # "circle" or "rect"
    center: tuple[float, float]  # cell units
    size: tuple[float, float]  # radius (circle, both equal) or half extents


@dataclass
class ScenarioSpec:
    nx: int = 64
    ny: int = 64
    h: float = 1.0
    mode_count: int = 8
    amplitude: float = 2.0
    max_obstacles: int = 3
    source_rate: float = 0.5

    def __post_init__(self):
        if self.mode_count < 0 or self.amplitude < 0:
            raise DomainError("turbulence parameters must be non-negative")


@dataclass
class Scenario:
    id: str
    dims: GridDims
    seed: int
    obstacles: list[Obstacle]
    source_center: tuple[float, float]
    source_radius: float
    source_rate: float
    mode_count: int
    amplitude: float
    modes: list[tuple[int, int, float, float]] = field(default_factory=list)
    # (kx, ky, phase, weight) per turbulence mode


def generate_scenario(spec: ScenarioSpec, seed: int, scenario_id: str | None = None) -> Scenario:
    """Deterministic per (spec, seed)."""
    rng = np.random.default_rng(seed)
    nx, ny = spec.nx, spec.ny
    n_obstacles = int(rng.integers(0, spec.max_obstacles + 1))
    obstacles = []
    for _ in range(n_obstacles):
        shape = "circle" if rng.random() < 0.5 else "rect"
        radius = float(rng.uniform(1.5, max(2.0, min(nx, ny) / 8)))
        margin = radius + 2.0
        cx = float(rng.uniform(margin, nx - margin))
        cy = float(rng.uniform(ny * 0.35, ny - margin))  # keep the source clear
        if shape == "circle":
            obstacles.append(Obstacle(shape, (cx, cy), (radius, radius)))
        else:
            hx = radius
            hy = float(rng.uniform(1.0, radius))
            obstacles.append(Obstacle(shape, (cx, cy), (hx, hy)))
    modes = []
    for _ in range(spec.mode_count):
        kx = int(rng.integers(1, 5))
        ky = int(rng.integers(1, 5))
        phase = float(rng.uniform(0.0, 2.0 * np.pi))
        weight = float(rng.uniform(0.5, 1.0)) / np.hypot(kx, ky)
        modes.append((kx, ky, phase, weight))
    source_center = (nx / 2.0, max(2.5, ny * 0.12))
    source_radius = max(1.5, min(nx, ny) / 12.0)
    return Scenario(
        id=scenario_id if scenario_id is not None else f"s{seed}",
        dims=GridDims(nx, ny, spec.h),
        seed=seed,
        obstacles=obstacles,
        source_center=source_center,
        source_radius=source_radius,
        source_rate=spec.source_rate,
        mode_count=spec.mode_count,
        amplitude=spec.amplitude,
        modes=modes,
    )


def _rasterize_obstacles(scenario: Scenario) -> np.ndarray:
    nx, ny = scenario.dims.shape
    solid = np.zeros((nx, ny), dtype=bool)
    ci = np.arange(nx)[:, None] + 0.5
    cj = np.arange(ny)[None, :] + 0.5
    for ob in scenario.obstacles:
        cx, cy = ob.center
        sx, sy = ob.size
        if not (0 < cx - sx and cx + sx < nx and 0 < cy - sy and cy + sy < ny):
            raise DomainError(f"obstacle {ob} extends outside the domain")
        if ob.shape == "circle":
            solid |= (ci - cx) ** 2 + (cj - cy) ** 2 <= sx**2
        elif ob.shape == "rect":
            solid |= (np.abs(ci - cx) <= sx) & (np.abs(cj - cy) <= sy)
        else:
            raise DomainError(f"unknown obstacle shape {ob.shape!r}")
    return solid


def build_geometry(scenario: Scenario) -> GeometryField:
    return GeometryField.build(scenario.dims, _rasterize_obstacles(scenario))


def turbulent_velocity(scenario: Scenario, geo: GeometryField) -> MacVelocityField:
    """Curl of a node-sampled stream function; discretely divergence-free."""
    nx, ny = scenario.dims.shape
    h = scenario.dims.h
    xs = np.arange(nx + 1)[:, None] / max(nx, 1)
    ys = np.arange(ny + 1)[None, :] / max(ny, 1)
    psi = np.zeros((nx + 1, ny + 1))
    for kx, ky, phase, weight in scenario.modes:
        psi += weight * np.sin(2.0 * np.pi * (kx * xs + ky * ys) + phase)
    psi *= scenario.amplitude

    # node distance = min over adjacent cell distances; taper psi to a
    # constant (zero) around solids so wall faces come out exactly zero
    d = geo.distance.values
    pad = np.zeros((nx + 2, ny + 2))
    pad[1:-1, 1:-1] = d
    node_d = np.minimum.reduce([
        pad[:-1, :-1], pad[1:, :-1], pad[:-1, 1:], pad[1:, 1:]
    ])
    taper = np.clip((node_d - 1.0) / 2.0, 0.0, 1.0)
    psi *= taper

    u = (psi[: nx + 1, 1:] - psi[: nx + 1, :-1]) / h
    v = -(psi[1:, : ny + 1] - psi[:-1, : ny + 1]) / h
    return MacVelocityField(scenario.dims, u, v)


def initial_density(scenario: Scenario, geo: GeometryField) -> ScalarField:
    nx, ny = scenario.dims.shape
    ci = np.arange(nx)[:, None] + 0.5
    cj = np.arange(ny)[None, :] + 0.5
    cx, cy = scenario.source_center
    blob = (ci - cx) ** 2 + (cj - cy) ** 2 <= scenario.source_radius**2
    vals = np.where(blob & geo.fluid, 1.0, 0.0)
    return ScalarField(scenario.dims, vals)


def source_region(scenario: Scenario, geo: GeometryField) -> np.ndarray:
    return initial_density(scenario, geo).values > 0


def initial_state(scenario: Scenario, dt: float) -> tuple[SimState, np.ndarray]:
    """Build the walled geometry, turbulent velocity and smoke blob; returns
    the state plus the inflow region mask."""
    geo = build_geometry(scenario)
    if not source_region(scenario, geo).any():
        raise DomainError("smoke source region is fully blocked")
    vel = turbulent_velocity(scenario, geo)
    density = initial_density(scenario, geo)
    state = SimState(0, vel, ScalarField.zeros(scenario.dims), density, geo, dt)
    return state, source_region(scenario, geo)


def sim_config(scenario: Scenario, n_steps: int, dt: float, buoyancy: float,
               kappa: float, inflow: bool = True) -> SimConfig:
    geo = build_geometry(scenario)
    region = source_region(scenario, geo)
    return SimConfig(
        n_steps=n_steps,
        dt=dt,
        buoyancy=buoyancy,
        kappa=kappa,
        inflow=InflowSpec(region, scenario.source_rate) if inflow else None,
    )


def make_problem(scenario: Scenario, n_steps: int, dt: float, buoyancy: float,
                 kappa: float) -> tuple[str, SimState, SimConfig]:
    """(problem_id, initial state, config) triple as the profiling APIs expect."""
    state, region = initial_state(scenario, dt)
    cfg = SimConfig(
        n_steps=n_steps, dt=dt, buoyancy=buoyancy, kappa=kappa,
        inflow=InflowSpec(region, scenario.source_rate),
    )
    return scenario.id, state, cfg
