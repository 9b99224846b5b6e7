"""Concrete pressure solvers satisfying the fluid-core solver contract.

Every solver maps (divergence, geometry) -> (pressure, cost). The exact
solver is MIC(0)-PCG run to tolerance; truncated variants stop after a fixed
iteration count and form the cheap iterative surrogate family.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .fluid import StepCost
from .grid import GeometryField, ScalarField
from .pcg import (
    Mic0Preconditioner,
    PcgConfig,
    PoissonSystem,
    build_system,
    mic0_factor,
    pcg_flops,
    pcg_solve,
)


@dataclass
class _SystemCache:
    """System + factorization per geometry object (geometry is immutable and
    shared across the steps of one run)."""

    dt: float
    entries: dict[int, tuple[GeometryField, PoissonSystem, Mic0Preconditioner | None]] = field(
        default_factory=dict
    )

    def get(self, geo: GeometryField, want_precon: bool):
        key = id(geo)
        hit = self.entries.get(key)
        if hit is not None and hit[0] is geo:
            geo_, sys, pre = hit
            if want_precon and pre is None:
                pre = mic0_factor(sys)
                self.entries[key] = (geo, sys, pre)
            return sys, pre
        sys = build_system(geo, self.dt)
        pre = mic0_factor(sys) if want_precon else None
        self.entries[key] = (geo, sys, pre)
        return sys, pre


class PcgPressureSolver:
    """Exact reference solver: solves -Lap(p) = -div/dt to tolerance, then
    scales by rho so the dt/rho gradient subtraction removes the divergence."""

    def __init__(self, dt: float, rho: float = 1.0, cfg: PcgConfig | None = None,
                 solver_id: str = "pcg"):
        self.cfg = cfg if cfg is not None else PcgConfig()
        self.dt = dt
        self.rho = rho
        self.solver_id = solver_id
        self._cache = _SystemCache(dt)
        self.last_result = None

    def solve(self, div: ScalarField, geo: GeometryField) -> tuple[ScalarField, StepCost]:
        t0 = time.perf_counter()
        want_pre = self.cfg.preconditioner == "mic0"
        sys, pre = self._cache.get(geo, want_pre)
        rhs = ScalarField(div.dims, -div.values / self.dt)
        result = pcg_solve(sys, rhs, self.cfg, precon=pre)
        self.last_result = result
        pressure = result.pressure
        if self.rho != 1.0:
            pressure = ScalarField(pressure.dims, pressure.values * self.rho)
        wall = time.perf_counter() - t0
        return pressure, StepCost(wall, pcg_flops(sys.n_fluid, result.iterations))


def truncated_pcg_solver(m: int, dt: float, rho: float = 1.0) -> PcgPressureSolver:
    """Surrogate: MIC(0)-PCG stopped after exactly m iterations."""
    cfg = PcgConfig(tol=0.0, max_iters=m)
    return PcgPressureSolver(dt, rho, cfg, solver_id=f"iter{m}")


class NetworkPressureSolver:
    """Surrogate: a trained micro-network predicts pressure from divergence
    and occupancy. Output is zeroed on solid cells per the solver contract."""

    def __init__(self, net, solver_id: str):
        self.net = net
        self.solver_id = solver_id

    def solve(self, div: ScalarField, geo: GeometryField) -> tuple[ScalarField, StepCost]:
        from .nn import count_flops, forward

        t0 = time.perf_counter()
        pressure = forward(self.net, div, geo)
        vals = pressure.values.copy()
        vals[geo.solid] = 0.0
        wall = time.perf_counter() - t0
        return ScalarField(div.dims, vals), StepCost(wall, count_flops(self.net, div.dims))


class TablePressureSolver:
    """Test double: replays precomputed pressure fields (e.g. PCG outputs)."""

    def __init__(self, pressures: list[ScalarField], solver_id: str = "table"):
        self.pressures = list(pressures)
        self.calls = 0
        self.solver_id = solver_id

    def solve(self, div: ScalarField, geo: GeometryField) -> tuple[ScalarField, StepCost]:
        p = self.pressures[self.calls]
        self.calls += 1
        return p.copy(), StepCost(0.0, 0)
