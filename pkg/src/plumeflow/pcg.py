"""Exact pressure solver: 5-point Poisson assembly + MIC(0)-preconditioned CG.

The assembled operator is A = -Laplacian restricted to fluid cells with
Neumann walls folded into the diagonal: diag(c) = (#fluid neighbors)/h^2,
off-diagonal -1/h^2 per fluid neighbor. A is symmetric positive
semi-definite; the null space is one constant vector per connected fluid
component, handled by mean-subtracting the right-hand side per component.

The incomplete-Cholesky sweeps are vectorized along anti-diagonals (i + j =
const), which are dependency-free for the 5-point pattern.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, DomainError, NumericError
from .grid import GeometryField, ScalarField

MIC0_TAU = 0.97
MIC0_SIGMA = 0.25


@dataclass
class PcgConfig:
    tol: float = 1e-5
    max_iters: int = 1000
    preconditioner: str = "mic0"  # "mic0" or "none"

    def __post_init__(self):
        if not self.tol >= 0:
            raise ArgumentError(f"tolerance must be >= 0, got {self.tol}")
        if self.max_iters < 1:
            raise ArgumentError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.preconditioner not in ("mic0", "none"):
            raise ArgumentError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass
class PoissonSystem:
    geo: GeometryField
    dt: float
    diag: np.ndarray  # (nx, ny), 0 on solid cells
    plus_i: np.ndarray  # coefficient linking (i, j) - (i+1, j)
    plus_j: np.ndarray  # coefficient linking (i, j) - (i, j+1)
    components: np.ndarray  # fluid component labels, 0 on solid
    n_components: int
    # wavefront ordering of fluid cells (sorted by i + j, then i)
    order_ij: tuple[np.ndarray, np.ndarray] = field(repr=False, default=None)
    diag_slices: list[tuple[int, int]] = field(repr=False, default=None)
    left_idx: np.ndarray = field(repr=False, default=None)
    down_idx: np.ndarray = field(repr=False, default=None)
    left_coef: np.ndarray = field(repr=False, default=None)
    down_coef: np.ndarray = field(repr=False, default=None)
    right_idx: np.ndarray = field(repr=False, default=None)
    up_idx: np.ndarray = field(repr=False, default=None)
    right_coef: np.ndarray = field(repr=False, default=None)
    up_coef: np.ndarray = field(repr=False, default=None)

    @property
    def n_fluid(self) -> int:
        return len(self.order_ij[0])

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """A @ x for a full-grid x (solid entries ignored, output 0 there)."""
        y = self.diag * x
        y[:-1, :] += self.plus_i[:-1, :] * x[1:, :]
        y[1:, :] += self.plus_i[:-1, :] * x[:-1, :]
        y[:, :-1] += self.plus_j[:, :-1] * x[:, 1:]
        y[:, 1:] += self.plus_j[:, :-1] * x[:, :-1]
        y[self.geo.solid] = 0.0
        return y

    def to_dense(self) -> tuple[np.ndarray, list[tuple[int, int]]]:
        """Dense matrix over fluid cells (for small-system oracles)."""
        cells = list(zip(*self.order_ij))
        index = {c: k for k, c in enumerate(cells)}
        n = len(cells)
        a = np.zeros((n, n))
        for (i, j), k in index.items():
            a[k, k] = self.diag[i, j]
            if (i + 1, j) in index:
                a[k, index[(i + 1, j)]] = self.plus_i[i, j]
            if (i - 1, j) in index:
                a[k, index[(i - 1, j)]] = self.plus_i[i - 1, j]
            if (i, j + 1) in index:
                a[k, index[(i, j + 1)]] = self.plus_j[i, j]
            if (i, j - 1) in index:
                a[k, index[(i, j - 1)]] = self.plus_j[i, j - 1]
        return a, cells

    def subtract_component_means(self, rhs: np.ndarray) -> np.ndarray:
        """Project rhs onto the range of A: zero mean per fluid component."""
        out = rhs.copy()
        out[self.geo.solid] = 0.0
        means = ndimage.mean(out, labels=self.components, index=range(1, self.n_components + 1))
        for label, m in enumerate(np.atleast_1d(means), start=1):
            out[self.components == label] -= m
        out[self.geo.solid] = 0.0
        return out


def build_system(geo: GeometryField, dt: float) -> PoissonSystem:
    if not dt > 0:
        raise ArgumentError(f"dt must be positive, got {dt}")
    fluid = geo.fluid
    if not fluid.any():
        raise DomainError("Poisson system needs at least one fluid cell")
    nx, ny = geo.dims.shape
    inv_h2 = 1.0 / geo.dims.h**2

    plus_i = np.zeros((nx, ny))
    plus_j = np.zeros((nx, ny))
    plus_i[:-1, :] = np.where(fluid[:-1, :] & fluid[1:, :], -inv_h2, 0.0)
    plus_j[:, :-1] = np.where(fluid[:, :-1] & fluid[:, 1:], -inv_h2, 0.0)

    neighbors = np.zeros((nx, ny))
    neighbors[:-1, :] += fluid[1:, :]
    neighbors[1:, :] += fluid[:-1, :]
    neighbors[:, :-1] += fluid[:, 1:]
    neighbors[:, 1:] += fluid[:, :-1]
    diag = np.where(fluid, neighbors * inv_h2, 0.0)

    components, n_components = ndimage.label(fluid)

    ii, jj = np.nonzero(fluid)
    order = np.lexsort((ii, ii + jj))  # by anti-diagonal, then i
    ii, jj = ii[order], jj[order]
    d = ii + jj
    slices = []
    start = 0
    for k in range(1, len(d) + 1):
        if k == len(d) or d[k] != d[start]:
            slices.append((start, k))
            start = k
    # flat index 0 is a padding slot holding 0.0 for missing neighbors
    flat_index = np.zeros((nx, ny), dtype=np.int64)
    flat_index[ii, jj] = np.arange(1, len(ii) + 1)

    def neighbor(di, dj):
        ni, nj = ii + di, jj + dj
        ok = (ni >= 0) & (ni < nx) & (nj >= 0) & (nj < ny)
        idx = np.zeros(len(ii), dtype=np.int64)
        idx[ok] = flat_index[ni[ok], nj[ok]]
        return idx

    left_idx = neighbor(-1, 0)
    down_idx = neighbor(0, -1)
    right_idx = neighbor(1, 0)
    up_idx = neighbor(0, 1)
    left_coef = np.where(left_idx > 0, plus_i[np.maximum(ii - 1, 0), jj], 0.0)
    down_coef = np.where(down_idx > 0, plus_j[ii, np.maximum(jj - 1, 0)], 0.0)
    right_coef = np.where(right_idx > 0, plus_i[ii, jj], 0.0)
    up_coef = np.where(up_idx > 0, plus_j[ii, jj], 0.0)

    return PoissonSystem(
        geo=geo,
        dt=dt,
        diag=diag,
        plus_i=plus_i,
        plus_j=plus_j,
        components=components,
        n_components=int(n_components),
        order_ij=(ii, jj),
        diag_slices=slices,
        left_idx=left_idx,
        down_idx=down_idx,
        left_coef=left_coef,
        down_coef=down_coef,
        right_idx=right_idx,
        up_idx=up_idx,
        right_coef=right_coef,
        up_coef=up_coef,
    )


@dataclass
class Mic0Preconditioner:
    sys: PoissonSystem
    precon_flat: np.ndarray  # padded: slot 0 unused, then wavefront order
    # folded forward/backward sweep coefficients
    fwd_left: np.ndarray
    fwd_down: np.ndarray
    bwd_right: np.ndarray
    bwd_up: np.ndarray

    def apply(self, r: np.ndarray) -> np.ndarray:
        """Solve (L L^T) z ~= r with the incomplete factor, full-grid arrays."""
        s = self.sys
        ii, jj = s.order_ij
        n = len(ii)
        rf = np.zeros(n + 1)
        rf[1:] = r[ii, jj]
        q = np.zeros(n + 1)
        pre = self.precon_flat
        for a, b in s.diag_slices:
            sl = slice(a + 1, b + 1)
            q[sl] = pre[sl] * (
                rf[sl]
                - self.fwd_left[a:b] * q[s.left_idx[a:b]]
                - self.fwd_down[a:b] * q[s.down_idx[a:b]]
            )
        z = np.zeros(n + 1)
        for a, b in reversed(s.diag_slices):
            sl = slice(a + 1, b + 1)
            z[sl] = pre[sl] * (
                q[sl]
                - self.bwd_right[a:b] * z[s.right_idx[a:b]]
                - self.bwd_up[a:b] * z[s.up_idx[a:b]]
            )
        out = np.zeros_like(r)
        out[ii, jj] = z[1:]
        return out

    def to_dense(self) -> np.ndarray:
        """Dense M = (L L^T)^(-1) applied columnwise (small-system oracle)."""
        n = self.sys.n_fluid
        ii, jj = self.sys.order_ij
        m = np.zeros((n, n))
        for k in range(n):
            e = np.zeros(self.sys.diag.shape)
            e[ii[k], jj[k]] = 1.0
            m[:, k] = self.apply(e)[ii, jj]
        return m


class IdentityPreconditioner:
    def apply(self, r: np.ndarray) -> np.ndarray:
        return r


def mic0_factor(sys: PoissonSystem) -> Mic0Preconditioner:
    """Modified incomplete Cholesky(0) with tuning tau/sigma per the standard
    recipe. Isolated cells (diag 0) get a zero preconditioner entry; they are
    decoupled and their rhs is always projected to zero."""
    ii, jj = sys.order_ij
    n = len(ii)
    pre = np.zeros(n + 1)
    diag_f = sys.diag[ii, jj]
    li, di = sys.left_idx, sys.down_idx
    lc, dc = sys.left_coef, sys.down_coef
    # plus_i/plus_j of the left and down neighbor cells (for the MIC term)
    lpi = np.where(li > 0, sys.plus_i[np.maximum(ii - 1, 0), jj], 0.0)
    lpj = np.where(li > 0, sys.plus_j[np.maximum(ii - 1, 0), jj], 0.0)
    dpi = np.where(di > 0, sys.plus_i[ii, np.maximum(jj - 1, 0)], 0.0)
    dpj = np.where(di > 0, sys.plus_j[ii, np.maximum(jj - 1, 0)], 0.0)
    for a, b in sys.diag_slices:
        pl = pre[li[a:b]]
        pd = pre[di[a:b]]
        e = (
            diag_f[a:b]
            - (lc[a:b] * pl) ** 2
            - (dc[a:b] * pd) ** 2
            - MIC0_TAU * (lpi[a:b] * lpj[a:b] * pl**2 + dpj[a:b] * dpi[a:b] * pd**2)
        )
        e = np.where(e < MIC0_SIGMA * diag_f[a:b], diag_f[a:b], e)
        isolated = diag_f[a:b] == 0.0
        if (~isolated & (e <= 0.0)).any():
            raise NumericError("non-positive MIC(0) pivot after safety clamp")
        pre[a + 1 : b + 1] = np.where(isolated, 0.0, 1.0 / np.sqrt(np.where(isolated, 1.0, e)))

    fwd_left = lc * pre[li]
    fwd_down = dc * pre[di]
    bwd_right = sys.right_coef * pre[1:]
    bwd_up = sys.up_coef * pre[1:]
    return Mic0Preconditioner(sys, pre, fwd_left, fwd_down, bwd_right, bwd_up)


@dataclass
class PcgResult:
    pressure: ScalarField
    iterations: int
    residual: float
    converged: bool
    residual_history: list[float]


# rough per-iteration flop count per fluid cell: matvec (9), preconditioner
# sweeps (10), dots and vector updates (12)
FLOPS_PER_CELL_ITER = 31
FLOPS_SETUP_PER_CELL = 24


def pcg_flops(n_fluid: int, iterations: int) -> int:
    return n_fluid * (FLOPS_SETUP_PER_CELL + FLOPS_PER_CELL_ITER * max(iterations, 0))


def pcg_solve(
    sys: PoissonSystem,
    rhs: ScalarField,
    cfg: PcgConfig | None = None,
    precon: Mic0Preconditioner | None = None,
) -> PcgResult:
    """Preconditioned conjugate gradient for A p = rhs.

    The rhs is mean-subtracted per fluid component first (Neumann
    compatibility). Returns non-converged status rather than raising when the
    iteration cap is hit; raises NumericError on NaN iterates.
    """
    if cfg is None:
        cfg = PcgConfig()
    if rhs.dims != sys.geo.dims:
        raise ArgumentError("rhs dims do not match the system geometry")
    if not np.isfinite(rhs.values[sys.geo.fluid]).all():
        raise NumericError("non-finite right-hand side")
    b = sys.subtract_component_means(rhs.values)
    b_norm = float(np.linalg.norm(b))
    dims = sys.geo.dims
    if b_norm == 0.0:
        return PcgResult(ScalarField.zeros(dims), 0, 0.0, True, [])

    if cfg.preconditioner == "mic0":
        m = precon if precon is not None else mic0_factor(sys)
    else:
        m = IdentityPreconditioner()

    x = np.zeros(dims.shape)
    r = b.copy()
    z = m.apply(r)
    s = z.copy()
    sigma = float((r * z).sum())
    history: list[float] = []
    iterations = 0
    res_norm = b_norm
    for _ in range(cfg.max_iters):
        a_s = sys.matvec(s)
        s_as = float((s * a_s).sum())
        if s_as <= 0.0 or not np.isfinite(s_as):
            if not np.isfinite(s_as):
                raise NumericError("PCG breakdown: non-finite curvature")
            break  # search direction exhausted (semi-definite edge case)
        alpha = sigma / s_as
        x += alpha * s
        r -= alpha * a_s
        iterations += 1
        res_norm = float(np.linalg.norm(r))
        if not np.isfinite(res_norm):
            raise NumericError("PCG produced non-finite residual")
        history.append(res_norm)
        if res_norm <= cfg.tol * b_norm:
            break
        z = m.apply(r)
        sigma_new = float((r * z).sum())
        beta = sigma_new / sigma
        s = z + beta * s
        sigma = sigma_new

    converged = res_norm <= cfg.tol * b_norm
    x[sys.geo.solid] = 0.0
    return PcgResult(ScalarField(dims, x), iterations, res_norm, converged, history)
