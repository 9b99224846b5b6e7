"""Online quality controller.

Every check interval the controller fits a line to the tail of the running
CumDivNorm history, extrapolates it to the final step, maps that through a
KNN lookup over historical (final CumDivNorm, final quality loss) pairs, and
decides: keep the current surrogate, switch to a faster or a more accurate
one, or restart the whole run on the exact solver.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, FitError
from .fluid import SimConfig, SimState, StepCost, Trajectory, div_norm, quality_loss, \
    simulate, step
from .grid import ScalarField
from .mlp import RankedCandidate
from .pcg import PcgConfig
from .solvers import PcgPressureSolver


def accumulate(history: list[float], value: float) -> list[float]:
    """Append one DivNorm observation to a running-sum history."""
    if value < 0:
        raise ArgumentError(f"DivNorm values are non-negative, got {value}")
    total = history[-1] if history else 0.0
    return history + [total + value]


@dataclass
class RegressionModel:
    a: float
    b: float
    last_observed: float | None = None

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise FitError("regression coefficients must be finite")


def fit_regression(points) -> RegressionModel:
    """Ordinary least squares y = a*x + b; exact on collinear input."""
    xs = np.array([p[0] for p in points], dtype=np.float64)
    ys = np.array([p[1] for p in points], dtype=np.float64)
    if len(set(xs.tolist())) < 2:
        raise FitError(f"need >= 2 distinct abscissae, got {xs.tolist()}")
    xm = xs.mean()
    ym = ys.mean()
    dx = xs - xm
    a = float((dx * (ys - ym)).sum() / (dx * dx).sum())
    b = float(ym - a * xm)
    return RegressionModel(a, b, last_observed=float(ys[-1]))


def predict_cum_final(model: RegressionModel, final_step: int) -> float:
    """Extrapolate to the final step, clamped below at the last observation
    (CumDivNorm never decreases)."""
    value = model.a * final_step + model.b
    if model.last_observed is not None:
        value = max(value, model.last_observed)
    return float(value)


# ---------------------------------------------------------------------------
# KNN database


@dataclass
class _Node:
    key: float
    value: float
    left: "_Node | None" = None
    right: "_Node | None" = None


def _build_balanced(pairs, lo, hi):
    if lo >= hi:
        return None
    mid = (lo + hi) // 2
    key, value = pairs[mid]
    return _Node(key, value,
                 _build_balanced(pairs, lo, mid),
                 _build_balanced(pairs, mid + 1, hi))


class KnnDatabase:
    """Immutable balanced BST over (CumDivNorm_final, Q_loss) pairs.

    Nearest-k lookup walks two stacks outward from the query's split path,
    O(log n + k).
    """

    def __init__(self, pairs, k: int = 4):
        if k < 1:
            raise ArgumentError(f"k must be >= 1, got {k}")
        pairs = [(float(key), float(value)) for key, value in pairs]
        for key, value in pairs:
            if not np.isfinite(key):
                raise ArgumentError(f"non-finite CumDivNorm key {key}")
            if value < 0:
                raise ArgumentError(f"quality loss must be >= 0, got {value}")
        pairs.sort(key=lambda kv: kv[0])
        self.k = k
        self._size = len(pairs)
        self._root = _build_balanced(pairs, 0, len(pairs))

    def __len__(self) -> int:
        return self._size

    def in_order(self):
        out = []
        stack = []
        node = self._root
        while stack or node:
            while node:
                stack.append(node)
                node = node.left
            node = stack.pop()
            out.append((node.key, node.value))
            node = node.right
        return out

    def nearest(self, query: float, k: int | None = None):
        """k pairs with keys closest to query; ties toward the smaller key."""
        k = self.k if k is None else k
        if self._size == 0:
            raise ArgumentError("empty KNN database")
        if k > self._size:
            warnings.warn(
                f"KNN database holds {self._size} pairs, requested k={k}; using all",
                stacklevel=2,
            )
            k = self._size
        below: list[_Node] = []  # keys <= query, top is the largest
        above: list[_Node] = []  # keys  > query, top is the smallest
        node = self._root
        while node:
            if node.key <= query:
                below.append(node)
                node = node.right
            else:
                above.append(node)
                node = node.left

        def pop_below():
            top = below.pop()
            node = top.left
            while node:
                below.append(node)
                node = node.right
            return top

        def pop_above():
            top = above.pop()
            node = top.right
            while node:
                above.append(node)
                node = node.left
            return top

        chosen = []
        while len(chosen) < k:
            if below and above:
                d_lo = query - below[-1].key
                d_hi = above[-1].key - query
                pick = pop_below() if d_lo <= d_hi else pop_above()
            elif below:
                pick = pop_below()
            else:
                pick = pop_above()
            chosen.append((pick.key, pick.value))
        return chosen


def knn_predict_qloss(db: KnnDatabase, cum_final: float) -> float:
    """Unweighted mean quality loss of the k nearest stored pairs."""
    chosen = db.nearest(cum_final)
    return sum(v for _, v in chosen) / len(chosen)


def build_knn_database(selected, problems, sim_cfg_for=None, k: int = 4,
                       rho: float = 1.0, pcg_cfg: PcgConfig | None = None,
                       seconds_per_flop: float | None = None,
                       per_candidate: bool = False):
    """Profile each selected candidate on small problems, pairing the final
    CumDivNorm with the final quality loss against the exact baseline.

    problems: sequence of (problem_id, SimState, SimConfig). Failed runs are
    skipped with a warning count (returned alongside the database).
    """
    candidates = [rc.candidate if isinstance(rc, RankedCandidate) else rc
                  for rc in selected]
    pooled: list[tuple[float, float]] = []
    per: dict[str, list[tuple[float, float]]] = {c.id: [] for c in candidates}
    failures = 0
    for problem_id, initial, cfg in problems:
        exact = PcgPressureSolver(cfg.dt, rho, pcg_cfg)
        baseline = simulate(initial, cfg, exact, modeled_time=seconds_per_flop)
        for cand in candidates:
            solver = cand.solver(cfg.dt, rho, pcg_cfg)
            try:
                traj = simulate(initial, cfg, solver, modeled_time=seconds_per_flop)
            except Exception:
                failures += 1
                continue
            cum_final = float(sum(traj.div_norms))
            qloss = quality_loss(traj.final.density, baseline.final.density)
            pooled.append((cum_final, qloss))
            per[cand.id].append((cum_final, qloss))
    if failures:
        warnings.warn(f"KNN profiling skipped {failures} failed runs", stacklevel=2)
    if per_candidate:
        return {cid: KnnDatabase(rows, k) for cid, rows in per.items()}, failures
    return KnnDatabase(pooled, k), failures


# ---------------------------------------------------------------------------
# the switch policy


@dataclass
class RuntimeConfig:
    check_interval: int = 5
    skip_initial: int = 5
    skip_in_interval: int = 2
    epsilon_rel: float = 0.05

    def __post_init__(self):
        if self.check_interval < 3:
            raise ArgumentError("check interval must be >= 3")
        if self.skip_in_interval < 0 or self.skip_in_interval >= self.check_interval:
            raise ArgumentError("skip_in_interval must be < check_interval")
        if self.check_interval - self.skip_in_interval < 2:
            raise ArgumentError("interval must retain >= 2 points for the fit")
        if not 0.0 < self.epsilon_rel < 0.5:
            raise ArgumentError("epsilon_rel must be in (0, 0.5)")
        if self.skip_initial < 0:
            raise ArgumentError("skip_initial must be >= 0")


CONTINUE = "continue"
SWITCH_FASTER = "switch_faster"
SWITCH_ACCURATE = "switch_accurate"
RESTART = "restart"


@dataclass(frozen=True)
class SwitchDecision:
    kind: str
    target: RankedCandidate | None = None


def _best(pool):
    return min(pool, key=lambda rc: (-rc.r_hat, rc.candidate.mean_time, rc.id))


def decide(q_pred: float, req, current: RankedCandidate,
           selected, abandoned=frozenset(),
           epsilon_rel: float = 0.05) -> SwitchDecision:
    """Three contiguous bands around the quality bound q:

      |q_pred - q| <= eps*q      keep the current model
      q_pred < (1-eps)*q         switch to a faster model (highest r_hat)
      q_pred > (1+eps)*q         switch to a more accurate model, or restart
                                 on the exact solver when none is left

    Abandoned candidates are revisited only when they are the only options in
    the required direction.
    """
    q = req.q
    eps = q * epsilon_rel
    if abs(q_pred - q) <= eps:
        return SwitchDecision(CONTINUE)
    if q_pred < q - eps:
        pool = [rc for rc in selected
                if rc.candidate.mean_time < current.candidate.mean_time]
        fresh = [rc for rc in pool if rc.id not in abandoned]
        chosen = fresh or pool
        if not chosen:
            return SwitchDecision(CONTINUE)
        return SwitchDecision(SWITCH_FASTER, _best(chosen))
    pool = [rc for rc in selected
            if rc.candidate.mean_qloss < current.candidate.mean_qloss]
    fresh = [rc for rc in pool if rc.id not in abandoned]
    chosen = fresh or pool
    if not chosen:
        return SwitchDecision(RESTART)
    return SwitchDecision(SWITCH_ACCURATE, _best(chosen))


@dataclass
class IntervalRecord:
    interval_index: int
    step: int
    model_id: str
    cum_divnorm: float
    predicted_final: float
    predicted_qloss: float
    decision: str
    target_id: str | None = None


@dataclass
class AdaptiveRunReport:
    trajectory: Trajectory
    intervals: list[IntervalRecord]
    restarted: bool
    final_qloss: float | None
    total_cost: StepCost
    predictor_seconds: float
    simulation_seconds: float

    @property
    def decisions(self) -> list[str]:
        return [r.decision for r in self.intervals]


INTERVAL_HEADER = ["interval_index", "model_id", "cum_divnorm",
                   "predicted_final", "predicted_qloss", "decision"]


def interval_rows(report: AdaptiveRunReport):
    return [
        [r.interval_index, r.model_id, r.cum_divnorm, r.predicted_final,
         r.predicted_qloss, r.decision]
        for r in report.intervals
    ]


def run_adaptive(initial: SimState, selected, req, db, cfg: SimConfig,
                 rtcfg: RuntimeConfig | None = None, *, rho: float = 1.0,
                 pcg_cfg: PcgConfig | None = None,
                 qloss_predictor=None, baseline_density: ScalarField | None = None,
                 seconds_per_flop: float | None = None,
                 epsilon_rel: float | None = None,
                 restart_trajectory: Trajectory | None = None) -> AdaptiveRunReport:
    """Quality-aware model-switch loop.

    `selected` is the ranked output of the offline phase (highest predicted
    success first). `qloss_predictor`, when given, replaces the regression +
    KNN chain (used by the golden-trace tests). On restart the whole problem
    reruns on the exact solver; the report then carries that trajectory and a
    zero final quality loss by the baseline definition. A caller that already
    holds the exact-solver trajectory of this exact problem (same initial
    state, config, solver settings and cost model) may pass it as
    `restart_trajectory` to skip the recomputation; the two are bit-identical
    by the determinism contract.
    """
    rtcfg = rtcfg if rtcfg is not None else RuntimeConfig()
    eps = rtcfg.epsilon_rel if epsilon_rel is None else epsilon_rel

    exact = PcgPressureSolver(cfg.dt, rho, pcg_cfg)
    if not selected:
        traj = simulate(initial, cfg, exact, modeled_time=seconds_per_flop)
        return AdaptiveRunReport(traj, [], False, 0.0, traj.total_cost, 0.0,
                                 sum(c.wall_time for c in traj.costs))

    order = sorted(selected, key=lambda rc: (-rc.r_hat, rc.candidate.mean_time, rc.id))
    current = order[0]
    solvers = {rc.id: rc.candidate.solver(cfg.dt, rho, pcg_cfg) for rc in order}
    abandoned: set[str] = set()

    state = initial.copy()
    states = [state.copy()]
    div_norms: list[float] = []
    costs: list[StepCost] = []
    ids: list[str] = []
    intervals: list[IntervalRecord] = []
    cum = 0.0
    predictor_seconds = 0.0
    sim_seconds = 0.0
    restarted = False

    n_steps = cfg.n_steps
    L = rtcfg.check_interval
    for n in range(1, n_steps + 1):
        t0 = time.perf_counter()
        state, cost = step(state, solvers[current.id], cfg)
        sim_seconds += time.perf_counter() - t0
        if seconds_per_flop is not None:
            cost = StepCost(cost.flops * seconds_per_flop, cost.flops)
        states.append(state.copy())
        dn = div_norm(state.vel, state.geo, cfg.kappa)
        div_norms.append(dn)
        cum += dn
        costs.append(cost)
        ids.append(current.id)

        due = n > rtcfg.skip_initial and (n - rtcfg.skip_initial) % L == 0
        if not due or n >= n_steps:
            continue
        t0 = time.perf_counter()
        first = n - L + 1 + rtcfg.skip_in_interval
        pts = [(i, float(np.sum(div_norms[:i]))) for i in range(first, n + 1)]
        try:
            model = fit_regression(pts)
            cum_final = predict_cum_final(model, n_steps)
        except FitError:
            cum_final = cum  # flat history; trust the observation
        if qloss_predictor is not None:
            q_pred = float(qloss_predictor(cum_final))
        else:
            q_pred = knn_predict_qloss(db, cum_final)
        decision = decide(q_pred, req, current, order, frozenset(abandoned),
                          epsilon_rel=eps)
        predictor_seconds += time.perf_counter() - t0
        intervals.append(IntervalRecord(
            interval_index=len(intervals), step=n, model_id=current.id,
            cum_divnorm=cum, predicted_final=cum_final, predicted_qloss=q_pred,
            decision=decision.kind,
            target_id=decision.target.id if decision.target else None,
        ))
        if decision.kind in (SWITCH_FASTER, SWITCH_ACCURATE):
            abandoned.add(current.id)
            current = decision.target
        elif decision.kind == RESTART:
            restarted = True
            break

    if restarted:
        wasted = StepCost(
            float(sum(c.wall_time for c in costs)),
            int(sum(c.flops for c in costs)),
        )
        if restart_trajectory is not None:
            traj = restart_trajectory
        else:
            t0 = time.perf_counter()
            traj = simulate(initial, cfg, exact, modeled_time=seconds_per_flop)
            sim_seconds += time.perf_counter() - t0
        total = traj.total_cost + wasted
        return AdaptiveRunReport(traj, intervals, True, 0.0, total,
                                 predictor_seconds, sim_seconds)

    traj = Trajectory(states, div_norms, costs, ids)
    final_qloss = None
    if baseline_density is not None:
        final_qloss = quality_loss(traj.final.density, baseline_density)
    return AdaptiveRunReport(traj, intervals, False, final_qloss,
                             traj.total_cost, predictor_seconds, sim_seconds)
