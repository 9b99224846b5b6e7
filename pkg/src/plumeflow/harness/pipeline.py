"""Offline + online experiment pipeline.

Stages (each file-backed so the CLI subcommands can run them separately):

  generate   scenario manifests for the train / eval / knn corpora
  profile    candidate construction + execution records on the train corpus
  pareto     metrics aggregation and Pareto selection
  train-mlp  success-rate model from the records
  select     requirement derivation + MLP-ranked candidate selection
  build-knn  historical (CumDivNorm_final, Q_loss) database on small problems
  run-eval   baselines, constant-schedule runs, adaptive + no-MLP arms
  analyze    correlation study and comparison summaries

All persisted times come from the deterministic flops model (seconds_per_flop)
so rerunning with identical seeds reproduces every CSV byte for byte.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from ..errors import ArgumentError, StageError
from ..fluid import TRAJECTORY_HEADER, quality_loss, simulate, trajectory_rows, write_pgm
from ..forge import (
    ExecutionRecord,
    ProfilingConfig,
    SolverCandidate,
    attach_metrics,
    collect_records,
    default_seed_network,
    iterative_family,
    op_narrow,
    pareto_select,
)
from ..mlp import (
    MlpTrainConfig,
    RankedCandidate,
    UserRequirement,
    generate_samples,
    load_mlp,
    requirement_grid,
    save_mlp,
    select_candidates,
    train_mlp,
)
from ..nn import TrainConfig, load_network, save_network, train
from ..pcg import PcgConfig
from ..runtime import (
    KnnDatabase,
    RuntimeConfig,
    build_knn_database,
    run_adaptive,
)
from ..solvers import PcgPressureSolver
from .io import read_csv, write_csv
from .scenarios import ScenarioSpec, generate_scenario, make_problem

EXACT_ID = "pcg"


@dataclass
class ExperimentConfig:
    out_dir: str = "artifacts"
    # corpora
    eval_grid: int = 64
    train_grid: int = 32
    knn_grid: int = 32
    n_train: int = 24
    n_eval: int = 64
    n_knn: int = 128
    n_steps: int = 128
    dt: float = 0.1
    buoyancy: float = 1.0
    kappa: float = 3.0
    mode_count: int = 8
    amplitude: float = 2.0
    max_obstacles: int = 3
    source_rate: float = 0.5
    # disjoint seed ranges per corpus
    seed: int = 0
    train_seed_base: int = 10_000
    eval_seed_base: int = 20_000
    knn_seed_base: int = 30_000
    # candidates
    candidate_kind: str = "both"  # iterative | network | both
    iter_counts: tuple = (1, 2, 4, 8, 16, 32)
    nn_train_samples: int = 6
    nn_train_epochs: int = 10
    nn_learning_rate: float = 5e-4
    # requirement / selection
    req_q: float | None = None
    req_t: float | None = None
    time_slack: float = 10.0  # req_t default = slack * exact time
    # "train": q from the train-corpus records of the slowest Pareto
    # candidate. "calibrated": profile that candidate on a small disjoint
    # corpus at the evaluation grid (the scale the requirement applies to).
    req_scale: str = "train"
    n_calib: int = 8
    calib_seed_base: int = 40_000
    # runtime
    knn_k: int = 4
    check_interval: int = 5
    skip_initial: int = 5
    skip_in_interval: int = 2
    epsilon_rel: float = 0.05
    corr_candidates: int = 3
    corr_skip_steps: int = 5
    # cost model and solvers
    seconds_per_flop: float = 2e-10
    pcg_tol: float = 1e-5
    pcg_max_iters: int = 2000
    rho: float = 1.0
    threads: int = 1
    pgm_frames: int = 2

    def __post_init__(self):
        ranges = [
            ("train", self.train_seed_base, self.train_seed_base + self.n_train),
            ("eval", self.eval_seed_base, self.eval_seed_base + self.n_eval),
            ("knn", self.knn_seed_base, self.knn_seed_base + self.n_knn),
            ("calib", self.calib_seed_base, self.calib_seed_base + self.n_calib),
        ]
        for i, (name_a, lo_a, hi_a) in enumerate(ranges):
            for name_b, lo_b, hi_b in ranges[i + 1 :]:
                if lo_a < hi_b and lo_b < hi_a:
                    raise ArgumentError(
                        f"{name_a} and {name_b} corpus seed ranges overlap"
                    )
        if self.candidate_kind not in ("iterative", "network", "both"):
            raise ArgumentError(f"unknown candidate_kind {self.candidate_kind!r}")
        if self.req_scale not in ("train", "calibrated"):
            raise ArgumentError(f"unknown req_scale {self.req_scale!r}")
        if self.threads < 1:
            raise ArgumentError("threads must be >= 1")

    @property
    def pcg_config(self) -> PcgConfig:
        return PcgConfig(tol=self.pcg_tol, max_iters=self.pcg_max_iters)

    @property
    def runtime_config(self) -> RuntimeConfig:
        return RuntimeConfig(self.check_interval, self.skip_initial,
                             self.skip_in_interval, self.epsilon_rel)

    @property
    def profiling(self) -> ProfilingConfig:
        return ProfilingConfig(rho=self.rho, seconds_per_flop=self.seconds_per_flop,
                               pcg=self.pcg_config)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        doc = json.load(fh)
    if "iter_counts" in doc:
        doc["iter_counts"] = tuple(doc["iter_counts"])
    return ExperimentConfig(**doc)


def _pmap(fn, items, threads: int):
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# stage: generate


CORPORA = ("train", "eval", "knn")


def _corpus_params(cfg: ExperimentConfig, corpus: str):
    if corpus == "train":
        return cfg.train_seed_base, cfg.n_train, cfg.train_grid
    if corpus == "eval":
        return cfg.eval_seed_base, cfg.n_eval, cfg.eval_grid
    if corpus == "knn":
        return cfg.knn_seed_base, cfg.n_knn, cfg.knn_grid
    if corpus == "calib":
        return cfg.calib_seed_base, cfg.n_calib, cfg.eval_grid
    raise ArgumentError(f"unknown corpus {corpus!r}")


def corpus_scenarios(cfg: ExperimentConfig, corpus: str):
    base, count, grid = _corpus_params(cfg, corpus)
    spec = ScenarioSpec(nx=grid, ny=grid, mode_count=cfg.mode_count,
                        amplitude=cfg.amplitude, max_obstacles=cfg.max_obstacles,
                        source_rate=cfg.source_rate)
    return [generate_scenario(spec, base + i, f"{corpus}{i:03d}")
            for i in range(count)]


def corpus_problems(cfg: ExperimentConfig, corpus: str):
    return [make_problem(s, cfg.n_steps, cfg.dt, cfg.buoyancy, cfg.kappa)
            for s in corpus_scenarios(cfg, corpus)]


def stage_generate(cfg: ExperimentConfig) -> None:
    os.makedirs(cfg.out_dir, exist_ok=True)
    for corpus in CORPORA:
        rows = []
        for s in corpus_scenarios(cfg, corpus):
            rows.append([s.id, s.seed, s.dims.nx, s.dims.ny, len(s.obstacles),
                         s.mode_count, s.amplitude, s.source_rate])
        write_csv(cfg.path(f"scenarios_{corpus}.csv"),
                  ["id", "seed", "nx", "ny", "obstacles", "modes",
                   "amplitude", "source_rate"], rows)


# ---------------------------------------------------------------------------
# stage: profile


def _training_pairs(cfg: ExperimentConfig):
    """(pre-projection velocity, geometry) pairs for surrogate training,
    harvested from short exact-solver runs on the train corpus."""
    from ..fluid import add_body_force, advect, step

    pairs = []
    problems = corpus_problems(cfg, "train")[: cfg.nn_train_samples]
    for pid, state, sim_cfg in problems:
        short = replace(sim_cfg, n_steps=min(3, sim_cfg.n_steps))
        solver = PcgPressureSolver(sim_cfg.dt, cfg.rho, cfg.pcg_config)
        cur = state
        for _ in range(short.n_steps):
            density = advect(cur.density, cur.vel, short.dt, cur.geo)
            vel_a = advect(cur.vel, cur.vel, short.dt, cur.geo)
            vel_b = add_body_force(vel_a, density, cur.geo, short)
            pairs.append((vel_b, cur.geo))
            cur, _ = step(cur, solver, short)
    return pairs


def build_candidates(cfg: ExperimentConfig) -> list[SolverCandidate]:
    candidates: list[SolverCandidate] = []
    if cfg.candidate_kind in ("iterative", "both"):
        candidates.extend(iterative_family(cfg.iter_counts))
    if cfg.candidate_kind in ("network", "both"):
        pairs = _training_pairs(cfg)
        train_cfg = TrainConfig(epochs=cfg.nn_train_epochs, batch_size=2,
                                learning_rate=cfg.nn_learning_rate, seed=cfg.seed,
                                kappa=cfg.kappa, dt=cfg.dt, rho=cfg.rho)
        seed_net = default_seed_network(seed=cfg.seed)
        netA, _ = train(seed_net, pairs, train_cfg)
        rng = np.random.default_rng(cfg.seed + 1)
        narrow = op_narrow(seed_net, 2, 2, rng)
        netB, _ = train(narrow, pairs, train_cfg)
        candidates.append(SolverCandidate(id="netA", source="seed", net=netA,
                                          lineage=("trained-seed",)))
        candidates.append(SolverCandidate(id="netB", source="narrow", net=netB,
                                          lineage=("narrow[2:r2]", "trained")))
    return candidates


def _save_candidates(cfg: ExperimentConfig, candidates) -> None:
    os.makedirs(cfg.path("models"), exist_ok=True)
    rows = []
    for c in candidates:
        if c.net is not None:
            save_network(c.net, cfg.path(f"models/{c.id}.json"))
        rows.append([c.id, c.source, c.iters if c.iters is not None else "",
                     c.flops, "|".join(c.lineage)])
    write_csv(cfg.path("candidates.csv"),
              ["id", "source", "iters", "flops", "lineage"], rows)


def load_candidates(cfg: ExperimentConfig) -> list[SolverCandidate]:
    header, rows = read_csv(cfg.path("candidates.csv"))
    out = []
    for cid, source, iters, flops, lineage in rows:
        lineage_tuple = tuple(str(lineage).split("|")) if lineage else ()
        if iters == "":
            net = load_network(cfg.path(f"models/{cid}.json"))
            out.append(SolverCandidate(id=cid, source=source, net=net,
                                       flops=int(flops), lineage=lineage_tuple))
        else:
            out.append(SolverCandidate(id=cid, source=source, iters=int(iters),
                                       flops=int(flops), lineage=lineage_tuple))
    return out


RECORD_HEADER = ["candidate_id", "problem_id", "qloss", "time_s", "flops"]


def stage_profile(cfg: ExperimentConfig) -> None:
    candidates = build_candidates(cfg)
    _save_candidates(cfg, candidates)
    problems = corpus_problems(cfg, "train")
    records, baselines = collect_records(candidates, problems, cfg.profiling)

    # exact-solver rows carry the fallback cost used by the selection stage
    exact_rows = []
    for pid, initial, sim_cfg in problems:
        solver = PcgPressureSolver(sim_cfg.dt, cfg.rho, cfg.pcg_config)
        traj = simulate(initial, sim_cfg, solver, modeled_time=cfg.seconds_per_flop)
        cost = traj.total_cost
        exact_rows.append(ExecutionRecord(EXACT_ID, pid, 0.0,
                                          max(cost.wall_time, 1e-12), cost.flops))
    alles = sorted(records + exact_rows, key=lambda r: (r.candidate_id, r.problem_id))
    write_csv(cfg.path("records.csv"), RECORD_HEADER,
              [[r.candidate_id, r.problem_id, r.qloss, r.time, r.flops]
               for r in alles])


def load_records(cfg: ExperimentConfig):
    header, rows = read_csv(cfg.path("records.csv"))
    records = []
    for cid, pid, qloss, time_s, flops in rows:
        records.append(ExecutionRecord(str(cid), str(pid), float(qloss),
                                       float(time_s), int(flops)))
    return records


# ---------------------------------------------------------------------------
# stage: pareto


def stage_pareto(cfg: ExperimentConfig) -> None:
    candidates = load_candidates(cfg)
    records = [r for r in load_records(cfg) if r.candidate_id != EXACT_ID]
    with_metrics = attach_metrics(candidates, records)
    if not with_metrics:
        raise StageError("pareto", "no candidate produced finite records")
    frontier = pareto_select(with_metrics)
    rows = [[c.id, c.source, c.mean_qloss, c.mean_time, c.flops]
            for c in frontier]
    write_csv(cfg.path("pareto.csv"),
              ["id", "source", "mean_qloss", "mean_time", "flops"], rows)


def load_pareto(cfg: ExperimentConfig) -> list[SolverCandidate]:
    by_id = {c.id: c for c in load_candidates(cfg)}
    header, rows = read_csv(cfg.path("pareto.csv"))
    out = []
    for cid, source, mean_qloss, mean_time, flops in rows:
        base = by_id[str(cid)]
        out.append(replace(base, mean_qloss=float(mean_qloss),
                           mean_time=float(mean_time), flops=int(flops)))
    return out


# ---------------------------------------------------------------------------
# stage: train-mlp


def stage_mlp(cfg: ExperimentConfig) -> None:
    candidates = load_candidates(cfg)
    records = [r for r in load_records(cfg) if r.candidate_id != EXACT_ID]
    grid = requirement_grid(records)
    samples = generate_samples(records, candidates, grid)
    feature_header = [f"f{i:02d}" for i in range(48)] + ["label"]
    write_csv(cfg.path("samples.csv"), feature_header,
              [list(s.features) + [s.label] for s in samples])
    mlp, curve = train_mlp(samples, MlpTrainConfig(seed=cfg.seed))
    save_mlp(mlp, cfg.path("mlp_model.json"))
    write_csv(cfg.path("mlp_loss.csv"), ["epoch", "loss"],
              [[i, v] for i, v in enumerate(curve)])


# ---------------------------------------------------------------------------
# stage: select


def _calibrated_quality_bound(cfg: ExperimentConfig, slowest: SolverCandidate) -> float:
    """Mean final quality loss of the slowest frontier candidate on a small
    disjoint corpus at the evaluation grid (requirements apply at that scale)."""
    losses = []
    for pid, initial, sim_cfg in corpus_problems(cfg, "calib"):
        exact = PcgPressureSolver(sim_cfg.dt, cfg.rho, cfg.pcg_config)
        baseline = simulate(initial, sim_cfg, exact, modeled_time=cfg.seconds_per_flop)
        solver = slowest.solver(sim_cfg.dt, cfg.rho, cfg.pcg_config)
        traj = simulate(initial, sim_cfg, solver, modeled_time=cfg.seconds_per_flop)
        losses.append(quality_loss(traj.final.density, baseline.final.density))
    return float(np.mean(losses))


def derive_requirement(cfg: ExperimentConfig, frontier, records) -> tuple[UserRequirement, float]:
    exact_rows = [r for r in records if r.candidate_id == EXACT_ID]
    if not exact_rows:
        raise StageError("select", "records.csv carries no exact-solver rows")
    time_exact = float(np.mean([r.time for r in exact_rows]))
    if cfg.req_q is not None:
        q = cfg.req_q
    else:
        slowest = max(frontier, key=lambda c: c.mean_time)
        if cfg.req_scale == "calibrated":
            q = max(_calibrated_quality_bound(cfg, slowest), 1e-12)
        else:
            q = max(slowest.mean_qloss, 1e-12)
    t = cfg.req_t if cfg.req_t is not None else cfg.time_slack * time_exact
    return UserRequirement(q, t), time_exact


def stage_select(cfg: ExperimentConfig) -> None:
    frontier = load_pareto(cfg)
    records = load_records(cfg)
    req, time_exact = derive_requirement(cfg, frontier, records)
    mlp = load_mlp(cfg.path("mlp_model.json"))
    selected = select_candidates(mlp, frontier, req, time_exact)
    write_csv(cfg.path("requirement.csv"),
              ["q", "t", "time_exact"], [[req.q, req.t, time_exact]])
    write_csv(cfg.path("selected.csv"), ["id", "r_hat"],
              [[rc.id, rc.r_hat] for rc in selected])


def load_requirement(cfg: ExperimentConfig) -> tuple[UserRequirement, float]:
    header, rows = read_csv(cfg.path("requirement.csv"))
    q, t, time_exact = rows[0]
    return UserRequirement(float(q), float(t)), float(time_exact)


def load_selected(cfg: ExperimentConfig) -> list[RankedCandidate]:
    by_id = {c.id: c for c in load_pareto(cfg)}
    header, rows = read_csv(cfg.path("selected.csv"))
    return [RankedCandidate(by_id[str(cid)], float(r_hat)) for cid, r_hat in rows]


# ---------------------------------------------------------------------------
# stage: build-knn


def stage_knn(cfg: ExperimentConfig) -> None:
    selected = load_selected(cfg)
    problems = corpus_problems_for_knn(cfg)
    pool = selected if selected else []
    if not pool:
        write_csv(cfg.path("knn_db.csv"), ["cum_divnorm_final", "qloss"], [])
        return
    db, failures = build_knn_database(pool, problems, k=cfg.knn_k, rho=cfg.rho,
                                      pcg_cfg=cfg.pcg_config,
                                      seconds_per_flop=cfg.seconds_per_flop)
    write_csv(cfg.path("knn_db.csv"), ["cum_divnorm_final", "qloss"],
              [[k, v] for k, v in db.in_order()])


def corpus_problems_for_knn(cfg: ExperimentConfig):
    return corpus_problems(cfg, "knn")


def load_knn(cfg: ExperimentConfig) -> KnnDatabase | None:
    header, rows = read_csv(cfg.path("knn_db.csv"))
    if not rows:
        return None
    return KnnDatabase([(float(k), float(v)) for k, v in rows], k=cfg.knn_k)


# ---------------------------------------------------------------------------
# stage: run-eval


EVAL_HEADER = ["arm", "problem_id", "final_qloss", "time_s", "flops",
               "restarted", "success_q", "success_qt"]
CORR_HEADER = ["candidate_id", "problem_id", "step", "cum_divnorm", "qloss_ts"]
INTERVALS_HEADER = ["arm", "problem_id", "interval_index", "model_id",
                    "cum_divnorm", "predicted_final", "predicted_qloss", "decision"]
USAGE_HEADER = ["arm", "problem_id", "model_id", "steps"]
OVERHEAD_HEADER = ["problem_id", "predictor_seconds", "simulation_seconds"]


def _write_adaptive_report(path, pid, req, report) -> None:
    doc = {
        "problem_id": pid,
        "requirement": {"q": req.q, "t": req.t},
        "restarted": report.restarted,
        "final_qloss": report.final_qloss,
        "modeled_time_s": report.total_cost.wall_time,
        "flops": report.total_cost.flops,
        "intervals": [
            {
                "interval_index": r.interval_index,
                "step": r.step,
                "model_id": r.model_id,
                "cum_divnorm": r.cum_divnorm,
                "predicted_final": r.predicted_final,
                "predicted_qloss": r.predicted_qloss,
                "decision": r.decision,
                "target_id": r.target_id,
            }
            for r in report.intervals
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def _corr_candidate_set(cfg: ExperimentConfig, frontier) -> list[SolverCandidate]:
    ordered = sorted(frontier, key=lambda c: (c.mean_time, c.id))
    return ordered[: max(1, cfg.corr_candidates)]


def _no_mlp_selection(cfg: ExperimentConfig, frontier) -> list[RankedCandidate]:
    """The no-MLP arm: every frontier candidate in a random (seeded) order."""
    rng = np.random.default_rng(cfg.seed + 777)
    order = rng.permutation(len(frontier))
    return [RankedCandidate(frontier[int(i)], 0.9 - 0.01 * pos)
            for pos, i in enumerate(order)]


def stage_eval(cfg: ExperimentConfig) -> None:
    frontier = load_pareto(cfg)
    selected = load_selected(cfg)
    req, time_exact = load_requirement(cfg)
    db = load_knn(cfg)
    corr_cands = _corr_candidate_set(cfg, frontier)
    nomlp = _no_mlp_selection(cfg, frontier)
    problems = corpus_problems(cfg, "eval")
    frames_dir = cfg.path("frames")
    os.makedirs(frames_dir, exist_ok=True)

    def run_one(item):
        index, (pid, initial, sim_cfg) = item
        exact = PcgPressureSolver(sim_cfg.dt, cfg.rho, cfg.pcg_config)
        baseline = simulate(initial, sim_cfg, exact, modeled_time=cfg.seconds_per_flop)
        base_final = baseline.final.density
        eval_rows = []
        corr_rows = []
        interval_rows_ = []
        usage_rows = []
        cost = baseline.total_cost
        eval_rows.append([EXACT_ID, pid, 0.0, cost.wall_time, cost.flops,
                          False, True, cost.wall_time <= req.t])

        for cand in corr_cands:
            solver = cand.solver(sim_cfg.dt, cfg.rho, cfg.pcg_config)
            traj = simulate(initial, sim_cfg, solver, modeled_time=cfg.seconds_per_flop)
            cum = 0.0
            for n, dn in enumerate(traj.div_norms, start=1):
                cum += dn
                if n <= cfg.corr_skip_steps:
                    continue
                q_ts = quality_loss(traj.states[n].density, baseline.states[n].density)
                corr_rows.append([cand.id, pid, n, cum, q_ts])
            fq = quality_loss(traj.final.density, base_final)
            cost = traj.total_cost
            eval_rows.append([f"single:{cand.id}", pid, fq, cost.wall_time,
                              cost.flops, False, fq <= req.q,
                              fq <= req.q and cost.wall_time <= req.t])

        arms = [("adaptive", selected), ("adaptive_nomlp", nomlp)]
        overhead_row = None
        adaptive_final = None
        adaptive_report = None
        for arm, sel in arms:
            report = run_adaptive(initial, sel, req, db, sim_cfg,
                                  cfg.runtime_config, rho=cfg.rho,
                                  pcg_cfg=cfg.pcg_config,
                                  baseline_density=base_final,
                                  seconds_per_flop=cfg.seconds_per_flop,
                                  restart_trajectory=baseline)
            fq = report.final_qloss if report.final_qloss is not None else 0.0
            cost = report.total_cost
            eval_rows.append([arm, pid, fq, cost.wall_time, cost.flops,
                              report.restarted, fq <= req.q,
                              fq <= req.q and cost.wall_time <= req.t])
            for rec in report.intervals:
                interval_rows_.append([arm, pid, rec.interval_index, rec.model_id,
                                       rec.cum_divnorm, rec.predicted_final,
                                       rec.predicted_qloss, rec.decision])
            counts: dict[str, int] = {}
            for sid in report.trajectory.solver_ids:
                counts[sid] = counts.get(sid, 0) + 1
            for sid in sorted(counts):
                usage_rows.append([arm, pid, sid, counts[sid]])
            if arm == "adaptive":
                overhead_row = [pid, report.predictor_seconds,
                                report.simulation_seconds]
                adaptive_final = report.trajectory.final.density
                adaptive_report = report
        if index < cfg.pgm_frames:
            write_pgm(os.path.join(frames_dir, f"{pid}_baseline.pgm"), base_final)
            write_csv(os.path.join(frames_dir, f"{pid}_baseline_trajectory.csv"),
                      TRAJECTORY_HEADER, trajectory_rows(baseline))
            if adaptive_final is not None:
                write_pgm(os.path.join(frames_dir, f"{pid}_adaptive.pgm"),
                          adaptive_final)
            if adaptive_report is not None:
                _write_adaptive_report(
                    os.path.join(frames_dir, f"{pid}_adaptive_report.json"),
                    pid, req, adaptive_report)
        return eval_rows, corr_rows, interval_rows_, usage_rows, overhead_row

    results = _pmap(run_one, list(enumerate(problems)), cfg.threads)
    eval_rows, corr_rows, interval_rows_, usage_rows, overhead_rows = [], [], [], [], []
    for er, cr, ir, ur, orow in results:
        eval_rows += er
        corr_rows += cr
        interval_rows_ += ir
        usage_rows += ur
        if orow is not None:
            overhead_rows.append(orow)
    eval_rows.sort(key=lambda r: (r[0], r[1]))
    corr_rows.sort(key=lambda r: (r[0], r[1], r[2]))
    interval_rows_.sort(key=lambda r: (r[0], r[1], r[2]))
    usage_rows.sort(key=lambda r: (r[0], r[1], r[2]))
    overhead_rows.sort(key=lambda r: r[0])
    write_csv(cfg.path("eval_records.csv"), EVAL_HEADER, eval_rows)
    write_csv(cfg.path("corr_points.csv"), CORR_HEADER, corr_rows)
    write_csv(cfg.path("adaptive_intervals.csv"), INTERVALS_HEADER, interval_rows_)
    write_csv(cfg.path("model_usage.csv"), USAGE_HEADER, usage_rows)
    # measured wall clock: a diagnostic log, not a reproducible artifact
    with open(cfg.path("overhead.log"), "w") as fh:
        fh.write(" ".join(OVERHEAD_HEADER) + "\n")
        for pid, pred, sim in overhead_rows:
            fh.write(f"{pid} {pred!r} {sim!r}\n")


# ---------------------------------------------------------------------------
# stage: analyze (correlation + comparison)


def stage_correlate(cfg: ExperimentConfig) -> None:
    from .stats import analyze_correlation

    header, rows = read_csv(cfg.path("corr_points.csv"))
    points = [(float(r[3]), float(r[4])) for r in rows]
    rp, rs, band_p, band_s = analyze_correlation(points)
    write_csv(cfg.path("correlation.csv"),
              ["metric", "value", "band"],
              [["pearson", rp, band_p], ["spearman", rs, band_s],
               ["points", float(len(points)), ""]])


def stage_compare(cfg: ExperimentConfig) -> None:
    header, rows = read_csv(cfg.path("eval_records.csv"))
    by_arm: dict[str, list[list]] = {}
    for row in rows:
        by_arm.setdefault(str(row[0]), []).append(row)
    comparison = []
    boxplot = []
    for arm in sorted(by_arm):
        entries = by_arm[arm]
        qlosses = np.array([float(r[2]) for r in entries])
        success_q = np.mean([bool(r[6]) for r in entries])
        success_qt = np.mean([bool(r[7]) for r in entries])
        mean_time = float(np.mean([float(r[3]) for r in entries]))
        restarts = sum(bool(r[5]) for r in entries)
        comparison.append([arm, float(success_q), float(success_qt),
                           float(qlosses.mean()), float(qlosses.var()),
                           mean_time, restarts, len(entries)])
        q1, q2, q3 = (float(v) for v in np.percentile(qlosses, [25, 50, 75]))
        boxplot.append([arm, float(qlosses.min()), q1, q2, q3,
                        float(qlosses.max())])
    write_csv(cfg.path("comparison.csv"),
              ["arm", "success_rate_q", "success_rate_qt", "mean_qloss",
               "var_qloss", "mean_time_s", "restarts", "runs"], comparison)
    write_csv(cfg.path("boxplot.csv"),
              ["arm", "min", "q1", "median", "q3", "max"], boxplot)

    header, usage = read_csv(cfg.path("model_usage.csv"))
    totals: dict[tuple[str, str], int] = {}
    arm_totals: dict[str, int] = {}
    for arm, pid, mid, steps in usage:
        totals[(str(arm), str(mid))] = totals.get((str(arm), str(mid)), 0) + int(steps)
        arm_totals[str(arm)] = arm_totals.get(str(arm), 0) + int(steps)
    dist_rows = [[arm, mid, steps, steps / arm_totals[arm]]
                 for (arm, mid), steps in sorted(totals.items())]
    write_csv(cfg.path("time_distribution.csv"),
              ["arm", "model_id", "steps", "share"], dist_rows)


# ---------------------------------------------------------------------------
# orchestration


STAGES = [
    ("generate", stage_generate),
    ("profile", stage_profile),
    ("pareto", stage_pareto),
    ("train-mlp", stage_mlp),
    ("select", stage_select),
    ("build-knn", stage_knn),
    ("run-eval", stage_eval),
    ("analyze-corr", stage_correlate),
    ("compare", stage_compare),
]

STAGE_BY_NAME = dict(STAGES)


def write_manifest(cfg: ExperimentConfig, complete: bool, failed_stage: str | None = None,
                   error: str | None = None) -> None:
    artifacts = sorted(
        os.path.relpath(os.path.join(root, f), cfg.out_dir)
        for root, _, files in os.walk(cfg.out_dir)
        for f in files
        if f != "MANIFEST.json"
    )
    doc = {
        "complete": complete,
        "failed_stage": failed_stage,
        "error": error,
        "config": asdict(cfg),
        "artifacts": artifacts,
    }
    doc["config"]["iter_counts"] = list(cfg.iter_counts)
    with open(cfg.path("MANIFEST.json"), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def run_pipeline(cfg: ExperimentConfig) -> str:
    """All stages in order; on failure, keep partial outputs and mark the
    manifest incomplete before re-raising."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    for name, fn in STAGES:
        try:
            fn(cfg)
        except Exception as exc:
            write_manifest(cfg, complete=False, failed_stage=name, error=str(exc))
            if isinstance(exc, StageError):
                raise
            raise StageError(name, str(exc)) from exc
    write_manifest(cfg, complete=True)
    return cfg.out_dir


def sweep_check_interval(cfg: ExperimentConfig, intervals) -> list[list]:
    """Success rate and mean modeled time of the adaptive arm per check
    interval; one row per L. Requires the offline artifacts."""
    for L in intervals:
        if L < 3:
            raise ArgumentError(f"check interval must be >= 3, got {L}")
    selected = load_selected(cfg)
    req, _ = load_requirement(cfg)
    db = load_knn(cfg)
    problems = corpus_problems(cfg, "eval")
    rows = []
    for L in intervals:
        rtcfg = RuntimeConfig(L, cfg.skip_initial, cfg.skip_in_interval,
                              cfg.epsilon_rel)

        def run_one(problem):
            pid, initial, sim_cfg = problem
            exact = PcgPressureSolver(sim_cfg.dt, cfg.rho, cfg.pcg_config)
            baseline = simulate(initial, sim_cfg, exact,
                                modeled_time=cfg.seconds_per_flop)
            report = run_adaptive(initial, selected, req, db, sim_cfg, rtcfg,
                                  rho=cfg.rho, pcg_cfg=cfg.pcg_config,
                                  baseline_density=baseline.final.density,
                                  seconds_per_flop=cfg.seconds_per_flop,
                                  restart_trajectory=baseline)
            fq = report.final_qloss if report.final_qloss is not None else 0.0
            return fq <= req.q, report.total_cost.wall_time

        results = _pmap(run_one, problems, cfg.threads)
        success = float(np.mean([ok for ok, _ in results]))
        mean_time = float(np.mean([t for _, t in results]))
        rows.append([L, success, mean_time])
    write_csv(cfg.path("sweep_interval.csv"),
              ["check_interval", "success_rate", "mean_time_s"], rows)
    return rows
