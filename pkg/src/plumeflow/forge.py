"""Candidate-family construction: structural network transforms, profiling
records, and Pareto selection.

The family schedule from one seed network: 5 accurate variants, 5 one-layer
deletions, 10 narrowings per deletion (50), one pool/unpool insertion on each
of those 55, and channel-dropout thinning on 18 of the 110 transformed nets;
133 candidates total. A parallel truncated-PCG family (``iterative_family``)
exercises the downstream pipeline without any network training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ArgumentError, GraphError, TransformError
from .fluid import quality_loss, simulate
from .grid import GeometryField, MacVelocityField
from .nn import CONV, MAXPOOL, AVGPOOL, UNPOOL, LayerSpec, NetworkGraph, conv, relu, \
    count_flops, init_network, validate_network
from .pcg import PcgConfig
from .solvers import NetworkPressureSolver, PcgPressureSolver, truncated_pcg_solver

REFERENCE_DIMS = (32, 32)  # neuron budgets are counted at this resolution
POOL_BUDGET_FRACTION = 0.10
DROPOUT_BUDGET_FRACTION = 0.10


@dataclass
class SolverCandidate:
    id: str
    source: str  # seed/accurate/shallow/narrow/pool/dropout/iterative
    net: NetworkGraph | None = None
    iters: int | None = None
    mean_qloss: float | None = None
    mean_time: float | None = None
    flops: int = 0
    lineage: tuple[str, ...] = ()

    def __post_init__(self):
        if (self.net is None) == (self.iters is None):
            raise ArgumentError("candidate needs exactly one of net/iters")
        if self.mean_qloss is not None and self.mean_qloss < 0:
            raise ArgumentError("mean_qloss must be >= 0")
        if self.mean_time is not None and not self.mean_time > 0:
            raise ArgumentError("mean_time must be > 0")

    def solver(self, dt: float, rho: float = 1.0, pcg_cfg: PcgConfig | None = None):
        if self.net is not None:
            return NetworkPressureSolver(self.net, self.id)
        return truncated_pcg_solver(self.iters, dt, rho)


@dataclass(frozen=True)
class ExecutionRecord:
    candidate_id: str
    problem_id: str
    qloss: float
    time: float
    flops: int = 0

    def __post_init__(self):
        if self.qloss < 0:
            raise ArgumentError("qloss must be >= 0")
        if not self.time > 0:
            raise ArgumentError("time must be > 0")


# ---------------------------------------------------------------------------
# structural transforms


def _remap_weights(weights, index_map):
    return {index_map[k]: (w.copy(), b.copy()) for k, (w, b) in weights.items()
            if k in index_map}


def _remap_residuals(layers, index_map, context):
    out = []
    for pos, layer in enumerate(layers):
        if layer.residual_from is not None:
            if layer.residual_from not in index_map:
                raise TransformError(
                    f"{context}: residual source layer {layer.residual_from} removed"
                )
            layer = replace(layer, residual_from=index_map[layer.residual_from])
        out.append(layer)
    return out


def _validated(layers, weights, in_channels, context) -> NetworkGraph:
    net = NetworkGraph(layers, weights, in_channels)
    try:
        validate_network(net, REFERENCE_DIMS)
    except GraphError as exc:
        raise TransformError(f"{context}: result invalid ({exc})") from exc
    return net


def _channels_into(net: NetworkGraph, layer_index: int) -> int:
    c = net.in_channels
    for layer in net.layers[:layer_index]:
        if layer.kind == CONV:
            c = layer.channels_out
    return c


def _next_conv(net: NetworkGraph, after: int) -> int | None:
    for idx in range(after + 1, len(net.layers)):
        if net.layers[idx].kind == CONV:
            return idx
    return None


def op_shallow(net: NetworkGraph, layer_index: int) -> NetworkGraph:
    """Delete one intermediate layer; a 1x1 adapter conv is inserted when the
    deletion breaks the channel chain."""
    if not 0 < layer_index < len(net.layers) - 1:
        raise TransformError(f"layer {layer_index} is not deletable (input/output adapter)")
    target = net.layers[layer_index]

    adapter = None
    if target.kind == CONV:
        c_in = _channels_into(net, layer_index)
        c_out = target.channels_out
        if c_in != c_out:
            kern = np.zeros((c_out, c_in, 1, 1))
            for c in range(min(c_in, c_out)):
                kern[c, c, 0, 0] = 1.0
            adapter = (LayerSpec(CONV, kernel=1, channels_out=c_out), kern, np.zeros(c_out))

    index_map = {}
    for old in range(len(net.layers)):
        if old == layer_index:
            continue
        if old < layer_index:
            index_map[old] = old
        else:
            # the -1 shift from the deletion cancels against the adapter slot
            index_map[old] = old if adapter is not None else old - 1

    layers = [l for i, l in enumerate(net.layers) if i != layer_index]
    weights = _remap_weights(net.weights, index_map)
    if adapter is not None:
        spec, kern, bias = adapter
        layers.insert(layer_index, spec)
        weights[layer_index] = (kern, bias)
    layers = _remap_residuals(layers, index_map, "shallow")
    return _validated(layers, weights, net.in_channels, "shallow")


def _remove_channels(net: NetworkGraph, layer_index: int, drop: np.ndarray,
                     context: str) -> NetworkGraph:
    layer = net.layers[layer_index]
    keep = np.array([c for c in range(layer.channels_out) if c not in set(drop.tolist())])
    layers = list(net.layers)
    layers[layer_index] = replace(layer, channels_out=len(keep))
    weights = {k: (w.copy(), b.copy()) for k, (w, b) in net.weights.items()}
    kern, bias = weights[layer_index]
    weights[layer_index] = (kern[keep], bias[keep])
    nxt = _next_conv(net, layer_index)
    if nxt is not None:
        nk, nb = weights[nxt]
        weights[nxt] = (nk[:, keep], nb)
    return _validated(layers, weights, net.in_channels, context)


def op_narrow(net: NetworkGraph, layer_index: int, r: int,
              rng: np.random.Generator) -> NetworkGraph:
    """Remove r output channels (chosen uniformly) from a conv layer and
    slice the downstream kernels to match."""
    if r < 1:
        raise TransformError(f"narrow needs r >= 1, got {r}")
    if not 0 <= layer_index < len(net.layers):
        raise TransformError(f"no layer {layer_index}")
    layer = net.layers[layer_index]
    if layer.kind != CONV:
        raise TransformError(f"layer {layer_index} is {layer.kind}, narrow needs conv")
    if layer.channels_out <= r:
        raise TransformError(
            f"cannot remove {r} of {layer.channels_out} channels at layer {layer_index}"
        )
    drop = np.sort(rng.choice(layer.channels_out, size=r, replace=False))
    return _remove_channels(net, layer_index, drop, "narrow")


def _activation_counts(net: NetworkGraph, dims=REFERENCE_DIMS) -> list[int]:
    from .nn import shape_chain

    return [c * h * w for (c, h, w) in shape_chain(net, dims)]


def op_pooling(net: NetworkGraph, layer_index: int, factor: int,
               rng: np.random.Generator, strategy: str = "max") -> NetworkGraph:
    """Downsample one layer: insert a pool before layer_index and the matching
    unpool right after it, so that layer runs at reduced resolution. The
    pooled-away activation count (the layer's input at the 32x32 reference)
    must stay within 10% of the network total."""
    if not 0 <= layer_index < len(net.layers):
        raise TransformError(f"no layer {layer_index}")
    if factor < 2:
        raise TransformError(f"pool factor must be >= 2, got {factor}")
    acts = _activation_counts(net)
    total = sum(acts)
    nx, ny = REFERENCE_DIMS
    input_acts = acts[layer_index - 1] if layer_index > 0 else net.in_channels * nx * ny
    discarded = input_acts * (1.0 - 1.0 / factor**2)
    budget = POOL_BUDGET_FRACTION * total
    if discarded > budget + 1e-9:
        raise TransformError(
            f"pooling layer {layer_index} discards {discarded:.0f} activations, "
            f"budget is {budget:.0f} (10% of total {total})"
        )
    kind = MAXPOOL if strategy == "max" else AVGPOOL
    pool_layer = LayerSpec(kind, pool=factor)
    unpool_layer = LayerSpec(UNPOOL, pool=factor)

    def new_index(old: int) -> int:
        if old < layer_index:
            return old
        if old == layer_index:
            return old + 1
        return old + 2

    index_map = {old: new_index(old) for old in range(len(net.layers))}
    layers = (net.layers[:layer_index] + [pool_layer] + [net.layers[layer_index]]
              + [unpool_layer] + net.layers[layer_index + 1 :])
    weights = _remap_weights(net.weights, index_map)
    layers = _remap_residuals(layers, index_map, "pooling")
    result = _validated(layers, weights, net.in_channels, "pooling")
    before = count_flops(net, REFERENCE_DIMS)
    after = count_flops(result, REFERENCE_DIMS)
    if after > before:
        raise TransformError(
            f"pooling layer {layer_index} saves no work: {after} flops "
            f"after vs {before} before (pool/unpool overhead dominates)"
        )
    return result


def op_dropout(net: NetworkGraph, layer_index: int, p: float,
               rng: np.random.Generator) -> NetworkGraph:
    """Permanently thin a p-fraction of a conv layer's channels. The dropped
    activation count must stay within 10% of the network total."""
    if not 0 < p < 1:
        raise TransformError(f"dropout needs 0 < p < 1, got {p}")
    if not 0 <= layer_index < len(net.layers):
        raise TransformError(f"no layer {layer_index}")
    layer = net.layers[layer_index]
    if layer.kind != CONV:
        raise TransformError(f"layer {layer_index} is {layer.kind}, dropout needs conv")
    k = max(1, round(p * layer.channels_out))
    if k >= layer.channels_out:
        raise TransformError(
            f"dropping {k} of {layer.channels_out} channels would empty layer {layer_index}"
        )
    acts = _activation_counts(net)
    total = sum(acts)
    per_channel = acts[layer_index] // layer.channels_out
    dropped = k * per_channel
    budget = DROPOUT_BUDGET_FRACTION * total
    if dropped > budget + 1e-9:
        raise TransformError(
            f"dropout at layer {layer_index} drops {dropped} activations, "
            f"budget is {budget:.0f} (10% of {total})"
        )
    drop = np.sort(rng.choice(layer.channels_out, size=k, replace=False))
    return _remove_channels(net, layer_index, drop, "dropout")


# ---------------------------------------------------------------------------
# family generation


def default_seed_network(seed: int = 0) -> NetworkGraph:
    """Compact conv/relu stack mapping (divergence, occupancy) -> pressure.
    The thin 4-channel stage keeps factor-2 pooling inside the 10% budget."""
    return init_network(
        [conv(8), relu(), conv(12), relu(), conv(4), relu(), conv(1)],
        in_channels=2,
        seed=seed,
    )


def check_shallow_policy(lineage: tuple[str, ...]) -> None:
    """Pipeline policy: at most one deleted layer per candidate."""
    if any(step.startswith("shallow") for step in lineage):
        raise TransformError("pipeline policy allows at most one layer deletion")


def _accurate_variants(seed_net: NetworkGraph, rng: np.random.Generator) -> list[NetworkGraph]:
    """Five slower-but-richer stand-ins for an architecture-search stage:
    widened channels and one extra conv/relu stage, freshly initialized."""
    variants = []
    conv_positions = [i for i, l in enumerate(seed_net.layers) if l.kind == CONV]
    interior = conv_positions[:-1]
    widen_steps = [2, 4, 6]
    for extra in widen_steps:
        layers = []
        for i, l in enumerate(seed_net.layers):
            if l.kind == CONV and i in interior:
                layers.append(replace(l, channels_out=l.channels_out + extra))
            else:
                layers.append(l)
        variants.append(layers)
    # one deeper variant: add a conv/relu stage before the output conv
    deeper = list(seed_net.layers)
    out_pos = conv_positions[-1]
    pre_channels = _channels_into(seed_net, out_pos)
    deeper = deeper[:out_pos] + [conv(pre_channels), relu()] + deeper[out_pos:]
    if len(deeper) <= 9:
        variants.append(deeper)
    # one wider-kernel variant
    wider_kernel = []
    for i, l in enumerate(seed_net.layers):
        if l.kind == CONV and i == conv_positions[0]:
            wider_kernel.append(replace(l, kernel=5))
        else:
            wider_kernel.append(l)
    variants.append(wider_kernel)
    while len(variants) < 5:
        extra = 8 + 2 * len(variants)
        layers = []
        for i, l in enumerate(seed_net.layers):
            if l.kind == CONV and i in interior:
                layers.append(replace(l, channels_out=l.channels_out + extra))
            else:
                layers.append(l)
        variants.append(layers)
    nets = []
    for layers in variants[:5]:
        nets.append(init_network(layers, seed_net.in_channels,
                                 seed=int(rng.integers(0, 2**31 - 1))))
    return nets


def _conv_layers(net: NetworkGraph, exclude_last: bool = True) -> list[int]:
    idxs = [i for i, l in enumerate(net.layers) if l.kind == CONV]
    return idxs[:-1] if exclude_last and idxs else idxs


def _valid_pool_placements(net: NetworkGraph, factor: int) -> list[int]:
    """Conv layers that can be downsampled within budget with a strict flop
    saving (probed by applying the op)."""
    base_flops = count_flops(net, REFERENCE_DIMS)
    probe_rng = np.random.default_rng(0)  # op_pooling draws nothing from it
    placements = []
    for idx in _conv_layers(net, exclude_last=False):
        try:
            trial = op_pooling(net, idx, factor, probe_rng)
        except TransformError:
            continue
        if count_flops(trial, REFERENCE_DIMS) < base_flops:
            placements.append(idx)
    return placements


def generate_family(seed_net: NetworkGraph, rng: np.random.Generator,
                    pool_factor: int = 2, pool_strategy: str = "max"
                    ) -> list[SolverCandidate]:
    """The fixed generation schedule; exactly 133 candidates, deterministic
    per (seed net, rng state). Any transform failure aborts with the failing
    step identified."""
    validate_network(seed_net, REFERENCE_DIMS)
    candidates: list[SolverCandidate] = []

    def add(source, net, lineage):
        cid = f"nn{len(candidates) + 1:03d}"
        candidates.append(SolverCandidate(
            id=cid, source=source, net=net,
            flops=count_flops(net, REFERENCE_DIMS), lineage=lineage,
        ))

    try:
        for k, net in enumerate(_accurate_variants(seed_net, rng), start=1):
            add("accurate", net, (f"accurate[{k}]",))
    except (TransformError, GraphError) as exc:
        raise TransformError(f"accurate stage failed: {exc}") from exc

    deletable = [i for i in range(1, len(seed_net.layers) - 1)]
    if len(deletable) < 5:
        raise TransformError(f"shallow stage needs 5 intermediate layers, "
                             f"seed has {len(deletable)}")
    if len(deletable) > 5:
        pick = sorted(rng.choice(len(deletable), size=5, replace=False).tolist())
        deletable = [deletable[i] for i in pick]
    shallow_models: list[SolverCandidate] = []
    for layer_index in deletable:
        try:
            net = op_shallow(seed_net, layer_index)
        except TransformError as exc:
            raise TransformError(f"shallow stage failed at layer {layer_index}: {exc}") from exc
        add("shallow", net, (f"shallow[{layer_index}]",))
        shallow_models.append(candidates[-1])

    narrow_models: list[SolverCandidate] = []
    for parent in shallow_models:
        convs = _conv_layers(parent.net)
        for n in range(10):
            for _attempt in range(20):
                layer_index = int(convs[rng.integers(0, len(convs))])
                channels = parent.net.layers[layer_index].channels_out
                r = max(1, math.ceil(channels / 10))
                try:
                    net = op_narrow(parent.net, layer_index, r, rng)
                    break
                except TransformError:
                    continue
            else:
                raise TransformError(f"narrow stage failed on {parent.id}")
            add("narrow", net, parent.lineage + (f"narrow[{layer_index}:r{r}]",))
            narrow_models.append(candidates[-1])

    pool_models: list[SolverCandidate] = []
    for parent in shallow_models + narrow_models:
        placements = _valid_pool_placements(parent.net, pool_factor)
        if not placements:
            raise TransformError(f"pooling stage: no valid placement on {parent.id}")
        layer_index = int(placements[rng.integers(0, len(placements))])
        net = op_pooling(parent.net, layer_index, pool_factor, rng, pool_strategy)
        add("pool", net, parent.lineage + (f"pool[{layer_index}:f{pool_factor}]",))
        pool_models.append(candidates[-1])

    transformed = shallow_models + narrow_models + pool_models  # the 110
    chosen = sorted(rng.choice(len(transformed), size=18, replace=False).tolist())
    for pick in chosen:
        parent = transformed[pick]
        acts = _activation_counts(parent.net)
        total = sum(acts)
        target = DROPOUT_BUDGET_FRACTION * total
        options = []
        for idx in _conv_layers(parent.net):
            channels = parent.net.layers[idx].channels_out
            if channels < 2:
                continue
            per_channel = acts[idx] // channels
            k = min(channels - 1, max(1, int(target // per_channel)))
            if k * per_channel <= target + 1e-9:
                options.append((idx, k, channels))
        if not options:
            raise TransformError(f"dropout stage: no fitting layer on {parent.id}")
        idx, k, channels = options[int(rng.integers(0, len(options)))]
        p = k / channels
        net = op_dropout(parent.net, idx, p, rng)
        add("dropout", net, parent.lineage + (f"dropout[{idx}:p{p:.3f}]",))

    assert len(candidates) == 133
    return candidates


def iterative_family(iteration_counts=(1, 2, 4, 8, 16, 32)) -> list[SolverCandidate]:
    """Truncated-PCG surrogates; a declared substitute for network candidates
    so the records/Pareto/MLP/runtime pipeline runs without training."""
    return [
        SolverCandidate(id=f"iter{m}", source="iterative", iters=m)
        for m in iteration_counts
    ]


# ---------------------------------------------------------------------------
# profiling and selection


@dataclass
class ProfilingConfig:
    rho: float = 1.0
    seconds_per_flop: float = 2e-10  # deterministic time model for artifacts
    pcg: PcgConfig = field(default_factory=PcgConfig)


def collect_records(candidates, problems, cfg: ProfilingConfig | None = None,
                    baselines: dict | None = None):
    """Run every candidate as a constant schedule over every problem.

    problems: sequence of (problem_id, SimState, SimConfig). Returns records
    sorted by (candidate_id, problem_id) plus the baseline final-density cache
    {problem_id: ScalarField}. Failures become qloss = inf sentinel rows.
    """
    if cfg is None:
        cfg = ProfilingConfig()
    if baselines is None:
        baselines = {}
    records: list[ExecutionRecord] = []
    for problem_id, initial, sim_cfg in problems:
        if problem_id not in baselines:
            exact = PcgPressureSolver(sim_cfg.dt, cfg.rho, cfg.pcg)
            traj = simulate(initial, sim_cfg, exact, modeled_time=cfg.seconds_per_flop)
            baselines[problem_id] = traj.final.density
        base_density = baselines[problem_id]
        for cand in candidates:
            solver = cand.solver(sim_cfg.dt, cfg.rho, cfg.pcg)
            try:
                traj = simulate(initial, sim_cfg, solver, modeled_time=cfg.seconds_per_flop)
                qloss = quality_loss(traj.final.density, base_density)
                cost = traj.total_cost
                records.append(ExecutionRecord(cand.id, problem_id, qloss,
                                               max(cost.wall_time, 1e-12), cost.flops))
            except Exception:
                records.append(ExecutionRecord(cand.id, problem_id, float("inf"),
                                               1e-12, 0))
    records.sort(key=lambda r: (r.candidate_id, r.problem_id))
    return records, baselines


def attach_metrics(candidates, records) -> list[SolverCandidate]:
    """Fill mean_qloss / mean_time from execution records (inf rows ignored
    for the mean but counted as failures)."""
    by_cand: dict[str, list[ExecutionRecord]] = {}
    for r in records:
        by_cand.setdefault(r.candidate_id, []).append(r)
    out = []
    for cand in candidates:
        rows = by_cand.get(cand.id, [])
        finite = [r for r in rows if math.isfinite(r.qloss)]
        if not finite:
            continue
        out.append(replace(
            cand,
            mean_qloss=float(np.mean([r.qloss for r in finite])),
            mean_time=float(np.mean([r.time for r in finite])),
            flops=cand.flops or int(np.mean([r.flops for r in finite])),
        ))
    return out


def attach_probe_metrics(candidates, vel: MacVelocityField, geo: GeometryField,
                         dt: float, rho: float, kappa: float,
                         seconds_per_flop: float = 2e-10) -> list[SolverCandidate]:
    """Cheap deterministic metrics cloud: one-shot DivNorm after applying the
    candidate's pressure on a probe input, plus the flop-model time."""
    from .grid import divergence
    from .nn import _divnorm_loss_and_pressure_grad

    div = divergence(vel, geo)
    out = []
    for cand in candidates:
        solver = cand.solver(dt, rho)
        pressure, cost = solver.solve(div, geo)
        loss, _ = _divnorm_loss_and_pressure_grad(pressure.values, vel, geo, dt, rho, kappa)
        flops = cand.flops or cost.flops
        out.append(replace(cand, mean_qloss=loss,
                           mean_time=max(flops * seconds_per_flop, 1e-12),
                           flops=flops))
    return out


def pareto_select(candidates) -> list[SolverCandidate]:
    """Non-dominated subset in the (mean_time, mean_qloss) plane, preserving
    input order. Sort-sweep rather than the O(n^2) scan the tests use."""
    if not candidates:
        raise ArgumentError("pareto_select needs a non-empty pool")
    for cand in candidates:
        if cand.mean_time is None or cand.mean_qloss is None:
            raise ArgumentError(f"candidate {cand.id} is missing metrics")
    order = sorted(range(len(candidates)),
                   key=lambda i: (candidates[i].mean_time, candidates[i].mean_qloss))
    keep = set()
    prefix_min = float("inf")
    i = 0
    while i < len(order):
        j = i
        t = candidates[order[i]].mean_time
        while j < len(order) and candidates[order[j]].mean_time == t:
            j += 1
        group = order[i:j]
        group_min = min(candidates[g].mean_qloss for g in group)
        for g in group:
            q = candidates[g].mean_qloss
            if q > group_min:
                continue  # beaten at equal time
            if prefix_min <= q:
                continue  # beaten by a strictly faster candidate
            keep.add(g)
        prefix_min = min(prefix_min, group_min)
        i = j
    return [candidates[i] for i in range(len(candidates)) if i in keep]
