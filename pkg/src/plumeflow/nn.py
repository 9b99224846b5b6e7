"""Minimal convolutional-network engine for surrogate pressure prediction.

Networks map a 2-channel input (velocity divergence, fluid occupancy) to a
single-channel pressure field at the same resolution. Layers are kept simple
on purpose: conv (same zero padding), relu, max/avg pool, nearest-neighbor
unpool, dropout (identity at inference), optional residual adds. Training is
unsupervised: the loss is the weighted squared divergence remaining after the
predicted pressure is applied as a velocity correction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, FormatError, GraphError, NumericError
from .grid import GeometryField, GridDims, MacVelocityField, ScalarField

MAX_LAYERS = 9
MODEL_FORMAT_VERSION = 1

CONV, RELU, AVGPOOL, MAXPOOL, UNPOOL, DROPOUT = (
    "conv", "relu", "avgpool", "maxpool", "unpool", "dropout",
)
_KINDS = {CONV, RELU, AVGPOOL, MAXPOOL, UNPOOL, DROPOUT}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 0
    channels_out: int = 0
    pool: int = 0
    drop_p: float = 0.0
    residual_from: int | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise GraphError(f"unknown layer kind {self.kind!r}")
        if self.kind == CONV:
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise GraphError(f"conv kernel must be odd >= 1, got {self.kernel}")
            if self.channels_out < 1:
                raise GraphError(f"conv needs channels_out >= 1, got {self.channels_out}")
        if self.kind in (AVGPOOL, MAXPOOL, UNPOOL) and self.pool < 2:
            raise GraphError(f"pool factor must be >= 2, got {self.pool}")
        if self.kind == DROPOUT and not (0 <= self.drop_p < 1):
            raise GraphError(f"drop_p must be in [0, 1), got {self.drop_p}")


def conv(channels_out: int, kernel: int = 3, residual_from: int | None = None) -> LayerSpec:
    return LayerSpec(CONV, kernel=kernel, channels_out=channels_out,
                     residual_from=residual_from)


def relu(residual_from: int | None = None) -> LayerSpec:
    return LayerSpec(RELU, residual_from=residual_from)


@dataclass
class NetworkGraph:
    layers: list[LayerSpec]
    weights: dict[int, tuple[np.ndarray, np.ndarray]]  # conv index -> (kernel, bias)
    in_channels: int = 2

    def copy(self) -> "NetworkGraph":
        return NetworkGraph(
            list(self.layers),
            {k: (w.copy(), b.copy()) for k, (w, b) in self.weights.items()},
            self.in_channels,
        )


def shape_chain(net: NetworkGraph, dims: tuple[int, int]) -> list[tuple[int, int, int]]:
    """Per-layer output shapes (channels, h, w); raises GraphError on any
    inconsistency. Index -1 of the conceptual chain is the network input."""
    if len(net.layers) > MAX_LAYERS:
        raise GraphError(f"network has {len(net.layers)} layers, max {MAX_LAYERS}")
    shapes: list[tuple[int, int, int]] = []
    c, h, w = net.in_channels, dims[0], dims[1]
    for idx, layer in enumerate(net.layers):
        if layer.kind == CONV:
            kern, bias = net.weights.get(idx, (None, None))
            if kern is None:
                raise GraphError("conv layer missing weights", idx)
            if kern.shape != (layer.channels_out, c, layer.kernel, layer.kernel):
                raise GraphError(
                    f"kernel shape {kern.shape} != "
                    f"{(layer.channels_out, c, layer.kernel, layer.kernel)}", idx
                )
            if bias.shape != (layer.channels_out,):
                raise GraphError(f"bias shape {bias.shape} != ({layer.channels_out},)", idx)
            c = layer.channels_out
        elif layer.kind in (AVGPOOL, MAXPOOL):
            if h % layer.pool or w % layer.pool:
                raise GraphError(f"pool {layer.pool} does not divide {(h, w)}", idx)
            h //= layer.pool
            w //= layer.pool
        elif layer.kind == UNPOOL:
            h *= layer.pool
            w *= layer.pool
        # relu / dropout keep shape
        if layer.residual_from is not None:
            r = layer.residual_from
            if not (0 <= r < idx):
                raise GraphError(f"residual_from {r} not an earlier layer", idx)
            if shapes[r] != (c, h, w):
                raise GraphError(f"residual shape {shapes[r]} != {(c, h, w)}", idx)
        shapes.append((c, h, w))
    if shapes and shapes[-1][0] != 1:
        raise GraphError("final layer must emit a single channel", len(net.layers) - 1)
    if shapes and (shapes[-1][1], shapes[-1][2]) != dims:
        raise GraphError(f"output resolution {shapes[-1][1:]} != input {dims}")
    return shapes


def validate_network(net: NetworkGraph, dims: tuple[int, int] = (32, 32)) -> None:
    shape_chain(net, dims)


def init_network(layers: list[LayerSpec], in_channels: int = 2,
                 seed: int = 0) -> NetworkGraph:
    """He-style kernel init, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    weights = {}
    c = in_channels
    for idx, layer in enumerate(layers):
        if layer.kind == CONV:
            k = layer.kernel
            std = np.sqrt(2.0 / (k * k * c))
            kern = rng.normal(0.0, std, (layer.channels_out, c, k, k))
            bias = np.zeros(layer.channels_out)
            weights[idx] = (kern, bias)
            c = layer.channels_out
    net = NetworkGraph(list(layers), weights, in_channels)
    validate_network(net)
    return net


# ---------------------------------------------------------------------------
# forward / backward


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(C, H, W) -> (C*k*k, H*W) patch matrix with same zero padding."""
    c, h, w = x.shape
    pad = k // 2
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    xp[:, pad : pad + h, pad : pad + w] = x
    cols = np.empty((c * k * k, h * w))
    row = 0
    for ci in range(c):
        for di in range(k):
            for dj in range(k):
                cols[row, :] = xp[ci, di : di + h, dj : dj + w].ravel()
                row += 1
    return cols


def _col2im(cols: np.ndarray, shape: tuple[int, int, int], k: int) -> np.ndarray:
    """Adjoint of _im2col: scatter patch-matrix gradients back to the image."""
    c, h, w = shape
    pad = k // 2
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    row = 0
    for ci in range(c):
        for di in range(k):
            for dj in range(k):
                xp[ci, di : di + h, dj : dj + w] += cols[row, :].reshape(h, w)
                row += 1
    return xp[:, pad : pad + h, pad : pad + w]


@dataclass
class _Trace:
    x: np.ndarray
    outputs: list[np.ndarray] = field(default_factory=list)
    caches: dict[int, object] = field(default_factory=dict)

    def input_of(self, idx: int) -> np.ndarray:
        return self.x if idx == 0 else self.outputs[idx - 1]


def _forward_trace(net: NetworkGraph, x: np.ndarray, train: bool = False,
                   rng: np.random.Generator | None = None) -> tuple[np.ndarray, _Trace]:
    shape_chain(net, x.shape[1:])
    trace = _Trace(x)
    cur = x
    for idx, layer in enumerate(net.layers):
        if layer.kind == CONV:
            kern, bias = net.weights[idx]
            co, ci, k, _ = kern.shape
            cols = _im2col(cur, k)
            out = (kern.reshape(co, ci * k * k) @ cols + bias[:, None]).reshape(
                co, cur.shape[1], cur.shape[2]
            )
            trace.caches[idx] = cols
        elif layer.kind == RELU:
            out = np.maximum(cur, 0.0)
        elif layer.kind == MAXPOOL:
            f = layer.pool
            c, h, w = cur.shape
            blocks = cur.reshape(c, h // f, f, w // f, f).transpose(0, 1, 3, 2, 4)
            blocks = blocks.reshape(c, h // f, w // f, f * f)
            arg = blocks.argmax(axis=3)
            out = np.take_along_axis(blocks, arg[..., None], axis=3)[..., 0]
            trace.caches[idx] = arg
        elif layer.kind == AVGPOOL:
            f = layer.pool
            c, h, w = cur.shape
            out = cur.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))
        elif layer.kind == UNPOOL:
            f = layer.pool
            out = np.repeat(np.repeat(cur, f, axis=1), f, axis=2)
        elif layer.kind == DROPOUT:
            if train and layer.drop_p > 0.0:
                if rng is None:
                    raise ArgumentError("training dropout needs an rng")
                mask = (rng.random(cur.shape) >= layer.drop_p) / (1.0 - layer.drop_p)
                out = cur * mask
                trace.caches[idx] = mask
            else:
                out = cur
        else:  # pragma: no cover - guarded by LayerSpec
            raise GraphError(f"unknown layer kind {layer.kind!r}", idx)
        if layer.residual_from is not None:
            out = out + trace.outputs[layer.residual_from]
        trace.outputs.append(out)
        cur = out
    return cur, trace


def _backward_trace(net: NetworkGraph, trace: _Trace, upstream: np.ndarray):
    """Reverse-mode pass; returns ({conv idx: (dkernel, dbias)}, dx)."""
    n = len(net.layers)
    pending: list[np.ndarray | None] = [None] * (n + 1)  # slot n-1 .. -1 shifted by 1
    pending[n] = upstream.copy()
    grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def add(slot: int, g: np.ndarray) -> None:
        if pending[slot] is None:
            pending[slot] = g.copy()
        else:
            pending[slot] = pending[slot] + g

    for idx in range(n - 1, -1, -1):
        g = pending[idx + 1]
        if g is None:
            continue
        layer = net.layers[idx]
        if layer.residual_from is not None:
            add(layer.residual_from + 1, g)
        x_in = trace.input_of(idx)
        if layer.kind == CONV:
            kern, _ = net.weights[idx]
            co, ci, k, _ = kern.shape
            cols = trace.caches[idx]
            gy = g.reshape(co, -1)
            dk = (gy @ cols.T).reshape(kern.shape)
            db = gy.sum(axis=1)
            grads[idx] = (dk, db)
            dcols = kern.reshape(co, ci * k * k).T @ gy
            dx = _col2im(dcols, x_in.shape, k)
        elif layer.kind == RELU:
            dx = g * (x_in > 0.0)
        elif layer.kind == MAXPOOL:
            f = layer.pool
            c, h, w = x_in.shape
            arg = trace.caches[idx]
            dblocks = np.zeros((c, h // f, w // f, f * f))
            np.put_along_axis(dblocks, arg[..., None], g[..., None], axis=3)
            dx = (
                dblocks.reshape(c, h // f, w // f, f, f)
                .transpose(0, 1, 3, 2, 4)
                .reshape(c, h, w)
            )
        elif layer.kind == AVGPOOL:
            f = layer.pool
            c, h, w = x_in.shape
            dx = np.repeat(np.repeat(g, f, axis=1), f, axis=2) / (f * f)
        elif layer.kind == UNPOOL:
            f = layer.pool
            c, ho, wo = g.shape
            dx = g.reshape(c, ho // f, f, wo // f, f).sum(axis=(2, 4))
        elif layer.kind == DROPOUT:
            mask = trace.caches.get(idx)
            dx = g if mask is None else g * mask
        else:  # pragma: no cover
            raise GraphError(f"unknown layer kind {layer.kind!r}", idx)
        add(idx, dx)
    return grads, pending[0]


def network_input(div: ScalarField, geo: GeometryField) -> np.ndarray:
    return np.stack([div.values, geo.fluid.astype(np.float64)])


def forward(net: NetworkGraph, div: ScalarField, geo: GeometryField) -> ScalarField:
    """Inference pass: dropout layers are identity."""
    if div.dims != geo.dims:
        raise ArgumentError("divergence and geometry dims differ")
    y, _ = _forward_trace(net, network_input(div, geo))
    out = y[0]
    if not np.isfinite(out).all():
        raise NumericError("network produced non-finite pressure")
    return ScalarField(div.dims, out)


def backward(net: NetworkGraph, x: np.ndarray, upstream: np.ndarray):
    """Weight gradients for d(sum(upstream * output))/d(weights)."""
    y, trace = _forward_trace(net, x)
    if upstream.shape != y.shape:
        raise ArgumentError(f"upstream shape {upstream.shape} != output {y.shape}")
    grads, _ = _backward_trace(net, trace, upstream)
    return grads


# ---------------------------------------------------------------------------
# DivNorm objective


def _divnorm_loss_and_pressure_grad(pressure: np.ndarray, vel: MacVelocityField,
                                    geo: GeometryField, dt: float, rho: float,
                                    kappa: float):
    """Loss = sum_fluid w * div(vel - dt/rho grad p)^2 and dLoss/dp."""
    from .grid import divergence, subtract_pressure_gradient

    dims = geo.dims
    h = dims.h
    p_field = ScalarField(dims, pressure)
    vel_new = subtract_pressure_gradient(vel, p_field, geo, dt, rho)
    div_new = divergence(vel_new, geo).values
    w = np.maximum(1.0, kappa - geo.distance.values)
    w = np.where(geo.fluid, w, 0.0)
    loss = float((w * div_new * div_new).sum())

    g = 2.0 * w * div_new  # dLoss/d(div_new), zero on solid
    nx, ny = dims.shape
    gu = np.zeros((nx + 1, ny))
    gv = np.zeros((nx, ny + 1))
    gu[1:nx, :] = np.where(geo.u_fluid[1:nx, :], (g[:-1, :] - g[1:, :]) / h, 0.0)
    gv[:, 1:ny] = np.where(geo.v_fluid[:, 1:ny], (g[:, :-1] - g[:, 1:]) / h, 0.0)
    s = dt / (rho * h)
    gp = s * (gu[1:, :] - gu[:-1, :] + gv[:, 1:] - gv[:, :-1])
    return loss, gp


def loss_divnorm(net: NetworkGraph, vel: MacVelocityField, geo: GeometryField,
                 dt: float, rho: float, kappa: float) -> float:
    """Weighted residual-divergence objective for the predicted pressure."""
    from .grid import divergence

    div = divergence(vel, geo)
    pressure = forward(net, div, geo)
    loss, _ = _divnorm_loss_and_pressure_grad(pressure.values, vel, geo, dt, rho, kappa)
    return loss


def divnorm_loss_and_grads(net: NetworkGraph, vel: MacVelocityField, geo: GeometryField,
                           dt: float, rho: float, kappa: float,
                           train: bool = False, rng=None):
    from .grid import divergence

    div = divergence(vel, geo)
    x = network_input(div, geo)
    y, trace = _forward_trace(net, x, train=train, rng=rng)
    loss, gp = _divnorm_loss_and_pressure_grad(y[0], vel, geo, dt, rho, kappa)
    grads, _ = _backward_trace(net, trace, gp[None, :, :])
    return loss, grads


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    learning_rate: float = 1e-3
    seed: int = 0
    kappa: float = 3.0
    dt: float = 0.1
    rho: float = 1.0
    momentum: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ArgumentError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ArgumentError("learning rate must be >= 0")
        if not self.kappa >= 1:
            raise ArgumentError("kappa must be >= 1")


def train(net: NetworkGraph, dataset, cfg: TrainConfig):
    """Mini-batch SGD on the DivNorm objective.

    dataset: sequence of (MacVelocityField, GeometryField) pairs. Returns
    (trained copy, per-epoch mean loss curve); deterministic under cfg.seed.
    """
    if len(dataset) == 0:
        raise ArgumentError("training needs a non-empty dataset")
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    velocity = {k: (np.zeros_like(w), np.zeros_like(b))
                for k, (w, b) in net.weights.items()}
    curve: list[float] = []
    n = len(dataset)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            acc = {k: (np.zeros_like(w), np.zeros_like(b))
                   for k, (w, b) in net.weights.items()}
            batch_loss = 0.0
            for sample_idx in batch:
                vel, geo = dataset[sample_idx]
                loss, grads = divnorm_loss_and_grads(
                    net, vel, geo, cfg.dt, cfg.rho, cfg.kappa, train=True, rng=rng
                )
                batch_loss += loss
                for k, (dk, db) in grads.items():
                    acc[k] = (acc[k][0] + dk, acc[k][1] + db)
            if not np.isfinite(batch_loss):
                raise NumericError(
                    f"training loss became non-finite at epoch {epoch}"
                )
            epoch_loss += batch_loss
            scale = cfg.learning_rate / len(batch)
            for k in acc:
                w, b = net.weights[k]
                vw, vb = velocity[k]
                vw = cfg.momentum * vw - scale * acc[k][0]
                vb = cfg.momentum * vb - scale * acc[k][1]
                net.weights[k] = (w + vw, b + vb)
                velocity[k] = (vw, vb)
        curve.append(epoch_loss / n)
    return net, curve


# ---------------------------------------------------------------------------
# cost model and persistence


def count_flops(net: NetworkGraph, dims: GridDims | tuple[int, int]) -> int:
    """Multiply-add count for one inference at the given resolution."""
    if isinstance(dims, GridDims):
        dims = dims.shape
    c, h, w = net.in_channels, dims[0], dims[1]
    total = 0
    for layer in net.layers:
        if layer.kind == CONV:
            total += 2 * layer.kernel**2 * c * layer.channels_out * h * w
            c = layer.channels_out
        elif layer.kind == RELU:
            total += c * h * w
        elif layer.kind in (AVGPOOL, MAXPOOL):
            total += c * h * w
            h //= layer.pool
            w //= layer.pool
        elif layer.kind == UNPOOL:
            h *= layer.pool
            w *= layer.pool
            total += c * h * w
        # dropout is identity at inference: 0 flops
        if layer.residual_from is not None:
            total += c * h * w
    return total


def to_document(net: NetworkGraph) -> dict:
    layers = []
    for layer in net.layers:
        layers.append({
            "kind": layer.kind,
            "kernel": layer.kernel,
            "channels_out": layer.channels_out,
            "pool": layer.pool,
            "drop_p": layer.drop_p,
            "residual_from": layer.residual_from,
        })
    weights = []
    for idx in sorted(net.weights):
        kern, bias = net.weights[idx]
        weights.append({
            "layer": idx,
            "kernel_shape": list(kern.shape),
            "kernel": [float(v) for v in kern.ravel()],
            "bias": [float(v) for v in bias.ravel()],
        })
    return {
        "version": MODEL_FORMAT_VERSION,
        "in_channels": net.in_channels,
        "layers": layers,
        "weights": weights,
    }


def from_document(doc: dict) -> NetworkGraph:
    if not isinstance(doc, dict):
        raise FormatError("model document must be a mapping")
    version = doc.get("version")
    if version != MODEL_FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version!r}")
    try:
        layers = [
            LayerSpec(
                kind=entry["kind"],
                kernel=entry.get("kernel", 0),
                channels_out=entry.get("channels_out", 0),
                pool=entry.get("pool", 0),
                drop_p=entry.get("drop_p", 0.0),
                residual_from=entry.get("residual_from"),
            )
            for entry in doc["layers"]
        ]
        weights = {}
        for entry in doc.get("weights", []):
            shape = tuple(entry["kernel_shape"])
            kern = np.array(entry["kernel"], dtype=np.float64).reshape(shape)
            bias = np.array(entry["bias"], dtype=np.float64)
            weights[int(entry["layer"])] = (kern, bias)
        net = NetworkGraph(layers, weights, int(doc.get("in_channels", 2)))
    except GraphError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed model document: {exc}") from exc
    validate_network(net)
    return net


def save_network(net: NetworkGraph, path) -> None:
    with open(path, "w") as fh:
        json.dump(to_document(net), fh, indent=1)


def load_network(path) -> NetworkGraph:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"cannot parse model file: {exc}") from exc
    return from_document(doc)
