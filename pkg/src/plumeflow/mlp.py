"""Offline success-rate predictor.

A small dense network maps [requirement, candidate architecture] feature
vectors (48 entries: q, t, layer count, then five 9-slot per-layer blocks)
to the probability that the candidate meets the requirement. Labels come
from profiling records: the fraction of problems where both the quality and
time bounds held.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, FormatError, NumericError
from .forge import ExecutionRecord, SolverCandidate
from .nn import AVGPOOL, CONV, MAXPOOL, UNPOOL, MAX_LAYERS

FEATURE_LENGTH = 3 + 5 * MAX_LAYERS  # 48
MLP_FORMAT_VERSION = 1

# hidden-layer ladders, narrowest to deepest; mlp3 is the default topology
TOPOLOGIES = {
    "mlp1": [FEATURE_LENGTH, 32, 16, 1],
    "mlp2": [FEATURE_LENGTH, 32, 16, 8, 1],
    "mlp3": [FEATURE_LENGTH, 32, 32, 16, 8, 1],
    "mlp4": [FEATURE_LENGTH, 64, 32, 32, 16, 8, 1],
    "mlp5": [FEATURE_LENGTH, 64, 64, 32, 32, 16, 8, 1],
}


@dataclass(frozen=True)
class UserRequirement:
    q: float
    t: float

    def __post_init__(self):
        if not self.q > 0:
            raise ArgumentError(f"quality bound must be > 0, got {self.q}")
        if not self.t > 0:
            raise ArgumentError(f"time bound must be > 0, got {self.t}")


@dataclass(frozen=True)
class LabeledSample:
    features: tuple
    label: float

    def __post_init__(self):
        if len(self.features) != FEATURE_LENGTH:
            raise ArgumentError(f"feature vector must have {FEATURE_LENGTH} entries")
        if not 0.0 <= self.label <= 1.0:
            raise ArgumentError(f"label must be in [0, 1], got {self.label}")


def build_feature_vector(req: UserRequirement, cand: SolverCandidate) -> np.ndarray:
    """[q, t, l_k] ++ kernel[9] ++ channels[9] ++ pool[9] ++ unpool[9] ++
    residual[9]; layers beyond l_k stay zero. Iterative candidates use the
    reserved encoding: l_k = 0 and the iteration count in channels[0]."""
    out = np.zeros(FEATURE_LENGTH)
    out[0] = req.q
    out[1] = req.t
    ker = out[3:12]
    chn = out[12:21]
    pool = out[21:30]
    unp = out[30:39]
    res = out[39:48]
    if cand.net is None:
        chn[0] = cand.iters
        return out
    layers = cand.net.layers
    if len(layers) > MAX_LAYERS:
        raise ArgumentError(f"network has {len(layers)} layers, max {MAX_LAYERS}")
    out[2] = len(layers)
    for i, layer in enumerate(layers):
        if layer.kind == CONV:
            ker[i] = layer.kernel
            chn[i] = layer.channels_out
        elif layer.kind in (MAXPOOL, AVGPOOL):
            pool[i] = layer.pool
        elif layer.kind == UNPOOL:
            unp[i] = layer.pool
        if layer.residual_from is not None:
            res[i] = layer.residual_from + 1  # 1-based so "no residual" is 0
    return out


def label_success_rate(records: list[ExecutionRecord], req: UserRequirement) -> float:
    """Fraction of a candidate's records satisfying both bounds."""
    if not records:
        raise ArgumentError("label_success_rate needs at least one record")
    hits = sum(1 for r in records if r.qloss <= req.q and r.time <= req.t)
    return hits / len(records)


def requirement_grid(records: list[ExecutionRecord],
                     percentiles=(10, 25, 50, 75, 90)) -> list[UserRequirement]:
    """Cartesian grid over the observed qloss/time quantiles."""
    qs = [r.qloss for r in records if math.isfinite(r.qloss)]
    ts = [r.time for r in records]
    if not qs:
        raise ArgumentError("no finite records for grid construction")
    q_levels = np.percentile(qs, percentiles)
    t_levels = np.percentile(ts, percentiles)
    grid = []
    for q in q_levels:
        for t in t_levels:
            grid.append(UserRequirement(max(float(q), 1e-300), max(float(t), 1e-300)))
    return grid


def generate_samples(records: list[ExecutionRecord], candidates: list[SolverCandidate],
                     grid: list[UserRequirement]) -> list[LabeledSample]:
    if not grid:
        raise ArgumentError("requirement grid is empty")
    by_cand: dict[str, list[ExecutionRecord]] = {}
    for r in records:
        by_cand.setdefault(r.candidate_id, []).append(r)
    samples = []
    for cand in candidates:
        rows = by_cand.get(cand.id)
        if not rows:
            continue
        for req in grid:
            features = build_feature_vector(req, cand)
            label = label_success_rate(rows, req)
            samples.append(LabeledSample(tuple(float(v) for v in features), label))
    return samples


# ---------------------------------------------------------------------------
# the model


@dataclass
class MlpModel:
    sizes: list[int]
    weights: list[tuple[np.ndarray, np.ndarray]]
    feature_scale: np.ndarray

    def copy(self) -> "MlpModel":
        return MlpModel(list(self.sizes),
                        [(w.copy(), b.copy()) for w, b in self.weights],
                        self.feature_scale.copy())


def init_mlp(topology: str | list[int] = "mlp3", seed: int = 0) -> MlpModel:
    sizes = TOPOLOGIES[topology] if isinstance(topology, str) else list(topology)
    if sizes[0] != FEATURE_LENGTH or sizes[-1] != 1:
        raise ArgumentError(f"topology must run {FEATURE_LENGTH} -> ... -> 1")
    rng = np.random.default_rng(seed)
    weights = []
    for n_in, n_out in zip(sizes, sizes[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / n_in), (n_out, n_in))
        weights.append((w, np.zeros(n_out)))
    return MlpModel(sizes, weights, np.ones(FEATURE_LENGTH))


def _mlp_forward(mlp: MlpModel, features: np.ndarray):
    """Returns (output scalar, per-layer pre-activations, activations)."""
    x = features / mlp.feature_scale
    activations = [x]
    pres = []
    for li, (w, b) in enumerate(mlp.weights):
        z = w @ activations[-1] + b
        pres.append(z)
        if li < len(mlp.weights) - 1:
            activations.append(np.maximum(z, 0.0))
        else:
            activations.append(1.0 / (1.0 + np.exp(-z)))
    return float(activations[-1][0]), pres, activations


def predict_success(mlp: MlpModel, features) -> float:
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (FEATURE_LENGTH,):
        raise ArgumentError(f"features must have shape ({FEATURE_LENGTH},), "
                            f"got {features.shape}")
    out, _, _ = _mlp_forward(mlp, features)
    return out


@dataclass
class MlpTrainConfig:
    epochs: int = 300
    batch_size: int = 16
    learning_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ArgumentError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ArgumentError("learning rate must be >= 0")


def train_mlp(samples: list[LabeledSample], cfg: MlpTrainConfig | None = None,
              topology: str | list[int] = "mlp3") -> tuple[MlpModel, list[float]]:
    """Mean-squared-error SGD; feature columns are scaled to [-1, 1] by the
    corpus max before training. Deterministic under cfg.seed."""
    if cfg is None:
        cfg = MlpTrainConfig()
    if len(samples) < 10:
        raise ArgumentError(f"training needs >= 10 samples, got {len(samples)}")
    x = np.array([s.features for s in samples], dtype=np.float64)
    y = np.array([s.label for s in samples], dtype=np.float64)
    scale = np.abs(x).max(axis=0)
    scale[scale == 0.0] = 1.0

    mlp = init_mlp(topology, seed=cfg.seed)
    mlp.feature_scale = scale
    rng = np.random.default_rng(cfg.seed)
    n = len(samples)
    curve: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            grads = [(np.zeros_like(w), np.zeros_like(b)) for w, b in mlp.weights]
            batch_loss = 0.0
            for si in batch:
                out, pres, acts = _mlp_forward(mlp, x[si])
                err = out - y[si]
                batch_loss += err * err
                # d(err^2)/dz_last = 2 err * sigmoid'(z)
                delta = np.array([2.0 * err * out * (1.0 - out)])
                for li in range(len(mlp.weights) - 1, -1, -1):
                    w, b = mlp.weights[li]
                    gw, gb = grads[li]
                    gw += np.outer(delta, acts[li])
                    gb += delta
                    if li > 0:
                        delta = (w.T @ delta) * (pres[li - 1] > 0.0)
            if not np.isfinite(batch_loss):
                raise NumericError(f"MLP loss became non-finite at epoch {epoch}")
            epoch_loss += float(batch_loss)
            lr = cfg.learning_rate / len(batch)
            for li, (w, b) in enumerate(mlp.weights):
                gw, gb = grads[li]
                mlp.weights[li] = (w - lr * gw, b - lr * gb)
        curve.append(epoch_loss / n)
    return mlp, curve


def expected_total_time(r_hat: float, time_candidate: float, time_exact: float) -> float:
    """Expected run time counting the restart risk: r*T_M + (1-r)*T'."""
    if not 0.0 <= r_hat <= 1.0:
        raise ArgumentError(f"r_hat must be in [0, 1], got {r_hat}")
    if not (time_candidate > 0 and time_exact > 0):
        raise ArgumentError("times must be positive")
    return r_hat * time_candidate + (1.0 - r_hat) * time_exact


@dataclass(frozen=True)
class RankedCandidate:
    candidate: SolverCandidate
    r_hat: float

    @property
    def id(self) -> str:
        return self.candidate.id


MAX_SELECTED = 5


def select_candidates(mlp, candidates: list[SolverCandidate], req: UserRequirement,
                      time_exact: float) -> list[RankedCandidate]:
    """Keep candidates whose expected total time beats the requirement,
    ranked by predicted success (ties: faster first, then id). Cap at 5.

    `mlp` may be an MlpModel or any callable(features) -> probability, which
    keeps the golden-trace tests independent of training.
    """
    if not candidates:
        raise ArgumentError("select_candidates needs a non-empty frontier")
    predict = mlp if callable(mlp) else (lambda f: predict_success(mlp, f))
    ranked = []
    for cand in candidates:
        if cand.mean_time is None:
            raise ArgumentError(f"candidate {cand.id} is missing mean_time")
        r_hat = float(predict(build_feature_vector(req, cand)))
        total = expected_total_time(min(max(r_hat, 0.0), 1.0), cand.mean_time, time_exact)
        if total < req.t:
            ranked.append(RankedCandidate(cand, r_hat))
    ranked.sort(key=lambda rc: (-rc.r_hat, rc.candidate.mean_time, rc.candidate.id))
    return ranked[:MAX_SELECTED]


# ---------------------------------------------------------------------------
# persistence (same structured-text family as the conv-net model files)


def mlp_to_document(mlp: MlpModel) -> dict:
    return {
        "version": MLP_FORMAT_VERSION,
        "kind": "success-mlp",
        "sizes": list(mlp.sizes),
        "feature_scale": [float(v) for v in mlp.feature_scale],
        "weights": [
            {
                "layer": i,
                "shape": list(w.shape),
                "w": [float(v) for v in w.ravel()],
                "b": [float(v) for v in b.ravel()],
            }
            for i, (w, b) in enumerate(mlp.weights)
        ],
    }


def mlp_from_document(doc: dict) -> MlpModel:
    if not isinstance(doc, dict) or doc.get("version") != MLP_FORMAT_VERSION:
        raise FormatError(f"unsupported MLP document version {doc.get('version')!r}")
    try:
        sizes = [int(s) for s in doc["sizes"]]
        weights = []
        for entry in doc["weights"]:
            shape = tuple(entry["shape"])
            w = np.array(entry["w"], dtype=np.float64).reshape(shape)
            b = np.array(entry["b"], dtype=np.float64)
            weights.append((w, b))
        scale = np.array(doc["feature_scale"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed MLP document: {exc}") from exc
    if len(weights) != len(sizes) - 1:
        raise FormatError("weight count does not match topology")
    return MlpModel(sizes, weights, scale)


def save_mlp(mlp: MlpModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(mlp_to_document(mlp), fh, indent=1)


def load_mlp(path) -> MlpModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"cannot parse MLP file: {exc}") from exc
    return mlp_from_document(doc)
