"""Small ReLU multilayer perceptron with hand-written backpropagation.

Layers are stored batch-major: hidden activation ``h = relu(x @ W + b)`` with
``W`` of shape ``(fan_in, fan_out)``. The output layer is linear with a single
unit.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError, TrainingError
from .features import Normalizer

WEIGHTS_FORMAT = "evtol-pinn-mlp/1"


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_layers: int
    neurons_per_layer: int
    output_dim: int = 1

    def __post_init__(self):
        if self.input_dim < 1 or self.neurons_per_layer < 1 or self.hidden_layers < 0:
            raise InvalidInputError(f"invalid MLP dimensions: {self}")
        if self.output_dim != 1:
            raise InvalidInputError(f"output_dim must be 1, got {self.output_dim}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [self.neurons_per_layer] * self.hidden_layers + [self.output_dim]


def param_count(spec: MlpSpec) -> int:
    sizes = spec.layer_sizes
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


@dataclass
class Layer:
    w: np.ndarray
    b: np.ndarray


@dataclass
class MlpModel:
    spec: MlpSpec
    layers: list[Layer]
    seed: int
    normalizer: Normalizer | None = None

    def __post_init__(self):
        sizes = self.spec.layer_sizes
        if len(self.layers) != len(sizes) - 1:
            raise InvalidInputError(f"expected {len(sizes) - 1} layers, got {len(self.layers)}")
        for i, (layer, a, b) in enumerate(zip(self.layers, sizes[:-1], sizes[1:])):
            if layer.w.shape != (a, b) or layer.b.shape != (b,):
                raise InvalidInputError(
                    f"layer {i}: expected w{(a, b)}, b{(b,)}, got w{layer.w.shape}, b{layer.b.shape}"
                )

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.w, layer.b))
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def init_model(spec: MlpSpec, seed: int, zero_output: bool = False) -> MlpModel:
    """He-uniform weights, zero biases.

    With ``zero_output`` the final layer starts at zero so the network output
    is exactly 0 for every input (residual models then reproduce the physics
    voltage at initialization).
    """
    rng = np.random.default_rng(seed)
    sizes = spec.layer_sizes
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        if zero_output and i == len(sizes) - 2:
            w = np.zeros_like(w)
        layers.append(Layer(w, np.zeros(fan_out)))
    return MlpModel(spec, layers, seed)


def _as_batch(model: MlpModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise InvalidInputError(f"expected rows of length {model.spec.input_dim}, got shape {np.shape(x)}")
    return x, single


def forward(model: MlpModel, x):
    """Network output for one normalized row (returns float) or a batch (returns 1-D array)."""
    h, single = _as_batch(model, x)
    for layer in model.layers[:-1]:
        h = np.maximum(h @ layer.w + layer.b, 0.0)
    out = (h @ model.layers[-1].w + model.layers[-1].b)[:, 0]
    return float(out[0]) if single else out


def loss_mse(preds, targets) -> float:
    p = np.asarray(preds, dtype=float).ravel()
    t = np.asarray(targets, dtype=float).ravel()
    if p.size == 0 or p.size != t.size:
        raise InvalidInputError(f"loss_mse needs equal non-zero lengths, got {p.size} and {t.size}")
    d = p - t
    return float(np.dot(d, d) / d.size)


def backward(model: MlpModel, x, y) -> tuple[float, list[Layer]]:
    """MSE loss on a batch and its gradient with respect to every layer."""
    x, _ = _as_batch(model, x)
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[0] == 0:
        raise InvalidInputError("empty batch")
    if y.size != x.shape[0]:
        raise InvalidInputError(f"{x.shape[0]} rows but {y.size} targets")
    acts = [x]
    h = x
    for layer in model.layers[:-1]:
        h = np.maximum(h @ layer.w + layer.b, 0.0)
        acts.append(h)
    pred = (h @ model.layers[-1].w + model.layers[-1].b)[:, 0]
    if not np.all(np.isfinite(pred)):
        bad = int(np.count_nonzero(~np.isfinite(pred)))
        raise TrainingError(f"non-finite network output on {bad} of {len(pred)} batch rows")
    resid = pred - y
    loss = float(np.dot(resid, resid) / resid.size)
    delta = (2.0 / resid.size) * resid[:, None]
    grads: list[Layer] = [None] * len(model.layers)  # type: ignore[list-item]
    for i in range(len(model.layers) - 1, -1, -1):
        a = acts[i]
        grads[i] = Layer(a.T @ delta, delta.sum(axis=0))
        if i:
            delta = (delta @ model.layers[i].w.T) * (a > 0)
    return loss, grads


def predict_pinn(model: MlpModel, row, v_phy):
    """Residual model prediction in volts: physics voltage plus learned correction."""
    correction = forward(model, row)
    if isinstance(correction, float):
        return float(v_phy) + correction
    return np.asarray(v_phy, dtype=float) + correction


# --------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 2000
    batch_size: int = 256
    seed: int = 0
    optimizer: str = "adam"
    shuffle: bool = True
    patience: int | None = 100
    min_rel_improvement: float = 1e-4
    holdout_fraction: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"train.learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"train.epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"train.optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.patience is not None and self.patience < 1:
            raise ConfigError(f"train.patience must be >= 1, got {self.patience}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError(f"train.holdout_fraction must be in [0, 1), got {self.holdout_fraction}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"train: unknown keys {sorted(unknown)}")
        d = dict(d)
        if d.get("patience") == 0:  # TOML has no null; 0 disables early stopping
            d["patience"] = None
        return cls(**d)


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainHistory:
    initial_loss: float
    loss: list[float] = field(default_factory=list)
    holdout_loss: list[float] = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int = 0


def train(model: MlpModel, x, y, cfg: TrainConfig) -> tuple[MlpModel, TrainHistory]:
    """Mini-batch training on the MSE objective.

    ``x`` must already be normalized; ``y`` is whatever target the caller
    wants the raw network output to match. The input model is not modified.
    Loss history holds the full training-set loss after every epoch. With
    ``cfg.patience`` set, training stops once that many epochs pass without
    a relative improvement of ``cfg.min_rel_improvement`` and the best
    parameters seen are returned.
    """
    x, _ = _as_batch(model, x)
    y = np.asarray(y, dtype=float).ravel()
    if y.size != x.shape[0]:
        raise InvalidInputError(f"{x.shape[0]} rows but {y.size} targets")
    model = copy.deepcopy(model)
    rng = np.random.default_rng(cfg.seed)

    x_fit, y_fit = x, y
    x_hold = y_hold = None
    if cfg.holdout_fraction > 0:
        perm = rng.permutation(len(y))
        n_hold = max(1, int(round(cfg.holdout_fraction * len(y))))
        x_hold, y_hold = x[perm[:n_hold]], y[perm[:n_hold]]
        x_fit, y_fit = x[perm[n_hold:]], y[perm[n_hold:]]

    if cfg.optimizer == "adam":
        opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    else:
        opt = Sgd(cfg.learning_rate)
    params = model.parameters()

    hist = TrainHistory(initial_loss=loss_mse(forward(model, x_fit), y_fit))
    with np.errstate(over="ignore", invalid="ignore"):
        _run_epochs(model, params, opt, rng, x_fit, y_fit, x_hold, y_hold, cfg, hist)
    return model, hist


def _run_epochs(model, params, opt, rng, x_fit, y_fit, x_hold, y_hold, cfg: TrainConfig, hist: TrainHistory) -> None:
    # non-finite values are detected explicitly and raised as TrainingError
    best_score = hist.initial_loss if x_hold is None else loss_mse(forward(model, x_hold), y_hold)
    best_params = [p.copy() for p in params]
    since_best = 0
    n = len(y_fit)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                _, grads = backward(model, x_fit[idx], y_fit[idx])
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch at row {start}: {exc}", epoch=epoch) from exc
            flat = []
            for g in grads:
                flat.extend((g.w, g.b))
            opt.step(params, flat)
        loss = loss_mse(forward(model, x_fit), y_fit)
        if not math.isfinite(loss):
            raise TrainingError(f"training loss became non-finite at epoch {epoch}", epoch=epoch)
        hist.loss.append(loss)
        score = loss
        if x_hold is not None:
            score = loss_mse(forward(model, x_hold), y_hold)
            hist.holdout_loss.append(score)
        if score < best_score * (1.0 - cfg.min_rel_improvement):
            best_score = score
            best_params = [p.copy() for p in params]
            hist.best_epoch = epoch + 1
            since_best = 0
        else:
            since_best += 1
            if cfg.patience is not None and since_best >= cfg.patience:
                hist.stopped_early = True
                break
    if cfg.patience is not None:
        for p, best in zip(params, best_params):
            p[...] = best


# --------------------------------------------------------------------------
# Persistence


def model_to_dict(model: MlpModel, extra: dict | None = None) -> dict:
    doc = {
        "format": WEIGHTS_FORMAT,
        "spec": asdict(model.spec),
        "seed": model.seed,
        "param_count": param_count(model.spec),
        "normalizer": model.normalizer.to_dict() if model.normalizer is not None else None,
        "layers": [{"w": layer.w.tolist(), "b": layer.b.tolist()} for layer in model.layers],
    }
    if extra:
        doc.update(extra)
    return doc


def model_from_dict(doc: dict) -> tuple[MlpModel, dict]:
    """Rebuild a model; returns it with the document's remaining metadata."""
    if doc.get("format") != WEIGHTS_FORMAT:
        raise ConfigError(f"unsupported weight file format {doc.get('format')!r}")
    spec = MlpSpec(**doc["spec"])
    layers = [Layer(np.asarray(l["w"], dtype=float), np.asarray(l["b"], dtype=float)) for l in doc["layers"]]
    norm = Normalizer.from_dict(doc["normalizer"]) if doc.get("normalizer") else None
    try:
        model = MlpModel(spec, layers, int(doc["seed"]), norm)
    except InvalidInputError as exc:
        raise ConfigError(f"weight file does not match its spec: {exc}") from exc
    stored = model.n_parameters()
    if stored != param_count(spec) or doc.get("param_count", stored) != stored:
        raise ConfigError(f"weight file holds {stored} parameters, spec implies {param_count(spec)}")
    known = {"format", "spec", "seed", "param_count", "normalizer", "layers"}
    return model, {k: v for k, v in doc.items() if k not in known}


def save_model(path: str | Path, model: MlpModel, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, extra), indent=1) + "\n")


def load_model(path: str | Path) -> tuple[MlpModel, dict]:
    return model_from_dict(json.loads(Path(path).read_text()))
