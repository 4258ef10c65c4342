"""MSE fitting with Adam on nominal layers, one full-graph step per layer."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataContractError, NumericalError
from .models import GraphInputs, ModelParams, ModelSpec, forward, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 300
    seed: int = 0
    graphs_per_step: int = 1

    def validate(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.graphs_per_step != 1:
            raise ConfigError("only graphs_per_step=1 (full-graph steps) is supported")
        return self


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, Y):
        return (np.asarray(Y, dtype=np.float64) - self.mean) / self.std

    def inverse(self, Z):
        return np.asarray(Z, dtype=np.float64) * self.std + self.mean

    def to_dict(self):
        return {"mean": [float(x) for x in self.mean], "std": [float(x) for x in self.std]}

    @classmethod
    def from_dict(cls, doc):
        return cls(np.array(doc["mean"], dtype=np.float64), np.array(doc["std"], dtype=np.float64))


def fit_standardizer(layers, channel_names=None) -> Standardizer:
    """Per-channel mean and (population) std of Y over all given layers."""
    Y = np.vstack([layer.Y for layer in layers])
    if Y.shape[0] < 2:
        raise DataContractError("need at least 2 nodes to fit a standardizer")
    mean = Y.mean(axis=0)
    std = Y.std(axis=0)
    # rounding leaves a constant column with std ~1e-16 rather than 0
    const = np.flatnonzero(~(std > 1e-12 * np.maximum(1.0, np.abs(mean))))
    if const.size:
        names = channel_names or [f"channel {i}" for i in range(Y.shape[1])]
        raise DataContractError(f"constant melt-pool channel(s): {[names[i] for i in const]}")
    return Standardizer(mean, std)


def mse_loss(pred, target):
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ad.DimensionError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred - target
    return ad.mean(diff * diff)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig) -> AdamState:
    """One bias-corrected Adam update of the arrays in ``params``, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NumericalError(f"non-finite gradient for parameter {name!r} "
                                 f"({bad} entries) at step {state.t + 1}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps_adam)
    return state


def _prepare(params, graphs, standardizer):
    prepared = []
    for g in graphs:
        Y_std = standardizer.transform(g.scan.Y)
        inputs = GraphInputs(g)
        if params.spec.kind == "autoencoder":
            target = np.hstack([np.asarray(inputs.X, dtype=np.float64), Y_std])
        else:
            target = Y_std
        prepared.append((inputs, Y_std, target))
    return prepared


def train(spec: ModelSpec, graphs, config: TrainConfig | None = None,
          standardizer: Standardizer | None = None, params: ModelParams | None = None):
    """Fit ``spec`` to nominal graphs; returns (params, per-epoch mean loss).

    Graphs are visited in the given order every epoch with one Adam step
    each. Any node flagged anomalous aborts training.
    """
    config = (config or TrainConfig()).validate()
    spec.validate()
    if not graphs:
        raise DataContractError("no training graphs given")
    for i, g in enumerate(graphs):
        bad = int(np.count_nonzero(g.scan.anomaly_mask))
        if bad:
            raise DataContractError(f"training graph {i} has {bad} anomalous nodes; "
                                    "training accepts nominal layers only")
    standardizer = standardizer or fit_standardizer([g.scan for g in graphs])
    if params is None:
        params = init_params(spec, config.seed)
    params.standardizer = standardizer
    trainable = {k: t for k, t in params.tensors.items() if t.requires_grad}
    values = {k: t.value for k, t in trainable.items()}
    state = AdamState()
    prepared = _prepare(params, graphs, standardizer)
    history = []
    for epoch in range(config.epochs):
        losses = []
        for inputs, Y_std, target in prepared:
            for t in trainable.values():
                t.grad = None
            # overflow is caught below and reported as a NumericalError
            with ad.Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
                loss = mse_loss(forward(params, inputs, Y_std), target)
                tape.backward(loss)
            if not math.isfinite(loss.item()):
                raise NumericalError(f"loss became non-finite at epoch {epoch}")
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value))
                     for k, t in trainable.items()}
            adam_step(values, grads, state, config)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        if epoch % 50 == 0 or epoch == config.epochs - 1:
            log.info("%s epoch %d loss %.6f", spec.kind, epoch, history[-1])
    params.meta = {"final_loss": history[-1] if history else None, "epochs": config.epochs,
                   "seed": config.seed}
    return params, history


def evaluate_loss(params: ModelParams, graphs) -> float:
    """Mean MSE over graphs in standardised units, no gradient."""
    losses = []
    for inputs, Y_std, target in _prepare(params, graphs, params.standardizer):
        losses.append(mse_loss(forward(params, inputs, Y_std), target).item())
    return float(np.mean(losses))
