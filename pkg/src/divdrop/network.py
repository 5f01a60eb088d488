"""Fully connected dropout networks with a numpy backprop trainer.

Layers are indexed ``0..K``: layer 0 is the input, ``1..K-1`` are hidden
and ``K`` is the linear output head. Dropout acts on the outputs of hidden
layers, so a dropout layer ``h`` has a mask of length ``N_h`` that is applied
before the weight multiply of layer ``h + 1``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from divdrop.errors import DivergedTraining, InvalidMask, ShapeError
from divdrop.masks import MaskSet
from divdrop.numerics import make_rng

log = logging.getLogger(__name__)

WEIGHTS_FORMAT = "divdrop.weights/1"
ACTIVATIONS = ("leaky-relu", "relu", "celu")
LEAKY_SLOPE = 0.01
CELU_ALPHA = 1.0


@dataclass(frozen=True)
class NetworkSpec:
    widths: tuple[int, ...]
    activation: str = "leaky-relu"
    dropout_rate: float = 0.5
    dropout_layers: tuple[int, ...] | None = None
    task: str = "regression"
    n_classes: int | None = None

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2:
            raise ValueError("need at least an input and an output width")
        if min(widths) < 1:
            raise ValueError("all layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not 0.0 < self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in (0, 1)")
        hidden = tuple(range(1, len(widths) - 1))
        layers = hidden if self.dropout_layers is None else tuple(sorted(set(int(h) for h in self.dropout_layers)))
        if any(h not in hidden for h in layers):
            raise ValueError(f"dropout layers must be hidden layers {hidden}, got {layers}")
        object.__setattr__(self, "dropout_layers", layers)
        if self.task == "classification":
            if self.n_classes is None or self.n_classes < 2 or widths[-1] != self.n_classes:
                raise ValueError("classification needs n_classes >= 2 equal to the output width")
        elif self.task != "regression":
            raise ValueError(f"unknown task {self.task!r}")

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    def dropout_sizes(self) -> dict[int, int]:
        return {h: self.widths[h] for h in self.dropout_layers}

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "activation": self.activation,
            "dropout_rate": self.dropout_rate,
            "dropout_layers": list(self.dropout_layers),
            "task": self.task,
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        return cls(
            widths=tuple(d["widths"]),
            activation=d.get("activation", "leaky-relu"),
            dropout_rate=d.get("dropout_rate", 0.5),
            dropout_layers=tuple(d["dropout_layers"]) if d.get("dropout_layers") is not None else None,
            task=d.get("task", "regression"),
            n_classes=d.get("n_classes"),
        )


@dataclass(frozen=True, eq=False)
class NetworkWeights:
    """Learned parameters; ``weights[l]`` has shape ``(N_{l+1}, N_l)``."""

    spec: NetworkSpec
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.array(b, dtype=np.float64).ravel() for b in self.biases)
        widths = self.spec.widths
        if len(ws) != self.spec.depth or len(bs) != self.spec.depth:
            raise ShapeError(f"expected {self.spec.depth} layers of parameters")
        for l, (w, b) in enumerate(zip(ws, bs)):
            if w.shape != (widths[l + 1], widths[l]) or b.shape != (widths[l + 1],):
                raise ShapeError(f"layer {l + 1}: weight {w.shape}, bias {b.shape} do not match widths")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l + 1}: non-finite parameters")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def with_parameters(self, params: Sequence[np.ndarray]) -> NetworkWeights:
        return NetworkWeights(self.spec, tuple(params[0::2]), tuple(params[1::2]), dict(self.meta))

    def to_dict(self) -> dict:
        return {
            "format": WEIGHTS_FORMAT,
            "spec": self.spec.to_dict(),
            "layers": [
                {"weight": w.tolist(), "bias": b.tolist()} for w, b in zip(self.weights, self.biases)
            ],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> NetworkWeights:
        if doc.get("format") != WEIGHTS_FORMAT:
            raise ValueError(f"unsupported weights format {doc.get('format')!r}")
        spec = NetworkSpec.from_dict(doc["spec"])
        layers = doc["layers"]
        return cls(
            spec,
            tuple(np.array(l["weight"], dtype=np.float64).reshape(-1, spec.widths[i]) for i, l in enumerate(layers)),
            tuple(np.array(l["bias"], dtype=np.float64) for l in layers),
            doc.get("meta", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> NetworkWeights:
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_weights(spec: NetworkSpec, seed: int) -> NetworkWeights:
    """Glorot-uniform weights, zero biases."""
    rng = make_rng(seed, 0)
    ws, bs = [], []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return NetworkWeights(spec, tuple(ws), tuple(bs))


def activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "leaky-relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "celu":
        return np.where(z > 0, z, CELU_ALPHA * np.expm1(np.minimum(z, 0.0) / CELU_ALPHA))
    raise ValueError(name)


def activate_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "leaky-relu":
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "celu":
        return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0) / CELU_ALPHA))
    raise ValueError(name)


def _as_batch(net: NetworkWeights, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != net.spec.widths[0]:
        raise ShapeError(f"expected inputs of dimension {net.spec.widths[0]}, got shape {x.shape}")
    return x2, single


def _forward(net: NetworkWeights, x: np.ndarray, scales: dict[int, np.ndarray] | None):
    """Forward pass keeping what backprop needs.

    ``scales[h]`` multiplies the outputs of hidden layer ``h``; it may be a
    vector (one mask for the whole batch) or an ``(n, N_h)`` matrix.
    Returns pre-activations ``zs[l-1]`` and layer inputs ``inputs[l-1]``
    for ``l = 1..K``.
    """
    act = net.spec.activation
    h = x
    zs, inputs = [], []
    K = net.spec.depth
    for l in range(1, K + 1):
        inputs.append(h)
        z = h @ net.weights[l - 1].T + net.biases[l - 1]
        zs.append(z)
        if l < K:
            h = activate(act, z)
            if scales is not None and l in scales:
                h = h * scales[l]
    return zs, inputs


def forward_deterministic(net: NetworkWeights, x) -> np.ndarray:
    """Mask-free forward pass; the output head is linear (no softmax)."""
    x2, single = _as_batch(net, x)
    out = _forward(net, x2, None)[0][-1]
    return out[0] if single else out


def mask_scales(net: NetworkWeights, masks: MaskSet) -> dict[int, np.ndarray]:
    """Horvitz-Thompson multipliers ``m_j / pi_j`` per dropout layer."""
    expected = net.spec.dropout_sizes()
    got = {m.layer: m.size for m in masks.layers}
    if got != expected:
        raise ShapeError(f"mask layers {got} do not match dropout layers {expected}")
    for m in masks.layers:
        if np.any(m.marginals[m.kept] <= 0):
            raise InvalidMask(f"layer {m.layer}: kept neuron with zero inclusion probability")
    return {m.layer: m.scale() for m in masks.layers}


def forward_masked(net: NetworkWeights, x, masks: MaskSet) -> np.ndarray:
    """Forward pass with kept neurons reweighted by ``1/pi_j`` and dropped ones zeroed."""
    x2, single = _as_batch(net, x)
    out = _forward(net, x2, mask_scales(net, masks))[0][-1]
    return out[0] if single else out


def hidden_outputs(net: NetworkWeights, x, layer: int) -> np.ndarray:
    """Post-activation outputs ``O^h`` of hidden layer ``layer`` without dropout."""
    if not 1 <= layer < net.spec.depth:
        raise ShapeError(f"layer {layer} is not a hidden layer")
    x2, _ = _as_batch(net, x)
    zs, _ = _forward(net, x2, None)
    return activate(net.spec.activation, zs[layer - 1])


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(net: NetworkWeights, x, y, loss: str = "mse", scales=None):
    """Mean loss over the batch and gradients for ``net.parameters()`` order."""
    x2, _ = _as_batch(net, x)
    zs, inputs = _forward(net, x2, scales)
    out = zs[-1]
    n = x2.shape[0]
    if loss == "mse":
        target = np.asarray(y, dtype=np.float64).reshape(out.shape)
        resid = out - target
        value = float(np.mean(resid**2))
        delta = 2.0 * resid / resid.size
    elif loss == "cross-entropy":
        labels = np.asarray(y, dtype=np.int64).ravel()
        logp = _log_softmax(out)
        value = float(-logp[np.arange(n), labels].mean())
        delta = np.exp(logp)
        delta[np.arange(n), labels] -= 1.0
        delta /= n
    else:
        raise ValueError(f"unknown loss {loss!r}")
    act = net.spec.activation
    grads: list[np.ndarray] = [None] * (2 * net.spec.depth)
    for l in range(net.spec.depth, 0, -1):
        grads[2 * (l - 1)] = delta.T @ inputs[l - 1]
        grads[2 * (l - 1) + 1] = delta.sum(axis=0)
        if l > 1:
            dh = delta @ net.weights[l - 1]
            if scales is not None and (l - 1) in scales:
                dh = dh * scales[l - 1]
            delta = dh * activate_grad(act, zs[l - 2])
    return value, grads


def evaluate_loss(net: NetworkWeights, x, y, loss: str) -> float:
    return loss_and_grad(net, x, y, loss)[0]


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 10_000
    batch_size: int = 500
    check_interval: int = 100
    patience: int = 5
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: str | None = None
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1 or self.batch_size < 1 or self.check_interval < 1 or self.max_epochs < 1:
            raise ValueError("max_epochs, batch_size, check_interval and patience must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")

    def loss_for(self, spec: NetworkSpec) -> str:
        if self.loss is not None:
            return self.loss
        return "cross-entropy" if spec.task == "classification" else "mse"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _validation_split(n: int, fraction: float, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_val = int(round(fraction * n))
    if n < 2:
        return perm, perm
    n_val = min(max(n_val, 1), n - 1)
    return perm[: n - n_val], perm[n - n_val :]


def train(spec: NetworkSpec, x, y, config: TrainConfig = TrainConfig(), validation=None) -> NetworkWeights:
    """Mini-batch Adam with Bernoulli dropout and validation early stopping.

    Without an explicit ``validation=(x_val, y_val)`` the last
    ``validation_fraction`` of a seeded shuffle is held out. The returned
    weights are those at the best validation check; ``meta["train_log"]``
    records the check history.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError("training set must be a non-empty 2-D array")
    if y.shape[0] != x.shape[0]:
        raise ShapeError("features and targets disagree in length")
    loss = config.loss_for(spec)
    rng = make_rng(config.seed, 1)
    if validation is None:
        fit_idx, val_idx = _validation_split(x.shape[0], config.validation_fraction, rng)
        x_fit, y_fit, x_val, y_val = x[fit_idx], y[fit_idx], x[val_idx], y[val_idx]
    else:
        x_fit, y_fit = x, y
        x_val, y_val = np.asarray(validation[0], dtype=np.float64), np.asarray(validation[1])
    if loss == "mse":
        y_fit = y_fit.astype(np.float64).reshape(len(y_fit), -1)
        y_val = y_val.astype(np.float64).reshape(len(y_val), -1)

    net = init_weights(spec, config.seed)
    params = net.parameters()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    keep = 1.0 - spec.dropout_rate
    n_fit = x_fit.shape[0]
    step = 0
    best_val, best_params, best_epoch = np.inf, [p.copy() for p in params], 0
    bad_checks = 0
    history = []
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n_fit)
        for start in range(0, n_fit, config.batch_size):
            idx = order[start : start + config.batch_size]
            scales = {
                h: (rng.random((idx.size, spec.widths[h])) < keep) / keep for h in spec.dropout_layers
            }
            value, grads = loss_and_grad(net, x_fit[idx], y_fit[idx], loss, scales)
            if not np.isfinite(value):
                raise DivergedTraining(f"non-finite training loss at epoch {epoch}")
            step += 1
            b1c = 1.0 - config.beta1**step
            b2c = 1.0 - config.beta2**step
            for i, g in enumerate(grads):
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g
                params[i] = params[i] - config.learning_rate * (m[i] / b1c) / (np.sqrt(v[i] / b2c) + config.adam_eps)
            net = _rebuild(net, params)
        last = epoch == config.max_epochs
        if epoch % config.check_interval == 0 or (last and not history):
            val = evaluate_loss(net, x_val, y_val, loss)
            if not np.isfinite(val):
                raise DivergedTraining(f"non-finite validation loss at epoch {epoch}")
            history.append([epoch, val])
            if val < best_val:
                best_val, best_params, best_epoch = val, [p.copy() for p in params], epoch
                bad_checks = 0
            else:
                bad_checks += 1
                if bad_checks >= config.patience:
                    break
    log.debug("training stopped at epoch %d, best epoch %d, val %.4g", epoch, best_epoch, best_val)
    best = _rebuild(net, best_params)
    meta = {"train_log": {"epochs_run": epoch, "best_epoch": best_epoch, "best_val_loss": best_val, "checks": history}}
    return replace(best, meta=meta)


def _rebuild(net: NetworkWeights, params: list[np.ndarray]) -> NetworkWeights:
    # skips the validating constructor inside the hot loop
    new = object.__new__(NetworkWeights)
    object.__setattr__(new, "spec", net.spec)
    object.__setattr__(new, "weights", tuple(params[0::2]))
    object.__setattr__(new, "biases", tuple(params[1::2]))
    object.__setattr__(new, "meta", {})
    return new


def train_ensemble(spec: NetworkSpec, x, y, config: TrainConfig, size: int, validation=None) -> list[NetworkWeights]:
    """Independently trained members with seeds ``seed, seed+1, ...``."""
    if size < 1:
        raise ValueError("ensemble size must be >= 1")
    return [train(spec, x, y, replace(config, seed=config.seed + i), validation) for i in range(size)]
