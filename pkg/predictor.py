"""
Value predictor: a small fully connected network (ReLU hidden layers,
sigmoid output) trained full-batch with Adam on mean squared error.
The network is re-initialized and trained from scratch whenever the
training set grows.
"""

import json
import logging
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import Config
from features import NormStats, normalize

NETWORK_FORMAT_VERSION = 1


@dataclass(frozen=True)
class PredictorSpec:
    input_dim: int
    hidden: tuple = tuple(Config.PREDICTOR_HIDDEN)
    epochs: int = Config.PREDICTOR_EPOCHS
    learning_rate: float = Config.PREDICTOR_LEARNING_RATE
    seed: int = 0
    beta1: float = Config.ADAM_BETA1
    beta2: float = Config.ADAM_BETA2
    adam_eps: float = Config.ADAM_EPSILON

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be at least 1, got {self.input_dim}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if any(int(h) < 1 for h in self.hidden):
            raise ValueError(f"hidden layer sizes must be positive, got {self.hidden}")

    def with_seed(self, seed: int) -> 'PredictorSpec':
        data = asdict(self)
        data['seed'] = int(seed)
        return PredictorSpec(**data)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['hidden'] = list(self.hidden)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PredictorSpec':
        data = dict(data)
        if 'hidden' in data:
            data['hidden'] = tuple(int(h) for h in data['hidden'])
        return cls(**data)


class TrainSet:
    """Unique (key, features, true value) entries in insertion order"""

    def __init__(self):
        self.keys: List[str] = []
        self.features: List[np.ndarray] = []
        self.values: List[float] = []
        self._index: Dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def add(self, key: str, features, value: float) -> None:
        if key in self._index:
            raise ValueError(f"State {key} is already in the training set")
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"Training target for {key} must lie in [0, 1], got {value}")
        values = features.values if hasattr(features, 'values') else np.asarray(features, dtype=float)
        self._index[key] = len(self.keys)
        self.keys.append(key)
        self.features.append(np.asarray(values, dtype=float))
        self.values.append(value)

    def value_of(self, key: str) -> float:
        return self.values[self._index[key]]

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.stack(self.features), np.array(self.values, dtype=float)


@dataclass
class Network:
    spec: PredictorSpec
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    norm: Optional[NormStats] = None
    loss_history: List[float] = field(default_factory=list)

    @classmethod
    def zeros(cls, spec: PredictorSpec) -> 'Network':
        """All-zero parameters; predicts 0.5 everywhere"""
        sizes = [spec.input_dim, *spec.hidden, 1]
        return cls(
            spec=spec,
            weights=[np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
            biases=[np.zeros(b) for b in sizes[1:]],
        )

    def parameters(self) -> List[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def predict(self, raw_features) -> np.ndarray:
        """Apply the stored normalization, then forward"""
        x = np.asarray(raw_features, dtype=float)
        if self.norm is not None:
            x = self.norm.apply(x)
        return forward(self, x)


def init_network(spec: PredictorSpec, seed: Optional[int] = None) -> Network:
    """Uniform fan-in initialization U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases"""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    sizes = [spec.input_dim, *spec.hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return Network(spec=spec, weights=weights, biases=biases)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Clipping keeps the output strictly inside (0, 1)
    return 1.0 / (1.0 + np.exp(-np.clip(z, -30.0, 30.0)))


def _forward_pass(net: Network, x: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
    activations = [x]
    h = x
    last = len(net.weights) - 1
    for index, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        h = _sigmoid(z) if index == last else np.maximum(z, 0.0)
        activations.append(h)
    return h[:, 0], activations


def forward(net: Network, x) -> np.ndarray:
    """Prediction in (0, 1); a 1-D input returns a scalar, a 2-D batch returns one value per row"""
    x = np.asarray(x.values if hasattr(x, 'values') and not isinstance(x, np.ndarray) else x, dtype=float)
    single = x.ndim == 1
    batch = np.atleast_2d(x)
    if batch.shape[1] != net.spec.input_dim:
        raise ValueError(f"Expected input dimension {net.spec.input_dim}, got {batch.shape[1]}")
    y, _ = _forward_pass(net, batch)
    return float(y[0]) if single else y


def loss_and_gradients(net: Network, x: np.ndarray, targets: np.ndarray) -> Tuple[float, List[np.ndarray], List[np.ndarray]]:
    """Mean squared error and its gradients with respect to weights and biases"""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    targets = np.atleast_1d(np.asarray(targets, dtype=float))
    y, activations = _forward_pass(net, x)
    n = x.shape[0]
    error = y - targets
    loss = float(np.mean(error ** 2))

    grad_w: List[np.ndarray] = [None] * len(net.weights)
    grad_b: List[np.ndarray] = [None] * len(net.biases)

    # sigmoid output layer
    delta = (2.0 / n) * error * y * (1.0 - y)
    delta = delta[:, None]
    for index in range(len(net.weights) - 1, -1, -1):
        grad_w[index] = activations[index].T @ delta
        grad_b[index] = delta.sum(axis=0)
        if index > 0:
            delta = (delta @ net.weights[index].T) * (activations[index] > 0)
    return loss, grad_w, grad_b


class Adam:
    """Adaptive moment estimation over a list of parameter arrays"""

    def __init__(self, params: List[np.ndarray], lr: float, beta1: float, beta2: float, eps: float):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: List[np.ndarray]) -> None:
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g ** 2
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train(spec: PredictorSpec, data: TrainSet, norm: Optional[NormStats] = None) -> Network:
    """Fresh network, then spec.epochs full-batch Adam steps on normalized features.

    norm defaults to z-score statistics of the training features.
    loss_history holds the initial loss followed by the loss after each epoch.
    """
    if len(data) == 0:
        raise ValueError("Cannot train on an empty training set")

    raw, targets = data.arrays()
    if norm is None:
        x, norm = normalize(raw)
    else:
        x = norm.apply(raw)

    net = init_network(spec)
    net.norm = norm
    params = net.parameters()
    optimizer = Adam(params, spec.learning_rate, spec.beta1, spec.beta2, spec.adam_eps)

    loss, grad_w, grad_b = loss_and_gradients(net, x, targets)
    net.loss_history.append(loss)
    for _ in range(spec.epochs):
        optimizer.step([g for pair in zip(grad_w, grad_b) for g in pair])
        loss, grad_w, grad_b = loss_and_gradients(net, x, targets)
        net.loss_history.append(loss)

    logging.debug(f"Predictor trained on {len(data)} states: loss {net.loss_history[0]:.5f} -> {loss:.5f}")
    return net


def gradient_check(spec: PredictorSpec, x, target: float, samples: int = 100, step: float = 1e-5,
                   seed: Optional[int] = None) -> float:
    """Largest relative error between analytic and central-difference gradients of (y - target)^2"""
    net = init_network(spec, seed)
    x = np.atleast_2d(np.asarray(x.values if hasattr(x, 'values') and not isinstance(x, np.ndarray) else x,
                                 dtype=float))
    t = np.array([target], dtype=float)
    _, grad_w, grad_b = loss_and_gradients(net, x, t)
    params = net.parameters()
    grads = [g for pair in zip(grad_w, grad_b) for g in pair]

    rng = np.random.default_rng(spec.seed + 1 if seed is None else seed + 1)
    sizes = np.array([p.size for p in params])
    worst = 0.0
    for _ in range(samples):
        which = int(rng.choice(len(params), p=sizes / sizes.sum()))
        flat_index = int(rng.integers(params[which].size))
        position = np.unravel_index(flat_index, params[which].shape)

        original = params[which][position]
        params[which][position] = original + step
        loss_plus, _, _ = loss_and_gradients(net, x, t)
        params[which][position] = original - step
        loss_minus, _, _ = loss_and_gradients(net, x, t)
        params[which][position] = original

        numeric = (loss_plus - loss_minus) / (2.0 * step)
        analytic = float(grads[which][position])
        # Floor keeps round-off on near-zero gradients from dominating
        scale = max(abs(analytic) + abs(numeric), 1e-7)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst


def save_network(net: Network, path: str) -> None:
    """JSON weight dump"""
    payload = {
        'version': NETWORK_FORMAT_VERSION,
        'spec': net.spec.to_dict(),
        'weights': [w.tolist() for w in net.weights],
        'biases': [b.tolist() for b in net.biases],
        'norm': None if net.norm is None else {'mean': net.norm.mean.tolist(), 'std': net.norm.std.tolist()},
        'loss_history': net.loss_history,
    }
    with open(path, 'w') as handle:
        json.dump(payload, handle)


def load_network(path: str) -> Network:
    with open(path) as handle:
        payload = json.load(handle)
    if payload.get('version') != NETWORK_FORMAT_VERSION:
        raise ValueError(f"Unsupported network file version: {payload.get('version')}")
    norm = payload.get('norm')
    return Network(
        spec=PredictorSpec.from_dict(payload['spec']),
        weights=[np.array(w, dtype=float) for w in payload['weights']],
        biases=[np.array(b, dtype=float) for b in payload['biases']],
        norm=None if norm is None else NormStats(np.array(norm['mean']), np.array(norm['std'])),
        loss_history=list(payload.get('loss_history', [])),
    )
