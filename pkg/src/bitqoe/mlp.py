"""One-hidden-layer perceptron regressor trained with Adadelta.

Hidden layer uses tanh, the output unit softplus. Inputs are standardized with
training-set statistics that travel with the model.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np

from .data import QualityDataset

MLP_FORMAT = "bitqoe.mlp"
MLP_FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpParams:
    hidden_units: int | None = None  # None: one unit per input feature
    batch_size: int = 4
    epochs: int = 440
    init_half_range: float = 0.05
    adadelta_rho: float = 0.95
    adadelta_eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.hidden_units is not None and self.hidden_units < 1:
            raise ValueError("hidden_units must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.init_half_range <= 0:
            raise ValueError("init_half_range must be positive")
        if not 0 < self.adadelta_rho < 1:
            raise ValueError("adadelta_rho must lie in (0, 1)")


def init_uniform(shape, half_range: float, seed) -> np.ndarray:
    if half_range <= 0:
        raise ValueError("half_range must be positive")
    return np.random.default_rng(seed).uniform(-half_range, half_range, shape)


@numba.njit(cache=True)
def _softplus(u):
    out = np.empty_like(u)
    for i in range(u.size):
        v = u[i]
        if v > 0:
            out[i] = v + np.log1p(np.exp(-v))
        else:
            out[i] = np.log1p(np.exp(v))
    return out


@numba.njit(cache=True)
def _sigmoid(u):
    out = np.empty_like(u)
    for i in range(u.size):
        v = u[i]
        if v >= 0:
            out[i] = 1.0 / (1.0 + np.exp(-v))
        else:
            e = np.exp(v)
            out[i] = e / (1.0 + e)
    return out


@numba.njit(cache=True)
def _forward(Xn, W1, b1, W2, b2):
    h = np.tanh(Xn @ W1 + b1)
    u = h @ W2 + b2
    return h, u, _softplus(u)


@numba.njit(cache=True)
def _grad(Xn, y, W1, b1, W2, b2):
    """Batch-mean squared error and its exact gradients."""
    h, u, out = _forward(Xn, W1, b1, W2, b2)
    m = Xn.shape[0]
    err = out - y
    loss = np.sum(err * err) / m
    gu = 2.0 * err / m * _sigmoid(u)
    gW2 = h.T @ gu
    gb2 = np.sum(gu)
    gh = np.outer(gu, W2) * (1.0 - h * h)
    gW1 = Xn.T @ gh
    gb1 = gh.sum(axis=0)
    return loss, gW1, gb1, gW2, gb2


@numba.njit(cache=True)
def _adadelta_step(x, g, eg, ed, rho, eps):
    eg[:] = rho * eg + (1.0 - rho) * g * g
    dx = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
    ed[:] = rho * ed + (1.0 - rho) * dx * dx
    x += dx


@numba.njit(cache=True)
def _train(Xn, y, W1, b1, W2, b2, orders, batch, rho, eps):
    n = Xn.shape[0]
    epochs = orders.shape[0]
    # b2 is carried as a length-1 array so it updates in place like the rest
    bb2 = np.array([b2])
    gW1_acc, dW1_acc = np.zeros_like(W1), np.zeros_like(W1)
    gb1_acc, db1_acc = np.zeros_like(b1), np.zeros_like(b1)
    gW2_acc, dW2_acc = np.zeros_like(W2), np.zeros_like(W2)
    gb2_acc, db2_acc = np.zeros(1), np.zeros(1)
    history = np.empty(epochs)
    bad_epoch = -1
    bad_batch = -1
    for ep in range(epochs):
        total = 0.0
        bi = 0
        for start in range(0, n, batch):
            stop = min(start + batch, n)
            rows = orders[ep, start:stop]
            Xb = Xn[rows]
            yb = y[rows]
            loss, gW1, gb1, gW2, gb2 = _grad(Xb, yb, W1, b1, W2, bb2[0])
            if not np.isfinite(loss):
                bad_epoch = ep
                bad_batch = bi
                return W1, b1, W2, bb2[0], history[:ep], bad_epoch, bad_batch
            total += loss * (stop - start)
            _adadelta_step(W1, gW1, gW1_acc, dW1_acc, rho, eps)
            _adadelta_step(b1, gb1, gb1_acc, db1_acc, rho, eps)
            _adadelta_step(W2, gW2, gW2_acc, dW2_acc, rho, eps)
            _adadelta_step(bb2, np.array([gb2]), gb2_acc, db2_acc, rho, eps)
            bi += 1
        history[ep] = total / n
    return W1, b1, W2, bb2[0], history, bad_epoch, bad_batch


@dataclass(frozen=True, eq=False)
class MlpModel:
    mean: np.ndarray
    std: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: float
    meta: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden_units(self) -> int:
        return self.W1.shape[1]

    def normalize(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        if not np.all(np.isfinite(X)):
            raise ValueError("non-finite input")
        return np.ascontiguousarray((X - self.mean) / self.std)

    def predict(self, X) -> np.ndarray:
        return _forward(self.normalize(X), self.W1, self.b1, self.W2, float(self.b2))[2]

    def to_json(self) -> str:
        return json.dumps({
            "format": MLP_FORMAT, "version": MLP_FORMAT_VERSION,
            "activations": {"hidden": "tanh", "output": "softplus"},
            "mean": self.mean.tolist(), "std": self.std.tolist(),
            "W1": self.W1.tolist(), "b1": self.b1.tolist(),
            "W2": self.W2.tolist(), "b2": float(self.b2),
            "meta": self.meta,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MlpModel":
        d = json.loads(text)
        if d.get("format") != MLP_FORMAT:
            raise ValueError("not a serialized MLP model")
        if d.get("version") != MLP_FORMAT_VERSION:
            raise ValueError(f"unsupported MLP format version {d.get('version')}")
        arr = lambda k: np.asarray(d[k], dtype=np.float64)  # noqa: E731
        return cls(arr("mean"), arr("std"), arr("W1"), arr("b1"), arr("W2"),
                   float(d["b2"]), d.get("meta", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def forward(model: MlpModel, features) -> float | np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    out = model.predict(x)
    return float(out[0]) if x.ndim == 1 else out


def gradient(model: MlpModel, X, y) -> dict[str, np.ndarray | float]:
    """Exact gradients of the batch-mean squared error w.r.t. every parameter."""
    Xn = model.normalize(X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if Xn.shape[0] == 0 or Xn.shape[0] != y.size:
        raise ValueError("batch must be non-empty and match target length")
    loss, gW1, gb1, gW2, gb2 = _grad(Xn, y, model.W1, model.b1, model.W2, float(model.b2))
    return {"loss": float(loss), "W1": gW1, "b1": gb1, "W2": gW2, "b2": float(gb2)}


def batch_loss(model: MlpModel, X, y) -> float:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    return float(np.mean((model.predict(X) - y) ** 2))


def init_model(n_features: int, params: MlpParams, mean=None, std=None) -> MlpModel:
    hidden = params.hidden_units or n_features
    W1 = init_uniform((n_features, hidden), params.init_half_range, [params.seed, 1])
    W2 = init_uniform(hidden, params.init_half_range, [params.seed, 2])
    mean = np.zeros(n_features) if mean is None else np.asarray(mean, dtype=np.float64)
    std = np.ones(n_features) if std is None else np.asarray(std, dtype=np.float64)
    return MlpModel(mean, std, W1, np.zeros(hidden), W2, 0.0)


def train_adadelta(ds: QualityDataset, params: MlpParams = MlpParams()) -> MlpModel:
    """Mini-batch Adadelta on MSE; rows are reshuffled every epoch."""
    if ds.n_samples < params.batch_size:
        raise ValueError(f"need at least {params.batch_size} samples")
    X, y = ds.X, np.ascontiguousarray(ds.mos)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    model = init_model(ds.n_features, params, mean, std)
    Xn = model.normalize(X)
    rng = np.random.default_rng([params.seed, 3])
    orders = np.array([rng.permutation(ds.n_samples) for _ in range(params.epochs)])
    W1, b1, W2, b2, hist, bad_ep, bad_b = _train(
        Xn, y, model.W1.copy(), model.b1.copy(), model.W2.copy(), 0.0,
        orders, params.batch_size, params.adadelta_rho, params.adadelta_eps)
    if bad_ep >= 0:
        raise TrainingError(f"non-finite loss at epoch {bad_ep}, batch {bad_b}")
    meta = {"final_train_mse": float(hist[-1]), "loss_history": hist.tolist(),
            "params": asdict(params), "hidden_units": model.hidden_units}
    return MlpModel(mean, std, W1, b1, W2, float(b2), meta)


def load_mlp(path: str | Path) -> MlpModel:
    return MlpModel.from_json(Path(path).read_text(encoding="utf-8"))
