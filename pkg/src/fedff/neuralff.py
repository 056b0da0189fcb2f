"""Small spectrally-normalized ReLU network for the steering feedforward.

Architecture is fixed at three linear layers ``2 -> n -> n -> 1`` with ReLU
after the first two.  Every weight matrix is divided by its spectral norm,
estimated with one power-iteration step from persisted vectors ``(u, v)``.
Training runs Adam on the mean-squared error; the spectral norm is
differentiated with the power-iteration vectors held constant.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ._jit import kernel

SN_EPS = 1e-12
CHECKPOINT_MAGIC = b"FFNN"
CHECKPOINT_VERSION = 1


class EmptyBatch(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


@dataclass
class MlpModel:
    """Network parameters plus the spectral-norm power-iteration state.

    ``weights[l]`` has shape ``(out, in)``; ``sn_u[l]`` has length ``out`` and
    ``sn_v[l]`` length ``in``.
    """

    weights: list
    biases: list
    sn_u: list
    sn_v: list

    def __post_init__(self):
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in self.biases]
        self.sn_u = [np.ascontiguousarray(u, dtype=np.float64) for u in self.sn_u]
        self.sn_v = [np.ascontiguousarray(v, dtype=np.float64) for v in self.sn_v]
        for w, b, u, v in zip(self.weights, self.biases, self.sn_u, self.sn_v):
            if b.shape != (w.shape[0],) or u.shape != (w.shape[0],) or v.shape != (w.shape[1],):
                raise ValueError("inconsistent layer shapes")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[0] != b.shape[1]:
                raise ValueError("layer dimensions do not chain")

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self) -> int:
        """Trainable parameter count (weights and biases)."""
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def flat_size(self) -> int:
        return self.n_params + sum(u.size + v.size for u, v in zip(self.sn_u, self.sn_v))

    def copy(self) -> "MlpModel":
        return MlpModel(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [u.copy() for u in self.sn_u],
            [v.copy() for v in self.sn_v],
        )

    def to_flat(self) -> np.ndarray:
        """All weights, then all biases, then per-layer ``u`` and ``v``."""
        parts = [w.ravel() for w in self.weights] + list(self.biases)
        for u, v in zip(self.sn_u, self.sn_v):
            parts += [u, v]
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, layer_dims, flat) -> "MlpModel":
        flat = np.asarray(flat, dtype=np.float64)
        shapes = list(zip(layer_dims[1:], layer_dims[:-1]))
        expected = sum(o * i + o for o, i in shapes) + sum(o + i for o, i in shapes)
        if flat.shape != (expected,):
            raise ValueError(f"flat vector has {flat.size} entries, expected {expected}")
        pos = 0

        def take(n):
            nonlocal pos
            out = flat[pos:pos + n].copy()
            pos += n
            return out

        weights = [take(o * i).reshape(o, i) for o, i in shapes]
        biases = [take(o) for o, _ in shapes]
        us, vs = [], []
        for o, i in shapes:
            us.append(take(o))
            vs.append(take(i))
        return cls(weights, biases, us, vs)

    def sn_segments(self) -> list[tuple[int, int]]:
        """``(start, stop)`` offsets of every power-iteration vector in the flat layout."""
        pos = self.n_params
        out = []
        for u, v in zip(self.sn_u, self.sn_v):
            out.append((pos, pos + u.size))
            pos += u.size
            out.append((pos, pos + v.size))
            pos += v.size
        return out

    def same_bits(self, other: "MlpModel") -> bool:
        return self.layer_dims == other.layer_dims and self.to_flat().tobytes() == other.to_flat().tobytes()


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class ClientDataset:
    """Rows of ``(kappa_a, v_a, delta_a)`` gathered on one client."""

    rows: np.ndarray
    client_id: str = ""
    delta_max: float | None = field(default=None, repr=False)

    def __post_init__(self):
        rows = np.ascontiguousarray(self.rows, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(rows)):
            raise ValueError("dataset contains non-finite values")
        if self.delta_max is not None and np.any(np.abs(rows[:, 2]) > self.delta_max + 1e-12):
            raise ValueError("steering labels exceed delta_max")
        self.rows = rows

    def __len__(self):
        return len(self.rows)

    @classmethod
    def concat(cls, parts, client_id=""):
        return cls(np.concatenate([p.rows for p in parts]) if parts else np.empty((0, 3)), client_id)


class Gradients(NamedTuple):
    weights: list
    biases: list

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights] + list(self.biases))


# ---------------------------------------------------------------------------
# spectral normalization


@kernel
def _power_step(w, u):
    v = w.T @ u
    v = v / (np.sqrt(np.sum(v * v)) + 1e-12)
    wv = w @ v
    u_new = wv / (np.sqrt(np.sum(wv * wv)) + 1e-12)
    sigma = np.sum(u_new * (w @ v))
    return u_new, v, sigma


def spectral_normalize(weight, sn_vectors):
    """One power-iteration step.

    ``sn_vectors`` is ``(u, v)``; only ``u`` seeds the iteration.  Returns
    ``(weight / sigma, (u', v'), sigma)``.
    """
    w = np.ascontiguousarray(weight, dtype=np.float64)
    u = np.ascontiguousarray(sn_vectors[0], dtype=np.float64)
    u_new, v_new, sigma = _power_step(w, u)
    return w / max(sigma, SN_EPS), (u_new, v_new), float(sigma)


def _iterated_vectors(model: MlpModel):
    us, vs, sigmas = [], [], []
    for w, u in zip(model.weights, model.sn_u):
        u2, v2, s = _power_step(w, u)
        us.append(u2)
        vs.append(v2)
        sigmas.append(s)
    return us, vs, sigmas


def normalized_weights(model: MlpModel) -> list[np.ndarray]:
    """Effective weights used at inference (stored vectors are not updated)."""
    _, _, sigmas = _iterated_vectors(model)
    return [w / max(s, SN_EPS) for w, s in zip(model.weights, sigmas)]


# ---------------------------------------------------------------------------
# forward / loss / backward


def _forward_rows(model: MlpModel, x: np.ndarray) -> np.ndarray:
    h = x
    wn = normalized_weights(model)
    for layer, (w, b) in enumerate(zip(wn, model.biases)):
        h = h @ w.T + b
        if layer < len(wn) - 1:
            h = np.maximum(h, 0.0)
    return h[:, 0]


def forward(model: MlpModel, kappa, v):
    """Network output for curvature ``kappa`` and speed ``v`` (scalars or arrays)."""
    k = np.asarray(kappa, dtype=np.float64)
    s = np.asarray(v, dtype=np.float64)
    k, s = np.broadcast_arrays(k, s)
    out = _forward_rows(model, np.column_stack([k.ravel(), s.ravel()]))
    if k.ndim == 0:
        return float(out[0])
    return out.reshape(k.shape)


def _as_rows(batch) -> np.ndarray:
    rows = batch.rows if isinstance(batch, ClientDataset) else np.asarray(batch, dtype=np.float64)
    rows = rows.reshape(-1, 3)
    if len(rows) == 0:
        raise EmptyBatch("batch is empty")
    return rows


def mse_loss(model: MlpModel, batch) -> float:
    rows = _as_rows(batch)
    r = rows[:, 2] - _forward_rows(model, rows[:, :2])
    return float(np.mean(r * r))


@kernel
def _batch_grad(W1, b1, W2, b2, W3, b3, u1, v1, u2, v2, u3, v3, X, Y):
    """MSE loss and gradients with the power-iteration vectors held fixed."""
    s1 = max(np.sum(u1 * (W1 @ v1)), 1e-12)
    s2 = max(np.sum(u2 * (W2 @ v2)), 1e-12)
    s3 = max(np.sum(u3 * (W3 @ v3)), 1e-12)
    N1 = W1 / s1
    N2 = W2 / s2
    N3 = W3 / s3
    Z1 = X @ N1.T + b1
    A1 = np.maximum(Z1, 0.0)
    Z2 = A1 @ N2.T + b2
    A2 = np.maximum(Z2, 0.0)
    out = A2 @ N3.T + b3
    n = X.shape[0]
    res = out[:, 0] - Y
    loss = np.sum(res * res) / n
    dy = (2.0 / n) * res.reshape(n, 1)
    G3 = dy.T @ A2
    db3 = np.sum(dy, axis=0)
    dZ2 = (dy @ N3) * (Z2 > 0.0)
    G2 = dZ2.T @ A1
    db2 = np.sum(dZ2, axis=0)
    dZ1 = (dZ2 @ N2) * (Z1 > 0.0)
    G1 = dZ1.T @ X
    db1 = np.sum(dZ1, axis=0)
    # d(W/s)/dW with ds/dW = u v^T
    dW1 = G1 / s1 - (np.sum(G1 * W1) / (s1 * s1)) * np.outer(u1, v1)
    dW2 = G2 / s2 - (np.sum(G2 * W2) / (s2 * s2)) * np.outer(u2, v2)
    dW3 = G3 / s3 - (np.sum(G3 * W3) / (s3 * s3)) * np.outer(u3, v3)
    return loss, dW1, db1, dW2, db2, dW3, db3


def _check_arch(model: MlpModel):
    if len(model.weights) != 3 or model.layer_dims[0] != 2 or model.layer_dims[-1] != 1:
        raise ValueError(f"unsupported architecture {model.layer_dims}")


def backward(model: MlpModel, batch) -> Gradients:
    """Exact gradient of :func:`mse_loss` w.r.t. all weights and biases.

    The power-iteration vectors are advanced once (as in the forward pass)
    and then treated as constants.
    """
    _check_arch(model)
    rows = _as_rows(batch)
    us, vs, _ = _iterated_vectors(model)
    X = np.ascontiguousarray(rows[:, :2])
    Y = np.ascontiguousarray(rows[:, 2])
    (W1, W2, W3), (b1, b2, b3) = model.weights, model.biases
    _, dW1, db1, dW2, db2, dW3, db3 = _batch_grad(
        W1, b1, W2, b2, W3, b3, us[0], vs[0], us[1], vs[1], us[2], vs[2], X, Y
    )
    return Gradients([dW1, dW2, dW3], [db1, db2, db3])


# ---------------------------------------------------------------------------
# training


@kernel
def _adam_update(p, g, m, s, lr, beta1, beta2, eps, t):
    m[:] = beta1 * m + (1.0 - beta1) * g
    s[:] = beta2 * s + (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** t)
    shat = s / (1.0 - beta2 ** t)
    p -= lr * mhat / (np.sqrt(shat) + eps)


@kernel
def train_kernel(W1, b1, W2, b2, W3, b3, u1, v1, u2, v2, u3, v3,
                 data, orders, batch_size, lr, beta1, beta2, eps):
    """Minibatch Adam over ``orders.shape[0]`` epochs; parameters update in place.

    Returns the mean per-sample training loss of every epoch (measured on each
    batch before its update).
    """
    n_epochs, n = orders.shape
    mW1 = np.zeros_like(W1); sW1 = np.zeros_like(W1)
    mW2 = np.zeros_like(W2); sW2 = np.zeros_like(W2)
    mW3 = np.zeros_like(W3); sW3 = np.zeros_like(W3)
    mb1 = np.zeros_like(b1); sb1 = np.zeros_like(b1)
    mb2 = np.zeros_like(b2); sb2 = np.zeros_like(b2)
    mb3 = np.zeros_like(b3); sb3 = np.zeros_like(b3)
    losses = np.zeros(n_epochs)
    t = 0
    for e in range(n_epochs):
        total = 0.0
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            m = stop - start
            X = np.empty((m, 2))
            Y = np.empty(m)
            for j in range(m):
                r = orders[e, start + j]
                X[j, 0] = data[r, 0]
                X[j, 1] = data[r, 1]
                Y[j] = data[r, 2]
            # power iteration, persisted
            a, b, _ = _power_step(W1, u1)
            u1[:] = a
            v1[:] = b
            a, b, _ = _power_step(W2, u2)
            u2[:] = a
            v2[:] = b
            a, b, _ = _power_step(W3, u3)
            u3[:] = a
            v3[:] = b
            loss, dW1, db1, dW2, db2, dW3, db3 = _batch_grad(
                W1, b1, W2, b2, W3, b3, u1, v1, u2, v2, u3, v3, X, Y
            )
            total += loss * m
            t += 1
            _adam_update(W1, dW1, mW1, sW1, lr, beta1, beta2, eps, t)
            _adam_update(b1, db1, mb1, sb1, lr, beta1, beta2, eps, t)
            _adam_update(W2, dW2, mW2, sW2, lr, beta1, beta2, eps, t)
            _adam_update(b2, db2, mb2, sb2, lr, beta1, beta2, eps, t)
            _adam_update(W3, dW3, mW3, sW3, lr, beta1, beta2, eps, t)
            _adam_update(b3, db3, mb3, sb3, lr, beta1, beta2, eps, t)
        losses[e] = total / n
    return losses


@dataclass
class TrainResult:
    model: MlpModel
    epoch_losses: np.ndarray

    @property
    def final_loss(self) -> float:
        return float(self.epoch_losses[-1]) if len(self.epoch_losses) else float("nan")


def epoch_orders(n_rows: int, epochs: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    orders = np.empty((epochs, n_rows), dtype=np.int64)
    for e in range(epochs):
        orders[e] = rng.permutation(n_rows)
    return orders


def fit(model: MlpModel, data, cfg: TrainConfig) -> TrainResult:
    """Train a copy of ``model`` for ``cfg.epochs`` epochs with fresh Adam state."""
    _check_arch(model)
    rows = data.rows if isinstance(data, ClientDataset) else np.asarray(data, dtype=np.float64).reshape(-1, 3)
    if len(rows) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    out = model.copy()
    if cfg.epochs == 0:
        return TrainResult(out, np.zeros(0))
    orders = epoch_orders(len(rows), cfg.epochs, cfg.rng_seed)
    (W1, W2, W3), (b1, b2, b3) = out.weights, out.biases
    (u1, u2, u3), (v1, v2, v3) = out.sn_u, out.sn_v
    losses = train_kernel(
        W1, b1, W2, b2, W3, b3, u1, v1, u2, v2, u3, v3,
        np.ascontiguousarray(rows), orders, int(cfg.batch_size), float(cfg.learning_rate),
        float(cfg.adam_beta1), float(cfg.adam_beta2), float(cfg.adam_eps),
    )
    if not all(np.all(np.isfinite(p)) for p in out.weights + out.biases):
        raise FloatingPointError("training produced non-finite parameters")
    return TrainResult(out, np.asarray(losses))


def train_local(model: MlpModel, data, cfg: TrainConfig) -> MlpModel:
    return fit(model, data, cfg).model


def init_model(n_neurons: int = 10, seed: int = 0) -> MlpModel:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, random unit power-iteration vectors."""
    if n_neurons < 1:
        raise ValueError("n_neurons must be >= 1")
    rng = np.random.default_rng(seed)
    dims = [2, n_neurons, n_neurons, 1]
    weights, biases, us, vs = [], [], [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
        u = rng.standard_normal(fan_out)
        v = rng.standard_normal(fan_in)
        us.append(u / np.linalg.norm(u))
        vs.append(v / np.linalg.norm(v))
    return MlpModel(weights, biases, us, vs)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(model: MlpModel) -> bytes:
    head = [CHECKPOINT_MAGIC, struct.pack("<HH", CHECKPOINT_VERSION, len(model.weights))]
    for w in model.weights:
        head.append(struct.pack("<II", *w.shape))
    return b"".join(head) + model.to_flat().astype("<f8").tobytes()


def model_from_checkpoint_bytes(data: bytes) -> MlpModel:
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not an FFNN checkpoint")
    version, n_layers = struct.unpack_from("<HH", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 8
    shapes = []
    for _ in range(n_layers):
        shapes.append(struct.unpack_from("<II", data, pos))
        pos += 8
    dims = [shapes[0][1]] + [r for r, _ in shapes]
    flat = np.frombuffer(data, dtype="<f8", offset=pos).astype(np.float64)
    return MlpModel.from_flat(dims, flat)


def save_checkpoint(model: MlpModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> MlpModel:
    return model_from_checkpoint_bytes(Path(path).read_bytes())


def model_to_json(model: MlpModel) -> str:
    doc = {
        "version": CHECKPOINT_VERSION,
        "layer_dims": model.layer_dims,
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "sn_vectors": [{"u": u.tolist(), "v": v.tolist()} for u, v in zip(model.sn_u, model.sn_v)],
    }
    return json.dumps(doc, indent=1)


def model_from_json(text: str) -> MlpModel:
    doc = json.loads(text)
    return MlpModel(
        [np.array(w, dtype=np.float64) for w in doc["weights"]],
        [np.array(b, dtype=np.float64) for b in doc["biases"]],
        [np.array(s["u"], dtype=np.float64) for s in doc["sn_vectors"]],
        [np.array(s["v"], dtype=np.float64) for s in doc["sn_vectors"]],
    )
