"""Federated training of the steering feedforward (FedAvg over client laps).

Every round the server samples clients, each client drives one lap of its
track with the current global network as feedforward, trains on the rows it
just recorded, and sends back its parameters.  The server averages them
(weighted by sample count by default) into the next global model and scores
it on the held-out test tracks.
"""

from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .control import ControlGains, Diverged, NeuralFeedforward, mean_tracking_error, run_lap
from .neuralff import ClientDataset, MlpModel, TrainConfig, fit, init_model
from .trajgen import CLIENT_INDEX, ROMAN, Trajectory, roman_sorted
from .vehicle import VehicleParams

logger = logging.getLogger(__name__)

UPDATE_MAGIC = b"FFUP"
UPDATE_VERSION = 1
_UPDATE_HEAD = struct.Struct("<4sHIIQI")


class ShapeMismatch(ValueError):
    pass


class EmptyUpdateSet(ValueError):
    pass


class AllClientsDiverged(RuntimeError):
    pass


def derive_seed(master: int, *keys: int) -> int:
    """Independent 63-bit seed for ``(master, *keys)``.

    Counter-style derivation: adding clients or rounds never shifts the
    streams of existing ones.
    """
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFF, *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def client_number(client_id: str) -> int:
    return CLIENT_INDEX.get(client_id, 0) or int(client_id)


def client_name(number: int) -> str:
    return ROMAN[number - 1] if 1 <= number <= len(ROMAN) else str(number)


# ---------------------------------------------------------------------------
# model updates and their wire format


@dataclass(frozen=True, eq=False)
class ModelUpdate:
    client_id: str
    round_index: int
    sample_count: int
    params: np.ndarray

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        object.__setattr__(self, "params", np.ascontiguousarray(self.params, dtype=np.float64))

    def encode(self) -> bytes:
        """Length-prefixed ``FFUP`` frame."""
        body = _UPDATE_HEAD.pack(
            UPDATE_MAGIC, UPDATE_VERSION, client_number(self.client_id),
            self.round_index, self.sample_count, self.params.size,
        ) + self.params.astype("<f8").tobytes()
        return struct.pack("<I", len(body)) + body

    @classmethod
    def decode(cls, frame: bytes) -> "ModelUpdate":
        (length,) = struct.unpack_from("<I", frame, 0)
        if len(frame) != 4 + length:
            raise ValueError("frame length does not match payload")
        magic, version, cid, rnd, count, n = _UPDATE_HEAD.unpack_from(frame, 4)
        if magic != UPDATE_MAGIC:
            raise ValueError("not an FFUP frame")
        if version != UPDATE_VERSION:
            raise ValueError(f"unsupported update version {version}")
        off = 4 + _UPDATE_HEAD.size
        if length - _UPDATE_HEAD.size != 8 * n:
            raise ValueError("parameter count does not match payload")
        params = np.frombuffer(frame, dtype="<f8", count=n, offset=off).astype(np.float64)
        return cls(client_name(cid), rnd, count, params)


def iter_frames(data: bytes):
    pos = 0
    while pos < len(data):
        (length,) = struct.unpack_from("<I", data, pos)
        yield data[pos:pos + 4 + length]
        pos += 4 + length


def write_round_log(path, updates: Iterable[ModelUpdate]) -> None:
    Path(path).write_bytes(b"".join(u.encode() for u in updates))


def read_round_log(path) -> list[ModelUpdate]:
    return [ModelUpdate.decode(f) for f in iter_frames(Path(path).read_bytes())]


# ---------------------------------------------------------------------------
# aggregation


def fedavg(updates: Sequence[ModelUpdate], weighting: str = "sample", sn_segments=None) -> np.ndarray:
    """Coordinate-wise weighted mean of client parameter vectors.

    Sums are exactly rounded (``math.fsum``) around the coordinate-wise
    minimum, which makes the result independent of update order, exact for
    identical inputs and confined to the clients' coordinate range.  Slices in
    ``sn_segments`` (power-iteration vectors) are rescaled to unit length.
    """
    if not updates:
        raise EmptyUpdateSet("no updates to aggregate")
    size = updates[0].params.size
    if any(u.params.size != size for u in updates):
        raise ShapeMismatch("client parameter vectors differ in length")
    if weighting == "sample":
        w = [int(u.sample_count) for u in updates]
    elif weighting == "uniform":
        w = [1] * len(updates)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    # integer weights reduced by their gcd, so equal counts reproduce the uniform mean bit for bit
    g = math.gcd(*w)
    w = [wi // g for wi in w]
    stack = np.stack([u.params for u in updates])
    lo = stack.min(axis=0)
    hi = stack.max(axis=0)
    dev = stack - lo
    total = math.fsum(w)
    out = np.empty(size)
    for j in range(size):
        out[j] = lo[j] + math.fsum(wi * d for wi, d in zip(w, dev[:, j])) / total
    out = np.clip(out, lo, hi)
    for start, stop in sn_segments or ():
        norm = float(np.linalg.norm(out[start:stop]))
        if norm > 0 and abs(norm - 1.0) > 1e-12:
            out[start:stop] /= norm
    return out


def sample_clients(pool: Iterable[str], fraction: float, round_index: int, rng_seed: int) -> list[str]:
    pool = roman_sorted(set(pool))
    if not pool:
        raise ValueError("client pool is empty")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    if fraction == 1:
        return pool
    k = math.ceil(fraction * len(pool))
    rng = np.random.default_rng(derive_seed(rng_seed, 0x5A, round_index))
    picked = rng.choice(len(pool), size=k, replace=False)
    return roman_sorted(pool[i] for i in picked)


# ---------------------------------------------------------------------------
# clients


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 5
    epochs: int = 1
    client_fraction: float = 1.0
    rng_seed: int = 0
    weighting: str = "sample"
    accumulate_data: bool = False
    n_neurons: int = 10
    workers: int = 1

    def __post_init__(self):
        if self.rounds < 0 or self.epochs < 0:
            raise ValueError("rounds and epochs must be >= 0")
        if not 0 < self.client_fraction <= 1:
            raise ValueError("client_fraction must be in (0, 1]")
        if self.weighting not in ("sample", "uniform"):
            raise ValueError("weighting must be 'sample' or 'uniform'")


@dataclass
class World:
    """Everything a simulated client needs: tracks, plant, controller, optimizer."""

    trajectories: dict
    params: VehicleParams = field(default_factory=VehicleParams)
    gains: ControlGains = field(default_factory=ControlGains)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def trajectory(self, client_id: str) -> Trajectory:
        return self.trajectories[client_id]


@dataclass
class ClientStats:
    train_loss: float
    sample_count: int
    lap_mte: float


@dataclass
class RoundReport:
    round: int
    clients: dict = field(default_factory=dict)  # client -> ClientStats
    test_mte: dict = field(default_factory=dict)  # client -> MTE of new global model
    skipped: list = field(default_factory=list)

    @property
    def mean_test_mte(self) -> float:
        return float(np.mean(list(self.test_mte.values()))) if self.test_mte else float("nan")


def _client_round(client_id, global_params, layer_dims, epochs, world, round_index, prior_rows=None):
    local = MlpModel.from_flat(layer_dims, global_params)
    log = run_lap(world.trajectory(client_id), NeuralFeedforward(local), world.gains, world.params)
    rows = log.training_rows()
    if prior_rows is not None and len(prior_rows):
        rows = np.concatenate([prior_rows, rows])
    cfg = replace(world.train, epochs=epochs, rng_seed=derive_seed(world.seed, client_number(client_id), round_index))
    result = fit(local, ClientDataset(rows, client_id), cfg)
    update = ModelUpdate(client_id, round_index, len(rows), result.model.to_flat())
    stats = ClientStats(result.final_loss, len(rows), mean_tracking_error(log))
    return update, stats, rows


def client_task(client_id: str, global_params, E: int, world: World, round_index: int = 0,
                layer_dims=None) -> ModelUpdate:
    """One ClientTask: lap with the global model as feedforward, then ``E`` local epochs."""
    layer_dims = layer_dims or _dims_for(len(global_params))
    update, _, _ = _client_round(client_id, np.asarray(global_params), layer_dims, E, world, round_index)
    return update


def _dims_for(flat_size: int) -> list[int]:
    # 2 -> n -> n -> 1: (n^2 + 5n + 1) trainable + (4n + 3) power-iteration entries
    for n in range(1, 1024):
        if n * n + 9 * n + 4 == flat_size:
            return [2, n, n, 1]
    raise ShapeMismatch(f"cannot infer layer sizes from {flat_size} parameters")


def evaluate(model: MlpModel, clients: Iterable[str], world: World) -> dict[str, float]:
    """Lap MTE of FB + neural FF on each client; ``nan`` marks a diverged lap."""
    out = {}
    ff = NeuralFeedforward(model)
    for cid in roman_sorted(clients):
        try:
            out[cid] = mean_tracking_error(run_lap(world.trajectory(cid), ff, world.gains, world.params))
        except Diverged:
            logger.warning("evaluation lap on %s diverged", cid)
            out[cid] = float("nan")
    return out


# worker-process side of the loopback transport
_WORKER_WORLD = None


def _init_worker(world):
    global _WORKER_WORLD
    _WORKER_WORLD = world


def _worker_round(args):
    client_id, global_frame, layer_dims, epochs, round_index, prior_rows = args
    global_params = ModelUpdate.decode(global_frame).params
    try:
        update, stats, rows = _client_round(
            client_id, global_params, layer_dims, epochs, _WORKER_WORLD, round_index, prior_rows
        )
    except Diverged as exc:
        return client_id, None, str(exc), None
    return client_id, update.encode(), stats, rows


def run_federation(cfg: FederationConfig, train_clients, test_clients, world: World,
                   round_log_dir=None, initial_model: MlpModel | None = None):
    """Run ``cfg.rounds`` rounds of FedAvg; returns ``(final_model, reports)``."""
    train_clients = roman_sorted(set(train_clients))
    test_clients = roman_sorted(set(test_clients))
    if set(train_clients) & set(test_clients):
        raise ValueError("train and test clients must be disjoint")
    model = initial_model.copy() if initial_model is not None else init_model(
        cfg.n_neurons, derive_seed(world.seed, 0xC0FFEE)
    )
    dims = model.layer_dims
    segments = model.sn_segments()
    history: dict[str, np.ndarray] = {}
    reports = []
    pool = None
    if cfg.workers > 1:
        pool = ProcessPoolExecutor(max_workers=cfg.workers, initializer=_init_worker, initargs=(world,))
    try:
        for g in range(cfg.rounds):
            selected = sample_clients(train_clients, cfg.client_fraction, g, cfg.rng_seed)
            global_params = model.to_flat()
            report = RoundReport(round=g)
            updates = []
            if pool is None:
                for cid in selected:
                    try:
                        upd, stats, rows = _client_round(
                            cid, global_params, dims, cfg.epochs, world, g, history.get(cid)
                        )
                    except Diverged as exc:
                        logger.warning("round %d: client %s skipped (%s)", g, cid, exc)
                        report.skipped.append(cid)
                        continue
                    updates.append(upd)
                    report.clients[cid] = stats
                    if cfg.accumulate_data:
                        history[cid] = rows
            else:
                frame = ModelUpdate("0", g, 1, global_params).encode()
                jobs = [(cid, frame, dims, cfg.epochs, g, history.get(cid)) for cid in selected]
                # barrier: map() yields in submission order once every client is done
                for cid, blob, stats, rows in pool.map(_worker_round, jobs):
                    if blob is None:
                        logger.warning("round %d: client %s skipped (%s)", g, cid, stats)
                        report.skipped.append(cid)
                        continue
                    updates.append(ModelUpdate.decode(blob))
                    report.clients[cid] = stats
                    if cfg.accumulate_data:
                        history[cid] = rows
            if not updates:
                raise AllClientsDiverged(f"round {g}: no client produced a valid update")
            if round_log_dir is not None:
                write_round_log(Path(round_log_dir) / f"round_{g:03d}.ffup", updates)
            model = MlpModel.from_flat(dims, fedavg(updates, cfg.weighting, segments))
            report.test_mte = evaluate(model, test_clients, world)
            reports.append(report)
    finally:
        if pool is not None:
            pool.shutdown()
    return model, reports
