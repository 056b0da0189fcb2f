"""Experiment drivers behind the ``fedff`` command line.

Every driver is a pure function of its :class:`ExperimentSpec`: it generates
the tracks, runs the requested study and writes CSV tables (plus a small
metadata JSON) to the output directory.  No wall-clock data is written, so
repeated runs with the same seed produce identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .control import AnalyticFeedforward, Diverged, LapLog, NeuralFeedforward, mean_tracking_error, run_lap
from .federation import (
    AllClientsDiverged,
    FederationConfig,
    World,
    _client_round,
    client_number,
    derive_seed,
    run_federation,
)
from .neuralff import ClientDataset, MlpModel, TrainConfig, fit, init_model, model_to_json, save_checkpoint
from .trajgen import (
    ROMAN,
    default_split,
    generate_all,
    load_path_specs,
    roman_sorted,
    split_schedule,
)

logger = logging.getLogger(__name__)

KINDS = ("baseline", "centralized", "federated", "sweep", "local-vs-fed", "gen-paths")
SWEEP_EPOCHS = (1, 2, 5)
CENTRALIZED_EPOCHS = 5
# seed-derivation keys; fixed so that outputs never depend on call order
INIT_KEY = 0xC0FFEE
CENTRAL_KEY = 0xCE27
LOCAL_KEY = 0x10CA1
# a test client is flagged when fewer than this share of the pooled
# training rows fall inside its speed range
COVERAGE_FLOOR = 0.1


class ConfigError(ValueError):
    """Invalid experiment configuration (maps to exit code 1)."""


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    out: Path
    seed: int = 0
    rounds: int | None = None
    epochs: int | None = None
    split: str | None = None
    weighting: str = "sample"
    workers: int = 1
    accumulate_data: bool = False
    gzip_logs: bool = False
    paths: Path | None = None
    n_neurons: int = 10

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if self.rounds is not None and self.rounds < 0:
            raise ConfigError("--rounds must be >= 0")
        if self.epochs is not None and self.epochs < 0:
            raise ConfigError("--epochs must be >= 0")
        if self.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if self.weighting not in ("sample", "uniform"):
            raise ConfigError("--weighting must be 'sample' or 'uniform'")
        if self.seed < 0:
            raise ConfigError("--seed must be non-negative")

    def config_hash(self) -> str:
        doc = {k: v for k, v in asdict(self).items() if k not in ("out", "workers")}
        doc["paths"] = None if self.paths is None else str(self.paths)
        blob = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ResultTable:
    """Rows of equal-length records with a fixed column order."""

    name: str
    columns: tuple
    rows: list = field(default_factory=list)
    diverged: bool = False

    def add(self, *values):
        if len(values) != len(self.columns):
            raise ValueError(f"{self.name}: expected {len(self.columns)} values, got {len(values)}")
        self.rows.append(tuple(values))

    def to_csv(self) -> str:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()

    def write(self, directory: Path) -> Path:
        path = Path(directory) / self.name
        path.write_text(self.to_csv(), encoding="utf-8")
        return path

    def column(self, name):
        j = self.columns.index(name)
        return [r[j] for r in self.rows]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def read_table(path) -> list[dict]:
    """Load a CSV written by :class:`ResultTable` (numbers become floats)."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            row = {}
            for k, v in rec.items():
                try:
                    row[k] = float(v) if v != "" else float("nan")
                except ValueError:
                    row[k] = v
            out.append(row)
    return out


@dataclass
class Outcome:
    tables: list
    diverged: bool = False
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# helpers


def build_world(spec: ExperimentSpec) -> World:
    try:
        specs = load_path_specs(spec.paths)
    except FileNotFoundError as exc:
        raise ConfigError(f"cannot read path specs: {exc}") from exc
    if not specs:
        raise ConfigError(f"no path specs found in {spec.paths}")
    return World(trajectories=generate_all(specs), seed=spec.seed)


def parse_split(text: str | None) -> tuple[frozenset, frozenset]:
    """``None`` gives the default split, an integer a scheduled run, else a comma list of test clients."""
    if text is None or text == "":
        return default_split()
    text = text.strip()
    if text.isdigit():
        try:
            return split_schedule(int(text))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    test = frozenset(p.strip() for p in text.split(",") if p.strip())
    unknown = test - set(ROMAN)
    if unknown:
        raise ConfigError(f"unknown client ids in --split: {sorted(unknown)}")
    if not test or test == set(ROMAN):
        raise ConfigError("--split must leave at least one training and one test client")
    return frozenset(ROMAN) - test, test


def parse_runs(text: str | None) -> list[int]:
    if text is None or text == "":
        return list(range(1, 11))
    try:
        runs = [int(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise ConfigError("sweep --split takes run indices, e.g. 1,2,3") from exc
    if not runs or any(r < 1 or r > 10 for r in runs):
        raise ConfigError("sweep run indices must lie in 1..10")
    return sorted(set(runs))


def _restrict(world: World, clients) -> None:
    missing = set(clients) - set(world.trajectories)
    if missing:
        raise ConfigError(f"no path spec for clients {roman_sorted(missing)}")


def lap_mte(world: World, cid: str, ff) -> tuple[float, str, LapLog | None]:
    """``(mte, status, log)``; diverged laps report ``nan`` and keep the partial log."""
    try:
        log = run_lap(world.trajectory(cid), ff, world.gains, world.params)
    except Diverged as exc:
        logger.warning("%s", exc)
        return float("nan"), "diverged", exc.log
    return mean_tracking_error(log), "ok", log


def initial_model(world: World, n_neurons: int = 10) -> MlpModel:
    return init_model(n_neurons, derive_seed(world.seed, INIT_KEY))


def _write_meta(spec: ExperimentSpec, out: Path, extra: dict | None = None) -> None:
    doc = {
        "kind": spec.kind,
        "seed": spec.seed,
        "rounds": spec.rounds,
        "epochs": spec.epochs,
        "split": spec.split,
        "weighting": spec.weighting,
        "accumulate_data": spec.accumulate_data,
        "config_hash": spec.config_hash(),
    }
    doc.update(extra or {})
    name = spec.kind.replace("-", "_")
    (out / f"{name}.meta.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_log(log: LapLog | None, path: Path, compress: bool) -> None:
    if log is None:
        return
    if compress:
        path = path.with_name(path.name + ".gz")
    log.to_csv(path, compress=compress)


# ---------------------------------------------------------------------------
# studies


def baseline(world: World, clients=None) -> ResultTable:
    table = ResultTable("mte_fb_ff.csv", ("client", "variant", "mte", "status"))
    analytic = AnalyticFeedforward(world.params)
    for cid in roman_sorted(clients or world.trajectories):
        for variant, ff in (("fb", None), ("fb_analytic", analytic)):
            mte, status, _ = lap_mte(world, cid, ff)
            table.add(cid, variant, mte, status)
            table.diverged |= status != "ok"
    return table


def centralized_model(world: World, train, n_neurons: int = 10, epochs: int = CENTRALIZED_EPOCHS):
    """Pool FB+Analytic lap data of every training client and fit one model."""
    analytic = AnalyticFeedforward(world.params)
    parts = []
    for cid in roman_sorted(train):
        _, status, log = lap_mte(world, cid, analytic)
        if status == "ok":
            parts.append(ClientDataset(log.training_rows(), cid))
    if not parts:
        raise AllClientsDiverged("no training client completed an analytic-FF lap")
    data = ClientDataset.concat(parts, "pooled")
    cfg = replace(world.train, epochs=epochs, rng_seed=derive_seed(world.seed, CENTRAL_KEY))
    result = fit(initial_model(world, n_neurons), data, cfg)
    return result.model, data


def speed_coverage(data: ClientDataset, world: World, cid: str) -> float:
    """Share of training rows whose speed lies within the test track's speed range."""
    v = world.trajectory(cid).v_d
    speeds = data.rows[:, 1]
    return float(np.mean((speeds >= v.min()) & (speeds <= v.max())))


def centralized(world: World, train, test, n_neurons: int = 10):
    model, data = centralized_model(world, train, n_neurons)
    table = ResultTable(
        "centralized_mte.csv",
        ("client", "fb", "fb_analytic", "fb_centralized", "speed_coverage", "flag"),
    )
    analytic = AnalyticFeedforward(world.params)
    neural = NeuralFeedforward(model)
    for cid in roman_sorted(test):
        fb, s1, _ = lap_mte(world, cid, None)
        an, s2, _ = lap_mte(world, cid, analytic)
        nn, s3, _ = lap_mte(world, cid, neural)
        cov = speed_coverage(data, world, cid)
        flags = [s for s in (s1, s2, s3) if s != "ok"]
        if cov < COVERAGE_FLOOR:
            flags.append("sparse_coverage")
        table.add(cid, fb, an, nn, cov, ";".join(flags) or "ok")
        table.diverged |= any(s != "ok" for s in (s1, s2, s3))
    return table, model, len(data)


def federation_config(spec: ExperimentSpec, rounds=5, epochs=1) -> FederationConfig:
    return FederationConfig(
        rounds=rounds if spec.rounds is None else spec.rounds,
        epochs=epochs if spec.epochs is None else spec.epochs,
        rng_seed=spec.seed,
        weighting=spec.weighting,
        accumulate_data=spec.accumulate_data,
        n_neurons=spec.n_neurons,
        workers=spec.workers,
    )


def rounds_table(reports, train, test) -> ResultTable:
    table = ResultTable(
        "federated_rounds.csv",
        ("round", "client", "role", "train_loss", "sample_count", "mte", "status"),
    )
    for rep in reports:
        for cid in roman_sorted(train):
            if cid in rep.clients:
                st = rep.clients[cid]
                table.add(rep.round + 1, cid, "train", st.train_loss, st.sample_count, st.lap_mte, "ok")
            elif cid in rep.skipped:
                table.add(rep.round + 1, cid, "train", float("nan"), 0, float("nan"), "diverged")
        for cid in roman_sorted(test):
            mte = rep.test_mte.get(cid, float("nan"))
            table.add(rep.round + 1, cid, "test", float("nan"), 0, mte, "ok" if math.isfinite(mte) else "diverged")
    return table


def federated(world: World, cfg: FederationConfig, train, test, out: Path | None = None, gzip_logs=False):
    """Comparison table: FB, FB+Analytic, FB+centralized and FB+federated per test client."""
    diverged = False
    try:
        model, reports = run_federation(
            cfg, train, test, world, round_log_dir=None if out is None else out / "rounds"
        )
    except AllClientsDiverged as exc:
        logger.error("%s", exc)
        model, reports, diverged = None, [], True
    central, _ = centralized_model(world, train, cfg.n_neurons)
    table = ResultTable("federated_mte.csv", ("client", "fb", "fb_analytic", "fb_centralized", "fb_federated"))
    variants = [
        ("fb", None),
        ("fb_analytic", AnalyticFeedforward(world.params)),
        ("fb_centralized", NeuralFeedforward(central)),
        ("fb_federated", None if model is None else NeuralFeedforward(model)),
    ]
    for cid in roman_sorted(test):
        cells = []
        for name, ff in variants:
            if name == "fb_federated" and ff is None:
                cells.append(float("nan"))
                continue
            mte, status, log = lap_mte(world, cid, ff)
            diverged |= status != "ok"
            cells.append(mte)
            if out is not None:
                _write_log(log, out / "laps" / f"{cid}_{name}.csv", gzip_logs)
        table.add(cid, *cells)
    table.diverged = diverged or any(r.skipped for r in reports)
    return table, rounds_table(reports, train, test), model, central, reports


def _sweep_job(args):
    world, cfg, run = args
    train, test = split_schedule(run)
    try:
        _, reports = run_federation(cfg, train, test, world)
    except AllClientsDiverged:
        return cfg.epochs, run, None
    return cfg.epochs, run, [r.mean_test_mte for r in reports]


def sweep(world: World, base: FederationConfig, runs, epochs_list=SWEEP_EPOCHS, workers: int = 1):
    """Test-MTE curve per (E, round), mean and sample std over the scheduled runs."""
    jobs = [(world, replace(base, epochs=e, workers=1), run) for e in epochs_list for run in runs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    raw = ResultTable("epoch_sweep_runs.csv", ("epochs", "run", "round", "mean_test_mte"))
    agg = ResultTable("epoch_sweep.csv", ("epochs", "round", "mean", "std", "n_runs"))
    curves: dict[int, list] = {e: [] for e in epochs_list}
    diverged = False
    for e, run, curve in results:
        if curve is None:
            diverged = True
            continue
        for g, m in enumerate(curve):
            raw.add(e, run, g + 1, m)
        curves[e].append(curve)
    for e in epochs_list:
        arr = np.array(curves[e], dtype=np.float64).reshape(len(curves[e]), base.rounds)
        for g in range(base.rounds):
            col = arr[:, g]
            col = col[np.isfinite(col)]
            diverged |= len(col) < arr.shape[0]
            mean = float(np.mean(col)) if len(col) else float("nan")
            std = float(np.std(col, ddof=1)) if len(col) > 1 else float("nan")
            agg.add(e, g + 1, mean, std, len(col))
    agg.diverged = raw.diverged = diverged
    return agg, raw


def train_local_only(world: World, cid: str, rounds: int, epochs: int, n_neurons: int = 10,
                     accumulate: bool = False) -> MlpModel:
    """A client that never communicates: ``rounds`` fresh laps, each followed by ``epochs`` epochs."""
    model = initial_model(world, n_neurons)
    dims = model.layer_dims
    rows = None
    for g in range(rounds):
        local_world = replace(world, seed=derive_seed(world.seed, LOCAL_KEY))
        update, _, new_rows = _client_round(
            cid, model.to_flat(), dims, epochs, local_world, g, rows if accumulate else None
        )
        rows = new_rows
        model = MlpModel.from_flat(dims, update.params)
    return model


def local_vs_fed(world: World, cfg: FederationConfig, train, test, fed_model: MlpModel | None = None,
                 local_models: dict | None = None):
    """MTE ratio local/federated for every (local model, test track)."""
    if fed_model is None:
        fed_model, _ = run_federation(cfg, train, test, world)
    fed = {cid: lap_mte(world, cid, NeuralFeedforward(fed_model))[0] for cid in roman_sorted(test)}
    table = ResultTable("local_vs_fed_ratio.csv", ("local_client", "test_client", "mte_local", "mte_fed", "ratio"))
    diverged = not all(math.isfinite(v) for v in fed.values())
    for lc in roman_sorted(train):
        if local_models is not None and lc in local_models:
            model = local_models[lc]
        else:
            try:
                model = train_local_only(world, lc, cfg.rounds, cfg.epochs, cfg.n_neurons, cfg.accumulate_data)
            except Diverged as exc:
                logger.warning("local model %s: %s", lc, exc)
                for tc in roman_sorted(test):
                    table.add(lc, tc, float("nan"), fed[tc], float("nan"))
                diverged = True
                continue
        for tc in roman_sorted(test):
            mte, status, _ = lap_mte(world, tc, NeuralFeedforward(model))
            diverged |= status != "ok"
            table.add(lc, tc, mte, fed[tc], mte / fed[tc])
    table.diverged = diverged
    return table


# ---------------------------------------------------------------------------
# command entry points


def run_experiment(spec: ExperimentSpec) -> Outcome:
    out = Path(spec.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc

    if spec.kind == "gen-paths":
        return _cmd_gen_paths(spec, out)

    world = build_world(spec)
    _restrict(world, ROMAN if spec.kind in ("baseline", "sweep") else set())
    if spec.kind == "baseline":
        table = baseline(world)
        tables = [table]
        extra = {}
    elif spec.kind == "centralized":
        train, test = parse_split(spec.split)
        _restrict(world, train | test)
        table, model, n_rows = centralized(world, train, test, spec.n_neurons)
        _save_model(model, out / "centralized_model")
        tables = [table]
        extra = {"train_clients": roman_sorted(train), "test_clients": roman_sorted(test), "pooled_rows": n_rows}
    elif spec.kind == "federated":
        train, test = parse_split(spec.split)
        _restrict(world, train | test)
        (out / "laps").mkdir(exist_ok=True)
        (out / "rounds").mkdir(exist_ok=True)
        cfg = federation_config(spec)
        table, rounds, model, central, _ = federated(world, cfg, train, test, out, spec.gzip_logs)
        if model is not None:
            _save_model(model, out / "federated_model")
        _save_model(central, out / "centralized_model")
        table.diverged |= rounds.diverged
        tables = [table, rounds]
        extra = {"train_clients": roman_sorted(train), "test_clients": roman_sorted(test),
                 "rounds": cfg.rounds, "epochs": cfg.epochs}
    elif spec.kind == "sweep":
        runs = parse_runs(spec.split)
        cfg = federation_config(spec, rounds=30)
        agg, raw = sweep(world, cfg, runs, workers=spec.workers)
        tables = [agg, raw]
        extra = {"runs": runs, "rounds": cfg.rounds, "epochs_list": list(SWEEP_EPOCHS)}
    elif spec.kind == "local-vs-fed":
        train, test = parse_split(spec.split)
        _restrict(world, train | test)
        cfg = federation_config(spec)
        tables = [local_vs_fed(world, cfg, train, test)]
        extra = {"train_clients": roman_sorted(train), "test_clients": roman_sorted(test),
                 "rounds": cfg.rounds, "epochs": cfg.epochs}
    else:  # pragma: no cover - guarded by ExperimentSpec
        raise ConfigError(spec.kind)

    for t in tables:
        t.write(out)
    _write_meta(spec, out, extra)
    return Outcome(tables, any(t.diverged for t in tables), extra)


def _save_model(model: MlpModel, stem: Path) -> None:
    save_checkpoint(model, stem.with_suffix(".ffnn"))
    stem.with_suffix(".json").write_text(model_to_json(model) + "\n", encoding="utf-8")


def _cmd_gen_paths(spec: ExperimentSpec, out: Path) -> Outcome:
    try:
        specs = load_path_specs(spec.paths)
    except FileNotFoundError as exc:
        raise ConfigError(f"cannot read path specs: {exc}") from exc
    if not specs:
        raise ConfigError(f"no path specs found in {spec.paths}")
    table = ResultTable("paths_summary.csv", ("client", "name", "length", "max_abs_kappa", "v_max", "v_min", "duration", "samples"))
    traj_dir = out / "trajectories"
    traj_dir.mkdir(exist_ok=True)
    from .trajgen import characteristics, generate_path

    for cid, ps in specs.items():
        traj = generate_path(ps)
        traj.to_csv(traj_dir / f"{cid}.csv")
        c = characteristics(traj)
        table.add(cid, ps.name, c["length"], c["max_abs_kappa"], c["v_max"], c["v_min"], c["duration"], len(traj))
    table.write(out)
    _write_meta(spec, out, {"clients": list(specs)})
    return Outcome([table])
