"""Experiment configuration and the pipelines behind the command-line tool.

A config is a flat ``key = value`` file (an optional ``[experiment]`` header
is accepted). Every artifact embeds the fully resolved config so it can be
regenerated exactly.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import Dataset, NoiseProcess, StateSpaceModel, generate_dataset
from .errors import GraphTrackError, NonFiniteState
from .graph import Graph, load_graph, random_graph
from .kalmannet import (
    EvalReport,
    TrainConfig,
    evaluate,
    grid_search_variance,
    mse_to_db,
    results_document,
    train,
)
from .neural import GainNetwork
from . import scenarios as sc

SCENARIOS = ("scenario1", "scenario2", "separable", "psse-gauss", "psse-exp")
FILTERS = ("ekf", "gsp-ekf", "gsp-kalmannet")
SWEEP_COLUMNS = ["noise_param", "filter", "mse_db", "mse_linear", "seed", "status"]
BENCH_COLUMNS = ["n", "filter", "median_seconds", "runs", "status"]
CSV_SCHEMA = {"sweep": "sweep/1", "bench": "bench/1"}
SEED_ENV = "GRAPHTRACK_SEED"


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration (a usage error)."""


def _parse_list(text: str, cast=float) -> list:
    text = text.strip()
    return [cast(p.strip()) for p in text.replace(";", ",").split(",") if p.strip()] if text else []


@dataclass
class ExperimentConfig:
    scenario: str = "scenario1"
    nodes: int = 10
    degree: int = 4
    graph_file: str = ""
    noise: str = "gauss"
    ratio_db: float = -20.0
    noise_level: float = 10.0
    sweep: list = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 20.0])
    mismatch: str = "none"
    filters: list = field(default_factory=lambda: ["ekf", "gsp-ekf", "gsp-kalmannet"])
    train_size: int = 500
    test_size: int = 200
    horizon: int = 200
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 32
    l2: float = 1e-4
    optimizer: str = "adam"
    clip: float = 10.0
    window: int = 0
    zero_output_init: bool = False
    normalize_features: bool = False
    evolution_rate: float = 10.0
    grid_search: bool = True
    sizes: list = field(default_factory=lambda: [50, 150, 300])
    bench_runs: int = 5
    bench_horizon: int = 50
    seed: int = 0

    _LISTS = {"sweep": float, "filters": str, "sizes": int}

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.noise not in ("gauss", "exp"):
            raise ConfigError("noise must be 'gauss' or 'exp'")
        bad = [f for f in self.filters if f not in FILTERS]
        if bad:
            raise ConfigError(f"unknown filters {bad}; choose from {FILTERS}")
        if self.nodes < 1 or self.train_size < 2 or self.test_size < 1 or self.horizon < 1:
            raise ConfigError("nodes, train_size (>= 2), test_size and horizon must be positive")
        if self.scenario.startswith("psse") and self.noise == "exp" and self.scenario != "psse-exp":
            raise ConfigError("exponential noise pairs with scenario psse-exp")
        self.mismatch_specs()

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        kw = {}
        known = {f.name: f for f in fields(cls)}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = _coerce(key, raw, known[key])
        return cls(**kw)

    @classmethod
    def from_file(cls, path, overrides: Optional[dict] = None) -> "ExperimentConfig":
        text = Path(path).read_text()
        return cls.from_text(text, overrides)

    @classmethod
    def from_text(cls, text: str, overrides: Optional[dict] = None) -> "ExperimentConfig":
        if not text.lstrip().startswith("["):
            text = "[experiment]\n" + text
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        values = {}
        for section in parser.sections():
            values.update(parser[section])
        values.update(overrides or {})
        return cls.from_mapping(values)

    def to_json(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = ["[experiment]"]
        for k, v in self.to_json().items():
            if isinstance(v, list):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def mismatch_specs(self) -> list:
        if self.mismatch.strip().lower() in ("", "none"):
            return []
        specs = []
        for part in self.mismatch.split("+"):
            bits = part.strip().split(":")
            if bits[0] == "drop_edges" and len(bits) == 2:
                specs.append(sc.MismatchSpec("drop_edges", k=int(bits[1])))
            elif bits[0] == "evolution_rate" and len(bits) == 3:
                specs.append(sc.MismatchSpec("evolution_rate", true_rate=float(bits[1]), assumed_rate=float(bits[2])))
            else:
                raise ConfigError(f"bad mismatch spec {part!r}; use drop_edges:K or evolution_rate:TRUE:ASSUMED")
        return specs

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, l2=self.l2,
            seed=child_seed(self.seed, "train"), optimizer=self.optimizer,
            clip=self.clip if self.clip > 0 else None, window=self.window or None,
            normalize_features=self.normalize_features, zero_output_init=self.zero_output_init,
        )


def _coerce(key: str, raw, f):
    if not isinstance(raw, str):
        return list(raw) if key in ExperimentConfig._LISTS and not isinstance(raw, list) else raw
    raw = raw.strip()
    try:
        if key in ExperimentConfig._LISTS:
            return _parse_list(raw, ExperimentConfig._LISTS[key])
        default = f.default
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def resolve_seed(explicit: Optional[int], config_has_seed: bool, config_seed: int) -> int:
    """Flag wins, then the config file, then ``$GRAPHTRACK_SEED``, then 0."""
    if explicit is not None:
        return explicit
    if config_has_seed:
        return config_seed
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return 0


_STREAMS = {"graph": 0, "train": 1, "data-train": 2, "data-test": 3, "mismatch": 4, "bench": 5}


def child_seed(seed: int, stream: str, *extra: int) -> int:
    entropy = [int(seed), _STREAMS[stream], *[int(e) for e in extra]]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint32)[0])


def build_graph(cfg: ExperimentConfig) -> Graph:
    if cfg.graph_file:
        return load_graph(cfg.graph_file)
    if cfg.scenario.startswith("psse"):
        return sc.ieee14().graph
    return random_graph(cfg.nodes, cfg.degree, seed=child_seed(cfg.seed, "graph"))


def noise_for(cfg: ExperimentConfig, level: float) -> tuple[NoiseProcess, NoiseProcess]:
    """Noise pair for a sweep point: 1/r^2 in dB (Gaussian) or the exponential rate."""
    if cfg.noise == "gauss":
        return sc.noise_pair("gauss", sc.r2_from_db(level), cfg.ratio_db)
    return sc.noise_pair("exp", level, cfg.ratio_db)


def build_models(cfg: ExperimentConfig, level: float, graph: Optional[Graph] = None) -> tuple[StateSpaceModel, StateSpaceModel]:
    """``(data model, filter model)``; the filter side carries any mismatch."""
    pn, mn = noise_for(cfg, level)
    if cfg.scenario.startswith("psse"):
        case = sc.ieee14() if not cfg.graph_file else sc.load_power_case(cfg.graph_file)
        gauss, exp = sc.psse_models(case, (pn, mn), (pn, mn))
        data = gauss if cfg.scenario == "psse-gauss" else exp
    else:
        graph = graph or build_graph(cfg)
        if cfg.scenario == "scenario1":
            data = sc.scenario1(graph, pn, mn)
        elif cfg.scenario == "scenario2":
            data = sc.scenario2(graph, pn, mn, rate=cfg.evolution_rate)
        else:
            data = sc.separable_model(graph, pn, mn)
    specs = cfg.mismatch_specs()
    model = sc.combine_mismatch(data, specs, seed=child_seed(cfg.seed, "mismatch")) if specs else data
    return data, model


def datasets_for(cfg: ExperimentConfig, data_model: StateSpaceModel, point: int = 0) -> tuple[Dataset, Dataset]:
    pool = generate_dataset(data_model, cfg.train_size, cfg.horizon, child_seed(cfg.seed, "data-train", point), scenario=cfg.scenario)
    test = generate_dataset(data_model, cfg.test_size, cfg.horizon, child_seed(cfg.seed, "data-test", point), scenario=cfg.scenario)
    return pool, test


def tuned_filter_model(cfg: ExperimentConfig, model: StateSpaceModel, pool: Dataset) -> StateSpaceModel:
    """Under exponential noise the model-based filters use grid-searched Gaussian variances."""
    if cfg.noise != "exp" or not cfg.grid_search:
        return model
    q0, r0 = model.process_noise.variance, model.meas_noise.variance
    grid = [(q0 * a, r0 * b) for a in (0.1, 1.0, 10.0) for b in (0.1, 1.0, 10.0)]
    val = pool.subset(range(min(pool.D, 50)))
    q2, r2 = grid_search_variance(val, model.with_noise(meas=NoiseProcess("gaussian", r0)), grid)
    return model.with_noise(NoiseProcess("gaussian", q2), NoiseProcess("gaussian", r2))


def write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    return v


def run_point(cfg: ExperimentConfig, level: float, point: int, net: Optional[GainNetwork] = None, pool: Optional[Dataset] = None, test: Optional[Dataset] = None) -> dict:
    """Train (if needed) and evaluate every configured filter at one noise level."""
    data, model = build_models(cfg, level)
    if pool is None or test is None:
        pool, test = datasets_for(cfg, data, point)
    rows, reports, result = [], [], None
    tuned = tuned_filter_model(cfg, model, pool) if any(f != "gsp-kalmannet" for f in cfg.filters) else model
    for kind in cfg.filters:
        try:
            if kind == "gsp-kalmannet":
                if net is None:
                    result = train(pool, model, cfg.train_config())
                    use = result.net
                else:
                    use = net
                rep = evaluate(kind, test, model, net=use, exclude=[pool])
            else:
                rep = evaluate(kind, test, tuned, exclude=[pool])
            reports.append(rep)
            rows.append({"noise_param": level, "filter": kind, "mse_db": rep.mse_db, "mse_linear": rep.mse_linear, "seed": cfg.seed, "status": "ok"})
        except (GraphTrackError, ArithmeticError) as exc:
            rows.append({"noise_param": level, "filter": kind, "mse_db": math.nan, "mse_linear": math.nan, "seed": cfg.seed, "status": f"error: {type(exc).__name__}: {exc}"})
    graph_hash = model.graph.hash() if model.graph is not None else ""
    doc = results_document(cfg.to_json(), graph_hash, {"train": pool.hash(), "test": test.hash()}, result, reports)
    doc["noise_param"] = level
    return {"rows": rows, "doc": doc, "result": result}


def _run_point_star(args):
    cfg_json, level, point = args
    out = run_point(ExperimentConfig.from_mapping(cfg_json), level, point)
    return {"rows": out["rows"], "doc": out["doc"]}


def sweep(cfg: ExperimentConfig, jobs: int = 1) -> tuple[list[dict], list[dict]]:
    if not cfg.filters:
        raise ConfigError("filter list is empty")
    if not cfg.sweep:
        raise ConfigError("sweep grid is empty")
    tasks = [(cfg.to_json(), level, i) for i, level in enumerate(cfg.sweep)]
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(_run_point_star, tasks))
    else:
        outs = [_run_point_star(t) for t in tasks]
    rows = [r for o in outs for r in o["rows"]]
    return rows, [o["doc"] for o in outs]


def rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) for k in columns})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# parameter memory above this is reported instead of attempted
NET_MEMORY_LIMIT = 1 << 30


def bench(cfg: ExperimentConfig) -> tuple[list[dict], dict]:
    """Median per-trajectory inference time per filter and graph size.

    Uses the separable model, where the structured GSP-EKF path applies.
    """
    from .ekf import run_ekf, to_frequency_model
    from .gsp import run_gsp_ekf
    from .kalmannet import run_kalmannet
    from .neural import NetShape

    sizes = sorted(set(int(s) for s in cfg.sizes))
    if len(sizes) < 2:
        raise ConfigError("bench needs at least two sizes")
    rows, mses = [], {}
    for n in sizes:
        degree = min(cfg.degree, n - 1)
        if (n * degree) % 2:
            degree -= 1
        graph = random_graph(n, degree, seed=child_seed(cfg.seed, "graph", n))
        pn, mn = noise_for(cfg, cfg.noise_level) if cfg.noise == "gauss" else sc.noise_pair("gauss", 0.1, cfg.ratio_db)
        model = sc.separable_model(graph, pn, mn)
        traj = generate_dataset(model, 1, cfg.bench_horizon, child_seed(cfg.seed, "bench", n))
        y, x0 = traj.observations[0], traj.x0[0]
        fm = to_frequency_model(model)
        runners = {
            "ekf": lambda: run_ekf(model, y, x0).estimates,
            "gsp-ekf": lambda: run_gsp_ekf(fm, y, x0).estimates,
        }
        shape = NetShape(n)
        if shape.param_count() * 8 * 2 <= NET_MEMORY_LIMIT:
            net = GainNetwork.create(n, seed=child_seed(cfg.seed, "bench", n, 1))
            net.params["out.W"][:] = 0.0
            net.params["out.b"][:] = 0.0
            runners["gsp-kalmannet"] = lambda: run_kalmannet(fm, net, y, x0)
        for kind in cfg.filters:
            if kind not in runners:
                rows.append({"n": n, "filter": kind, "median_seconds": math.nan, "runs": 0, "status": "out_of_memory"})
                continue
            try:
                run = runners[kind]
                est = run()  # warm-up
                times = []
                for _ in range(cfg.bench_runs):
                    t0 = time.perf_counter()
                    run()
                    times.append(time.perf_counter() - t0)
                mses[f"{kind}@{n}"] = float(np.mean(np.sum((est - traj.states[0]) ** 2, axis=-1)))
                rows.append({"n": n, "filter": kind, "median_seconds": float(np.median(times)), "runs": cfg.bench_runs, "status": "ok"})
            except MemoryError:
                rows.append({"n": n, "filter": kind, "median_seconds": math.nan, "runs": 0, "status": "out_of_memory"})
            except (GraphTrackError, ArithmeticError, NonFiniteState) as exc:
                rows.append({"n": n, "filter": kind, "median_seconds": math.nan, "runs": 0, "status": f"error: {exc}"})
    return rows, {"mse": mses, "timing": {"slopes": fit_slopes(rows)}}


def fit_slopes(rows: list[dict]) -> dict:
    """Least-squares slope of log(time) against log(N) per filter."""
    slopes = {}
    for kind in sorted({r["filter"] for r in rows}):
        pts = [(r["n"], r["median_seconds"]) for r in rows if r["filter"] == kind and r["status"] == "ok"]
        if len(pts) >= 2:
            n, t = np.array(pts, dtype=float).T
            slopes[kind] = float(np.polyfit(np.log(n), np.log(t), 1)[0])
    return slopes
