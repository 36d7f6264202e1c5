"""Experiment configuration, orchestration and metrics output."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datagen
from .datagen import Dataset, SynthConfig
from .errors import ConfigError
from .federation import (FEDAP_FAMILY, NEEDS_REFERENCE, STRATEGIES, ClientState, FederationResult, RoundMetrics,
                         StrategyConfig, personal_groups, pretrain, run_federation)
from .nn import ModelSpec, init_params

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("round", "client_id", "test_accuracy", "train_loss", "wall_ms")

DEFAULT_CONFIG = {
    "data": {
        "source": "synthetic",
        "csv_path": None,
        "n_clients": 20,
        "alpha": 0.1,
        "train_ratio": 0.5,
        "min_samples": 10,
        "seed": None,
        "classes": 10,
        "samples_per_client": 500,
        "feature_dim": 32,
        "feature_shift_scale": 1.0,
        "noise_scale": 1.0,
    },
    "model": {"hidden": [[64, True], [64, True]], "bn_momentum": 0.1, "bn_eps": 1e-5},
    "federation": {
        "strategy": "fedap",
        "rounds": 20,
        "local_epochs": 1,
        "lr": 0.01,
        "batch_size": 32,
        "lambda": 0.5,
        "prox_mu": 0.01,
        "personal_layers": 1,
        "warmup_rounds": None,
        "avg_weighting": "uniform",
        "pretrain_fraction": 0.2,
        "pretrain_epochs": 5,
    },
    "output": "runs/experiment",
    "master_seed": 0,
    "record_timing": False,
}


def derive_seed(master_seed: int, *path) -> int:
    """Independent 64-bit seed for the consumer named by ``path``."""
    key = json.dumps([int(master_seed), *path]).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def derive_rng(master_seed: int, *path) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *path))


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"{where}: unknown field")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _require(cond, field, msg):
    if not cond:
        raise ConfigError(f"{field}: {msg}")


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate_config(raw: dict) -> dict:
    """Fill defaults and check every field; raises ConfigError naming the field."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    cfg = _merge(DEFAULT_CONFIG, raw)
    d, m, f = cfg["data"], cfg["model"], cfg["federation"]

    _require(d["source"] in ("synthetic", "csv"), "data.source", "must be 'synthetic' or 'csv'")
    if d["source"] == "csv":
        _require(isinstance(d["csv_path"], str) and d["csv_path"], "data.csv_path", "required for csv source")
    for key in ("n_clients", "min_samples", "classes", "samples_per_client", "feature_dim"):
        _require(_is_int(d[key]) and d[key] >= 1, f"data.{key}", "must be a positive integer")
    _require(_is_num(d["alpha"]) and d["alpha"] > 0, "data.alpha", "must be positive")
    _require(_is_num(d["train_ratio"]) and 0 < d["train_ratio"] < 1, "data.train_ratio", "must lie in (0, 1)")
    _require(d["seed"] is None or (_is_int(d["seed"]) and d["seed"] >= 0), "data.seed",
             "must be null or a non-negative integer")
    for key in ("feature_shift_scale", "noise_scale"):
        _require(_is_num(d[key]) and d[key] >= 0, f"data.{key}", "must be non-negative")

    hidden = m["hidden"]
    _require(isinstance(hidden, list) and hidden, "model.hidden", "must be a non-empty list of [width, has_bn]")
    for i, layer in enumerate(hidden):
        _require(isinstance(layer, list) and len(layer) == 2 and _is_int(layer[0]) and layer[0] >= 1
                 and isinstance(layer[1], bool), f"model.hidden[{i}]", "must be [positive width, bool]")
    _require(_is_num(m["bn_momentum"]) and 0 < m["bn_momentum"] <= 1, "model.bn_momentum", "must lie in (0, 1]")
    _require(_is_num(m["bn_eps"]) and m["bn_eps"] > 0, "model.bn_eps", "must be positive")

    _require(f["strategy"] in STRATEGIES, "federation.strategy", f"must be one of {', '.join(STRATEGIES)}")
    for key in ("rounds", "local_epochs"):
        _require(_is_int(f[key]) and f[key] >= 0, f"federation.{key}", "must be a non-negative integer")
    for key in ("batch_size", "personal_layers", "pretrain_epochs"):
        _require(_is_int(f[key]) and f[key] >= 1, f"federation.{key}", "must be a positive integer")
    _require(_is_num(f["lr"]) and f["lr"] > 0, "federation.lr", "must be positive")
    _require(_is_num(f["lambda"]) and 0 <= f["lambda"] <= 1, "federation.lambda", "must lie in [0, 1]")
    _require(_is_num(f["prox_mu"]) and f["prox_mu"] >= 0, "federation.prox_mu", "must be non-negative")
    _require(f["warmup_rounds"] is None or (_is_int(f["warmup_rounds"]) and 0 <= f["warmup_rounds"] <= f["rounds"]),
             "federation.warmup_rounds", "must be null or an integer in [0, rounds]")
    _require(f["avg_weighting"] in ("uniform", "by_samples"), "federation.avg_weighting",
             "must be 'uniform' or 'by_samples'")
    _require(_is_num(f["pretrain_fraction"]) and 0 < f["pretrain_fraction"] <= 1, "federation.pretrain_fraction",
             "must lie in (0, 1]")
    _require(isinstance(cfg["output"], str) and cfg["output"], "output", "must be a directory path")
    _require(_is_int(cfg["master_seed"]) and cfg["master_seed"] >= 0, "master_seed",
             "must be a non-negative integer")
    _require(isinstance(cfg["record_timing"], bool), "record_timing", "must be a boolean")

    n_groups = len(hidden) + sum(1 for _, bn in hidden if bn) + 1
    _require(f["personal_layers"] < n_groups, "federation.personal_layers",
             f"must be below the number of layer groups ({n_groups})")
    if f["strategy"] in FEDAP_FAMILY:
        _require(any(bn for _, bn in hidden), "model.hidden", f"strategy {f['strategy']} needs a batch-norm layer")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from None
    return validate_config(raw)


def strategy_from_config(cfg: dict, kind: str | None = None) -> StrategyConfig:
    f = cfg["federation"]
    return StrategyConfig(kind=kind or f["strategy"], lam=float(f["lambda"]), prox_mu=float(f["prox_mu"]),
                          personal_layers=f["personal_layers"], warmup_rounds=f["warmup_rounds"],
                          avg_weighting=f["avg_weighting"])


@dataclass
class Prepared:
    """Partitioned data and architecture shared by every strategy of one config."""

    cfg: dict
    shards: list
    spec: ModelSpec
    client_shifts: np.ndarray | None = None


def prepare(cfg: dict) -> Prepared:
    d = cfg["data"]
    data_seed = d["seed"] if d["seed"] is not None else derive_seed(cfg["master_seed"], "data")
    shifts = None
    if d["source"] == "synthetic":
        synth = datagen.synth_generate(SynthConfig(
            n_clients=d["n_clients"], classes=d["classes"], samples_per_client=d["samples_per_client"],
            feature_dim=d["feature_dim"], label_skew_alpha=d["alpha"],
            feature_shift_scale=d["feature_shift_scale"], noise_scale=d["noise_scale"],
            seed=derive_seed(data_seed, "synth")))
        dataset, shifts = synth.dataset, synth.client_shifts
    else:
        dataset = datagen.load_csv(d["csv_path"])
    dataset = datagen.standardize(dataset)
    assign = datagen.dirichlet_partition(dataset.labels, d["n_clients"], d["alpha"],
                                         np.random.default_rng(derive_seed(data_seed, "partition")),
                                         min_samples=d["min_samples"])
    shards = datagen.make_shards(dataset, assign, d["n_clients"], d["train_ratio"],
                                 np.random.default_rng(derive_seed(data_seed, "split")), shifts)
    m = cfg["model"]
    spec = ModelSpec(dataset.dim, tuple((w, b) for w, b in m["hidden"]), dataset.num_classes,
                     bn_momentum=m["bn_momentum"], bn_eps=m["bn_eps"])
    personal_groups(spec, cfg["federation"]["personal_layers"])
    return Prepared(cfg, shards, spec, shifts)


def threads_from_env() -> int:
    raw = os.environ.get("FEDSIM_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FEDSIM_THREADS: {raw!r} is not an integer") from None
    if n < 0:
        raise ConfigError("FEDSIM_THREADS must be non-negative")
    return n


def run_strategy(prep: Prepared, kind: str | None = None, threads: int | None = None,
                 debug: bool = False) -> FederationResult:
    """Run one strategy on prepared data with the config's seed streams."""
    cfg = prep.cfg
    f = cfg["federation"]
    seed = cfg["master_seed"]
    strategy = strategy_from_config(cfg, kind)
    init = init_params(prep.spec, derive_rng(seed, "init"))
    clients = [ClientState(s.client_id, init.copy(), s, derive_rng(seed, "client", s.client_id))
               for s in prep.shards]
    reference = None
    if strategy.kind in NEEDS_REFERENCE:
        pooled = Dataset(np.concatenate([s.train.features for s in prep.shards]),
                         np.concatenate([s.train.labels for s in prep.shards]), prep.spec.num_classes)
        reference = pretrain(pooled, prep.spec, derive_rng(seed, "pretrain"), fraction=f["pretrain_fraction"],
                             epochs=f["pretrain_epochs"], lr=f["lr"], batch_size=f["batch_size"])
    return run_federation(clients, strategy, f["rounds"], local_epochs=f["local_epochs"], lr=f["lr"],
                          batch_size=f["batch_size"], reference=reference,
                          threads=threads_from_env() if threads is None else threads, debug=debug)


def metric_rows(metrics: list[RoundMetrics], record_timing: bool = False) -> list[tuple]:
    """Client rows per round followed by the average row (client_id -1)."""
    by_round: dict[int, list[RoundMetrics]] = {}
    for rec in metrics:
        by_round.setdefault(rec.round, []).append(rec)
    rows = []
    for t in sorted(by_round):
        recs = sorted(by_round[t], key=lambda r: r.client_id)
        for r in recs:
            rows.append((t, r.client_id, r.test_accuracy, r.train_loss, r.wall_ms if record_timing else 0))
        rows.append((t, -1, float(np.mean([r.test_accuracy for r in recs])),
                     float(np.mean([r.train_loss for r in recs])),
                     sum(r.wall_ms for r in recs) if record_timing else 0))
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def write_metrics_csv(rows, path):
    with open(path, "w") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_metrics_csv(path) -> list[tuple]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != METRIC_COLUMNS:
            raise ConfigError(f"{path}: unexpected metrics header {header}")
        for line in fh:
            t, c, acc, loss, ms = line.strip().split(",")
            rows.append((int(t), int(c), float(acc), float(loss), int(ms)))
    return rows


def mean_trace(metrics) -> list[float]:
    """Per-round mean client accuracy, from RoundMetrics or metrics rows."""
    per_round: dict[int, list[float]] = {}
    for rec in metrics:
        if isinstance(rec, RoundMetrics):
            per_round.setdefault(rec.round, []).append(rec.test_accuracy)
        elif rec[1] >= 0:
            per_round.setdefault(rec[0], []).append(rec[2])
    return [float(np.mean(per_round[t])) for t in sorted(per_round)]


def rounds_to_threshold(metrics, threshold_fraction: float = 0.9) -> int:
    """First (1-based) round whose mean accuracy reaches the fraction of the final mean.

    Returns ``T + 1`` when the threshold is never reached.
    """
    trace = metrics if metrics and isinstance(metrics[0], float) else mean_trace(metrics)
    if not trace:
        return 1
    target = threshold_fraction * trace[-1]
    for t, acc in enumerate(trace, start=1):
        if acc >= target:
            return t
    return len(trace) + 1


def summarize(result: FederationResult, kind: str) -> dict:
    last = max((r.round for r in result.metrics), default=0)
    final = {str(r.client_id): r.test_accuracy for r in sorted(result.metrics, key=lambda r: r.client_id)
             if r.round == last}
    return {
        "strategy": kind,
        "rounds": last,
        "final_accuracy": final,
        "mean_final_accuracy": float(np.mean(list(final.values()))) if final else 0.0,
        "rounds_to_90": rounds_to_threshold(result.metrics, 0.9),
    }


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False)
        fh.write("\n")


def write_run_outputs(result: FederationResult, cfg: dict, kind: str, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(metric_rows(result.metrics, cfg["record_timing"]), out_dir / "metrics.csv")
    _dump_json(summarize(result, kind), out_dir / "final_summary.json")
    if result.weights is not None:
        payload = result.weights.to_dict()
        payload["variant"] = kind
        payload["profiles"] = [p.to_dict() for p in result.profiles]
        _dump_json(payload, out_dir / "weights.json")
    resolved = copy.deepcopy(cfg)
    resolved["federation"]["strategy"] = kind
    resolved["output"] = str(out_dir)
    _dump_json(resolved, out_dir / "config.json")


def run_experiment(cfg: dict, out_dir=None) -> FederationResult:
    """Run the configured strategy and write metrics.csv, final_summary.json,
    weights.json (FedAP family) and the resolved config into ``out_dir``."""
    out = Path(out_dir or cfg["output"])
    prep = prepare(cfg)
    kind = cfg["federation"]["strategy"]
    log.info("running %s for %d rounds on %d clients", kind, cfg["federation"]["rounds"], len(prep.shards))
    result = run_strategy(prep, kind)
    write_run_outputs(result, cfg, kind, out)
    return result


def compare_strategies(cfg: dict, strategies: list[str], out_dir=None) -> dict:
    """Run every strategy on the same partition and seeds; write comparison.csv.

    Returns ``{"columns", "rows", "best", "rounds_to_90"}`` where ``rows``
    maps a client id (or ``"avg"``) to one final accuracy per column.
    """
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"strategies: unknown strategy {s!r}")
        if s in FEDAP_FAMILY and not any(bn for _, bn in cfg["model"]["hidden"]):
            raise ConfigError(f"strategies: {s} needs a batch-norm layer")
    out = Path(out_dir or cfg["output"])
    prep = prepare(cfg)
    columns, finals, conv = [], [], {}
    for s in strategies:
        label = s
        k = 2
        while label in columns:
            label = f"{s}#{k}"
            k += 1
        result = run_strategy(prep, s)
        write_run_outputs(result, cfg, s, out / label.replace("#", "_"))
        summary = summarize(result, s)
        columns.append(label)
        finals.append(summary["final_accuracy"])
        conv[label] = summary["rounds_to_90"]

    client_ids = list(finals[0]) if finals else []
    rows = {cid: [f[cid] for f in finals] for cid in client_ids}
    rows["avg"] = [float(np.mean(list(f.values()))) for f in finals]
    best = {key: columns[int(np.argmax(vals))] for key, vals in rows.items()}
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.csv", "w") as fh:
        fh.write(",".join(["client"] + columns + ["best"]) + "\n")
        for key, vals in rows.items():
            fh.write(",".join([key] + [_fmt(v) for v in vals] + [best[key]]) + "\n")
    return {"columns": columns, "rows": rows, "best": best, "rounds_to_90": conv}


def format_comparison(table: dict) -> str:
    cols = table["columns"]
    lines = ["client  " + "  ".join(f"{c:>10}" for c in cols)]
    for key, vals in table["rows"].items():
        cells = []
        for c, v in zip(cols, vals):
            mark = "*" if table["best"][key] == c else " "
            cells.append(f"{100 * v:9.2f}{mark}")
        lines.append(f"{key:>6}  " + "  ".join(cells))
    lines.append("r->90%  " + "  ".join(f"{table['rounds_to_90'][c]:>10}" for c in cols))
    return "\n".join(lines)


def partition_report(cfg: dict) -> str:
    prep = prepare(cfg)
    k = prep.spec.num_classes
    lines = ["client  train  test  " + " ".join(f"{c:>5}" for c in range(k))]
    for s in prep.shards:
        hist = s.label_histogram
        lines.append(f"{s.client_id:>6}  {len(s.train):>5}  {len(s.test):>4}  "
                     + " ".join(f"{h:>5}" for h in hist))
    return "\n".join(lines)
