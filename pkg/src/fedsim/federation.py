"""Client/server round loop and the aggregation strategies.

Round t: the server aggregates the models clients produced in round t-1
(skipped in round 1), each client trains locally from what it receives, and
the locally updated model is evaluated on the client's own test split.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import similarity
from .datagen import ClientShard, Dataset
from .errors import ConfigError, FedsimError, InputError, TrainingDivergenceError
from .nn import ModelSpec, ParamSet, accuracy, init_params, train_epochs

STRATEGIES = ("base", "fedavg", "fedprox", "fedper", "fedbn", "fedap", "dfedap", "ffedap")
FEDAP_FAMILY = ("fedap", "dfedap", "ffedap")
NEEDS_REFERENCE = ("fedap", "dfedap")


@dataclass(frozen=True)
class StrategyConfig:
    kind: str
    lam: float = 0.5
    prox_mu: float = 0.01
    personal_layers: int = 1
    warmup_rounds: int | None = None
    avg_weighting: str = "uniform"

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.kind!r}; expected one of {', '.join(STRATEGIES)}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda must lie in [0, 1]")
        if self.prox_mu < 0:
            raise ConfigError("prox_mu must be non-negative")
        if self.personal_layers < 1:
            raise ConfigError("personal_layers must be at least 1")
        if self.warmup_rounds is not None and self.warmup_rounds < 0:
            raise ConfigError("warmup_rounds must be non-negative")
        if self.avg_weighting not in ("uniform", "by_samples"):
            raise ConfigError("avg_weighting must be 'uniform' or 'by_samples'")


@dataclass
class ClientState:
    client_id: int
    params: ParamSet
    shard: ClientShard
    rng: np.random.Generator


@dataclass
class RoundMetrics:
    round: int
    client_id: int
    test_accuracy: float
    train_loss: float
    wall_ms: int


@dataclass
class FederationResult:
    metrics: list[RoundMetrics]
    params: list[ParamSet]
    weights: similarity.SimilarityMatrix | None = None
    weight_builds: int = 0
    profiles: list[similarity.BnStatsProfile] = field(default_factory=list)


class RoundError(FedsimError):
    """A client failed during a round."""


def personal_groups(spec: ModelSpec, personal_layers: int) -> list[str]:
    groups = spec.layer_groups()
    if personal_layers < 1 or personal_layers >= len(groups):
        raise ConfigError(f"personal_layers must lie in [1, {len(groups) - 1}] for this architecture")
    return groups[-personal_layers:]


def _group_of(name: str) -> str:
    return name.split(".", 1)[0]


def merge_incoming(own: ParamSet, incoming: ParamSet, strategy: StrategyConfig) -> ParamSet:
    """The model a client starts local training from."""
    kind = strategy.kind
    if own.spec != incoming.spec:
        raise ConfigError("incoming parameters use a different architecture")
    if kind == "base":
        keep = set(own.arrays)
    elif kind in ("fedavg", "fedprox"):
        keep = set()
    elif kind == "fedper":
        personal = set(personal_groups(own.spec, strategy.personal_layers))
        keep = {n for n in own.arrays if _group_of(n) in personal}
    else:
        keep = set(own.private_names)
    return ParamSet(own.spec, {n: (own[n] if n in keep else incoming[n]) for n in own.arrays})


def local_update(client: ClientState, incoming: ParamSet, strategy: StrategyConfig, *, epochs: int = 1,
                 lr: float = 1e-2, batch_size: int = 32) -> tuple[ParamSet, float]:
    """Merge ``incoming`` per the strategy, then run ``epochs`` of local SGD.

    Returns the updated parameters and the mean minibatch loss.
    """
    merged = merge_incoming(client.params, incoming, strategy)
    if epochs == 0:
        return merged, 0.0
    prox_mu = strategy.prox_mu if strategy.kind == "fedprox" else 0.0
    train = client.shard.train
    try:
        return train_epochs(merged, train.features, train.labels, epochs=epochs, lr=lr,
                            batch_size=batch_size, rng=client.rng, prox_mu=prox_mu, anchor=merged)
    except TrainingDivergenceError as exc:
        raise RoundError(f"client {client.client_id}: {exc}") from exc


def _check_same_arch(client_params: list[ParamSet]):
    if not client_params:
        raise InputError("need at least one client")
    spec = client_params[0].spec
    if any(p.spec != spec for p in client_params):
        raise ConfigError("clients use different architectures")


def _average(arrays: list[np.ndarray], weights: np.ndarray | None = None) -> np.ndarray:
    stacked = np.stack(arrays)
    if weights is None:
        return stacked.mean(axis=0)
    return np.tensordot(weights, stacked, axes=1)


def aggregate_fedavg(client_params: list[ParamSet], weighting: str = "uniform",
                     sample_counts=None) -> ParamSet:
    """Average every entry, BN statistics included."""
    _check_same_arch(client_params)
    weights = None
    if weighting == "by_samples":
        if sample_counts is None or len(sample_counts) != len(client_params):
            raise InputError("by_samples weighting needs one sample count per client")
        counts = np.asarray(sample_counts, dtype=np.float64)
        weights = counts / counts.sum()
    elif weighting != "uniform":
        raise InputError(f"unknown weighting {weighting!r}")
    first = client_params[0]
    return ParamSet(first.spec, {n: _average([p[n] for p in client_params], weights) for n in first})


def _share(client_params: list[ParamSet], names: list[str]) -> list[ParamSet]:
    avg = {n: _average([p[n] for p in client_params]) for n in names}
    return [p.replace({n: a.copy() for n, a in avg.items()}) for p in client_params]


def aggregate_fedbn(client_params: list[ParamSet]) -> list[ParamSet]:
    """Uniformly average shared entries; every client keeps its own BN entries."""
    _check_same_arch(client_params)
    return _share(client_params, client_params[0].shared_names)


def aggregate_fedper(client_params: list[ParamSet], personal_layers: int = 1) -> list[ParamSet]:
    """Average all but the last ``personal_layers`` layer groups."""
    _check_same_arch(client_params)
    first = client_params[0]
    personal = set(personal_groups(first.spec, personal_layers))
    return _share(client_params, [n for n in first if _group_of(n) not in personal])


def aggregate_fedap(client_params: list[ParamSet], weights: similarity.SimilarityMatrix) -> list[ParamSet]:
    """Client i receives ``sum_j w_ij * psi_j``; BN entries pass through."""
    _check_same_arch(client_params)
    n = len(client_params)
    if weights.w.shape != (n, n):
        raise InputError(f"weight matrix is {weights.w.shape}, expected {(n, n)}")
    mixed = {}
    for name in client_params[0].shared_names:
        stacked = np.stack([p[name].reshape(-1) for p in client_params])
        mixed[name] = weights.w @ stacked
    shape = {name: client_params[0][name].shape for name in mixed}
    return [p.replace({name: m[i].reshape(shape[name]).copy() for name, m in mixed.items()})
            for i, p in enumerate(client_params)]


def check_phi_isolation(client_params: list[ParamSet]):
    """Raise if any two clients share memory for a BN entry."""
    for name in client_params[0].private_names:
        arrays = [p[name] for p in client_params]
        for i in range(len(arrays)):
            for j in range(i + 1, len(arrays)):
                if np.shares_memory(arrays[i], arrays[j]):
                    raise FedsimError(f"clients {i} and {j} share BN entry {name}")


def pretrain(dataset: Dataset, spec: ModelSpec, rng: np.random.Generator, *, fraction: float = 0.2,
             epochs: int = 5, lr: float = 1e-2, batch_size: int = 32) -> ParamSet:
    """Train a reference model on a random ``fraction`` of ``dataset``."""
    if not 0.0 < fraction <= 1.0:
        raise InputError("fraction must lie in (0, 1]")
    n = len(dataset)
    size = int(round(fraction * n))
    if size < 2:
        raise InputError(f"pre-training subset has {size} samples; need at least 2")
    idx = np.sort(rng.choice(n, size=size, replace=False))
    params = init_params(spec, rng)
    params, _ = train_epochs(params, dataset.features[idx], dataset.labels[idx], epochs=epochs, lr=lr,
                             batch_size=batch_size, rng=rng)
    return params


def _aggregate(kind, strategy, current, weights, sizes, warmup, t):
    if kind == "base":
        return current
    if kind in ("fedavg", "fedprox"):
        g = aggregate_fedavg(current, strategy.avg_weighting, sizes)
        return [g.copy() for _ in current]
    if kind == "fedper":
        return aggregate_fedper(current, strategy.personal_layers)
    if kind == "fedbn" or (kind == "ffedap" and t <= warmup):
        return aggregate_fedbn(current)
    return aggregate_fedap(current, weights)


def _weights_from_profiles(profiles, variant, lam):
    d = similarity.distance_matrix(profiles, variant)
    return similarity.build_weight_matrix(d, lam)


def run_federation(clients: list[ClientState], strategy: StrategyConfig, rounds: int, *,
                   local_epochs: int = 1, lr: float = 1e-2, batch_size: int = 32,
                   reference: ParamSet | None = None, threads: int = 0,
                   debug: bool = False) -> FederationResult:
    """Run ``rounds`` rounds and return per-round, per-client metrics.

    ``threads > 0`` trains clients concurrently; results do not depend on it.
    The FedAP-family weight matrix is built exactly once: before round 1 from
    ``reference`` (fedap, dfedap), or for ffedap from the clients' BN running
    statistics once ``warmup_rounds`` rounds of FedBN have completed.
    """
    if rounds < 0:
        raise InputError("rounds must be non-negative")
    _check_same_arch([c.params for c in clients])
    kind = strategy.kind
    result = FederationResult(metrics=[], params=[c.params for c in clients])

    def build(profiles, variant):
        result.profiles = profiles
        result.weights = _weights_from_profiles(profiles, variant, strategy.lam)
        result.weight_builds += 1

    if kind in FEDAP_FAMILY and clients[0].params.spec.num_bn == 0:
        raise ConfigError(f"strategy {kind} needs at least one batch-norm layer")
    if kind in NEEDS_REFERENCE:
        if reference is None:
            raise ConfigError(f"strategy {kind} needs a pre-trained reference model")
        profiles = [similarity.collect_bn_stats(reference, c.shard.train) for c in clients]
        build(profiles, "last_layer" if kind == "dfedap" else "full")
    warmup = None
    if kind == "ffedap":
        warmup = strategy.warmup_rounds if strategy.warmup_rounds is not None else rounds // 2
        if warmup > rounds:
            raise ConfigError("warmup_rounds exceeds the round budget")
        if warmup == 0:
            build([similarity.stats_from_bn_params(c.params) for c in clients], "full")

    sizes = [len(c.shard.train) for c in clients]
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 0 else None

    def run_one(i):
        start = time.perf_counter()
        params, loss = local_update(clients[i], clients[i].params, strategy, epochs=local_epochs, lr=lr,
                                    batch_size=batch_size)
        return params, loss, int((time.perf_counter() - start) * 1000)

    def evaluate(i):
        test = clients[i].shard.test
        return accuracy(clients[i].params, test.features, test.labels)

    def mapped(fn):
        idx = range(len(clients))
        return list(pool.map(fn, idx)) if pool else [fn(i) for i in idx]

    try:
        for t in range(1, rounds + 1):
            if t > 1:
                current = [c.params for c in clients]
                if kind == "ffedap" and t == warmup + 1 and result.weights is None:
                    build([similarity.stats_from_bn_params(p) for p in current], "full")
                new = _aggregate(kind, strategy, current, result.weights, sizes, warmup, t)
                if debug and kind in FEDAP_FAMILY + ("fedbn",):
                    check_phi_isolation(new)
                for c, p in zip(clients, new):
                    c.params = p
            outs = mapped(run_one)
            for c, o in zip(clients, outs):
                c.params = o[0]
            accs = mapped(evaluate)
            for c, (_, loss, ms), acc in zip(clients, outs, accs):
                result.metrics.append(RoundMetrics(t, c.client_id, acc, loss, ms))
    finally:
        if pool:
            pool.shutdown()
    result.params = [c.params for c in clients]
    return result
