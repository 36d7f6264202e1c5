"""Client similarity from batch-norm statistics.

Each client summarizes the inputs of every BN layer (and of the classifier)
as diagonal Gaussians. Client distances are sums of per-layer closed-form
2-Wasserstein distances; aggregation weights are normalized inverse
distances with a fixed self-weight ``lambda`` on the diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .datagen import Dataset
from .errors import ConfigError, InputError, StatisticsError
from .nn import ParamSet, forward

D_FLOOR = 1e-12


@dataclass
class GaussianStats:
    mu: np.ndarray
    var: np.ndarray

    def to_dict(self):
        return {"mu": self.mu.tolist(), "var": self.var.tolist()}


@dataclass
class BnStatsProfile:
    """Per-BN-layer channel means/variances, plus the classifier-input stats."""

    layers: list[GaussianStats]
    last_feature: GaussianStats | None = None
    layer_names: list[str] = field(default_factory=list)

    def to_dict(self):
        return {
            "layer_names": list(self.layer_names),
            "layers": [s.to_dict() for s in self.layers],
            "last_feature": self.last_feature.to_dict() if self.last_feature else None,
        }

    @classmethod
    def from_dict(cls, d):
        def g(x):
            return GaussianStats(np.asarray(x["mu"], dtype=np.float64), np.asarray(x["var"], dtype=np.float64))

        last = d.get("last_feature")
        return cls([g(x) for x in d["layers"]], g(last) if last else None, list(d.get("layer_names", [])))


class _Moments:
    """Streaming per-channel mean and population variance."""

    def __init__(self, channels):
        self.count = 0
        self.mean = np.zeros(channels)
        self.m2 = np.zeros(channels)

    def update(self, batch):
        self.count = kernels.welford_update(self.count, self.mean, self.m2, np.ascontiguousarray(batch))

    def stats(self) -> GaussianStats:
        return GaussianStats(self.mean.copy(), np.maximum(self.m2 / self.count, 0.0))


def collect_bn_stats(reference: ParamSet, data: Dataset, batch_size: int = 256) -> BnStatsProfile:
    """Statistics of each BN layer's input over ``data`` under ``reference`` (eval mode)."""
    names = reference.spec.bn_layers()
    if not names:
        raise ConfigError("reference architecture has no batch-norm layers")
    n = len(data)
    if n < 2:
        raise StatisticsError(f"need at least 2 samples for statistics, got {n}")
    widths = {f"bn{i}": w for i, (w, has_bn) in enumerate(reference.spec.hidden) if has_bn}
    acc = {name: _Moments(widths[name]) for name in names}
    last = _Moments(reference.spec.hidden[-1][0])
    for start in range(0, n, batch_size):
        _, cache = forward(reference, data.features[start:start + batch_size], "eval")
        for name in names:
            acc[name].update(cache.bn_inputs[name])
        last.update(cache.classifier_input)
    return BnStatsProfile([acc[name].stats() for name in names], last.stats(), names)


def stats_from_bn_params(params: ParamSet) -> BnStatsProfile:
    """Profile built from each BN layer's running mean and variance."""
    names = params.spec.bn_layers()
    if not names:
        raise ConfigError("architecture has no batch-norm layers")
    layers = [GaussianStats(params[f"{n}.running_mean"].copy(), np.maximum(params[f"{n}.running_var"], 0.0))
              for n in names]
    return BnStatsProfile(layers, None, names)


def wasserstein_diag(mu_a, var_a, mu_b, var_b) -> float:
    """2-Wasserstein distance between diagonal Gaussians."""
    mu_a, var_a, mu_b, var_b = (np.asarray(v, dtype=np.float64) for v in (mu_a, var_a, mu_b, var_b))
    if not (mu_a.shape == var_a.shape == mu_b.shape == var_b.shape):
        raise InputError("mean/variance vectors must have equal lengths")
    if np.any(var_a < 0) or np.any(var_b < 0):
        raise InputError("variances must be non-negative")
    dm = mu_a - mu_b
    ds = np.sqrt(var_a) - np.sqrt(var_b)
    return float(np.sqrt(np.dot(dm, dm) + np.dot(ds, ds)))


def _layers_for(profile: BnStatsProfile, variant: str) -> list[GaussianStats]:
    if variant == "full":
        return profile.layers
    if variant == "last_layer":
        if profile.last_feature is None:
            raise InputError("profile has no classifier-input statistics")
        return [profile.last_feature]
    raise InputError(f"unknown variant {variant!r}")


def pairwise_distance(p: BnStatsProfile, q: BnStatsProfile, variant: str = "full") -> float:
    """Sum over layers of per-layer Wasserstein distances."""
    lp, lq = _layers_for(p, variant), _layers_for(q, variant)
    if len(lp) != len(lq) or any(a.mu.shape != b.mu.shape for a, b in zip(lp, lq)):
        raise InputError("profiles come from different architectures")
    return sum(wasserstein_diag(a.mu, a.var, b.mu, b.var) for a, b in zip(lp, lq))


def distance_matrix(profiles: list[BnStatsProfile], variant: str = "full") -> np.ndarray:
    """All pairwise client distances, computed layer by layer with the kernel."""
    n = len(profiles)
    layer_lists = [_layers_for(p, variant) for p in profiles]
    n_layers = len(layer_lists[0])
    out = np.zeros((n, n))
    for layers in layer_lists:
        if len(layers) != n_layers:
            raise InputError("profiles come from different architectures")
    for li in range(n_layers):
        try:
            mus = np.stack([layers[li].mu for layers in layer_lists])
            var = np.stack([layers[li].var for layers in layer_lists])
        except ValueError:
            raise InputError("profiles come from different architectures") from None
        if np.any(var < 0):
            raise InputError("variances must be non-negative")
        out += kernels.pairwise_w2(np.ascontiguousarray(mus), np.ascontiguousarray(np.sqrt(var)))
    return out


@dataclass
class SimilarityMatrix:
    w: np.ndarray
    lam: float

    @property
    def n(self) -> int:
        return self.w.shape[0]

    def to_dict(self):
        return {"clients": self.n, "lambda": self.lam, "rows": self.w.tolist()}

    @classmethod
    def from_dict(cls, d):
        w = np.asarray(d["rows"], dtype=np.float64)
        if w.shape != (d["clients"], d["clients"]):
            raise InputError("rows do not form a clients x clients matrix")
        return cls(w, float(d["lambda"]))


def build_weight_matrix(distances, lam: float = 0.5, d_floor: float = D_FLOOR) -> SimilarityMatrix:
    """Row-stochastic weights: ``lam`` on the diagonal, ``(1 - lam)`` split by inverse distance."""
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise InputError("distance matrix must be square")
    if not 0.0 <= lam <= 1.0:
        raise InputError("lambda must lie in [0, 1]")
    n = d.shape[0]
    if n == 1:
        return SimilarityMatrix(np.ones((1, 1)), lam)
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise InputError("distances must be finite and non-negative")
    if np.any(np.diag(d) != 0):
        raise InputError("distance matrix must have a zero diagonal")
    if not np.allclose(d, d.T, rtol=1e-12, atol=0.0):
        raise InputError("distance matrix must be symmetric")

    off = ~np.eye(n, dtype=bool)
    if np.all(d[off] <= d_floor):
        hat = np.where(off, 1.0 / (n - 1), 0.0)
    else:
        inv = np.where(off, 1.0 / np.maximum(d, d_floor), 0.0)
        hat = inv / inv.sum(axis=1, keepdims=True)
    w = (1.0 - lam) * hat
    np.fill_diagonal(w, lam)
    return SimilarityMatrix(w, lam)
