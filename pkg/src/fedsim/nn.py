"""Dense + batch-norm + ReLU networks with hand-written backpropagation.

A model is a :class:`ParamSet` bound to a :class:`ModelSpec`. Layers are laid
out as ``fc{i} -> [bn{i}] -> relu`` for every hidden entry, followed by the
classifier ``fc{L}``. Batch-norm entries (``gamma``, ``beta`` and the running
statistics) form the client-private set; everything else is shared.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, DegenerateBatchError, InputError, TrainingDivergenceError

BN_FIELDS = ("gamma", "beta", "running_mean", "running_var")
RUNNING_FIELDS = ("running_mean", "running_var")


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden: tuple[tuple[int, bool], ...]
    num_classes: int
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple((int(w), bool(b)) for w, b in self.hidden))
        if self.input_dim < 1 or self.num_classes < 1:
            raise ConfigError("input_dim and num_classes must be positive")
        if not self.hidden:
            raise ConfigError("model needs at least one hidden layer")
        if any(w < 1 for w, _ in self.hidden):
            raise ConfigError("hidden widths must be positive")
        if not 0.0 < self.bn_momentum <= 1.0:
            raise ConfigError("bn_momentum must lie in (0, 1]")
        if self.bn_eps <= 0:
            raise ConfigError("bn_eps must be positive")

    @property
    def num_bn(self) -> int:
        return sum(1 for _, has_bn in self.hidden if has_bn)

    @property
    def head(self) -> str:
        return f"fc{len(self.hidden)}"

    def layer_groups(self) -> list[str]:
        """Parameterized layers in forward order, e.g. ``fc0, bn0, fc1, fc2``."""
        groups = []
        for i, (_, has_bn) in enumerate(self.hidden):
            groups.append(f"fc{i}")
            if has_bn:
                groups.append(f"bn{i}")
        groups.append(self.head)
        return groups

    def bn_layers(self) -> list[str]:
        return [f"bn{i}" for i, (_, has_bn) in enumerate(self.hidden) if has_bn]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        prev = self.input_dim
        for i, (width, has_bn) in enumerate(self.hidden):
            out[f"fc{i}.weight"] = (prev, width)
            out[f"fc{i}.bias"] = (width,)
            if has_bn:
                for f in BN_FIELDS:
                    out[f"bn{i}.{f}"] = (width,)
            prev = width
        out[f"{self.head}.weight"] = (prev, self.num_classes)
        out[f"{self.head}.bias"] = (self.num_classes,)
        return out

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": [[w, b] for w, b in self.hidden],
            "num_classes": self.num_classes,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
        }


def is_bn_name(name: str) -> bool:
    return name.startswith("bn")


def is_trainable(name: str) -> bool:
    return name.rsplit(".", 1)[1] not in RUNNING_FIELDS


@dataclass
class ParamSet:
    """Named parameter tensors of one model replica.

    ``private_names`` (BN, kept local) and ``shared_names`` partition the
    entries; the split depends only on the architecture.
    """

    spec: ModelSpec
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = self.spec.shapes()
        if list(self.arrays) != list(expected):
            raise ConfigError(f"parameter names {list(self.arrays)} do not match architecture")
        for name, shape in expected.items():
            arr = self.arrays[name]
            if arr.shape != shape:
                raise ConfigError(f"{name}: shape {arr.shape} != expected {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    @property
    def private_names(self) -> list[str]:
        return [n for n in self.arrays if is_bn_name(n)]

    @property
    def shared_names(self) -> list[str]:
        return [n for n in self.arrays if not is_bn_name(n)]

    @property
    def trainable_names(self) -> list[str]:
        return [n for n in self.arrays if is_trainable(n)]

    def copy(self) -> ParamSet:
        return ParamSet(self.spec, {k: v.copy() for k, v in self.arrays.items()})

    def replace(self, updates: dict[str, np.ndarray]) -> ParamSet:
        """New ParamSet with ``updates`` swapped in (unchanged arrays are shared)."""
        arrays = dict(self.arrays)
        for k, v in updates.items():
            if k not in arrays:
                raise ConfigError(f"unknown parameter {k}")
            arrays[k] = v
        return ParamSet(self.spec, arrays)

    def check_finite(self):
        for name, arr in self.arrays.items():
            if not np.all(np.isfinite(arr)):
                raise TrainingDivergenceError(f"parameter {name} is not finite")


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamSet:
    """Glorot-uniform weights, zero biases, identity BN."""
    arrays = {}
    for name, shape in spec.shapes().items():
        kind = name.rsplit(".", 1)[1]
        if kind == "weight":
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-limit, limit, size=shape)
        elif kind in ("gamma", "running_var"):
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = np.zeros(shape)
    return ParamSet(spec, arrays)


@dataclass
class ForwardCache:
    """Intermediates of one forward pass.

    ``bn_inputs`` maps each BN layer to the batch that entered it and
    ``classifier_input`` is the activation fed to the head.
    """

    train: bool
    inputs: np.ndarray
    layers: list = field(default_factory=list)
    bn_inputs: dict[str, np.ndarray] = field(default_factory=dict)
    classifier_input: np.ndarray | None = None


def forward(params: ParamSet, batch: np.ndarray, mode: str = "train", *,
            update_running: bool = True) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on ``batch`` (B x D).

    In train mode BN uses biased batch statistics and, unless
    ``update_running`` is False, replaces the running statistics in
    ``params`` with their exponential moving average.
    """
    if mode not in ("train", "eval"):
        raise InputError(f"mode must be 'train' or 'eval', got {mode!r}")
    spec = params.spec
    x = np.ascontiguousarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ConfigError(f"batch shape {x.shape} incompatible with input_dim {spec.input_dim}")
    if x.shape[0] < 1:
        raise InputError("empty batch")
    train = mode == "train"
    if train and x.shape[0] < 2:
        raise DegenerateBatchError("train-mode batch normalization needs at least 2 samples")

    cache = ForwardCache(train=train, inputs=x)
    h = x
    m = spec.bn_momentum
    eps = spec.bn_eps
    for i, (_, has_bn) in enumerate(spec.hidden):
        w, b = params[f"fc{i}.weight"], params[f"fc{i}.bias"]
        z = h @ w + b
        cache.layers.append(("fc", f"fc{i}", h))
        if has_bn:
            name = f"bn{i}"
            cache.bn_inputs[name] = z
            gamma, beta = params[f"{name}.gamma"], params[f"{name}.beta"]
            if train:
                z, xhat, mean, var, inv_std = kernels.bn_forward_train(z, gamma, beta, eps)
                cache.layers.append(("bn", name, (xhat, inv_std)))
                if update_running:
                    params.arrays[f"{name}.running_mean"] = (1 - m) * params[f"{name}.running_mean"] + m * mean
                    params.arrays[f"{name}.running_var"] = (1 - m) * params[f"{name}.running_var"] + m * var
            else:
                z = kernels.bn_forward_eval(z, gamma, beta, params[f"{name}.running_mean"],
                                            params[f"{name}.running_var"], eps)
        mask = z > 0
        h = z * mask
        cache.layers.append(("relu", f"relu{i}", mask))
    cache.classifier_input = h
    head = spec.head
    logits = h @ params[f"{head}.weight"] + params[f"{head}.bias"]
    cache.layers.append(("fc", head, h))
    return logits, cache


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise InputError("labels must be one-dimensional")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes})")
    return labels


def cross_entropy(logits: np.ndarray, labels) -> float:
    """Mean cross-entropy with max-subtraction for stability."""
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[1])
    if labels.shape[0] != logits.shape[0]:
        raise InputError("labels and logits disagree on batch size")
    loss, _ = kernels.softmax_xent(logits, labels)
    return loss


def backward_full(params: ParamSet, cache: ForwardCache, labels):
    """Gradients of the mean cross-entropy plus the gradient w.r.t. the input.

    Returns ``(loss, grads, dinput)``.
    """
    if not cache.train:
        raise InputError("backward needs a train-mode forward cache")
    spec = params.spec
    labels = _check_labels(labels, spec.num_classes)
    if len(cache.layers) != 2 * len(spec.hidden) + spec.num_bn + 1:
        raise ConfigError("forward cache does not match the parameter architecture")
    h_last = cache.layers[-1][2]
    logits = h_last @ params[f"{spec.head}.weight"] + params[f"{spec.head}.bias"]
    loss, g = kernels.softmax_xent(logits, labels)

    grads = {}
    for kind, name, saved in reversed(cache.layers):
        if kind == "fc":
            grads[f"{name}.weight"] = saved.T @ g
            grads[f"{name}.bias"] = g.sum(axis=0)
            g = g @ params[f"{name}.weight"].T
        elif kind == "relu":
            g = g * saved
        else:
            xhat, inv_std = saved
            g, grads[f"{name}.gamma"], grads[f"{name}.beta"] = kernels.bn_backward(
                np.ascontiguousarray(g), xhat, params[f"{name}.gamma"], inv_std)
    ordered = {n: grads[n] for n in params.trainable_names}
    return loss, ordered, g


def backward(params: ParamSet, cache: ForwardCache, labels) -> dict[str, np.ndarray]:
    """Gradient of the mean cross-entropy for every trainable parameter."""
    return backward_full(params, cache, labels)[1]


def sgd_step(params: ParamSet, grads: dict[str, np.ndarray], lr: float = 1e-2) -> ParamSet:
    """Plain SGD, ``p - lr * g`` for every entry in ``grads``."""
    updates = {}
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for {name}")
        updates[name] = p - lr * g
    return params.replace(updates)


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing singleton is folded into the previous batch."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def train_epochs(params: ParamSet, features: np.ndarray, labels: np.ndarray, *, epochs: int,
                 lr: float, batch_size: int, rng: np.random.Generator, prox_mu: float = 0.0,
                 anchor: ParamSet | None = None) -> tuple[ParamSet, float]:
    """Minibatch SGD for ``epochs`` passes; returns ``(params, mean batch loss)``.

    With ``prox_mu > 0`` shared trainable parameters are pulled toward
    ``anchor`` by the penalty ``prox_mu / 2 * ||p - anchor||^2``. The penalty
    is applied as its closed-form proximal step after each gradient step, which
    matches the explicit gradient ``prox_mu * (p - anchor)`` to first order in
    ``lr`` and stays stable when ``lr * prox_mu`` is large.
    """
    if features.shape[0] < 2:
        raise DegenerateBatchError("need at least 2 training samples")
    losses = []
    prox_names = [n for n in params.trainable_names if not is_bn_name(n)] if prox_mu else []
    for _ in range(epochs):
        for idx in minibatches(features.shape[0], batch_size, rng):
            logits, cache = forward(params, features[idx], "train")
            loss, grads, _ = backward_full(params, cache, labels[idx])
            if not np.isfinite(loss):
                raise TrainingDivergenceError("loss became non-finite")
            params = sgd_step(params, grads, lr)
            if prox_names:
                shrink = lr * prox_mu
                params = params.replace({n: (params[n] + shrink * anchor[n]) / (1.0 + shrink)
                                         for n in prox_names})
            losses.append(loss)
    return params, float(np.mean(losses)) if losses else 0.0


def predict(params: ParamSet, features: np.ndarray) -> np.ndarray:
    logits, _ = forward(params, features, "eval")
    return np.argmax(logits, axis=1)


def accuracy(params: ParamSet, features: np.ndarray, labels) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(params, features) == np.asarray(labels)))


def _relative_error(a: np.ndarray, n: np.ndarray, floor: float) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def finite_difference_check(spec: ModelSpec, seed: int = 0, *, batch_size: int = 8,
                            step: float = 1e-5, floor: float = 1e-6) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients.

    The model gets random (non-identity) BN affine parameters so every
    layer contributes a non-trivial Jacobian. Keys are parameter names plus
    ``"input"``. The relative error denominator is floored at ``floor``.
    """
    rng = np.random.default_rng(seed)
    params = init_params(spec, rng)
    for name in params.private_names:
        if name.endswith("gamma"):
            params.arrays[name] = rng.uniform(0.5, 1.5, size=params[name].shape)
        elif name.endswith("beta"):
            params.arrays[name] = rng.normal(0.0, 0.5, size=params[name].shape)
    x = rng.normal(size=(batch_size, spec.input_dim))
    y = rng.integers(0, spec.num_classes, size=batch_size)

    def loss_at(p, xb):
        logits, _ = forward(p, xb, "train", update_running=False)
        return cross_entropy(logits, y)

    _, cache = forward(params, x, "train", update_running=False)
    _, grads, dx = backward_full(params, cache, y)

    report = {}
    for name in params.trainable_names:
        base = params[name]
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            orig = base[idx]
            base[idx] = orig + step
            up = loss_at(params, x)
            base[idx] = orig - step
            down = loss_at(params, x)
            base[idx] = orig
            numeric[idx] = (up - down) / (2 * step)
        report[name] = _relative_error(grads[name], numeric, floor)

    numeric = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        up = loss_at(params, x)
        x[idx] = orig - step
        down = loss_at(params, x)
        x[idx] = orig
        numeric[idx] = (up - down) / (2 * step)
    report["input"] = _relative_error(dx, numeric, floor)
    return report
