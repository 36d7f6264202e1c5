import json
from pathlib import Path

import numpy as np
import pytest

from fedsim import kernels
from fedsim.harness import validate_config

ROOT = Path(__file__).resolve().parents[1]
BENCHMARK = ROOT / "configs" / "benchmark.json"
GOLDEN = Path(__file__).parent / "golden"

KERNEL_NAMES = ("bn_forward_train", "bn_forward_eval", "bn_backward", "softmax_xent", "welford_update",
                "pairwise_w2")


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request, monkeypatch):
    """Run the test once per available kernel backend."""
    impl = kernels.available_backends()[request.param]
    for name in KERNEL_NAMES:
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def benchmark_config(**overrides):
    raw = json.loads(BENCHMARK.read_text())
    for dotted, value in overrides.items():
        node = raw
        *parents, leaf = dotted.split("__")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return validate_config(raw)


def small_config(**overrides):
    """A few-second federation for integration tests."""
    base = {
        "data__n_clients": 5,
        "data__samples_per_client": 80,
        "data__feature_dim": 6,
        "data__classes": 4,
        "data__alpha": 0.5,
        "data__min_samples": 10,
        "model__hidden": [[8, True], [6, True]],
        "federation__rounds": 3,
        "federation__batch_size": 16,
        "federation__pretrain_epochs": 2,
    }
    base.update(overrides)
    return benchmark_config(**base)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
