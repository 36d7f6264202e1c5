"""Kernel backend selection.

The compiled extension is preferred; setting ``FEDSIM_BACKEND=python``
forces the numpy fallback. ``BACKEND`` names the active implementation.
Callers must pass C-contiguous float64 arrays.
"""

import os

from . import _kernels_py

_forced = os.environ.get("FEDSIM_BACKEND", "").strip().lower()

_impl = _kernels_py
BACKEND = "python"
if _forced not in ("python", "py", "numpy"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        if _forced == "cython":
            raise

bn_forward_train = _impl.bn_forward_train
bn_forward_eval = _impl.bn_forward_eval
bn_backward = _impl.bn_backward
softmax_xent = _impl.softmax_xent
welford_update = _impl.welford_update
pairwise_w2 = _impl.pairwise_w2


def available_backends():
    """Map backend name to its kernel module, for tests and benchmarks."""
    out = {"python": _kernels_py}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
