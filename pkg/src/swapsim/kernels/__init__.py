"""Hot inner loops, compiled when available.

The Cython extension ``_ckernels`` is used if it was built; otherwise (or
with ``SWAPSIM_PURE_PYTHON=1``) the pure-Python ``_pykernels`` run instead.
Both produce identical results.
"""

import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

if _ckernels is not None and os.environ.get("SWAPSIM_PURE_PYTHON") != "1":
    _impl = _ckernels
    BACKEND = "cython"
else:
    _impl = _pykernels
    BACKEND = "python"


def available_backends():
    return ["python"] + (["cython"] if _ckernels is not None else [])


def backend_module(name):
    if name == "python":
        return _pykernels
    if name == "cython" and _ckernels is not None:
        return _ckernels
    raise ValueError(f"kernel backend {name!r} not available")


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def live_bytes(def_op, last_use, sizes, n_ops, base=0, impl=None):
    """Per-op live bytes: ``base`` plus every tensor with def <= i <= last_use."""
    return (impl or _impl).live_bytes(_i64(def_op), _i64(last_use), _i64(sizes), int(n_ops), int(base))


def feature_stream(touch_tensor, touch_token, tensor_dtype, tok_bit, tok_idx, impl=None):
    """Replay tensor feature updates over a flattened (tensor, op token) touch list.

    Returns per-touch ``(op_count, op_tag, op_call_stack)`` after the update.
    Tensor ids must be dense ``0..len(tensor_dtype)-1``.
    """
    return (impl or _impl).feature_stream(
        _i64(touch_tensor), _i64(touch_token), _i64(tensor_dtype), _i64(tok_bit), _i64(tok_idx)
    )


def group_costs(costs, n_groups, impl=None):
    """Near-even contiguous split; returns (estimated, true) cost per group."""
    costs = np.ascontiguousarray(costs, dtype=np.float64)
    if not 1 <= n_groups <= len(costs):
        raise ValueError(f"n_groups={n_groups} must be in [1, {len(costs)}]")
    return (impl or _impl).group_costs(costs, int(n_groups))


def hazard_count(stream, start, end, lo, hi, write, impl=None):
    """Count cross-stream access pairs overlapping in both time and address."""
    start = np.asarray(start, dtype=np.float64)
    order = np.argsort(start, kind="stable")
    return int(
        (impl or _impl).hazard_count(
            np.ascontiguousarray(np.asarray(stream)[order], dtype=np.int8),
            np.ascontiguousarray(start[order]),
            np.ascontiguousarray(np.asarray(end, dtype=np.float64)[order]),
            _i64(np.asarray(lo)[order]),
            _i64(np.asarray(hi)[order]),
            np.ascontiguousarray(np.asarray(write)[order], dtype=np.int8),
        )
    )
