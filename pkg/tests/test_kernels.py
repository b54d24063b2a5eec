import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swapsim import kernels

BACKENDS = kernels.available_backends()


def test_selected_backend_is_available():
    assert kernels.BACKEND in BACKENDS


@st.composite
def lifetimes(draw):
    n_ops = draw(st.integers(1, 60))
    n_t = draw(st.integers(0, 40))
    d = draw(st.lists(st.integers(0, n_ops - 1), min_size=n_t, max_size=n_t))
    span = draw(st.lists(st.integers(0, n_ops), min_size=n_t, max_size=n_t))
    u = [min(n_ops - 1, a + s) for a, s in zip(d, span)]
    sizes = draw(st.lists(st.integers(1, 1 << 40), min_size=n_t, max_size=n_t))
    return d, u, sizes, n_ops, draw(st.integers(0, 1 << 30))


@settings(max_examples=60, deadline=None)
@given(lifetimes())
def test_live_bytes_matches_scan(case):
    d, u, sizes, n_ops, base = case
    want = np.array([base + sum(s for a, b, s in zip(d, u, sizes) if a <= i <= b) for i in range(n_ops)])
    for name in BACKENDS:
        got = kernels.live_bytes(d, u, sizes, n_ops, base, impl=kernels.backend_module(name))
        np.testing.assert_array_equal(got, want)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=80), st.data())
def test_group_costs_backends_agree(costs, data):
    g = data.draw(st.integers(1, len(costs)))
    outs = [kernels.group_costs(costs, g, impl=kernels.backend_module(n)) for n in BACKENDS]
    sizes = [len(costs) // g + (1 if k < len(costs) % g else 0) for k in range(g)]
    bounds = np.cumsum([0] + sizes)
    true = [sum(costs[bounds[k] : bounds[k + 1]]) for k in range(g)]
    for est, tr in outs:
        np.testing.assert_allclose(tr, true, rtol=1e-12)
        np.testing.assert_allclose(est, np.array(sizes) * sum(costs) / len(costs), rtol=1e-12)


def test_group_costs_rejects_bad_count():
    with pytest.raises(ValueError):
        kernels.group_costs([1.0, 2.0], 3)


def _stack_ref(touches, dtype_n, bit, idx):
    count, tag, stack = [0] * dtype_n, [0] * dtype_n, [0] * dtype_n
    out = []
    for t, tok in touches:
        b = bit[tok] if tok < len(bit) else 0
        i = idx[tok] if tok < len(idx) else 0
        count[t] += 1
        tag[t] |= b
        stack[t] = ((stack[t] << 8) + i) % (1 << 64)
        out.append((count[t], tag[t], stack[t]))
    return out


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_feature_stream_matches_reference(data):
    n_t = data.draw(st.integers(1, 6))
    n_v = data.draw(st.integers(1, 40))
    touches = data.draw(st.lists(st.tuples(st.integers(0, n_t - 1), st.integers(0, n_v + 2)), max_size=60))
    bit = data.draw(st.lists(st.sampled_from([0] + [1 << k for k in range(32)]), min_size=n_v, max_size=n_v))
    idx = data.draw(st.lists(st.integers(0, 255), min_size=n_v, max_size=n_v))
    want = _stack_ref(touches, n_t, bit, idx)
    tt = [t for t, _ in touches]
    tk = [k for _, k in touches]
    for name in BACKENDS:
        c, g, s = kernels.feature_stream(tt, tk, [0] * n_t, bit, idx, impl=kernels.backend_module(name))
        assert list(zip(c.tolist(), g.tolist(), [int(x) for x in s])) == want


@st.composite
def accesses(draw):
    n = draw(st.integers(0, 30))
    rows = []
    for _ in range(n):
        start = draw(st.integers(0, 50))
        lo = draw(st.integers(0, 50))
        rows.append((draw(st.integers(0, 2)), float(start), float(start + draw(st.integers(1, 10))),
                     lo, lo + draw(st.integers(1, 10)), draw(st.integers(0, 1))))
    return rows


def _hazard_ref(rows):
    hits = 0
    for i in range(len(rows)):
        for j in range(i + 1, len(rows)):
            a, b = rows[i], rows[j]
            if a[0] != b[0] and (a[5] or b[5]) and a[1] < b[2] and b[1] < a[2] and a[3] < b[4] and b[3] < a[4]:
                hits += 1
    return hits


@settings(max_examples=80, deadline=None)
@given(accesses())
def test_hazard_count_matches_pairwise_oracle(rows):
    cols = list(zip(*rows)) if rows else [[]] * 6
    for name in BACKENDS:
        assert kernels.hazard_count(*cols, impl=kernels.backend_module(name)) == _hazard_ref(rows)


def test_env_var_forces_python_fallback():
    import os
    import subprocess
    import sys

    env = {**os.environ, "SWAPSIM_PURE_PYTHON": "1"}
    code = "from swapsim import kernels; print(kernels.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
