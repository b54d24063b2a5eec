"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--scale 1.0] [--repeat 5]

Inputs come from a generated trace, so sizes track a real run.  Each row
reports the best of ``--repeat`` timings per backend and the speedup.
"""

import argparse
import sys
import timeit

import numpy as np

from swapsim import kernels
from swapsim.features import FeatureTables
from swapsim.trace import WorkloadSpec, generate_trace


def _cases(scale: float, rng):
    layers = max(2, int(48 * scale))
    tr = generate_trace(WorkloadSpec(layers=layers, ops_per_layer=12, rng_seed=1), 0)
    n_ops = len(tr.ops)
    life = tr.lifetimes()
    tids = sorted(life)
    d = [life[t][0] for t in tids]
    u = [life[t][1] for t in tids]
    sizes = [tr.tensors[t].size for t in tids]
    costs = [op.compute_cost for op in tr.ops]

    tables = FeatureTables.from_tokens(tr.tokens())
    dense = {t: k for k, t in enumerate(tids)}
    touch_t, touch_k = [], []
    for op in tr.ops:
        for t in op.inputs + op.outputs:
            touch_t.append(dense[t])
            touch_k.append(op.op_token)
    vocab = max(touch_k) + 1
    bit = [tables.bit.get(k, 0) for k in range(vocab)]
    idx = [tables.index.get(k, 0) for k in range(vocab)]
    dtypes = [int(tr.tensors[t].dtype) for t in tids]

    n_acc = int(4000 * scale)
    start = rng.uniform(0, 1000, n_acc)
    lo = rng.integers(0, 1 << 20, n_acc)
    acc = (rng.integers(0, 3, n_acc), start, start + rng.uniform(0.1, 5, n_acc),
           lo, lo + rng.integers(1, 4096, n_acc), rng.integers(0, 2, n_acc))

    return {
        f"live_bytes ({n_ops} ops, {len(tids)} tensors)": lambda m: kernels.live_bytes(d, u, sizes, n_ops, 0, impl=m),
        f"feature_stream ({len(touch_t)} touches)": lambda m: kernels.feature_stream(
            touch_t, touch_k, dtypes, bit, idx, impl=m),
        f"group_costs ({n_ops} ops, 64 groups)": lambda m: kernels.group_costs(costs, 64, impl=m),
        f"hazard_count ({n_acc} accesses)": lambda m: kernels.hazard_count(*acc, impl=m),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scale", type=float, default=1.0, help="input size multiplier")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the Python backend is available", file=sys.stderr)
    mods = {name: kernels.backend_module(name) for name in backends}
    print(f"{'kernel':<44}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for label, fn in _cases(args.scale, np.random.default_rng(0)).items():
        outs = {b: fn(m) for b, m in mods.items()}
        if not all(_same(outs["python"], o) for o in outs.values()):
            print(f"{label}: backends disagree", file=sys.stderr)
            return 1
        best = {}
        for b, m in mods.items():
            timer = timeit.Timer(lambda: fn(m))
            n, _ = timer.autorange()
            best[b] = min(timer.repeat(args.repeat, n)) / n
        speed = f"{best['python'] / best['cython']:>9.1f}x" if "cython" in best else f"{'-':>10}"
        print(f"{label:<44}" + "".join(f"{best[b] * 1e3:>10.3f}ms" for b in backends) + speed)
    return 0


if __name__ == "__main__":
    sys.exit(main())
