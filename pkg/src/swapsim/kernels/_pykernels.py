"""Pure-Python reference versions of the hot kernels.

Signatures match ``_ckernels`` exactly; inputs are already-coerced numpy
arrays (see ``swapsim.kernels``).
"""

import numpy as np

MASK64 = (1 << 64) - 1


def live_bytes(def_op, last_use, sizes, n_ops, base):
    delta = [0] * (n_ops + 1)
    for t in range(len(sizes)):
        delta[int(def_op[t])] += int(sizes[t])
        delta[int(last_use[t]) + 1] -= int(sizes[t])
    out = np.empty(n_ops, dtype=np.int64)
    acc = int(base)
    for i in range(n_ops):
        acc += delta[i]
        out[i] = acc
    return out


def feature_stream(touch_tensor, touch_token, tensor_dtype, tok_bit, tok_idx):
    n_t = len(tensor_dtype)
    n_v = len(tok_bit)
    count = [0] * n_t
    tag = [0] * n_t
    stack = [0] * n_t
    m = len(touch_tensor)
    out_count = np.empty(m, dtype=np.int64)
    out_tag = np.empty(m, dtype=np.int64)
    out_stack = np.empty(m, dtype=np.uint64)
    for k in range(m):
        t = int(touch_tensor[k])
        tok = int(touch_token[k])
        if 0 <= tok < n_v:
            bit = int(tok_bit[tok])
            idx = int(tok_idx[tok])
        else:
            bit = 0
            idx = 0
        count[t] += 1
        tag[t] |= bit
        stack[t] = ((stack[t] << 8) + idx) & MASK64
        out_count[k] = count[t]
        out_tag[k] = tag[t]
        out_stack[k] = stack[t]
    return out_count, out_tag, out_stack


def group_costs(costs, n_groups):
    n = len(costs)
    total = 0.0
    for c in costs:
        total += float(c)
    per_op = total / n
    base, rem = divmod(n, n_groups)
    est = np.empty(n_groups, dtype=np.float64)
    true = np.empty(n_groups, dtype=np.float64)
    pos = 0
    for g in range(n_groups):
        size = base + (1 if g < rem else 0)
        s = 0.0
        for i in range(pos, pos + size):
            s += float(costs[i])
        true[g] = s
        est[g] = per_op * size
        pos += size
    return est, true


def hazard_count(stream, start, end, lo, hi, write):
    """Count conflicting access pairs; arrays must be sorted by ``start``."""
    n = len(start)
    hits = 0
    for i in range(n):
        e_i = float(end[i])
        j = i + 1
        while j < n and float(start[j]) < e_i:
            if (
                stream[i] != stream[j]
                and (write[i] or write[j])
                and lo[i] < hi[j]
                and lo[j] < hi[i]
                and float(start[i]) < float(end[j])
            ):
                hits += 1
            j += 1
    return hits
