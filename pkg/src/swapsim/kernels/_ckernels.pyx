# cython: language_level=3
"""Compiled versions of the hot kernels (see _pykernels for the reference)."""

import numpy as np
from libc.stdint cimport int64_t, uint64_t, int8_t



def live_bytes(const int64_t[:] def_op, const int64_t[:] last_use, const int64_t[:] sizes,
               Py_ssize_t n_ops, int64_t base):
    cdef Py_ssize_t t, i, n_t = sizes.shape[0]
    cdef int64_t[:] delta = np.zeros(n_ops + 1, dtype=np.int64)
    out_arr = np.empty(n_ops, dtype=np.int64)
    cdef int64_t[:] out = out_arr
    cdef int64_t acc = base
    for t in range(n_t):
        delta[def_op[t]] += sizes[t]
        delta[last_use[t] + 1] -= sizes[t]
    for i in range(n_ops):
        acc += delta[i]
        out[i] = acc
    return out_arr


def feature_stream(const int64_t[:] touch_tensor, const int64_t[:] touch_token,
                   const int64_t[:] tensor_dtype, const int64_t[:] tok_bit,
                   const int64_t[:] tok_idx):
    cdef Py_ssize_t n_t = tensor_dtype.shape[0], n_v = tok_bit.shape[0]
    cdef Py_ssize_t m = touch_tensor.shape[0], k
    cdef int64_t t, tok, bit
    cdef uint64_t idx
    cdef int64_t[:] count = np.zeros(n_t, dtype=np.int64)
    cdef int64_t[:] tag = np.zeros(n_t, dtype=np.int64)
    cdef uint64_t[:] stack = np.zeros(n_t, dtype=np.uint64)
    oc = np.empty(m, dtype=np.int64)
    ot = np.empty(m, dtype=np.int64)
    os_ = np.empty(m, dtype=np.uint64)
    cdef int64_t[:] out_count = oc
    cdef int64_t[:] out_tag = ot
    cdef uint64_t[:] out_stack = os_
    for k in range(m):
        t = touch_tensor[k]
        tok = touch_token[k]
        if 0 <= tok < n_v:
            bit = tok_bit[tok]
            idx = <uint64_t>tok_idx[tok]
        else:
            bit = 0
            idx = 0
        count[t] += 1
        tag[t] |= bit
        stack[t] = (stack[t] << 8) + idx
        out_count[k] = count[t]
        out_tag[k] = tag[t]
        out_stack[k] = stack[t]
    return oc, ot, os_


def group_costs(const double[:] costs, Py_ssize_t n_groups):
    cdef Py_ssize_t n = costs.shape[0], g, i, pos = 0, size
    cdef Py_ssize_t base = n // n_groups, rem = n % n_groups
    cdef double total = 0.0, s, per_op
    for i in range(n):
        total += costs[i]
    per_op = total / n
    est_arr = np.empty(n_groups, dtype=np.float64)
    true_arr = np.empty(n_groups, dtype=np.float64)
    cdef double[:] est = est_arr
    cdef double[:] tru = true_arr
    for g in range(n_groups):
        size = base + (1 if g < rem else 0)
        s = 0.0
        for i in range(pos, pos + size):
            s += costs[i]
        tru[g] = s
        est[g] = per_op * size
        pos += size
    return est_arr, true_arr


def hazard_count(const int8_t[:] stream, const double[:] start, const double[:] end,
                 const int64_t[:] lo, const int64_t[:] hi, const int8_t[:] write):
    cdef Py_ssize_t n = start.shape[0], i, j
    cdef Py_ssize_t hits = 0
    cdef double e_i
    for i in range(n):
        e_i = end[i]
        j = i + 1
        while j < n and start[j] < e_i:
            if (stream[i] != stream[j] and (write[i] or write[j])
                    and lo[i] < hi[j] and lo[j] < hi[i] and start[i] < end[j]):
                hits += 1
            j += 1
    return hits
