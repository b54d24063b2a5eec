import os
import sys

import pytest

from swapsim.executor import CommandPlan, SwapIn, SwapOut
from swapsim.trace import DType, IterationTrace, OpRecord, Phase, TensorDecl

# let tests import helpers from this directory
sys.path.insert(0, os.path.dirname(__file__))


def hand_trace(ops, sizes, dtypes=None, iter_index=0):
    """Build a trace from ``(token, phase, inputs, outputs, cost)`` tuples.

    ``sizes`` maps tensor id -> bytes.
    """
    dtypes = dtypes or {}
    recs = [
        OpRecord(i, tok, Phase(ph), tuple(ins), tuple(outs), float(cost))
        for i, (tok, ph, ins, outs, cost) in enumerate(ops)
    ]
    tensors = {tid: TensorDecl(tid, size, dtypes.get(tid, DType.BF16)) for tid, size in sizes.items()}
    tr = IterationTrace(iter_index, recs, tensors)
    tr.validate()
    return tr


def chain_trace(n_fwd=4, size=100, cost=1.0):
    """n FWD ops each producing one tensor, BWD reading them back in reverse."""
    ops, sizes = [], {}
    for i in range(n_fwd):
        ops.append((1, Phase.FWD, [i - 1] if i else [], [i], cost))
        sizes[i] = size
    grad = n_fwd
    sizes[grad] = size
    ops.append((2, Phase.BWD, [n_fwd - 1], [grad], cost))
    for i in reversed(range(n_fwd - 1)):
        ops.append((2, Phase.BWD, [grad, i], [], cost))
    return hand_trace(ops, sizes)


@pytest.fixture
def chain():
    return chain_trace()


def random_plan(trace, rng):
    """Swap out one gap per tensor at random, sometimes with a planned swap-in."""
    life = trace.lifetimes()
    uses: dict[int, list[int]] = {}
    for op in trace.ops:
        for t in op.inputs:
            uses.setdefault(t, []).append(op.op_index)
    plan = CommandPlan(len(trace.ops))
    for tid, (d, _u) in life.items():
        ops = [d] + uses.get(tid, [])
        gaps = [(a, b) for a, b in zip(ops, ops[1:]) if b - a >= 2]
        if not gaps or rng.random() < 0.5:
            continue
        a, b = gaps[rng.integers(len(gaps))]
        plan.add_out(a, SwapOut(tid, int(rng.integers(a, b))))
        if rng.random() < 0.7:  # otherwise it comes back on demand
            plan.add_in(int(rng.integers(a + 1, b + 1)), SwapIn(tid))
        if rng.random() < 0.1:
            break
    return plan


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
