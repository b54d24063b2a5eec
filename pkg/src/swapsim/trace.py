"""Workload model: operator/tensor traces and a synthetic trace generator.

A trace is one training iteration: an ordered list of operator records with
single-assignment tensor dataflow.  Tensor ids are only meaningful inside one
iteration; nothing in a trace links a tensor to "the same" tensor of another
iteration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np


class Phase(IntEnum):
    FWD = 0
    BWD = 1
    OPT = 2


class DType(IntEnum):
    F32 = 0
    F16 = 1
    BF16 = 2
    I64 = 3


class TraceError(ValueError):
    """Invalid trace or workload description."""


class TraceFormatError(TraceError):
    """Malformed serialized trace; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class TensorDecl:
    tensor_id: int
    size: int
    dtype: DType = DType.BF16

    def __post_init__(self):
        if self.size <= 0:
            raise TraceError(f"tensor {self.tensor_id}: size must be > 0, got {self.size}")


@dataclass(frozen=True)
class OpRecord:
    op_index: int
    op_token: int
    phase: Phase
    inputs: tuple[int, ...]
    outputs: tuple[int, ...]
    compute_cost: float


@dataclass
class IterationTrace:
    iter_index: int
    ops: list[OpRecord]
    tensors: dict[int, TensorDecl]

    def __len__(self) -> int:
        return len(self.ops)

    def tokens(self) -> list[int]:
        return [op.op_token for op in self.ops]

    def validate(self) -> None:
        """Check single-assignment dataflow and FWD*BWD*OPT* phase order."""
        defined: set[int] = set()
        last_phase = Phase.FWD
        for pos, op in enumerate(self.ops):
            if op.op_index != pos:
                raise TraceError(f"op at position {pos} has op_index {op.op_index}")
            if op.compute_cost <= 0:
                raise TraceError(f"op {pos}: compute_cost must be > 0")
            if op.phase < last_phase:
                raise TraceError(f"op {pos}: phase {op.phase.name} after {last_phase.name}")
            last_phase = op.phase
            for tid in op.inputs:
                if tid not in defined:
                    raise TraceError(f"op {pos}: input {tid} used before definition")
            for tid in op.outputs:
                if tid in defined:
                    raise TraceError(f"op {pos}: tensor {tid} defined twice")
                if tid not in self.tensors:
                    raise TraceError(f"op {pos}: output {tid} has no declaration")
                defined.add(tid)

    def lifetimes(self) -> dict[int, tuple[int, int]]:
        """tensor_id -> (defining op, last using op).

        The last use is where the reference count drops and the block is
        released; a tensor nobody reads dies at its producer.
        """
        life: dict[int, list[int]] = {}
        for op in self.ops:
            for tid in op.outputs:
                life[tid] = [op.op_index, op.op_index]
            for tid in op.inputs:
                life[tid][1] = op.op_index
        return {tid: (d, u) for tid, (d, u) in life.items()}

    def phase_ranges(self) -> dict[Phase, tuple[int, int]]:
        """Phase -> half-open [start, stop) op range, only for phases present."""
        out: dict[Phase, list[int]] = {}
        for op in self.ops:
            if op.phase in out:
                out[op.phase][1] = op.op_index + 1
            else:
                out[op.phase] = [op.op_index, op.op_index + 1]
        return {ph: (a, b) for ph, (a, b) in out.items()}


# ---------------------------------------------------------------------------
# Operator vocabulary
# ---------------------------------------------------------------------------

# name -> (activation multiplier, forward cost, output dtype)
OP_TABLE: dict[str, tuple[int, float, DType]] = {
    "layer_norm": (1, 1.0, DType.BF16),
    "linear_qkv": (3, 6.0, DType.BF16),
    "attention": (1, 8.0, DType.F32),
    "linear_out": (1, 2.0, DType.BF16),
    "residual_add": (1, 0.5, DType.BF16),
    "linear_up": (4, 8.0, DType.BF16),
    "gelu": (4, 1.0, DType.BF16),
    "linear_down": (1, 8.0, DType.BF16),
    "branch_gate": (1, 1.5, DType.BF16),
}

DEFAULT_LAYER_TEMPLATE = (
    "layer_norm",
    "linear_qkv",
    "attention",
    "linear_out",
    "residual_add",
    "layer_norm",
    "linear_up",
    "gelu",
    "linear_down",
    "residual_add",
)

EVAL_OPS = ("eval_embed", "eval_matmul", "eval_softmax", "eval_matmul_out", "eval_metric")
OPTIMIZER_OP = "optimizer_step"

VOCAB: tuple[str, ...] = (
    tuple(OP_TABLE)
    + tuple(f"{name}_bwd" for name in OP_TABLE)
    + (OPTIMIZER_OP,)
    + EVAL_OPS
)


class Vocabulary:
    """Stable operator-name <-> integer token mapping."""

    def __init__(self, names: Iterable[str] | dict[str, int]):
        if isinstance(names, dict):
            self._tok = dict(names)
        else:
            self._tok = {name: i for i, name in enumerate(names)}
        self._name = {t: n for n, t in self._tok.items()}
        if len(self._name) != len(self._tok):
            raise TraceError("vocabulary tokens must be unique")

    @classmethod
    def default(cls) -> "Vocabulary":
        return _DEFAULT_VOCAB

    def token(self, name: str) -> int:
        try:
            return self._tok[name]
        except KeyError:
            raise TraceError(f"unknown operator name {name!r}") from None

    def name(self, token: int) -> str:
        return self._name.get(token, f"<{token}>")

    def encode(self, names: Sequence[str]) -> list[int]:
        return [self.token(n) for n in names]

    def __len__(self) -> int:
        return len(self._tok)


_DEFAULT_VOCAB = Vocabulary(VOCAB)


def tokenize(trace: IterationTrace) -> list[int]:
    """Operator sequence of one iteration as an integer sequence."""
    return trace.tokens()


# ---------------------------------------------------------------------------
# Workload description and generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SkipOptimizer:
    """Loss-scale overflow: the optimizer update is skipped."""

    prob: float = 0.0
    iters: tuple[int, ...] = ()

    def applies(self, spec: "WorkloadSpec", iter_index: int, rng: np.random.Generator) -> bool:
        draw = rng.random()
        return iter_index in self.iters or draw < self.prob


@dataclass(frozen=True)
class InsertValidation:
    """On-the-fly validation every ``every`` iterations.

    ``position="before"`` runs the evaluation pass ahead of the training step
    (a loop that validates at the top of the step), ``"after"`` appends it.
    """

    every: int
    extra_ops: int
    position: str = "before"

    def applies(self, spec: "WorkloadSpec", iter_index: int, rng: np.random.Generator) -> bool:
        return iter_index > 0 and iter_index % self.every == 0


@dataclass(frozen=True)
class ConditionalBranch:
    """With probability ``prob`` layer ``layer`` takes an alternate span of extra ops."""

    prob: float
    layer: int = 0
    extra_ops: int = 1

    def applies(self, spec: "WorkloadSpec", iter_index: int, rng: np.random.Generator) -> bool:
        return rng.random() < self.prob


DynamicEvent = SkipOptimizer | InsertValidation | ConditionalBranch

_EVENT_TYPES = {
    "skip_optimizer": SkipOptimizer,
    "insert_validation": InsertValidation,
    "conditional_branch": ConditionalBranch,
}


@dataclass(frozen=True)
class WorkloadSpec:
    layers: int = 4
    ops_per_layer: int = 10
    activation_size: int = 1 << 20
    batch: int = 1
    seq: int = 1
    hidden: int = 1
    # resident parameter + optimizer state bytes per layer, scales with hidden**2
    static_per_layer: int = 0
    # weight-gradient bytes per layer, scales with hidden**2
    wgrad_per_layer: int = 1 << 18
    base_cost: float = 1.0
    bwd_cost_multiplier: float = 2.0
    opt_cost_per_layer: float = 0.5
    opt_ops: int = 1
    cost_jitter: float = 0.02
    layer_template: tuple[str, ...] = DEFAULT_LAYER_TEMPLATE
    events: tuple[DynamicEvent, ...] = ()
    rng_seed: int = 0

    def validate(self) -> None:
        for name in ("layers", "ops_per_layer", "activation_size", "batch", "seq", "hidden"):
            if getattr(self, name) <= 0:
                raise TraceError(f"WorkloadSpec.{name} must be > 0")
        if self.static_per_layer < 0 or self.wgrad_per_layer < 0 or self.opt_ops < 0:
            raise TraceError("WorkloadSpec sizes/counts must be >= 0")
        if self.base_cost <= 0 or self.bwd_cost_multiplier <= 0 or self.opt_cost_per_layer <= 0:
            raise TraceError("WorkloadSpec costs must be > 0")
        if not 0 <= self.cost_jitter < 1:
            raise TraceError("cost_jitter must be in [0, 1)")
        if not self.layer_template:
            raise TraceError("layer_template must not be empty")
        for name in self.layer_template:
            if name not in OP_TABLE:
                raise TraceError(f"layer_template: unknown op {name!r}")
        for ev in self.events:
            if isinstance(ev, InsertValidation):
                if ev.every <= 0 or ev.extra_ops <= 0 or ev.position not in ("before", "after"):
                    raise TraceError(f"invalid {ev}")
            elif isinstance(ev, ConditionalBranch):
                if not 0 <= ev.layer < self.layers or ev.extra_ops <= 0:
                    raise TraceError(f"invalid {ev}")

    @property
    def size_scale(self) -> int:
        return self.batch * self.seq * self.hidden

    @property
    def static_bytes(self) -> int:
        return self.static_per_layer * self.layers * self.hidden**2

    @classmethod
    def from_dict(cls, data: dict) -> "WorkloadSpec":
        data = dict(data)
        events = []
        for ev in data.pop("events", ()):
            ev = dict(ev)
            kind = ev.pop("type")
            try:
                ctor = _EVENT_TYPES[kind]
            except KeyError:
                raise TraceError(f"unknown dynamic event type {kind!r}") from None
            if "iters" in ev:
                ev["iters"] = tuple(ev["iters"])
            events.append(ctor(**ev))
        if "layer_template" in data:
            data["layer_template"] = tuple(data["layer_template"])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise TraceError(f"unknown WorkloadSpec fields: {sorted(unknown)}")
        return cls(events=tuple(events), **data)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "events"}
        out["layer_template"] = list(self.layer_template)
        evs = []
        for ev in self.events:
            kind = next(k for k, v in _EVENT_TYPES.items() if isinstance(ev, v))
            d = {"type": kind, **ev.__dict__}
            if "iters" in d:
                d["iters"] = list(d["iters"])
            evs.append(d)
        out["events"] = evs
        return out


@dataclass
class _Builder:
    vocab: Vocabulary
    ops: list[OpRecord] = field(default_factory=list)
    tensors: dict[int, TensorDecl] = field(default_factory=dict)

    def tensor(self, size: int, dtype: DType) -> int:
        tid = len(self.tensors)
        self.tensors[tid] = TensorDecl(tid, int(size), dtype)
        return tid

    def op(self, name: str, phase: Phase, inputs, outputs, cost: float) -> None:
        self.ops.append(
            OpRecord(len(self.ops), self.vocab.token(name), phase, tuple(inputs), tuple(outputs), float(cost))
        )


def _cost_jitter(spec: WorkloadSpec) -> np.ndarray:
    # Fixed per (layer, position): the same in every iteration.
    rng = np.random.default_rng([spec.rng_seed, 0x5EED])
    return 1.0 + spec.cost_jitter * rng.uniform(-1.0, 1.0, size=(spec.layers, spec.ops_per_layer))


def _validation_ops(b: _Builder, spec: WorkloadSpec, n: int, phase: Phase) -> None:
    prev = None
    size = spec.activation_size * spec.size_scale
    for j in range(n):
        out = b.tensor(size, DType.BF16)
        b.op(EVAL_OPS[j % len(EVAL_OPS)], phase, [] if prev is None else [prev], [out],
             spec.base_cost * spec.size_scale)
        prev = out


def generate_trace(spec: WorkloadSpec, iter_index: int) -> IterationTrace:
    """Synthesize iteration ``iter_index`` of the workload.

    Pure function of ``(spec, iter_index)``.  With no dynamic events every
    iteration has the same operator sequence, sizes and costs.
    """
    spec.validate()
    if iter_index < 0:
        raise TraceError("iter_index must be >= 0")

    skip_opt = False
    validations: list[InsertValidation] = []
    branch_layers: dict[int, int] = {}
    for k, ev in enumerate(spec.events):
        rng = np.random.default_rng([spec.rng_seed, iter_index, k])
        if not ev.applies(spec, iter_index, rng):
            continue
        if isinstance(ev, SkipOptimizer):
            skip_opt = True
        elif isinstance(ev, InsertValidation):
            validations.append(ev)
        else:
            branch_layers[ev.layer] = branch_layers.get(ev.layer, 0) + ev.extra_ops

    b = _Builder(Vocabulary.default())
    for ev in validations:
        if ev.position == "before":
            _validation_ops(b, spec, ev.extra_ops, Phase.FWD)

    jitter = _cost_jitter(spec)
    template = spec.layer_template
    scale = spec.size_scale
    # forward: (name, input tensor or None, output tensor, cost, first-of-layer)
    fwd: list[tuple[str, int | None, int, float, bool]] = []
    prev: int | None = None
    for layer in range(spec.layers):
        names = [template[j % len(template)] for j in range(spec.ops_per_layer)]
        costs = [OP_TABLE[n][1] * spec.base_cost * scale * jitter[layer, j] for j, n in enumerate(names)]
        extra = branch_layers.get(layer, 0)
        if extra:
            at = 1 if len(names) > 1 else len(names)
            names[at:at] = ["branch_gate"] * extra
            costs[at:at] = [OP_TABLE["branch_gate"][1] * spec.base_cost * scale] * extra
        for j, (name, cost) in enumerate(zip(names, costs)):
            mult, _, dtype = OP_TABLE[name]
            out = b.tensor(spec.activation_size * mult * scale, dtype)
            b.op(name, Phase.FWD, [] if prev is None else [prev], [out], cost)
            fwd.append((name, prev, out, cost, j == 0))
            prev = out

    # backward mirrors forward in reverse; the incoming gradient of the first
    # backward op is the last forward output
    grad = fwd[-1][2]
    wgrads: list[int] = []
    wgrad_size = spec.wgrad_per_layer * spec.hidden**2
    for name, saved, _out, cost, first_of_layer in reversed(fwd):
        inputs = [grad] + ([saved] if saved is not None else [])
        outputs = []
        new_grad = None
        if saved is not None:
            new_grad = b.tensor(b.tensors[saved].size, b.tensors[saved].dtype)
            outputs.append(new_grad)
        if first_of_layer and wgrad_size > 0:
            wg = b.tensor(wgrad_size, DType.F32)
            outputs.append(wg)
            wgrads.append(wg)
        b.op(f"{name}_bwd", Phase.BWD, inputs, outputs, cost * spec.bwd_cost_multiplier)
        grad = new_grad if new_grad is not None else grad

    if not skip_opt and spec.opt_ops > 0:
        opt_cost = spec.opt_cost_per_layer * spec.base_cost * spec.layers * spec.hidden**2 / spec.opt_ops
        for chunk in np.array_split(np.asarray(wgrads, dtype=np.int64), spec.opt_ops):
            b.op(OPTIMIZER_OP, Phase.OPT, [int(t) for t in chunk], [], opt_cost)

    for ev in validations:
        if ev.position == "after":
            _validation_ops(b, spec, ev.extra_ops, Phase.OPT)

    trace = IterationTrace(iter_index, b.ops, b.tensors)
    return trace


# ---------------------------------------------------------------------------
# Serialization: JSON lines, header first, one op per line
# ---------------------------------------------------------------------------

TRACE_FORMAT = "swapsim-trace"


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=True)


def trace_header(trace: IterationTrace) -> dict:
    return {
        "format": TRACE_FORMAT,
        "version": 1,
        "iter_index": trace.iter_index,
        "n_ops": len(trace.ops),
        "tensors": [[t.tensor_id, t.size, int(t.dtype)] for t in sorted(trace.tensors.values(), key=lambda t: t.tensor_id)],
    }


def op_to_json(op: OpRecord) -> dict:
    return {
        "op": op.op_index,
        "tok": op.op_token,
        "ph": int(op.phase),
        "in": list(op.inputs),
        "out": list(op.outputs),
        "cost": op.compute_cost,
    }


def save_trace(trace: IterationTrace) -> bytes:
    lines = [_dumps(trace_header(trace))]
    lines.extend(_dumps(op_to_json(op)) for op in trace.ops)
    return ("\n".join(lines) + "\n").encode("utf-8")


def iter_json_lines(data: bytes):
    """Yield (byte offset, parsed object) per line; raise TraceFormatError on bad JSON."""
    offset = 0
    for raw in data.split(b"\n"):
        start = offset
        offset += len(raw) + 1
        if not raw.strip():
            continue
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise TraceFormatError("invalid UTF-8", start + e.start) from None
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise TraceFormatError(f"invalid JSON: {e.msg}", start + len(text[: e.pos].encode("utf-8"))) from None
        if not isinstance(obj, dict):
            raise TraceFormatError("expected a JSON object", start)
        yield start, obj


def op_from_json(obj: dict, offset: int) -> OpRecord:
    try:
        return OpRecord(
            int(obj["op"]),
            int(obj["tok"]),
            Phase(obj["ph"]),
            tuple(int(t) for t in obj["in"]),
            tuple(int(t) for t in obj["out"]),
            float(obj["cost"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise TraceFormatError(f"bad op record: {e!r}", offset) from None


def load_trace(data: bytes) -> IterationTrace:
    """Parse a serialized trace.  All-or-nothing: any defect raises."""
    lines = iter_json_lines(data)
    try:
        hoff, header = next(lines)
    except StopIteration:
        raise TraceFormatError("empty trace file", 0) from None
    if header.get("format") != TRACE_FORMAT:
        raise TraceFormatError("missing trace header", hoff)
    try:
        n_ops = int(header["n_ops"])
        tensors = {}
        for tid, size, dtype in header["tensors"]:
            tensors[int(tid)] = TensorDecl(int(tid), int(size), DType(dtype))
        iter_index = int(header["iter_index"])
    except (KeyError, TypeError, ValueError) as e:
        raise TraceFormatError(f"bad header: {e!r}", hoff) from None
    ops = []
    for off, obj in lines:
        ops.append(op_from_json(obj, off))
    if len(ops) != n_ops:
        raise TraceFormatError(f"expected {n_ops} ops, found {len(ops)} (truncated?)", len(data))
    trace = IterationTrace(iter_index, ops, tensors)
    try:
        trace.validate()
    except TraceFormatError:
        raise
    except TraceError as e:
        raise TraceFormatError(str(e), hoff) from None
    return trace
