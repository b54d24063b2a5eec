"""Multi-iteration scenarios and capacity sweeps.

A scenario is one JSON document::

    {
      "workload": {... WorkloadSpec fields ...},
      "sim": {... SimConfig fields ...},
      "budget_ratio": 1.5,          # optional: budget = no-swap peak / ratio
      "iterations": 20,
      "profiler": {"m": 2, "n": 5, "len_threshold": 0.05, "cos_threshold": 0.95},
      "policy": {"C": 1.0, "groups_fwd": null, "groups_bwd": null, "overlap_factor": 1.0},
      "matcher": "fuzzy",
      "outputs": {"dir": null}
    }

``swapsim defaults`` prints the fully expanded default document.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .executor import MATCHERS, drive_iteration
from .policy import PolicyConfig, PolicyError, SwapPolicy, generate_policy
from .profiler import (
    DetailedRecord,
    ProfilerState,
    Stage,
    adjust_stage,
    compare_sequences,
    no_swap_usage,
    reconstruct_memory,
)
from .runtime import OOMError, SimConfig, run_iteration, unbounded
from .trace import TraceError, WorkloadSpec, generate_trace, tokenize

SWEEP_AXES = ("batch", "layers", "seq", "hidden")


class ScenarioError(ValueError):
    """Invalid scenario document."""


@dataclass
class ProfilerParams:
    m: int = 2
    n: int = 5
    len_threshold: float = 0.05
    cos_threshold: float = 0.95


@dataclass
class Scenario:
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    sim: SimConfig = field(default_factory=lambda: SimConfig(memory_budget=1 << 30, bandwidth=float(1 << 20)))
    iterations: int = 20
    budget_ratio: float | None = None
    profiler: ProfilerParams = field(default_factory=ProfilerParams)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    matcher: str = "fuzzy"
    outputs: dict = field(default_factory=lambda: {"dir": None})

    def __post_init__(self):
        if self.iterations < 1:
            raise ScenarioError("iterations must be >= 1")
        if self.matcher not in MATCHERS:
            raise ScenarioError(f"matcher must be one of {sorted(MATCHERS)}")
        if self.budget_ratio is not None and self.budget_ratio <= 0:
            raise ScenarioError("budget_ratio must be > 0")

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        data = dict(data)
        known = {"workload", "sim", "iterations", "budget_ratio", "profiler", "policy", "matcher", "outputs"}
        unknown = set(data) - known
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        try:
            base = cls()
            sim = {**base.sim.to_dict(), **data.get("sim", {})}
            return cls(
                workload=WorkloadSpec.from_dict(data.get("workload", {})),
                sim=SimConfig.from_dict(sim),
                iterations=int(data.get("iterations", base.iterations)),
                budget_ratio=data.get("budget_ratio"),
                profiler=ProfilerParams(**data.get("profiler", {})),
                policy=PolicyConfig.from_dict(data.get("policy", {})),
                matcher=data.get("matcher", base.matcher),
                outputs={**base.outputs, **data.get("outputs", {})},
            )
        except (TypeError, ValueError) as e:
            if isinstance(e, ScenarioError):
                raise
            raise ScenarioError(str(e)) from None

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ScenarioError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
        if not isinstance(data, dict):
            raise ScenarioError(f"{path}: scenario must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "workload": self.workload.to_dict(),
            "sim": self.sim.to_dict(),
            "iterations": self.iterations,
            "budget_ratio": self.budget_ratio,
            "profiler": asdict(self.profiler),
            "policy": self.policy.to_dict(),
            "matcher": self.matcher,
            "outputs": dict(self.outputs),
        }

    def resolved_sim(self) -> SimConfig:
        """SimConfig with ``budget_ratio`` turned into an absolute budget."""
        if self.budget_ratio is None:
            return self.sim
        return replace(self.sim, memory_budget=int(noswap_peak(self.workload) / self.budget_ratio))


def noswap_peak(spec: WorkloadSpec, iter_index: int = 0) -> int:
    tr = generate_trace(spec, iter_index)
    return int(no_swap_usage(tr, spec.static_bytes).max())


@dataclass
class ScenarioResult:
    rows: list[dict]
    summary: dict
    policy: SwapPolicy | None = None

    def metrics_jsonl(self) -> bytes:
        return "".join(_dumps(r) + "\n" for r in self.rows).encode("utf-8")


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=True)


def run_scenario(sc: Scenario, out_dir: str | Path | None = None) -> ScenarioResult:
    """Drive profiling, policy generation and application over all iterations.

    A policy error or unrecoverable OOM aborts the run; the partial result
    is still returned with ``summary["aborted"]`` set.
    """
    spec = sc.workload
    cfg = sc.resolved_sim()
    static = spec.static_bytes
    state = ProfilerState(sc.profiler.m, sc.profiler.n, sc.profiler.len_threshold, sc.profiler.cos_threshold)
    stage = Stage.WARMUP
    latest: SwapPolicy | None = None  # generated by the previous GenPolicy iteration
    best: SwapPolicy | None = None  # retained for Stable
    tried: list[tuple[float, int, SwapPolicy]] = []
    prev_seq = None
    rows: list[dict] = []
    error = None
    generated = 0
    first_mismatch = None

    for it in range(sc.iterations):
        trace = generate_trace(spec, it)
        seq = tokenize(trace)
        policy = {Stage.WARMUP: None, Stage.GENPOLICY: latest, Stage.STABLE: best}[stage]
        plan = drive_iteration(trace, policy, matcher=sc.matcher)
        row = {"iter": it, "stage": stage.value, "n_ops": len(trace.ops),
               "policy_items": len(policy.items) if policy else 0,
               "policy_source": policy.source_iter if policy else -1}
        try:
            res = run_iteration(trace, plan, cfg, static)
        except OOMError as e:
            error = {"kind": "oom", "iter": it, "op": e.op_index, "size": e.size, "message": str(e)}
            row["error"] = error["message"]
            rows.append(row)
            break
        row.update(res.metrics.to_dict())
        row.update(plan.diagnostics.to_dict())
        if plan.diagnostics.mismatches and first_mismatch is None:
            first_mismatch = it

        if prev_seq is None:
            diff = compare_sequences(seq, seq)
        else:
            diff = compare_sequences(seq, prev_seq)
        prev_seq = seq
        row["len_diff"] = diff.len_diff_fraction
        row["cosine"] = diff.cosine_similarity

        if stage is Stage.GENPOLICY:
            if policy is not None:
                tried.append((res.metrics.step_time, it, policy))
            detailed = DetailedRecord(trace, res.live_memory, res.metrics.step_time, res.swap_events)
        nxt = adjust_stage(state, seq)
        row["next_stage"] = nxt.value
        row["stable_step"] = state.stable_step

        if stage is Stage.GENPOLICY and nxt is not Stage.WARMUP:
            if nxt is Stage.STABLE and tried:
                best = min(tried, key=lambda x: (x[0], x[1]))[2]
            else:
                try:
                    fresh = generate_policy(detailed, reconstruct_memory(detailed), cfg.memory_budget,
                                            cfg.bandwidth, sc.policy, spec.layers)
                except PolicyError as e:
                    error = {"kind": "policy", "iter": it, "op": e.op_index, "residual": e.residual,
                             "message": str(e)}
                    row["error"] = str(e)
                    rows.append(row)
                    break
                generated += 1
                if nxt is Stage.STABLE:
                    best = fresh
                else:
                    latest = fresh
        elif stage is Stage.WARMUP and nxt is Stage.GENPOLICY:
            latest, tried = None, []
        rows.append(row)
        stage = nxt

    summary = summarize(rows, error, generated, first_mismatch, cfg, best)
    result = ScenarioResult(rows, summary, best)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def summarize(rows, error, generated, first_mismatch, cfg, best) -> dict:
    by_stage: dict[str, list[dict]] = {}
    for r in rows:
        by_stage.setdefault(r["stage"], []).append(r)
    stages = {}
    for name, rs in sorted(by_stage.items()):
        done = [r for r in rs if "error" not in r]
        stages[name] = {
            "iterations": len(rs),
            "mean_step_time": sum(r["step_time"] for r in done) / len(done) if done else None,
            "oom_count": sum(r["oom_count"] for r in done),
            "passive_swap_count": sum(r["passive_swap_count"] for r in done),
        }
    transitions = [
        {"iter": r["iter"], "from": r["stage"], "to": r["next_stage"]}
        for r in rows
        if "next_stage" in r and r["stage"] != r["next_stage"]
    ]
    done = [r for r in rows if "error" not in r]
    return {
        "iterations_run": len(rows),
        "aborted": error is not None,
        "error": error,
        "memory_budget": cfg.memory_budget,
        "policies_generated": generated,
        "retained_policy_items": len(best.items) if best else 0,
        "stages": stages,
        "transitions": transitions,
        "hazard_count": sum(r["hazard_count"] for r in done),
        "oom_count": sum(r["oom_count"] for r in done),
        "match_stale": sum(r["match_stale"] for r in done),
        "match_collisions": sum(r["match_collisions"] for r in done),
        "match_mismatches": sum(r["match_mismatches"] for r in done),
        "first_mismatch_iter": first_mismatch,
    }


def write_outputs(result: ScenarioResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.jsonl").write_bytes(result.metrics_jsonl())
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if result.policy is not None:
        (out / "policy.jsonl").write_bytes(result.policy.to_jsonl())


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def sweep_point(sc: Scenario, axis: str, value: int) -> dict:
    """Feasibility of one scale point with and without swapping."""
    spec = replace(sc.workload, **{axis: int(value)})
    cfg = sc.resolved_sim() if sc.budget_ratio is None else sc.sim
    budget = cfg.memory_budget
    static = spec.static_bytes
    trace = generate_trace(spec, 0)
    usage = no_swap_usage(trace, static)
    peak = int(usage.max())
    row = {"axis": axis, "value": int(value), "noswap_peak": peak, "budget": budget,
           "noswap_ok": peak <= budget, "swap_ok": False, "transfer_saturated": None,
           "policy_items": 0, "step_time_noswap": None, "step_time_swap": None, "error": None}
    free = unbounded(cfg, trace, static)
    try:
        base = run_iteration(trace, None, free, static)
    except OOMError as e:  # cannot happen with an unbounded budget, kept for clarity
        row["error"] = str(e)
        return row
    row["step_time_noswap"] = base.metrics.step_time
    if row["noswap_ok"]:
        row["swap_ok"] = True
        row["step_time_swap"] = base.metrics.step_time
        return row
    if static >= budget:
        row["error"] = "static memory alone exceeds budget"
        return row
    detailed = DetailedRecord(trace, usage, base.metrics.step_time, [])
    try:
        pol = generate_policy(detailed, None, budget, cfg.bandwidth, sc.policy, spec.layers)
    except PolicyError as e:
        row["error"] = str(e)
        return row
    row["policy_items"] = len(pol.items)
    row["transfer_saturated"] = pol.transfer_saturated
    replay_trace = generate_trace(spec, 1)
    plan = drive_iteration(replay_trace, pol, matcher=sc.matcher)
    try:
        res = run_iteration(replay_trace, plan, cfg, static)
    except OOMError as e:
        row["error"] = str(e)
        return row
    row["step_time_swap"] = res.metrics.step_time
    row["replay_oom_count"] = res.metrics.oom_count
    row["swap_ok"] = not pol.transfer_saturated and res.metrics.oom_count == 0
    return row


def run_sweep(sc: Scenario, axis: str, values, jobs: int = 1) -> dict:
    if axis not in SWEEP_AXES:
        raise ScenarioError(f"axis must be one of {SWEEP_AXES}")
    values = [int(v) for v in values]
    if not values or min(values) <= 0:
        raise ScenarioError("sweep values must be positive integers")
    if sc.budget_ratio is not None:
        # pin the budget to the base workload so every point shares it
        sc = replace(sc, sim=sc.resolved_sim(), budget_ratio=None)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            rows = list(ex.map(sweep_point, [sc] * len(values), [axis] * len(values), values))
    else:
        rows = [sweep_point(sc, axis, v) for v in values]
    max_noswap = max((r["value"] for r in rows if r["noswap_ok"]), default=None)
    max_swap = max((r["value"] for r in rows if r["swap_ok"]), default=None)
    ratio = max_swap / max_noswap if max_noswap and max_swap else None
    return {"axis": axis, "rows": rows, "max_noswap": max_noswap, "max_swap": max_swap, "ratio": ratio}


__all__ = [
    "ProfilerParams",
    "Scenario",
    "ScenarioError",
    "ScenarioResult",
    "SWEEP_AXES",
    "TraceError",
    "noswap_peak",
    "run_scenario",
    "run_sweep",
    "sweep_point",
]
