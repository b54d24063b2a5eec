"""Command-line entry point.

    swapsim run SCENARIO [--out DIR]
    swapsim sweep SCENARIO --axis batch --values 1,2,4 [--out DIR] [--jobs N]
    swapsim trace gen SCENARIO [--iter N] [-o FILE]
    swapsim trace show FILE [--limit N]
    swapsim policy show FILE
    swapsim defaults

Exit status: 0 on success, 2 when no policy can keep memory under budget
(or memory runs out even after passive swapping), 1 on I/O or validation
errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .policy import PolicyError, SwapPolicy
from .runtime import OOMError
from .scenario import SWEEP_AXES, Scenario, ScenarioError, run_scenario, run_sweep
from .trace import Phase, TraceError, Vocabulary, generate_trace, load_trace, save_trace

log = logging.getLogger("swapsim")

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2


def _cmd_run(args) -> int:
    sc = Scenario.load(args.scenario)
    out = args.out or sc.outputs.get("dir")
    res = run_scenario(sc, out)
    s = res.summary
    if out is None:
        sys.stdout.write(json.dumps(s, indent=2, sort_keys=True) + "\n")
    else:
        log.info("wrote %s/metrics.jsonl and summary.json", out)
        print(f"{s['iterations_run']} iterations, aborted={s['aborted']}, "
              f"policies={s['policies_generated']}, oom={s['oom_count']}, hazards={s['hazard_count']}")
    if s["aborted"]:
        print(f"error: {s['error']['message']}", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def _cmd_sweep(args) -> int:
    sc = Scenario.load(args.scenario)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ScenarioError(f"--values must be comma-separated integers, got {args.values!r}") from None
    table = run_sweep(sc, args.axis, values, jobs=args.jobs)
    print(f"{'value':>8} {'peak':>14} {'noswap':>7} {'swap':>5} {'t_noswap':>11} {'t_swap':>11}")
    for r in table["rows"]:
        t0 = f"{r['step_time_noswap']:.1f}" if r["step_time_noswap"] is not None else "-"
        t1 = f"{r['step_time_swap']:.1f}" if r["step_time_swap"] is not None else "-"
        print(f"{r['value']:>8} {r['noswap_peak']:>14} {str(r['noswap_ok']):>7} {str(r['swap_ok']):>5} {t0:>11} {t1:>11}")
    print(f"max no-swap {table['max_noswap']}, max swap {table['max_swap']}, ratio {table['ratio']}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def _cmd_trace_gen(args) -> int:
    sc = Scenario.load(args.scenario)
    data = save_trace(generate_trace(sc.workload, args.iter))
    if args.output:
        Path(args.output).write_bytes(data)
    else:
        sys.stdout.write(data.decode("utf-8"))
    return EXIT_OK


def _cmd_trace_show(args) -> int:
    trace = load_trace(Path(args.file).read_bytes())
    vocab = Vocabulary.default()
    counts = {ph.name: 0 for ph in Phase}
    for op in trace.ops:
        counts[op.phase.name] += 1
    total = sum(t.size for t in trace.tensors.values())
    print(f"iteration {trace.iter_index}: {len(trace.ops)} ops "
          f"(FWD {counts['FWD']}, BWD {counts['BWD']}, OPT {counts['OPT']}), "
          f"{len(trace.tensors)} tensors, {total} bytes declared")
    for op in trace.ops[: args.limit]:
        sizes = [trace.tensors[t].size for t in op.outputs]
        print(f"{op.op_index:>6} {op.phase.name:<4} {vocab.name(op.op_token):<22} "
              f"in={list(op.inputs)} out={list(op.outputs)} sizes={sizes} cost={op.compute_cost:.3f}")
    if len(trace.ops) > args.limit:
        print(f"... {len(trace.ops) - args.limit} more")
    return EXIT_OK


def _cmd_policy_show(args) -> int:
    pol = SwapPolicy.from_jsonl(Path(args.file).read_bytes())
    print(f"policy from iteration {pol.source_iter}: {len(pol.items)} items, bandwidth {pol.bandwidth}, "
          f"transfer_saturated={pol.transfer_saturated}")
    print(f"{'tensor':>7} {'size':>12} {'out_after':>9} {'free_at':>7} {'in_layer':>8} {'in_op':>6} {'bwd_use':>7}")
    for it in pol.items:
        flag = " fallback" if it.fallback else ""
        print(f"{it.tensor_id:>7} {it.size:>12} {it.swap_out_after:>9} {it.free_at:>7} "
              f"{it.swap_in_layer:>8} {it.swap_in_op:>6} {it.first_bwd_use:>7}{flag}")
    return EXIT_OK


def _cmd_defaults(args) -> int:
    sys.stdout.write(json.dumps(Scenario().to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swapsim", description="Swap-policy simulator for dynamic operator sequences.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run a scenario")
    r.add_argument("scenario")
    r.add_argument("--out", help="output directory (default: outputs.dir of the scenario)")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("sweep", help="capacity sweep along one workload axis")
    s.add_argument("scenario")
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--values", required=True, help="comma-separated integers")
    s.add_argument("--out")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=_cmd_sweep)

    t = sub.add_parser("trace", help="generate or inspect traces")
    tsub = t.add_subparsers(dest="trace_cmd", required=True)
    tg = tsub.add_parser("gen")
    tg.add_argument("scenario")
    tg.add_argument("--iter", type=int, default=0)
    tg.add_argument("-o", "--output")
    tg.set_defaults(func=_cmd_trace_gen)
    ts = tsub.add_parser("show")
    ts.add_argument("file")
    ts.add_argument("--limit", type=int, default=40)
    ts.set_defaults(func=_cmd_trace_show)

    pp = sub.add_parser("policy", help="inspect policies")
    psub = pp.add_subparsers(dest="policy_cmd", required=True)
    ps = psub.add_parser("show")
    ps.add_argument("file")
    ps.set_defaults(func=_cmd_policy_show)

    d = sub.add_parser("defaults", help="print the default scenario document")
    d.set_defaults(func=_cmd_defaults)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (PolicyError, OOMError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (OSError, ScenarioError, TraceError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
