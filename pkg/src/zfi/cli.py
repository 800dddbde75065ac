"""Command-line driver: run, trace, harden, check and replay."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .checker import (
    BREAKOUT, POISONING, BudgetExceeded, StateSpace, StaleProgramError, Violation, check_breakout,
    check_poisoning, parse_cell, replay,
)
from .hardening import PASSES, HardeningError, harden
from .lang import ZfiSyntaxError, parse_program, render_program
from .leakage import LeakModel, dump_trace, first_difference
from .machine import Config, LayoutError, MemoryLayout, Stuck, initial_config, run_arch
from .oracles import ALWAYS_CORRECT, OracleClass, ScriptedOracle, parse_script
from .speculation import CET, PLAIN, run_spec

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_USAGE = 2
EXIT_BUDGET = 3


class UsageError(Exception):
    pass


# -- inputs -------------------------------------------------------------------


def read_text(path: str) -> str:
    """Read a file; ``corpus/<name>`` falls back to the bundled corpus."""
    p = Path(path)
    if p.exists():
        return p.read_text()
    if path.startswith("corpus/"):
        bundled = resources.files("zfi").joinpath(path)
        if bundled.is_file():
            return bundled.read_text()
    raise UsageError(f"no such file: {path}")


def load_layout(path: str | None, width: int | None) -> MemoryLayout:
    if path is None:
        return MemoryLayout.unguarded(width or 8)
    layout = MemoryLayout.from_dict(json.loads(read_text(path)))
    if width is not None and width != layout.width:
        raise UsageError(f"--width {width} disagrees with layout width {layout.width}")
    return layout


def load_init(path: str | None, sets: list[str]) -> tuple[dict, dict]:
    regs: dict = {}
    mem: dict = {}
    if path:
        d = json.loads(read_text(path))
        regs.update({k: _int(v) for k, v in d.get("regs", {}).items()})
        mem.update({_int(a): _int(v) for a, v in d.get("mem", {}).items()})
    for item in sets:
        if "=" not in item:
            raise UsageError(f"--set expects CELL=VALUE, got {item!r}")
        cell, value = item.split("=", 1)
        kind, key = parse_cell(cell)
        (regs if kind == "reg" else mem)[key] = _int(value)
    return regs, mem


def _int(v) -> int:
    return int(v, 0) if isinstance(v, str) else int(v)


def make_oracle(klass: str | None, script: str | None) -> ScriptedOracle:
    if klass is None:
        klass = "scripted" if script else "always-correct"
    return ScriptedOracle(OracleClass.parse(klass), parse_script(script or ""))


# -- run ----------------------------------------------------------------------


@dataclass
class RunReport:
    semantics: str
    steps: int
    outcome: str
    final: dict
    traces: dict[str, list[str]]
    mispredicted: bool = False
    oracle: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "semantics": self.semantics,
            "steps": self.steps,
            "outcome": self.outcome,
            "final": self.final,
            "traces": self.traces,
            "mispredicted": self.mispredicted,
            "oracle": self.oracle,
        }

    @classmethod
    def from_json(cls, d) -> "RunReport":
        return cls(d["semantics"], d["steps"], d["outcome"], d["final"], d["traces"],
                   d.get("mispredicted", False), d.get("oracle", {}))


def execute(c: Config, layout: MemoryLayout, n: int, semantics: str, oracle: ScriptedOracle):
    if semantics == "arch":
        return run_arch(c, layout, n)
    return run_spec(c, layout, oracle, n, CET if semantics == "cet" else PLAIN)


def run_report(c: Config, layout: MemoryLayout, n: int, semantics: str, oracle: ScriptedOracle) -> RunReport:
    final, history = execute(c, layout, n, semantics, oracle)
    stuck = history[-1] if history and isinstance(history[-1], Stuck) else None
    steps = len(history) - (1 if stuck else 0)
    return RunReport(
        semantics,
        steps,
        f"stuck: {stuck.reason}" if stuck else "ok",
        {
            "pc": final.pc,
            "regs": dict(sorted(final.regs.items())),
            "mem": {f"{a:#x}": v for a, v in sorted(final.mem.items())},
        },
        {str(m): [str(o) for o in final.obs[m]] for m in LeakModel},
        final.mispredicted,
        oracle.to_json() if semantics != "arch" else {},
    )


def _prepare(args) -> tuple[object, MemoryLayout, Config]:
    p = parse_program(read_text(args.program))
    layout = load_layout(args.layout, args.width)
    regs, mem = load_init(args.init, args.set)
    return p, layout, initial_config(p, layout, regs, mem)


def cmd_run(args) -> int:
    _, layout, c = _prepare(args)
    report = run_report(c, layout, args.steps, args.semantics, make_oracle(args.oracle_class, args.script))
    if args.json:
        print(json.dumps(report.to_json(), indent=2))
    else:
        print(f"semantics: {report.semantics}  steps: {report.steps}  outcome: {report.outcome}"
              f"  mispredicted: {report.mispredicted}")
        print(f"pc: {report.final['pc']:#x}  regs: {report.final['regs']}  mem: {report.final['mem']}")
        models = [LeakModel.parse(m) for m in args.model] if args.model else list(LeakModel)
        for m in models:
            print(f"# model: {m}")
            for o in report.traces[str(m)]:
                print(o)
    if args.strict and report.outcome.startswith("stuck") and report.outcome != "stuck: halt":
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_trace(args) -> int:
    _, layout, c = _prepare(args)
    final, _ = execute(c, layout, args.steps, args.semantics, make_oracle(args.oracle_class, args.script))
    model = LeakModel.parse(args.model)
    sys.stdout.write(dump_trace(final.obs[model], model))
    return EXIT_OK


# -- harden -------------------------------------------------------------------


def cmd_harden(args) -> int:
    p = parse_program(read_text(args.program))
    layout = load_layout(args.layout, args.width)
    lowered = harden(p, layout, args.pass_name, pin_heap=not args.allow_heap_writes)
    text = render_program(lowered.program)
    block_map = lowered.block_map()
    if args.output:
        Path(args.output).write_text(text)
        Path(args.block_map or args.output + ".blocks.json").write_text(json.dumps(block_map, indent=2) + "\n")
    elif args.block_map:
        Path(args.block_map).write_text(json.dumps(block_map, indent=2) + "\n")
    if args.json:
        print(json.dumps({"program": text, "block_map": block_map}, indent=2))
    elif not args.output:
        sys.stdout.write(text)
    return EXIT_OK


# -- check / replay -------------------------------------------------------------


def cmd_check(args) -> int:
    p = parse_program(read_text(args.program))
    layout = load_layout(args.layout, args.width)
    if args.harden:
        p = harden(p, layout, args.harden, pin_heap=not args.allow_heap_writes).program
    regs, mem = load_init(args.init, args.set)
    cells = [c for c in (args.enumerate or "").split(",") if c.strip()]
    domain = [_int(v) for v in args.domain.split(",")] if args.domain else None
    space = StateSpace.declare(cells, domain, regs, mem)
    klass = OracleClass.parse(args.oracle_class)
    semantics = args.semantics or ("cet" if args.harden == "cet" else "spec")
    mode = CET if semantics == "cet" else PLAIN
    prop = args.property
    model = LeakModel.parse(args.model) if args.model else (LeakModel.ARCH if prop == BREAKOUT else LeakModel.CT)
    if not args.json:
        print(f"# state space: {space.size(layout.width)} states over {', '.join(space.summary(layout.width)['cells']) or 'no cells'}",
              file=sys.stderr)
    check = check_breakout if prop == BREAKOUT else check_poisoning
    try:
        verdict = check(p, layout, klass, args.steps, space, model, mode, args.strict_trace_equality,
                        args.budget, args.workers)
    except BudgetExceeded as e:
        print(json.dumps({"verdict": "budget-exceeded", "budget": e.budget, "runs": e.spent})
              if args.json else f"budget exceeded: {e}")
        return EXIT_BUDGET
    d = verdict.to_json()
    if args.output:
        Path(args.output).write_text(json.dumps(d, indent=2) + "\n")
    if args.json:
        print(json.dumps(d, indent=2))
    elif verdict.secure:
        print(f"secure up to {verdict.n} steps ({verdict.property}, {verdict.model}, {verdict.oracle_class}): "
              f"{verdict.scripts} scripts x {verdict.space['states']} states")
    else:
        _print_violation(verdict)
    return EXIT_OK if verdict.secure else EXIT_VIOLATION


def _print_violation(v: Violation):
    script = ",".join(str(x) for x in v.oracle.script) or "(correct)"
    print(f"{v.property} violation under {v.model}: oracle {v.oracle.klass} script {script}")
    print(f"  init1: regs {dict(v.init1.regs)} mem { {hex(a): x for a, x in v.init1.mem.items()} }")
    print(f"  init2: regs {dict(v.init2.regs)} mem { {hex(a): x for a, x in v.init2.mem.items()} }")
    print(f"  diverge at observation {v.divergence_index} (step {v.divergence_step}, "
          f"mispredicted={v.mispredicted_at_divergence})")
    print(f"  trace1: {' '.join(str(o) for o in v.trace1)}")
    print(f"  trace2: {' '.join(str(o) for o in v.trace2)}")


def cmd_replay(args) -> int:
    d = json.loads(read_text(args.verdict))
    if d.get("verdict") != "violation":
        raise UsageError("replay needs a violation verdict")
    text = read_text(args.program) if args.program else None
    v = Violation.from_json(d, text)
    oracle = ALWAYS_CORRECT if args.always_correct else None
    t1, t2 = replay(v, oracle=oracle)
    a, b = t1[v.model], t2[v.model]
    idx = first_difference(a, b)
    reproduced = oracle is None and (a, b) == (v.trace1, v.trace2)
    if args.json:
        print(json.dumps({
            "trace1": [str(o) for o in a],
            "trace2": [str(o) for o in b],
            "divergence_index": idx,
            "reproduced": reproduced,
        }, indent=2))
    else:
        print(f"trace1: {' '.join(str(o) for o in a)}")
        print(f"trace2: {' '.join(str(o) for o in b)}")
        print("traces equal" if idx is None else f"traces differ at observation {idx}")
        if oracle is None:
            print("reproduced" if reproduced else "NOT reproduced")
    return EXIT_OK if idx is None else EXIT_VIOLATION


# -- parser -------------------------------------------------------------------


def _add_inputs(sp):
    sp.add_argument("program", help="assembly file (corpus/<name> resolves to the bundled corpus)")
    sp.add_argument("--layout", help="memory layout JSON (default: unguarded address space)")
    sp.add_argument("--width", type=int, help="value width in bits (default 8 without a layout)")
    sp.add_argument("--init", help="initial state JSON: {\"regs\": {...}, \"mem\": {...}}")
    sp.add_argument("--set", action="append", default=[], metavar="CELL=VALUE",
                    help="override a register or mem[addr] (repeatable)")


def _add_oracle(sp):
    sp.add_argument("--semantics", choices=("arch", "spec", "cet"), default="arch")
    sp.add_argument("--oracle-class", "--oracle", dest="oracle_class",
                    help="always-correct | direction-only | btb | scripted")
    sp.add_argument("--script", help="comma-separated choices: N, correct, flip, taken, fall, @ADDR")
    sp.add_argument("--steps", "-n", type=int, default=16)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="zfi", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("run", help="execute a program and print its traces")
    _add_inputs(sp)
    _add_oracle(sp)
    sp.add_argument("--model", action="append", help="leakage model(s) to print (default: all)")
    sp.add_argument("--json", action="store_true")
    sp.add_argument("--strict", action="store_true", help="exit 1 if the run gets stuck before halting")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("trace", help="dump one leakage trace in the line format")
    _add_inputs(sp)
    _add_oracle(sp)
    sp.add_argument("--model", default="ct")
    sp.set_defaults(func=cmd_trace)

    sp = sub.add_parser("harden", help="apply a hardening pass")
    sp.add_argument("program")
    sp.add_argument("--pass", dest="pass_name", choices=PASSES, required=True)
    sp.add_argument("--layout", help="memory layout JSON")
    sp.add_argument("--width", type=int)
    sp.add_argument("--allow-heap-writes", action="store_true",
                    help="accept programs that write or spill the heap base register")
    sp.add_argument("-o", "--output", help="write the lowered program here (block map to <output>.blocks.json)")
    sp.add_argument("--block-map", help="write the block map JSON here")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_harden)

    sp = sub.add_parser("check", help="bounded breakout/poisoning check")
    _add_inputs(sp)
    sp.add_argument("--property", choices=(BREAKOUT, POISONING), required=True)
    sp.add_argument("--model", choices=[str(m) for m in LeakModel])
    sp.add_argument("--oracle-class", "--oracle", dest="oracle_class", default="direction-only")
    sp.add_argument("--semantics", choices=("spec", "cet"))
    sp.add_argument("--steps", "-n", type=int, default=10)
    sp.add_argument("--enumerate", help="comma-separated cells, e.g. rA,mem[0xf]")
    sp.add_argument("--domain", help="comma-separated values for enumerated cells (default: all)")
    sp.add_argument("--harden", choices=PASSES, help="lower the program before checking")
    sp.add_argument("--allow-heap-writes", action="store_true")
    sp.add_argument("--strict-trace-equality", action="store_true",
                    help="also count differing stuck reason or step count as a violation")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--budget", type=int, help="maximum number of runs before giving up")
    sp.add_argument("-o", "--output", help="write the verdict JSON here")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("replay", help="re-run a stored counterexample")
    sp.add_argument("verdict", help="violation JSON written by check")
    sp.add_argument("--program", help="program text to replay against (checked against the stored hash)")
    sp.add_argument("--always-correct", action="store_true", help="substitute the always-correct oracle")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_replay)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ZfiSyntaxError, LayoutError, HardeningError, StaleProgramError, ValueError,
            json.JSONDecodeError) as e:
        print(f"zfi: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
