"""Bounded exhaustive checking of breakout and poisoning security.

Both properties are two-run non-interference statements quantified over an
oracle class and over pairs of initial configurations. Oracles are
enumerated as decision scripts (see ``oracles``), initial configurations
come from a declared ``StateSpace``. For each script every state is run
once; pairs are then compared by grouping runs on the premise of the
property, which keeps the pair quantifier linear in practice.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .lang import REGISTER_ALIASES, REGISTERS, Program, parse_program, render_program
from .leakage import LeakModel, ObsTrace, Observation, first_difference
from .machine import Config, MemoryLayout, Stuck, initial_config, run_arch
from .oracles import OracleClass, ScriptedOracle, explore_scripts
from .speculation import PLAIN, run_spec

BREAKOUT = "breakout"
POISONING = "poisoning"


class BudgetExceeded(RuntimeError):
    def __init__(self, budget: int, spent: int):
        super().__init__(f"run budget of {budget} exceeded ({spent} runs)")
        self.budget = budget
        self.spent = spent


class StaleProgramError(ValueError):
    pass


def program_hash(p: Program) -> str:
    return hashlib.sha256(render_program(p).encode()).hexdigest()[:16]


# -- state spaces -------------------------------------------------------------


Cell = tuple[str, object]  # ("reg", name) or ("mem", address)


def parse_cell(text: str) -> Cell:
    text = text.strip()
    if text.startswith("mem[") and text.endswith("]"):
        return ("mem", int(text[4:-1], 0))
    name = REGISTER_ALIASES.get(text, text)
    if name not in REGISTERS:
        raise ValueError(f"unknown register or cell {text!r}")
    return ("reg", name)


def cell_name(cell: Cell) -> str:
    kind, key = cell
    return f"mem[{key:#x}]" if kind == "mem" else str(key)


@dataclass(frozen=True)
class StateSpace:
    """Initial states: fixed base registers/memory plus declared cells that
    each range over ``domain``."""

    base_regs: Mapping[str, int] = field(default_factory=dict)
    base_mem: Mapping[int, int] = field(default_factory=dict)
    cells: tuple[Cell, ...] = ()
    domain: tuple[int, ...] | None = None

    @classmethod
    def declare(cls, cells: Iterable[str | Cell] = (), domain=None, regs=None, mem=None) -> "StateSpace":
        parsed = tuple(parse_cell(c) if isinstance(c, str) else tuple(c) for c in cells)
        return cls(dict(regs or {}), dict(mem or {}), parsed, None if domain is None else tuple(domain))

    def values(self, width: int) -> tuple[int, ...]:
        mask = (1 << width) - 1
        if self.domain is None:
            return tuple(range(mask + 1))
        return tuple(sorted({v & mask for v in self.domain}))

    def size(self, width: int) -> int:
        return len(self.values(width)) ** len(self.cells)

    def states(self, width: int) -> Iterable[tuple[dict, dict]]:
        for combo in itertools.product(self.values(width), repeat=len(self.cells)):
            regs = dict(self.base_regs)
            mem = dict(self.base_mem)
            for (kind, key), v in zip(self.cells, combo):
                (regs if kind == "reg" else mem)[key] = v
            yield regs, mem

    def configs(self, p: Program, layout: MemoryLayout) -> list[Config]:
        return [initial_config(p, layout, regs, mem) for regs, mem in self.states(layout.width)]

    def summary(self, width: int) -> dict:
        return {
            "cells": [cell_name(c) for c in self.cells],
            "domain": list(self.values(width)),
            "base_regs": dict(self.base_regs),
            "base_mem": {f"{a:#x}": v for a, v in self.base_mem.items()},
            "states": self.size(width),
        }


def mem_equiv(c1: Config, c2: Config, layout: MemoryLayout) -> bool:
    """Agreement on every sandbox region and on all non-memory state; host
    memory may differ."""
    if (c1.pc, c1.regs, c1.obs, c1.mu_state, c1.mispredicted) != (c2.pc, c2.regs, c2.obs, c2.mu_state, c2.mispredicted):
        return False
    return all(c1.mem.get(a, 0) == c2.mem.get(a, 0) for a in layout.sandbox_addresses())


def _sandbox_key(c: Config, layout: MemoryLayout) -> tuple:
    cells = tuple(sorted((a, v) for a, v in c.mem.items() if layout.in_sandbox(a)))
    return (c.pc, tuple(sorted(c.regs.items())), c.obs, c.mu_state, c.mispredicted, cells)


# -- verdicts -----------------------------------------------------------------


def _config_json(c: Config) -> dict:
    return {
        "pc": c.pc,
        "regs": dict(sorted(c.regs.items())),
        "mem": {f"{a:#x}": v for a, v in sorted(c.mem.items())},
    }


def _config_from_json(p: Program, d: Mapping) -> Config:
    return Config(p, int(d["pc"]), dict(d.get("regs", {})), {int(a, 0): int(v) for a, v in d.get("mem", {}).items()})


def _obs_json(trace: Sequence[Observation]) -> list[str]:
    return [str(o) for o in trace]


def _obs_from_json(items: Sequence[str]) -> tuple[Observation, ...]:
    out = []
    for s in items:
        kind, value = s.split()
        out.append(Observation(kind, int(value, 16)))
    return tuple(out)


@dataclass(frozen=True)
class SecureUpTo:
    property: str
    n: int
    oracle_class: OracleClass
    model: LeakModel
    space: dict
    scripts: int
    runs: int
    pairs: int
    program_hash: str = ""

    secure = True

    def to_json(self) -> dict:
        return {
            "verdict": "secure-up-to",
            "property": self.property,
            "n": self.n,
            "oracle_class": self.oracle_class.value,
            "model": str(self.model),
            "space": self.space,
            "scripts": self.scripts,
            "runs": self.runs,
            "pairs": self.pairs,
            "program_hash": self.program_hash,
        }


@dataclass(frozen=True)
class Violation:
    property: str
    model: LeakModel
    oracle: ScriptedOracle
    init1: Config
    init2: Config
    trace1: tuple[Observation, ...]
    trace2: tuple[Observation, ...]
    divergence_index: int
    divergence_step: int
    mispredicted_at_divergence: bool
    n: int
    layout: MemoryLayout
    mode: str = PLAIN
    strict: bool = False
    arch_trace1: tuple[Observation, ...] = ()
    arch_trace2: tuple[Observation, ...] = ()
    stuck1: str | None = None
    stuck2: str | None = None

    secure = False

    @property
    def program(self) -> Program:
        return self.init1.program

    def to_json(self) -> dict:
        d = {
            "verdict": "violation",
            "property": self.property,
            "model": str(self.model),
            "oracle": self.oracle.to_json(),
            "init1": _config_json(self.init1),
            "init2": _config_json(self.init2),
            "trace1": _obs_json(self.trace1),
            "trace2": _obs_json(self.trace2),
            "divergence_index": self.divergence_index,
            "divergence_step": self.divergence_step,
            "mispredicted_at_divergence": self.mispredicted_at_divergence,
            "n": self.n,
            "mode": self.mode,
            "strict": self.strict,
            "stuck1": self.stuck1,
            "stuck2": self.stuck2,
            "layout": self.layout.to_dict(),
            "program": render_program(self.program),
            "program_hash": program_hash(self.program),
        }
        if self.property == POISONING:
            d["arch_trace1"] = _obs_json(self.arch_trace1)
            d["arch_trace2"] = _obs_json(self.arch_trace2)
        return d

    @classmethod
    def from_json(cls, d: Mapping, program_text: str | None = None) -> "Violation":
        text = d["program"] if program_text is None else program_text
        p = parse_program(text)
        if d.get("program_hash") and program_hash(p) != d["program_hash"]:
            raise StaleProgramError("program does not match the hash recorded in the counterexample")
        return cls(
            d["property"],
            LeakModel.parse(d["model"]),
            ScriptedOracle.from_json(d["oracle"]),
            _config_from_json(p, d["init1"]),
            _config_from_json(p, d["init2"]),
            _obs_from_json(d["trace1"]),
            _obs_from_json(d["trace2"]),
            int(d["divergence_index"]),
            int(d["divergence_step"]),
            bool(d["mispredicted_at_divergence"]),
            int(d["n"]),
            MemoryLayout.from_dict(d["layout"]),
            d.get("mode", PLAIN),
            bool(d.get("strict", False)),
            _obs_from_json(d.get("arch_trace1", ())),
            _obs_from_json(d.get("arch_trace2", ())),
            d.get("stuck1"),
            d.get("stuck2"),
        )


Verdict = SecureUpTo | Violation


# -- run comparison -----------------------------------------------------------


def _stuck(history) -> str | None:
    if history and isinstance(history[-1], Stuck):
        return history[-1].reason.value
    return None


def _outcome_key(run, model: LeakModel, strict: bool):
    final, history = run
    trace = final.obs[model]
    if strict:
        return (trace, _stuck(history), len(history))
    return trace


def _divergence(init: Config, run, model: LeakModel, index: int) -> tuple[int, bool]:
    """Step that emitted observation ``index`` (or the last step, when the
    traces only differ in length) and whether that step ran mispredicted."""
    _, history = run
    prev = init
    for k, out in enumerate(history):
        if isinstance(out, Stuck):
            return k, prev.mispredicted
        if len(out.config.obs[model]) > index:
            return k, prev.mispredicted
        prev = out.config
    return max(len(history) - 1, 0), prev.mispredicted


def _first_pair(keys_of_group: Iterable[list[int]], outcome) -> tuple[int, int] | None:
    best = None
    for members in keys_of_group:
        first = members[0]
        k0 = outcome(first)
        for j in members[1:]:
            if outcome(j) != k0:
                if best is None or (first, j) < best:
                    best = (first, j)
                break
    return best


def _group(keys: Sequence) -> list[list[int]]:
    groups: dict = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    return [g for g in groups.values() if len(g) > 1]


def _run_chunk(args):
    configs, layout, oracle, n, mode = args
    return [run_spec(c, layout, oracle, n, mode) for c in configs]


class _Runner:
    """Runs one oracle over all initial configs, optionally in worker
    processes; results are identical regardless of worker count."""

    def __init__(self, inits: list[Config], layout: MemoryLayout, n: int, mode: str,
                 workers: int | None, budget: int | None):
        self.inits = inits
        self.layout = layout
        self.n = n
        self.mode = mode
        self.budget = budget
        self.spent = 0
        self.scripts = 0
        self.pool = ProcessPoolExecutor(workers) if workers and workers > 1 and len(inits) > 1 else None
        self.chunks = []
        if self.pool is not None:
            size = -(-len(inits) // (workers * 4))
            self.chunks = [inits[i:i + size] for i in range(0, len(inits), size)]

    def __call__(self, oracle):
        self.spent += len(self.inits)
        self.scripts += 1
        if self.budget is not None and self.spent > self.budget:
            raise BudgetExceeded(self.budget, self.spent)
        if self.pool is None:
            return [run_spec(c, self.layout, oracle, self.n, self.mode) for c in self.inits]
        jobs = [(chunk, self.layout, oracle, self.n, self.mode) for chunk in self.chunks]
        return [r for part in self.pool.map(_run_chunk, jobs) for r in part]

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def _check(prop: str, p: Program, layout: MemoryLayout, klass: OracleClass, n: int, space: StateSpace,
           model: LeakModel, mode: str, strict: bool, budget: int | None, workers: int | None) -> Verdict:
    if n < 0:
        raise ValueError("step bound must be non-negative")
    inits = space.configs(p, layout)
    arch_runs = None
    if prop == BREAKOUT:
        groups = _group([_sandbox_key(c, layout) for c in inits])
    else:
        arch_runs = [run_arch(c, layout, n) for c in inits]
        groups = _group([_outcome_key(r, model, strict) for r in arch_runs])
    pairs_per_script = sum(len(g) * (len(g) - 1) // 2 for g in groups)
    runner = _Runner(inits, layout, n, mode, workers, budget)
    try:
        for oracle, runs in explore_scripts(klass, inits, layout, n, mode, runner):
            keys = {}

            def outcome(i):
                if i not in keys:
                    keys[i] = _outcome_key(runs[i], model, strict)
                return keys[i]

            pair = _first_pair(groups, outcome)
            if pair is None:
                continue
            i, j = pair
            t1, t2 = runs[i][0].obs[model], runs[j][0].obs[model]
            idx = first_difference(t1, t2)
            if idx is None:
                idx = len(t1)
            side = i if len(t1) > idx else j
            step, mis = _divergence(inits[side], runs[side], model, idx)
            return Violation(
                prop, model, oracle, inits[i], inits[j], t1, t2, idx, step, mis, n, layout, mode, strict,
                arch_runs[i][0].obs[model] if arch_runs else (),
                arch_runs[j][0].obs[model] if arch_runs else (),
                _stuck(runs[i][1]), _stuck(runs[j][1]),
            )
        return SecureUpTo(prop, n, klass, model, space.summary(layout.width), runner.scripts, runner.spent,
                          pairs_per_script * runner.scripts, program_hash(p))
    finally:
        runner.close()


def check_breakout(p: Program, layout: MemoryLayout, klass: OracleClass, n: int, space: StateSpace,
                   model: LeakModel = LeakModel.ARCH, mode: str = PLAIN, strict: bool = False,
                   budget: int | None = None, workers: int | None = None) -> Verdict:
    """For every script and every pair of initial states that agree on all
    sandbox memory (and everything else), the speculative traces must be
    equal."""
    return _check(BREAKOUT, p, layout, klass, n, space, model, mode, strict, budget, workers)


def check_poisoning(p: Program, layout: MemoryLayout, klass: OracleClass, n: int, space: StateSpace,
                    model: LeakModel = LeakModel.CT, mode: str = PLAIN, strict: bool = False,
                    budget: int | None = None, workers: int | None = None) -> Verdict:
    """For every script and every pair of initial states whose n-step
    architectural traces agree, the speculative traces must agree too."""
    return _check(POISONING, p, layout, klass, n, space, model, mode, strict, budget, workers)


def replay(v: Violation, program_text: str | None = None, oracle=None) -> tuple[ObsTrace, ObsTrace]:
    """Re-run both sides of a counterexample. ``oracle`` substitutes the
    recorded script (e.g. to test whether misprediction was necessary)."""
    p = v.program
    if program_text is not None:
        p = parse_program(program_text)
        if program_hash(p) != program_hash(v.program):
            raise StaleProgramError("program does not match the one the counterexample was found on")
    oracle = v.oracle if oracle is None else oracle
    out = []
    for init in (v.init1, v.init2):
        c = Config(p, init.pc, dict(init.regs), dict(init.mem))
        final, _ = run_spec(c, v.layout, oracle, v.n, v.mode)
        out.append(final.obs)
    return out[0], out[1]


def verdict_to_json(v: Verdict) -> str:
    return json.dumps(v.to_json(), indent=2)


def verdict_from_json(d: Mapping) -> Verdict:
    if d["verdict"] == "violation":
        return Violation.from_json(d)
    return SecureUpTo(d["property"], d["n"], OracleClass.parse(d["oracle_class"]), LeakModel.parse(d["model"]),
                      d["space"], d["scripts"], d["runs"], d["pairs"], d.get("program_hash", ""))
