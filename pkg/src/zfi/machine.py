"""Memory layout, configurations and the architectural step relation."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Union

from .lang import (
    R_HEAP, R_SEPSTK, R_SSTK, R_STK, R_TBL, REGISTER_ALIASES, REGISTERS,
    Assign, Call, CallInd, EndBranch, Flush, Instruction, Jump, JumpIf, JumpInd,
    Load, Program, Ret, Store, eval_expr,
)
from .leakage import EMPTY_TRACE, ObsTrace, trace_step

SANDBOX_REGIONS = ("heap", "stack", "globals", "jump_table", "separate_stack", "shadow_stack")


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class Region:
    start: int
    size: int

    @property
    def end(self) -> int:
        return self.start + self.size

    def __contains__(self, addr: int) -> bool:
        return self.start <= addr < self.end

    def addresses(self) -> range:
        return range(self.start, self.end)


@dataclass(frozen=True)
class MemoryLayout:
    """Address-space geometry for one machine instance.

    Each sandbox region gets a guard address on either side unless
    ``guard`` is given explicitly. ``trap`` is an all-guard range whose
    second address serves as the poison base that register interlocks
    load into memory base registers.
    """

    width: int
    regions: Mapping[str, Region]
    guard: frozenset[int]
    trap: Region | None = None

    def __post_init__(self):
        if not 2 <= self.width <= 16:
            raise LayoutError(f"width must be in [2, 16], got {self.width}")
        unknown = set(self.regions) - set(SANDBOX_REGIONS)
        if unknown:
            raise LayoutError(f"unknown regions: {sorted(unknown)}")
        size = 1 << self.width
        spans = sorted((r.start, r.end, name) for name, r in self.regions.items() if r.size)
        for start, end, name in spans:
            if start < 0 or end > size:
                raise LayoutError(f"region {name} does not fit in {self.width}-bit address space")
        for (s1, e1, n1), (s2, e2, n2) in zip(spans, spans[1:]):
            if s2 < e1:
                raise LayoutError(f"regions {n1} and {n2} overlap")
        for name, r in self.regions.items():
            if any(a in self.guard for a in r.addresses()):
                raise LayoutError(f"guard address inside region {name}")
        heap = self.regions.get("heap")
        if heap is not None and heap.size & (heap.size - 1):
            raise LayoutError("heap size must be a power of two")
        if self.trap is not None and any(a not in self.guard for a in self.trap.addresses()):
            raise LayoutError("trap range must consist of guard addresses")

    @classmethod
    def build(cls, width: int, guard=None, trap=None, **regions) -> "MemoryLayout":
        regs = {name: r if isinstance(r, Region) else Region(*r) for name, r in regions.items() if r is not None}
        trap_region = trap if isinstance(trap, Region) or trap is None else Region(*trap)
        mod = 1 << width
        if guard is None:
            guard_set = set()
            for r in regs.values():
                if r.size:
                    guard_set.add((r.start - 1) % mod)
                    guard_set.add(r.end % mod)
        else:
            guard_set = set(guard)
        if trap_region is not None:
            guard_set.update(trap_region.addresses())
        return cls(width, regs, frozenset(guard_set), trap_region)

    @classmethod
    def unguarded(cls, width: int) -> "MemoryLayout":
        """Whole address space is host memory; nothing ever traps."""
        return cls(width, {}, frozenset())

    @classmethod
    def from_dict(cls, d: Mapping) -> "MemoryLayout":
        width = int(d["width"])
        regions = {}
        for name, spec in d.get("regions", {}).items():
            regions[name] = Region(_int(spec["start"]), _int(spec["size"]))
        trap = d.get("trap")
        trap_region = Region(_int(trap["start"]), _int(trap["size"])) if trap else None
        guard = d.get("guard")
        layout = cls.build(width, guard=None if guard is None else [_int(g) for g in guard], trap=trap_region, **regions)
        extra = d.get("extra_guard", [])
        if extra:
            layout = replace(layout, guard=layout.guard | {_int(g) for g in extra})
        return layout

    @classmethod
    def load(cls, path) -> "MemoryLayout":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = {
            "width": self.width,
            "regions": {n: {"start": r.start, "size": r.size} for n, r in self.regions.items()},
            "guard": sorted(self.guard),
        }
        if self.trap is not None:
            d["trap"] = {"start": self.trap.start, "size": self.trap.size}
        return d

    @property
    def mask(self) -> int:
        return (1 << self.width) - 1

    def region(self, name: str) -> Region | None:
        r = self.regions.get(name)
        return r if r is not None and r.size else None

    @property
    def heap_mask(self) -> int:
        heap = self.region("heap")
        return heap.size - 1 if heap else self.mask

    @property
    def bottom(self) -> int:
        """Poison base address for interlocks."""
        if self.trap is None:
            raise LayoutError("layout has no trap range")
        return self.trap.start + 1

    def in_sandbox(self, addr: int) -> bool:
        return any(addr in r for r in self.regions.values())

    def region_of(self, addr: int) -> str:
        for name, r in self.regions.items():
            if addr in r:
                return name
        return "guard" if addr in self.guard else "host"

    def sandbox_addresses(self) -> list[int]:
        return sorted(a for r in self.regions.values() for a in r.addresses())


def _int(v) -> int:
    return int(v, 0) if isinstance(v, str) else int(v)


# -- configurations ----------------------------------------------------------


@dataclass(frozen=True)
class OracleState:
    """Predictor history: per-pc targets architecturally reached since the
    last flush. ``BOTTOM`` is the empty state."""

    history: tuple[tuple[int, tuple[int, ...]], ...] = ()

    def targets(self, pc: int) -> tuple[int, ...]:
        for p, ts in self.history:
            if p == pc:
                return ts
        return ()

    def record(self, pc: int, target: int) -> "OracleState":
        current = self.targets(pc)
        if target in current:
            return self
        others = tuple((p, ts) for p, ts in self.history if p != pc)
        return OracleState(tuple(sorted(others + ((pc, current + (target,)),))))


BOTTOM = OracleState()


@dataclass(frozen=True)
class Config:
    program: Program
    pc: int
    regs: Mapping[str, int] = field(default_factory=dict)
    mem: Mapping[int, int] = field(default_factory=dict)
    obs: ObsTrace = EMPTY_TRACE
    mu_state: OracleState = BOTTOM
    mispredicted: bool = False
    # branching prediction events consumed so far (scripted oracles' cursor)
    cursor: int = 0

    def evolve(self, **changes) -> "Config":
        """``dataclasses.replace`` without re-running ``__init__``; the step
        functions call this on every step."""
        new = object.__new__(Config)
        new.__dict__.update(self.__dict__)
        new.__dict__.update(changes)
        return new

    def reg(self, name: str) -> int:
        return self.regs.get(name, 0)

    def load(self, addr: int) -> int:
        return self.mem.get(addr, 0)

    @property
    def insn(self) -> Instruction | None:
        return self.program.code.get(self.pc)

    def with_reg(self, name: str, value: int) -> "Config":
        return self.evolve(regs=_set(self.regs, name, value))

    def with_mem(self, addr: int, value: int) -> "Config":
        return self.evolve(mem=_set(self.mem, addr, value))


def _set(d: Mapping, key, value: int) -> dict:
    out = dict(d)
    if value:
        out[key] = value
    else:
        out.pop(key, None)
    return out


def _normal(d: Mapping) -> dict:
    return {k: v for k, v in d.items() if v}


def default_registers(layout: MemoryLayout) -> dict[str, int]:
    regs = {}
    if (heap := layout.region("heap")) is not None:
        regs[R_HEAP] = heap.start
    if (stack := layout.region("stack")) is not None:
        regs[R_STK] = stack.start + stack.size // 2
    if (sep := layout.region("separate_stack")) is not None:
        regs[R_SEPSTK] = sep.end & layout.mask
    if (shadow := layout.region("shadow_stack")) is not None:
        regs[R_SSTK] = shadow.end & layout.mask
    if (tbl := layout.region("jump_table")) is not None:
        regs[R_TBL] = tbl.start
    return regs


def initial_config(program: Program, layout: MemoryLayout, regs: Mapping[str, int] | None = None,
                   mem: Mapping[int, int] | None = None, pc: int | None = None) -> Config:
    """Entry configuration: default base registers, the program's jump table
    image, then the given overrides."""
    r = default_registers(layout)
    m: dict[int, int] = {}
    if program.table:
        tbl = layout.region("jump_table")
        if tbl is None or len(program.table) > tbl.size:
            raise LayoutError("jump table does not fit in the jump_table region")
        for i, target in enumerate(program.table):
            m[tbl.start + i] = target & layout.mask
    for name, v in (regs or {}).items():
        name = REGISTER_ALIASES.get(name, name)
        if name not in REGISTERS:
            raise ValueError(f"unknown register {name!r}")
        r[name] = v & layout.mask
    for a, v in (mem or {}).items():
        m[a & layout.mask] = v & layout.mask
    return Config(program, program.entry if pc is None else pc, _normal(r), _normal(m))


# -- outcomes ----------------------------------------------------------------


class StuckReason(str, enum.Enum):
    UNMAPPED_PC = "unmapped-pc"
    GUARD_ACCESS = "guard-access"
    HALT = "halt"
    CET_ENDBRANCH = "cet-endbranch-violation"
    CET_SHADOW = "cet-shadow-mismatch"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class Next:
    config: Config
    prediction: object = None


@dataclass(frozen=True)
class Stuck:
    reason: StuckReason


StepOutcome = Union[Next, Stuck]


def fetch_stuck(c: Config) -> Stuck:
    return Stuck(StuckReason.HALT if c.pc == c.program.exit else StuckReason.UNMAPPED_PC)


def arch_step(c: Config, layout: MemoryLayout):
    """One architectural step (no trace bookkeeping)."""
    insn = c.program.code.get(c.pc)
    if insn is None:
        return fetch_stuck(c)
    w = layout.width
    mod = layout.mask
    regs = c.regs
    guard = layout.guard
    pc1 = (c.pc + 1) & mod

    if isinstance(insn, Assign):
        return Next(c.evolve(pc=pc1, regs=_set(regs, insn.dst, eval_expr(insn.expr, regs, w))))
    if isinstance(insn, Load):
        addr = (regs.get(insn.base, 0) + eval_expr(insn.offset, regs, w)) & mod
        if addr in guard:
            return Stuck(StuckReason.GUARD_ACCESS)
        return Next(c.evolve(pc=pc1, regs=_set(regs, insn.dst, c.mem.get(addr, 0))))
    if isinstance(insn, Store):
        addr = (regs.get(insn.base, 0) + eval_expr(insn.offset, regs, w)) & mod
        if addr in guard:
            return Stuck(StuckReason.GUARD_ACCESS)
        return Next(c.evolve(pc=pc1, mem=_set(c.mem, addr, eval_expr(insn.value, regs, w))))
    if isinstance(insn, Jump):
        return Next(c.evolve(pc=(c.pc + insn.offset) & mod))
    if isinstance(insn, JumpIf):
        if eval_expr(insn.cond, regs, w):
            return Next(c.evolve(pc=(c.pc + insn.offset) & mod))
        return Next(c.evolve(pc=pc1))
    if isinstance(insn, JumpInd):
        return Next(c.evolve(pc=regs.get(insn.reg, 0) & mod))
    if isinstance(insn, (Call, CallInd)):
        target = (c.pc + insn.offset) & mod if isinstance(insn, Call) else regs.get(insn.reg, 0) & mod
        v_stk = (regs.get(R_STK, 0) - 1) & mod
        if v_stk in guard:
            return Stuck(StuckReason.GUARD_ACCESS)
        return Next(c.evolve(pc=target, mem=_set(c.mem, v_stk, pc1), regs=_set(regs, R_STK, v_stk)))
    if isinstance(insn, Ret):
        v_stk = regs.get(R_STK, 0) & mod
        if v_stk in guard:
            return Stuck(StuckReason.GUARD_ACCESS)
        return Next(c.evolve(pc=c.mem.get(v_stk, 0), regs=_set(regs, R_STK, (v_stk + 1) & mod)))
    if isinstance(insn, (Flush, EndBranch)):
        return Next(c.evolve(pc=pc1))
    raise TypeError(f"not an instruction: {insn!r}")


def run_arch(c: Config, layout: MemoryLayout, n: int):
    """Up to ``n`` traced architectural steps; stops at the first Stuck.
    Returns the last reached config and the outcome of every step taken."""
    if n < 0:
        raise ValueError("step count must be non-negative")
    history = []
    for _ in range(n):
        out = trace_step(c, layout, arch_step)
        history.append(out)
        if isinstance(out, Stuck):
            break
        c = out.config
    return c, history
