"""Leakage observations, the per-model Leaks function and trace accumulation."""
from __future__ import annotations

import enum
from dataclasses import replace
from typing import Callable, Iterable, NamedTuple

from .lang import (
    R_STK, Call, CallInd, Jump, JumpIf, JumpInd, Load, Ret, Store, eval_expr,
)


class LeakModel(enum.IntEnum):
    """Attacker observation power; ordered dmem < ct < arch."""

    DMEM = 0
    CT = 1
    ARCH = 2

    @classmethod
    def parse(cls, name: str) -> "LeakModel":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown leakage model {name!r}") from None

    def __str__(self) -> str:
        return self.name.lower()


class Observation(NamedTuple):
    kind: str  # "J" jump target, "A" memory address, "V" loaded value
    value: int

    def __str__(self) -> str:
        return f"{self.kind} {self.value:#x}"


def JumpTarget(v: int) -> Observation:
    return Observation("J", v)


def MemAddr(v: int) -> Observation:
    return Observation("A", v)


def MemVal(v: int) -> Observation:
    return Observation("V", v)


class ObsTrace(NamedTuple):
    dmem: tuple[Observation, ...] = ()
    ct: tuple[Observation, ...] = ()
    arch: tuple[Observation, ...] = ()

    def __getitem__(self, key):
        if isinstance(key, LeakModel):
            key = int(key)
        return tuple.__getitem__(self, key)

    def extend(self, leaked: "ObsTrace") -> "ObsTrace":
        return ObsTrace(self.dmem + leaked.dmem, self.ct + leaked.ct, self.arch + leaked.arch)

    def lengths(self) -> tuple[int, int, int]:
        return (len(self.dmem), len(self.ct), len(self.arch))


EMPTY_TRACE = ObsTrace()


def _effects(c, width: int) -> list[tuple[str, int, int | None]]:
    """Jump/load/store effects of the rule for the instruction at ``c.pc``,
    in the order they occur in the rule: (effect, address-or-target, value)."""
    insn = c.program.code[c.pc]
    regs, mem = c.regs, c.mem
    mod = (1 << width) - 1
    if isinstance(insn, Load):
        addr = (regs.get(insn.base, 0) + eval_expr(insn.offset, regs, width)) & mod
        return [("load", addr, mem.get(addr, 0))]
    if isinstance(insn, Store):
        addr = (regs.get(insn.base, 0) + eval_expr(insn.offset, regs, width)) & mod
        return [("store", addr, None)]
    if isinstance(insn, Jump):
        return [("jump", (c.pc + insn.offset) & mod, None)]
    if isinstance(insn, JumpIf):
        taken = eval_expr(insn.cond, regs, width) != 0
        return [("jump", (c.pc + (insn.offset if taken else 1)) & mod, None)]
    if isinstance(insn, JumpInd):
        return [("jump", regs.get(insn.reg, 0) & mod, None)]
    if isinstance(insn, (Call, CallInd)):
        v_stk = (regs.get(R_STK, 0) - 1) & mod
        target = (c.pc + insn.offset) & mod if isinstance(insn, Call) else regs.get(insn.reg, 0) & mod
        return [("store", v_stk, None), ("jump", target, None)]
    if isinstance(insn, Ret):
        v_stk = regs.get(R_STK, 0) & mod
        ra = mem.get(v_stk, 0)
        return [("load", v_stk, ra), ("jump", ra, None)]
    return []


def leaks(c, layout) -> ObsTrace:
    """Observations produced by executing the instruction at ``c.pc``, one
    sequence per leakage model."""
    dmem, ct, arch = [], [], []
    for effect, a, v in _effects(c, layout.width):
        if effect == "jump":
            ct.append(JumpTarget(a))
            arch.append(JumpTarget(a))
        else:
            dmem.append(MemAddr(a))
            ct.append(MemAddr(a))
            arch.append(MemAddr(a))
            if effect == "load":
                arch.append(MemVal(v))
    return ObsTrace(tuple(dmem), tuple(ct), tuple(arch))


def trace_step(c, layout, stepper: Callable):
    """Run ``stepper`` and append ``leaks(c)`` to the resulting config's trace.
    Stuck outcomes pass through untouched."""
    out = stepper(c, layout)
    if getattr(out, "config", None) is None:
        return out
    return replace(out, config=out.config.evolve(obs=c.obs.extend(leaks(c, layout))))


# -- projections and dumps ---------------------------------------------------


def drop(trace: Iterable[Observation], kind: str) -> tuple[Observation, ...]:
    return tuple(o for o in trace if o.kind != kind)


def dump_trace(trace: Iterable[Observation], model: LeakModel | str) -> str:
    lines = [f"# model: {model}"]
    lines.extend(str(o) for o in trace)
    return "\n".join(lines) + "\n"


def load_trace(text: str) -> tuple[str | None, tuple[Observation, ...]]:
    model = None
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line[1:].strip().startswith("model:"):
                model = line.split(":", 1)[1].strip()
            continue
        kind, value = line.split()
        if kind not in ("J", "A", "V"):
            raise ValueError(f"bad observation kind {kind!r}")
        out.append(Observation(kind, int(value, 16)))
    return model, tuple(out)


def first_difference(a: tuple, b: tuple) -> int | None:
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    if len(a) != len(b):
        return min(len(a), len(b))
    return None
