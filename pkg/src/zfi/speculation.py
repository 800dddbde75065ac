"""Speculative step relation with prediction oracles, and its CET extension."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Protocol

from .lang import R_SSTK, Call, CallInd, EndBranch, Flush, Ret, is_control_flow
from .leakage import leaks
from .machine import BOTTOM, Config, MemoryLayout, Next, OracleState, Stuck, StuckReason, arch_step, fetch_stuck

PLAIN = "plain"
CET = "cet"


@dataclass(frozen=True)
class Prediction:
    pc: int
    state: OracleState
    cursor: int
    arch_target: int
    allowed: tuple[int, ...] = ()
    # index into the decision script consumed by this event, if any
    position: int | None = None

    @property
    def correct(self) -> bool:
        return self.pc == self.arch_target


class Oracle(Protocol):
    def predict(self, c: Config, arch_target: int, layout: MemoryLayout) -> Prediction: ...


def spec_step(c: Config, layout: MemoryLayout, oracle: Oracle):
    insn = c.program.code.get(c.pc)
    if insn is None:
        return fetch_stuck(c)
    if isinstance(insn, Flush):
        return Next(c.evolve(pc=(c.pc + 1) & layout.mask, mu_state=BOTTOM))
    out = arch_step(c, layout)
    if isinstance(out, Stuck):
        return out
    obs = c.obs.extend(leaks(c, layout))
    if not is_control_flow(insn):
        return Next(out.config.evolve(obs=obs))
    pred = oracle.predict(c, out.config.pc, layout)
    return Next(
        out.config.evolve(
            obs=obs,
            pc=pred.pc,
            mu_state=pred.state,
            cursor=pred.cursor,
            mispredicted=c.mispredicted or pred.pc != out.config.pc,
        ),
        pred,
    )


def _lands_on_endbranch(c: Config):
    target = c.program.code.get(c.pc)
    if target is None:
        return fetch_stuck(c)
    if not isinstance(target, EndBranch):
        return Stuck(StuckReason.CET_ENDBRANCH)
    return None


def cet_step(c: Config, layout: MemoryLayout, oracle: Oracle):
    """Speculative step with endbranch checks on forward edges and a
    hardware shadow stack for calls and returns."""
    insn = c.program.code.get(c.pc)
    if insn is None:
        return fetch_stuck(c)
    if not is_control_flow(insn):
        return spec_step(c, layout, oracle)
    mod = layout.mask
    if isinstance(insn, Ret):
        v_sstk = c.regs.get(R_SSTK, 0) & mod
        if v_sstk in layout.guard:
            return Stuck(StuckReason.GUARD_ACCESS)
        out = spec_step(c, layout, oracle)
        if isinstance(out, Stuck):
            return out
        if out.config.pc != c.mem.get(v_sstk, 0):
            return Stuck(StuckReason.CET_SHADOW)
        return replace(out, config=out.config.with_reg(R_SSTK, (v_sstk + 1) & mod))
    out = spec_step(c, layout, oracle)
    if isinstance(out, Stuck):
        return out
    bad = _lands_on_endbranch(out.config)
    if bad is not None:
        return bad
    if isinstance(insn, (Call, CallInd)):
        v_sstk = (c.regs.get(R_SSTK, 0) - 1) & mod
        if v_sstk in layout.guard:
            return Stuck(StuckReason.GUARD_ACCESS)
        nxt = out.config.with_mem(v_sstk, (c.pc + 1) & mod).with_reg(R_SSTK, v_sstk)
        return replace(out, config=nxt)
    return out


def step_function(mode: str):
    if mode == PLAIN:
        return spec_step
    if mode == CET:
        return cet_step
    raise ValueError(f"unknown speculative mode {mode!r}")


def run_spec(c: Config, layout: MemoryLayout, oracle: Oracle, n: int, mode: str = PLAIN):
    """Up to ``n`` speculative steps, stopping at the first Stuck."""
    if n < 0:
        raise ValueError("step count must be non-negative")
    step = step_function(mode)
    history = []
    for _ in range(n):
        out = step(c, layout, oracle)
        history.append(out)
        if isinstance(out, Stuck):
            break
        c = out.config
    return c, history
