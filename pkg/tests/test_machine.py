import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zfi.lang import Assign, BinOp, Call, Lit, Load, Program, Reg, Ret, Store, eval_expr, parse_program
from zfi.leakage import trace_step
from zfi.machine import (
    BOTTOM, LayoutError, MemoryLayout, Next, Region, Stuck, StuckReason, arch_step, initial_config, run_arch,
)
from strategies import corpus_layout, corpus_text, programs

W8 = MemoryLayout.unguarded(8)


def cfg(p, layout=W8, regs=None, mem=None, pc=None):
    return initial_config(p, layout, regs, mem, pc)


def test_assign():
    out = arch_step(cfg(Program.from_list([Assign("r1", Lit(5))])), W8)
    assert out.config.pc == 1 and out.config.reg("r1") == 5


def test_call_pushes_return_address():
    p = Program({2: Call(3), 5: Ret()})
    out = arch_step(cfg(p, regs={"rStk": 8}, pc=2), W8)
    c = out.config
    assert (c.load(7), c.reg("rStk"), c.pc) == (3, 7, 5)


def test_ret_pops():
    p = Program({5: Ret()})
    c = arch_step(cfg(p, regs={"rStk": 7}, mem={7: 3}, pc=5), W8).config
    assert (c.reg("rStk"), c.pc) == (8, 3)


def test_store_into_guard_is_stuck():
    layout = corpus_layout("layout-w4.json")
    p = parse_program("[rStk + 1] := 5")  # rStk = 11, guard at 12
    assert arch_step(cfg(p, layout), layout) == Stuck(StuckReason.GUARD_ACCESS)


def test_load_from_guard_is_stuck():
    layout = corpus_layout("layout-w4.json")
    assert arch_step(cfg(parse_program("r1 := [rH + 8]"), layout), layout) == Stuck(StuckReason.GUARD_ACCESS)


def test_call_push_into_guard_is_stuck():
    layout = corpus_layout("layout-w4.json")
    p = parse_program("call +1\nret")
    assert arch_step(cfg(p, layout, regs={"rStk": 10}), layout) == Stuck(StuckReason.GUARD_ACCESS)


def test_unmapped_and_halt():
    p = Program({0: Assign("r1", Lit(1)), 1: Assign("r1", Lit(2)), 3: Ret()})
    assert arch_step(cfg(p, pc=2), W8) == Stuck(StuckReason.UNMAPPED_PC)
    assert arch_step(cfg(p, pc=4), W8) == Stuck(StuckReason.HALT)


def test_run_zero_steps_is_identity():
    c = cfg(parse_program("r1 := 1"))
    final, history = run_arch(c, W8, 0)
    assert final == c and history == []


def test_breakout_spill_path_takes_four_steps():
    layout = corpus_layout("layout-w4.json")
    p = parse_program(corpus_text("breakout.zfi"))
    final, history = run_arch(cfg(p, layout, regs={"rC": 1, "rA": 13}), layout, 10)
    assert [isinstance(h, Next) for h in history] == [True] * 4 + [False]
    assert history[-1] == Stuck(StuckReason.HALT)
    assert final.pc == p.labels["end"]
    assert final.load(11) == 1  # spilled heap base
    assert final.reg("rH") == 13


def test_breakout_skip_path():
    layout = corpus_layout("layout-w4.json")
    p = parse_program(corpus_text("breakout.zfi"))
    final, history = run_arch(cfg(p, layout), layout, 10)
    assert len(history) == 2 and final.pc == 5


def naive_straight_line(insns, regs, mem, width):
    """Second interpreter: one pass over Assign/Load/Store only."""
    regs, mem = dict(regs), dict(mem)
    mod = (1 << width) - 1
    for insn in insns:
        if isinstance(insn, Assign):
            regs[insn.dst] = eval_expr(insn.expr, regs, width)
        elif isinstance(insn, Load):
            regs[insn.dst] = mem.get((regs.get(insn.base, 0) + eval_expr(insn.offset, regs, width)) & mod, 0)
        else:
            a = (regs.get(insn.base, 0) + eval_expr(insn.offset, regs, width)) & mod
            mem[a] = eval_expr(insn.value, regs, width)
    return {k: v for k, v in regs.items() if v}, {k: v for k, v in mem.items() if v}


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_straight_line_matches_naive_interpreter(seed):
    rng = random.Random(seed)
    from strategies import random_expr

    insns = []
    for _ in range(10):
        k = rng.randrange(3)
        r = f"r{rng.randrange(4)}"
        if k == 0:
            insns.append(Assign(r, random_expr(rng, 8)))
        elif k == 1:
            insns.append(Load(r, f"r{rng.randrange(4)}", random_expr(rng, 8, depth=1)))
        else:
            insns.append(Store(f"r{rng.randrange(4)}", random_expr(rng, 8, depth=1), random_expr(rng, 8)))
    regs = {f"r{i}": rng.randrange(256) for i in range(4)}
    mem = {rng.randrange(256): rng.randrange(256) for _ in range(8)}
    c = initial_config(Program.from_list(insns), W8, regs, mem)
    final, history = run_arch(c, W8, 10)
    assert all(isinstance(h, Next) for h in history)
    assert (final.regs, final.mem) == naive_straight_line(insns, c.regs, c.mem, 8)


@settings(max_examples=300)
@given(programs())
def test_determinism_and_frame(sample):
    w, p, layout, (regs, mem) = sample
    c = initial_config(p, layout, regs, mem)
    for _ in range(12):
        out1, out2 = arch_step(c, layout), arch_step(c, layout)
        assert out1 == out2
        if isinstance(out1, Stuck):
            break
        n = out1.config
        insn = p[c.pc]
        if isinstance(insn, (Assign, Load)):
            assert n.mem == c.mem
            assert {k for k in set(n.regs) | set(c.regs) if n.reg(k) != c.reg(k)} <= {insn.dst}
        if isinstance(insn, Store):
            assert n.regs == c.regs
            assert len({a for a in set(n.mem) | set(c.mem) if n.load(a) != c.load(a)}) <= 1
        c = n


@settings(max_examples=300)
@given(programs())
def test_guard_totality(sample):
    w, p, layout, (regs, mem) = sample
    c = initial_config(p, layout, regs, mem)
    for _ in range(12):
        insn = p.get(c.pc)
        out = arch_step(c, layout)
        if isinstance(insn, (Load, Store)):
            addr = (c.reg(insn.base) + eval_expr(insn.offset, c.regs, w)) & layout.mask
            assert isinstance(out, Stuck) == (addr in layout.guard)
        if isinstance(out, Stuck):
            break
        c = out.config


@given(st.integers(0, 200), st.integers(0, 200))
def test_call_then_ret_restores(stk, junk):
    p = Program({0: Call(2), 2: Ret()})
    c = initial_config(p, W8, {"rStk": stk, "r1": junk})
    c2 = arch_step(arch_step(c, W8).config, W8).config
    assert c2.pc == 1 and c2.reg("rStk") == stk % 256


def test_trace_step_appends():
    p = parse_program("r1 := [rH + 1]\nr2 := 3")
    c = cfg(p, regs={"rH": 4}, mem={5: 9})
    c1 = trace_step(c, W8, arch_step).config
    c2 = trace_step(c1, W8, arch_step).config
    assert c2.obs.arch == (("A", 5), ("V", 9))


# -- layouts --------------------------------------------------------------------


def test_layout_auto_guards():
    layout = MemoryLayout.build(4, heap=(1, 8), stack=(10, 2))
    assert sorted(layout.guard) == [0, 9, 12]
    assert layout.heap_mask == 7
    assert layout.region_of(14) == "host"
    assert layout.region_of(9) == "guard"
    assert layout.region_of(3) == "heap"


def test_layout_rejects_overlap_and_odd_heap():
    with pytest.raises(LayoutError):
        MemoryLayout.build(4, heap=(1, 8), stack=(5, 2))
    with pytest.raises(LayoutError):
        MemoryLayout.build(4, heap=(1, 6))
    with pytest.raises(LayoutError):
        MemoryLayout.build(17)


def test_layout_round_trip():
    layout = corpus_layout("layout-w5-cet.json")
    assert MemoryLayout.from_dict(layout.to_dict()) == layout
    assert layout.bottom == 24 and all(a in layout.guard for a in range(23, 32))


def test_initial_config_defaults():
    layout = corpus_layout("layout-w7.json")
    p = Program.from_list([Ret()], table=(0,))
    c = initial_config(p, layout)
    assert c.reg("rH") == 1 and c.reg("rStk") == 22 and c.reg("rTbl") == 32
    assert c.reg("rSepStk") == 45 and c.reg("rSStk") == 54
    assert c.load(32) == 0 and c.mu_state == BOTTOM and not c.mispredicted
