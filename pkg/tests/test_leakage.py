import pytest
from hypothesis import given, settings

from zfi.lang import Program, parse_program
from zfi.leakage import (
    EMPTY_TRACE, JumpTarget, LeakModel, MemAddr, MemVal, dump_trace, drop, first_difference, leaks, load_trace,
    trace_step,
)
from zfi.machine import MemoryLayout, Stuck, arch_step, initial_config, run_arch
from strategies import corpus_layout, corpus_text, programs

W8 = MemoryLayout.unguarded(8)


def leak_of(text, regs=None, mem=None, pc=None):
    p = parse_program(text)
    return leaks(initial_config(p, W8, regs, mem, pc), W8)


def test_model_order():
    assert LeakModel.DMEM < LeakModel.CT < LeakModel.ARCH
    assert LeakModel.parse("ct") is LeakModel.CT and str(LeakModel.ARCH) == "arch"


def test_ret_leaks_address_then_target():
    t = leak_of("ret", regs={"rStk": 7}, mem={7: 3})
    assert t.ct == (MemAddr(7), JumpTarget(3))
    assert t.arch == (MemAddr(7), MemVal(3), JumpTarget(3))
    assert t.dmem == (MemAddr(7),)


def test_assign_leaks_nothing():
    assert leak_of("r1 := 5") == EMPTY_TRACE


def test_load_row():
    t = leak_of("r1 := [rH + 2]", regs={"rH": 4}, mem={6: 9})
    assert t.dmem == (MemAddr(6),) and t.ct == (MemAddr(6),) and t.arch == (MemAddr(6), MemVal(9))


def test_store_leaks_only_the_address():
    t = leak_of("[rH + 2] := 7", regs={"rH": 4})
    assert t.arch == (MemAddr(6),)


def test_call_leaks_push_then_target():
    t = leak_of(".origin 2\ncall +3", regs={"rStk": 8})
    assert t.ct == (MemAddr(7), JumpTarget(5))


def test_not_taken_conditional_leaks_fallthrough():
    assert leak_of("jmp +3 if r1").ct == (JumpTarget(1),)
    assert leak_of("jmp +3 if r1", regs={"r1": 1}).ct == (JumpTarget(3),)


def test_flush_endbranch_silent():
    assert leak_of("flush") == EMPTY_TRACE and leak_of("endbranch") == EMPTY_TRACE


def test_two_step_concatenation():
    p = parse_program("r1 := [rH + 0]\n[rH + 1] := r1")
    c0 = initial_config(p, W8, {"rH": 3}, {3: 2})
    c1 = trace_step(c0, W8, arch_step).config
    c2 = trace_step(c1, W8, arch_step).config
    assert c2.obs == leaks(c0, W8).extend(leaks(c1, W8))


def test_stuck_passes_through_without_leaks():
    layout = corpus_layout("layout-w4.json")
    c = initial_config(parse_program("r1 := [rH + 8]"), layout)
    assert isinstance(trace_step(c, layout, arch_step), Stuck)


def test_poisoning_in_bounds_ct_trace():
    layout = corpus_layout("layout-w4.json")
    p = parse_program(corpus_text("poisoning.zfi"))
    final, _ = run_arch(initial_config(p, layout, {"rA": 2}, {3: 1}), layout, 6)
    # X at heap offset 0, Y at heap offset 4, heap base 1
    assert final.obs.ct == (JumpTarget(1), MemAddr(1 + 0 + 2), MemAddr(1 + 4 + 1))


@settings(max_examples=300)
@given(programs())
def test_projection_laws_and_append_only(sample):
    w, p, layout, (regs, mem) = sample
    c = initial_config(p, layout, regs, mem)
    final, history = run_arch(c, layout, 8)
    prev = c.obs
    for h in history:
        if isinstance(h, Stuck):
            break
        obs = h.config.obs
        for m in LeakModel:
            assert obs[m][: len(prev[m])] == prev[m]
        assert drop(obs.ct, "J") == obs.dmem
        assert drop(obs.arch, "V") == obs.ct
        prev = obs


def test_dump_and_load_round_trip():
    t = (JumpTarget(5), MemAddr(10), MemVal(255))
    text = dump_trace(t, LeakModel.ARCH)
    assert text.splitlines() == ["# model: arch", "J 0x5", "A 0xa", "V 0xff"]
    assert load_trace(text) == ("arch", t)
    with pytest.raises(ValueError):
        load_trace("X 0x1")


def test_first_difference():
    assert first_difference((1, 2), (1, 2)) is None
    assert first_difference((1, 2), (1, 3)) == 1
    assert first_difference((1,), (1, 3)) == 1


def test_model_independence():
    # querying different models never changes the run itself
    p = parse_program("r1 := [rH + 1]\njmp +2 if r1\nr2 := 1\n[rH + 0] := r2")
    c = initial_config(p, W8, {"rH": 2}, {3: 1})
    a, _ = run_arch(c, W8, 5)
    b, _ = run_arch(c, W8, 5)
    assert (a.pc, a.regs, a.mem) == (b.pc, b.regs, b.mem)
    assert a.obs[LeakModel.DMEM] == a.obs.dmem
