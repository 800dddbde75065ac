import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zfi.hardening import (
    R_LABEL, HardeningError, harden, lower_swivel_cet, lower_swivel_sfi, mask_heap_offsets, validate_wasm_shape,
)
from zfi.lang import (
    Assign, BinOp, EndBranch, Flush, JumpIf, JumpInd, Lit, Load, Reg, Ret, Store, eval_expr, is_control_flow,
    parse_program, render_program, split_linear_blocks,
)
from zfi.machine import MemoryLayout, Next, Stuck, StuckReason, initial_config, run_arch
from zfi.oracles import OracleClass, ScriptedOracle, allowed_targets, explore_scripts
from zfi.speculation import CET, PLAIN, run_spec
from cosim import observe
from strategies import WASM_LAYOUT, corpus_layout, corpus_text, wasm_program, wasm_state

W4 = corpus_layout("layout-w4.json")
W5 = corpus_layout("layout-w5-cet.json")
W7 = MemoryLayout.from_dict(WASM_LAYOUT)


def test_mask_heap_offset():
    p = mask_heap_offsets(parse_program("r1 := [rH + r2]"), W4)
    assert p[0] == Load("r1", "rH", BinOp("and", Reg("r2"), Lit(7)))


def test_mask_leaves_stack_access_alone():
    p = parse_program("r1 := [rStk + 1]\n[rStk + 0] := r1")
    assert mask_heap_offsets(p, W4) == p


def test_mask_table_index():
    p = parse_program(".table a, b\nr1 := [rTbl + r2]\njmp r1\na: r0 := 0\nb: r0 := 1")
    assert mask_heap_offsets(p, W7)[0] == Load("r1", "rTbl", BinOp("and", Reg("r2"), Lit(3)))


@pytest.mark.parametrize(
    "text",
    [
        "rH := r1",
        "[rStk + 0] := rH",
        "r1 := rH + 1",
        "r1 := [rStk + r2]",
        "r1 := [r2 + 0]",
        "rT := 1",
        "rL := 1",
        "rSepStk := 1",
        "rStk := r1",
        "jmp r1",
        "r1 := 1\njmp +5",
        "[rTbl + 0] := 1",
    ],
)
def test_rejects_non_wasm_shapes(text):
    with pytest.raises(HardeningError):
        validate_wasm_shape(parse_program(text), W7)


def test_heap_writes_allowed_on_request():
    p = parse_program(corpus_text("breakout.zfi"))
    with pytest.raises(HardeningError):
        mask_heap_offsets(p, W4)
    # in-range literal offsets are left alone
    assert mask_heap_offsets(p, W4, pin_heap=False)[4] == Load("rB", "rH", Lit(2))


def test_sfi_shape():
    p = parse_program(corpus_text("poisoning.zfi"))
    low = lower_swivel_sfi(p, W4)
    q = low.program
    assert q[0] == Flush()
    assert isinstance(q[1], Assign) and q[1].dst == "rT" and q[2] == JumpInd("rT")
    assert not any(isinstance(i, JumpIf) for i in q.code.values())
    # the select picks block addresses
    for r_a, target in [(5, q.exit), (1, low.blocks[1])]:
        assert eval_expr(q[1].expr, {"rA": r_a}, 4) == target


def test_sfi_call_and_ret():
    p = parse_program("call f\njmp done\nf: r1 := 1\nret\ndone:")
    low = lower_swivel_sfi(p, W7).program
    text = render_program(low)
    assert "rSepStk := rSepStk - 1" in text and "[rSepStk + 0] :=" in text
    ret_seq = [low[a] for a in low.addresses()[-4:]]
    assert ret_seq == [
        Load("rT", "rSepStk", Lit(0)),
        Assign("rSepStk", BinOp("+", Reg("rSepStk"), Lit(1))),
        Assign("rStk", BinOp("+", Reg("rStk"), Lit(1))),
        JumpInd("rT"),
    ]


def test_sfi_direct_jump_relocated():
    p = parse_program("r1 := 1\njmp end\nr1 := 2\nend:")
    low = lower_swivel_sfi(p, W7)
    q = low.program
    assert [type(q[a]).__name__ for a in q.addresses()] == ["Flush", "Assign", "Jump", "Assign"]
    assert 2 + q[2].offset == q.exit


def test_cet_block_tops_and_interlocks():
    low = lower_swivel_cet(parse_program(corpus_text("poisoning.zfi")), W5)
    q = low.program
    for start, label in low.labels.items():
        assert q[start] == EndBranch()
        check = q[start + 1]
        assert check.dst == "rI" and Lit(label) in (check.expr.right.left, check.expr.right.right)
        assert {q[start + 2].dst, q[start + 3].dst} == {"rH", "rStk"}
    assert len(set(low.labels.values()) | {low.exit_label}) == len(low.labels) + 1
    assert min(low.labels.values()) >= q.exit


def test_cet_conditional_label_mirrors_address():
    low = lower_swivel_cet(parse_program(corpus_text("poisoning.zfi")), W5)
    q = low.program
    jmp_at = next(a for a in q.addresses() if isinstance(q[a], JumpIf))
    label_insn = q[jmp_at - 1]
    assert label_insn.dst == R_LABEL
    target_label = {start: lab for start, lab in low.labels.items()}
    for r_a in range(32):
        taken = eval_expr(q[jmp_at].cond, {"rA": r_a}, 5)
        dest = jmp_at + q[jmp_at].offset if taken else jmp_at + 1
        expected = target_label.get(dest, low.exit_label)
        assert eval_expr(label_insn.expr, {"rA": r_a}, 5) == expected


def test_cet_mispredicted_entry_traps_heap_access():
    low = lower_swivel_cet(parse_program(corpus_text("poisoning.zfi")), W5)
    c = initial_config(low.program, W5, {"rA": 9})
    # mispredict the bounds check into the load block
    final, hist = run_spec(c, W5, ScriptedOracle(OracleClass.DIRECTION_ONLY, (1,)), 30, CET)
    assert hist[-1] == Stuck(StuckReason.GUARD_ACCESS)
    assert final.reg("rH") == W5.bottom and final.obs.dmem == ()


def test_cet_indirect_pairs():
    p = parse_program(".table a, b\nr1 := [rTbl + r2]\njmp r1\na: r3 := 1\nb: r3 := 2")
    low = lower_swivel_cet(p, W7)
    q = low.program
    assert len(q.table) == 4
    for k in range(2):
        assert low.labels[q.table[2 * k]] == q.table[2 * k + 1]
    loads = [i for i in q.code.values() if isinstance(i, Load) and i.base == "rTbl"]
    assert [l.dst for l in loads] == [R_LABEL, "r1"]


def test_cet_rejects_stack_adjustment_and_small_trap():
    with pytest.raises(HardeningError):
        lower_swivel_cet(parse_program("rStk := rStk - 1"), W7)
    with pytest.raises(HardeningError):
        lower_swivel_cet(parse_program("r1 := 1"), W4)


def test_label_overflow():
    p = parse_program("\n".join(f"jmp +2 if r1\nr0 := {i}" for i in range(6)))
    with pytest.raises(HardeningError):
        lower_swivel_cet(p, W5)


def test_block_map_sidecar():
    low = harden(parse_program(corpus_text("poisoning.zfi")), W5, "cet")
    bm = low.block_map()
    assert bm["pass"] == "cet" and bm["reserved_registers"] == ["rL", "rI", "rSStk"]
    assert [b["source_start"] for b in bm["blocks"]] == [0, 1]
    assert all(b["label"] is not None for b in bm["blocks"])
    with pytest.raises(ValueError):
        harden(parse_program("r1 := 1"), W5, "xyz")


def _compare(p, low, cet_mode, rng):
    for _ in range(3):
        regs, mem = wasm_state(rng)
        src = observe(p, W7, regs, mem)
        assert src["outcome"] == StuckReason.HALT
        assert observe(low, W7, regs, mem) == src
        if cet_mode:
            assert observe(low, W7, regs, mem, cet=True) == src


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["mask", "sfi", "cet"]))
def test_semantic_preservation(seed, pass_name):
    rng = random.Random(seed)
    p = wasm_program(rng)
    _compare(p, harden(p, W7, pass_name).program, pass_name == "cet", rng)


def _targets_block_starts(low, klass, mode, seed):
    rng = random.Random(seed)
    low_program = low.program
    starts = set(low.blocks.values())
    if mode == CET:
        # lowered block tops, including the exit block
        tops = {a for a, i in low_program.code.items() if isinstance(i, EndBranch)}
        assert starts < tops and len(tops - starts) == 1
        starts = tops
    else:
        starts.add(low_program.exit)
    regs, mem = wasm_state(rng)
    c = initial_config(low_program, W7, regs, mem)
    for oracle, runs in itertools.islice(explore_scripts(klass, [c], W7, 40, mode), 30):
        (_, hist), = runs
        prev = c
        for h in hist:
            if isinstance(h, Stuck):
                break
            if h.prediction is not None:
                assert h.config.pc in starts or isinstance(low_program[prev.pc], Ret)
                assert h.prediction.arch_target in starts or isinstance(low_program[prev.pc], Ret)
            prev = h.config


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sfi_targets_are_block_starts(seed):
    p = wasm_program(random.Random(seed))
    _targets_block_starts(harden(p, W7, "sfi"), OracleClass.HISTORICALLY_VALID_BTB, PLAIN, seed)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cet_targets_are_block_starts(seed):
    p = wasm_program(random.Random(seed))
    _targets_block_starts(harden(p, W7, "cet"), OracleClass.SCRIPTED, CET, seed)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mask_soundness(seed):
    # every speculative heap access stays in heap or guard
    rng = random.Random(seed)
    p = harden(wasm_program(rng), W7, "sfi").program
    heap = W7.region("heap")
    regs, mem = wasm_state(rng)
    c = initial_config(p, W7, regs, mem)
    for oracle, runs in itertools.islice(explore_scripts(OracleClass.DIRECTION_ONLY, [c], W7, 40), 30):
        (_, hist), = runs
        prev = c
        for h in hist:
            insn = p.get(prev.pc)
            if isinstance(insn, (Load, Store)) and insn.base == "rH":
                addr = (prev.reg("rH") + eval_expr(insn.offset, prev.regs, 7)) & W7.mask
                assert addr in heap or addr in W7.guard
            if isinstance(h, Stuck):
                break
            prev = h.config
