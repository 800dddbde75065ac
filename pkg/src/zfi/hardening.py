"""Program transformations modelling Swivel's compilation techniques:
heap/jump-table offset masking, Swivel-SFI lowering and Swivel-CET lowering
with register interlocks.

Input programs must have the structure a Wasm compiler would produce:
contiguous code, a pinned heap base, constant stack offsets, and indirect
transfers whose target register was loaded from the jump table immediately
before the transfer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .lang import (
    R_HEAP, R_SEPSTK, R_SSTK, R_STK, R_TBL, Assign, BinOp, Call, CallInd, EndBranch,
    Expr, Flush, Instruction, Jump, JumpIf, JumpInd, LinearBlock, Lit, Load, Program, Reg,
    Ret, Store, expr_registers, registers_read, registers_written, select, split_linear_blocks,
)
from .machine import MemoryLayout

R_TARGET = "rT"
R_LABEL = "rL"
R_INTERLOCK = "rI"
RESERVED = (R_TARGET, R_LABEL, R_INTERLOCK, R_SEPSTK, R_SSTK)

PASSES = ("mask", "sfi", "cet")


class HardeningError(ValueError):
    pass


@dataclass(frozen=True)
class Lowered:
    program: Program
    pass_name: str
    # source block start -> lowered block start
    blocks: dict[int, int]
    # lowered block start -> label (cet only)
    labels: dict[int, int] = field(default_factory=dict)
    exit_label: int | None = None
    interlocks: tuple[int, ...] = ()
    reserved: tuple[str, ...] = ()

    def block_map(self) -> dict:
        return {
            "pass": self.pass_name,
            "blocks": [
                {"source_start": s, "start": t, "label": self.labels.get(t)}
                for s, t in sorted(self.blocks.items())
            ],
            "exit_label": self.exit_label,
            "interlocks": list(self.interlocks),
            "reserved_registers": list(self.reserved),
            "table": list(self.program.table),
        }


# -- validation ---------------------------------------------------------------


def _fail(addr: int, msg: str):
    raise HardeningError(f"address {addr}: {msg}")


def validate_wasm_shape(p: Program, layout: MemoryLayout, pin_heap: bool = True) -> list[LinearBlock]:
    addrs = p.addresses()
    if addrs and addrs != list(range(addrs[0], addrs[-1] + 1)):
        raise HardeningError("code must occupy contiguous addresses")
    blocks = split_linear_blocks(p)
    starts = {b.start for b in blocks}
    for a, insn in p.code.items():
        used = registers_read(insn) | registers_written(insn)
        bad = used & set(RESERVED)
        if bad:
            _fail(a, f"uses reserved register(s) {sorted(bad)}")
        if R_TBL in registers_written(insn):
            _fail(a, "writes the jump-table base register")
        if pin_heap:
            if R_HEAP in registers_written(insn):
                _fail(a, "writes the pinned heap base register")
            exprs = []
            if isinstance(insn, Assign):
                exprs = [insn.expr]
            elif isinstance(insn, (Load, Store)):
                exprs = [insn.offset] + ([insn.value] if isinstance(insn, Store) else [])
            elif isinstance(insn, JumpIf):
                exprs = [insn.cond]
            if any(R_HEAP in expr_registers(e) for e in exprs) or getattr(insn, "reg", None) == R_HEAP:
                _fail(a, "spills or computes with the pinned heap base register")
        if isinstance(insn, (Load, Store)):
            if insn.base not in (R_HEAP, R_STK, R_TBL):
                _fail(a, f"memory access through non-region base {insn.base}")
            if insn.base == R_STK and not isinstance(insn.offset, Lit):
                _fail(a, "stack access with non-constant offset")
            if insn.base == R_TBL and isinstance(insn, Store):
                _fail(a, "store into the jump table")
        if isinstance(insn, Assign) and insn.dst == R_STK:
            e = insn.expr
            if not (isinstance(e, BinOp) and e.op in "+-" and e.left == Reg(R_STK) and isinstance(e.right, Lit)):
                _fail(a, "stack pointer may only be adjusted by a constant")
        if isinstance(insn, (JumpInd, CallInd)):
            prev = p.code.get(a - 1)
            if a in starts or not (isinstance(prev, Load) and prev.base == R_TBL and prev.dst == insn.reg):
                _fail(a, "indirect transfer target must come from a jump-table load in the same block")
        if isinstance(insn, (Jump, JumpIf, Call)):
            t = a + insn.offset
            if t not in p.code and t != p.exit:
                _fail(a, f"transfer to unmapped address {t}")
    for t in p.table:
        if t not in starts and t != p.exit:
            raise HardeningError(f"jump-table entry {t} is not a code address")
    if _uses_table(p) and layout.region("jump_table") is None:
        raise HardeningError("program reads a jump table but the layout has none")
    return blocks


def _table_mask(layout: MemoryLayout, stride: int) -> int:
    tbl = layout.region("jump_table")
    if tbl is None:
        return 0
    entries = tbl.size // stride
    if entries < 1 or entries & (entries - 1):
        raise HardeningError("jump table entry count must be a power of two")
    return entries - 1


def _and_mask(e: Expr, mask: int) -> Expr:
    # a literal already inside the region needs no truncation
    if isinstance(e, Lit) and e.value & mask == e.value:
        return e
    return BinOp("and", e, Lit(mask))


def _masked(insn: Instruction, layout: MemoryLayout) -> Instruction:
    if isinstance(insn, Load) and insn.base == R_HEAP:
        return Load(insn.dst, R_HEAP, _and_mask(insn.offset, layout.heap_mask))
    if isinstance(insn, Store) and insn.base == R_HEAP:
        return Store(R_HEAP, _and_mask(insn.offset, layout.heap_mask), insn.value)
    if isinstance(insn, Load) and insn.base == R_TBL:
        return Load(insn.dst, R_TBL, _and_mask(insn.offset, _table_mask(layout, 1)))
    return insn


def mask_heap_offsets(p: Program, layout: MemoryLayout, pin_heap: bool = True) -> Program:
    """Truncate every heap and jump-table offset to its region size."""
    validate_wasm_shape(p, layout, pin_heap)
    code = {a: _masked(insn, layout) for a, insn in p.code.items()}
    return Program(code, p.entry, p.table, dict(p.labels))


# -- lowering machinery ---------------------------------------------------------

# An emitted item is either a ready instruction or a function of
# (own address, resolver) producing one.
Item = Instruction | Callable[[int, Callable], Instruction]


class _Emitter:
    def __init__(self):
        self.items: list[Item] = []
        self.marks: dict[tuple, int] = {}

    def here(self) -> int:
        return len(self.items)

    def mark(self, key: tuple):
        self.marks[key] = len(self.items)

    def emit(self, item: Item):
        self.items.append(item)

    def build(self, resolve_extra: dict[tuple, int], width: int) -> dict[int, Instruction]:
        limit = 1 << width
        if len(self.items) >= limit:
            raise HardeningError(f"lowered code ({len(self.items)} instructions) overflows the {width}-bit code space")
        keys = dict(self.marks)
        keys.update(resolve_extra)

        def resolve(key):
            return keys[key]

        code = {}
        for addr, item in enumerate(self.items):
            code[addr] = item(addr, resolve) if callable(item) else item
        return code


def _target_key(p: Program, t: int) -> tuple:
    return ("exit",) if t == p.exit else ("block", t)


def _jump_to(key):
    return lambda here, resolve: Jump(resolve(key) - here)


def _call_to(key):
    return lambda here, resolve: Call(resolve(key) - here)


def _jump_if(key, cond):
    return lambda here, resolve: JumpIf(resolve(key) - here, cond)


def _assign_from(dst, make_expr):
    return lambda here, resolve: Assign(dst, make_expr(resolve))


def _store_lit(base, key):
    return lambda here, resolve: Store(base, Lit(0), Lit(resolve(key)))


def _lowered_table(p: Program, ordered: list[tuple], resolve_map: dict) -> tuple[int, ...]:
    return tuple(resolve_map[k] for k in ordered)


def lower_swivel_sfi(p: Program, layout: MemoryLayout, pin_heap: bool = True) -> Lowered:
    """Flush the BTB on entry, replace conditional jumps, calls and returns by
    indirect jumps (return addresses live on the separate stack) and mask
    heap and jump-table offsets."""
    blocks = validate_wasm_shape(p, layout, pin_heap)
    if any(isinstance(i, (Call, CallInd, Ret)) for i in p.code.values()) and layout.region("separate_stack") is None:
        raise HardeningError("calls/returns need a separate_stack region")
    w = layout.width
    em = _Emitter()
    em.emit(Flush())
    if blocks and blocks[0].start != p.entry:
        em.emit(_jump_to(("block", p.entry)))
    for b in blocks:
        em.mark(("block", b.start))
        body = b.addresses[:-1] if b.terminator is not None else b.addresses
        for a in body:
            em.emit(_masked(p.code[a], layout))
        if b.terminator is None:
            continue
        a = b.terminator
        insn = p.code[a]
        if isinstance(insn, Jump):
            em.emit(_jump_to(_target_key(p, a + insn.offset)))
        elif isinstance(insn, JumpIf):
            taken = _target_key(p, a + insn.offset)
            fall = _target_key(p, a + 1)
            cond = insn.cond
            em.emit(_assign_from(R_TARGET, lambda r, t=taken, f=fall, c=cond: select(c, Lit(r(t)), Lit(r(f)), w)))
            em.emit(JumpInd(R_TARGET))
        elif isinstance(insn, JumpInd):
            em.emit(insn)
        elif isinstance(insn, (Call, CallInd)):
            em.emit(Assign(R_STK, BinOp("-", Reg(R_STK), Lit(1))))
            em.emit(Assign(R_SEPSTK, BinOp("-", Reg(R_SEPSTK), Lit(1))))
            em.emit(_store_lit(R_SEPSTK, _target_key(p, a + 1)))
            em.emit(_jump_to(_target_key(p, a + insn.offset)) if isinstance(insn, Call) else JumpInd(insn.reg))
        elif isinstance(insn, Ret):
            em.emit(Load(R_TARGET, R_SEPSTK, Lit(0)))
            em.emit(Assign(R_SEPSTK, BinOp("+", Reg(R_SEPSTK), Lit(1))))
            em.emit(Assign(R_STK, BinOp("+", Reg(R_STK), Lit(1))))
            em.emit(JumpInd(R_TARGET))
    exit_addr = em.here()
    code = em.build({("exit",): exit_addr}, w)
    resolve_map = dict(em.marks)
    resolve_map[("exit",)] = exit_addr
    table = tuple(resolve_map[_target_key(p, t)] for t in p.table)
    block_map = {s: resolve_map[("block", s)] for s in (b.start for b in blocks)}
    return Lowered(Program(code, 0, table), "sfi", block_map, reserved=(R_TARGET, R_SEPSTK))


def _interlock(label: int, layout: MemoryLayout, bases=(R_HEAP, R_STK)) -> list[Instruction]:
    """Branch-free: if rL != label, point every memory base register at the
    trap range."""
    ones = Lit(layout.mask)
    bottom = Lit(layout.bottom)
    hit = Reg(R_INTERLOCK)
    keep = BinOp("xor", hit, ones)
    out = [Assign(R_INTERLOCK, BinOp("-", Lit(0), BinOp("!=", Reg(R_LABEL), Lit(label))))]
    for base in bases:
        out.append(Assign(base, BinOp("or", BinOp("and", Reg(base), keep), BinOp("and", bottom, hit))))
    return out


def _uses_table(p: Program) -> bool:
    return any(isinstance(i, Load) and i.base == R_TBL for i in p.code.values())


def _check_trap(p: Program, layout: MemoryLayout):
    if layout.trap is None:
        raise HardeningError("Swivel-CET lowering needs a trap range in the layout")
    reach = [layout.heap_mask, 0]
    if _uses_table(p):
        reach.append(2 * _table_mask(layout, 2) + 1)
    for a, insn in p.code.items():
        if isinstance(insn, (Load, Store)) and insn.base == R_STK:
            reach.append(insn.offset.value)
        # a poisoned stack pointer must stay inside the trap range
        if isinstance(insn, Assign) and insn.dst == R_STK:
            _fail(a, "explicit stack pointer adjustment is not supported under Swivel-CET")
    lo = layout.bottom - 1
    hi = layout.bottom + max(reach)
    if min(reach) < 0 or lo not in layout.trap or hi not in layout.trap:
        raise HardeningError(f"trap range {layout.trap} too small for poisoned accesses in [{lo}, {hi}]")


def lower_swivel_cet(p: Program, layout: MemoryLayout, pin_heap: bool = True) -> Lowered:
    """Place endbranch at every block top, add register interlocks at every
    block transition and mask heap and jump-table offsets. Jump-table
    entries become (address, label) pairs."""
    blocks = validate_wasm_shape(p, layout, pin_heap)
    _check_trap(p, layout)
    w = layout.width
    tmask = _table_mask(layout, 2)
    bases = (R_HEAP, R_STK, R_TBL) if _uses_table(p) else (R_HEAP, R_STK)

    # sizes are label-independent, so lay the code out first, then allocate
    # labels past the end of code
    def emit_all(label_of: Callable[[tuple], int]) -> tuple[_Emitter, list[int]]:
        em = _Emitter()
        interlocks = []

        def lab(key):
            return label_of(key)

        em.emit(Assign(R_LABEL, Lit(lab(("block", p.entry)) if p.code else lab(("exit",)))))
        if blocks and blocks[0].start != p.entry:
            em.emit(_jump_to(("block", p.entry)))
        for b in blocks:
            em.mark(("block", b.start))
            em.emit(EndBranch())
            interlocks.append(em.here())
            for insn in _interlock(lab(("block", b.start)), layout, bases):
                em.emit(insn)
            term = p.code[b.terminator] if b.terminator is not None else None
            body = list(b.addresses[:-1] if term is not None else b.addresses)
            paired_load = None
            if isinstance(term, (JumpInd, CallInd)):
                paired_load = p.code[body.pop()]
            for a in body:
                em.emit(_masked(p.code[a], layout))
            if paired_load is not None:
                idx = BinOp("shl", BinOp("and", paired_load.offset, Lit(tmask)), Lit(1))
                em.emit(Load(R_LABEL, R_TBL, BinOp("+", idx, Lit(1))))
                em.emit(Load(paired_load.dst, R_TBL, idx))
            if term is None:
                em.emit(Assign(R_LABEL, Lit(lab(_target_key(p, b.end)))))
                continue
            a = b.terminator
            if isinstance(term, Jump):
                t = _target_key(p, a + term.offset)
                em.emit(Assign(R_LABEL, Lit(lab(t))))
                em.emit(_jump_to(t))
            elif isinstance(term, JumpIf):
                t = _target_key(p, a + term.offset)
                f = _target_key(p, a + 1)
                em.emit(Assign(R_LABEL, select(term.cond, Lit(lab(t)), Lit(lab(f)), w)))
                em.emit(_jump_if(t, term.cond))
            elif isinstance(term, JumpInd):
                em.emit(term)
            elif isinstance(term, (Call, CallInd)):
                if isinstance(term, Call):
                    t = _target_key(p, a + term.offset)
                    em.emit(Assign(R_LABEL, Lit(lab(t))))
                    em.emit(_call_to(t))
                else:
                    em.emit(term)
                # return landing pad: reached only by ret (no endbranch)
                em.emit(Assign(R_LABEL, Lit(lab(_target_key(p, a + 1)))))
            elif isinstance(term, Ret):
                em.emit(Ret())
        em.mark(("exit",))
        em.emit(EndBranch())
        interlocks.append(em.here())
        for insn in _interlock(lab(("exit",)), layout, bases):
            em.emit(insn)
        return em, interlocks

    keys = [("block", b.start) for b in blocks] + [("exit",)]
    sizing, _ = emit_all(lambda key: 0)
    first_label = sizing.here()
    labels_by_key = {k: first_label + i for i, k in enumerate(keys)}
    if first_label + len(keys) > layout.mask:
        raise HardeningError(f"block labels overflow the {w}-bit value space")
    em, interlocks = emit_all(labels_by_key.__getitem__)
    code = em.build({}, w)
    table = []
    for t in p.table:
        k = _target_key(p, t)
        table += [em.marks[k], labels_by_key[k]]
    tbl = layout.region("jump_table")
    if table and (tbl is None or len(table) > tbl.size):
        raise HardeningError("paired jump table does not fit in the jump_table region")
    labels = {em.marks[k]: labels_by_key[k] for k in keys if k != ("exit",)}
    block_map = {b.start: em.marks[("block", b.start)] for b in blocks}
    return Lowered(
        Program(code, 0, tuple(table)),
        "cet",
        block_map,
        labels,
        labels_by_key[("exit",)],
        tuple(interlocks),
        (R_LABEL, R_INTERLOCK, R_SSTK),
    )


def harden(p: Program, layout: MemoryLayout, pass_name: str, pin_heap: bool = True) -> Lowered:
    if pass_name == "mask":
        masked = mask_heap_offsets(p, layout, pin_heap)
        starts = {b.start: b.start for b in split_linear_blocks(p)}
        return Lowered(masked, "mask", starts)
    if pass_name == "sfi":
        return lower_swivel_sfi(p, layout, pin_heap)
    if pass_name == "cet":
        return lower_swivel_cet(p, layout, pin_heap)
    raise ValueError(f"unknown pass {pass_name!r}")
