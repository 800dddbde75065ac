"""ZFI abstract syntax, expression evaluation, assembly text format and
structural queries over programs."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Mapping, Union

# Distinguished registers.
R_STK = "rStk"
R_HEAP = "rH"
R_SSTK = "rSStk"
R_SEPSTK = "rSepStk"
R_TBL = "rTbl"

SPECIAL_REGISTERS = (R_STK, R_HEAP, R_SSTK, R_SEPSTK, R_TBL)
GENERAL_REGISTERS = tuple(f"r{i}" for i in range(16)) + tuple(
    f"r{c}" for c in "ABCDEFGIJKLMNOPQRSTUVWXYZ"
)
REGISTERS = frozenset(SPECIAL_REGISTERS + GENERAL_REGISTERS)
REGISTER_ALIASES = {"rHeap": R_HEAP, "rStack": R_STK}


class ZfiSyntaxError(ValueError):
    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.line = line
        self.column = column
        super().__init__(f"{line}:{column}: {message}" if line else message)


# -- expressions -------------------------------------------------------------


@dataclass(frozen=True)
class Lit:
    value: int


@dataclass(frozen=True)
class Reg:
    name: str


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


Expr = Union[Lit, Reg, BinOp]

# op -> binding power; higher binds tighter
OPERATORS = {
    "<": 1, "=": 1, "!=": 1, ">=": 1,
    "or": 2, "xor": 2,
    "and": 3, "mask": 3,
    "shl": 4, "shr": 4,
    "+": 5, "-": 5,
    "*": 6,
}


def apply_op(op: str, a: int, b: int, width: int) -> int:
    m = (1 << width) - 1
    a &= m
    b &= m
    if op == "+":
        return (a + b) & m
    if op == "-":
        return (a - b) & m
    if op == "*":
        return (a * b) & m
    if op == "and" or op == "mask":
        return a & b
    if op == "or":
        return a | b
    if op == "xor":
        return a ^ b
    if op == "shl":
        return (a << b) & m if b < width else 0
    if op == "shr":
        return a >> b if b < width else 0
    if op == "<":
        return int(a < b)
    if op == "=":
        return int(a == b)
    if op == "!=":
        return int(a != b)
    if op == ">=":
        return int(a >= b)
    raise ValueError(f"unknown operator {op!r}")


def eval_expr(e: Expr, regs: Mapping[str, int], width: int) -> int:
    """Value of ``e`` under ``regs``; unset registers read as 0."""
    if isinstance(e, Lit):
        return e.value & ((1 << width) - 1)
    if isinstance(e, Reg):
        return regs.get(e.name, 0) & ((1 << width) - 1)
    return apply_op(e.op, eval_expr(e.left, regs, width), eval_expr(e.right, regs, width), width)


def expr_registers(e: Expr) -> set[str]:
    if isinstance(e, Reg):
        return {e.name}
    if isinstance(e, BinOp):
        return expr_registers(e.left) | expr_registers(e.right)
    return set()


def select(cond: Expr, a: Expr, b: Expr, width: int) -> Expr:
    """Branch-free ``a if cond != 0 else b``."""
    ones = Lit((1 << width) - 1)
    m = BinOp("-", Lit(0), BinOp("!=", cond, Lit(0)))
    return BinOp("or", BinOp("and", m, a), BinOp("and", BinOp("xor", m, ones), b))


# -- instructions ------------------------------------------------------------


@dataclass(frozen=True)
class Assign:
    dst: str
    expr: Expr


@dataclass(frozen=True)
class Load:
    dst: str
    base: str
    offset: Expr


@dataclass(frozen=True)
class Store:
    base: str
    offset: Expr
    value: Expr


@dataclass(frozen=True)
class Jump:
    offset: int


@dataclass(frozen=True)
class JumpIf:
    offset: int
    cond: Expr


@dataclass(frozen=True)
class JumpInd:
    reg: str


@dataclass(frozen=True)
class Call:
    offset: int


@dataclass(frozen=True)
class CallInd:
    reg: str


@dataclass(frozen=True)
class Ret:
    pass


@dataclass(frozen=True)
class Flush:
    pass


@dataclass(frozen=True)
class EndBranch:
    pass


Instruction = Union[Assign, Load, Store, Jump, JumpIf, JumpInd, Call, CallInd, Ret, Flush, EndBranch]

CONTROL_FLOW = (Jump, JumpIf, JumpInd, Call, CallInd, Ret)


def is_control_flow(insn: Instruction) -> bool:
    return isinstance(insn, CONTROL_FLOW)


def registers_read(insn: Instruction) -> set[str]:
    if isinstance(insn, Assign):
        return expr_registers(insn.expr)
    if isinstance(insn, Load):
        return {insn.base} | expr_registers(insn.offset)
    if isinstance(insn, Store):
        return {insn.base} | expr_registers(insn.offset) | expr_registers(insn.value)
    if isinstance(insn, JumpIf):
        return expr_registers(insn.cond)
    if isinstance(insn, (JumpInd, CallInd)):
        return {insn.reg}
    return set()


def registers_written(insn: Instruction) -> set[str]:
    if isinstance(insn, (Assign, Load)):
        return {insn.dst}
    return set()


# -- programs ----------------------------------------------------------------


@dataclass(frozen=True)
class Program:
    """Partial map from addresses to instructions.

    ``table`` holds the jump-table image: code addresses written to the
    jump_table region when a configuration is initialised.
    """

    code: Mapping[int, Instruction]
    entry: int = 0
    table: tuple[int, ...] = ()
    labels: Mapping[str, int] = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.code)

    def __getitem__(self, addr: int) -> Instruction:
        return self.code[addr]

    def get(self, addr: int) -> Instruction | None:
        return self.code.get(addr)

    def addresses(self) -> list[int]:
        return sorted(self.code)

    @cached_property
    def exit(self) -> int:
        """Address just past the last instruction; reaching it halts."""
        return max(self.code) + 1 if self.code else self.entry

    @classmethod
    def from_list(cls, insns, origin: int = 0, entry: int | None = None, table=()) -> "Program":
        code = {origin + i: insn for i, insn in enumerate(insns)}
        return cls(code, origin if entry is None else entry, tuple(table))


# -- linear blocks -----------------------------------------------------------


@dataclass(frozen=True)
class LinearBlock:
    start: int
    addresses: tuple[int, ...]
    terminator: int | None

    @property
    def unterminated(self) -> bool:
        return self.terminator is None

    @property
    def end(self) -> int:
        return self.addresses[-1] + 1


def direct_target(addr: int, insn: Instruction) -> int | None:
    if isinstance(insn, (Jump, JumpIf, Call)):
        return addr + insn.offset
    return None


def block_starts(p: Program) -> set[int]:
    code = p.code
    starts = {p.entry} if p.entry in code else set()
    for addr, insn in code.items():
        target = direct_target(addr, insn)
        if target is not None and target in code:
            starts.add(target)
        # every address after a terminator opens a block (covers fall-through
        # of conditionals and calls, and code following unconditional transfers)
        if is_control_flow(insn) and addr + 1 in code:
            starts.add(addr + 1)
        if addr - 1 not in code:
            starts.add(addr)
    starts.update(t for t in p.table if t in code)
    return starts


def split_linear_blocks(p: Program) -> list[LinearBlock]:
    starts = block_starts(p)
    blocks = []
    current: list[int] = []
    for addr in p.addresses():
        if current and addr in starts:
            blocks.append(LinearBlock(current[0], tuple(current), None))
            current = []
        current.append(addr)
        if is_control_flow(p.code[addr]):
            blocks.append(LinearBlock(current[0], tuple(current), addr))
            current = []
    if current:
        blocks.append(LinearBlock(current[0], tuple(current), None))
    return blocks


# -- text format -------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>0[xX][0-9a-fA-F]+|\d+)|(?P<op>:=|!=|>=|[-+*<=()\[\],:])|(?P<word>[A-Za-z_.][A-Za-z0-9_.]*))"
)
_WORD_OPS = {"and", "or", "xor", "shl", "shr", "mask"}
_KEYWORDS = _WORD_OPS | {"jmp", "call", "ret", "flush", "endbranch", "if"}


@dataclass
class _Tok:
    kind: str
    text: str
    col: int


def _tokenize(text: str, lineno: int) -> list[_Tok]:
    toks = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ZfiSyntaxError(f"unexpected character {text[pos:].strip()[:1]!r}", lineno, pos + 1)
        kind = m.lastgroup
        toks.append(_Tok(kind, m.group(kind), m.start(kind) + 1))
        pos = m.end()
    return toks


def _parse_int(s: str) -> int:
    return int(s, 0)


class _LineParser:
    def __init__(self, toks: list[_Tok], lineno: int, labels: Mapping[str, int], addr: int):
        self.toks = toks
        self.i = 0
        self.lineno = lineno
        self.labels = labels
        self.addr = addr

    def error(self, msg: str, tok: _Tok | None = None):
        tok = tok or (self.toks[self.i] if self.i < len(self.toks) else None)
        col = tok.col if tok else (self.toks[-1].col + len(self.toks[-1].text) if self.toks else 1)
        raise ZfiSyntaxError(msg, self.lineno, col)

    def peek(self, k: int = 0) -> _Tok | None:
        j = self.i + k
        return self.toks[j] if j < len(self.toks) else None

    def next(self) -> _Tok:
        tok = self.peek()
        if tok is None:
            self.error("unexpected end of line")
        self.i += 1
        return tok

    def expect(self, text: str) -> _Tok:
        tok = self.next()
        if tok.text != text:
            self.error(f"expected {text!r}, found {tok.text!r}", tok)
        return tok

    def at(self, text: str) -> bool:
        tok = self.peek()
        return tok is not None and tok.text == text

    def done(self):
        if self.peek() is not None:
            self.error(f"unexpected {self.peek().text!r}")

    def register(self) -> str:
        tok = self.next()
        name = REGISTER_ALIASES.get(tok.text, tok.text)
        if tok.kind != "word" or name not in REGISTERS:
            self.error(f"unknown register {tok.text!r}", tok)
        return name

    def is_register(self, tok: _Tok | None) -> bool:
        return tok is not None and tok.kind == "word" and REGISTER_ALIASES.get(tok.text, tok.text) in REGISTERS

    def label(self, tok: _Tok) -> int:
        if tok.text not in self.labels:
            self.error(f"undefined label {tok.text!r}", tok)
        return self.labels[tok.text]

    # expressions, precedence climbing
    def expr(self, min_bp: int = 1) -> Expr:
        left = self.atom()
        while True:
            tok = self.peek()
            if tok is None or tok.text not in OPERATORS:
                return left
            bp = OPERATORS[tok.text]
            if bp < min_bp:
                return left
            self.i += 1
            right = self.expr(bp + 1)
            left = BinOp(tok.text, left, right)

    def atom(self) -> Expr:
        tok = self.next()
        if tok.kind == "num":
            return Lit(_parse_int(tok.text))
        if tok.text == "-" and self.peek() is not None and self.peek().kind == "num":
            return Lit(-_parse_int(self.next().text))
        if tok.text == "(":
            e = self.expr()
            self.expect(")")
            return e
        if self.is_register(tok):
            return Reg(REGISTER_ALIASES.get(tok.text, tok.text))
        if tok.kind == "word" and tok.text not in _KEYWORDS:
            return Lit(self.label(tok))
        self.error(f"expected expression, found {tok.text!r}", tok)

    def mem_operand(self) -> tuple[str, Expr]:
        self.expect("[")
        base = self.register()
        if self.at("]"):
            off: Expr = Lit(0)
        else:
            sign = self.next()
            if sign.text not in ("+", "-"):
                self.error("expected '+' or '-' after base register", sign)
            off = self.expr()
            if sign.text == "-":
                off = Lit(-off.value) if isinstance(off, Lit) else BinOp("-", Lit(0), off)
        self.expect("]")
        return base, off

    def transfer_target(self) -> tuple[str, int | str]:
        tok = self.next()
        if tok.kind == "num" or tok.text in ("+", "-"):
            if tok.text in ("+", "-"):
                num = self.next()
                if num.kind != "num":
                    self.error("expected displacement", num)
                return "rel", _parse_int(num.text) * (-1 if tok.text == "-" else 1)
            return "rel", _parse_int(tok.text)
        if self.is_register(tok):
            return "reg", REGISTER_ALIASES.get(tok.text, tok.text)
        if tok.kind == "word" and tok.text not in _KEYWORDS:
            return "rel", self.label(tok) - self.addr
        self.error(f"expected jump target, found {tok.text!r}", tok)

    def instruction(self) -> Instruction:
        tok = self.peek()
        if tok.text in ("ret", "flush", "endbranch"):
            self.i += 1
            self.done()
            return {"ret": Ret, "flush": Flush, "endbranch": EndBranch}[tok.text]()
        if tok.text == "jmp":
            self.i += 1
            kind, target = self.transfer_target()
            if self.at("if"):
                if kind == "reg":
                    self.error("indirect jumps cannot be conditional")
                self.i += 1
                cond = self.expr()
                self.done()
                return JumpIf(target, cond)
            self.done()
            return JumpInd(target) if kind == "reg" else Jump(target)
        if tok.text == "call":
            self.i += 1
            kind, target = self.transfer_target()
            self.done()
            return CallInd(target) if kind == "reg" else Call(target)
        if tok.text == "[":
            base, off = self.mem_operand()
            self.expect(":=")
            value = self.expr()
            self.done()
            return Store(base, off, value)
        dst = self.register()
        self.expect(":=")
        if self.at("["):
            base, off = self.mem_operand()
            self.done()
            return Load(dst, base, off)
        e = self.expr()
        self.done()
        return Assign(dst, e)


_LABEL_NAME = re.compile(r"[A-Za-z_.][A-Za-z0-9_.]*$")


def _split_prefix(toks: list[_Tok]) -> tuple[list[_Tok], list[_Tok]]:
    """Leading ``<addr>:`` / ``<label>:`` markers and the instruction tokens."""
    prefixes = []
    i = 0
    while i + 1 < len(toks) and toks[i + 1].text == ":" and toks[i].kind in ("num", "word"):
        prefixes.append(toks[i])
        i += 2
    return prefixes, toks[i:]


def parse_program(text: str) -> Program:
    """Parse assembly text.

    Lines are ``[<addr>:] [<label>:] <insn>``; ``#`` starts a comment.
    Directives: ``.origin N``, ``.entry <addr|label>``, ``.table a, b, ...``.
    """
    lines = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        body = raw.split("#", 1)[0]
        toks = _tokenize(body, lineno)
        if toks:
            lines.append((lineno, toks))

    # pass 1: addresses and labels
    labels: dict[str, int] = {}
    placed: list[tuple[int, int, list[_Tok]]] = []
    directives = []
    addr = 0
    seen: dict[int, int] = {}
    for lineno, toks in lines:
        if toks[0].text.startswith("."):
            if toks[0].text == ".origin":
                if len(toks) != 2 or toks[1].kind != "num":
                    raise ZfiSyntaxError(".origin expects a number", lineno, toks[0].col)
                addr = _parse_int(toks[1].text)
            else:
                directives.append((lineno, toks))
            continue
        prefixes, rest = _split_prefix(toks)
        for tok in prefixes:
            if tok.kind == "num":
                addr = _parse_int(tok.text)
            else:
                if tok.text in REGISTERS or tok.text in _KEYWORDS or not _LABEL_NAME.match(tok.text):
                    raise ZfiSyntaxError(f"invalid label {tok.text!r}", lineno, tok.col)
                if tok.text in labels:
                    raise ZfiSyntaxError(f"duplicate label {tok.text!r}", lineno, tok.col)
                labels[tok.text] = addr
        if rest:
            if addr in seen:
                raise ZfiSyntaxError(f"duplicate address {addr} (first used on line {seen[addr]})", lineno, rest[0].col)
            seen[addr] = lineno
            placed.append((lineno, addr, rest))
            addr += 1

    # pass 2: instructions
    code: dict[int, Instruction] = {}
    for lineno, a, toks in placed:
        code[a] = _LineParser(toks, lineno, labels, a).instruction()

    entry = min(code) if code else 0
    table: tuple[int, ...] = ()
    for lineno, toks in directives:
        name = toks[0].text
        p = _LineParser(toks[1:], lineno, labels, 0)
        if name == ".entry":
            tok = p.next()
            entry = _parse_int(tok.text) if tok.kind == "num" else p.label(tok)
            p.done()
        elif name == ".table":
            entries = []
            while p.peek() is not None:
                tok = p.next()
                entries.append(_parse_int(tok.text) if tok.kind == "num" else p.label(tok))
                if p.peek() is not None:
                    p.expect(",")
            table = tuple(entries)
        else:
            raise ZfiSyntaxError(f"unknown directive {name}", lineno, toks[0].col)
    return Program(code, entry, table, labels)


def render_expr(e: Expr, top: bool = True) -> str:
    if isinstance(e, Lit):
        return str(e.value)
    if isinstance(e, Reg):
        return e.name
    s = f"{render_expr(e.left, False)} {e.op} {render_expr(e.right, False)}"
    return s if top else f"({s})"


def _render_mem(base: str, off: Expr) -> str:
    if isinstance(off, Lit) and off.value < 0:
        return f"[{base} - {-off.value}]"
    return f"[{base} + {render_expr(off, isinstance(off, (Lit, Reg)))}]"


def _render_disp(i: int) -> str:
    return f"+{i}" if i >= 0 else f"-{-i}"


def render_instruction(insn: Instruction) -> str:
    if isinstance(insn, Assign):
        return f"{insn.dst} := {render_expr(insn.expr)}"
    if isinstance(insn, Load):
        return f"{insn.dst} := {_render_mem(insn.base, insn.offset)}"
    if isinstance(insn, Store):
        return f"{_render_mem(insn.base, insn.offset)} := {render_expr(insn.value)}"
    if isinstance(insn, Jump):
        return f"jmp {_render_disp(insn.offset)}"
    if isinstance(insn, JumpIf):
        return f"jmp {_render_disp(insn.offset)} if {render_expr(insn.cond)}"
    if isinstance(insn, JumpInd):
        return f"jmp {insn.reg}"
    if isinstance(insn, Call):
        return f"call {_render_disp(insn.offset)}"
    if isinstance(insn, CallInd):
        return f"call {insn.reg}"
    if isinstance(insn, Ret):
        return "ret"
    if isinstance(insn, Flush):
        return "flush"
    if isinstance(insn, EndBranch):
        return "endbranch"
    raise TypeError(insn)


def render_program(p: Program) -> str:
    out = []
    addrs = p.addresses()
    if not addrs or p.entry != addrs[0]:
        out.append(f".entry {p.entry}")
    if p.table:
        out.append(".table " + ", ".join(str(t) for t in p.table))
    out.extend(f"{a}: {render_instruction(p.code[a])}" for a in addrs)
    return "\n".join(out) + "\n"


def iter_instructions(p: Program) -> Iterator[tuple[int, Instruction]]:
    for a in p.addresses():
        yield a, p.code[a]
