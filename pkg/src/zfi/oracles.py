"""Enumerable oracle families.

An oracle here is a decision script: one choice per *branching* prediction
event (an event whose class-allowed target set has more than one member).
Choice ``0`` predicts the architectural target, choice ``k`` the k-th
alternative in ascending address order; an exhausted script or an
out-of-range choice predicts correctly. Events with a single allowed target
consume no choice.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence, Union

from .lang import R_STK, Call, CallInd, Jump, JumpIf, JumpInd, Ret, eval_expr
from .machine import Config, MemoryLayout
from .speculation import PLAIN, Prediction, run_spec


class OracleClass(enum.Enum):
    ALWAYS_CORRECT = "always-correct"
    DIRECTION_ONLY = "direction-only"
    HISTORICALLY_VALID_BTB = "btb"
    # conditionals both ways; indirect jumps, indirect calls and returns to
    # any code address
    SCRIPTED = "scripted"

    @classmethod
    def parse(cls, name: str) -> "OracleClass":
        for k in cls:
            if name in (k.value, k.name.lower(), k.name.lower().replace("_", "-")):
                return k
        raise ValueError(f"unknown oracle class {name!r}")

    def __str__(self) -> str:
        return self.value


Choice = Union[int, str]


def control_target(c: Config, layout: MemoryLayout) -> int:
    """Architectural successor pc of the control-flow instruction at c.pc."""
    insn = c.program.code[c.pc]
    mod = layout.mask
    if isinstance(insn, (Jump, Call)):
        return (c.pc + insn.offset) & mod
    if isinstance(insn, JumpIf):
        if eval_expr(insn.cond, c.regs, layout.width):
            return (c.pc + insn.offset) & mod
        return (c.pc + 1) & mod
    if isinstance(insn, (JumpInd, CallInd)):
        return c.regs.get(insn.reg, 0) & mod
    if isinstance(insn, Ret):
        return c.mem.get(c.regs.get(R_STK, 0) & mod, 0)
    raise ValueError(f"not a control-flow instruction at {c.pc}: {insn!r}")


def allowed_targets(klass: OracleClass, c: Config, layout: MemoryLayout,
                    arch_target: int | None = None) -> tuple[int, ...]:
    """Targets a member of ``klass`` may predict at c.pc. The architectural
    target comes first, the others follow in ascending order."""
    insn = c.program.code[c.pc]
    arch = control_target(c, layout) if arch_target is None else arch_target
    mod = layout.mask
    others: set[int] = set()
    if klass is OracleClass.ALWAYS_CORRECT:
        pass
    elif isinstance(insn, JumpIf):
        others = {(c.pc + insn.offset) & mod, (c.pc + 1) & mod}
    elif isinstance(insn, (JumpInd, CallInd)):
        if klass is OracleClass.HISTORICALLY_VALID_BTB:
            others = set(c.mu_state.targets(c.pc))
        elif klass is OracleClass.SCRIPTED:
            others = set(c.program.code) | {c.program.exit & mod}
    elif isinstance(insn, Ret) and klass is OracleClass.SCRIPTED:
        others = set(c.program.code) | {c.program.exit & mod}
    others.discard(arch)
    return (arch,) + tuple(sorted(others))


def resolve_choice(choice: Choice, allowed: Sequence[int], c: Config, layout: MemoryLayout) -> int:
    if isinstance(choice, str):
        insn = c.program.code[c.pc]
        if choice == "correct":
            return allowed[0]
        if choice == "flip":
            return allowed[1] if len(allowed) > 1 else allowed[0]
        if choice in ("taken", "fall") and isinstance(insn, JumpIf):
            target = (c.pc + (insn.offset if choice == "taken" else 1)) & layout.mask
            return target if target in allowed else allowed[0]
        if choice.startswith("@"):
            target = int(choice[1:], 0)
            return target if target in allowed else allowed[0]
        return allowed[0]
    if 0 < choice < len(allowed):
        return allowed[choice]
    return allowed[0]


@dataclass(frozen=True)
class ScriptedOracle:
    klass: OracleClass
    script: tuple[Choice, ...] = ()

    def predict(self, c: Config, arch_target: int, layout: MemoryLayout) -> Prediction:
        allowed = allowed_targets(self.klass, c, layout, arch_target)
        cursor = c.cursor
        position = None
        pc = arch_target
        if len(allowed) > 1:
            position = cursor
            cursor += 1
            if position < len(self.script):
                pc = resolve_choice(self.script[position], allowed, c, layout)
        state = c.mu_state
        # only resolved (non-speculative) indirect transfers train the BTB
        if isinstance(c.program.code[c.pc], (JumpInd, CallInd)) and not c.mispredicted:
            state = state.record(c.pc, arch_target)
        return Prediction(pc, state, cursor, arch_target, allowed, position)

    def to_json(self) -> dict:
        return {"class": self.klass.value, "script": list(self.script)}

    @classmethod
    def from_json(cls, d) -> "ScriptedOracle":
        return cls(OracleClass.parse(d["class"]), tuple(d.get("script", ())))


ALWAYS_CORRECT = ScriptedOracle(OracleClass.ALWAYS_CORRECT)


def parse_script(text: str) -> tuple[Choice, ...]:
    out: list[Choice] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if part.lstrip("-").isdigit():
            out.append(int(part))
        elif part in ("correct", "flip", "taken", "fall") or part.startswith("@"):
            out.append(part)
        else:
            raise ValueError(f"bad script choice {part!r}")
    return tuple(out)


def branching_alternatives(history) -> dict[int, int]:
    """position -> number of non-architectural alternatives at that event."""
    out = {}
    for step in history:
        pred = getattr(step, "prediction", None)
        if pred is not None and pred.position is not None:
            out[pred.position] = len(pred.allowed) - 1
    return out


def explore_scripts(klass: OracleClass, inits: Sequence[Config], layout: MemoryLayout, n: int,
                    mode: str = PLAIN, runner=None) -> Iterator[tuple[ScriptedOracle, list]]:
    """Yield every behaviourally distinct decision script at bound ``n`` over
    the given initial configs, in lexicographic order, with the runs it
    produces. Scripts never end in a 0 choice (a trailing 0 behaves like the
    shorter script)."""
    run = runner or (lambda oracle: [run_spec(c, layout, oracle, n, mode) for c in inits])

    def visit(script: tuple[int, ...]):
        oracle = ScriptedOracle(klass, script)
        runs = run(oracle)
        yield oracle, runs
        if klass is OracleClass.ALWAYS_CORRECT:
            return
        widest: dict[int, int] = {}
        for _, history in runs:
            for pos, alts in branching_alternatives(history).items():
                if pos >= len(script) and alts > widest.get(pos, 0):
                    widest[pos] = alts
        for pos in sorted(widest, reverse=True):
            pad = (0,) * (pos - len(script))
            for choice in range(1, widest[pos] + 1):
                yield from visit(script + pad + (choice,))

    yield from visit(())


def enumerate_oracles(klass: OracleClass, program, layout: MemoryLayout, n: int,
                      inits: Iterable[Config] | None = None, mode: str = PLAIN) -> Iterator[ScriptedOracle]:
    """All behaviourally distinct class members within ``n`` steps from the
    given initial configs (default: the program's default entry config)."""
    from .machine import initial_config

    configs = list(inits) if inits is not None else [initial_config(program, layout)]
    for oracle, _ in explore_scripts(klass, configs, layout, n, mode):
        yield oracle
