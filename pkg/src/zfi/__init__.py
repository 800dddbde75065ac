"""Executable model of the ZFI assembly language: architectural, speculative
and CET semantics, leakage traces, Swivel-style hardening passes and a
bounded breakout/poisoning checker."""
from .checker import (
    BudgetExceeded, SecureUpTo, StateSpace, Violation, check_breakout, check_poisoning, mem_equiv, replay,
)
from .hardening import HardeningError, harden, lower_swivel_cet, lower_swivel_sfi, mask_heap_offsets
from .lang import Program, eval_expr, is_control_flow, parse_program, render_program, split_linear_blocks
from .leakage import LeakModel, ObsTrace, Observation, leaks, trace_step
from .machine import Config, MemoryLayout, Next, Stuck, StuckReason, arch_step, initial_config, run_arch
from .oracles import ALWAYS_CORRECT, OracleClass, ScriptedOracle, allowed_targets, enumerate_oracles
from .speculation import CET, PLAIN, cet_step, run_spec, spec_step

__all__ = [
    "ALWAYS_CORRECT", "BudgetExceeded", "CET", "Config", "HardeningError", "LeakModel", "MemoryLayout",
    "Next", "ObsTrace", "Observation", "OracleClass", "PLAIN", "Program", "ScriptedOracle", "SecureUpTo",
    "StateSpace", "Stuck", "StuckReason", "Violation", "allowed_targets", "arch_step", "cet_step",
    "check_breakout", "check_poisoning", "enumerate_oracles", "eval_expr", "harden", "initial_config",
    "is_control_flow", "leaks", "lower_swivel_cet", "lower_swivel_sfi", "mask_heap_offsets", "mem_equiv",
    "parse_program", "render_program", "replay", "run_arch", "run_spec", "spec_step", "split_linear_blocks",
    "trace_step",
]
