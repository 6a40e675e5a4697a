"""A 64-bit stack machine with pointer-authentication semantics.

Memory is sparse and byte-granular; loads of never-written bytes fault, and
dereferencing a pointer with any nonzero bit in [63:48] raises a translation
fault with key attribution. The stack grows downward and overflow writes
ascend toward the saved return address.
"""

from __future__ import annotations

import copy
import json
import random
from dataclasses import dataclass, field
from typing import Callable

from . import pa
from .instrument import (
    A_AUTDA,
    A_AUTIA_RETURN,
    A_COMPARE_ANCHOR,
    A_COMPARE_CONSTANT,
    A_COMPARE_VALUES,
    A_LOAD_REFERENCE,
    A_LOAD_SLOT,
    A_LOAD_VIA_POINTER,
    A_PACGA_RECOMPUTE,
    A_STORE_CHAIN,
    A_STORE_CONSTANT,
    A_STORE_PACGA_ANCHOR,
    A_STORE_REFERENCE_COPY,
    A_STORE_SIGNED_RETURN,
    CanaryPlan,
    FrameLayout,
    ProtectionMode,
    VmAction,
    build_plan,
    compute_modifier,
    epilogue_recipe,
    layout_frame,
    prologue_recipe,
)
from .program import CallOp, FunctionDef, Program, ReturnOp, WriteOp

STACK_BASE = 0x0000_7FFF_FFFF_F000
# The mutable reference canary lives in the reserved 16 bytes at the top of
# the stack region, so stack over-reads can harvest it.
GLOBAL_REF_ADDR = STACK_BASE - 8
STACK_TOP = STACK_BASE - 16
CODE_BASE = 0x0000_0000_0040_0000

FAULT_TRANSLATION = "translation_fault"
FAULT_CANARY_MISMATCH = "canary_mismatch"
FAULT_STACK_OVERFLOW = "stack_overflow"
FAULT_INVALID_ACCESS = "invalid_access"


class VmConfigError(ValueError):
    """Raised for invalid machine configuration."""


@dataclass(frozen=True)
class VmConfig:
    pac_width: int = 16
    ga_width: int = 32
    stack_size: int = 1 << 16
    max_frame_size: int = 4096
    threshold: int = 8
    rearrange: bool = True


@dataclass(frozen=True)
class Fault:
    kind: str
    function: str | None = None
    slot: int | None = None      # offset of the implicated slot, if any
    address: int | None = None
    key_id: int | None = None

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.function is not None:
            out["function"] = self.function
        if self.slot is not None:
            out["slot"] = self.slot
        if self.address is not None:
            out["address"] = self.address
        if self.key_id is not None:
            out["key_id"] = self.key_id
        return out


class VmFault(Exception):
    def __init__(self, fault: Fault):
        super().__init__(fault.kind)
        self.fault = fault


@dataclass
class Frame:
    function: FunctionDef
    base: int
    layout: FrameLayout
    plan: CanaryPlan
    modifier: int
    return_address: int
    occurrence: int = 1

    def slot_addr(self, slot) -> int:
        return self.base + slot.offset


@dataclass
class RunReport:
    status: str
    fault: Fault | None
    events: list[dict]
    counts: dict[str, int]

    def to_dict(self) -> dict:
        out: dict = {
            "status": self.status,
            "events": self.events,
            "counts": self.counts,
        }
        if self.fault is not None:
            out["fault"] = self.fault.to_dict()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class VmState:
    """One simulated process: sparse memory, registers, keys, call stack."""

    def __init__(self, program: Program, mode: ProtectionMode,
                 keys: pa.PacKeySet, global_reference: int,
                 config: VmConfig):
        self.program = program
        self.mode = mode
        self.keys = keys
        self.global_reference = global_reference
        self.config = config
        self.memory: dict[int, int] = {}
        self.sp = STACK_TOP
        self.lr = 0
        self.call_stack: list[Frame] = []
        self.counts = {"pac_ops": 0, "loads": 0, "stores": 0, "compares": 0}
        self.events: list[dict] = []
        self.step = 0
        self.status = "running"
        self.fault: Fault | None = None
        self._call_counter = 0
        self._occurrences: dict[str, int] = {}
        # Per-function instrumentation, computed once per state.
        self.plans: dict[str, tuple[FrameLayout, CanaryPlan,
                                    tuple[VmAction, ...],
                                    tuple[VmAction, ...]]] = {}
        for name, fn in program.functions.items():
            layout = layout_frame(fn, mode, config.threshold,
                                  config.rearrange, config.max_frame_size)
            plan = build_plan(fn, layout, mode, config.threshold)
            self.plans[name] = (layout, plan, prologue_recipe(plan),
                                epilogue_recipe(plan))
        self._write_raw(GLOBAL_REF_ADDR, global_reference.to_bytes(8, "little"))

    # -- raw memory (no fault/accounting; used for setup and by attacks) --

    def _write_raw(self, addr: int, data: bytes) -> None:
        mem = self.memory
        for i, b in enumerate(data):
            mem[addr + i] = b

    def _read_raw(self, addr: int, length: int) -> bytes:
        mem = self.memory
        out = bytearray(length)
        for i in range(length):
            try:
                out[i] = mem[addr + i]
            except KeyError:
                raise VmFault(Fault(kind=FAULT_INVALID_ACCESS,
                                    address=addr + i)) from None
        return bytes(out)

    def log(self, kind: str, **fields) -> None:
        event = {"step": self.step, "kind": kind}
        event.update(fields)
        self.events.append(event)


def _check_dereferenceable(state: VmState, addr: int) -> None:
    if addr >> 48:
        raise VmFault(Fault(kind=FAULT_TRANSLATION, address=addr,
                            key_id=pa.fault_key_id(addr)))


def load64(state: VmState, addr: int) -> int:
    """Counted 8-byte load; faults on non-canonical or unwritten addresses."""
    _check_dereferenceable(state, addr)
    state.counts["loads"] += 1
    state.step += 1
    mem = state.memory
    value = 0
    for i in range(8):
        try:
            value |= mem[addr + i] << (8 * i)
        except KeyError:
            raise VmFault(Fault(kind=FAULT_INVALID_ACCESS,
                                address=addr + i)) from None
    return value


def store64(state: VmState, addr: int, value: int) -> None:
    """Counted 8-byte store; faults on non-canonical addresses."""
    _check_dereferenceable(state, addr)
    state.counts["stores"] += 1
    state.step += 1
    mem = state.memory
    for i in range(8):
        mem[addr + i] = (value >> (8 * i)) & 0xFF


def create_state(program: Program, mode: ProtectionMode, seed: int,
                 config: VmConfig | None = None,
                 keys: pa.PacKeySet | None = None,
                 global_reference: int | None = None) -> VmState:
    """Prepare a fresh process. Key generation is the only RNG consumer."""
    config = config or VmConfig()
    rng = random.Random(seed)
    if keys is None:
        keys = pa.PacKeySet.generate(rng, config.pac_width, config.ga_width)
    if global_reference is None:
        global_reference = rng.getrandbits(64)
    return VmState(program, mode, keys, global_reference, config)


def fork_snapshot(state: VmState) -> VmState:
    """Fork model: deep copy with identical keys and reference canary."""
    if state.status == "faulted":
        raise VmConfigError("cannot fork a faulted state")
    return copy.deepcopy(state)


def rekey(state: VmState, seed: int) -> VmState:
    """Exec/restart model: deep copy with fresh keys and fresh reference."""
    if state.status == "faulted":
        raise VmConfigError("cannot rekey a faulted state")
    rng = random.Random(seed)
    fresh = copy.deepcopy(state)
    fresh.keys = pa.PacKeySet.generate(rng, state.config.pac_width,
                                       state.config.ga_width)
    fresh.global_reference = rng.getrandbits(64)
    fresh._write_raw(GLOBAL_REF_ADDR,
                     fresh.global_reference.to_bytes(8, "little"))
    return fresh


AttackHook = Callable[[VmState, Frame], None]


def _run_prologue(state: VmState, frame: Frame,
                  actions: tuple[VmAction, ...]) -> None:
    keys = state.keys
    mod = frame.modifier
    combined = frame.plan.mode is ProtectionMode.PCAN_COMBINED
    ret_slot_addr = frame.slot_addr(frame.layout.saved_return_slot)
    if not (combined and frame.plan.c0_kind != "none"):
        # Plain spill of the return address; the combined recipe stores the
        # signed version itself.
        store64(state, ret_slot_addr, frame.return_address)
    for action in actions:
        kind = action.kind
        if kind == A_STORE_PACGA_ANCHOR:
            state.counts["pac_ops"] += 1
            value = pa.pacga(frame.base, mod, keys)
            store64(state, frame.slot_addr(action.slot), value)
        elif kind == A_STORE_SIGNED_RETURN:
            state.counts["pac_ops"] += 1
            value = pa.pacia(frame.return_address, frame.base, keys)
            store64(state, frame.slot_addr(action.slot), value)
        elif kind == A_STORE_CHAIN:
            state.counts["pac_ops"] += 1
            value = pa.pacda(frame.slot_addr(action.prev_slot), mod, keys)
            store64(state, frame.slot_addr(action.slot), value)
        elif kind == A_STORE_REFERENCE_COPY:
            value = load64(state, GLOBAL_REF_ADDR)
            store64(state, frame.slot_addr(action.slot), value)
        elif kind == A_STORE_CONSTANT:
            store64(state, frame.slot_addr(action.slot), action.value)
        else:
            raise AssertionError(f"bad prologue action {kind}")


def _run_epilogue(state: VmState, frame: Frame,
                  actions: tuple[VmAction, ...]) -> int | None:
    """Returns the authenticated return target in combined mode."""
    keys = state.keys
    mod = frame.modifier
    current = 0
    reference = 0
    return_target: int | None = None
    for action in actions:
        kind = action.kind
        if kind == A_LOAD_SLOT:
            current = load64(state, frame.slot_addr(action.slot))
        elif kind == A_AUTDA:
            state.counts["pac_ops"] += 1
            current = pa.autda(current, mod, keys)
        elif kind == A_LOAD_VIA_POINTER:
            current = load64(state, current)
        elif kind == A_PACGA_RECOMPUTE:
            state.counts["pac_ops"] += 1
            reference = pa.pacga(frame.base, mod, keys)
        elif kind == A_COMPARE_ANCHOR:
            state.counts["compares"] += 1
            state.step += 1
            if current != reference:
                raise VmFault(Fault(kind=FAULT_CANARY_MISMATCH,
                                    function=frame.function.name,
                                    slot=action.slot.offset))
        elif kind == A_LOAD_REFERENCE:
            reference = load64(state, GLOBAL_REF_ADDR)
        elif kind == A_COMPARE_VALUES:
            state.counts["compares"] += 1
            state.step += 1
            if current != reference:
                raise VmFault(Fault(kind=FAULT_CANARY_MISMATCH,
                                    function=frame.function.name,
                                    slot=action.slot.offset))
        elif kind == A_COMPARE_CONSTANT:
            state.counts["compares"] += 1
            state.step += 1
            if current != action.value:
                raise VmFault(Fault(kind=FAULT_CANARY_MISMATCH,
                                    function=frame.function.name,
                                    slot=action.slot.offset))
        elif kind == A_AUTIA_RETURN:
            state.counts["pac_ops"] += 1
            target = pa.autia(current, frame.base, keys)
            # The return is an instruction fetch through the authenticated
            # pointer; a corrupted pointer faults here.
            if target >> 48:
                raise VmFault(Fault(kind=FAULT_TRANSLATION,
                                    function=frame.function.name,
                                    address=target,
                                    key_id=pa.fault_key_id(target)))
            return_target = target
        else:
            raise AssertionError(f"bad epilogue action {kind}")
    return return_target


def _exec_write(state: VmState, frame: Frame, op: WriteOp) -> None:
    slot = frame.layout.slot_for_local(op.target)
    lv = frame.function.local(op.target)
    addr = frame.base + slot.offset + op.offset
    state.counts["stores"] += 1
    state.step += 1
    state._write_raw(addr, op.data)
    if op.offset + len(op.data) > lv.size_bytes:
        state.log("oob_write", function=frame.function.name, slot=op.target,
                  address=addr, length=len(op.data))


def _call(state: VmState, name: str, attack_hook: AttackHook | None) -> None:
    fn = state.program.functions[name]
    layout, plan, prologue, epilogue = state.plans[name]
    new_sp = state.sp - layout.frame_size
    if new_sp < STACK_BASE - state.config.stack_size:
        raise VmFault(Fault(kind=FAULT_STACK_OVERFLOW, function=name,
                            address=new_sp))
    state.sp = new_sp
    occurrence = state._occurrences.get(name, 0) + 1
    state._occurrences[name] = occurrence
    frame = Frame(function=fn, base=new_sp, layout=layout, plan=plan,
                  modifier=compute_modifier(new_sp, fn.function_id),
                  return_address=state.lr, occurrence=occurrence)
    state.call_stack.append(frame)
    state.log("call", function=name, address=new_sp)
    try:
        _run_prologue(state, frame, prologue)
        for op in fn.body:
            if isinstance(op, WriteOp):
                _exec_write(state, frame, op)
            elif isinstance(op, CallOp):
                state._call_counter += 1
                state.lr = CODE_BASE + state._call_counter * 4
                _call(state, op.target, attack_hook)
            elif isinstance(op, ReturnOp):
                break
        if attack_hook is not None:
            attack_hook(state, frame)
        return_target = _run_epilogue(state, frame, epilogue)
        if return_target is None:
            # Non-combined modes reload the plain return address. Silent
            # corruption is logged but nothing faults here.
            stored = load64(
                state, frame.slot_addr(frame.layout.saved_return_slot))
            if stored != frame.return_address:
                state.log("return_corrupted", function=name,
                          address=frame.slot_addr(
                              frame.layout.saved_return_slot))
        elif return_target != frame.return_address:
            state.log("return_corrupted", function=name,
                      address=frame.slot_addr(
                          frame.layout.saved_return_slot))
        state.log("return", function=name)
    finally:
        state.call_stack.pop()
        state.sp = new_sp + layout.frame_size


def execute(state: VmState, attack_hook: AttackHook | None = None) -> RunReport:
    """Run the entry function to completion; faults surface in the report."""
    if state.status != "running":
        raise VmConfigError("state already executed; fork or rekey first")
    try:
        state.lr = CODE_BASE
        _call(state, state.program.entry, attack_hook)
        state.status = "exited"
    except VmFault as exc:
        state.status = "faulted"
        state.fault = exc.fault
        state.log("fault", fault=exc.fault.to_dict())
    return RunReport(status=state.status, fault=state.fault,
                     events=state.events, counts=dict(state.counts))


def run(program: Program, mode: ProtectionMode, seed: int,
        config: VmConfig | None = None,
        keys: pa.PacKeySet | None = None,
        global_reference: int | None = None,
        attack_hook: AttackHook | None = None) -> RunReport:
    state = create_state(program, mode, seed, config, keys, global_reference)
    return execute(state, attack_hook)


def instruction_counts(report: RunReport) -> dict[str, int]:
    """Per-category operation counts for overhead accounting."""
    return dict(report.counts)


def expected_standalone_overhead(buffer_count: int) -> dict[str, int]:
    """Added cost of one stand-alone-instrumented invocation with n buffers.

    Prologue: 1 generic MAC + n pointer signs, n+1 stores. Epilogue: n+1
    loads, n authentications, 1 generic MAC, 1 compare.
    """
    n = buffer_count
    return {
        "pac_ops": (1 + n) + (n + 1),
        "stores": n + 1,
        "loads": n + 1,
        "compares": 1,
    }
