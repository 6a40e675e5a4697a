"""The instrumentation pass.

Selects protected functions per mode, computes frame layouts with
interleaved canary slots, and emits per-function plans: a prologue recipe
that generates and stores canaries and an epilogue recipe that walks the
chain in reverse and verifies the anchor.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .program import FunctionDef

VA_MASK = (1 << 48) - 1
M64 = (1 << 64) - 1

# String-terminator bytes (NUL, CR, 0xFF, LF) appear in the little-endian
# byte image so string operations cannot write the whole value intact.
TERMINATOR_CANARY = 0x000A_FF0D_0000_0000

DEFAULT_THRESHOLD = 8


class ProtectionMode(str, Enum):
    NONE = "none"
    STACKGUARD = "stackguard"
    TERMINATOR = "terminator"
    STRONG_HEURISTIC = "strong_heuristic"
    PCAN_STANDALONE = "pcan_standalone"
    PCAN_COMBINED = "pcan_combined"

    @property
    def is_pcan(self) -> bool:
        return self in (ProtectionMode.PCAN_STANDALONE,
                        ProtectionMode.PCAN_COMBINED)

    @property
    def is_single_canary(self) -> bool:
        return self in (ProtectionMode.STACKGUARD, ProtectionMode.TERMINATOR,
                        ProtectionMode.STRONG_HEURISTIC)


# Slot roles
ROLE_SCALAR = "scalar"
ROLE_BUFFER = "buffer"
ROLE_CANARY = "canary"
ROLE_ANCHOR = "anchor_c0"
ROLE_SAVED_RETURN = "saved_return"

# Anchor kinds
C0_PACGA_ANCHOR = "pacga_anchor"
C0_SIGNED_RETURN = "signed_return_address"
C0_GLOBAL_REFERENCE = "global_reference"
C0_TERMINATOR = "terminator"
C0_NONE = "none"


class LayoutError(ValueError):
    """Raised when a frame cannot be laid out or a plan does not match."""


@dataclass(frozen=True)
class Slot:
    offset: int
    size: int
    role: str
    index: int = 0   # canary chain index, 0 for non-canary roles
    name: str = ""   # local name for scalar/buffer slots

    @property
    def end(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class FrameLayout:
    function: str
    slots: tuple[Slot, ...]
    frame_size: int

    def slot_for_local(self, name: str) -> Slot:
        for slot in self.slots:
            if slot.role in (ROLE_SCALAR, ROLE_BUFFER) and slot.name == name:
                return slot
        raise LayoutError(f"frame {self.function!r} has no local {name!r}")

    @property
    def canary_slots(self) -> tuple[Slot, ...]:
        return tuple(s for s in self.slots if s.role == ROLE_CANARY)

    @property
    def anchor_slot(self) -> Slot | None:
        for slot in self.slots:
            if slot.role == ROLE_ANCHOR:
                return slot
        return None

    @property
    def saved_return_slot(self) -> Slot:
        return self.slots[-1]

    @property
    def guard_slots(self) -> tuple[Slot, ...]:
        """All slots holding guard values (chain canaries plus anchor)."""
        return tuple(s for s in self.slots
                     if s.role in (ROLE_CANARY, ROLE_ANCHOR))


@dataclass(frozen=True)
class CanaryPlan:
    mode: ProtectionMode
    function: str
    function_id: int
    canary_count: int
    chain: tuple[Slot, ...]   # chain[0] is the anchor (or saved return)
    c0_kind: str


# --- recipe actions ----------------------------------------------------

# prologue
A_STORE_PACGA_ANCHOR = "store_pacga_anchor"
A_STORE_SIGNED_RETURN = "store_signed_return"
A_STORE_CHAIN = "store_chain"
A_STORE_REFERENCE_COPY = "store_reference_copy"
A_STORE_CONSTANT = "store_constant"
# epilogue
A_LOAD_SLOT = "load_slot"
A_AUTDA = "autda"
A_LOAD_VIA_POINTER = "load_via_pointer"
A_PACGA_RECOMPUTE = "pacga_recompute"
A_COMPARE_ANCHOR = "compare_anchor"
A_LOAD_REFERENCE = "load_reference"
A_COMPARE_VALUES = "compare_values"
A_COMPARE_CONSTANT = "compare_constant"
A_AUTIA_RETURN = "autia_return"

# Action kinds that read the mutable in-memory reference value.
REFERENCE_READ_KINDS = frozenset({A_LOAD_REFERENCE, A_STORE_REFERENCE_COPY})


@dataclass(frozen=True)
class VmAction:
    kind: str
    slot: Slot | None = None
    prev_slot: Slot | None = None
    value: int = 0


def compute_modifier(sp: int, function_id: int) -> int:
    """Tweak for canary generation: 48 LSBs of SP shifted up 16, plus the id."""
    return (((sp & VA_MASK) << 16) | (function_id & 0xFFFF)) & M64


def select_protected(fn: FunctionDef, mode: ProtectionMode,
                     threshold: int = DEFAULT_THRESHOLD) -> bool:
    """Per-mode protection gate."""
    if threshold < 1:
        raise LayoutError(f"threshold must be >= 1, got {threshold}")
    if mode is ProtectionMode.NONE:
        return False
    if mode in (ProtectionMode.STACKGUARD, ProtectionMode.TERMINATOR):
        return any(lv.kind == "buffer" and lv.size_bytes > threshold
                   for lv in fn.locals)
    if mode is ProtectionMode.STRONG_HEURISTIC:
        return any(lv.address_taken or lv.is_array or lv.register_local
                   for lv in fn.locals)
    # pcan modes always emit at least the anchor, so the return address of
    # every function is covered.
    return True


def _round_up(value: int, align: int) -> int:
    return (value + align - 1) // align * align


def layout_frame(fn: FunctionDef, mode: ProtectionMode,
                 threshold: int = DEFAULT_THRESHOLD,
                 rearrange: bool = True,
                 max_frame_size: int = 4096) -> FrameLayout:
    """Deterministic slot assignment, ascending from the frame base.

    Scalars go lowest (unless rearrange is off), each buffer is followed by
    its 8-byte canary slot in pcan modes, then the anchor, then the saved
    return address. Buffer slots are rounded up to 8 bytes so canary slots
    stay aligned.
    """
    protected = select_protected(fn, mode, threshold)
    pcan = mode.is_pcan and protected
    slots: list[Slot] = []
    offset = 0
    canary_index = 0

    def place(size: int, role: str, index: int = 0, name: str = "") -> None:
        nonlocal offset
        slots.append(Slot(offset=offset, size=size, role=role, index=index,
                          name=name))
        offset += size

    def place_local(lv) -> None:
        nonlocal canary_index
        if lv.kind == "scalar":
            place(8, ROLE_SCALAR, name=lv.name)
        else:
            place(_round_up(lv.size_bytes, 8), ROLE_BUFFER, name=lv.name)
            if pcan:
                canary_index += 1
                place(8, ROLE_CANARY, index=canary_index)

    if rearrange:
        for lv in fn.locals:
            if lv.kind == "scalar":
                place(8, ROLE_SCALAR, name=lv.name)
        for lv in fn.locals:
            if lv.kind == "buffer":
                place_local(lv)
    else:
        for lv in fn.locals:
            place_local(lv)

    needs_anchor = protected and (mode is ProtectionMode.PCAN_STANDALONE
                                  or mode.is_single_canary)
    if needs_anchor:
        place(8, ROLE_ANCHOR)
    place(8, ROLE_SAVED_RETURN)

    frame_size = _round_up(offset, 16)
    if frame_size > max_frame_size:
        raise LayoutError(
            f"function {fn.name!r}: frame size {frame_size} exceeds the "
            f"configured maximum of {max_frame_size}")
    return FrameLayout(function=fn.name, slots=tuple(slots),
                       frame_size=frame_size)


def build_plan(fn: FunctionDef, layout: FrameLayout,
               mode: ProtectionMode,
               threshold: int = DEFAULT_THRESHOLD) -> CanaryPlan:
    if layout.function != fn.name:
        raise LayoutError(
            f"layout is for {layout.function!r}, not {fn.name!r}")
    protected = select_protected(fn, mode, threshold)
    canaries = layout.canary_slots
    anchor = layout.anchor_slot

    if not protected:
        if anchor is not None or canaries:
            raise LayoutError(f"{fn.name!r}: layout has canary slots but the "
                              f"function is not selected under {mode.value}")
        return CanaryPlan(mode=mode, function=fn.name,
                          function_id=fn.function_id, canary_count=0,
                          chain=(), c0_kind=C0_NONE)

    if mode is ProtectionMode.PCAN_STANDALONE:
        if anchor is None:
            raise LayoutError(f"{fn.name!r}: stand-alone plan needs an anchor")
        chain = (anchor,) + canaries
        return CanaryPlan(mode=mode, function=fn.name,
                          function_id=fn.function_id,
                          canary_count=len(canaries), chain=chain,
                          c0_kind=C0_PACGA_ANCHOR)
    if mode is ProtectionMode.PCAN_COMBINED:
        if anchor is not None:
            raise LayoutError(f"{fn.name!r}: combined plan keeps the first "
                              f"canary in the saved return slot")
        chain = (layout.saved_return_slot,) + canaries
        return CanaryPlan(mode=mode, function=fn.name,
                          function_id=fn.function_id,
                          canary_count=len(canaries), chain=chain,
                          c0_kind=C0_SIGNED_RETURN)
    # single-canary baselines
    if anchor is None or canaries:
        raise LayoutError(f"{fn.name!r}: baseline layout mismatch")
    c0_kind = (C0_TERMINATOR if mode is ProtectionMode.TERMINATOR
               else C0_GLOBAL_REFERENCE)
    return CanaryPlan(mode=mode, function=fn.name,
                      function_id=fn.function_id, canary_count=0,
                      chain=(anchor,), c0_kind=c0_kind)


def prologue_recipe(plan: CanaryPlan) -> tuple[VmAction, ...]:
    """Canary generation actions, one fused generate-and-store per canary."""
    if plan.c0_kind == C0_NONE:
        return ()
    if plan.c0_kind == C0_GLOBAL_REFERENCE:
        return (VmAction(A_STORE_REFERENCE_COPY, slot=plan.chain[0]),)
    if plan.c0_kind == C0_TERMINATOR:
        return (VmAction(A_STORE_CONSTANT, slot=plan.chain[0],
                         value=TERMINATOR_CANARY),)
    first = (A_STORE_PACGA_ANCHOR if plan.c0_kind == C0_PACGA_ANCHOR
             else A_STORE_SIGNED_RETURN)
    actions = [VmAction(first, slot=plan.chain[0])]
    for i in range(1, len(plan.chain)):
        actions.append(VmAction(A_STORE_CHAIN, slot=plan.chain[i],
                                prev_slot=plan.chain[i - 1]))
    return tuple(actions)


def epilogue_recipe(plan: CanaryPlan) -> tuple[VmAction, ...]:
    """Verification actions: load the chain in reverse, then check the anchor."""
    if plan.c0_kind == C0_NONE:
        return ()
    if plan.c0_kind == C0_GLOBAL_REFERENCE:
        return (VmAction(A_LOAD_SLOT, slot=plan.chain[0]),
                VmAction(A_LOAD_REFERENCE),
                VmAction(A_COMPARE_VALUES, slot=plan.chain[0]))
    if plan.c0_kind == C0_TERMINATOR:
        return (VmAction(A_LOAD_SLOT, slot=plan.chain[0]),
                VmAction(A_COMPARE_CONSTANT, slot=plan.chain[0],
                         value=TERMINATOR_CANARY))
    actions = [VmAction(A_LOAD_SLOT, slot=plan.chain[-1])]
    for i in range(len(plan.chain) - 1, 0, -1):
        actions.append(VmAction(A_AUTDA, slot=plan.chain[i]))
        actions.append(VmAction(A_LOAD_VIA_POINTER, slot=plan.chain[i - 1]))
    if plan.c0_kind == C0_PACGA_ANCHOR:
        actions.append(VmAction(A_PACGA_RECOMPUTE))
        actions.append(VmAction(A_COMPARE_ANCHOR, slot=plan.chain[0]))
    else:
        actions.append(VmAction(A_AUTIA_RETURN, slot=plan.chain[0]))
    return tuple(actions)
