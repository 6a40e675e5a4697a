"""The adversary: scripted actions against a running VM plus Monte Carlo
campaigns measuring detection and bypass rates.

Scripts fire when the named function instance finishes its body, i.e. the
attack exploits a vulnerable write inside that function before it returns.
Offsets in actions are relative to the attacked buffer's start and may be
symbolic ("anchor", "canary:1", "saved_return", "saved_return_end",
"buffer_end", "global_reference") since the adversary is assumed to know the
exact stack layout of the attacked binary.
"""

from __future__ import annotations

import hashlib
import json
import random
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import vm as vm_mod
from .instrument import ProtectionMode, ROLE_BUFFER
from .program import Program
from .vm import (
    GLOBAL_REF_ADDR,
    Frame,
    RunReport,
    VmConfig,
    VmFault,
    VmState,
    create_state,
    execute,
)


class ScriptError(ValueError):
    """Raised for malformed scripts or references to dead frames."""


@dataclass(frozen=True)
class ReadSpec:
    offset: int | str
    length: int
    replay_at: int | str | None = None


@dataclass(frozen=True)
class Overflow:
    function: str
    buffer: str
    payload: bytes = b""
    length: int | str | None = None  # invert-mode overflow of this many bytes
    occurrence: int = 1


@dataclass(frozen=True)
class StringOverflow:
    function: str
    buffer: str
    payload: bytes = b""
    occurrence: int = 1


@dataclass(frozen=True)
class OverRead:
    function: str
    buffer: str
    offset: int | str
    length: int
    occurrence: int = 1


@dataclass(frozen=True)
class HarvestReplay:
    function: str
    buffer: str
    length: int | str
    reads: tuple[ReadSpec, ...] = ()
    preserve_canaries: bool = False
    occurrence: int = 1


@dataclass(frozen=True)
class SubstituteCanary:
    function: str
    slot_index: int
    donor_function: str
    donor_slot_index: int
    donor_occurrence: int = 1
    occurrence: int = 1


Action = Overflow | StringOverflow | OverRead | HarvestReplay | SubstituteCanary

_ACTION_KEYS = {
    "overflow": {"action", "function", "buffer", "payload", "length",
                 "occurrence"},
    "string_overflow": {"action", "function", "buffer", "payload",
                        "occurrence"},
    "over_read": {"action", "function", "buffer", "offset", "length",
                  "occurrence"},
    "harvest_and_replay": {"action", "function", "buffer", "length", "reads",
                           "preserve_canaries", "occurrence"},
    "substitute_canary": {"action", "function", "slot_index",
                          "donor_function", "donor_slot_index",
                          "donor_occurrence", "occurrence"},
}


def parse_script(text: str) -> tuple[Action, ...]:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScriptError(f"syntax error at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, dict) or set(raw) != {"actions"}:
        raise ScriptError("script must be an object with an 'actions' list")
    if not isinstance(raw["actions"], list):
        raise ScriptError("'actions' must be a list")
    return tuple(_parse_action(a) for a in raw["actions"])


def _parse_action(raw: dict) -> Action:
    if not isinstance(raw, dict) or "action" not in raw:
        raise ScriptError("each action must be an object with 'action'")
    kind = raw["action"]
    if kind not in _ACTION_KEYS:
        raise ScriptError(f"unknown action {kind!r}")
    unknown = set(raw) - _ACTION_KEYS[kind]
    if unknown:
        raise ScriptError(f"action {kind}: unknown key(s) {sorted(unknown)}")
    occ = raw.get("occurrence", 1)
    if kind == "overflow":
        payload = bytes.fromhex(raw.get("payload", ""))
        return Overflow(function=raw["function"], buffer=raw["buffer"],
                        payload=payload, length=raw.get("length"),
                        occurrence=occ)
    if kind == "string_overflow":
        return StringOverflow(function=raw["function"], buffer=raw["buffer"],
                              payload=bytes.fromhex(raw.get("payload", "")),
                              occurrence=occ)
    if kind == "over_read":
        return OverRead(function=raw["function"], buffer=raw["buffer"],
                        offset=raw["offset"], length=raw["length"],
                        occurrence=occ)
    if kind == "harvest_and_replay":
        reads = tuple(
            ReadSpec(offset=r["offset"], length=r["length"],
                     replay_at=r.get("replay_at"))
            for r in raw.get("reads", []))
        return HarvestReplay(function=raw["function"], buffer=raw["buffer"],
                             length=raw["length"], reads=reads,
                             preserve_canaries=raw.get("preserve_canaries",
                                                       False),
                             occurrence=occ)
    return SubstituteCanary(function=raw["function"],
                            slot_index=raw["slot_index"],
                            donor_function=raw["donor_function"],
                            donor_slot_index=raw["donor_slot_index"],
                            donor_occurrence=raw.get("donor_occurrence", 1),
                            occurrence=occ)


@dataclass
class ScriptResult:
    report: RunReport
    transcript: list[dict] = field(default_factory=list)

    @property
    def outcome(self) -> str:
        return classify_outcome(self.report)


def classify_outcome(report: RunReport) -> str:
    """detected | crashed | bypassed | undetected_corruption | clean."""
    if report.fault is not None:
        if report.fault.kind in (vm_mod.FAULT_TRANSLATION,
                                 vm_mod.FAULT_CANARY_MISMATCH):
            return "detected"
        return "crashed"
    crossed = any(e.get("crossed_canary") for e in report.events
                  if e["kind"] == "attack_write")
    if crossed:
        return "bypassed"
    corrupted = any(e["kind"] in ("oob_write", "return_corrupted")
                    or (e["kind"] == "attack_write" and e.get("oob"))
                    for e in report.events)
    if corrupted:
        return "undetected_corruption"
    return "clean"


def _resolve_offset(token: int | str, frame: Frame, buffer_slot) -> int:
    """Offset relative to the buffer start; symbolic names use the layout."""
    if isinstance(token, int):
        return token
    layout = frame.layout
    base_off = buffer_slot.offset
    if token == "buffer_end":
        return buffer_slot.size
    if token == "anchor":
        anchor = layout.anchor_slot
        if anchor is None:
            raise ScriptError(f"frame {frame.function.name!r} has no anchor")
        return anchor.offset - base_off
    if token.startswith("canary:"):
        idx = int(token.split(":", 1)[1])
        for slot in layout.canary_slots:
            if slot.index == idx:
                return slot.offset - base_off
        raise ScriptError(f"frame {frame.function.name!r} has no canary {idx}")
    if token == "saved_return":
        return layout.saved_return_slot.offset - base_off
    if token == "saved_return_end":
        return layout.saved_return_slot.end - base_off
    if token == "global_reference":
        return GLOBAL_REF_ADDR - (frame.base + base_off)
    raise ScriptError(f"unknown symbolic offset {token!r}")


def _attack_write(state: VmState, frame: Frame, buffer_slot,
                  start_offset: int, data: bytes) -> None:
    """Raw adversary write with crossing/out-of-bounds bookkeeping."""
    addr = frame.base + buffer_slot.offset + start_offset
    end = addr + len(data)
    crossed = any(
        addr < frame.base + g.end and end > frame.base + g.offset
        for g in frame.layout.guard_slots)
    oob = start_offset + len(data) > buffer_slot.size or start_offset < 0
    state.log("attack_write", function=frame.function.name,
              address=addr, length=len(data), crossed_canary=crossed,
              oob=oob)
    state._write_raw(addr, data)


def _invert_bytes(state: VmState, addr: int, length: int) -> bytes:
    # The adversary writes data guaranteed to differ from what is in memory;
    # unwritten bytes are treated as zero for the complement.
    mem = state.memory
    return bytes((mem.get(addr + i, 0) ^ 0xFF) for i in range(length))


class _ScriptHook:
    def __init__(self, script: tuple[Action, ...], transcript: list[dict]):
        self.script = script
        self.transcript = transcript

    def __call__(self, state: VmState, frame: Frame) -> None:
        for action in self.script:
            if (action.function == frame.function.name
                    and action.occurrence == frame.occurrence):
                self._apply(action, state, frame)

    def _apply(self, action: Action, state: VmState, frame: Frame) -> None:
        if isinstance(action, SubstituteCanary):
            self._substitute(action, state, frame)
            return
        buffer_slot = frame.layout.slot_for_local(action.buffer)
        if buffer_slot.role != ROLE_BUFFER:
            raise ScriptError(f"{action.buffer!r} is not a buffer")
        base = frame.base + buffer_slot.offset
        if isinstance(action, Overflow):
            if action.length is not None:
                length = _resolve_offset(action.length, frame, buffer_slot)
                data = _invert_bytes(state, base, length)
            else:
                data = action.payload
            _attack_write(state, frame, buffer_slot, 0, data)
        elif isinstance(action, StringOverflow):
            if b"\x00" in action.payload:
                raise ScriptError("string overflow payload cannot contain "
                                  "zero bytes")
            _attack_write(state, frame, buffer_slot, 0,
                          action.payload + b"\x00")
        elif isinstance(action, OverRead):
            offset = _resolve_offset(action.offset, frame, buffer_slot)
            addr = base + offset
            if offset < 0 or addr + action.length > vm_mod.STACK_BASE:
                raise ScriptError("over-read outside the attacked stack range")
            data = state._read_raw(addr, action.length)
            self.transcript.append({"action": "over_read", "address": addr,
                                    "bytes": data.hex()})
        elif isinstance(action, HarvestReplay):
            self._harvest_replay(action, state, frame, buffer_slot)
        else:
            raise AssertionError(f"unhandled action {action!r}")

    def _harvest_replay(self, action: HarvestReplay, state: VmState,
                        frame: Frame, buffer_slot) -> None:
        base = frame.base + buffer_slot.offset
        length = _resolve_offset(action.length, frame, buffer_slot)
        data = bytearray(_invert_bytes(state, base, length))
        reads = list(action.reads)
        if action.preserve_canaries:
            for slot in frame.layout.guard_slots:
                reads.append(ReadSpec(offset=slot.offset - buffer_slot.offset,
                                      length=slot.size))
        for spec in reads:
            read_off = _resolve_offset(spec.offset, frame, buffer_slot)
            replay_at = (read_off if spec.replay_at is None
                         else _resolve_offset(spec.replay_at, frame,
                                              buffer_slot))
            harvested = state._read_raw(base + read_off, spec.length)
            self.transcript.append({"action": "harvest",
                                    "address": base + read_off,
                                    "bytes": harvested.hex()})
            if 0 <= replay_at and replay_at + spec.length <= length:
                data[replay_at:replay_at + spec.length] = harvested
        _attack_write(state, frame, buffer_slot, 0, bytes(data))

    def _substitute(self, action: SubstituteCanary, state: VmState,
                    frame: Frame) -> None:
        donor = None
        for live in state.call_stack:
            if (live.function.name == action.donor_function
                    and live.occurrence == action.donor_occurrence):
                donor = live
                break
        if donor is None:
            raise ScriptError(
                f"donor frame {action.donor_function!r} "
                f"(occurrence {action.donor_occurrence}) is not live")
        try:
            donor_slot = donor.plan.chain[action.donor_slot_index]
            victim_slot = frame.plan.chain[action.slot_index]
        except IndexError:
            raise ScriptError("chain slot index out of range") from None
        value = state._read_raw(donor.slot_addr(donor_slot), 8)
        self.transcript.append({"action": "substitute",
                                "address": donor.slot_addr(donor_slot),
                                "bytes": value.hex()})
        addr = frame.slot_addr(victim_slot)
        state.log("attack_write", function=frame.function.name, address=addr,
                  length=8, crossed_canary=True, oob=True)
        state._write_raw(addr, value)


def execute_script(program: Program, mode: ProtectionMode,
                   script: tuple[Action, ...], seed: int,
                   config: VmConfig | None = None,
                   keys=None, global_reference=None) -> ScriptResult:
    for action in script:
        if action.function not in program.functions:
            raise ScriptError(
                f"script references unknown function {action.function!r}")
    transcript: list[dict] = []
    hook = _ScriptHook(script, transcript)
    state = create_state(program, mode, seed, config, keys, global_reference)
    report = execute(state, hook)
    return ScriptResult(report=report, transcript=transcript)


# --- Monte Carlo campaigns ---------------------------------------------


@dataclass
class CampaignResult:
    mode: str
    restart_model: str
    strategy: str
    trials: int
    budget: int
    pac_width: int
    seed: int
    detected: int = 0
    bypassed: int = 0
    attempts: list[int] = field(default_factory=list)

    @property
    def mean_attempts_to_bypass(self) -> float | None:
        used = [a for a, b in zip(self.attempts, self.bypass_flags) if b]
        return statistics.mean(used) if used else None

    @property
    def median_attempts_to_bypass(self) -> float | None:
        used = [a for a, b in zip(self.attempts, self.bypass_flags) if b]
        return statistics.median(used) if used else None

    bypass_flags: list[bool] = field(default_factory=list)

    @property
    def bypass_rate(self) -> float:
        total = sum(self.attempts)
        return self.bypassed / total if total else 0.0

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode,
            "restart_model": self.restart_model,
            "strategy": self.strategy,
            "trials": self.trials,
            "budget": self.budget,
            "pac_width": self.pac_width,
            "seed": self.seed,
            "detected": self.detected,
            "bypassed": self.bypassed,
            "total_attempts": sum(self.attempts),
            "mean_attempts_to_bypass": self.mean_attempts_to_bypass,
            "median_attempts_to_bypass": self.median_attempts_to_bypass,
            "per_mode": {self.mode: {"detected": self.detected,
                                     "bypassed": self.bypassed}},
        }
        if self.trials <= 10000:
            out["attempts"] = list(self.attempts)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _derive_seed(seed: int, index: int) -> int:
    digest = hashlib.blake2s(f"{seed}:{index}".encode(),
                             digest_size=8).digest()
    return int.from_bytes(digest, "big")


def _campaign_target(program: Program, mode: ProtectionMode,
                     config: VmConfig, function: str | None,
                     buffer: str | None):
    """Resolve the attacked (function, buffer, gap, guard) for a campaign."""
    if function is None:
        for name, fn in program.functions.items():
            if fn.buffers:
                function = name
                break
        else:
            raise ScriptError("program has no buffers to attack")
    fn = program.functions.get(function)
    if fn is None:
        raise ScriptError(f"unknown function {function!r}")
    if buffer is None:
        if not fn.buffers:
            raise ScriptError(f"function {function!r} has no buffers")
        buffer = fn.buffers[0].name
    from .instrument import build_plan, layout_frame
    layout = layout_frame(fn, mode, config.threshold, config.rearrange,
                          config.max_frame_size)
    plan = build_plan(fn, layout, mode, config.threshold)
    buffer_slot = layout.slot_for_local(buffer)
    guards = [g for g in layout.guard_slots if g.offset >= buffer_slot.end]
    if not guards:
        raise ScriptError(
            f"no canary slot above buffer {buffer!r} under {mode.value}")
    guard = min(guards, key=lambda s: s.offset)
    gap = guard.offset - buffer_slot.offset
    return function, buffer, buffer_slot, guard, gap, plan


def _attempt(program: Program, mode: ProtectionMode, config: VmConfig,
             keys, global_reference, function: str, buffer: str,
             payload: bytes, seed: int) -> RunReport:
    script = (Overflow(function=function, buffer=buffer, payload=payload),)
    return execute_script(program, mode, script, seed, config, keys,
                          global_reference).report


def brute_force_campaign(program: Program, mode: ProtectionMode,
                         restart_model: str, strategy: str,
                         trials: int, budget: int, pac_width: int,
                         seed: int, workers: int = 1,
                         function: str | None = None,
                         buffer: str | None = None,
                         config: VmConfig | None = None) -> CampaignResult:
    """Crash-oracle brute forcing of the first canary above a buffer.

    fork: every attempt replays against identical keys and SP. rekey: keys
    and the reference canary are re-randomized on each attempt. An attempt
    is observed failed iff the VM faulted.
    """
    if restart_model not in ("fork", "rekey"):
        raise ScriptError(f"unknown restart model {restart_model!r}")
    if strategy not in ("random", "byte_by_byte"):
        raise ScriptError(f"unknown strategy {strategy!r}")
    base = config or VmConfig()
    config = VmConfig(pac_width=pac_width, ga_width=base.ga_width,
                      stack_size=base.stack_size,
                      max_frame_size=base.max_frame_size,
                      threshold=base.threshold, rearrange=base.rearrange)
    function, buffer, buffer_slot, guard, gap, plan = _campaign_target(
        program, mode, config, function, buffer)

    # Dry benign run pins the attacked frame base: the adversary knows the
    # stack layout of the target binary.
    probe = create_state(program, mode, _derive_seed(seed, 0xFFFF_FFFF),
                         config)
    execute(probe)
    frame_base = None
    for event in probe.events:
        if event["kind"] == "call" and event["function"] == function:
            frame_base = event["address"]
            break
    if frame_base is None:
        raise ScriptError(f"function {function!r} is never executed")

    guard_pos = None
    prev_addr = None
    if mode.is_pcan:
        idx = plan.chain.index(guard)
        prev_addr = frame_base + plan.chain[idx - 1].offset

    def run_trial(index: int) -> tuple[bool, int]:
        trial_seed = _derive_seed(seed, index)
        rng = random.Random(trial_seed)
        keys = None
        gref = None
        if restart_model == "fork":
            from . import pa
            keys = pa.PacKeySet.generate(rng, config.pac_width,
                                         config.ga_width)
            gref = rng.getrandbits(64)
        filler = bytes([0x42]) * gap
        attempts = 0
        if strategy == "byte_by_byte":
            known = b""
            for _ in range(8):
                order = list(range(256))
                rng.shuffle(order)
                hit = None
                for guess in order:
                    if attempts >= budget:
                        return False, attempts
                    attempts += 1
                    attempt_seed = _derive_seed(trial_seed, attempts)
                    payload = filler + known + bytes([guess])
                    report = _attempt(program, mode, config, keys, gref,
                                      function, buffer, payload, attempt_seed)
                    if report.status == "exited":
                        hit = guess
                        break
                if hit is None:
                    return False, attempts
                known += bytes([hit])
            return True, attempts
        # random whole-value guessing
        while attempts < budget:
            attempts += 1
            attempt_seed = _derive_seed(trial_seed, attempts)
            if restart_model == "rekey":
                keys = None
                gref = None
            if prev_addr is not None:
                guess = prev_addr | (rng.getrandbits(config.pac_width) << 48)
            else:
                guess = rng.getrandbits(64)
            payload = filler + guess.to_bytes(8, "little")
            report = _attempt(program, mode, config, keys, gref, function,
                              buffer, payload, attempt_seed)
            if report.status == "exited":
                return True, attempts
        return False, attempts

    results: list[tuple[bool, int]]
    if workers <= 1:
        results = [run_trial(i) for i in range(trials)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_trial, range(trials)))

    out = CampaignResult(mode=mode.value, restart_model=restart_model,
                         strategy=strategy, trials=trials, budget=budget,
                         pac_width=pac_width, seed=seed)
    for bypassed, attempts in results:
        out.attempts.append(attempts)
        out.bypass_flags.append(bypassed)
        if bypassed:
            out.bypassed += 1
        else:
            out.detected += 1
    return out


def differential_matrix(program: Program,
                        scenarios: dict[str, tuple[Action, ...]],
                        modes: list[ProtectionMode], seed: int,
                        config: VmConfig | None = None) -> dict:
    """Scenario x mode detection matrix; deterministic given the seed."""
    matrix: dict[str, dict[str, str]] = {}
    for name in sorted(scenarios):
        row: dict[str, str] = {}
        for mode in modes:
            try:
                result = execute_script(program, mode, scenarios[name], seed,
                                        config)
            except ScriptError:
                # The script targets a slot this mode's layout does not
                # have; the scenario has no analogue here.
                row[mode.value] = "not_applicable"
                continue
            row[mode.value] = result.outcome
        matrix[name] = row
    return matrix
