"""The miniature stack IR: functions with typed locals and straight-line bodies.

Programs load from a strict JSON format; unknown keys are rejected so typos
surface immediately. Bodies contain only writes, calls, and a final return --
control flow inside functions adds nothing to what the canary machinery
tests. Writes are deliberately not bounds-checked.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field


class ProgramError(ValueError):
    """Raised for malformed program files or structural violations."""


def assign_function_id(name: str) -> int:
    """Stable 16-bit function identifier: BLAKE2s over the UTF-8 name.

    Deterministic across runs and platforms so canary values reproduce for
    fixed keys. Collisions across a very large program are possible and are
    a documented limitation; the shipped corpus is checked collision-free.
    """
    digest = hashlib.blake2s(name.encode("utf-8"), digest_size=2).digest()
    return int.from_bytes(digest, "big")


@dataclass(frozen=True)
class LocalVar:
    name: str
    kind: str  # "buffer" | "scalar"
    size_bytes: int
    is_array: bool
    address_taken: bool = False
    register_local: bool = False


@dataclass(frozen=True)
class WriteOp:
    target: str
    offset: int
    data: bytes


@dataclass(frozen=True)
class CallOp:
    target: str


@dataclass(frozen=True)
class ReturnOp:
    pass


BodyOp = WriteOp | CallOp | ReturnOp


@dataclass(frozen=True)
class FunctionDef:
    name: str
    function_id: int
    locals: tuple[LocalVar, ...]
    body: tuple[BodyOp, ...]

    def local(self, name: str) -> LocalVar:
        for lv in self.locals:
            if lv.name == name:
                return lv
        raise ProgramError(f"function {self.name!r} has no local {name!r}")

    @property
    def buffers(self) -> tuple[LocalVar, ...]:
        return tuple(lv for lv in self.locals if lv.kind == "buffer")


@dataclass(frozen=True)
class Program:
    functions: dict[str, FunctionDef] = field(default_factory=dict)
    entry: str = ""


_TOP_KEYS = {"entry", "functions"}
_FN_KEYS = {"name", "function_id", "locals", "body"}
_LOCAL_KEYS = {"name", "kind", "size", "address_taken", "register_local"}
_OP_KEYS = {
    "write": {"op", "target", "offset", "bytes"},
    "call": {"op", "target"},
    "return": {"op"},
}


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ProgramError(f"{where}: unknown key(s) {sorted(unknown)}")


def _parse_local(raw: dict, where: str) -> LocalVar:
    if not isinstance(raw, dict):
        raise ProgramError(f"{where}: local must be an object")
    _check_keys(raw, _LOCAL_KEYS, where)
    name = raw.get("name")
    kind = raw.get("kind")
    size = raw.get("size")
    if not isinstance(name, str) or not name:
        raise ProgramError(f"{where}: local name must be a non-empty string")
    if kind not in ("buffer", "scalar"):
        raise ProgramError(f"{where}/{name}: kind must be 'buffer' or 'scalar'")
    if not isinstance(size, int) or isinstance(size, bool):
        raise ProgramError(
            f"{where}/{name}: variable-size (dynamic) allocations are not "
            f"supported; size must be a constant integer")
    if size < 1:
        raise ProgramError(f"{where}/{name}: size must be >= 1")
    if kind == "scalar" and size != 8:
        raise ProgramError(f"{where}/{name}: scalar locals must have size 8")
    address_taken = raw.get("address_taken", False)
    register_local = raw.get("register_local", False)
    if not isinstance(address_taken, bool) or not isinstance(register_local, bool):
        raise ProgramError(f"{where}/{name}: flags must be booleans")
    return LocalVar(
        name=name,
        kind=kind,
        size_bytes=size,
        is_array=(kind == "buffer"),
        address_taken=address_taken,
        register_local=register_local,
    )


def _parse_op(raw: dict, where: str) -> BodyOp:
    if not isinstance(raw, dict) or "op" not in raw:
        raise ProgramError(f"{where}: body op must be an object with 'op'")
    kind = raw["op"]
    if kind not in _OP_KEYS:
        raise ProgramError(f"{where}: unknown op {kind!r}")
    _check_keys(raw, _OP_KEYS[kind], where)
    if kind == "return":
        return ReturnOp()
    if kind == "call":
        target = raw.get("target")
        if not isinstance(target, str) or not target:
            raise ProgramError(f"{where}: call target must be a string")
        return CallOp(target=target)
    target = raw.get("target")
    offset = raw.get("offset")
    data_hex = raw.get("bytes")
    if not isinstance(target, str) or not target:
        raise ProgramError(f"{where}: write target must be a string")
    if not isinstance(offset, int) or isinstance(offset, bool) or offset < 0:
        raise ProgramError(f"{where}: write offset must be a non-negative int")
    if not isinstance(data_hex, str):
        raise ProgramError(f"{where}: write bytes must be a hex string")
    try:
        data = bytes.fromhex(data_hex)
    except ValueError as exc:
        raise ProgramError(f"{where}: bad hex in write bytes: {exc}") from exc
    if len(data) < 1:
        raise ProgramError(f"{where}: write must be at least 1 byte")
    return WriteOp(target=target, offset=offset, data=data)


def _parse_function(raw: dict) -> FunctionDef:
    if not isinstance(raw, dict):
        raise ProgramError("function entry must be an object")
    name = raw.get("name")
    if not isinstance(name, str) or not name:
        raise ProgramError("function name must be a non-empty string")
    _check_keys(raw, _FN_KEYS, f"function {name}")
    fid = raw.get("function_id")
    if fid is None:
        fid = assign_function_id(name)
    elif not isinstance(fid, int) or isinstance(fid, bool) or not 0 <= fid < 1 << 16:
        raise ProgramError(f"function {name}: function_id must fit in 16 bits")
    locals_raw = raw.get("locals", [])
    body_raw = raw.get("body", [])
    if not isinstance(locals_raw, list) or not isinstance(body_raw, list):
        raise ProgramError(f"function {name}: locals and body must be lists")
    locals_ = tuple(
        _parse_local(lv, f"function {name}") for lv in locals_raw)
    seen: set[str] = set()
    for lv in locals_:
        if lv.name in seen:
            raise ProgramError(f"function {name}: duplicate local {lv.name!r}")
        seen.add(lv.name)
    body = tuple(_parse_op(op, f"function {name}") for op in body_raw)
    for op in body:
        if isinstance(op, WriteOp) and op.target not in seen:
            raise ProgramError(
                f"function {name}: write targets unknown local {op.target!r}")
    return FunctionDef(name=name, function_id=fid, locals=locals_, body=body)


def parse_program(text: str) -> Program:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProgramError(
            f"syntax error at line {exc.lineno}, column {exc.colno}: "
            f"{exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ProgramError("program file must be a JSON object")
    _check_keys(raw, _TOP_KEYS, "program")
    entry = raw.get("entry")
    fns_raw = raw.get("functions")
    if not isinstance(entry, str) or not entry:
        raise ProgramError("program: 'entry' must be a non-empty string")
    if not isinstance(fns_raw, list):
        raise ProgramError("program: 'functions' must be a list")
    functions: dict[str, FunctionDef] = {}
    for fn_raw in fns_raw:
        fn = _parse_function(fn_raw)
        if fn.name in functions:
            raise ProgramError(f"duplicate function {fn.name!r}")
        functions[fn.name] = fn
    if entry not in functions:
        raise ProgramError(f"entry function {entry!r} is not defined")
    for fn in functions.values():
        for op in fn.body:
            if isinstance(op, CallOp) and op.target not in functions:
                raise ProgramError(
                    f"function {fn.name!r} calls undefined function "
                    f"{op.target!r}")
    return Program(functions=functions, entry=entry)


def serialize_program(program: Program) -> str:
    """Inverse of parse_program on the Program structure."""
    fns = []
    for fn in program.functions.values():
        locals_ = [
            {
                "name": lv.name,
                "kind": lv.kind,
                "size": lv.size_bytes,
                "address_taken": lv.address_taken,
                "register_local": lv.register_local,
            }
            for lv in fn.locals
        ]
        body = []
        for op in fn.body:
            if isinstance(op, WriteOp):
                body.append({"op": "write", "target": op.target,
                             "offset": op.offset, "bytes": op.data.hex()})
            elif isinstance(op, CallOp):
                body.append({"op": "call", "target": op.target})
            else:
                body.append({"op": "return"})
        fns.append({"name": fn.name, "function_id": fn.function_id,
                    "locals": locals_, "body": body})
    return json.dumps({"entry": program.entry, "functions": fns}, indent=2)
