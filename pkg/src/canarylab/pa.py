"""Pointer-signing instruction emulation.

Pointers are plain 64-bit ints: bits [47:0] hold the virtual address and
bits [63:48] hold the PAC field. A pointer is dereferenceable only when the
PAC field is all zero ("canonical"). Signing places a truncated keyed tag in
the low bits of the PAC field; a failed authentication sets bit 62 plus a
2-bit key identifier so the pointer can never be dereferenced and the fault
can be attributed to a key.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

M64 = (1 << 64) - 1
VA_MASK = (1 << 48) - 1
PAC_SHIFT = 48

# PAC-field pattern written on authentication failure: bit 62 of the pointer
# (bit 14 of the field) plus the 2-bit key id of the failing key.
AUTH_FAIL_BIT = 0x4000

KEY_IA = 0
KEY_IB = 1
KEY_DA = 2
KEY_DB = 3
KEY_GA = 4


class PacConfigError(ValueError):
    """Raised for invalid tag widths or malformed key sets."""


@dataclass(frozen=True)
class PacKeySet:
    """The five per-process 128-bit keys plus tag-width configuration.

    pac_width is the truncated tag width W used for pointer keys; it is
    configurable down to 4 bits so forgery statistics are measurable at desk
    scale. ga_width is the generic-MAC width (32 by default).
    """

    ia: int
    ib: int
    da: int
    db: int
    ga: int
    pac_width: int = 16
    ga_width: int = 32

    def __post_init__(self) -> None:
        if not 4 <= self.pac_width <= 16:
            raise PacConfigError(
                f"pac_width must be in [4, 16], got {self.pac_width}")
        if not 1 <= self.ga_width <= 32:
            raise PacConfigError(
                f"ga_width must be in [1, 32], got {self.ga_width}")

    @classmethod
    def generate(cls, rng: random.Random, pac_width: int = 16,
                 ga_width: int = 32) -> "PacKeySet":
        """Draw five independent keys from the given (seeded) RNG."""
        return cls(
            ia=rng.getrandbits(128),
            ib=rng.getrandbits(128),
            da=rng.getrandbits(128),
            db=rng.getrandbits(128),
            ga=rng.getrandbits(128),
            pac_width=pac_width,
            ga_width=ga_width,
        )


def _mix64(x: int) -> int:
    # splitmix64 finalizer: a full-avalanche 64-bit permutation.
    x &= M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & M64
    return x ^ (x >> 31)


def pac_compute(key: int, data: int, modifier: int, width: int) -> int:
    """Keyed tag over (data, modifier), truncated to `width` bits.

    Three rounds of the 64-bit finalizer permutation, alternating in the two
    key halves. The algorithm is fixed for the life of the artifact; the KAT
    fixture file pins its outputs.
    """
    if not 1 <= width <= 32:
        raise PacConfigError(f"tag width must be in [1, 32], got {width}")
    k0 = key & M64
    k1 = (key >> 64) & M64
    x = _mix64((data & M64) ^ k0)
    x = _mix64(x ^ (modifier & M64) ^ k1)
    x = _mix64(x ^ k0 ^ ((k1 << 32 | k1 >> 32) & M64))
    return x & ((1 << width) - 1)


def is_canonical(ptr: int) -> bool:
    return (ptr >> PAC_SHIFT) == 0


def _sign(ptr: int, modifier: int, key: int, width: int) -> int:
    # The tag covers the full input value: a non-canonical input therefore
    # produces an unauthenticatable pointer, matching hardware garbage-in
    # behavior, instead of raising.
    tag = pac_compute(key, ptr, modifier, width)
    return (ptr & VA_MASK) | (tag << PAC_SHIFT)


def _auth(ptr: int, modifier: int, key: int, key_id: int, width: int) -> int:
    addr = ptr & VA_MASK
    tag = pac_compute(key, addr, modifier, width)
    if (ptr >> PAC_SHIFT) == tag:
        return addr
    return addr | ((AUTH_FAIL_BIT | key_id) << PAC_SHIFT)


def pacda(ptr: int, modifier: int, keys: PacKeySet) -> int:
    return _sign(ptr, modifier, keys.da, keys.pac_width)


def autda(ptr: int, modifier: int, keys: PacKeySet) -> int:
    return _auth(ptr, modifier, keys.da, KEY_DA, keys.pac_width)


def pacia(ptr: int, modifier: int, keys: PacKeySet) -> int:
    return _sign(ptr, modifier, keys.ia, keys.pac_width)


def autia(ptr: int, modifier: int, keys: PacKeySet) -> int:
    return _auth(ptr, modifier, keys.ia, KEY_IA, keys.pac_width)


def pacga(data: int, modifier: int, keys: PacKeySet) -> int:
    """Generic MAC: tag placed in bits [63:32], low 32 bits zero."""
    return pac_compute(keys.ga, data, modifier, keys.ga_width) << 32


def fault_key_id(ptr: int) -> int | None:
    """Key id encoded in a corrupted pointer, or None if not a failure pattern."""
    field = ptr >> PAC_SHIFT
    if field & AUTH_FAIL_BIT:
        return field & 0x3
    return None


def load_kat_rows(text: str) -> list[tuple[int, int, int, int, int]]:
    """Parse a KAT fixture: `hexkey hexdata hexmod width hextag` per row.

    Blank lines and `#` comments are skipped.
    """
    rows = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key_s, data_s, mod_s, width_s, tag_s = line.split()
        rows.append((int(key_s, 16), int(data_s, 16), int(mod_s, 16),
                     int(width_s), int(tag_s, 16)))
    return rows


def format_kat_rows(rows: list[tuple[int, int, int, int, int]]) -> str:
    lines = ["# key data modifier width tag"]
    for key, data, mod, width, tag in rows:
        lines.append(f"{key:032x} {data:016x} {mod:016x} {width} {tag:08x}")
    return "\n".join(lines) + "\n"
