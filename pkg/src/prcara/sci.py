"""Extended 1-stage SCI: a 32-bit control word carrying the reservation for
the sender's next transmission.

Wire layout, MSB to LSB:

    priority(3) | ri1(5) | ri2(7) | rri_code(4) | mcs(5) | dmrs_and_misc(8)

RI1 is the subchannel of the next transmission; RI2 is the subframe offset to
it, 1..127, with 0 meaning no subsequent reservation is signaled. The layout
is fixed and platform independent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .grid import ResourceIndex

# (name, width in bits), MSB first; total is exactly 32.
_FIELDS = (
    ("priority", 3),
    ("ri1", 5),
    ("ri2", 7),
    ("rri_code", 4),
    ("mcs", 5),
    ("dmrs_and_misc", 8),
)

SCI_BITS = sum(width for _, width in _FIELDS)
RI2_MAX = 127


class SciFieldError(ValueError):
    """A field value does not fit its bit width."""


@dataclass(frozen=True)
class ExtendedSci:
    priority: int = 0
    ri1: int = 0
    ri2: int = 0
    rri_code: int = 0
    mcs: int = 0
    dmrs_and_misc: int = 0


def encode_sci(sci: ExtendedSci) -> int:
    """Pack the SCI into its 32-bit wire word."""
    word = 0
    for name, width in _FIELDS:
        value = getattr(sci, name)
        if not isinstance(value, int) or not 0 <= value < (1 << width):
            raise SciFieldError(f"{name}={value!r} out of range [0, {(1 << width) - 1}]")
        word = (word << width) | value
    return word


def decode_sci(word: int) -> ExtendedSci:
    """Unpack a 32-bit word; every word decodes."""
    if not 0 <= word < (1 << SCI_BITS):
        raise SciFieldError(f"word {word!r} is not a 32-bit value")
    values = {}
    shift = SCI_BITS
    for name, width in _FIELDS:
        shift -= width
        values[name] = (word >> shift) & ((1 << width) - 1)
    return ExtendedSci(**values)


def reservation_of(sci: ExtendedSci, current_subframe: int) -> Optional[ResourceIndex]:
    """Cell reserved for the sender's next transmission, or None if ri2 = 0."""
    if sci.ri2 == 0:
        return None
    return ResourceIndex(sci.ri1, current_subframe + sci.ri2)


def dump_sci(sci: ExtendedSci) -> str:
    """Debug form, one `field=value` token per field."""
    return " ".join(f"{name}={getattr(sci, name)}" for name, _ in _FIELDS)
