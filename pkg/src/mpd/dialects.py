"""Invertible packet transforms ("dialects") and their inverses.

Segment indices are 0-based and half-open: ``m[i:j]``.  A shuffle dialect
swaps the two equal-length segments ``m[p:p+l]`` and ``m[p+o:p+o+l]``; a
split dialect cuts a message into four sub-packets whose first three
lengths are fixed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

from .errors import DialectMismatch, InfeasibleParams, WrongPartCount

SPLIT_ARITY = 4


class Kind(enum.Enum):
    IDENTITY = "identity"
    SHUFFLE = "shuffle"
    SPLIT = "split"


_ARITY = {Kind.IDENTITY: 0, Kind.SHUFFLE: 3, Kind.SPLIT: 3}


@dataclass(frozen=True)
class DialectSpec:
    """One dialect generating function.

    ``params`` is ``(p, l, o)`` for a shuffle, ``(t1, t2, t3)`` for a split
    and empty for the identity.  Construction only checks the parameter
    count and sign; :meth:`is_well_formed` checks the structural rules a
    dialect table insists on.
    """

    kind: Kind
    params: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.params) != _ARITY[self.kind]:
            raise ValueError(
                f"{self.kind.value} takes {_ARITY[self.kind]} parameters, got {self.params!r}"
            )
        if any(not isinstance(v, int) or v < 0 for v in self.params):
            raise ValueError(f"parameters must be non-negative integers: {self.params!r}")

    @classmethod
    def identity(cls) -> DialectSpec:
        return cls(Kind.IDENTITY)

    @classmethod
    def shuffle(cls, position: int, length: int, offset: int) -> DialectSpec:
        return cls(Kind.SHUFFLE, (position, length, offset))

    @classmethod
    def split(cls, t1: int, t2: int, t3: int) -> DialectSpec:
        return cls(Kind.SPLIT, (t1, t2, t3))

    @classmethod
    def parse(cls, text: str) -> DialectSpec:
        """Parse the one-line text form, e.g. ``"shuffle 1 1 3"``."""
        fields = text.split()
        if not fields:
            raise ValueError("empty dialect record")
        try:
            kind = Kind(fields[0].lower())
            params = tuple(int(f) for f in fields[1:])
        except ValueError as exc:
            raise ValueError(f"bad dialect record {text!r}") from exc
        return cls(kind, params)

    def __str__(self):
        return " ".join([self.kind.value, *map(str, self.params)])

    @property
    def arity(self) -> int:
        """Number of wire units this dialect emits when feasible."""
        return SPLIT_ARITY if self.kind is Kind.SPLIT else 1

    def is_well_formed(self) -> bool:
        if self.kind is Kind.SHUFFLE:
            _, length, offset = self.params
            return length >= 1 and offset >= length
        if self.kind is Kind.SPLIT:
            return all(t >= 1 for t in self.params)
        return True


IDENTITY = DialectSpec.identity()


def validate_params(spec: DialectSpec, k: int) -> bool:
    """True iff ``spec`` can be applied to a ``k``-byte message."""
    if spec.kind is Kind.IDENTITY:
        return True
    if not spec.is_well_formed():
        return False
    if spec.kind is Kind.SHUFFLE:
        p, l, o = spec.params
        return p + o + l <= k
    return sum(spec.params) < k


def _check(spec: DialectSpec, kind: Kind, k: int):
    if spec.kind is not kind:
        raise TypeError(f"expected a {kind.value} dialect, got {spec}")
    if not validate_params(spec, k):
        raise InfeasibleParams(f"{spec} does not fit a {k}-byte message")


def shuffle_apply(m: bytes, spec: DialectSpec) -> bytes:
    _check(spec, Kind.SHUFFLE, len(m))
    return _swap(m, *spec.params)


def shuffle_invert(m2: bytes, spec: DialectSpec) -> bytes:
    # Both segments have length l, so the swap is its own inverse.
    return shuffle_apply(m2, spec)


def split_apply(m: bytes, spec: DialectSpec) -> list[bytes]:
    _check(spec, Kind.SPLIT, len(m))
    t1, t2, t3 = spec.params
    a, b, c = t1, t1 + t2, t1 + t2 + t3
    return [m[:a], m[a:b], m[b:c], m[c:]]


def split_invert(parts: Sequence[bytes]) -> bytes:
    if len(parts) != SPLIT_ARITY:
        raise WrongPartCount(f"split dialects carry {SPLIT_ARITY} sub-packets, got {len(parts)}")
    return b"".join(parts)


def split_part_lengths_ok(spec: DialectSpec, parts: Sequence[bytes]) -> bool:
    """Check received sub-packets against the lengths ``spec`` prescribes.

    Works on a prefix of the sub-packets too, so a receiver can reject a
    mismatching split handshake before all four parts have arrived.
    """
    for t, part in zip(spec.params, parts):
        if len(part) != t:
            return False
    return len(parts) < SPLIT_ARITY or len(parts[SPLIT_ARITY - 1]) >= 1


def _swap(m: bytes, p: int, l: int, o: int) -> bytes:
    return m[:p] + m[p + o:p + o + l] + m[p + l:p + o] + m[p:p + l] + m[p + o + l:]


def apply(spec: DialectSpec, m: bytes) -> list[bytes]:
    """Mutate ``m`` into its wire units; infeasible specs degrade to identity."""
    kind = spec.kind
    if kind is Kind.SHUFFLE:
        p, l, o = spec.params
        if l >= 1 and o >= l and p + o + l <= len(m):
            return [m[:p] + m[p + o:p + o + l] + m[p + l:p + o] + m[p:p + l] + m[p + o + l:]]
    elif kind is Kind.SPLIT and validate_params(spec, len(m)):
        return split_apply(m, spec)
    return [bytes(m)]


def invert(spec: DialectSpec, units: Sequence[bytes]) -> bytes:
    """Recover the original message from the wire units of ``spec``.

    A single unit under a split dialect is accepted only when the split is
    infeasible for its length, i.e. when the sender must have fallen back
    to the identity.
    """
    if spec.kind is Kind.SHUFFLE and len(units) == 1:
        unit = units[0]
        p, l, o = spec.params
        if l >= 1 and o >= l and p + o + l <= len(unit):
            return unit[:p] + unit[p + o:p + o + l] + unit[p + l:p + o] + unit[p:p + l] + unit[p + o + l:]
        return bytes(unit)
    units = list(units)
    if spec.kind is Kind.SPLIT:
        if len(units) == 1 and not validate_params(spec, len(units[0])):
            return bytes(units[0])
        if len(units) != SPLIT_ARITY:
            raise WrongPartCount(f"{spec} expects {SPLIT_ARITY} units, got {len(units)}")
        if not split_part_lengths_ok(spec, units):
            raise DialectMismatch(f"sub-packet lengths {[len(u) for u in units]} do not match {spec}")
        return split_invert(units)
    if len(units) != 1:
        raise WrongPartCount(f"{spec} expects 1 unit, got {len(units)}")
    (unit,) = units
    if spec.kind is Kind.SHUFFLE and validate_params(spec, len(unit)):
        return shuffle_invert(unit, spec)
    return bytes(unit)
