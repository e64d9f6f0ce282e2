"""Signed fixed-point values at scale 10^4.

This is the arithmetic both tampering paths share: the in-stream state
machine accumulates digits exactly the way parse() does, so a value that
round-trips here round-trips there.  Rounding is half away from zero
everywhere (deterministic and sign-symmetric).

parse() honours at most five fractional digits: the fifth digit decides
the final rounding and anything after it is ignored.  For finite decimal
inputs that is exactly half-away-from-zero at four decimals.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import FlawsimError

SCALE = 10_000
MAX_RAW = 2**31 - 1  # accumulator must fit 4 signed bytes


class FixedPointOverflow(FlawsimError):
    pass


class FixedPointSyntax(FlawsimError):
    pass


def div_round_half_away(numerator: int, denominator: int) -> int:
    """Round numerator/denominator to the nearest int, halves away from 0."""
    if denominator <= 0:
        raise ValueError("denominator must be positive")
    sign = -1 if numerator < 0 else 1
    q, r = divmod(abs(numerator), denominator)
    if 2 * r >= denominator:
        q += 1
    return sign * q


@dataclass(frozen=True, order=True)
class FixedPoint:
    raw: int  # value * 10^4

    def __post_init__(self):
        if abs(self.raw) > MAX_RAW:
            raise FixedPointOverflow(f"raw magnitude {self.raw} exceeds 32-bit budget")

    @classmethod
    def from_units(cls, units: int) -> "FixedPoint":
        return cls(units * SCALE)

    @classmethod
    def parse(cls, text: str) -> "FixedPoint":
        """Parse a plain decimal literal ('2', '-1.5', '4.1234', '.5')."""
        s = text.strip()
        if not s:
            raise FixedPointSyntax("empty numeric field")
        sign = 1
        i = 0
        if s[0] in "+-":
            sign = -1 if s[0] == "-" else 1
            i = 1
        acc = 0
        frac = -1  # -1: integer part; 0..4: fraction digits seen; 5: done
        seen_digit = False
        for ch in s[i:]:
            if ch == ".":
                if frac >= 0:
                    raise FixedPointSyntax(f"two decimal points in {text!r}")
                frac = 0
            elif ch.isdigit():
                seen_digit = True
                d = ord(ch) - 48
                if frac < 0:
                    acc = acc * 10 + d
                elif frac < 4:
                    acc = acc * 10 + d
                    frac += 1
                elif frac == 4:
                    acc += 1 if d >= 5 else 0
                    frac = 5
                # extra digits past the rounding digit are ignored
                if acc > MAX_RAW:
                    raise FixedPointOverflow(f"{text!r} exceeds the 32-bit budget")
            else:
                raise FixedPointSyntax(f"bad character {ch!r} in {text!r}")
        if not seen_digit:
            raise FixedPointSyntax(f"no digits in {text!r}")
        if frac < 0:
            frac = 0
        if frac < 4:
            acc *= 10 ** (4 - frac)
        if acc > MAX_RAW:
            raise FixedPointOverflow(f"{text!r} exceeds the 32-bit budget")
        return cls(sign * acc)

    def to_text(self) -> str:
        """Minimal-digit rendering: trailing zeros trimmed, <=4 decimals."""
        return format_raw(self.raw)

    def scale_by(self, numerator: int, denominator: int) -> "FixedPoint":
        return FixedPoint(div_round_half_away(self.raw * numerator, denominator))

    def __add__(self, other: "FixedPoint") -> "FixedPoint":
        return FixedPoint(self.raw + other.raw)

    def __sub__(self, other: "FixedPoint") -> "FixedPoint":
        return FixedPoint(self.raw - other.raw)

    def __neg__(self) -> "FixedPoint":
        return FixedPoint(-self.raw)

    def __float__(self) -> float:
        return self.raw / SCALE

    def __str__(self) -> str:
        return self.to_text()


ZERO = FixedPoint(0)


def format_raw(raw: int) -> str:
    sign = "-" if raw < 0 else ""
    units, frac = divmod(abs(raw), SCALE)
    if frac == 0:
        return f"{sign}{units}"
    return f"{sign}{units}.{f'{frac:04d}'.rstrip('0')}"
