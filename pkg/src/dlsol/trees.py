"""Regular trees with a distinguished end, coded by l-adic digit words.

A vertex is stored as ``(base, anchor, digits)``: starting from the vertex at
height ``anchor`` on the reference line (the all-zero ray through the origin),
descend once per digit.  Its height is ``anchor - len(digits)``.  Leading zero
digits are folded into the anchor, so every vertex has a unique code.  Heights
increase toward the distinguished end.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

_ALPHABET = "0123456789abcdefghijklmnopqrstuvwxyz"


class MixedTrees(ValueError):
    pass


def _canon(anchor: int, digits: Sequence[int]) -> tuple[int, tuple[int, ...]]:
    k = 0
    while k < len(digits) and digits[k] == 0:
        k += 1
    return anchor - k, tuple(digits[k:])


@dataclass(frozen=True, order=True)
class LadicAddress:
    base: int
    anchor: int
    digits: tuple[int, ...] = ()

    def __post_init__(self):
        if self.base < 2:
            raise ValueError("base must be >= 2")
        digits = tuple(int(d) for d in self.digits)
        if any(d < 0 or d >= self.base for d in digits):
            raise ValueError(f"digit out of range for base {self.base}")
        anchor, digits = _canon(int(self.anchor), digits)
        object.__setattr__(self, "anchor", anchor)
        object.__setattr__(self, "digits", digits)

    @property
    def height(self) -> int:
        return self.anchor - len(self.digits)

    def parent(self) -> "LadicAddress":
        if self.digits:
            return LadicAddress(self.base, self.anchor, self.digits[:-1])
        return LadicAddress(self.base, self.anchor + 1, ())

    def child(self, d: int) -> "LadicAddress":
        return LadicAddress(self.base, self.anchor, self.digits + (d,))

    def children(self) -> list["LadicAddress"]:
        return [self.child(d) for d in range(self.base)]

    def ancestor(self, height: int) -> "LadicAddress":
        """The vertex at ``height`` on the ray toward the end."""
        if height < self.height:
            raise ValueError("ancestor height below vertex")
        if height >= self.anchor:
            return LadicAddress(self.base, height, ())
        return LadicAddress(self.base, self.anchor, self.digits[: self.anchor - height])

    def descend(self, digits: Iterable[int]) -> "LadicAddress":
        return LadicAddress(self.base, self.anchor, self.digits + tuple(digits))

    def word(self, anchor: int) -> tuple[int, ...]:
        """Digit word relative to a higher anchor (zero padded)."""
        if anchor < self.anchor:
            raise ValueError("anchor below vertex anchor")
        return (0,) * (anchor - self.anchor) + self.digits

    def digit_at(self, height: int) -> int:
        """Digit chosen when descending from height+1 to height (needs height >= self.height)."""
        if height < self.height:
            raise ValueError("digit below vertex")
        if height >= self.anchor:
            return 0
        return self.digits[self.anchor - height - 1]

    def is_ancestor_of(self, other: "LadicAddress") -> bool:
        if other.height > self.height or other.base != self.base:
            return False
        return other.ancestor(self.height) == self

    def __str__(self) -> str:
        return f"{self.base}:{self.anchor}:" + "".join(_ALPHABET[d] for d in self.digits)

    @classmethod
    def parse(cls, text: str) -> "LadicAddress":
        try:
            b, a, w = text.strip().split(":")
            base = int(b)
            digits = tuple(_ALPHABET.index(c) for c in w.lower())
            return cls(base, int(a), digits)
        except ValueError as exc:
            raise ValueError(f"bad address literal {text!r}: {exc}") from None


TreeVertex = LadicAddress


def origin(base: int) -> LadicAddress:
    return LadicAddress(base, 0, ())


def _check(u: LadicAddress, v: LadicAddress) -> None:
    if u.base != v.base:
        raise MixedTrees(f"bases {u.base} and {v.base}")


def common_prefix(u: LadicAddress, v: LadicAddress) -> tuple[int, int]:
    """Return (anchor, p): shared anchor and the length of the common word prefix."""
    A = max(u.anchor, v.anchor)
    wu, wv = u.word(A), v.word(A)
    p = 0
    lim = min(len(wu), len(wv))
    while p < lim and wu[p] == wv[p]:
        p += 1
    return A, p


def confluent(u: LadicAddress, v: LadicAddress) -> LadicAddress:
    _check(u, v)
    A, p = common_prefix(u, v)
    return LadicAddress(u.base, A, u.word(A)[:p])


def confluent_height(u: LadicAddress, v: LadicAddress) -> int:
    _check(u, v)
    A, p = common_prefix(u, v)
    return A - p


def tree_distance(u: LadicAddress, v: LadicAddress) -> int:
    c = confluent_height(u, v)
    return (c - u.height) + (c - v.height)


def boundary_point(start: LadicAddress, rule: Callable[[int], int] | Sequence[int],
                   depth: int) -> LadicAddress:
    """Truncation at ``depth`` steps below ``start`` of the ray given by ``rule``."""
    if depth < 0:
        raise ValueError("depth must be >= 0")
    if callable(rule):
        digits = [int(rule(k)) for k in range(depth)]
    else:
        digits = list(rule[:depth])
        if len(digits) < depth:
            digits += [0] * (depth - len(digits))
    return start.descend(digits)


def zero_extend(v: LadicAddress, height: int) -> LadicAddress:
    """Descend by zeros to ``height`` (or return the ancestor if above)."""
    if height >= v.height:
        return v.ancestor(height)
    return v.descend([0] * (v.height - height))
