"""Semantic versions and range expressions as DNF comparator constraints.

A range expression is parsed into a disjunction of conjunctions of
comparators over the total order on versions, e.g. ``"12 || ~13.0.1"``
becomes ``(X>=12.0.0 and X<13.0.0) or (X>=13.0.1 and X<13.1.0)``.
Satisfaction evaluates every comparator against the candidate, then
aggregates conjunctions followed by disjunctions.

Everything here is a pure function over immutable values.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import total_ordering
from typing import Iterable, Optional

from .errors import MalformedRange, MalformedVersion

__all__ = [
    "Version",
    "Comparator",
    "ConstraintDNF",
    "parse_version",
    "compare",
    "parse_constraint",
    "satisfies",
    "max_satisfying",
]

_VERSION_RE = re.compile(
    r"^(0|[1-9]\d*)\.(0|[1-9]\d*)\.(0|[1-9]\d*)"
    r"(?:-((?:0|[1-9]\d*|\d*[a-zA-Z-][0-9a-zA-Z-]*)"
    r"(?:\.(?:0|[1-9]\d*|\d*[a-zA-Z-][0-9a-zA-Z-]*))*))?"
    r"(?:\+([0-9a-zA-Z-]+(?:\.[0-9a-zA-Z-]+)*))?$"
)

OPS = (">=", "<=", ">", "<", "=")


def _prerelease_key(prerelease: tuple[str, ...]) -> tuple:
    # Empty prerelease ranks above any prerelease; numeric ids below alphanumeric.
    if not prerelease:
        return (1,)
    ids = tuple((0, int(p), "") if p.isdigit() else (1, 0, p) for p in prerelease)
    return (0, ids)


@total_ordering
@dataclass(frozen=True)
class Version:
    """A semver version. Build metadata is carried but never ordered on."""

    major: int
    minor: int
    patch: int
    prerelease: tuple[str, ...] = ()
    build: tuple[str, ...] = ()

    @property
    def core(self) -> tuple[int, int, int]:
        return (self.major, self.minor, self.patch)

    @property
    def is_prerelease(self) -> bool:
        return bool(self.prerelease)

    def _key(self) -> tuple:
        return (self.major, self.minor, self.patch, _prerelease_key(self.prerelease))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Version):
            return NotImplemented
        return self._key() == other._key()

    def __lt__(self, other: "Version") -> bool:
        return self._key() < other._key()

    def __hash__(self) -> int:
        return hash(self._key())

    def __str__(self) -> str:
        s = f"{self.major}.{self.minor}.{self.patch}"
        if self.prerelease:
            s += "-" + ".".join(self.prerelease)
        if self.build:
            s += "+" + ".".join(self.build)
        return s


def parse_version(s: str) -> Version:
    """Parse a strict semver string; raises MalformedVersion otherwise."""
    m = _VERSION_RE.match(s)
    if not m:
        raise MalformedVersion(f"not a semver version: {s!r}")
    major, minor, patch, pre, build = m.groups()
    return Version(
        int(major),
        int(minor),
        int(patch),
        tuple(pre.split(".")) if pre else (),
        tuple(build.split(".")) if build else (),
    )


def compare(a: Version, b: Version) -> int:
    """Total order: -1|0|1. Build metadata is ignored."""
    ka, kb = a._key(), b._key()
    return -1 if ka < kb else (0 if ka == kb else 1)


@dataclass(frozen=True)
class Comparator:
    """A single bound on the candidate version X, e.g. ``>=13.0.1``."""

    op: str  # one of OPS
    bound: Version

    def matches(self, v: Version) -> bool:
        c = compare(v, self.bound)
        if self.op == ">=":
            return c >= 0
        if self.op == "<=":
            return c <= 0
        if self.op == ">":
            return c > 0
        if self.op == "<":
            return c < 0
        return c == 0

    def __str__(self) -> str:
        return f"{self.op}{self.bound}"


@dataclass(frozen=True)
class ConstraintDNF:
    """Disjunction of conjunctions of comparators.

    An empty conjunct is universally true (modulo prerelease gating); the
    disjunct list is never empty.
    """

    disjuncts: tuple[tuple[Comparator, ...], ...] = field(default=((),))

    def __post_init__(self):
        if not self.disjuncts:
            raise ValueError("ConstraintDNF requires at least one disjunct")

    def to_text(self) -> str:
        """Canonical serialization; parse_constraint() round-trips it."""
        return "||".join(
            " ".join(str(c) for c in conj) if conj else "*" for conj in self.disjuncts
        )

    def __str__(self) -> str:
        return self.to_text()


def satisfies(v: Version, c: ConstraintDNF) -> bool:
    """True iff some conjunct has every comparator true of v.

    A prerelease version additionally requires that the satisfied conjunct
    contain a comparator whose bound is a prerelease with the same
    (major, minor, patch) triple.
    """
    for conj in c.disjuncts:
        if all(cmp_.matches(v) for cmp_ in conj):
            if not v.is_prerelease:
                return True
            if any(cmp_.bound.is_prerelease and cmp_.bound.core == v.core for cmp_ in conj):
                return True
    return False


def max_satisfying(vs: Iterable[Version], c: ConstraintDNF) -> Optional[Version]:
    """Greatest version in vs satisfying c, or None."""
    best: Optional[Version] = None
    for v in vs:
        if satisfies(v, c) and (best is None or compare(v, best) > 0):
            best = v
    return best


# --- range-expression parsing ---------------------------------------------

_WILDCARDS = ("x", "X", "*")

# Partial version inside a range: optional v/= prefix, wildcard or omitted
# minor/patch, optional prerelease/build on a full triple.
_PARTIAL_RE = re.compile(
    r"^[v=]?"
    r"(\d+|x|X|\*)"
    r"(?:\.(\d+|x|X|\*))?"
    r"(?:\.(\d+|x|X|\*))?"
    r"(?:-((?:0|[1-9]\d*|\d*[a-zA-Z-][0-9a-zA-Z-]*)"
    r"(?:\.(?:0|[1-9]\d*|\d*[a-zA-Z-][0-9a-zA-Z-]*))*))?"
    r"(?:\+([0-9a-zA-Z-]+(?:\.[0-9a-zA-Z-]+)*))?$"
)

# Lowest possible version; used to express provably-empty ranges like ">*".
_FLOOR = Version(0, 0, 0, ("0",))


@dataclass(frozen=True)
class _Partial:
    major: Optional[int]  # None = wildcard/omitted
    minor: Optional[int]
    patch: Optional[int]
    prerelease: tuple[str, ...]
    build: tuple[str, ...]

    @property
    def is_full(self) -> bool:
        return self.major is not None and self.minor is not None and self.patch is not None

    def floor(self) -> Version:
        return Version(self.major or 0, self.minor or 0, self.patch or 0, self.prerelease)


def _parse_partial(token: str) -> _Partial:
    m = _PARTIAL_RE.match(token)
    if not m:
        raise MalformedRange(f"unparseable range token: {token!r}")
    major_s, minor_s, patch_s, pre, build = m.groups()

    def num(s: Optional[str]) -> Optional[int]:
        if s is None or s in _WILDCARDS:
            return None
        if len(s) > 1 and s[0] == "0":
            raise MalformedRange(f"leading zero in range token: {token!r}")
        return int(s)

    major, minor, patch = num(major_s), num(minor_s), num(patch_s)
    # Anything after the first wildcard/omission is erased.
    if major is None:
        minor = patch = None
    elif minor is None:
        patch = None
    if pre is not None and patch is None:
        raise MalformedRange(f"prerelease on a partial version: {token!r}")
    return _Partial(
        major,
        minor,
        patch,
        tuple(pre.split(".")) if pre else (),
        tuple(build.split(".")) if build else (),
    )


def _bump_major(p: _Partial) -> Version:
    return Version(p.major + 1, 0, 0)


def _bump_minor(p: _Partial) -> Version:
    return Version(p.major, (p.minor or 0) + 1, 0)


def _xrange(p: _Partial) -> list[Comparator]:
    """Bare or '='-prefixed partial: exact match or implied interval."""
    if p.major is None:
        return []
    if p.minor is None:
        return [Comparator(">=", p.floor()), Comparator("<", _bump_major(p))]
    if p.patch is None:
        return [Comparator(">=", p.floor()), Comparator("<", _bump_minor(p))]
    return [Comparator("=", Version(p.major, p.minor, p.patch, p.prerelease, p.build))]


def _tilde(p: _Partial) -> list[Comparator]:
    if p.major is None:
        return []
    if p.minor is None:
        return [Comparator(">=", p.floor()), Comparator("<", _bump_major(p))]
    return [Comparator(">=", p.floor()), Comparator("<", _bump_minor(p))]


def _caret(p: _Partial) -> list[Comparator]:
    if p.major is None:
        return []
    lower = Comparator(">=", p.floor())
    if p.minor is None:
        upper = _bump_major(p) if p.major > 0 else Version(1, 0, 0)
    elif p.patch is None:
        if p.major > 0:
            upper = _bump_major(p)
        else:
            upper = _bump_minor(p)
    elif p.major > 0:
        upper = _bump_major(p)
    elif p.minor > 0:
        upper = _bump_minor(p)
    else:
        upper = Version(0, 0, p.patch + 1)
    return [lower, Comparator("<", upper)]


def _primitive(op: str, p: _Partial) -> list[Comparator]:
    if op == "=":
        return _xrange(p)
    if p.is_full:
        v = Version(p.major, p.minor, p.patch, p.prerelease, p.build)
        return [Comparator(op, v)]
    if p.major is None:
        # >* and <* are satisfiable by nothing; >=* and <=* by everything.
        if op in (">", "<"):
            return [Comparator("<", _FLOOR)]
        return []
    if op == ">":
        return [Comparator(">=", _bump_major(p) if p.minor is None else _bump_minor(p))]
    if op == "<":
        return [Comparator("<", p.floor())]
    if op == ">=":
        return [Comparator(">=", p.floor())]
    # op == "<="
    return [Comparator("<", _bump_major(p) if p.minor is None else _bump_minor(p))]


def _hyphen(lo: _Partial, hi: _Partial) -> list[Comparator]:
    out: list[Comparator] = []
    if lo.major is not None:
        out.append(Comparator(">=", lo.floor()))
    if hi.major is None:
        pass
    elif hi.minor is None:
        out.append(Comparator("<", _bump_major(hi)))
    elif hi.patch is None:
        out.append(Comparator("<", _bump_minor(hi)))
    else:
        out.append(
            Comparator("<=", Version(hi.major, hi.minor, hi.patch, hi.prerelease, hi.build))
        )
    return out


_OP_SPACE_RE = re.compile(r"(<=|>=|[<>=~^])\s+(?=[v=\dxX*])")


def _parse_conjunct(range_str: str) -> tuple[Comparator, ...]:
    # Attach bare operators to the version that follows them, then split.
    normalized = _OP_SPACE_RE.sub(r"\1", range_str.strip())
    tokens = normalized.split()
    if not tokens:
        return ()

    if "-" in tokens:
        if len(tokens) != 3 or tokens[1] != "-":
            raise MalformedRange(f"malformed hyphen range: {range_str!r}")
        return tuple(_hyphen(_parse_partial(tokens[0]), _parse_partial(tokens[2])))

    comparators: list[Comparator] = []
    for tok in tokens:
        if tok.startswith((">=", "<=")):
            comparators.extend(_primitive(tok[:2], _parse_partial(tok[2:])))
        elif tok.startswith((">", "<", "=")):
            comparators.extend(_primitive(tok[0], _parse_partial(tok[1:])))
        elif tok.startswith("~"):
            comparators.extend(_tilde(_parse_partial(tok[1:])))
        elif tok.startswith("^"):
            comparators.extend(_caret(_parse_partial(tok[1:])))
        else:
            comparators.extend(_xrange(_parse_partial(tok)))
    return tuple(comparators)


def parse_constraint(s: str) -> ConstraintDNF:
    """Parse a range expression into DNF.

    Supported grammar: exact versions, =, <, <=, >, >=, caret, tilde,
    x-ranges/wildcards, hyphen ranges, space-conjunction and
    ||-disjunction. Anything else (URLs, git refs, dist-tags) raises
    MalformedRange; ranges denoting empty sets parse fine.
    """
    if not isinstance(s, str):
        raise MalformedRange(f"range must be a string, got {type(s).__name__}")
    return ConstraintDNF(tuple(_parse_conjunct(part) for part in s.split("||")))
