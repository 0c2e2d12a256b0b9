"""Seeded random generators for versions and range expressions.

Used by the property tests and the acceptance run; emits only the supported
range grammar (exact, comparators, caret, tilde, x-ranges, hyphen,
space-conjunction, ||-disjunction).
"""

from __future__ import annotations

import random

_PRE_IDS = ["alpha", "beta", "rc", "0", "1", "2", "11", "x-1"]


def random_version(rng: random.Random, max_component: int = 20) -> str:
    s = f"{rng.randint(0, max_component)}.{rng.randint(0, max_component)}.{rng.randint(0, max_component)}"
    if rng.random() < 0.3:
        s += "-" + ".".join(rng.choice(_PRE_IDS) for _ in range(rng.randint(1, 3)))
    if rng.random() < 0.1:
        s += "+build." + str(rng.randint(0, 9))
    return s


def _random_partial(rng: random.Random) -> str:
    major = rng.randint(0, 20)
    roll = rng.random()
    if roll < 0.15:
        return rng.choice(["*", "x", str(major)]) if rng.random() < 0.5 else str(major)
    if roll < 0.3:
        return f"{major}.{rng.choice(['x', 'X', '*', rng.randint(0, 20)])}"
    s = f"{major}.{rng.randint(0, 20)}.{rng.randint(0, 20)}"
    if rng.random() < 0.2:
        s += "-" + ".".join(rng.choice(_PRE_IDS) for _ in range(rng.randint(1, 2)))
    return s


def _random_simple(rng: random.Random) -> str:
    kind = rng.random()
    p = _random_partial(rng)
    if kind < 0.2:
        return p
    if kind < 0.4:
        return rng.choice(["^", "~"]) + p
    if kind < 0.8:
        return rng.choice([">", "<", ">=", "<=", "="]) + p
    return rng.choice(["*", "x", ""])


def random_range(rng: random.Random) -> str:
    ranges = []
    for _ in range(rng.randint(1, 3)):
        if rng.random() < 0.15:
            lo = f"{rng.randint(0, 20)}.{rng.randint(0, 20)}.{rng.randint(0, 20)}"
            hi = _random_partial(rng)
            ranges.append(f"{lo} - {hi}")
        else:
            ranges.append(" ".join(_random_simple(rng) for _ in range(rng.randint(1, 2))))
    return " || ".join(ranges)
