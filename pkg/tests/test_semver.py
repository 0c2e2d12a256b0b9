from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from registry_follower.errors import MalformedRange, MalformedVersion
from registry_follower.semver import (
    Comparator,
    ConstraintDNF,
    Version,
    compare,
    max_satisfying,
    parse_constraint,
    parse_version,
    satisfies,
)

from . import randgen, semver_oracle


def dnf_pairs(c: ConstraintDNF):
    """ConstraintDNF -> [[(op, bound-string), ...], ...] for the oracle."""
    return [[(cmp_.op, str(cmp_.bound)) for cmp_ in conj] for conj in c.disjuncts]


# --- parse_version ---------------------------------------------------------


def test_parse_plain():
    v = parse_version("13.0.1")
    assert (v.major, v.minor, v.patch) == (13, 0, 1)
    assert v.prerelease == () and v.build == ()


def test_parse_prerelease_and_build():
    v = parse_version("1.0.0-alpha.1+build5")
    assert v.prerelease == ("alpha", "1")
    assert v.build == ("build5",)
    assert str(v) == "1.0.0-alpha.1+build5"


@pytest.mark.parametrize(
    "bad",
    [
        "1.2",
        "1",
        "",
        "1.2.3.4",
        "a.b.c",
        "01.2.3",
        "1.02.3",
        "1.2.3-",
        "1.2.3-a..b",
        "1.2.3-01",
        "1.2.3+",
        "v1.2.3",
        "1.2.3 ",
    ],
)
def test_parse_rejects(bad):
    with pytest.raises(MalformedVersion):
        parse_version(bad)


# --- compare ---------------------------------------------------------------


def test_compare_reflexive():
    assert compare(parse_version("1.0.0"), parse_version("1.0.0")) == 0


def test_prerelease_below_release():
    assert compare(parse_version("1.0.0-alpha"), parse_version("1.0.0")) == -1


def test_numeric_before_alphanumeric():
    assert compare(parse_version("1.0.0-alpha.1"), parse_version("1.0.0-alpha.beta")) == -1


def test_semver_precedence_chain():
    chain = [
        "1.0.0-alpha",
        "1.0.0-alpha.1",
        "1.0.0-alpha.beta",
        "1.0.0-beta",
        "1.0.0-beta.2",
        "1.0.0-beta.11",
        "1.0.0-rc.1",
        "1.0.0",
    ]
    parsed = [parse_version(s) for s in chain]
    for a, b in zip(parsed, parsed[1:]):
        assert compare(a, b) == -1
        assert compare(b, a) == 1


def test_build_ignored():
    assert compare(parse_version("1.0.0+a"), parse_version("1.0.0+b.c")) == 0
    assert parse_version("1.0.0+a") == parse_version("1.0.0")


# --- parse_constraint ------------------------------------------------------


def test_paper_example_dnf():
    c = parse_constraint("12 || ~13.0.1")
    assert c == ConstraintDNF(
        (
            (
                Comparator(">=", Version(12, 0, 0)),
                Comparator("<", Version(13, 0, 0)),
            ),
            (
                Comparator(">=", Version(13, 0, 1)),
                Comparator("<", Version(13, 1, 0)),
            ),
        )
    )


@pytest.mark.parametrize(
    ("raw", "canonical"),
    [
        ("^1.2.3", ">=1.2.3 <2.0.0"),
        ("^0.2.3", ">=0.2.3 <0.3.0"),
        ("^0.0.3", ">=0.0.3 <0.0.4"),
        ("^1.2.x", ">=1.2.0 <2.0.0"),
        ("^0.0.x", ">=0.0.0 <0.1.0"),
        ("^0.0", ">=0.0.0 <0.1.0"),
        ("^1.x", ">=1.0.0 <2.0.0"),
        ("^0.x", ">=0.0.0 <1.0.0"),
        ("^1.2.3-beta.2", ">=1.2.3-beta.2 <2.0.0"),
        ("~1.2.3", ">=1.2.3 <1.3.0"),
        ("~1.2", ">=1.2.0 <1.3.0"),
        ("~1", ">=1.0.0 <2.0.0"),
        ("~0.2.3", ">=0.2.3 <0.3.0"),
        ("~1.2.3-beta.2", ">=1.2.3-beta.2 <1.3.0"),
        ("1.2.3", "=1.2.3"),
        ("=1.2.3", "=1.2.3"),
        ("v1.2.3", "=1.2.3"),
        ("1", ">=1.0.0 <2.0.0"),
        ("1.x", ">=1.0.0 <2.0.0"),
        ("1.2", ">=1.2.0 <1.3.0"),
        ("1.2.x", ">=1.2.0 <1.3.0"),
        ("1.X", ">=1.0.0 <2.0.0"),
        ("1.*", ">=1.0.0 <2.0.0"),
        ("*", "*"),
        ("", "*"),
        ("x", "*"),
        ("1.2.3 - 2.3.4", ">=1.2.3 <=2.3.4"),
        ("1.2 - 2.3.4", ">=1.2.0 <=2.3.4"),
        ("1.2.3 - 2.3", ">=1.2.3 <2.4.0"),
        ("1.2.3 - 2", ">=1.2.3 <3.0.0"),
        (">1.2.3", ">1.2.3"),
        (">1.2", ">=1.3.0"),
        (">1", ">=2.0.0"),
        ("<1.2", "<1.2.0"),
        ("<=1.2", "<1.3.0"),
        ("<=1", "<2.0.0"),
        (">=1.2", ">=1.2.0"),
        (">=1.2.3 <2.0.0", ">=1.2.3 <2.0.0"),
        (">= 1.2.3", ">=1.2.3"),
        ("~ 1.2.3", ">=1.2.3 <1.3.0"),
        (">*", "<0.0.0-0"),
        (">=*", "*"),
        ("12 || ~13.0.1", ">=12.0.0 <13.0.0||>=13.0.1 <13.1.0"),
    ],
)
def test_canonical_forms(raw, canonical):
    assert parse_constraint(raw).to_text() == canonical


@pytest.mark.parametrize(
    "bad",
    [
        "latest",
        "git+https://example.com/repo.git",
        "file:../local",
        "1.2.3 - 2 - 3",
        ">>1.0.0",
        "^1.2.3!",
        "01.2.3",
        "1.2.3-",
    ],
)
def test_malformed_ranges(bad):
    with pytest.raises(MalformedRange):
        parse_constraint(bad)


def test_empty_set_ranges_parse():
    # Parses fine, satisfiable by nothing.
    c = parse_constraint(">2.0.0 <1.0.0")
    assert not satisfies(parse_version("1.5.0"), c)
    assert not satisfies(parse_version("0.1.0"), c)


def test_round_trip_structural():
    for raw in ["12 || ~13.0.1", "^1.2.3", "*", ">=1.0.0 <2.0.0 || 3.x", "1.2.3 - 2"]:
        c = parse_constraint(raw)
        assert parse_constraint(c.to_text()) == c


# --- satisfies / max_satisfying -------------------------------------------


def test_satisfies_paper_range():
    c = parse_constraint("12 || ~13.0.1")
    assert satisfies(parse_version("13.0.5"), c)
    assert satisfies(parse_version("12.0.0"), c)
    assert satisfies(parse_version("12.9.9"), c)
    assert not satisfies(parse_version("13.1.0"), c)
    assert not satisfies(parse_version("13.0.0"), c)
    assert not satisfies(parse_version("11.9.9"), c)


def test_wildcard_satisfies_releases_only():
    c = parse_constraint("*")
    assert satisfies(parse_version("0.0.1"), c)
    assert satisfies(parse_version("99.99.99"), c)
    assert not satisfies(parse_version("1.0.0-beta"), c)


def test_prerelease_gating():
    c = parse_constraint("^1.0.0-alpha")
    assert satisfies(parse_version("1.0.0-beta"), c)
    # Different triple: gated out even though the comparators hold.
    assert not satisfies(parse_version("1.2.0-beta"), c)
    assert satisfies(parse_version("1.2.0"), c)


def test_max_satisfying_paper_range():
    vs = [parse_version(s) for s in ["12.0.0", "13.0.1", "13.0.5", "13.1.0"]]
    assert max_satisfying(vs, parse_constraint("12 || ~13.0.1")) == parse_version("13.0.5")


def test_max_satisfying_empty_domain():
    assert max_satisfying([], parse_constraint("*")) is None


def test_max_satisfying_gates_prereleases():
    vs = [parse_version("1.0.0-beta")]
    assert max_satisfying(vs, parse_constraint("^1.0.0")) is None


# --- properties against the independent oracle -----------------------------

versions_st = st.builds(
    lambda m, n, p, pre: f"{m}.{n}.{p}" + (f"-{'.'.join(pre)}" if pre else ""),
    st.integers(0, 20),
    st.integers(0, 20),
    st.integers(0, 20),
    st.lists(st.sampled_from(["alpha", "beta", "rc", "0", "1", "11"]), max_size=2),
)


@given(versions_st, versions_st)
def test_compare_agrees_with_oracle(a, b):
    assert compare(parse_version(a), parse_version(b)) == semver_oracle.cmp_versions(a, b)


@given(versions_st, versions_st, versions_st)
def test_total_order(a, b, c):
    va, vb, vc = parse_version(a), parse_version(b), parse_version(c)
    assert compare(va, vb) == -compare(vb, va)
    if compare(va, vb) <= 0 and compare(vb, vc) <= 0:
        assert compare(va, vc) <= 0


@given(st.lists(versions_st, min_size=1, max_size=8), st.integers())
def test_sorting_stable_under_permutation(vs, seed):
    parsed = [parse_version(s) for s in vs]
    shuffled = parsed[:]
    random.Random(seed).shuffle(shuffled)
    assert sorted(map(str, parsed), key=lambda s: parse_version(s)._key()) == sorted(
        map(str, shuffled), key=lambda s: parse_version(s)._key()
    )


@settings(max_examples=300)
@given(st.integers(0, 2**32))
def test_satisfies_agrees_with_brute_force(seed):
    rng = random.Random(seed)
    raw = randgen.random_range(rng)
    c = parse_constraint(raw)
    pairs = dnf_pairs(c)
    for _ in range(5):
        vstr = randgen.random_version(rng)
        assert satisfies(parse_version(vstr), c) == semver_oracle.dnf_satisfies(vstr, pairs), (
            raw,
            vstr,
        )


@settings(max_examples=200)
@given(st.integers(0, 2**32))
def test_max_satisfying_agrees_with_brute_force(seed):
    rng = random.Random(seed)
    raw = randgen.random_range(rng)
    c = parse_constraint(raw)
    pairs = dnf_pairs(c)
    candidates = [randgen.random_version(rng) for _ in range(rng.randint(0, 12))]
    got = max_satisfying([parse_version(v) for v in candidates], c)
    expected = semver_oracle.dnf_max_satisfying(candidates, pairs)
    if expected is None:
        assert got is None
    else:
        assert got is not None and compare(got, parse_version(expected)) == 0


@settings(max_examples=200)
@given(st.integers(0, 2**32))
def test_round_trip_preserves_satisfaction(seed):
    rng = random.Random(seed)
    raw = randgen.random_range(rng)
    c = parse_constraint(raw)
    reparsed = parse_constraint(c.to_text())
    assert reparsed == c
    for _ in range(3):
        v = parse_version(randgen.random_version(rng))
        assert satisfies(v, c) == satisfies(v, reparsed)
