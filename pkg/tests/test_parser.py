"""Package text format: parsing, verification, serialization round-trip."""
import pytest
from hypothesis import given, strategies as st

from tgfuzz.model import DatatypeDecl, FunctionDecl, Module, Package, Prim
from tgfuzz.parser import ParseError, parse_package, serialize_package
from tgfuzz.stdlib import std_module
from tgfuzz.verifier import VerifyError

from conftest import BENCHMARKS, load_bench


def test_parse_flashloan_module_counts():
    _cfg, pkg, _world = load_bench("flashloan")
    mod = pkg.modules["flashloan"]
    assert len(mod.datatypes) == 2
    assert len(mod.functions) == 2


def test_parse_empty_document():
    pkg = parse_package("")
    assert [m for m in pkg.modules if m != "std"] == []


def test_verify_rejects_body_without_ret():
    text = """
module m

public fn f() -> (u64) {
    locals: u64
    ld_const u64 1
    store_local 0
    copy_local 0
}
"""
    with pytest.raises(VerifyError, match=r"m::f.*pc 2"):
        parse_package(text)


def test_parse_rejects_unknown_opcode():
    text = """
module m

public fn f() {
    frobnicate 3
    ret
}
"""
    with pytest.raises(ParseError, match="unknown opcode"):
        parse_package(text)


def test_round_trip_all_benchmarks():
    for name in BENCHMARKS:
        cfg, _pkg, _world = load_bench(name)
        text = cfg.package.read_text()
        pkg = parse_package(text)
        out = serialize_package(pkg)
        again = parse_package(out)
        assert serialize_package(again) == out, name


# random well-formed packages: serialize then parse must be a fixpoint

_names = st.sampled_from(["Alpha", "Beta", "Gamma", "Delta"])
_prims = st.sampled_from([Prim("u8"), Prim("u64"), Prim("u256"), Prim("bool")])
_abilities = st.sets(st.sampled_from(["copy", "drop", "store", "key"]),
                     max_size=3).map(frozenset)


@st.composite
def _packages(draw):
    mods = {"std": std_module()}
    mod = Module("m")
    for name in draw(st.sets(_names, min_size=1, max_size=3)):
        nfields = draw(st.integers(0, 2))
        fields = tuple((f"f{i}", draw(_prims)) for i in range(nfields))
        ab = draw(_abilities)
        if "copy" in ab:
            ab = ab | {"drop"}
        mod.datatypes[name] = DatatypeDecl("m", name, 0, ab, fields)
    nouts = draw(st.integers(0, 2))
    outs = tuple(draw(_prims.filter(lambda p: p.name != "bool"))
                 for _ in range(nouts))
    body = tuple(("ld_const", t, 1) for t in outs) + (("ret",),)
    mod.functions["f"] = FunctionDecl("m", "f", True, 0, (), outs, (), body)
    mods["m"] = mod
    return Package(mods)


@given(_packages())
def test_round_trip_random_packages(pkg):
    text = serialize_package(pkg)
    again = parse_package(text)
    assert serialize_package(again) == text
