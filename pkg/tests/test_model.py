"""Type algebra: substitution, hot-potato classification, signatures."""
import pytest
from hypothesis import given, strategies as st

from tgfuzz.model import (
    BOOL, U8, U32, U64, ArityError, DatatypeDecl, Dt, Param, Prim, Vec,
    is_hot_potato, signature_of, substitute,
)

from conftest import BENCHMARKS, load_bench


def _decl(abilities, name="X"):
    return DatatypeDecl("m", name, 0, frozenset(abilities), ())


def test_substitute_datatype_arg():
    receipt = Dt("flashloan", "Receipt", (Param(0),))
    assert substitute(receipt, (U32,)) == Dt("flashloan", "Receipt", (U32,))


def test_substitute_no_parameters():
    assert substitute(U64, (BOOL,)) == U64


def test_substitute_nested_vector():
    assert substitute(Vec(Param(0)), (Vec(U8),)) == Vec(Vec(U8))


def test_substitute_out_of_range():
    with pytest.raises(IndexError):
        substitute(Param(2), (U8,))


def test_hot_potato_no_abilities():
    assert is_hot_potato(_decl(()))


def test_hot_potato_drop_store():
    assert not is_hot_potato(_decl(("drop", "store")))


def test_hot_potato_store_alone():
    assert not is_hot_potato(_decl(("store",)))


def test_hot_potato_xor_invariant_over_benchmarks():
    for name in BENCHMARKS:
        _cfg, pkg, _world = load_bench(name)
        for d in pkg.all_datatypes():
            assert is_hot_potato(d) != bool(d.abilities & {"drop", "store"}), \
                f"{name}: {d.module}::{d.name}"


def test_signature_of_loan():
    _cfg, pkg, _world = load_bench("flashloan")
    loan = pkg.function("flashloan", "loan")
    usdc = Dt("coins", "USDC", ())
    ins, outs = signature_of(loan, (usdc,))
    assert ins == (U64,)
    assert outs == (Dt("std", "Coin", (usdc,)),
                    Dt("flashloan", "Receipt", (usdc,)))


def test_signature_of_monomorphic_identity():
    _cfg, pkg, _world = load_bench("oracle_amm")
    fn = pkg.function("amm", "get_oracle")
    ins, outs = signature_of(fn, ())
    assert ins == tuple(t for t, _ in fn.inputs)
    assert outs == fn.outputs


def test_signature_of_arity_mismatch():
    _cfg, pkg, _world = load_bench("flashloan")
    repay = pkg.function("flashloan", "repay")
    with pytest.raises(ArityError):
        signature_of(repay, (U8, U8))


# property: substituting a concrete tag is the identity, so substitute
# is idempotent once all parameters are gone

prims = st.sampled_from([Prim(n) for n in ("bool", "u8", "u32", "u64", "u256")])


def tags(max_leaves=4):
    return st.recursive(
        prims | st.builds(Param, st.integers(0, 2)),
        lambda inner: st.builds(Vec, inner)
        | st.builds(lambda a: Dt("m", "D", (a,)), inner),
        max_leaves=max_leaves)


@given(tags(), st.tuples(prims, prims, prims))
def test_substitute_idempotent_on_concrete(tag, args):
    once = substitute(tag, args)
    assert substitute(once, args) == once
