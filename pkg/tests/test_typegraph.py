"""Type graph construction and producer/consumer/start queries."""
import pytest

from tgfuzz.model import BOOL, U8, U32, Dt, Vec, is_hot_potato
from tgfuzz.typegraph import UnknownType, build_type_graph, canonicalize, dump_dot

from conftest import BENCHMARKS, load_bench

USDC = Dt("coins", "USDC", ())


def graph_of(name):
    _cfg, pkg, world = load_bench(name)
    return pkg, build_type_graph(pkg, world.pool_types())


def test_flashloan_nodes_and_edges():
    pkg, g = graph_of("flashloan")
    assert {"u64", "std::Coin", "flashloan::Receipt"} <= set(g.nodes)
    assert g.nodes["flashloan::Receipt"].hot_potato
    assert not g.nodes["std::Coin"].hot_potato
    loan = pkg.function("flashloan", "loan")
    repay = pkg.function("flashloan", "repay")
    # u64 -> loan
    assert any(e.fn is loan for e in g.consume_edges["u64"])
    # loan -> Coin<T>, loan -> Receipt<T>
    assert any(e.fn is loan for e in g.produce_edges["std::Coin"])
    assert any(e.fn is loan for e in g.produce_edges["flashloan::Receipt"])
    # Coin<T> -> repay, Receipt<T> -> repay
    assert any(e.fn is repay for e in g.consume_edges["std::Coin"])
    assert any(e.fn is repay for e in g.consume_edges["flashloan::Receipt"])


def test_producers_of_receipt():
    pkg, g = graph_of("flashloan")
    hits = g.producers_of(Dt("flashloan", "Receipt", (USDC,)))
    assert [(f.qualified, st) for f, st in hits] == [("flashloan::loan", (USDC,))]


def test_producers_of_bool_empty():
    _pkg, g = graph_of("flashloan")
    assert g.producers_of(BOOL) == []


def test_consumers_of_receipt():
    pkg, g = graph_of("flashloan")
    hits = g.consumers_of(Dt("flashloan", "Receipt", (USDC,)))
    assert [(f.qualified, pos, st) for f, pos, st in hits] == \
        [("flashloan::repay", 1, (USDC,))]


def test_consumers_of_absent_type():
    _pkg, g = graph_of("flashloan")
    with pytest.raises(UnknownType):
        g.consumers_of(Vec(U8))


def test_flashswap_coin_producers_and_consumers():
    pkg, g = graph_of("flashswap")
    coin = Dt("std", "Coin", (U32,))
    producers = {f.qualified for f, _ in g.producers_of(coin)}
    assert {"flashswap::loan", "flashswap::split_coin", "flashswap::swap"} <= producers
    split = pkg.function("flashswap", "split_coin")
    # split_coin outputs Coin<T> at two positions
    uses = [u for e in g.produce_edges["std::Coin"] if e.fn is split
            for u in e.uses]
    assert len(uses) == 2
    consumers = {(f.qualified, pos) for f, pos, _ in g.consumers_of(coin)}
    assert {("flashswap::repay", 0), ("flashswap::split_coin", 0),
            ("flashswap::swap", 0)} <= consumers


def test_start_functions_flashloan():
    pkg, g = graph_of("flashloan")
    starts = [f.qualified for f in g.start_functions() if f.module == "flashloan"]
    assert starts == ["flashloan::loan"]


def test_start_functions_empty_graph():
    from tgfuzz.parser import parse_package
    pkg = parse_package("")
    g = build_type_graph(pkg, ())
    assert [f for f in g.start_functions() if f.module != "std"] == []


def test_start_functions_oracle_amm_pool_reachable():
    _pkg, g = graph_of("oracle_amm")
    starts = {f.qualified for f in g.start_functions()}
    assert "amm::get_oracle" in starts
    assert "amm::swap" in starts


def test_node_classification_matches_decl():
    for name in BENCHMARKS:
        _cfg, pkg, world = load_bench(name)
        g = build_type_graph(pkg, world.pool_types())
        for d in pkg.all_datatypes():
            key = f"{d.module}::{d.name}"
            if key in g.nodes:
                assert g.nodes[key].hot_potato == is_hot_potato(d), key


def test_edge_completeness():
    # every non-literal input of every public function appears among the
    # consume edges exactly once per position, dually for outputs
    from tgfuzz.typegraph import is_literal_tag
    for name in BENCHMARKS:
        _cfg, pkg, world = load_bench(name)
        g = build_type_graph(pkg, world.pool_types())
        for fn in g.functions:
            got_in = sorted(pos for edges in g.consume_edges.values()
                            for e in edges if e.fn is fn
                            for pos, _pat, _mode in e.uses)
            non_literal = [pos for pos, (tag, _m) in enumerate(fn.inputs)
                           if not is_literal_tag(tag)]
            assert got_in == non_literal, (name, fn.qualified)
            got_out = sorted(pos for edges in g.produce_edges.values()
                             for e in edges if e.fn is fn
                             for pos, _pat in e.uses)
            assert got_out == list(range(len(fn.outputs))), (name, fn.qualified)


def test_substitution_annotation_soundness():
    # the pattern stored on every edge is exactly the declared type at
    # that position, and it canonicalizes to the node key it hangs off
    for name in BENCHMARKS:
        _cfg, pkg, world = load_bench(name)
        g = build_type_graph(pkg, world.pool_types())
        for key, edges in g.produce_edges.items():
            for e in edges:
                for pos, pattern in e.uses:
                    assert pattern == e.fn.outputs[pos]
                    assert canonicalize(pattern)[0] == key
        for key, edges in g.consume_edges.items():
            for e in edges:
                for pos, pattern, mode in e.uses:
                    assert pattern == e.fn.inputs[pos][0]
                    assert mode == e.fn.inputs[pos][1]
                    assert canonicalize(pattern)[0] == key


def test_dot_dump_mentions_hot_potato():
    _pkg, g = graph_of("flashloan")
    dot = dump_dot(g)
    assert dot.startswith("digraph")
    assert "flashloan::Receipt" in dot
    assert "doublecircle" in dot  # hot potatoes drawn double-circled
