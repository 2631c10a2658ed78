"""Type graph over a package's public surface.

Nodes are type patterns (every primitive, every datatype declaration,
plus vector patterns that appear in public signatures) and public
functions.  An edge connects a function to each distinct type pattern
among its inputs (consumption) and outputs (production), annotated with
the positions it occupies in the signature.  Generic signatures keep
their type parameters; matching a concrete tag against an edge yields a
substitution for the callee's parameters.

The graph answers the two planning queries transaction synthesis is
built on: who can produce a value of this type, and who can consume
one.  Pool types are part of the graph so that entry-point analysis
can treat objects available at genesis as free inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .model import (
    PRIMS, Dt, FunctionDecl, Package, Param, Prim, TypeTag, Vec, is_hot_potato,
)


class UnknownType(Exception):
    pass


def canonicalize(tag: TypeTag) -> tuple[str, tuple[TypeTag, ...]]:
    """Node key plus the bindings stripped out of it.

    Datatype arguments are replaced wholesale, so every instantiation of
    a declaration shares one node: Coin<SUI> and Coin<T0> both key to
    "std::Coin".  Vector keys nest on the element pattern.
    """
    if isinstance(tag, Prim):
        return tag.name, ()
    if isinstance(tag, Dt):
        return f"{tag.module}::{tag.name}", tag.args
    if isinstance(tag, Vec):
        ekey, ebind = canonicalize(tag.elem)
        return f"vector<{ekey}>", ebind
    raise UnknownType(f"bare type parameter {tag} has no node")


def unify(pattern: TypeTag, concrete: TypeTag,
          subst: dict[int, TypeTag] | None = None) -> dict[int, TypeTag] | None:
    """Match a signature pattern against a concrete tag.

    Returns a substitution for the pattern's type parameters, or None.
    """
    if subst is None:
        subst = {}
    if isinstance(pattern, Param):
        bound = subst.get(pattern.index)
        if bound is None:
            subst[pattern.index] = concrete
            return subst
        return subst if bound == concrete else None
    if isinstance(pattern, Prim):
        return subst if pattern == concrete else None
    if isinstance(pattern, Vec):
        if not isinstance(concrete, Vec):
            return None
        return unify(pattern.elem, concrete.elem, subst)
    if isinstance(pattern, Dt):
        if (not isinstance(concrete, Dt) or pattern.module != concrete.module
                or pattern.name != concrete.name or len(pattern.args) != len(concrete.args)):
            return None
        for p, c in zip(pattern.args, concrete.args):
            subst = unify(p, c, subst)
            if subst is None:
                return None
        return subst
    return None


def is_literal_tag(tag: TypeTag) -> bool:
    """Can the harness conjure a value of this type out of thin air."""
    if isinstance(tag, Prim):
        return True
    if isinstance(tag, Vec):
        return isinstance(tag.elem, Prim)
    return False


@dataclass(frozen=True, slots=True)
class TypeNode:
    key: str
    sample: TypeTag      # representative pattern, generic for datatypes
    hot_potato: bool


@dataclass(frozen=True, slots=True)
class Edge:
    fn: FunctionDecl
    node_key: str
    # inputs: (position, pattern, mode); outputs: (position, pattern)
    uses: tuple


@dataclass
class TypeGraph:
    pkg: Package
    pool_types: tuple
    nodes: dict = field(default_factory=dict)          # key -> TypeNode
    functions: list = field(default_factory=list)       # public FunctionDecl, gid order
    consume_edges: dict = field(default_factory=dict)   # key -> [Edge] (type -> fn)
    produce_edges: dict = field(default_factory=dict)   # key -> [Edge] (fn -> type)

    # queries ----------------------------------------------------------

    def node_of(self, tag: TypeTag) -> TypeNode:
        key, _ = canonicalize(tag)
        node = self.nodes.get(key)
        if node is None:
            raise UnknownType(f"no node for type {tag}")
        return node

    def producers_of(self, tag: TypeTag) -> list[tuple[FunctionDecl, tuple]]:
        """Public functions that can output the concrete tag.

        Each hit carries the substitution for the producer's type
        parameters as a tuple indexed by parameter (None = free).
        """
        key = self.node_of(tag).key
        hits: dict[tuple[str, tuple], tuple[FunctionDecl, tuple]] = {}
        for edge in self.produce_edges.get(key, ()):
            for _pos, pattern in edge.uses:
                s = unify(pattern, tag)
                if s is None:
                    continue
                st = tuple(s.get(i) for i in range(edge.fn.type_params))
                hits.setdefault((edge.fn.qualified, st), (edge.fn, st))
        return list(hits.values())

    def consumers_of(self, tag: TypeTag) -> list[tuple[FunctionDecl, int, tuple]]:
        """Public functions with an input (any mode) matching the tag."""
        key = self.node_of(tag).key
        hits: dict[tuple[str, int, tuple], tuple[FunctionDecl, int, tuple]] = {}
        for edge in self.consume_edges.get(key, ()):
            for pos, pattern, _mode in edge.uses:
                s = unify(pattern, tag)
                if s is None:
                    continue
                st = tuple(s.get(i) for i in range(edge.fn.type_params))
                hits.setdefault((edge.fn.qualified, pos, st), (edge.fn, pos, st))
        return list(hits.values())

    def start_functions(self) -> list[FunctionDecl]:
        """Entry points callable with no prior calls.

        Every input must be either literal-expressible or unifiable with
        a pool type under one joint substitution.
        """
        out = []
        for fn in self.functions:
            if self._startable(fn):
                out.append(fn)
        return out

    def _startable(self, fn: FunctionDecl) -> bool:
        per_input: list[list[dict[int, TypeTag]]] = []
        for tag, _mode in fn.inputs:
            if is_literal_tag(tag):
                continue
            cands = []
            for pool_tag in self.pool_types:
                s = unify(tag, pool_tag, {})
                if s is not None:
                    cands.append(s)
            if not cands:
                return False
            per_input.append(cands)
        # joint merge across the pool-bound inputs, capped
        budget = 256

        def merge(idx: int, acc: dict[int, TypeTag]) -> bool:
            nonlocal budget
            if idx == len(per_input):
                return True
            for cand in per_input[idx]:
                if budget <= 0:
                    return False
                budget -= 1
                joined = dict(acc)
                ok = True
                for k, v in cand.items():
                    if joined.setdefault(k, v) != v:
                        ok = False
                        break
                if ok and merge(idx + 1, joined):
                    return True
            return False

        return merge(0, {})


def build_type_graph(pkg: Package, pool_types: tuple = ()) -> TypeGraph:
    g = TypeGraph(pkg=pkg, pool_types=tuple(pool_types))
    for p in PRIMS:
        g.nodes[p] = TypeNode(key=p, sample=Prim(p), hot_potato=False)
    for decl in pkg.all_datatypes():
        sample = Dt(decl.module, decl.name,
                    tuple(Param(i) for i in range(decl.type_params)))
        key, _ = canonicalize(sample)
        g.nodes[key] = TypeNode(key=key, sample=sample, hot_potato=is_hot_potato(decl))

    def ensure_vec_nodes(tag: TypeTag):
        if isinstance(tag, Vec):
            key, _ = canonicalize(tag)
            if key not in g.nodes:
                g.nodes[key] = TypeNode(key=key, sample=tag, hot_potato=False)
            ensure_vec_nodes(tag.elem)
        elif isinstance(tag, Dt):
            for a in tag.args:
                ensure_vec_nodes(a)

    for fn in pkg.all_functions():
        if not fn.public:
            continue
        g.functions.append(fn)
        for tag, _m in fn.inputs:
            ensure_vec_nodes(tag)
        for tag in fn.outputs:
            ensure_vec_nodes(tag)
        by_key_in: dict[str, list] = {}
        for pos, (tag, mode) in enumerate(fn.inputs):
            key, _ = canonicalize(tag)
            by_key_in.setdefault(key, []).append((pos, tag, mode))
        for key, uses in by_key_in.items():
            g.consume_edges.setdefault(key, []).append(
                Edge(fn=fn, node_key=key, uses=tuple(uses)))
        by_key_out: dict[str, list] = {}
        for pos, tag in enumerate(fn.outputs):
            key, _ = canonicalize(tag)
            by_key_out.setdefault(key, []).append((pos, tag))
        for key, uses in by_key_out.items():
            g.produce_edges.setdefault(key, []).append(
                Edge(fn=fn, node_key=key, uses=tuple(uses)))
    for tag in g.pool_types:
        key, _ = canonicalize(tag)
        if key not in g.nodes:
            raise UnknownType(f"pool type {tag} does not occur in the package")
    return g


def dump_dot(g: TypeGraph) -> str:
    """Graphviz rendering: type nodes as ellipses (hot potatoes double
    rimmed), function nodes as boxes, edges labelled with positions."""
    lines = ["digraph typegraph {", "  rankdir=LR;"]
    for key in sorted(g.nodes):
        node = g.nodes[key]
        extra = ", peripheries=2" if node.hot_potato else ""
        lines.append(f'  "{key}" [shape=ellipse{extra}];')
    for fn in g.functions:
        lines.append(f'  "{fn.qualified}" [shape=box];')
    for key in sorted(g.consume_edges):
        for edge in g.consume_edges[key]:
            label = ",".join(str(pos) for pos, _t, _m in edge.uses)
            lines.append(f'  "{key}" -> "{edge.fn.qualified}" [label="{label}"];')
    for key in sorted(g.produce_edges):
        for edge in g.produce_edges[key]:
            label = ",".join(str(pos) for pos, _t in edge.uses)
            lines.append(f'  "{edge.fn.qualified}" -> "{key}" [label="{label}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
