"""Transaction synthesis over the type graph.

Generation works backward from a target function: every non-literal
input must come from a pool object or from another call's output, and
every hot potato the growing call set produces must find a consumer.
The intermediate form is a trace: call occurrences wired by value
edges, with the callee type parameters kept as unification variables
for as long as possible so the wiring is decided on type *shapes* and
the concrete instantiation is a separate, cheap step.

Mutation reuses the same machinery on a cloned trace: tweak the
literal leaves, extend a dangling output with a consumer, splice in an
unrelated call, or delete a call and let the deletion cascade to
whatever the linearity rules orphan.  A mutator returns None when the
trace offers it nothing to do; callers fall back to another one.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .model import (
    BOOL, BY_VALUE, PRIM_BITS, PRIMS,
    Dt, FunctionDecl, Package, Param, Prim, TypeTag, Vec,
    is_hot_potato, signature_of,
)
from .typegraph import TypeGraph, canonicalize, is_literal_tag
from .vm import (
    CallSpec, Lit, LitVec, PoolRef, ResultRef, Transaction, World,
)


class Exhausted(Exception):
    """Construction gave up within its attempt budget."""


class NoAssignment(Exception):
    """A free type variable has no ground candidate to take."""


class PoolMiss(Exception):
    """Instantiation needed a pool object that the world lacks."""


class TxTypeError(Exception):
    """A transaction failed static checking.

    call_index / arg_index point at the offender; arg_index is -1 when
    the problem is not tied to one argument.
    """

    def __init__(self, call_index: int, arg_index: int, msg: str):
        at = f"call {call_index}"
        if arg_index >= 0:
            at += f" arg {arg_index}"
        super().__init__(f"{at}: {msg}")
        self.call_index = call_index
        self.arg_index = arg_index


class _Dead(Exception):
    # internal: abandon the current construction attempt
    pass


# --- traces ------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class TVar:
    """Unification variable standing for one occurrence's type parameter."""
    sid: int


@dataclass(frozen=True, slots=True)
class CallOcc:
    sid: int
    fn: FunctionDecl
    tvars: tuple  # one TVar per fn type parameter


@dataclass(slots=True)
class ValOcc:
    """One output value: who makes it and who (if anyone) takes it."""
    producer: tuple           # (occ sid, output position)
    consumer: tuple | None    # (occ sid, input position), by value


@dataclass
class GraphTrace:
    occs: list = field(default_factory=list)
    vals: list = field(default_factory=list)
    slots: dict = field(default_factory=dict)   # (sid, pos) -> slot tuple
    subst: dict = field(default_factory=dict)   # tvar sid -> type
    lits: dict = field(default_factory=dict)    # (sid, pos) -> pinned value
    pools: dict = field(default_factory=dict)   # (sid, pos) -> pinned obj id
    next_sid: int = 0

    # slots are ("lit",) | ("pool",) | ("val", index into vals)

    def occ(self, sid: int) -> CallOcc:
        for o in self.occs:
            if o.sid == sid:
                return o
        raise KeyError(sid)

    def val_index(self, sid: int, out: int) -> int:
        for i, v in enumerate(self.vals):
            if v.producer == (sid, out):
                return i
        raise KeyError((sid, out))

    def clone(self) -> "GraphTrace":
        return GraphTrace(
            occs=list(self.occs),
            vals=[ValOcc(v.producer, v.consumer) for v in self.vals],
            slots=dict(self.slots),
            subst=dict(self.subst),
            lits=dict(self.lits),
            pools=dict(self.pools),
            next_sid=self.next_sid,
        )


# --- unification over trace types ---------------------------------------
#
# Trace types are TypeTags whose leaves may be TVars.  Params never
# appear here: signatures are instantiated with the occurrence's tvars
# before anything touches them.


def _inst(tag, tvars):
    if isinstance(tag, Param):
        return tvars[tag.index]
    if isinstance(tag, Vec):
        return Vec(_inst(tag.elem, tvars))
    if isinstance(tag, Dt) and tag.args:
        return Dt(tag.module, tag.name, tuple(_inst(a, tvars) for a in tag.args))
    return tag


def resolve(t, subst):
    while isinstance(t, TVar):
        nxt = subst.get(t.sid)
        if nxt is None:
            return t
        t = nxt
    return t


def walk(t, subst):
    """Deep resolution: substitute bound tvars everywhere."""
    t = resolve(t, subst)
    if isinstance(t, Vec):
        return Vec(walk(t.elem, subst))
    if isinstance(t, Dt) and t.args:
        return Dt(t.module, t.name, tuple(walk(a, subst) for a in t.args))
    return t


def _occurs(v: TVar, t, subst) -> bool:
    t = resolve(t, subst)
    if isinstance(t, TVar):
        return t.sid == v.sid
    if isinstance(t, Vec):
        return _occurs(v, t.elem, subst)
    if isinstance(t, Dt):
        return any(_occurs(v, a, subst) for a in t.args)
    return False


def _bind(v: TVar, t, subst, trail) -> bool:
    if _occurs(v, t, subst):
        return False
    subst[v.sid] = t
    trail.append(v.sid)
    return True


def unify_tr(a, b, subst, trail) -> bool:
    """Unify two trace types, recording new bindings on the trail."""
    a = resolve(a, subst)
    b = resolve(b, subst)
    if isinstance(a, TVar) and isinstance(b, TVar) and a.sid == b.sid:
        return True
    if isinstance(a, TVar):
        return _bind(a, b, subst, trail)
    if isinstance(b, TVar):
        return _bind(b, a, subst, trail)
    if isinstance(a, Prim) and isinstance(b, Prim):
        return a == b
    if isinstance(a, Vec) and isinstance(b, Vec):
        return unify_tr(a.elem, b.elem, subst, trail)
    if isinstance(a, Dt) and isinstance(b, Dt):
        if (a.module, a.name, len(a.args)) != (b.module, b.name, len(b.args)):
            return False
        return all(unify_tr(x, y, subst, trail) for x, y in zip(a.args, b.args))
    return False


def _rollback(subst, trail, mark):
    while len(trail) > mark:
        del subst[trail.pop()]


def _free_tvars(t, subst, acc: dict):
    t = resolve(t, subst)
    if isinstance(t, TVar):
        acc.setdefault(t.sid)
    elif isinstance(t, Vec):
        _free_tvars(t.elem, subst, acc)
    elif isinstance(t, Dt):
        for a in t.args:
            _free_tvars(a, subst, acc)


def _concrete_tr(t) -> bool:
    if isinstance(t, TVar):
        return False
    if isinstance(t, Vec):
        return _concrete_tr(t.elem)
    if isinstance(t, Dt):
        return all(_concrete_tr(a) for a in t.args)
    return True


def _is_hot(pkg: Package, t) -> bool:
    if isinstance(t, Vec):
        return _is_hot(pkg, t.elem)
    return isinstance(t, Dt) and is_hot_potato(pkg.tag_decl(t))


def ground_candidates(pkg: Package, pool_types=()) -> list:
    """Concrete tags a free type parameter may take.

    Primitives, zero-arity datatypes that are not hot potatoes, and
    every datatype appearing in the pool (so Coin<X> instantiations the
    genesis already uses stay reachable).
    """
    out: dict = {}
    for name in PRIMS:
        out.setdefault(Prim(name))
    for d in pkg.all_datatypes():
        if d.type_params == 0 and not is_hot_potato(d):
            out.setdefault(Dt(d.module, d.name, ()))

    def harvest(tag):
        if isinstance(tag, Vec):
            harvest(tag.elem)
        elif isinstance(tag, Dt):
            if not is_hot_potato(pkg.tag_decl(tag)):
                out.setdefault(tag)
            for a in tag.args:
                harvest(a)

    for ptag in pool_types:
        harvest(ptag)
    return list(out)


# --- construction --------------------------------------------------------

MAX_CALLS = 8
_CAND_TRIES = 8


class _Builder:
    """Grows a trace by discharging input/output obligations."""

    def __init__(self, graph: TypeGraph, pool_types, rng, candidates,
                 max_calls: int, zero_arity_only: bool, trace=None):
        self.graph = graph
        self.pkg = graph.pkg
        self.pool_types = tuple(pool_types)
        self.rng = rng
        self.cands = candidates
        self.max_calls = max_calls
        self.zero_only = zero_arity_only
        self.trace = trace if trace is not None else GraphTrace()
        self.trail: list = []
        self.queue: deque = deque()

    def eligible(self, fn: FunctionDecl) -> bool:
        return not (self.zero_only and fn.type_params)

    def fresh_tvars(self, n: int) -> tuple:
        t = self.trace
        out = []
        for _ in range(n):
            out.append(TVar(t.next_sid))
            t.next_sid += 1
        return tuple(out)

    def add_occ(self, fn: FunctionDecl, tvars: tuple) -> CallOcc:
        t = self.trace
        if len(t.occs) >= self.max_calls:
            raise _Dead("call budget")
        occ = CallOcc(t.next_sid, fn, tvars)
        t.next_sid += 1
        t.occs.append(occ)
        for k in range(len(fn.outputs)):
            t.vals.append(ValOcc((occ.sid, k), None))
            self.queue.append(("out", occ.sid, k))
        for pos in range(len(fn.inputs)):
            self.queue.append(("in", occ.sid, pos))
        return occ

    def run(self):
        while self.queue:
            kind, sid, k = self.queue.popleft()
            if kind == "in":
                self.fill_input(sid, k)
            else:
                self.consume_output(sid, k)

    # obligations ---------------------------------------------------

    def fill_input(self, sid: int, pos: int):
        t = self.trace
        if (sid, pos) in t.slots:
            return
        occ = t.occ(sid)
        raw, mode = occ.fn.inputs[pos]
        tag = self.ground_blockers(_inst(raw, occ.tvars))
        if mode != BY_VALUE:
            # references only ever bind pool objects
            if not self.try_pool(sid, pos, tag):
                raise _Dead(f"no pool object for &{tag}")
            return
        if is_literal_tag(walk(tag, t.subst)):
            # mostly a literal, occasionally chained from an open value
            # or a producer so scalar results flow across call boundaries
            if self.rng.random() < 0.15:
                if self.try_reuse(sid, pos, tag) or self.try_producer(sid, pos, tag):
                    return
            t.slots[(sid, pos)] = ("lit",)
            return
        # wiring an open value closes producer/consumer cycles (loan
        # coins coming back through repay); fresh producers and the
        # pool cover the rest
        if self.rng.random() < 0.35 and self.try_reuse(sid, pos, tag):
            return
        pool_first = self.rng.random() < 0.5
        if pool_first and self.try_pool(sid, pos, tag):
            return
        if self.try_producer(sid, pos, tag):
            return
        if not pool_first and self.try_pool(sid, pos, tag):
            return
        if self.try_reuse(sid, pos, tag):
            return
        raise _Dead(f"cannot satisfy input {tag}")

    def consume_output(self, sid: int, out: int):
        t = self.trace
        vidx = t.val_index(sid, out)
        if t.vals[vidx].consumer is not None:
            return
        occ = t.occ(sid)
        tag = walk(_inst(occ.fn.outputs[out], occ.tvars), t.subst)
        if not _is_hot(self.pkg, tag):
            return
        if not self.attach_consumer(vidx):
            raise _Dead(f"no consumer for hot potato {tag}")

    # strategies ----------------------------------------------------

    def ground_blockers(self, tag):
        """Bind tvars whose position blocks classifying the tag.

        A bare tvar or a tvar vector element leaves us unable to tell
        literal from producer-needed, so those get ground types now.
        Tvars inside datatype arguments stay free.
        """
        tag = resolve(tag, self.trace.subst)
        if isinstance(tag, TVar):
            if not self.cands:
                raise _Dead("no ground types available")
            pick = self.rng.choice(self.cands)
            _bind(tag, pick, self.trace.subst, self.trail)
            return pick
        if isinstance(tag, Vec):
            return Vec(self.ground_blockers(tag.elem))
        return tag

    def try_pool(self, sid: int, pos: int, tag) -> bool:
        ptypes = list(self.pool_types)
        self.rng.shuffle(ptypes)
        for ptag in ptypes:
            mark = len(self.trail)
            if unify_tr(tag, ptag, self.trace.subst, self.trail):
                self.trace.slots[(sid, pos)] = ("pool",)
                return True
            _rollback(self.trace.subst, self.trail, mark)
        return False

    def try_producer(self, sid: int, pos: int, tag) -> bool:
        key, _ = canonicalize(walk(tag, self.trace.subst))
        cands = []
        for edge in self.graph.produce_edges.get(key, ()):
            if not self.eligible(edge.fn):
                continue
            for out_pos, pattern in edge.uses:
                cands.append((edge.fn, out_pos, pattern))
        self.rng.shuffle(cands)
        for fn, out_pos, pattern in cands[:_CAND_TRIES]:
            tvars = self.fresh_tvars(fn.type_params)
            mark = len(self.trail)
            if unify_tr(_inst(pattern, tvars), tag, self.trace.subst, self.trail):
                occ = self.add_occ(fn, tvars)
                vidx = self.trace.val_index(occ.sid, out_pos)
                self.trace.vals[vidx].consumer = (sid, pos)
                self.trace.slots[(sid, pos)] = ("val", vidx)
                return True
            _rollback(self.trace.subst, self.trail, mark)
        return False

    def _feeds(self, start: int, target: int) -> bool:
        """True if occ start transitively consumes outputs of target."""
        t = self.trace
        seen = set()
        stack = [start]
        while stack:
            cur = stack.pop()
            if cur == target:
                return True
            if cur in seen:
                continue
            seen.add(cur)
            for (s, _pos), slot in t.slots.items():
                if s == cur and slot[0] == "val":
                    stack.append(t.vals[slot[1]].producer[0])
        return False

    def try_reuse(self, sid: int, pos: int, tag) -> bool:
        """Wire the input to an existing unconsumed value when types allow.

        Reuse lets one call's output fan back into a consumer that also
        takes values from elsewhere in the trace (a borrowed coin and its
        receipt meeting again at repay), so traces form dags rather than
        trees.  The producer must not already depend on the consuming
        call or linearization would find a cycle.
        """
        t = self.trace
        open_vals = [i for i, v in enumerate(t.vals) if v.consumer is None]
        self.rng.shuffle(open_vals)
        for vidx in open_vals:
            psid, pout = t.vals[vidx].producer
            if self._feeds(psid, sid):
                continue
            occ = t.occ(psid)
            vtag = _inst(occ.fn.outputs[pout], occ.tvars)
            mark = len(self.trail)
            if unify_tr(vtag, tag, t.subst, self.trail):
                t.vals[vidx].consumer = (sid, pos)
                t.slots[(sid, pos)] = ("val", vidx)
                return True
            _rollback(t.subst, self.trail, mark)
        return False

    def attach_consumer(self, vidx: int) -> bool:
        t = self.trace
        val = t.vals[vidx]
        psid, pout = val.producer
        occ = t.occ(psid)
        tag = self.ground_blockers(_inst(occ.fn.outputs[pout], occ.tvars))
        key, _ = canonicalize(walk(tag, t.subst))
        cands = []
        for edge in self.graph.consume_edges.get(key, ()):
            if not self.eligible(edge.fn):
                continue
            for pos, pattern, mode in edge.uses:
                if mode == BY_VALUE:
                    cands.append((edge.fn, pos, pattern))
        self.rng.shuffle(cands)
        for fn, pos, pattern in cands[:_CAND_TRIES]:
            tvars = self.fresh_tvars(fn.type_params)
            mark = len(self.trail)
            if unify_tr(_inst(pattern, tvars), tag, t.subst, self.trail):
                occ2 = self.add_occ(fn, tvars)
                val.consumer = (occ2.sid, pos)
                t.slots[(occ2.sid, pos)] = ("val", vidx)
                return True
            _rollback(t.subst, self.trail, mark)
        return False


def construct_trace(graph: TypeGraph, rng, *, target: FunctionDecl | None = None,
                    max_calls: int = MAX_CALLS, attempts: int = 8,
                    zero_arity_only: bool = False,
                    candidates=None) -> GraphTrace:
    """Build a trace rooted at a (given or random) target function."""
    if candidates is None:
        candidates = ground_candidates(graph.pkg, graph.pool_types)
    fns = [f for f in graph.functions if not (zero_arity_only and f.type_params)]
    if not fns:
        raise Exhausted("no eligible functions")
    last = "no attempts"
    for _ in range(attempts):
        b = _Builder(graph, graph.pool_types, rng, candidates,
                     max_calls, zero_arity_only)
        fn = target if target is not None else rng.choice(fns)
        try:
            b.add_occ(fn, b.fresh_tvars(fn.type_params))
            b.run()
        except _Dead as d:
            last = str(d)
            continue
        return b.trace
    raise Exhausted(f"trace construction failed: {last}")


def substitute_trace_types(trace: GraphTrace, candidates, rng):
    """Assign every remaining free type variable a ground type.

    Variables already unified into one class get a single assignment;
    each free class draws uniformly from the candidates.
    """
    free: dict = {}
    for occ in trace.occs:
        for tv in occ.tvars:
            _free_tvars(tv, trace.subst, free)
    for sid in free:
        if not candidates:
            raise NoAssignment("no ground type candidates")
        trace.subst[sid] = rng.choice(candidates)


# --- instantiation -------------------------------------------------------


def sample_literal(tag: TypeTag, rng):
    """Boundary-biased literal sampling."""
    if isinstance(tag, Vec):
        return tuple(sample_literal(tag.elem, rng) for _ in range(rng.randint(0, 4)))
    if tag == BOOL:
        return rng.random() < 0.5
    bits = PRIM_BITS[tag.name]
    mx = (1 << bits) - 1
    if rng.random() < 0.5:
        if rng.random() < 0.5:
            v = rng.choice((0, 1, 2, mx, mx - 1))
        else:
            v = (1 << rng.randrange(bits)) + rng.choice((-1, 0, 1))
        return max(0, min(v, mx))
    return rng.randint(0, mx)


def linearize(trace: GraphTrace) -> list:
    """Deterministic topological order of the occurrences.

    Ready occurrences are emitted sources-first, then by the creation
    order of the earliest value they consume, so independent producer
    chains interleave the same way every run.
    """
    preds: dict[int, set] = {o.sid: set() for o in trace.occs}
    min_val: dict[int, int] = {}
    for (sid, _pos), slot in trace.slots.items():
        if slot[0] == "val":
            vidx = slot[1]
            preds[sid].add(trace.vals[vidx].producer[0])
            if vidx < min_val.get(sid, 1 << 30):
                min_val[sid] = vidx
    pos_of = {o.sid: i for i, o in enumerate(trace.occs)}
    done: set = set()
    order = []
    while len(order) < len(trace.occs):
        ready = [o for o in trace.occs
                 if o.sid not in done and preds[o.sid] <= done]
        if not ready:
            raise AssertionError("cycle in trace")
        pick = min(ready, key=lambda o: (min_val.get(o.sid, -1),
                                         o.fn.qualified, pos_of[o.sid]))
        order.append(pick)
        done.add(pick.sid)
    return order


def instantiate(trace: GraphTrace, world: World, rng, *, pin: bool = False) -> Transaction:
    """Turn a fully-substituted trace into a concrete transaction.

    With pin=True, previously chosen literals and pool objects are
    kept where they still fit, so mutators preserve the parts of a
    seed they did not mean to change.  Fresh choices are recorded back
    onto the trace either way.
    """
    order = linearize(trace)
    call_idx: dict[int, int] = {}
    consumed: set = set()
    calls = []
    for k, occ in enumerate(order):
        targs = tuple(walk(tv, trace.subst) for tv in occ.tvars)
        for ta in targs:
            if not _concrete_tr(ta):
                raise NoAssignment(f"free type variable in {occ.fn.qualified}")
        args = []
        for pos, (raw, mode) in enumerate(occ.fn.inputs):
            tag = walk(_inst(raw, occ.tvars), trace.subst)
            slot = trace.slots[(occ.sid, pos)]
            if slot[0] == "val":
                psid, pout = trace.vals[slot[1]].producer
                args.append(ResultRef(call_idx[psid], pout))
            elif slot[0] == "lit":
                key = (occ.sid, pos)
                value = trace.lits.get(key) if pin else None
                if value is None or not _lit_fits(value, tag):
                    value = sample_literal(tag, rng)
                    trace.lits[key] = value
                if isinstance(tag, Vec):
                    args.append(LitVec(tag.elem, tuple(value)))
                else:
                    args.append(Lit(tag, value))
            else:
                key = (occ.sid, pos)
                matching = sorted(
                    oid for oid, obj in world.objects.items()
                    if obj.tag == tag and oid not in consumed)
                pick = None
                if pin:
                    old = trace.pools.get(key)
                    if old in matching:
                        pick = old
                if pick is None:
                    if not matching:
                        raise PoolMiss(f"no pool object of type {tag}")
                    pick = rng.choice(matching)
                trace.pools[key] = pick
                if mode == BY_VALUE:
                    consumed.add(pick)
                args.append(PoolRef(pick))
        calls.append(CallSpec(occ.fn.module, occ.fn.name, targs, tuple(args)))
        call_idx[occ.sid] = k
    return Transaction(tuple(calls))


def _lit_fits(value, tag) -> bool:
    if isinstance(tag, Vec):
        return isinstance(value, tuple) and all(_lit_fits(v, tag.elem) for v in value)
    if tag == BOOL:
        return isinstance(value, bool)
    if isinstance(value, bool) or not isinstance(value, int):
        return False
    return 0 <= value < (1 << PRIM_BITS[tag.name])


def generate(graph: TypeGraph, world: World, rng, *,
             max_calls: int = MAX_CALLS, attempts: int = 32,
             zero_arity_only: bool = False) -> tuple[GraphTrace, Transaction]:
    """Construct, substitute, instantiate and validate one fresh seed."""
    cands = ground_candidates(graph.pkg, world.pool_types())
    last: Exception | None = None
    for _ in range(attempts):
        try:
            trace = construct_trace(graph, rng, max_calls=max_calls, attempts=4,
                                    zero_arity_only=zero_arity_only,
                                    candidates=cands)
            substitute_trace_types(trace, cands, rng)
            txn = instantiate(trace, world, rng)
            validate(graph.pkg, world, txn)
            return trace, txn
        except (Exhausted, NoAssignment, PoolMiss, TxTypeError) as e:
            last = e
    raise Exhausted(f"could not generate a valid transaction: {last}")


# --- static validation ----------------------------------------------------


def _check_tag_known(pkg: Package, tag, ci: int, ai: int):
    if isinstance(tag, Param):
        raise TxTypeError(ci, ai, "type argument is not concrete")
    if isinstance(tag, Vec):
        _check_tag_known(pkg, tag.elem, ci, ai)
    elif isinstance(tag, Dt):
        if pkg.datatype(tag.module, tag.name) is None:
            raise TxTypeError(ci, ai, f"unknown datatype {tag.module}::{tag.name}")
        for a in tag.args:
            _check_tag_known(pkg, a, ci, ai)


def validate(pkg: Package, world: World, txn: Transaction):
    """Static transaction check mirroring the executor's binding rules.

    Raises TxTypeError on the first violation.  Additionally rejects
    transactions that would necessarily leak: an output hot potato no
    later call consumes can never execute cleanly.
    """
    results: list[list] = []
    consumed_pool: set = set()
    for ci, call in enumerate(txn.calls):
        fn = pkg.function(call.module, call.name)
        if fn is None:
            raise TxTypeError(ci, -1, f"unknown function {call.module}::{call.name}")
        if not fn.public:
            raise TxTypeError(ci, -1, f"{fn.qualified} is not public")
        if fn.name == "init":
            raise TxTypeError(ci, -1, "init cannot be called")
        if len(call.targs) != fn.type_params:
            raise TxTypeError(ci, -1, f"{fn.qualified} expects {fn.type_params} "
                                      f"type argument(s)")
        for ta in call.targs:
            _check_tag_known(pkg, ta, ci, -1)
        ins, outs = signature_of(fn, call.targs)
        if len(call.args) != len(ins):
            raise TxTypeError(ci, -1, f"{fn.qualified} takes {len(ins)} argument(s), "
                                      f"got {len(call.args)}")
        for pos, (binding, tag) in enumerate(zip(call.args, ins)):
            mode = fn.inputs[pos][1]
            _check_binding(pkg, world, results, consumed_pool,
                           ci, pos, binding, tag, mode)
        results.append(list(outs))
    for ci, outs in enumerate(results):
        for tag in outs:
            if tag is not None and _is_hot(pkg, tag):
                raise TxTypeError(ci, -1, f"hot potato {tag} is never consumed")


def _check_binding(pkg, world, results, consumed_pool, ci, pos, binding, tag, mode):
    if isinstance(binding, Lit):
        if mode != BY_VALUE or not isinstance(tag, Prim):
            raise TxTypeError(ci, pos, f"literal cannot bind {tag} ({mode})")
        if binding.tag != tag or not _lit_fits(binding.value, tag):
            raise TxTypeError(ci, pos, f"literal {binding.value!r} does not fit {tag}")
    elif isinstance(binding, LitVec):
        if mode != BY_VALUE or not (isinstance(tag, Vec) and isinstance(tag.elem, Prim)):
            raise TxTypeError(ci, pos, f"vector literal cannot bind {tag}")
        if binding.elem != tag.elem or not _lit_fits(tuple(binding.values), tag):
            raise TxTypeError(ci, pos, "vector literal element mismatch")
    elif isinstance(binding, ResultRef):
        if mode != BY_VALUE:
            raise TxTypeError(ci, pos, "results bind by value only")
        if not (0 <= binding.call < len(results)):
            raise TxTypeError(ci, pos, f"result r{binding.call}.{binding.out} "
                                       "does not exist yet")
        outs = results[binding.call]
        if not (0 <= binding.out < len(outs)):
            raise TxTypeError(ci, pos, f"no output {binding.out} on call {binding.call}")
        have = outs[binding.out]
        if have is None:
            raise TxTypeError(ci, pos, f"r{binding.call}.{binding.out} already consumed")
        if have != tag:
            raise TxTypeError(ci, pos, f"r{binding.call}.{binding.out} has type "
                                       f"{have}, expected {tag}")
        outs[binding.out] = None
    elif isinstance(binding, PoolRef):
        obj = world.objects.get(binding.obj_id)
        if obj is None:
            raise TxTypeError(ci, pos, f"no pool object @{binding.obj_id}")
        if binding.obj_id in consumed_pool:
            raise TxTypeError(ci, pos, f"@{binding.obj_id} already consumed")
        if obj.tag != tag:
            raise TxTypeError(ci, pos, f"@{binding.obj_id} has type {obj.tag}, "
                                       f"expected {tag}")
        if mode == BY_VALUE:
            consumed_pool.add(binding.obj_id)
    else:
        raise TxTypeError(ci, pos, f"unknown binding {binding!r}")


# --- mutators --------------------------------------------------------------
#
# Every mutator takes (graph, world, trace, rng) and returns a new
# (trace, transaction) pair, or None when it has nothing to offer.


def _finish(graph, world, trace, rng, cands=None):
    if cands is None:
        cands = ground_candidates(graph.pkg, world.pool_types())
    try:
        substitute_trace_types(trace, cands, rng)
        txn = instantiate(trace, world, rng, pin=True)
        validate(graph.pkg, world, txn)
    except (NoAssignment, PoolMiss, TxTypeError):
        return None
    return trace, txn


def _slot_tag(trace, key):
    sid, pos = key
    occ = trace.occ(sid)
    return walk(_inst(occ.fn.inputs[pos][0], occ.tvars), trace.subst)


def _havoc_scalar(value, tag, rng):
    if tag == BOOL:
        return not value if rng.random() < 0.5 else sample_literal(tag, rng)
    bits = PRIM_BITS[tag.name]
    mx = (1 << bits) - 1
    roll = rng.randrange(4)
    if roll == 0:
        return sample_literal(tag, rng)
    if roll == 1:
        return max(0, min(value + rng.choice((-1, 1)) * rng.randint(1, 16), mx))
    if roll == 2:
        return value ^ (1 << rng.randrange(bits))
    return rng.choice((0, 1, mx, mx - 1, value // 2, min(value * 2, mx)))


def _havoc_lit(trace, key, rng):
    tag = _slot_tag(trace, key)
    old = trace.lits.get(key)
    if old is None or not _lit_fits(old, tag):
        trace.lits[key] = sample_literal(tag, rng)
        return
    if isinstance(tag, Vec):
        vals = list(old)
        roll = rng.randrange(4)
        if roll == 0 or not vals:
            trace.lits[key] = sample_literal(tag, rng)
            return
        if roll == 1:
            i = rng.randrange(len(vals))
            vals[i] = _havoc_scalar(vals[i], tag.elem, rng)
        elif roll == 2:
            vals.append(sample_literal(tag.elem, rng))
        else:
            vals.pop(rng.randrange(len(vals)))
        trace.lits[key] = tuple(vals)
        return
    trace.lits[key] = _havoc_scalar(old, tag, rng)


def mutate_values(graph, world, trace, rng):
    """Havoc the literal leaves, leaving the call structure alone."""
    t = trace.clone()
    lit_keys = sorted(k for k, slot in t.slots.items() if slot[0] == "lit")
    if not lit_keys:
        return None
    changed = False
    for key in lit_keys:
        if rng.random() < 0.3:
            _havoc_lit(t, key, rng)
            changed = True
    if not changed:
        _havoc_lit(t, rng.choice(lit_keys), rng)
    return _finish(graph, world, t, rng)


def extend_trace(graph, world, trace, rng, *, zero_arity_only=False):
    """Give one dangling output a consumer call."""
    cands = ground_candidates(graph.pkg, world.pool_types())
    for _ in range(4):
        t = trace.clone()
        open_vals = [i for i, v in enumerate(t.vals) if v.consumer is None]
        if not open_vals:
            return None
        b = _Builder(graph, world.pool_types(), rng, cands,
                     max_calls=len(t.occs) + 4, zero_arity_only=zero_arity_only,
                     trace=t)
        try:
            if not b.attach_consumer(rng.choice(open_vals)):
                continue
            b.run()
        except _Dead:
            continue
        got = _finish(graph, world, t, rng, cands)
        if got is not None:
            return got
    return None


def insert_call(graph, world, trace, rng, *, zero_arity_only=False):
    """Splice in a random call, wiring it to dangling outputs when types line up."""
    fns = [f for f in graph.functions if not (zero_arity_only and f.type_params)]
    if not fns:
        return None
    cands = ground_candidates(graph.pkg, world.pool_types())
    for _ in range(4):
        t = trace.clone()
        b = _Builder(graph, world.pool_types(), rng, cands,
                     max_calls=len(t.occs) + 5, zero_arity_only=zero_arity_only,
                     trace=t)
        fn = rng.choice(fns)
        try:
            occ = b.add_occ(fn, b.fresh_tvars(fn.type_params))
            for pos, (raw, mode) in enumerate(fn.inputs):
                if mode != BY_VALUE or rng.random() < 0.5:
                    continue
                tag = _inst(raw, occ.tvars)
                open_vals = [i for i, v in enumerate(t.vals)
                             if v.consumer is None and v.producer[0] != occ.sid]
                rng.shuffle(open_vals)
                for vidx in open_vals[:_CAND_TRIES]:
                    psid, pout = t.vals[vidx].producer
                    pocc = t.occ(psid)
                    vtag = _inst(pocc.fn.outputs[pout], pocc.tvars)
                    mark = len(b.trail)
                    if unify_tr(tag, vtag, t.subst, b.trail):
                        t.vals[vidx].consumer = (occ.sid, pos)
                        t.slots[(occ.sid, pos)] = ("val", vidx)
                        break
                    _rollback(t.subst, b.trail, mark)
            b.run()
        except _Dead:
            continue
        got = _finish(graph, world, t, rng, cands)
        if got is not None:
            return got
    return None


def remove_call(graph, world, trace, rng):
    """Delete a call; cascade removal through the linearity rules.

    Consumers of a removed call's outputs lose an input and go too;
    a producer whose hot potato loses its consumer goes as well.
    """
    if not trace.occs:
        return None
    t = trace.clone()
    dead = {rng.choice(t.occs).sid}
    changed = True
    while changed:
        changed = False
        for v in t.vals:
            psid = v.producer[0]
            csid = v.consumer[0] if v.consumer else None
            if psid in dead and csid is not None and csid not in dead:
                dead.add(csid)
                changed = True
            if csid is not None and csid in dead and psid not in dead:
                occ = t.occ(psid)
                tag = walk(_inst(occ.fn.outputs[v.producer[1]], occ.tvars), t.subst)
                if _is_hot(graph.pkg, tag):
                    dead.add(psid)
                    changed = True
    t.occs = [o for o in t.occs if o.sid not in dead]
    keep = [i for i, v in enumerate(t.vals) if v.producer[0] not in dead]
    remap = {old: new for new, old in enumerate(keep)}
    vals = []
    for i in keep:
        v = t.vals[i]
        consumer = v.consumer if v.consumer and v.consumer[0] not in dead else None
        vals.append(ValOcc(v.producer, consumer))
    t.vals = vals
    t.slots = {
        (sid, pos): (slot if slot[0] != "val" else ("val", remap[slot[1]]))
        for (sid, pos), slot in t.slots.items() if sid not in dead
    }
    t.lits = {k: v for k, v in t.lits.items() if k[0] not in dead}
    t.pools = {k: v for k, v in t.pools.items() if k[0] not in dead}
    if not t.occs:
        return t, Transaction(())
    return _finish(graph, world, t, rng)


# --- type-blind generation (ablation support) ------------------------------


def havoc_txn(pkg: Package, world: World, rng, candidates) -> Transaction:
    """Generate with no type-graph guidance at all.

    Object-shaped arguments are mostly forged from literals, sometimes
    pointed blindly at results or pool objects; nearly all of these
    fail validation, which is the point of measuring it.
    """
    fns = [f for f in pkg.all_functions() if f.public and f.name != "init"]
    pool_ids = sorted(world.objects)
    calls = []
    for ci in range(rng.randint(1, 4)):
        fn = rng.choice(fns)
        targs = tuple(rng.choice(candidates) for _ in range(fn.type_params))
        ins, _ = signature_of(fn, targs)
        args = []
        for tag, (_raw, mode) in zip(ins, fn.inputs):
            if mode == BY_VALUE and is_literal_tag(tag):
                v = sample_literal(tag, rng)
                args.append(LitVec(tag.elem, tuple(v)) if isinstance(tag, Vec)
                            else Lit(tag, v))
            elif rng.random() < 0.75:
                args.append(Lit(Prim("u64"), rng.randint(0, (1 << 64) - 1)))
            elif pool_ids and rng.random() < 0.5:
                args.append(PoolRef(rng.choice(pool_ids)))
            else:
                args.append(ResultRef(rng.randrange(max(ci, 1)), rng.randrange(3)))
        calls.append(CallSpec(fn.module, fn.name, targs, tuple(args)))
    return Transaction(tuple(calls))
