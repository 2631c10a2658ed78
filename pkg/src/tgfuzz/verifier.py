"""Bytecode verifier.

Runs a worklist abstract interpretation over every function body: the
abstract state is the stack of type tags plus the set of still-available
locals and parameters.  Joins require identical stacks; availability
merges by intersection.  The checks mirror what the runtime relies on:

  * operands have the types each opcode expects,
  * values without `copy` are never duplicated, values without `drop`
    are never silently discarded (linearity for coins and hot potatoes),
  * control never falls off the end of a body,
  * call/pack/unpack targets exist and arities line up,
  * declarations are coherent (field abilities support declared ones),
  * entry points expose only signatures the harness can bind.

References are verifier-level wrappers (_R); they originate only from
reference parameters, which in turn only bind pool objects at the
transaction boundary.  No instruction dereferences them here, so they
are freely copyable handles.
"""
from __future__ import annotations

from dataclasses import dataclass

from .model import (
    BOOL, BY_MUT, BY_REF, BY_VALUE, U8, U64,
    Dt, FunctionDecl, Package, Param, Prim, TypeTag, Vec, substitute,
)


class VerifyError(Exception):
    def __init__(self, where: str, msg: str):
        super().__init__(f"{where}: {msg}")
        self.where = where
        self.msg = msg


@dataclass(frozen=True, slots=True)
class _R:
    """A reference on the abstract stack."""
    mut: bool
    tag: TypeTag


_INT_BINOPS = {"add", "sub", "mul", "div", "mod", "bit_and", "bit_or", "bit_xor"}
_CMP_OPS = {"lt", "le", "gt", "ge"}


def verify_package(pkg: Package):
    for mod in pkg.modules.values():
        for dt in mod.datatypes.values():
            _check_decl(pkg, dt)
        for fn in mod.functions.values():
            _check_signature(pkg, fn)
            if not fn.is_native:
                _verify_body(pkg, fn)


# declaration checks ----------------------------------------------------

def _field_supports(pkg: Package, tag: TypeTag, ability: str) -> bool:
    # type parameters satisfy conditionally; the concrete check happens
    # when abilities of an instantiated tag are queried
    if isinstance(tag, Param):
        return True
    if isinstance(tag, Prim):
        return ability in ("copy", "drop", "store")
    if isinstance(tag, Vec):
        return _field_supports(pkg, tag.elem, ability)
    decl = pkg.datatype(tag.module, tag.name)
    if decl is None:
        return False
    ok = ability in decl.abilities or (ability == "store" and "key" in decl.abilities)
    return ok and all(_field_supports(pkg, a, ability) for a in tag.args)


def _check_decl(pkg: Package, dt):
    where = f"{dt.module}::{dt.name}"
    for fname, ftag in dt.fields:
        if isinstance(ftag, Dt) and pkg.datatype(ftag.module, ftag.name) is None:
            raise VerifyError(where, f"field {fname} has unknown type {ftag}")
        for ability in dt.abilities & {"copy", "drop", "store"}:
            if not _field_supports(pkg, ftag, ability):
                raise VerifyError(
                    where, f"declared ability '{ability}' but field {fname}: {ftag} lacks it")
        if "key" in dt.abilities and not _field_supports(pkg, ftag, "store"):
            raise VerifyError(where, f"'key' requires storable fields, {fname}: {ftag} is not")


def _check_signature(pkg: Package, fn: FunctionDecl):
    where = fn.qualified
    for k, (tag, mode) in enumerate(fn.inputs):
        _check_known(pkg, tag, where, f"input {k}")
        if mode != BY_VALUE and not isinstance(tag, Dt):
            raise VerifyError(where, f"input {k}: references must point at datatypes, not {tag}")
        if fn.public and isinstance(tag, Param):
            raise VerifyError(where, f"input {k}: entry points cannot take a bare type parameter")
    for k, tag in enumerate(fn.outputs):
        _check_known(pkg, tag, where, f"output {k}")
        if fn.public and isinstance(tag, Param):
            raise VerifyError(where, f"output {k}: entry points cannot return a bare type parameter")
    for k, tag in enumerate(fn.locals):
        _check_known(pkg, tag, where, f"local {k}")
    if fn.name == "init":
        if fn.public or fn.type_params or fn.inputs:
            raise VerifyError(where, "init must be private, non-generic and take no inputs")
        for k, tag in enumerate(fn.outputs):
            if not (isinstance(tag, Dt) and pkg.storable(tag)):
                raise VerifyError(where, f"init output {k} must be a storable datatype")


def _check_known(pkg: Package, tag: TypeTag, where: str, what: str):
    if isinstance(tag, Dt):
        decl = pkg.datatype(tag.module, tag.name)
        if decl is None:
            raise VerifyError(where, f"{what}: unknown datatype {tag.module}::{tag.name}")
        if len(tag.args) != decl.type_params:
            raise VerifyError(where, f"{what}: {tag} has wrong type argument count")
        for a in tag.args:
            _check_known(pkg, a, where, what)
    elif isinstance(tag, Vec):
        _check_known(pkg, tag.elem, where, what)


# conservative abilities: a bare type parameter may lack everything -----

def _abstract_has(pkg: Package, tag: TypeTag, ability: str) -> bool:
    if isinstance(tag, Param):
        return False
    if isinstance(tag, Prim):
        return True
    if isinstance(tag, Vec):
        return _abstract_has(pkg, tag.elem, ability)
    decl = pkg.tag_decl(tag)
    if ability not in decl.abilities:
        return False
    return all(_abstract_has(pkg, a, ability) for a in tag.args)


# body verification ------------------------------------------------------

@dataclass(frozen=True, slots=True)
class _State:
    stack: tuple
    locals_avail: frozenset
    params_avail: frozenset


def _verify_body(pkg: Package, fn: FunctionDecl):
    where = fn.qualified
    body = fn.body
    if not body:
        raise VerifyError(where, "empty body")
    states: dict[int, _State] = {
        0: _State((), frozenset(), frozenset(range(len(fn.inputs))))}
    work = [0]
    while work:
        pc = work.pop()
        for nxt, st in _step(pkg, fn, pc, states[pc]):
            if nxt >= len(body):
                raise VerifyError(where, f"pc {pc}: control falls off the end of the body")
            old = states.get(nxt)
            if old is None:
                states[nxt] = st
                work.append(nxt)
                continue
            if old.stack != st.stack:
                raise VerifyError(where, f"pc {nxt}: stack shapes disagree across paths")
            merged = _State(
                old.stack,
                old.locals_avail & st.locals_avail,
                old.params_avail & st.params_avail,
            )
            if merged != old:
                states[nxt] = merged
                work.append(nxt)


def _step(pkg: Package, fn: FunctionDecl, pc: int, state: _State) -> list[tuple[int, _State]]:
    where = fn.qualified
    ins = fn.body[pc]
    op = ins[0]
    stack = list(state.stack)
    lavail = state.locals_avail
    pavail = state.params_avail

    def fail(msg: str):
        raise VerifyError(where, f"pc {pc} ({op}): {msg}")

    def pop():
        if not stack:
            fail("pop from an empty stack")
        return stack.pop()

    def pop_int() -> Prim:
        t = pop()
        if not (isinstance(t, Prim) and t.name != "bool"):
            fail(f"expected an integer, got {t}")
        return t

    def out(next_pcs=None):
        st = _State(tuple(stack), lavail, pavail)
        return [(n, st) for n in (next_pcs if next_pcs is not None else [pc + 1])]

    if op == "ld_const":
        stack.append(ins[1])
        return out()
    if op == "ld_param":
        k = ins[1]
        if not 0 <= k < len(fn.inputs):
            fail(f"parameter index {k} out of range")
        tag, mode = fn.inputs[k]
        if mode != BY_VALUE:
            stack.append(_R(mode == BY_MUT, tag))
            return out()
        if k not in pavail:
            fail(f"parameter {k} already moved")
        if not _abstract_has(pkg, tag, "copy"):
            pavail = pavail - {k}
        stack.append(tag)
        return out()
    if op in ("copy_local", "move_local"):
        k = ins[1]
        if not 0 <= k < len(fn.locals):
            fail(f"local index {k} out of range")
        if k not in lavail:
            fail(f"local {k} is not available")
        if op == "copy_local":
            if not _abstract_has(pkg, fn.locals[k], "copy"):
                fail(f"local {k} of type {fn.locals[k]} is not copyable")
        else:
            lavail = lavail - {k}
        stack.append(fn.locals[k])
        return out()
    if op == "store_local":
        k = ins[1]
        if not 0 <= k < len(fn.locals):
            fail(f"local index {k} out of range")
        t = pop()
        if t != fn.locals[k]:
            fail(f"cannot store {t} into local {k} of type {fn.locals[k]}")
        if k in lavail and not _abstract_has(pkg, fn.locals[k], "drop"):
            fail(f"overwriting local {k} would drop a value without 'drop'")
        lavail = lavail | {k}
        return out()
    if op in _INT_BINOPS:
        b, a = pop_int(), pop_int()
        if a != b:
            fail(f"operand widths differ: {a} vs {b}")
        stack.append(a)
        return out()
    if op in ("shl", "shr"):
        amt = pop()
        if amt != U8:
            fail(f"shift amount must be u8, got {amt}")
        stack.append(pop_int())
        return out()
    if op == "not":
        t = pop()
        if t != BOOL:
            fail(f"expected bool, got {t}")
        stack.append(BOOL)
        return out()
    if op in ("eq", "neq"):
        b, a = pop(), pop()
        if not isinstance(a, Prim) or a != b:
            fail(f"comparison needs two primitives of one type, got {a} and {b}")
        stack.append(BOOL)
        return out()
    if op in _CMP_OPS:
        b, a = pop_int(), pop_int()
        if a != b:
            fail(f"operand widths differ: {a} vs {b}")
        stack.append(BOOL)
        return out()
    if op == "cast":
        pop_int()
        stack.append(Prim(ins[1]))
        return out()
    if op == "branch":
        return out([ins[1]])
    if op in ("br_true", "br_false"):
        t = pop()
        if t != BOOL:
            fail(f"condition must be bool, got {t}")
        return out([pc + 1, ins[1]])
    if op == "abort":
        return []
    if op == "ret":
        if tuple(stack) != fn.outputs:
            fail(f"return stack {tuple(str(t) for t in stack)} does not match "
                 f"outputs {tuple(str(t) for t in fn.outputs)}")
        for k in lavail:
            if not _abstract_has(pkg, fn.locals[k], "drop"):
                fail(f"local {k} of type {fn.locals[k]} is still live at return")
        for k in pavail:
            tag, mode = fn.inputs[k]
            if mode == BY_VALUE and not _abstract_has(pkg, tag, "drop"):
                fail(f"parameter {k} of type {tag} is still live at return")
        return []
    if op == "call":
        _, mname, fname, targs = ins
        callee = pkg.function(mname, fname)
        if callee is None:
            fail(f"unknown function {mname}::{fname}")
        if fname == "init":
            fail("init functions cannot be called")
        if len(targs) != callee.type_params:
            fail(f"{callee.qualified} expects {callee.type_params} type arguments")
        for tag, mode in reversed(callee.inputs):
            want = substitute(tag, targs)
            got = pop()
            if mode == BY_VALUE:
                if got != want:
                    fail(f"argument type {got} does not match {want}")
            else:
                if not isinstance(got, _R) or got.tag != want:
                    fail(f"argument must be a reference to {want}, got {got}")
                if mode == BY_MUT and not got.mut:
                    fail("mutable reference required")
        for otag in callee.outputs:
            stack.append(substitute(otag, targs))
        return out()
    if op in ("pack", "unpack"):
        _, mname, dname, targs = ins
        decl = pkg.datatype(mname, dname)
        if decl is None:
            fail(f"unknown datatype {mname}::{dname}")
        if len(targs) != decl.type_params:
            fail(f"{mname}::{dname} expects {decl.type_params} type arguments")
        ftags = decl.field_tags(targs)
        built = Dt(mname, dname, targs)
        if op == "pack":
            for want in reversed(ftags):
                got = pop()
                if got != want:
                    fail(f"field type {got} does not match {want}")
            stack.append(built)
        else:
            got = pop()
            if got != built:
                fail(f"expected {built}, got {got}")
            stack.extend(ftags)
        return out()
    if op == "vec_new":
        stack.append(Vec(ins[1]))
        return out()
    if op == "vec_push":
        elem = pop()
        v = pop()
        if not isinstance(v, Vec) or v.elem != elem:
            fail(f"cannot push {elem} onto {v}")
        stack.append(v)
        return out()
    if op == "vec_pop":
        v = pop()
        if not isinstance(v, Vec):
            fail(f"expected a vector, got {v}")
        stack.append(v)
        stack.append(v.elem)
        return out()
    if op == "vec_len":
        v = stack[-1] if stack else fail("pop from an empty stack")
        if not isinstance(v, Vec):
            fail(f"expected a vector, got {v}")
        stack.append(U64)
        return out()
    if op == "vec_borrow":
        idx = pop()
        if idx != U64:
            fail(f"index must be u64, got {idx}")
        v = stack[-1] if stack else fail("pop from an empty stack")
        if not isinstance(v, Vec):
            fail(f"expected a vector, got {v}")
        if not _abstract_has(pkg, v.elem, "copy"):
            fail(f"element type {v.elem} is not copyable")
        stack.append(v.elem)
        return out()
    if op == "emit_event":
        t = pop()
        if isinstance(t, _R):
            fail("event payload cannot be a reference")
        if not _abstract_has(pkg, t, "drop"):
            fail(f"event payload of type {t} lacks 'drop'")
        return out()
    fail(f"unknown opcode")
