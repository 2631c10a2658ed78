"""Stack virtual machine, pool state and the transaction executor.

Semantics in brief:

  * Integers are unsigned with Move-style checked arithmetic: add, sub
    and mul abort on overflow, div and mod abort on a zero divisor,
    casts abort when the value does not fit.  Shifts abort only when
    the amount reaches the operand width; shl otherwise discards high
    bits silently, which is exactly the behaviour some contracts get
    wrong.
  * Every instruction costs one unit of gas.  Transactions are atomic:
    any abort (including out-of-gas) reverts all pool effects.
  * References exist only at the transaction boundary, where an
    argument slot binds a pool object.  Contract code never
    dereferences them; the builtin coin functions do.
  * When the last call returns, leftover results are swept: droppable
    values are discarded, storable ones are transferred to the sender
    as fresh pool objects, and anything else is a hot potato leak that
    aborts the transaction.

Each runtime value can carry a symbolic shadow (`sym`) mirroring how it
was computed from transaction literals, plus a taint set naming the
division sites whose rounding error flowed into it.  `sym is None`
means "a constant equal to the concrete value"; plain runs never
allocate shadows.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .model import (
    BOOL, BY_MUT, BY_VALUE, PRIM_BITS,
    Dt, FunctionDecl, Package, Prim, TypeTag, Vec, is_concrete, parse_tag,
    signature_of, substitute,
)
from .stdlib import coin_tag, is_coin

DEFAULT_GAS_LIMIT = 100_000


# symbolic expressions ---------------------------------------------------

@dataclass(frozen=True, slots=True)
class SExpr:
    """Shadow expression node.

    op is one of: const, var, add, sub, mul, div, mod, shl, shr, band,
    bor, bxor, not, eq, neq, lt, le, gt, ge.  For const the single arg
    is the value; for var it is the input id (call, position, element).
    width is the result width name, "bool", or "wide" for guard nodes
    evaluated without wrapping.
    """
    op: str
    args: tuple
    width: str


def sconst(value: int, width: str) -> SExpr:
    return SExpr("const", (int(value),), width)


def svar(vid: tuple, width: str) -> SExpr:
    return SExpr("var", (vid,), width)


def expr_vars(e: SExpr, acc: set | None = None) -> set:
    if acc is None:
        acc = set()
    if e.op == "var":
        acc.add(e.args[0])
    elif e.op != "const":
        for a in e.args:
            expr_vars(a, acc)
    return acc


# checked arithmetic ------------------------------------------------------

class ArithAbort(Exception):
    """Raised by arith_op/cast_op; kind is overflow, divzero or shift."""

    def __init__(self, kind: str):
        super().__init__(kind)
        self.kind = kind


def arith_op(op: str, width: str, a: int, b: int) -> int:
    """Concrete semantics of one binary integer instruction.

    For shl and shr, b is the shift amount.  Raises ArithAbort on the
    conditions the machine aborts on; otherwise the result is already
    reduced into the width.
    """
    bits = PRIM_BITS[width]
    limit = 1 << bits
    if op == "add":
        r = a + b
        if r >= limit:
            raise ArithAbort("overflow")
        return r
    if op == "sub":
        r = a - b
        if r < 0:
            raise ArithAbort("overflow")
        return r
    if op == "mul":
        r = a * b
        if r >= limit:
            raise ArithAbort("overflow")
        return r
    if op == "div":
        if b == 0:
            raise ArithAbort("divzero")
        return a // b
    if op == "mod":
        if b == 0:
            raise ArithAbort("divzero")
        return a % b
    if op == "shl":
        if b >= bits:
            raise ArithAbort("shift")
        return (a << b) & (limit - 1)
    if op == "shr":
        if b >= bits:
            raise ArithAbort("shift")
        return a >> b
    if op == "band":
        return a & b
    if op == "bor":
        return a | b
    if op == "bxor":
        return a ^ b
    raise ValueError(f"not an arithmetic op: {op}")


def cast_op(value: int, to_width: str) -> int:
    if value >= (1 << PRIM_BITS[to_width]):
        raise ArithAbort("cast")
    return value


_CMP = {
    "eq": lambda a, b: a == b,
    "neq": lambda a, b: a != b,
    "lt": lambda a, b: a < b,
    "le": lambda a, b: a <= b,
    "gt": lambda a, b: a > b,
    "ge": lambda a, b: a >= b,
}

_BINOP_NAME = {"bit_and": "band", "bit_or": "bor", "bit_xor": "bxor"}


# runtime values ----------------------------------------------------------

_EMPTY = frozenset()


class IntV:
    __slots__ = ("width", "val", "sym", "taint")

    def __init__(self, width: str, val: int, sym: SExpr | None = None,
                 taint: frozenset = _EMPTY):
        self.width = width
        self.val = val
        self.sym = sym
        self.taint = taint

    def __repr__(self):
        return f"{self.val}{self.width}"


class BoolV:
    __slots__ = ("val", "sym", "orig")
    width = "bool"

    def __init__(self, val: bool, sym: SExpr | None = None, orig: tuple | None = None):
        self.val = val
        self.sym = sym
        # operand values of the comparison that produced this bool, if
        # any; lets the loop oracle tell a stuck guard from a counter
        self.orig = orig

    def __repr__(self):
        return "true" if self.val else "false"


class VecV:
    __slots__ = ("elem", "items")

    def __init__(self, elem: TypeTag, items: list):
        self.elem = elem
        self.items = items

    def __repr__(self):
        return "[" + ", ".join(repr(x) for x in self.items) + "]"


class StructV:
    __slots__ = ("tag", "fields")

    def __init__(self, tag: Dt, fields: list):
        self.tag = tag
        self.fields = fields

    def __repr__(self):
        inner = ", ".join(repr(x) for x in self.fields)
        return f"{self.tag}{{{inner}}}"


class RefV:
    __slots__ = ("obj_id", "mut")

    def __init__(self, obj_id: str, mut: bool):
        self.obj_id = obj_id
        self.mut = mut

    def __repr__(self):
        return ("&mut @" if self.mut else "&@") + self.obj_id


Value = object


def clone_value(v):
    if isinstance(v, VecV):
        return VecV(v.elem, [clone_value(x) for x in v.items])
    if isinstance(v, StructV):
        return StructV(v.tag, [clone_value(x) for x in v.fields])
    return v  # ints, bools and refs are immutable enough to share


def _sym_of(v) -> SExpr:
    if v.sym is not None:
        return v.sym
    return sconst(int(v.val), v.width)


# aborts and results -------------------------------------------------------

class VMAbort(Exception):
    """Transaction-level abort. kind: overflow, divzero, shift, cast,
    vecidx, abort (explicit, carries code), gas, leak."""

    def __init__(self, kind: str, site: tuple, code: int | None = None):
        super().__init__(f"{kind} at {site}" + (f" code {code}" if code is not None else ""))
        self.kind = kind
        self.site = site
        self.code = code


class TxValidationError(Exception):
    """The transaction is malformed for this package and pool: bad
    bindings, type mismatches, missing objects, reused results."""


class GenesisError(Exception):
    pass


class Digest:
    """Cheap per-execution observations the oracle suite reads."""

    __slots__ = ("branch_count", "branch_orig", "branch_changed", "lossy_divs",
                 "amplified", "cast_same", "shl_discards", "bool_const_cmp",
                 "events")

    def __init__(self):
        self.branch_count: dict = {}       # site -> hits
        self.branch_orig: dict = {}        # site -> first operand pair
        self.branch_changed: set = set()   # sites whose operands moved
        self.lossy_divs: dict = {}         # site -> (a, b) first lossy sample
        self.amplified: dict = {}          # mul site -> frozenset of div sites
        self.cast_same: dict = {}          # site -> width
        self.shl_discards: dict = {}       # site -> (value, amount, discarded)
        self.bool_const_cmp: dict = {}     # site -> True
        self.events: list = []             # (tag, payload)


@dataclass
class ExecResult:
    status: str                    # success | abort | gas | leak | invalid
    abort_kind: str | None = None
    abort_site: tuple | None = None
    abort_code: int | None = None
    error: str | None = None       # for invalid
    gas_used: int = 0
    coverage: frozenset = _EMPTY
    digest: Digest | None = None
    balances_before: dict = field(default_factory=dict)
    balances_after: dict = field(default_factory=dict)
    transferred: tuple = ()        # (call, out, type string) swept to sender

    @property
    def success(self) -> bool:
        return self.status == "success"


# pool state ---------------------------------------------------------------

@dataclass
class PoolObject:
    id: str
    owner: str          # "sender" | "shared"
    tag: Dt
    value: StructV


class World:
    """Objects available to transactions, owned by the sender or shared."""

    def __init__(self, pkg: Package):
        self.pkg = pkg
        self.objects: dict[str, PoolObject] = {}
        self._auto = 0

    @classmethod
    def build(cls, pkg: Package, genesis_text: str | None = None) -> "World":
        w = cls(pkg)
        if genesis_text:
            for obj in parse_genesis(genesis_text, pkg):
                if obj.id in w.objects:
                    raise GenesisError(f"duplicate object id {obj.id!r}")
                w.objects[obj.id] = obj
        w._run_inits()
        return w

    def _run_inits(self):
        for mod in self.pkg.modules.values():
            fn = mod.init_fn
            if fn is None:
                continue
            ctx = _Ctx(self.pkg, self, gas=10_000, recorder=None, digest=Digest())
            try:
                outs = _run_function(ctx, fn, (), [])
            except VMAbort as a:
                raise GenesisError(f"{fn.qualified} aborted: {a}") from None
            for k, v in enumerate(outs):
                tag = v.tag
                owner = "shared" if "key" in self.pkg.tag_decl(tag).abilities else "sender"
                oid = f"{mod.name}_init{k}"
                self.objects[oid] = PoolObject(oid, owner, tag, v)

    def fork(self) -> "World":
        w = World(self.pkg)
        w._auto = self._auto
        for oid, obj in self.objects.items():
            w.objects[oid] = PoolObject(obj.id, obj.owner, obj.tag, clone_value(obj.value))
        return w

    def pool_types(self) -> tuple:
        seen: dict[TypeTag, None] = {}
        for obj in self.objects.values():
            seen.setdefault(obj.tag)
        return tuple(seen)

    def sender_balances(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for obj in self.objects.values():
            if obj.owner == "sender" and is_coin(obj.tag):
                key = str(obj.tag)
                out[key] = out.get(key, 0) + obj.value.fields[0].val
        return out

    def add_sender_object(self, tag: Dt, value: StructV, hint: str) -> str:
        oid = hint
        while oid in self.objects:
            self._auto += 1
            oid = f"{hint}_{self._auto}"
        self.objects[oid] = PoolObject(oid, "sender", tag, value)
        return oid


def _default_value(pkg: Package, tag: TypeTag) -> Value:
    if isinstance(tag, Prim):
        return BoolV(False) if tag.name == "bool" else IntV(tag.name, 0)
    if isinstance(tag, Vec):
        return VecV(tag.elem, [])
    decl = pkg.tag_decl(tag)
    fields = [_default_value(pkg, t) for t in decl.field_tags(tag.args)]
    return StructV(tag, fields)


def parse_genesis(text: str, pkg: Package) -> list[PoolObject]:
    """Parse the starting-pool description.

    Lines: `object <id> <sender|shared> <type> { field: value, ... }`
    or the shorthand `balance <coin type> <amount>` which mints a
    sender-owned coin with a generated id.
    """
    out: list[PoolObject] = []
    balance_n = 0
    for ln_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        if parts[0] == "balance":
            rest = parts[1] if len(parts) > 1 else ""
            try:
                tag_text, amount_text = rest.rsplit(None, 1)
                tag = parse_tag(tag_text)
                amount = int(amount_text, 0)
            except ValueError as e:
                raise GenesisError(f"line {ln_no}: bad balance line: {e}") from None
            if not is_coin(tag):
                raise GenesisError(f"line {ln_no}: balance type must be std::Coin<...>")
            _genesis_check_tag(pkg, tag, ln_no)
            if not 0 <= amount < (1 << 64):
                raise GenesisError(f"line {ln_no}: amount out of u64 range")
            oid = f"balance{balance_n}"
            balance_n += 1
            out.append(PoolObject(oid, "sender", tag, StructV(tag, [IntV("u64", amount)])))
            continue
        if parts[0] != "object":
            raise GenesisError(f"line {ln_no}: expected 'object' or 'balance'")
        m = parts[1] if len(parts) > 1 else ""
        try:
            oid, owner, rest = m.split(None, 2)
        except ValueError:
            raise GenesisError(f"line {ln_no}: expected 'object <id> <owner> <type> {{...}}'") from None
        if owner not in ("sender", "shared"):
            raise GenesisError(f"line {ln_no}: owner must be sender or shared")
        tag_text, _, fields_text = rest.partition("{")
        try:
            tag = parse_tag(tag_text)
        except ValueError as e:
            raise GenesisError(f"line {ln_no}: {e}") from None
        _genesis_check_tag(pkg, tag, ln_no)
        decl = pkg.tag_decl(tag)
        ftags = decl.field_tags(tag.args)
        fields_text = fields_text.strip()
        if not fields_text.endswith("}"):
            raise GenesisError(f"line {ln_no}: unterminated field block")
        given: dict[str, str] = {}
        inner = fields_text[:-1].strip()
        if inner:
            for piece in inner.split(","):
                piece = piece.strip()
                if not piece:
                    continue
                fname, _, fval = piece.partition(":")
                given[fname.strip()] = fval.strip()
        fields: list[Value] = []
        for (fname, _), ftag in zip(decl.fields, ftags):
            if fname not in given:
                raise GenesisError(f"line {ln_no}: missing field {fname!r}")
            fields.append(_genesis_field(ftag, given.pop(fname), ln_no))
        if given:
            raise GenesisError(f"line {ln_no}: unknown fields {sorted(given)}")
        out.append(PoolObject(oid, owner, tag, StructV(tag, fields)))
    return out


def _genesis_check_tag(pkg: Package, tag: TypeTag, ln_no: int):
    if not (isinstance(tag, Dt) and is_concrete(tag)):
        raise GenesisError(f"line {ln_no}: pool objects must have a concrete datatype")
    try:
        decl = pkg.tag_decl(tag)
    except KeyError as e:
        raise GenesisError(f"line {ln_no}: {e}") from None
    if not pkg.storable(tag):
        raise GenesisError(f"line {ln_no}: {tag} cannot rest in the pool")
    if len(tag.args) != decl.type_params:
        raise GenesisError(f"line {ln_no}: wrong type argument count for {tag}")


def _genesis_field(ftag: TypeTag, text: str, ln_no: int) -> Value:
    if ftag == BOOL:
        if text not in ("true", "false"):
            raise GenesisError(f"line {ln_no}: bad bool {text!r}")
        return BoolV(text == "true")
    if isinstance(ftag, Prim):
        try:
            v = int(text, 0)
        except ValueError:
            raise GenesisError(f"line {ln_no}: bad integer {text!r}") from None
        if not 0 <= v < (1 << PRIM_BITS[ftag.name]):
            raise GenesisError(f"line {ln_no}: {v} does not fit {ftag}")
        return IntV(ftag.name, v)
    raise GenesisError(f"line {ln_no}: only primitive fields are supported in genesis")


# transactions --------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class Lit:
    tag: TypeTag
    value: object       # int | bool


@dataclass(frozen=True, slots=True)
class LitVec:
    elem: TypeTag
    values: tuple


@dataclass(frozen=True, slots=True)
class ResultRef:
    call: int
    out: int


@dataclass(frozen=True, slots=True)
class PoolRef:
    obj_id: str


@dataclass(frozen=True, slots=True)
class CallSpec:
    module: str
    name: str
    targs: tuple
    args: tuple

    @property
    def qualified(self) -> str:
        return f"{self.module}::{self.name}"


@dataclass(frozen=True, slots=True)
class Transaction:
    calls: tuple


def render_txn(txn: Transaction) -> str:
    lines = []
    for call in txn.calls:
        t = "<" + ",".join(str(a) for a in call.targs) + ">" if call.targs else ""
        parts = [f"call {call.module}::{call.name}{t}"]
        for b in call.args:
            parts.append(_render_binding(b))
        lines.append(" ".join(parts))
    return "\n".join(lines) + ("\n" if lines else "")


def _render_binding(b) -> str:
    if isinstance(b, Lit):
        if b.tag == BOOL:
            return "true" if b.value else "false"
        return str(b.value)
    if isinstance(b, LitVec):
        if b.elem == BOOL:
            return "[" + ",".join("true" if v else "false" for v in b.values) + "]"
        return "[" + ",".join(str(v) for v in b.values) + "]"
    if isinstance(b, ResultRef):
        return f"r{b.call}.{b.out}"
    if isinstance(b, PoolRef):
        return f"@{b.obj_id}"
    raise ValueError(f"unknown binding {b!r}")


def parse_txn(text: str, pkg: Package) -> Transaction:
    """Parse the replay format; literals are typed from the signature."""
    calls: list[CallSpec] = []
    for ln_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = _tokenize_call(line, ln_no)
        if toks[0] != "call" or len(toks) < 2:
            raise TxValidationError(f"line {ln_no}: expected 'call module::fn ...'")
        target = toks[1]
        targs: tuple = ()
        if "<" in target:
            base, _, targ_text = target.partition("<")
            if not targ_text.endswith(">"):
                raise TxValidationError(f"line {ln_no}: unterminated type arguments")
            try:
                targs = tuple(parse_tag(p) for p in _split_top(targ_text[:-1]))
            except ValueError as e:
                raise TxValidationError(f"line {ln_no}: {e}") from None
            target = base
        module, sep, name = target.partition("::")
        if not sep:
            raise TxValidationError(f"line {ln_no}: call target needs module::name")
        fn = pkg.function(module, name)
        if fn is None:
            raise TxValidationError(f"line {ln_no}: unknown function {target}")
        try:
            ins, _outs = signature_of(fn, targs)
        except Exception as e:
            raise TxValidationError(f"line {ln_no}: {e}") from None
        arg_toks = toks[2:]
        if len(arg_toks) != len(ins):
            raise TxValidationError(
                f"line {ln_no}: {target} takes {len(ins)} argument(s), got {len(arg_toks)}")
        args = tuple(
            _parse_binding(tok, tag, ln_no) for tok, tag in zip(arg_toks, ins))
        calls.append(CallSpec(module, name, targs, args))
    return Transaction(tuple(calls))


def _tokenize_call(line: str, ln_no: int) -> list[str]:
    toks, cur, depth = [], [], 0
    for ch in line:
        if ch in "<[":
            depth += 1
        elif ch in ">]":
            depth -= 1
        if ch.isspace() and depth == 0:
            if cur:
                toks.append("".join(cur))
                cur = []
        else:
            cur.append(ch)
    if depth != 0:
        raise TxValidationError(f"line {ln_no}: unbalanced brackets")
    if cur:
        toks.append("".join(cur))
    return toks


def _split_top(s: str) -> list[str]:
    out, cur, depth = [], [], 0
    for ch in s:
        if ch == "<":
            depth += 1
        elif ch == ">":
            depth -= 1
        if ch == "," and depth == 0:
            out.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if cur:
        out.append("".join(cur))
    return [p.strip() for p in out if p.strip()]


def _parse_binding(tok: str, tag: TypeTag, ln_no: int):
    if tok.startswith("@"):
        return PoolRef(tok[1:])
    if tok.startswith("r") and "." in tok:
        ci, _, oi = tok[1:].partition(".")
        if ci.isdigit() and oi.isdigit():
            return ResultRef(int(ci), int(oi))
    if tok.startswith("["):
        if not (isinstance(tag, Vec) and isinstance(tag.elem, Prim)):
            raise TxValidationError(f"line {ln_no}: vector literal for non-vector input {tag}")
        if not tok.endswith("]"):
            raise TxValidationError(f"line {ln_no}: unterminated vector literal")
        inner = tok[1:-1]
        items = [p.strip() for p in inner.split(",") if p.strip()]
        return LitVec(tag.elem, tuple(_parse_scalar(p, tag.elem, ln_no) for p in items))
    if not isinstance(tag, Prim):
        raise TxValidationError(f"line {ln_no}: literal {tok!r} for non-primitive input {tag}")
    return Lit(tag, _parse_scalar(tok, tag, ln_no))


def _parse_scalar(tok: str, tag: Prim, ln_no: int):
    if tag == BOOL:
        if tok not in ("true", "false"):
            raise TxValidationError(f"line {ln_no}: bad bool literal {tok!r}")
        return tok == "true"
    try:
        v = int(tok, 0)
    except ValueError:
        raise TxValidationError(f"line {ln_no}: bad integer literal {tok!r}") from None
    if not 0 <= v < (1 << PRIM_BITS[tag.name]):
        raise TxValidationError(f"line {ln_no}: {v} does not fit {tag}")
    return v


# execution ------------------------------------------------------------------

class _Ctx:
    __slots__ = ("pkg", "world", "gas", "recorder", "digest", "coverage")

    def __init__(self, pkg: Package, world: World, gas: int, recorder, digest: Digest):
        self.pkg = pkg
        self.world = world
        self.gas = gas
        self.recorder = recorder
        self.digest = digest
        self.coverage: set = set()

    def charge(self, site):
        self.gas -= 1
        if self.gas < 0:
            raise VMAbort("gas", site)


def execute_transaction(pkg: Package, world: World, txn: Transaction, *,
                        gas_limit: int = DEFAULT_GAS_LIMIT,
                        recorder=None) -> ExecResult:
    """Run one transaction against a fork of the world."""
    w = world.fork()
    before = w.sender_balances()
    digest = Digest()
    ctx = _Ctx(pkg, w, gas_limit, recorder, digest)
    results: list[list] = []
    try:
        for ci, call in enumerate(txn.calls):
            fn = pkg.function(call.module, call.name)
            if fn is None:
                raise TxValidationError(f"call {ci}: unknown function {call.qualified}")
            if not fn.public:
                raise TxValidationError(f"call {ci}: {call.qualified} is not public")
            if fn.name == "init":
                raise TxValidationError(f"call {ci}: init cannot be called")
            for ta in call.targs:
                if not is_concrete(ta):
                    raise TxValidationError(f"call {ci}: type argument {ta} is not concrete")
            try:
                ins, _outs = signature_of(fn, call.targs)
            except Exception as e:
                raise TxValidationError(f"call {ci}: {e}") from None
            if len(call.args) != len(ins):
                raise TxValidationError(
                    f"call {ci}: {call.qualified} takes {len(ins)} argument(s)")
            args = [
                _bind_arg(ctx, results, ci, pos, binding, tag, mode)
                for pos, (binding, (tag, (_t2, mode))) in enumerate(
                    zip(call.args, zip(ins, fn.inputs)))
            ]
            outs = _run_function(ctx, fn, call.targs, args,
                                 entry_site=(pkg.fn_gid(fn), -1 - ci))
            results.append(list(outs))
        transferred = _sweep_leftovers(ctx, txn, results)
        status = "success"
        abort = None
    except VMAbort as a:
        status = {"gas": "gas", "leak": "leak"}.get(a.kind, "abort")
        abort = a
    except TxValidationError as e:
        return ExecResult(status="invalid", error=str(e), digest=digest,
                          balances_before=before, balances_after=dict(before),
                          coverage=frozenset(ctx.coverage),
                          gas_used=gas_limit - ctx.gas)
    if status == "success":
        after = w.sender_balances()
    else:
        after = dict(before)  # atomic revert
        transferred = ()
    return ExecResult(
        status=status,
        abort_kind=abort.kind if abort else None,
        abort_site=abort.site if abort else None,
        abort_code=abort.code if abort else None,
        gas_used=gas_limit - max(ctx.gas, 0),
        coverage=frozenset(ctx.coverage),
        digest=digest,
        balances_before=before,
        balances_after=after,
        transferred=transferred,
    )


def _bind_arg(ctx: _Ctx, results, ci: int, pos: int, binding, tag: TypeTag, mode: str):
    pkg = ctx.pkg
    if isinstance(binding, Lit):
        if mode != BY_VALUE or not isinstance(tag, Prim):
            raise TxValidationError(f"call {ci} arg {pos}: literal cannot bind {tag} ({mode})")
        if binding.tag != tag:
            raise TxValidationError(f"call {ci} arg {pos}: literal type {binding.tag} != {tag}")
        if tag == BOOL:
            if not isinstance(binding.value, bool):
                raise TxValidationError(f"call {ci} arg {pos}: expected a bool literal")
            sym = None
            if ctx.recorder is not None:
                sym = ctx.recorder.lit_var((ci, pos, None), "bool", int(binding.value))
            return BoolV(binding.value, sym=sym)
        v = binding.value
        if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v < (1 << PRIM_BITS[tag.name]):
            raise TxValidationError(f"call {ci} arg {pos}: literal {v!r} does not fit {tag}")
        sym = None
        if ctx.recorder is not None:
            sym = ctx.recorder.lit_var((ci, pos, None), tag.name, v)
        return IntV(tag.name, v, sym=sym)
    if isinstance(binding, LitVec):
        if mode != BY_VALUE or not (isinstance(tag, Vec) and isinstance(tag.elem, Prim)):
            raise TxValidationError(f"call {ci} arg {pos}: vector literal cannot bind {tag}")
        if binding.elem != tag.elem:
            raise TxValidationError(f"call {ci} arg {pos}: element type mismatch")
        items = []
        for k, v in enumerate(binding.values):
            if tag.elem == BOOL:
                if not isinstance(v, bool):
                    raise TxValidationError(f"call {ci} arg {pos}: expected bool elements")
                sym = None
                if ctx.recorder is not None:
                    sym = ctx.recorder.lit_var((ci, pos, k), "bool", int(v))
                items.append(BoolV(v, sym=sym))
            else:
                if isinstance(v, bool) or not isinstance(v, int) \
                        or not 0 <= v < (1 << PRIM_BITS[tag.elem.name]):
                    raise TxValidationError(
                        f"call {ci} arg {pos}: element {v!r} does not fit {tag.elem}")
                sym = None
                if ctx.recorder is not None:
                    sym = ctx.recorder.lit_var((ci, pos, k), tag.elem.name, v)
                items.append(IntV(tag.elem.name, v, sym=sym))
        return VecV(tag.elem, items)
    if isinstance(binding, ResultRef):
        if mode != BY_VALUE:
            raise TxValidationError(f"call {ci} arg {pos}: results bind by value only")
        if not (0 <= binding.call < len(results)):
            raise TxValidationError(f"call {ci} arg {pos}: result r{binding.call}.{binding.out} "
                                    "does not exist yet")
        outs = results[binding.call]
        if not (0 <= binding.out < len(outs)):
            raise TxValidationError(f"call {ci} arg {pos}: no output {binding.out} "
                                    f"on call {binding.call}")
        v = outs[binding.out]
        if v is None:
            raise TxValidationError(f"call {ci} arg {pos}: r{binding.call}.{binding.out} "
                                    "was already consumed")
        if _value_tag(v) != tag:
            raise TxValidationError(f"call {ci} arg {pos}: r{binding.call}.{binding.out} "
                                    f"has type {_value_tag(v)}, expected {tag}")
        outs[binding.out] = None
        return v
    if isinstance(binding, PoolRef):
        obj = ctx.world.objects.get(binding.obj_id)
        if obj is None:
            raise TxValidationError(f"call {ci} arg {pos}: no pool object @{binding.obj_id}")
        if obj.tag != tag:
            raise TxValidationError(f"call {ci} arg {pos}: @{binding.obj_id} has type "
                                    f"{obj.tag}, expected {tag}")
        if mode == BY_VALUE:
            del ctx.world.objects[binding.obj_id]
            return obj.value
        return RefV(binding.obj_id, mode == BY_MUT)
    raise TxValidationError(f"call {ci} arg {pos}: unknown binding {binding!r}")


def _value_tag(v) -> TypeTag:
    if isinstance(v, IntV):
        return Prim(v.width)
    if isinstance(v, BoolV):
        return BOOL
    if isinstance(v, VecV):
        return Vec(v.elem)
    if isinstance(v, StructV):
        return v.tag
    raise TxValidationError(f"references cannot be retyped: {v!r}")


def _sweep_leftovers(ctx: _Ctx, txn: Transaction, results) -> tuple:
    pkg = ctx.pkg
    transferred = []
    for ci, outs in enumerate(results):
        for oi, v in enumerate(outs):
            if v is None:
                continue
            tag = _value_tag(v)
            if pkg.droppable(tag):
                continue
            if isinstance(v, StructV) and pkg.storable(tag):
                ctx.world.add_sender_object(tag, v, f"res{ci}_{oi}")
                transferred.append((ci, oi, str(tag)))
                continue
            if isinstance(v, VecV) and pkg.storable(tag) \
                    and all(isinstance(x, StructV) for x in v.items):
                for x in v.items:
                    ctx.world.add_sender_object(x.tag, x, f"res{ci}_{oi}")
                    transferred.append((ci, oi, str(x.tag)))
                continue
            fn = txn.calls[ci]
            raise VMAbort("leak", (pkg.fn_gid(pkg.function(fn.module, fn.name)), -1))
    return tuple(transferred)


# the interpreter ------------------------------------------------------------

class _Frame:
    __slots__ = ("fn", "gid", "targs", "params", "locals", "pc", "stack")

    def __init__(self, pkg: Package, fn: FunctionDecl, targs: tuple, args: list):
        self.fn = fn
        self.gid = pkg.fn_gid(fn)
        self.targs = targs
        self.params = args
        self.locals = [None] * len(fn.locals)
        self.pc = 0
        self.stack: list = []


def _run_function(ctx: _Ctx, fn: FunctionDecl, targs: tuple, args: list,
                  entry_site: tuple | None = None):
    if fn.is_native:
        site = entry_site if entry_site is not None else (ctx.pkg.fn_gid(fn), 0)
        ctx.charge(site)
        return _run_native(ctx, fn, targs, args, site)
    frames = [_Frame(ctx.pkg, fn, targs, args)]
    while frames:
        fr = frames[-1]
        ins = fr.fn.body[fr.pc]
        op = ins[0]
        site = (fr.gid, fr.pc)
        ctx.charge(site)

        if op == "ld_const":
            tag, raw = ins[1], ins[2]
            fr.stack.append(BoolV(raw) if tag == BOOL else IntV(tag.name, raw))
            fr.pc += 1
        elif op == "ld_param":
            v = fr.params[ins[1]]
            fr.stack.append(clone_value(v) if isinstance(v, (VecV, StructV)) else v)
            fr.pc += 1
        elif op == "copy_local":
            v = fr.locals[ins[1]]
            fr.stack.append(clone_value(v) if isinstance(v, (VecV, StructV)) else v)
            fr.pc += 1
        elif op == "move_local":
            fr.stack.append(fr.locals[ins[1]])
            fr.locals[ins[1]] = None
            fr.pc += 1
        elif op == "store_local":
            fr.locals[ins[1]] = fr.stack.pop()
            fr.pc += 1
        elif op in ("add", "sub", "mul", "div", "mod", "bit_and", "bit_or", "bit_xor"):
            b = fr.stack.pop()
            a = fr.stack.pop()
            fr.stack.append(_do_arith(ctx, _BINOP_NAME.get(op, op), a, b, site))
            fr.pc += 1
        elif op in ("shl", "shr"):
            amt = fr.stack.pop()
            a = fr.stack.pop()
            fr.stack.append(_do_shift(ctx, op, a, amt, site))
            fr.pc += 1
        elif op == "not":
            v = fr.stack.pop()
            sym = None
            if ctx.recorder is not None and v.sym is not None:
                sym = SExpr("not", (v.sym,), "bool")
            fr.stack.append(BoolV(not v.val, sym=sym))
            fr.pc += 1
        elif op in ("eq", "neq", "lt", "le", "gt", "ge"):
            b = fr.stack.pop()
            a = fr.stack.pop()
            fr.stack.append(_do_cmp(ctx, op, a, b, site))
            fr.pc += 1
        elif op == "cast":
            fr.stack.append(_do_cast(ctx, ins[1], fr.stack.pop(), site))
            fr.pc += 1
        elif op == "branch":
            fr.pc = ins[1]
        elif op in ("br_true", "br_false"):
            cond = fr.stack.pop()
            jump = cond.val if op == "br_true" else not cond.val
            ctx.coverage.add((fr.gid, fr.pc, 1 if jump else 0))
            d = ctx.digest
            d.branch_count[site] = d.branch_count.get(site, 0) + 1
            if site not in d.branch_orig:
                d.branch_orig[site] = cond.orig
            elif d.branch_orig[site] != cond.orig:
                d.branch_changed.add(site)
            if ctx.recorder is not None and cond.sym is not None:
                fact = cond.sym if cond.val else SExpr("not", (cond.sym,), "bool")
                other_arm = (fr.gid, fr.pc, 0 if jump else 1)
                ctx.recorder.record_branch(site, fact, other_arm)
            fr.pc = ins[1] if jump else fr.pc + 1
        elif op == "abort":
            raise VMAbort("abort", site, code=ins[1])
        elif op == "ret":
            outs = fr.stack
            frames.pop()
            if frames:
                frames[-1].stack.extend(outs)
            else:
                return outs
        elif op == "call":
            _, mname, fname, raw_targs = ins
            callee = ctx.pkg.function(mname, fname)
            call_targs = tuple(substitute(t, fr.targs) for t in raw_targs)
            nargs = len(callee.inputs)
            cargs = fr.stack[len(fr.stack) - nargs:] if nargs else []
            del fr.stack[len(fr.stack) - nargs:]
            fr.pc += 1
            if callee.is_native:
                fr.stack.extend(_run_native(ctx, callee, call_targs, cargs, site))
            else:
                frames.append(_Frame(ctx.pkg, callee, call_targs, cargs))
        elif op == "pack":
            _, mname, dname, raw_targs = ins
            targs2 = tuple(substitute(t, fr.targs) for t in raw_targs)
            decl = ctx.pkg.datatype(mname, dname)
            n = len(decl.fields)
            fields = fr.stack[len(fr.stack) - n:] if n else []
            del fr.stack[len(fr.stack) - n:]
            fr.stack.append(StructV(Dt(mname, dname, targs2), fields))
            fr.pc += 1
        elif op == "unpack":
            v = fr.stack.pop()
            fr.stack.extend(v.fields)
            fr.pc += 1
        elif op == "vec_new":
            fr.stack.append(VecV(substitute(ins[1], fr.targs), []))
            fr.pc += 1
        elif op == "vec_push":
            elem = fr.stack.pop()
            fr.stack[-1].items.append(elem)
            fr.pc += 1
        elif op == "vec_pop":
            vec = fr.stack[-1]
            if not vec.items:
                raise VMAbort("vecidx", site)
            fr.stack.append(vec.items.pop())
            fr.pc += 1
        elif op == "vec_len":
            fr.stack.append(IntV("u64", len(fr.stack[-1].items)))
            fr.pc += 1
        elif op == "vec_borrow":
            idx = fr.stack.pop()
            vec = fr.stack[-1]
            _guard_vec_idx(ctx, idx, len(vec.items), site)
            if idx.val >= len(vec.items):
                raise VMAbort("vecidx", site)
            v = vec.items[idx.val]
            fr.stack.append(clone_value(v) if isinstance(v, (VecV, StructV)) else v)
            fr.pc += 1
        elif op == "emit_event":
            v = fr.stack.pop()
            payload = v.val if isinstance(v, (IntV, BoolV)) else repr(v)
            ctx.digest.events.append((ins[1], payload))
            fr.pc += 1
        else:
            raise VMAbort("abort", site, code=-1)
    return []


def _record_guard(ctx: _Ctx, kind: str, site, expr: SExpr):
    if ctx.recorder is not None:
        ctx.recorder.record(kind, site, expr)


def _do_arith(ctx: _Ctx, op: str, a: IntV, b: IntV, site):
    w = a.width
    bits = PRIM_BITS[w]
    maxv = (1 << bits) - 1
    symbolic = ctx.recorder is not None and (a.sym is not None or b.sym is not None)
    if symbolic:
        sa, sb = _sym_of(a), _sym_of(b)
        if op == "add":
            wide = SExpr("add", (sa, sb), "wide")
            ok = a.val + b.val <= maxv
            fact = SExpr("le", (wide, sconst(maxv, w)), "bool")
            _record_guard(ctx, "overflow", site, fact if ok else SExpr("not", (fact,), "bool"))
        elif op == "sub":
            ok = a.val >= b.val
            fact = SExpr("ge", (sa, sb), "bool")
            _record_guard(ctx, "overflow", site, fact if ok else SExpr("not", (fact,), "bool"))
        elif op == "mul":
            wide = SExpr("mul", (sa, sb), "wide")
            ok = a.val * b.val <= maxv
            fact = SExpr("le", (wide, sconst(maxv, w)), "bool")
            _record_guard(ctx, "overflow", site, fact if ok else SExpr("not", (fact,), "bool"))
        elif op in ("div", "mod"):
            ok = b.val != 0
            fact = SExpr("neq", (sb, sconst(0, w)), "bool")
            _record_guard(ctx, "overflow", site, fact if ok else SExpr("not", (fact,), "bool"))
    taint = a.taint | b.taint
    if op == "mul" and taint:
        ctx.digest.amplified.setdefault(site, frozenset(taint))
    try:
        r = arith_op(op, w, a.val, b.val)
    except ArithAbort as e:
        raise VMAbort(e.kind, site) from None
    if op == "div" and b.val != 0 and a.val % b.val != 0:
        ctx.digest.lossy_divs.setdefault(site, (a.val, b.val))
        taint = taint | {site}
    sym = None
    if symbolic:
        sym = SExpr(op, (_sym_of(a), _sym_of(b)), w)
    return IntV(w, r, sym=sym, taint=taint)


def _do_shift(ctx: _Ctx, op: str, a: IntV, amt: IntV, site):
    w = a.width
    bits = PRIM_BITS[w]
    symbolic = ctx.recorder is not None and (a.sym is not None or amt.sym is not None)
    if symbolic and amt.sym is not None:
        ok = amt.val < bits
        fact = SExpr("lt", (_sym_of(amt), sconst(bits, "u8")), "bool")
        _record_guard(ctx, "shl", site, fact if ok else SExpr("not", (fact,), "bool"))
    try:
        r = arith_op(op, w, a.val, amt.val)
    except ArithAbort as e:
        raise VMAbort(e.kind, site) from None
    if op == "shl":
        discarded = a.val >> (bits - amt.val) if amt.val else 0
        if discarded:
            ctx.digest.shl_discards.setdefault(site, (a.val, amt.val, discarded))
        elif symbolic and a.sym is not None and amt.sym is None and amt.val:
            # the no-discard guard holds; record it so a flip can aim
            # at the truncating path
            fact = SExpr("lt", (_sym_of(a), sconst(1 << (bits - amt.val), w)), "bool")
            _record_guard(ctx, "shl", site, fact)
    sym = None
    if symbolic:
        sym = SExpr(op, (_sym_of(a), _sym_of(amt)), w)
    return IntV(w, r, sym=sym, taint=a.taint | amt.taint)


def _do_cmp(ctx: _Ctx, op: str, a, b, site):
    res = _CMP[op](a.val, b.val)
    if op in ("eq", "neq") and isinstance(a, BoolV):
        if _is_const(a) or _is_const(b):
            ctx.digest.bool_const_cmp.setdefault(site, True)
    sym = None
    if ctx.recorder is not None and (a.sym is not None or b.sym is not None):
        sym = SExpr(op, (_sym_of(a), _sym_of(b)), "bool")
    orig = (_as_int(a.val), _as_int(b.val))
    return BoolV(res, sym=sym, orig=orig)


def _is_const(v) -> bool:
    return v.sym is None or v.sym.op == "const"


def _as_int(v) -> int:
    return int(v)


def _do_cast(ctx: _Ctx, to_width: str, a: IntV, site):
    if a.width == to_width:
        ctx.digest.cast_same.setdefault(site, to_width)
    maxv = (1 << PRIM_BITS[to_width]) - 1
    if ctx.recorder is not None and a.sym is not None and PRIM_BITS[to_width] < PRIM_BITS[a.width]:
        ok = a.val <= maxv
        fact = SExpr("le", (a.sym, sconst(maxv, a.width)), "bool")
        _record_guard(ctx, "cast", site, fact if ok else SExpr("not", (fact,), "bool"))
    try:
        r = cast_op(a.val, to_width)
    except ArithAbort as e:
        raise VMAbort(e.kind, site) from None
    return IntV(to_width, r, sym=a.sym, taint=a.taint)


def _guard_vec_idx(ctx: _Ctx, idx: IntV, length: int, site):
    if ctx.recorder is not None and idx.sym is not None:
        ok = idx.val < length
        fact = SExpr("lt", (idx.sym, sconst(length, "u64")), "bool")
        _record_guard(ctx, "vecidx", site, fact if ok else SExpr("not", (fact,), "bool"))


# builtin coin functions ------------------------------------------------------

def _deref(ctx: _Ctx, ref: RefV, site) -> StructV:
    obj = ctx.world.objects.get(ref.obj_id)
    if obj is None:
        raise VMAbort("abort", site, code=-2)
    return obj.value


def _run_native(ctx: _Ctx, fn: FunctionDecl, targs: tuple, args: list, site) -> list:
    name = fn.name
    if name == "coin_zero":
        return [StructV(coin_tag(targs[0]), [IntV("u64", 0)])]
    if name == "coin_value":
        coin = _deref(ctx, args[0], site)
        v = coin.fields[0]
        return [IntV("u64", v.val, sym=v.sym, taint=v.taint)]
    if name == "coin_split":
        coin = _deref(ctx, args[0], site)
        amount = args[1]
        v = coin.fields[0]
        new_val = _do_arith(ctx, "sub", v, amount, site)
        coin.fields[0] = new_val
        return [StructV(coin_tag(targs[0]),
                        [IntV("u64", amount.val, sym=amount.sym, taint=amount.taint)])]
    if name == "coin_join":
        coin = _deref(ctx, args[0], site)
        other = args[1]
        coin.fields[0] = _do_arith(ctx, "add", coin.fields[0], other.fields[0], site)
        return []
    if name == "transfer_to_sender":
        v = args[0]
        tag = _value_tag(v)
        if not (isinstance(v, StructV) and ctx.pkg.storable(tag)):
            raise VMAbort("abort", site, code=-3)
        ctx.world.add_sender_object(tag, v, f"xfer{site[0]}_{site[1]}")
        return []
    raise VMAbort("abort", site, code=-4)
