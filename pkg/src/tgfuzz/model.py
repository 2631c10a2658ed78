"""Core data model for the contract language.

Type tags, datatype and function declarations, packages, and the small
type algebra the rest of the tool is built on (substitution, hot-potato
classification, signature instantiation, ability queries).
"""
from __future__ import annotations

from dataclasses import dataclass, field

PRIM_INTS = ("u8", "u16", "u32", "u64", "u128", "u256")
PRIMS = ("bool",) + PRIM_INTS
PRIM_BITS = {"u8": 8, "u16": 16, "u32": 32, "u64": 64, "u128": 128, "u256": 256}
ABILITIES = frozenset({"copy", "drop", "store", "key"})

# argument passing modes
BY_VALUE = "val"
BY_REF = "ref"
BY_MUT = "mut"


class ArityError(ValueError):
    """Wrong number of type arguments for a declaration."""


@dataclass(frozen=True, slots=True)
class Prim:
    name: str  # one of PRIMS

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True, slots=True)
class Vec:
    elem: "TypeTag"

    def __str__(self) -> str:
        return f"vector<{self.elem}>"


@dataclass(frozen=True, slots=True)
class Dt:
    module: str
    name: str
    args: tuple = ()

    def __str__(self) -> str:
        if self.args:
            inner = ",".join(str(a) for a in self.args)
            return f"{self.module}::{self.name}<{inner}>"
        return f"{self.module}::{self.name}"


@dataclass(frozen=True, slots=True)
class Param:
    index: int

    def __str__(self) -> str:
        return f"T{self.index}"


TypeTag = Prim | Vec | Dt | Param

BOOL = Prim("bool")
U8 = Prim("u8")
U16 = Prim("u16")
U32 = Prim("u32")
U64 = Prim("u64")
U128 = Prim("u128")
U256 = Prim("u256")


def substitute(tag: TypeTag, args: tuple[TypeTag, ...] | list) -> TypeTag:
    """Replace Parameter(i) with args[i], recursively.

    Raises IndexError when a parameter index is out of range.  Applying an
    empty substitution to a concrete tag returns the tag itself.
    """
    if isinstance(tag, Prim):
        return tag
    if isinstance(tag, Param):
        if tag.index < 0 or tag.index >= len(args):
            raise IndexError(f"type parameter T{tag.index} out of range for {len(args)} argument(s)")
        return args[tag.index]
    if isinstance(tag, Vec):
        elem = substitute(tag.elem, args)
        return tag if elem is tag.elem else Vec(elem)
    new = tuple(substitute(a, args) for a in tag.args)
    return tag if new == tag.args else Dt(tag.module, tag.name, new)


def is_concrete(tag: TypeTag) -> bool:
    if isinstance(tag, Prim):
        return True
    if isinstance(tag, Param):
        return False
    if isinstance(tag, Vec):
        return is_concrete(tag.elem)
    return all(is_concrete(a) for a in tag.args)


def int_width(tag: TypeTag) -> int | None:
    if isinstance(tag, Prim) and tag.name in PRIM_BITS:
        return PRIM_BITS[tag.name]
    return None


@dataclass(frozen=True, slots=True)
class DatatypeDecl:
    module: str
    name: str
    type_params: int
    abilities: frozenset
    fields: tuple  # of (field name, TypeTag)

    def field_tags(self, targs: tuple[TypeTag, ...]) -> tuple[TypeTag, ...]:
        if len(targs) != self.type_params:
            raise ArityError(f"{self.module}::{self.name} expects {self.type_params} type argument(s), got {len(targs)}")
        return tuple(substitute(t, targs) for _, t in self.fields)


def is_hot_potato(decl: DatatypeDecl) -> bool:
    """A type that can neither be discarded nor embedded in storage
    must be consumed in-transaction.  Classification ignores key: the
    graph treats key-only objects as hot so they are never left
    dangling by generated calls, while the interpreter's leftover sweep
    still accepts them into the sender's inventory (storable covers
    store or key)."""
    return not (decl.abilities & {"drop", "store"})


@dataclass(frozen=True, slots=True)
class FunctionDecl:
    module: str
    name: str
    public: bool
    type_params: int
    inputs: tuple   # of (TypeTag, mode)
    outputs: tuple  # of TypeTag
    locals: tuple = ()   # declared extra locals, after the parameters
    body: tuple = ()     # instruction tuples; empty for natives
    is_native: bool = False

    @property
    def qualified(self) -> str:
        return f"{self.module}::{self.name}"

    def local_tags(self) -> tuple[TypeTag, ...]:
        return tuple(t for t, _ in self.inputs) + self.locals


def signature_of(fn: FunctionDecl, targs: tuple[TypeTag, ...]) -> tuple[tuple[TypeTag, ...], tuple[TypeTag, ...]]:
    """Instantiated (input tags, output tags) for a call with the given type args."""
    if len(targs) != fn.type_params:
        raise ArityError(f"{fn.qualified} expects {fn.type_params} type argument(s), got {len(targs)}")
    ins = tuple(substitute(t, targs) for t, _ in fn.inputs)
    outs = tuple(substitute(t, targs) for t in fn.outputs)
    return ins, outs


@dataclass(slots=True)
class Module:
    name: str
    datatypes: dict = field(default_factory=dict)
    functions: dict = field(default_factory=dict)

    @property
    def init_fn(self) -> FunctionDecl | None:
        return self.functions.get("init")


class Package:
    """A parsed, verified package: user modules plus the builtin std module."""

    def __init__(self, modules: dict[str, Module]):
        self.modules = modules
        self._fn_gids: dict[str, int] = {}
        for gid, fn in enumerate(self.all_functions()):
            self._fn_gids[fn.qualified] = gid

    def datatype(self, module: str, name: str) -> DatatypeDecl | None:
        mod = self.modules.get(module)
        return mod.datatypes.get(name) if mod else None

    def function(self, module: str, name: str) -> FunctionDecl | None:
        mod = self.modules.get(module)
        return mod.functions.get(name) if mod else None

    def all_functions(self) -> list[FunctionDecl]:
        out = []
        for mod in self.modules.values():
            out.extend(mod.functions.values())
        return out

    def all_datatypes(self) -> list[DatatypeDecl]:
        out = []
        for mod in self.modules.values():
            out.extend(mod.datatypes.values())
        return out

    def fn_gid(self, fn: FunctionDecl) -> int:
        return self._fn_gids[fn.qualified]

    def fn_by_gid(self, gid: int) -> FunctionDecl:
        return self.all_functions()[gid]

    def total_branch_arms(self) -> int:
        n = 0
        for fn in self.all_functions():
            for instr in fn.body:
                if instr[0] in ("br_true", "br_false"):
                    n += 2
        return n

    def tag_decl(self, tag: Dt) -> DatatypeDecl:
        decl = self.datatype(tag.module, tag.name)
        if decl is None:
            raise KeyError(f"unknown datatype {tag.module}::{tag.name}")
        return decl

    # ability queries over concrete tags -------------------------------

    def has_ability(self, tag: TypeTag, ability: str) -> bool:
        """Does a concrete tag carry the ability.

        Primitives and vectors-of-them have copy/drop/store.  For datatypes
        the declared ability must be present and, for copy/store, the type
        arguments must carry it too.
        """
        if isinstance(tag, Prim):
            return ability in ("copy", "drop", "store")
        if isinstance(tag, Vec):
            return self.has_ability(tag.elem, ability)
        if isinstance(tag, Dt):
            decl = self.tag_decl(tag)
            if ability not in decl.abilities:
                return False
            if ability == "key":
                return True
            return all(self.has_ability(a, ability) for a in tag.args)
        raise ValueError(f"abstract tag {tag} has no abilities")

    def copyable(self, tag: TypeTag) -> bool:
        return self.has_ability(tag, "copy")

    def droppable(self, tag: TypeTag) -> bool:
        return self.has_ability(tag, "drop")

    def storable(self, tag: TypeTag) -> bool:
        if isinstance(tag, Dt) and "key" in self.tag_decl(tag).abilities:
            return True
        return self.has_ability(tag, "store")

    def tag_is_hot_potato(self, tag: TypeTag) -> bool:
        return isinstance(tag, Dt) and is_hot_potato(self.tag_decl(tag))


def parse_tag(text: str) -> TypeTag:
    """Parse a type tag from its canonical rendering."""
    tag, rest = _parse_tag(text.strip())
    if rest.strip():
        raise ValueError(f"trailing input after type: {rest!r}")
    return tag


def _parse_tag(s: str) -> tuple[TypeTag, str]:
    s = s.lstrip()
    for p in PRIMS:
        if s.startswith(p) and not (len(s) > len(p) and (s[len(p)].isalnum() or s[len(p)] == "_")):
            return Prim(p), s[len(p):]
    if s.startswith("vector"):
        rest = s[len("vector"):].lstrip()
        if not rest.startswith("<"):
            raise ValueError("vector needs an element type")
        elem, rest = _parse_tag(rest[1:])
        rest = rest.lstrip()
        if not rest.startswith(">"):
            raise ValueError("unterminated vector type")
        return Vec(elem), rest[1:]
    ident, rest = _take_ident(s)
    if ident is None:
        raise ValueError(f"expected a type at {s[:24]!r}")
    if len(ident) > 1 and ident[0] == "T" and ident[1:].isdigit():
        return Param(int(ident[1:])), rest
    rest = rest.lstrip()
    if not rest.startswith("::"):
        raise ValueError(f"datatype reference {ident!r} needs a module qualifier")
    name, rest = _take_ident(rest[2:])
    if name is None:
        raise ValueError(f"missing datatype name after {ident}::")
    args: list[TypeTag] = []
    rest2 = rest.lstrip()
    if rest2.startswith("<"):
        rest = rest2[1:]
        while True:
            arg, rest = _parse_tag(rest)
            args.append(arg)
            rest = rest.lstrip()
            if rest.startswith(","):
                rest = rest[1:]
                continue
            if rest.startswith(">"):
                rest = rest[1:]
                break
            raise ValueError("unterminated type argument list")
    return Dt(ident, name, tuple(args)), rest


def _take_ident(s: str) -> tuple[str | None, str]:
    s = s.lstrip()
    i = 0
    while i < len(s) and (s[i].isalnum() or s[i] == "_"):
        i += 1
    if i == 0:
        return None, s
    return s[:i], s[i:]
