"""Builtin std module: the Coin type and its native helpers.

Natives with reference parameters can only ever see pool objects (the
generator binds reference modes to pool objects exclusively), so their
implementations mutate pool entries in place.  coin_zero and
transfer_to_sender are private: they are body-level utilities and must
not become type-graph nodes.
"""
from __future__ import annotations

from .model import BY_MUT, BY_REF, BY_VALUE, Dt, DatatypeDecl, FunctionDecl, Module, Param, U64

STD = "std"

COIN = DatatypeDecl(
    module=STD,
    name="Coin",
    type_params=1,
    abilities=frozenset({"store"}),
    fields=(("value", U64),),
)


def coin_tag(arg) -> Dt:
    return Dt(STD, "Coin", (arg,))


def _native(name: str, public: bool, type_params: int, inputs, outputs) -> FunctionDecl:
    return FunctionDecl(
        module=STD,
        name=name,
        public=public,
        type_params=type_params,
        inputs=tuple(inputs),
        outputs=tuple(outputs),
        is_native=True,
    )


NATIVES = (
    _native("coin_zero", False, 1, [], [coin_tag(Param(0))]),
    _native("coin_value", True, 1, [(coin_tag(Param(0)), BY_REF)], [U64]),
    _native("coin_split", True, 1, [(coin_tag(Param(0)), BY_MUT), (U64, BY_VALUE)], [coin_tag(Param(0))]),
    _native("coin_join", True, 1, [(coin_tag(Param(0)), BY_MUT), (coin_tag(Param(0)), BY_VALUE)], []),
    _native("transfer_to_sender", False, 1, [(Param(0), BY_VALUE)], []),
)


def std_module() -> Module:
    mod = Module(name=STD)
    mod.datatypes["Coin"] = COIN
    for fn in NATIVES:
        mod.functions[fn.name] = fn
    return mod


def is_coin(tag) -> bool:
    return isinstance(tag, Dt) and tag.module == STD and tag.name == "Coin"
