"""Concolic execution: collect path constraints, flip, solve, rebuild.

A recorded run shadows every transaction literal with an input variable
and accumulates boolean facts in trace order: branch conditions
(oriented so the recorded fact is what actually held) and the guards of
abortable operations (overflow, division, casts, vector indexing,
shifts).  Flipping negates one or two facts and asks the solver for
inputs that keep the prefix, satisfy the negations, and respect the
remaining non-branch guards; branch facts past the earliest flip are
dropped because control flow diverges there.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

from .model import Package
from .solver import fact_true, solve
from .vm import (
    CallSpec, ExecResult, Lit, LitVec, SExpr, Transaction, World,
    execute_transaction, svar,
)

FACT_CAP = 20_000


class TraceDivergence(Exception):
    """A recorded fact does not hold under the recorded inputs.  This is
    an internal consistency failure, never a property of the target."""


class BindingMiss(Exception):
    """A solved variable does not correspond to a literal in the
    transaction being rebuilt."""


@dataclass(frozen=True, slots=True)
class Fact:
    kind: str            # branch | overflow | cast | vecidx | shl
    site: tuple
    expr: SExpr
    other_arm: tuple | None = None   # for branch: the arm not taken


class PathRecorder:
    """Hooked into the interpreter; builds the path condition."""

    def __init__(self):
        self.facts: list[Fact] = []
        self.var_widths: dict[tuple, str] = {}
        self.var_values: dict[tuple, int] = {}
        self.saturated = False

    # interpreter interface ------------------------------------------

    def lit_var(self, vid: tuple, width: str, concrete: int) -> SExpr:
        self.var_widths[vid] = width
        self.var_values[vid] = concrete
        return svar(vid, width)

    def record(self, kind: str, site: tuple, expr: SExpr):
        self._add(Fact(kind, site, expr))

    def record_branch(self, site: tuple, expr: SExpr, other_arm: tuple):
        self._add(Fact("branch", site, expr, other_arm=other_arm))

    def _add(self, fact: Fact):
        if len(self.facts) >= FACT_CAP:
            self.saturated = True
            return
        if not fact_true(fact.expr, self.var_values):
            raise TraceDivergence(
                f"recorded {fact.kind} fact at {fact.site} is false under its own inputs")
        self.facts.append(fact)


@dataclass
class PathCondition:
    facts: list
    var_widths: dict
    var_values: dict


def collect_constraints(pkg: Package, world: World, txn: Transaction, *,
                        gas_limit: int) -> tuple[ExecResult, PathCondition]:
    rec = PathRecorder()
    res = execute_transaction(pkg, world, txn, gas_limit=gas_limit, recorder=rec)
    return res, PathCondition(rec.facts, rec.var_widths, rec.var_values)


def apply_assignment(txn: Transaction, env: dict) -> Transaction:
    """Rebuild the transaction with solved literal values."""
    calls = []
    for ci, call in enumerate(txn.calls):
        args = []
        for pos, b in enumerate(call.args):
            scalar_id = (ci, pos, None)
            if isinstance(b, Lit) and scalar_id in env:
                v = env[scalar_id]
                args.append(Lit(b.tag, bool(v) if isinstance(b.value, bool) else int(v)))
                continue
            if isinstance(b, LitVec):
                hit = False
                vals = list(b.values)
                for k in range(len(vals)):
                    vid = (ci, pos, k)
                    if vid in env:
                        hit = True
                        vals[k] = bool(env[vid]) if isinstance(vals[k], bool) else int(env[vid])
                if hit:
                    args.append(LitVec(b.elem, tuple(vals)))
                    continue
            args.append(b)
        calls.append(CallSpec(call.module, call.name, call.targs, tuple(args)))
    new = Transaction(tuple(calls))
    for vid in env:
        _check_literal(new, vid)
    return new


def _check_literal(txn: Transaction, vid: tuple):
    ci, pos, elem = vid
    if not (0 <= ci < len(txn.calls) and 0 <= pos < len(txn.calls[ci].args)):
        raise BindingMiss(f"no argument slot for input {vid}")
    b = txn.calls[ci].args[pos]
    if elem is None:
        if not isinstance(b, Lit):
            raise BindingMiss(f"input {vid} is not a literal binding")
    else:
        if not (isinstance(b, LitVec) and 0 <= elem < len(b.values)):
            raise BindingMiss(f"input {vid} is not a vector literal element")


def _negate(e: SExpr) -> SExpr:
    return SExpr("not", (e,), "bool")


def flip_and_solve(pkg: Package, world: World, txn: Transaction, *,
                   covered: set, rng: random.Random, gas_limit: int,
                   solver_budget: int = 8) -> Transaction | None:
    """One concolic step: pick flips, solve, rebuild, deepen.

    covered is the campaign's branch-arm coverage; flips prefer branch
    facts whose opposite arm has not been seen.  Each solver call counts
    against solver_budget.  A satisfying assignment whose re-execution
    pushes the path strictly deeper becomes the new base and flipping
    continues, so a check standing behind an earlier abort is reachable
    within a single call.  A lateral product wins outright; one that
    lost depth without aiming at an uncovered arm is thrown away.
    """
    _res, pc = collect_constraints(pkg, world, txn, gas_limit=gas_limit)
    if not pc.facts or not pc.var_widths:
        return None
    deepest = None
    budget = solver_budget
    while budget > 0:
        n = len(pc.facts)
        preferred = [i for i, f in enumerate(pc.facts)
                     if f.kind == "branch" and f.other_arm is not None
                     and f.other_arm not in covered]
        everything = list(range(n))
        nflips = 1 if rng.random() < 0.8 else 2
        pool = preferred if preferred and rng.random() < 0.8 else everything
        flips = {rng.choice(pool)}
        while len(flips) < nflips and n > 1:
            extra_pool = preferred if preferred and rng.random() < 0.5 else everything
            flips.add(rng.choice(extra_pool))
        first = min(flips)
        goal = []
        for i, fact in enumerate(pc.facts):
            if i in flips:
                goal.append(_negate(fact.expr))
            elif i < first:
                goal.append(fact.expr)
            elif fact.kind != "branch":
                goal.append(fact.expr)
        budget -= 1
        status, env = solve(goal, pc.var_widths, seed_env=pc.var_values, rng=rng)
        if status != "sat":
            continue
        full = dict(pc.var_values)
        full.update(env)
        cand = apply_assignment(txn, full)
        if budget == 0:
            return cand
        res2, pc2 = collect_constraints(pkg, world, cand, gas_limit=gas_limit)
        if len(pc2.facts) > len(pc.facts) and pc2.var_widths:
            txn, pc = cand, pc2
            deepest = cand
            continue
        if len(pc2.facts) < len(pc.facts) and res2.coverage <= covered:
            # went backwards and reached nothing new; keep flipping
            continue
        return cand
    return deepest


# rendering for the constraint dump ------------------------------------

_INFIX = {
    "add": "+", "sub": "-", "mul": "*", "div": "/", "mod": "%",
    "shl": "<<", "shr": ">>", "band": "&", "bor": "|", "bxor": "^",
    "eq": "==", "neq": "!=", "lt": "<", "le": "<=", "gt": ">", "ge": ">=",
}


def render_expr(e: SExpr) -> str:
    if e.op == "const":
        return str(e.args[0])
    if e.op == "var":
        ci, pos, elem = e.args[0]
        base = f"a{ci}.{pos}"
        return base if elem is None else f"{base}[{elem}]"
    if e.op == "not":
        return f"!({render_expr(e.args[0])})"
    a, b = e.args
    return f"({render_expr(a)} {_INFIX[e.op]} {render_expr(b)})"


def render_path_condition(pc: PathCondition) -> str:
    lines = []
    for i, f in enumerate(pc.facts):
        lines.append(f"[{i:4d}] {f.kind:<8} site={f.site[0]}:{f.site[1]} {render_expr(f.expr)}")
    if not lines:
        lines.append("(no recorded constraints)")
    return "\n".join(lines) + "\n"
