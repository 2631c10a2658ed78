"""Constraint solving over shadow expressions.

Facts are boolean SExpr trees over input variables.  Solving runs three
stages of increasing brute force:

  1. exact propagation: unique algebraic inversions (add, sub, xor,
     multiplication by an odd constant, shl by a constant) and interval
     refinement by monotone bisection for facts over a single variable;
  2. the refined domains themselves, which either pin variables or
     prove the system empty;
  3. seeded randomized search with local repair, where trial zero is
     the concrete path assignment and violated facts pull one of their
     variables toward a satisfying value, inequalities with a little
     slack so strict bounds end up strictly inside.

"unsat" is only ever reported from exact reasoning (a variable-free
fact that is false, or a domain propagated down to nothing); everything
the search merely fails to crack comes back "unknown".  Any "sat"
answer was re-verified against every fact with plain big integers.
"""
from __future__ import annotations

import random

from .model import PRIM_BITS
from .vm import SExpr

_DUAL = {"eq": "neq", "neq": "eq", "lt": "ge", "ge": "lt", "le": "gt", "gt": "le"}
_CMPS = frozenset(_DUAL)
_MONO_SAFE = frozenset({"const", "var", "add", "sub", "mul", "div", "shl", "shr"})


class _DivZero(Exception):
    pass


def _width_max(width: str) -> int:
    if width == "bool":
        return 1
    return (1 << PRIM_BITS[width]) - 1


def evaluate(e: SExpr, env: dict) -> int:
    """Big-integer evaluation; bools are 0/1.  Width-tagged operations
    wrap the way the machine's value domain does (shl truncates, the
    others wrap modulo the width, which only matters on paths where the
    matching guard fact is violated anyway)."""
    op = e.op
    if op == "const":
        return e.args[0]
    if op == "var":
        return env[e.args[0]]
    if op == "not":
        return 0 if evaluate(e.args[0], env) else 1
    a = evaluate(e.args[0], env)
    b = evaluate(e.args[1], env)
    if op == "eq":
        return int(a == b)
    if op == "neq":
        return int(a != b)
    if op == "lt":
        return int(a < b)
    if op == "le":
        return int(a <= b)
    if op == "gt":
        return int(a > b)
    if op == "ge":
        return int(a >= b)
    wide = e.width == "wide"
    if op == "div":
        if b == 0:
            raise _DivZero()
        return a // b
    if op == "mod":
        if b == 0:
            raise _DivZero()
        return a % b
    if op == "shr":
        return a >> min(b, 1 << 16)
    if op == "shl":
        r = a << min(b, 1 << 16)
        return r if wide else r & _width_max(e.width)
    if op == "add":
        r = a + b
    elif op == "sub":
        r = a - b
    elif op == "mul":
        r = a * b
    elif op == "band":
        r = a & b
    elif op == "bor":
        r = a | b
    elif op == "bxor":
        r = a ^ b
    else:
        raise ValueError(f"unknown op {op}")
    return r if wide else r % (_width_max(e.width) + 1)


def fact_true(fact: SExpr, env: dict) -> bool:
    try:
        return bool(evaluate(fact, env))
    except _DivZero:
        return False


def normalize(fact: SExpr) -> SExpr:
    """Push negations into comparisons and give bare booleans a
    comparison shape, so every fact is `cmp(a, b)`."""
    if fact.op == "not":
        inner = fact.args[0]
        if inner.op == "not":
            return normalize(inner.args[0])
        if inner.op in _CMPS:
            return SExpr(_DUAL[inner.op], inner.args, "bool")
        return SExpr("eq", (inner, SExpr("const", (0,), "bool")), "bool")
    if fact.op in _CMPS:
        return fact
    return SExpr("eq", (fact, SExpr("const", (1,), "bool")), "bool")


def _occurrences(e: SExpr, acc: dict | None = None) -> dict:
    if acc is None:
        acc = {}
    if e.op == "var":
        acc[e.args[0]] = acc.get(e.args[0], 0) + 1
    elif e.op != "const":
        for a in e.args:
            _occurrences(a, acc)
    return acc


def _mono_safe(e: SExpr) -> bool:
    if e.op in ("const", "var"):
        return True
    return e.op in _MONO_SAFE and all(_mono_safe(a) for a in e.args)


_UNSAT = "unsat-fact"


def _invert(e: SExpr, target: int, env: dict):
    """Solve e == target when e holds exactly one variable occurrence
    on a chain of uniquely invertible operations.

    Returns (vid, value), None when the chain is not invertible, or
    _UNSAT when no value at all can satisfy the equation.
    """
    if e.op == "var":
        vid = e.args[0]
        if 0 <= target <= _width_max(e.width):
            return (vid, target)
        return _UNSAT
    if e.op == "const":
        return None
    if e.op == "not":
        if target not in (0, 1):
            return _UNSAT
        return _invert(e.args[0], 1 - target, env)
    if len(e.args) != 2:
        return None
    a, b = e.args
    a_vars = _occurrences(a)
    var_side, const_side, var_left = (a, b, True) if a_vars else (b, a, False)
    try:
        c = evaluate(const_side, env)
    except _DivZero:
        return None
    wide = e.width == "wide"
    m = None if wide else _width_max(e.width) + 1
    op = e.op
    if op == "add":
        want = target - c if wide else (target - c) % m
        if want < 0:
            return _UNSAT
        return _invert(var_side, want, env)
    if op == "sub":
        if var_left:
            want = target + c if wide else (target + c) % m
        else:
            want = c - target if wide else (c - target) % m
        if want < 0:
            return _UNSAT
        return _invert(var_side, want, env)
    if op == "bxor":
        return _invert(var_side, target ^ c, env)
    if op == "mul":
        if wide:
            if c == 0:
                return _UNSAT if target != 0 else None
            if target % c:
                return _UNSAT
            return _invert(var_side, target // c, env)
        if c % 2 == 1:
            return _invert(var_side, (target * pow(c, -1, m)) % m, env)
        return None
    if op == "shl" and var_left and not wide:
        # (x << c) truncated: the low c bits of the target must be zero
        if target & ((1 << c) - 1):
            return _UNSAT
        return _invert(var_side, target >> c, env)
    return None


def _first_true(lo: int, hi: int, pred) -> int:
    """Smallest x in [lo, hi] with pred(x), assuming pred is monotone
    false-then-true; hi + 1 when none."""
    if not pred(hi):
        return hi + 1
    while lo < hi:
        mid = (lo + hi) // 2
        if pred(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


def _refine(op: str, gexpr: SExpr, k: int, vid: tuple, dom: tuple, base: dict):
    """Narrow dom for the fact `g(x) op k` with g monotone in x.

    Returns the new (lo, hi), () for empty, or None to skip."""
    lo, hi = dom

    def g(x: int):
        return evaluate(gexpr, {**base, vid: x})

    try:
        glo, ghi = g(lo), g(hi)
    except _DivZero:
        return None
    inc = glo <= ghi
    try:
        if op == "eq":
            if inc:
                x0 = _first_true(lo, hi, lambda x: g(x) >= k)
                if x0 > hi or g(x0) != k:
                    return ()
                x1 = _first_true(x0, hi, lambda x: g(x) > k) - 1
            else:
                x0 = _first_true(lo, hi, lambda x: g(x) <= k)
                if x0 > hi or g(x0) != k:
                    return ()
                x1 = _first_true(x0, hi, lambda x: g(x) < k) - 1
            return (x0, x1)
        if op in ("le", "lt"):
            good = (lambda v: v <= k) if op == "le" else (lambda v: v < k)
            if inc:
                # true prefix
                if not good(glo):
                    return ()
                x1 = _first_true(lo, hi, lambda x: not good(g(x))) - 1
                return (lo, x1)
            if not good(ghi):
                return ()
            x0 = _first_true(lo, hi, lambda x: good(g(x)))
            return (x0, hi)
        if op in ("ge", "gt"):
            good = (lambda v: v >= k) if op == "ge" else (lambda v: v > k)
            if inc:
                if not good(ghi):
                    return ()
                x0 = _first_true(lo, hi, lambda x: good(g(x)))
                return (x0, hi)
            if not good(glo):
                return ()
            x1 = _first_true(lo, hi, lambda x: not good(g(x))) - 1
            return (lo, x1)
    except _DivZero:
        return None
    return None


def solve(facts: list, var_widths: dict, seed_env: dict | None = None,
          rng: random.Random | None = None, *, trials: int = 48,
          repairs: int = 16):
    """Find an assignment satisfying every fact.

    Returns ("sat", env), ("unsat", None) or ("unknown", None).
    """
    rng = rng or random.Random(12345)
    facts = [normalize(f) for f in facts]
    domains: dict = {v: (0, _width_max(w)) for v, w in var_widths.items()}

    # stages 1 and 2: exact propagation to a fixpoint
    changed = True
    rounds = 0
    while changed and rounds < 128:
        changed = False
        rounds += 1
        base = {v: d[0] for v, d in domains.items() if d[0] == d[1]}
        for fact in facts:
            occ = _occurrences(fact)
            free = [v for v in occ if v not in base]
            if not free:
                if not fact_true(fact, base):
                    return ("unsat", None)
                continue
            if len(free) > 1:
                continue
            vid = free[0]
            dom = domains[vid]
            a, b = fact.args
            a_occ = _occurrences(a)
            if vid in a_occ and vid not in _occurrences(b):
                gexpr, other, op = a, b, fact.op
            elif vid in _occurrences(b) and vid not in a_occ:
                gexpr, other, op = b, a, _flip(fact.op)
            else:
                continue  # variable on both sides; leave to the search
            try:
                k = evaluate(other, base)
            except _DivZero:
                continue
            if op == "eq" and sum(_occurrences(gexpr).values()) == 1:
                got = _invert(gexpr, k, base)
                if got is _UNSAT:
                    return ("unsat", None)
                if got is not None:
                    _v, val = got
                    lo = max(dom[0], val)
                    hi = min(dom[1], val)
                    if lo > hi:
                        return ("unsat", None)
                    if (lo, hi) != dom:
                        domains[vid] = (lo, hi)
                        changed = True
                    continue
            if op == "neq" or not _mono_safe(gexpr):
                continue
            new = _refine(op, gexpr, k, vid, dom, base)
            if new is None:
                continue
            if new == ():
                return ("unsat", None)
            lo = max(dom[0], new[0])
            hi = min(dom[1], new[1])
            if lo > hi:
                return ("unsat", None)
            if (lo, hi) != dom:
                domains[vid] = (lo, hi)
                changed = True

    # stage 3: seeded randomized search with repair
    def draw(vid) -> int:
        lo, hi = domains[vid]
        if lo == hi:
            return lo
        if rng.random() < 0.5:
            cands = [c for c in (lo, lo + 1, hi - 1, hi) if lo <= c <= hi]
            return rng.choice(cands)
        return rng.randint(lo, hi)

    def clamp(vid, val) -> int:
        lo, hi = domains[vid]
        return min(max(val, lo), hi)

    for trial in range(trials):
        env = {}
        for vid in var_widths:
            if trial == 0 and seed_env is not None and vid in seed_env:
                env[vid] = clamp(vid, seed_env[vid])
            else:
                env[vid] = draw(vid)
        for _ in range(repairs):
            bad = [f for f in facts if not fact_true(f, env)]
            if not bad:
                return ("sat", env)
            fact = rng.choice(bad)
            if not _repair(fact, env, domains, clamp, rng):
                victims = list(_occurrences(fact))
                if victims:
                    v = rng.choice(victims)
                    env[v] = draw(v)
    return ("unknown", None)


def _flip(op: str) -> str:
    return {"lt": "gt", "le": "ge", "gt": "lt", "ge": "le"}.get(op, op)


def _repair(fact: SExpr, env: dict, domains: dict, clamp, rng) -> bool:
    """Nudge one variable of a violated fact toward satisfaction."""
    a, b = fact.args
    for gexpr, other, op in ((a, b, fact.op), (b, a, _flip(fact.op))):
        occ = _occurrences(gexpr)
        if len(occ) != 1 or sum(occ.values()) != 1:
            continue
        vid = next(iter(occ))
        try:
            k = evaluate(other, env)
        except _DivZero:
            continue
        slack = rng.choice((0, 1, rng.randint(0, 16)))
        if op == "eq":
            target = k
        elif op == "neq":
            env[vid] = clamp(vid, env[vid] + 1 + slack)
            return True
        elif op == "lt":
            target = k - 1 - slack
        elif op == "le":
            target = k - slack
        elif op == "gt":
            target = k + 1 + slack
        elif op == "ge":
            target = k + slack
        else:
            continue
        if target < 0:
            target = 0
        got = _invert(gexpr, target, env)
        if got is None or got is _UNSAT:
            if gexpr.op == "var":
                env[vid] = clamp(vid, target)
                return True
            continue
        vid2, val = got
        env[vid2] = clamp(vid2, val)
        return True
    return False
