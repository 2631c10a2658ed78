"""Parser and serializer for the package text format.

A package is a UTF-8 document made of `module` sections, each holding
`datatype` and `fn` declarations.  Function bodies are line-oriented
assembly with labels.  The full grammar is documented in the README.

parse_package returns a verified Package (the bytecode verifier runs as
the last parse step); serialize_package renders the canonical text form,
and parsing that text yields a structurally identical package.
"""
from __future__ import annotations

import re

from .model import (
    BOOL, BY_MUT, BY_REF, BY_VALUE, PRIM_BITS, PRIMS,
    DatatypeDecl, Dt, FunctionDecl, Module, Package, Param, Prim, TypeTag, Vec,
    _parse_tag, _take_ident,
)
from .stdlib import STD, std_module


class ParseError(Exception):
    def __init__(self, line_no: int, msg: str):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no
        self.msg = msg


# opcodes with no operand
_PLAIN_OPS = {
    "add", "sub", "mul", "div", "mod", "shl", "shr",
    "bit_and", "bit_or", "bit_xor", "not",
    "eq", "neq", "lt", "le", "gt", "ge",
    "vec_push", "vec_pop", "vec_len", "vec_borrow",
    "ret",
}
# opcodes with one integer immediate
_INT_OPS = {"ld_param", "copy_local", "move_local", "store_local", "abort", "emit_event"}
# opcodes with a label operand
_LABEL_OPS = {"branch", "br_true", "br_false"}

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*$")


def parse_package(text: str) -> Package:
    """Parse and verify a package document."""
    modules: dict[str, Module] = {STD: std_module()}
    lines = text.splitlines()
    i = 0
    current: Module | None = None

    def err(msg: str, at: int | None = None):
        raise ParseError((at if at is not None else i) + 1, msg)

    while i < len(lines):
        line = _strip(lines[i])
        if not line:
            i += 1
            continue
        if _kw(line, "module"):
            name = line[len("module"):].strip()
            if not _IDENT.match(name):
                err(f"bad module name {name!r}")
            if name in modules:
                err(f"duplicate module {name!r}" if name != STD else "module name 'std' is reserved")
            current = Module(name=name)
            modules[name] = current
            i += 1
            continue
        if current is None:
            err("declaration outside of a module section")
        if _kw(line, "datatype"):
            i = _parse_datatype(lines, i, current, err)
            continue
        if _kw(line, "public") or _kw(line, "fn"):
            i = _parse_fn(lines, i, current, err)
            continue
        err(f"unexpected directive {line.split()[0]!r}")

    pkg = Package(modules)
    from .verifier import verify_package
    verify_package(pkg)
    return pkg


def _strip(raw: str) -> str:
    if "#" in raw:
        raw = raw[:raw.index("#")]
    return raw.strip()


def _kw(line: str, word: str) -> bool:
    """True when line starts with the keyword followed by a boundary."""
    return line.startswith(word) and (len(line) == len(word) or not (
        line[len(word)].isalnum() or line[len(word)] == "_"))


def _parse_type_params(s: str, err) -> tuple[int, str]:
    """Parse an optional <T0,T1,...> declaration, returning the count."""
    s = s.lstrip()
    if not s.startswith("<"):
        return 0, s
    inner, _, rest = s[1:].partition(">")
    names = [p.strip() for p in inner.split(",") if p.strip()]
    for k, nm in enumerate(names):
        if nm != f"T{k}":
            err(f"type parameters must be declared in order as T0, T1, ... (got {nm!r})")
    if not names:
        err("empty type parameter list")
    return len(names), rest


def _parse_datatype(lines: list[str], i: int, mod: Module, err) -> int:
    header = _strip(lines[i])
    rest = header[len("datatype"):].strip()
    name, rest = _take_ident(rest)
    if not name:
        err("missing datatype name")
    nparams, rest = _parse_type_params(rest, err)
    rest = rest.strip()
    abilities: set[str] = set()
    if rest.startswith("has"):
        ab_part, _, rest2 = rest[3:].partition("{")
        for a in ab_part.split(","):
            a = a.strip()
            if not a:
                continue
            if a not in ("copy", "drop", "store", "key"):
                err(f"unknown ability {a!r}")
            abilities.add(a)
        rest = "{" + rest2 if "{" in rest else ""
    if not rest.startswith("{"):
        err("datatype body must open with '{'")
    body = rest[1:].strip()
    fields: list[tuple[str, TypeTag]] = []
    if body.endswith("}"):  # single-line declaration
        inner = body[:-1].strip()
        if inner:
            err("single-line datatype bodies must be empty")
        end = i
    else:
        if body:
            err("datatype fields start on the next line")
        j = i + 1
        while True:
            if j >= len(lines):
                err("unterminated datatype body", at=i)
            fl = _strip(lines[j])
            if fl == "}":
                end = j
                break
            if fl:
                fl = fl.rstrip(",")
                fname, _, ftype = fl.partition(":")
                fname = fname.strip()
                if not _IDENT.match(fname):
                    err(f"bad field name {fname!r}", at=j)
                try:
                    tag, trail = _parse_tag(ftype)
                except ValueError as e:
                    raise ParseError(j + 1, str(e)) from None
                if trail.strip():
                    err(f"trailing input after field type: {trail.strip()!r}", at=j)
                _check_param_range(tag, nparams, err, j)
                if any(f[0] == fname for f in fields):
                    err(f"duplicate field {fname!r}", at=j)
                fields.append((fname, tag))
            j += 1
    if name in mod.datatypes:
        err(f"duplicate datatype {name!r}")
    mod.datatypes[name] = DatatypeDecl(
        module=mod.name, name=name, type_params=nparams,
        abilities=frozenset(abilities), fields=tuple(fields),
    )
    return end + 1


def _check_param_range(tag: TypeTag, nparams: int, err, at: int):
    if isinstance(tag, Param):
        if tag.index >= nparams:
            err(f"type parameter T{tag.index} not declared", at=at)
    elif isinstance(tag, Vec):
        _check_param_range(tag.elem, nparams, err, at)
    elif isinstance(tag, Dt):
        for a in tag.args:
            _check_param_range(a, nparams, err, at)


def _parse_fn(lines: list[str], i: int, mod: Module, err) -> int:
    header = _strip(lines[i])
    public = header.startswith("public")
    rest = header[len("public"):].lstrip() if public else header
    if not _kw(rest, "fn"):
        err("expected 'fn' after 'public'")
    rest = rest[len("fn"):]
    name, rest = _take_ident(rest)
    if not name:
        err("missing function name")
    nparams, rest = _parse_type_params(rest, err)
    rest = rest.strip()
    if not rest.startswith("("):
        err("missing parameter list")
    depth, j = 0, 0
    for j, ch in enumerate(rest):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth == 0:
                break
    else:
        err("unterminated parameter list")
    params_part, rest = rest[1:j], rest[j + 1:].strip()
    inputs: list[tuple[TypeTag, str]] = []
    for piece in _split_commas(params_part):
        pname, _, ptype = piece.partition(":")
        if not _IDENT.match(pname.strip()):
            err(f"bad parameter {piece.strip()!r}")
        ptype = ptype.strip()
        mode = BY_VALUE
        if ptype.startswith("&mut"):
            mode, ptype = BY_MUT, ptype[4:]
        elif ptype.startswith("&"):
            mode, ptype = BY_REF, ptype[1:]
        try:
            tag = _full_tag(ptype)
        except ValueError as e:
            raise ParseError(i + 1, str(e)) from None
        _check_param_range(tag, nparams, err, i)
        inputs.append((tag, mode))
    outputs: list[TypeTag] = []
    if rest.startswith("->"):
        out_part, _, rest = rest[2:].partition("{")
        rest = "{" + rest
        out_part = out_part.strip()
        if out_part.startswith("("):
            if not out_part.endswith(")"):
                err("unterminated output list")
            out_part = out_part[1:-1]
        for piece in _split_commas(out_part):
            try:
                tag = _full_tag(piece)
            except ValueError as e:
                raise ParseError(i + 1, str(e)) from None
            _check_param_range(tag, nparams, err, i)
            outputs.append(tag)
    if not rest.startswith("{"):
        err("function body must open with '{'")
    if rest[1:].strip():
        err("function body starts on the next line")

    local_tags: list[TypeTag] = []
    body: list[tuple] = []
    labels: dict[str, int] = {}
    fixups: list[tuple[int, str, int]] = []  # (body index, label, line)
    j = i + 1
    end = None
    while j < len(lines):
        ln = _strip(lines[j])
        if ln == "}":
            end = j
            break
        if not ln:
            j += 1
            continue
        if ln.startswith("locals:"):
            if body or local_tags:
                err("locals must be declared before the first instruction", at=j)
            for piece in _split_commas(ln[len("locals:"):]):
                try:
                    local_tags.append(_full_tag(piece))
                except ValueError as e:
                    raise ParseError(j + 1, str(e)) from None
                _check_param_range(local_tags[-1], nparams, err, j)
            j += 1
            continue
        if ln.endswith(":") and _IDENT.match(ln[:-1]):
            label = ln[:-1]
            if label in labels:
                err(f"duplicate label {label!r}", at=j)
            labels[label] = len(body)
            j += 1
            continue
        instr = _parse_instr(ln, j, fixups, len(body))
        body.append(instr)
        j += 1
    if end is None:
        err("unterminated function body", at=i)
    for idx, label, at in fixups:
        if label not in labels:
            raise ParseError(at + 1, f"unknown label {label!r}")
        op = body[idx]
        body[idx] = (op[0], labels[label])
    if name in mod.functions:
        err(f"duplicate function {name!r}")
    mod.functions[name] = FunctionDecl(
        module=mod.name, name=name, public=public, type_params=nparams,
        inputs=tuple(inputs), outputs=tuple(outputs),
        locals=tuple(local_tags), body=tuple(body),
    )
    return end + 1


def _full_tag(text: str) -> TypeTag:
    tag, rest = _parse_tag(text)
    if rest.strip():
        raise ValueError(f"trailing input after type: {rest.strip()!r}")
    return tag


def _split_commas(s: str) -> list[str]:
    """Split on commas not nested inside <...> or (...)."""
    out, depth, cur = [], 0, []
    for ch in s:
        if ch in "<(":
            depth += 1
        elif ch in ">)":
            depth -= 1
        if ch == "," and depth == 0:
            out.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    tail = "".join(cur).strip()
    if tail:
        out.append(tail)
    return [p.strip() for p in out if p.strip()]


def _parse_int(text: str, at: int) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise ParseError(at + 1, f"bad integer {text!r}") from None


def _parse_instr(ln: str, at: int, fixups: list, body_idx: int) -> tuple:
    op, _, rest = ln.partition(" ")
    rest = rest.strip()
    if op in _PLAIN_OPS:
        if rest:
            raise ParseError(at + 1, f"{op} takes no operand")
        return (op,)
    if op in _INT_OPS:
        return (op, _parse_int(rest, at))
    if op in _LABEL_OPS:
        if not _IDENT.match(rest):
            raise ParseError(at + 1, f"{op} needs a label")
        fixups.append((body_idx, rest, at))
        return (op, -1)
    if op == "cast":
        if rest not in PRIMS or rest == "bool":
            raise ParseError(at + 1, f"cast target must be an integer primitive, got {rest!r}")
        return ("cast", rest)
    if op == "vec_new":
        try:
            return ("vec_new", _full_tag(rest))
        except ValueError as e:
            raise ParseError(at + 1, str(e)) from None
    if op == "ld_const":
        tag_part, _, val_part = rest.partition(" ")
        if tag_part not in PRIMS:
            raise ParseError(at + 1, f"ld_const type must be primitive, got {tag_part!r}")
        val_part = val_part.strip()
        if tag_part == "bool":
            if val_part not in ("true", "false"):
                raise ParseError(at + 1, "bool constant must be true or false")
            return ("ld_const", BOOL, val_part == "true")
        v = _parse_int(val_part, at)
        if not 0 <= v < (1 << PRIM_BITS[tag_part]):
            raise ParseError(at + 1, f"constant {v} does not fit {tag_part}")
        return ("ld_const", Prim(tag_part), v)
    if op in ("call", "pack", "unpack"):
        m = re.match(r"([A-Za-z_][A-Za-z0-9_]*)::([A-Za-z_][A-Za-z0-9_]*)(<.*>)?$", rest)
        if not m:
            raise ParseError(at + 1, f"{op} target must be module::name[<typeargs>]")
        module, name, targ_part = m.group(1), m.group(2), m.group(3)
        targs: list[TypeTag] = []
        if targ_part:
            for piece in _split_commas(targ_part[1:-1]):
                try:
                    targs.append(_full_tag(piece))
                except ValueError as e:
                    raise ParseError(at + 1, str(e)) from None
        return (op, module, name, tuple(targs))
    raise ParseError(at + 1, f"unknown opcode {op!r}")


# serialization --------------------------------------------------------

def serialize_package(pkg: Package) -> str:
    """Render the canonical text form (std is implicit and omitted)."""
    out: list[str] = []
    for mod in pkg.modules.values():
        if mod.name == STD:
            continue
        out.append(f"module {mod.name}")
        out.append("")
        for dt in mod.datatypes.values():
            out.extend(_render_datatype(dt))
            out.append("")
        for fn in mod.functions.values():
            out.extend(_render_fn(fn))
            out.append("")
    return "\n".join(out).rstrip() + "\n"


def _tparams(n: int) -> str:
    return "<" + ",".join(f"T{k}" for k in range(n)) + ">" if n else ""


def _render_datatype(dt: DatatypeDecl) -> list[str]:
    head = f"datatype {dt.name}{_tparams(dt.type_params)}"
    if dt.abilities:
        head += " has " + ", ".join(sorted(dt.abilities))
    if not dt.fields:
        return [head + " {}"]
    lines = [head + " {"]
    for fname, ftype in dt.fields:
        lines.append(f"    {fname}: {ftype},")
    lines.append("}")
    return lines


def _render_fn(fn: FunctionDecl) -> list[str]:
    mode_prefix = {BY_VALUE: "", BY_REF: "&", BY_MUT: "&mut "}
    params = ", ".join(
        f"a{k}: {mode_prefix[mode]}{tag}" for k, (tag, mode) in enumerate(fn.inputs)
    )
    head = ("public fn" if fn.public else "fn") + f" {fn.name}{_tparams(fn.type_params)}({params})"
    if fn.outputs:
        outs = ", ".join(str(t) for t in fn.outputs)
        head += f" -> ({outs})" if len(fn.outputs) > 1 else f" -> {outs}"
    lines = [head + " {"]
    if fn.locals:
        lines.append("    locals: " + ", ".join(str(t) for t in fn.locals))
    targets = sorted({ins[1] for ins in fn.body if ins[0] in _LABEL_OPS})
    label_at = {t: f"L{k}" for k, t in enumerate(targets)}
    for idx, ins in enumerate(fn.body):
        if idx in label_at:
            lines.append(f"  {label_at[idx]}:")
        lines.append("    " + _render_instr(ins, label_at))
    frozen = len(fn.body)
    if frozen in label_at:  # label placed past the last instruction
        lines.append(f"  {label_at[frozen]}:")
    lines.append("}")
    return lines


def _render_instr(ins: tuple, label_at: dict[int, str]) -> str:
    op = ins[0]
    if op in _PLAIN_OPS:
        return op
    if op in _INT_OPS:
        return f"{op} {ins[1]}"
    if op in _LABEL_OPS:
        return f"{op} {label_at[ins[1]]}"
    if op == "cast":
        return f"cast {ins[1]}"
    if op == "vec_new":
        return f"vec_new {ins[1]}"
    if op == "ld_const":
        tag, val = ins[1], ins[2]
        if tag == BOOL:
            return f"ld_const bool {'true' if val else 'false'}"
        return f"ld_const {tag} {val}"
    if op in ("call", "pack", "unpack"):
        _, module, name, targs = ins
        t = "<" + ",".join(str(a) for a in targs) + ">" if targs else ""
        return f"{op} {module}::{name}{t}"
    raise ValueError(f"unknown instruction {ins!r}")
