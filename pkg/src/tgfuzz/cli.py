"""Command line entry points.

    tgfuzz fuzz campaign.cfg --iterations 5000 --out results
    tgfuzz replay campaign.cfg witness.txn --dump-constraints
    tgfuzz typegraph campaign.cfg > graph.dot
    tgfuzz validate campaign.cfg

Exit status: 0 on success, 1 on configuration or contract errors (and
for `fuzz --fail-on-finding` when findings were reported), 2 on usage
errors.
"""
from __future__ import annotations

import argparse
import sys

from .concolic import collect_constraints, render_path_condition
from .config import ConfigError, load_config
from .engine import Campaign, apply_renames
from .oracles import run_oracles, site_name
from .parser import ParseError, parse_package
from .typegraph import build_type_graph, dump_dot
from .verifier import VerifyError
from .vm import GenesisError, TxValidationError, World, parse_txn


class CliError(Exception):
    pass


def _load(cfg_path: str):
    cfg = load_config(cfg_path)
    try:
        text = cfg.package.read_text()
    except OSError as exc:
        raise CliError(f"cannot read package {cfg.package}: {exc}") from exc
    pkg = parse_package(text)
    genesis_text = None
    if cfg.genesis is not None:
        try:
            genesis_text = cfg.genesis.read_text()
        except OSError as exc:
            raise CliError(f"cannot read genesis {cfg.genesis}: {exc}") from exc
    world = World.build(pkg, genesis_text)
    return cfg, pkg, world


def _apply_overrides(cfg, args):
    for name, key in (("seed", "seed"), ("iterations", "iterations"),
                      ("time", "time_limit"), ("gas_limit", "gas_limit"),
                      ("workers", "workers"),
                      ("concolic_budget", "concolic_budget")):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, key, v)


def cmd_fuzz(args) -> int:
    cfg, pkg, world = _load(args.config)
    _apply_overrides(cfg, args)
    campaign = Campaign(
        pkg, world, cfg,
        use_typegraph=not args.no_typegraph,
        use_typeparams=not args.no_typeparams,
        use_concolic=not args.no_concolic,
    )
    campaign.run()
    campaign.write_outputs(args.out)
    print(f"wrote {args.out}/report ({len(campaign.findings)} finding(s), "
          f"{len(campaign.covered)}/{campaign.total_arms} arms)")
    if args.fail_on_finding and campaign.findings:
        return 1
    return 0


def cmd_replay(args) -> int:
    cfg, pkg, world = _load(args.config)
    if args.gas_limit is not None:
        cfg.gas_limit = args.gas_limit
    try:
        text = open(args.txn).read()
    except OSError as exc:
        raise CliError(f"cannot read {args.txn}: {exc}") from exc
    txn = apply_renames(parse_txn(text, pkg), cfg.renames)

    if args.dump_constraints:
        res, pc = collect_constraints(pkg, world, txn, gas_limit=cfg.gas_limit)
        print(render_path_condition(pc))
    else:
        from .vm import execute_transaction
        res = execute_transaction(pkg, world, txn, gas_limit=cfg.gas_limit)

    print(f"status: {res.status}")
    if res.status == "abort":
        print(f"abort: {res.abort_kind} at {site_name(pkg, res.abort_site)} "
              f"code={res.abort_code}")
    if res.status == "invalid":
        print(f"invalid: {res.error}")
    print(f"gas used: {res.gas_used}")
    for key in sorted(set(res.balances_before) | set(res.balances_after)):
        b = res.balances_before.get(key, 0)
        a = res.balances_after.get(key, 0)
        if b or a:
            print(f"balance {key}: {b} -> {a} ({a - b:+d})")
    if res.digest is not None:
        for tag, payload in res.digest.events:
            print(f"event {tag}: {payload}")
    for f in run_oracles(pkg, res, txn, cfg.oracles, cfg.events):
        print(f"finding: {f.oracle} [{f.severity}] at {f.where}: {f.detail}")
    return 0


def cmd_typegraph(args) -> int:
    _cfg, pkg, world = _load(args.config)
    graph = build_type_graph(pkg, world.pool_types())
    sys.stdout.write(dump_dot(graph))
    return 0


def cmd_validate(args) -> int:
    cfg, pkg, world = _load(args.config)
    mods = [m for m in pkg.modules.values() if m.name != "std"]
    nfns = sum(len(m.functions) for m in mods)
    ndts = sum(len(m.datatypes) for m in mods)
    graph = build_type_graph(pkg, world.pool_types())
    starts = ", ".join(f.qualified for f in graph.start_functions()) or "(none)"
    print(f"{cfg.package.name}: ok")
    print(f"modules: {len(mods)}, functions: {nfns}, datatypes: {ndts}")
    print(f"pool objects: {len(world.objects)}")
    print(f"start functions: {starts}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tgfuzz",
        description="type-graph-guided fuzzing for typed transaction contracts")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fuzz", help="run a fuzzing campaign")
    f.add_argument("config", help="campaign config file")
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--iterations", type=int, default=None)
    f.add_argument("--time", type=float, default=None,
                   help="wall-clock budget in seconds")
    f.add_argument("--gas-limit", type=int, default=None, dest="gas_limit")
    f.add_argument("--workers", type=int, default=None)
    f.add_argument("--concolic-budget", type=int, default=None,
                   dest="concolic_budget")
    f.add_argument("--no-typegraph", action="store_true",
                   help="ablation: type-blind generation")
    f.add_argument("--no-typeparams", action="store_true",
                   help="ablation: skip generic functions")
    f.add_argument("--no-concolic", action="store_true",
                   help="ablation: disable constraint flipping")
    f.add_argument("--fail-on-finding", action="store_true")
    f.add_argument("--out", default="out", help="output directory")
    f.set_defaults(func=cmd_fuzz)

    r = sub.add_parser("replay", help="execute one transaction file")
    r.add_argument("config")
    r.add_argument("txn", help="transaction file")
    r.add_argument("--gas-limit", type=int, default=None, dest="gas_limit")
    r.add_argument("--dump-constraints", action="store_true",
                   help="print the recorded path condition")
    r.set_defaults(func=cmd_replay)

    t = sub.add_parser("typegraph", help="print the type graph as DOT")
    t.add_argument("config")
    t.set_defaults(func=cmd_typegraph)

    v = sub.add_parser("validate", help="parse and verify a campaign's package")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, GenesisError, TxValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ParseError as e:
        print(f"parse error: {e}", file=sys.stderr)
        return 1
    except VerifyError as e:
        print(f"verification error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
