"""The campaign loop.

One iteration picks an action (generate a fresh seed, mutate a corpus
seed, or flip a path constraint), executes the resulting transaction
against a fork of the genesis world, feeds the result to the oracles,
and admits the transaction to the corpus if it covered a branch arm
nothing else has.

Determinism is load-bearing: every run with the same seed and worker
count produces byte-identical reports, corpora and coverage files.
Workers are deterministic interleaved RNG streams, not threads; the
stream for iteration i is streams[i % workers], so adding workers
reshuffles the schedule without introducing wall-clock dependence.
Timestamps and throughput are confined to stdout and the findings log.
"""
from __future__ import annotations

import json
import random
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from . import synth
from .concolic import flip_and_solve
from .config import CampaignConfig, describe
from .figures import render_figures
from .model import Package
from .oracles import run_oracles
from .typegraph import build_type_graph
from .vm import (
    CallSpec, Lit, LitVec, Transaction, World, execute_transaction, render_txn,
)

STATUSES = ("success", "abort", "gas", "leak", "invalid")


@dataclass
class Seed:
    idx: int
    trace: synth.GraphTrace | None   # None for type-blind seeds
    txn: Transaction
    coverage: frozenset
    times_fuzzed: int = 0


@dataclass
class FindingRecord:
    iteration: int
    oracle: str
    severity: str
    where: str
    level: str
    detail: str
    witness: str

    def jsonl(self, seed: int) -> str:
        return json.dumps({
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "iteration": self.iteration,
            "seed": seed,
            "oracle": self.oracle,
            "severity": self.severity,
            "site": self.where,
            "level": self.level,
            "detail": self.detail,
            "witness": self.witness,
        }, sort_keys=True)


def apply_renames(txn: Transaction, renames: dict) -> Transaction:
    if not renames:
        return txn
    calls = []
    for c in txn.calls:
        dst = renames.get((c.module, c.name))
        calls.append(CallSpec(dst[0], dst[1], c.targs, c.args) if dst else c)
    return Transaction(tuple(calls))


class Campaign:
    def __init__(self, pkg: Package, world: World, cfg: CampaignConfig, *,
                 use_typegraph: bool = True, use_typeparams: bool = True,
                 use_concolic: bool = True, quiet: bool = False):
        self.pkg = pkg
        self.world = world
        self.cfg = cfg
        self.use_typegraph = use_typegraph
        self.use_typeparams = use_typeparams
        self.use_concolic = use_concolic
        self.quiet = quiet

        self.graph = build_type_graph(pkg, world.pool_types())
        self.cands = synth.ground_candidates(pkg, world.pool_types())
        self.total_arms = pkg.total_branch_arms()

        self.corpus: list[Seed] = []
        self.covered: set = set()
        self.hits: dict = {}
        self.counters = {f"status_{s}": 0 for s in STATUSES}
        self.counters["executions"] = 0
        self.counters["rejected_without_execution"] = 0
        self.counters["generation_failures"] = 0
        self.findings: list[FindingRecord] = []
        self._finding_keys: set = set()
        self.coverage_series: list[tuple[int, int]] = []
        self.findings_series: list[tuple[int, str]] = []
        self.iterations_run = 0
        self.elapsed = 0.0

    # actions ---------------------------------------------------------

    def _choose_action(self, rng) -> str:
        weights = [("generate", self.cfg.w_generate), ("mutate", self.cfg.w_mutate)]
        if self.use_concolic:
            weights.append(("concolic", self.cfg.w_concolic))
        if not self.corpus:
            return "generate"
        total = sum(w for _, w in weights)
        r = rng.random() * total
        for name, w in weights:
            r -= w
            if r < 0:
                return name
        return "generate"

    def _pick_seed(self, rng) -> Seed:
        def energy(s: Seed) -> float:
            rarity = 0.05
            for arm in s.coverage:
                n = self.hits.get(arm, 1)
                rarity = max(rarity, 1.0 / n)
            return rarity / (1 + s.times_fuzzed)

        weights = [energy(s) for s in self.corpus]
        return rng.choices(self.corpus, weights=weights, k=1)[0]

    def _generate(self, rng):
        if not self.use_typegraph:
            txn = synth.havoc_txn(self.pkg, self.world, rng, self.cands)
            return None, txn
        try:
            return synth.generate(self.graph, self.world, rng,
                                  zero_arity_only=not self.use_typeparams)
        except synth.Exhausted:
            self.counters["generation_failures"] += 1
            return None, None

    def _mutate(self, rng):
        seed = self._pick_seed(rng)
        seed.times_fuzzed += 1
        if seed.trace is None:
            txn = _havoc_txn_values(seed.txn, rng)
            return None, txn
        got = self._mutate_trace(seed.trace, rng)
        return got if got is not None else (None, None)

    def _mutate_trace(self, trace, rng):
        zk = {"zero_arity_only": not self.use_typeparams}
        mutators = (
            ("values", lambda t: synth.mutate_values(self.graph, self.world, t, rng)),
            ("extend", lambda t: synth.extend_trace(self.graph, self.world, t, rng, **zk)),
            ("insert", lambda t: synth.insert_call(self.graph, self.world, t, rng, **zk)),
            ("remove", lambda t: synth.remove_call(self.graph, self.world, t, rng)),
        )
        rounds = rng.choices((1, 2, 3), weights=(2, 1, 1), k=1)[0]
        trace, txn = trace, None
        for _ in range(rounds):
            order = rng.sample(range(len(mutators)), len(mutators))
            got = None
            for mi in order:
                got = mutators[mi][1](trace)
                if got is not None:
                    break
            if got is None:
                break
            trace, txn = got
        return (trace, txn) if txn is not None else None

    def _concolic(self, rng):
        # most of the time flip a fresh generation or a mutated corpus
        # variant rather than the seed itself, so the solver also
        # reaches call shapes the corpus never retained
        seed = None
        src_trace = src_txn = None
        r = rng.random()
        if r < 0.35:
            src_trace, src_txn = self._generate(rng)
        if src_txn is None:
            seed = self._pick_seed(rng)
            seed.times_fuzzed += 1
            src_trace, src_txn = seed.trace, seed.txn
            if 0.35 <= r < 0.70 and src_trace is not None:
                got = self._mutate_trace(src_trace, rng)
                if got is not None:
                    src_trace, src_txn = got
        base = apply_renames(src_txn, self.cfg.renames)
        txn = flip_and_solve(self.pkg, self.world, base, covered=self.covered,
                             rng=rng, gas_limit=self.cfg.gas_limit,
                             solver_budget=self.cfg.concolic_budget)
        if txn is not None:
            return _adopt_trace(src_trace, txn), txn
        # constraint flipping came up empty; fall back on plain values
        if seed is None:
            return src_trace, src_txn
        if seed.trace is not None:
            got = synth.mutate_values(self.graph, self.world, seed.trace, rng)
            if got is not None:
                return got
            return None, None
        return None, _havoc_txn_values(seed.txn, rng)

    # the loop --------------------------------------------------------

    def run(self) -> "Campaign":
        cfg = self.cfg
        streams = [random.Random(cfg.seed * 1000003 + w)
                   for w in range(max(1, cfg.workers))]
        started = time.monotonic()
        i = 0
        while i < cfg.iterations:
            if cfg.time_limit and time.monotonic() - started >= cfg.time_limit:
                break
            rng = streams[i % len(streams)]
            i += 1
            action = self._choose_action(rng)
            if action == "generate":
                trace, txn = self._generate(rng)
            elif action == "mutate":
                trace, txn = self._mutate(rng)
            else:
                trace, txn = self._concolic(rng)
            if txn is None:
                continue

            exec_txn = apply_renames(txn, cfg.renames)
            try:
                synth.validate(self.pkg, self.world, exec_txn)
            except synth.TxTypeError:
                self.counters["rejected_without_execution"] += 1
                continue

            res = execute_transaction(self.pkg, self.world, exec_txn,
                                      gas_limit=cfg.gas_limit)
            self.counters["executions"] += 1
            self.counters[f"status_{res.status}"] += 1
            for arm in res.coverage:
                self.hits[arm] = self.hits.get(arm, 0) + 1

            stop = self._report_findings(i - 1, res, txn)

            new = res.coverage - self.covered
            if new:
                self.covered |= new
                self.corpus.append(Seed(len(self.corpus), trace, txn, res.coverage))
                self.coverage_series.append((i - 1, len(self.covered)))

            if not self.quiet and i % 500 == 0:
                print(f"[{i}] coverage {len(self.covered)}/{self.total_arms} "
                      f"corpus {len(self.corpus)} findings {len(self.findings)}")
            if stop:
                break
        self.iterations_run = i
        self.elapsed = time.monotonic() - started
        if not self.quiet:
            rate = self.counters["executions"] / self.elapsed if self.elapsed else 0.0
            print(f"done: {self.counters['executions']} executions "
                  f"in {self.elapsed:.1f}s ({rate:.0f} exec/s)")
        return self

    def _report_findings(self, iteration: int, res, txn: Transaction) -> bool:
        found = run_oracles(self.pkg, res, txn, self.cfg.oracles, self.cfg.events)
        hit = False
        for f in found:
            if f.key in self._finding_keys:
                continue
            self._finding_keys.add(f.key)
            self.findings.append(FindingRecord(
                iteration=iteration, oracle=f.oracle, severity=f.severity,
                where=f.where, level=f.level, detail=f.detail, witness=f.witness))
            self.findings_series.append((iteration, f.severity))
            hit = True
            if not self.quiet:
                print(f"finding: {f.oracle} [{f.severity}] at {f.where}: {f.detail}")
        return hit and self.cfg.stop_on_finding

    # outputs ---------------------------------------------------------

    def report_text(self) -> str:
        lines = ["campaign report", "==============="]
        lines.append(describe(self.cfg))
        lines.append(f"use_typegraph = {self.use_typegraph}")
        lines.append(f"use_typeparams = {self.use_typeparams}")
        lines.append(f"use_concolic = {self.use_concolic}")
        lines.append("---")
        lines.append(f"iterations_run = {self.iterations_run}")
        for key in sorted(self.counters):
            lines.append(f"{key} = {self.counters[key]}")
        lines.append(f"corpus_size = {len(self.corpus)}")
        lines.append(f"coverage_arms = {len(self.covered)}")
        lines.append(f"coverage_total = {self.total_arms}")
        lines.append(f"findings = {len(self.findings)}")
        lines.append("---")
        for f in sorted(self.findings, key=lambda f: (f.oracle, f.where, f.level)):
            level = f" level={f.level}" if f.level else ""
            lines.append(f"finding oracle={f.oracle} severity={f.severity} "
                         f"site={f.where}{level} detail={f.detail}")
        return "\n".join(lines) + "\n"

    def write_outputs(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report").write_text(self.report_text())

        with open(out / "findings", "w") as fh:
            for rec in self.findings:
                fh.write(rec.jsonl(self.cfg.seed) + "\n")

        cov_lines = [f"{gid} {pc} {arm}" for gid, pc, arm in sorted(self.covered)]
        (out / "coverage").write_text("\n".join(cov_lines) + ("\n" if cov_lines else ""))

        corpus_dir = out / "corpus"
        corpus_dir.mkdir(exist_ok=True)
        for seed in self.corpus:
            (corpus_dir / f"seed_{seed.idx:05d}.txn").write_text(
                render_txn(seed.txn) + "\n")

        wit_dir = out / "witnesses"
        wit_dir.mkdir(exist_ok=True)
        for n, rec in enumerate(self.findings):
            (wit_dir / f"{rec.oracle}_{n:03d}.txn").write_text(rec.witness + "\n")

        render_figures(out / "figures", self.coverage_series, self.findings_series,
                       self.total_arms, max(self.iterations_run, 1))


# helpers ---------------------------------------------------------------


def _adopt_trace(trace, txn: Transaction):
    """Pin a structurally-identical transaction's literals onto a trace copy.

    Constraint flipping only rewrites literal bindings, so the seed's
    trace still describes the new transaction; adopting the values keeps
    the result mutable by the trace mutators later.
    """
    if trace is None:
        return None
    t = trace.clone()
    order = synth.linearize(t)
    if len(order) != len(txn.calls):
        return None
    for occ, call in zip(order, txn.calls):
        if occ.fn.qualified != f"{call.module}::{call.name}":
            return None
        for pos, binding in enumerate(call.args):
            slot = t.slots.get((occ.sid, pos))
            if slot != ("lit",):
                continue
            if isinstance(binding, Lit):
                t.lits[(occ.sid, pos)] = binding.value
            elif isinstance(binding, LitVec):
                t.lits[(occ.sid, pos)] = tuple(binding.values)
    return t


def _havoc_txn_values(txn: Transaction, rng) -> Transaction | None:
    """Value havoc directly on a transaction, for trace-less seeds."""
    lit_positions = [
        (ci, ai) for ci, call in enumerate(txn.calls)
        for ai, b in enumerate(call.args) if isinstance(b, (Lit, LitVec))
    ]
    if not lit_positions:
        return None
    forced = rng.choice(lit_positions)
    calls = [list(c.args) for c in txn.calls]
    for ci, ai in lit_positions:
        if (ci, ai) != forced and rng.random() >= 0.4:
            continue
        b = calls[ci][ai]
        if isinstance(b, Lit):
            calls[ci][ai] = Lit(b.tag, synth._havoc_scalar(b.value, b.tag, rng))
        else:
            vals = tuple(synth._havoc_scalar(v, b.elem, rng) for v in b.values)
            calls[ci][ai] = LitVec(b.elem, vals)
    new_calls = tuple(
        CallSpec(c.module, c.name, c.targs, tuple(args))
        for c, args in zip(txn.calls, calls))
    return Transaction(new_calls)
