"""Oracle suite: turns execution observations into findings.

Each oracle reads the digest one execution produced and reports
findings keyed by (oracle, site, level); the campaign deduplicates on
that key, so a site is reported once no matter how many transactions
trip it.  The built-in oracles:

  infinite_loop     out-of-gas where some conditional's operands never
                    changed across a large number of hits (a counter
                    that moves is fine, a stuck guard is not)
  precision_loss    integer division that discarded a remainder; the
                    "amplified" level flags multiplications fed by such
                    rounded values, where the error gets scaled up
  unnecessary_cast  a cast whose source already has the target width
  unnecessary_bool  eq/neq against a constant boolean
  shl_overflow      a left shift that discarded nonzero high bits
  earning_profits   the sender's total coin balance strictly grew in a
                    successful transaction

Contracts can raise campaign-specific signals with emit_event; the
campaign config maps event tags to named custom oracles.
"""
from __future__ import annotations

from dataclasses import dataclass

from .model import Package
from .vm import ExecResult, Transaction, render_txn

LOOP_MIN_HITS = 512

SEVERITY = {
    "earning_profits": "critical",
    "shl_overflow": "major",
}
DEFAULT_SEVERITY = "medium"

BUILTIN_ORACLES = (
    "infinite_loop", "precision_loss", "unnecessary_cast",
    "unnecessary_bool", "shl_overflow", "earning_profits",
)


@dataclass(frozen=True, slots=True)
class Finding:
    oracle: str
    severity: str
    site: tuple | None      # (gid, pc) or None for transaction-level
    where: str              # human-readable site
    level: str              # "" or a sub-kind such as lossy/amplified
    detail: str
    witness: str            # replayable transaction text

    @property
    def key(self) -> tuple:
        return (self.oracle, self.site, self.level)


def site_name(pkg: Package, site: tuple | None) -> str:
    if site is None:
        return "(transaction)"
    gid, pc = site
    if gid < 0:
        return f"event {pc}"
    fn = pkg.fn_by_gid(gid)
    if pc < 0:
        return f"{fn.qualified}@call{-pc - 1}"
    return f"{fn.qualified}@{pc}"


def run_oracles(pkg: Package, res: ExecResult, txn: Transaction,
                enabled: dict, events: dict) -> list[Finding]:
    """Apply every enabled oracle to one execution result.

    enabled maps oracle name -> bool (missing means on); events maps
    emit_event tags to custom oracle names.
    """
    out: list[Finding] = []
    digest = res.digest
    witness = render_txn(txn)

    def on(name: str) -> bool:
        return enabled.get(name, True)

    def add(oracle, site, detail, level=""):
        out.append(Finding(
            oracle=oracle,
            severity=SEVERITY.get(oracle, DEFAULT_SEVERITY),
            site=site,
            where=site_name(pkg, site),
            level=level,
            detail=detail,
            witness=witness,
        ))

    if digest is None:
        return out

    if on("infinite_loop") and res.status == "gas":
        for site, hits in digest.branch_count.items():
            if hits >= LOOP_MIN_HITS and site not in digest.branch_changed:
                add("infinite_loop", site,
                    f"ran out of gas; condition evaluated {hits} times with "
                    f"operands stuck at {digest.branch_orig.get(site)}")

    if on("precision_loss"):
        for site, (a, b) in digest.lossy_divs.items():
            add("precision_loss", site,
                f"{a} / {b} discards a remainder of {a % b}", level="lossy")
        for site, div_sites in digest.amplified.items():
            names = ", ".join(site_name(pkg, s) for s in sorted(div_sites))
            add("precision_loss", site,
                f"multiplication scales rounded values from {names}",
                level="amplified")

    if on("unnecessary_cast"):
        for site, width in digest.cast_same.items():
            add("unnecessary_cast", site, f"cast to {width} from the same width")

    if on("unnecessary_bool"):
        for site in digest.bool_const_cmp:
            add("unnecessary_bool", site, "comparison against a constant bool")

    if on("shl_overflow"):
        for site, (value, amount, discarded) in digest.shl_discards.items():
            add("shl_overflow", site,
                f"{value} << {amount} silently discarded high bits {discarded:#x}")

    if on("earning_profits") and res.status == "success":
        total_before = sum(res.balances_before.values())
        total_after = sum(res.balances_after.values())
        if total_after > total_before:
            deltas = {}
            for k in set(res.balances_before) | set(res.balances_after):
                d = res.balances_after.get(k, 0) - res.balances_before.get(k, 0)
                if d:
                    deltas[k] = d
            detail = "; ".join(f"{k}: {v:+d}" for k, v in sorted(deltas.items()))
            add("earning_profits", None,
                f"sender gained {total_after - total_before} ({detail})")

    if events:
        for tag, payload in digest.events:
            name = events.get(tag)
            if name is not None and on(name):
                add(name, (-1, tag), f"event {tag} fired with payload {payload!r}")

    return out
