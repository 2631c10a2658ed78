"""Campaign configuration files.

A campaign is described by a plain key = value file next to the
contract sources:

    package = package.mvasm
    genesis = genesis.pool
    iterations = 2000
    rename shop::buy = oracle::oracle_buy
    event 900 = reserve_mismatch
    oracle_unnecessary_cast = false

Relative paths are resolved against the config file's directory.
`rename` swaps one function for another when a transaction executes,
which lets a checking wrapper stand in for the function the fuzzer
targets.  `event N = name` declares a custom oracle fed by emit_event
tag N.  Unknown keys are rejected rather than ignored; a typo in an
oracle toggle should not silently disable nothing.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .oracles import BUILTIN_ORACLES


class ConfigError(Exception):
    pass


_INT_KEYS = {"seed", "iterations", "gas_limit", "workers", "concolic_budget"}
_FLOAT_KEYS = {"time_limit", "w_generate", "w_mutate", "w_concolic"}
_BOOL_KEYS = {"stop_on_finding"}
_PATH_KEYS = {"package", "genesis"}


@dataclass
class CampaignConfig:
    package: Path | None = None
    genesis: Path | None = None
    seed: int = 0
    iterations: int = 2000
    time_limit: float = 0.0          # seconds, 0 disables
    gas_limit: int = 100_000
    workers: int = 1
    concolic_budget: int = 8
    stop_on_finding: bool = False
    w_generate: float = 0.2
    w_mutate: float = 0.6
    w_concolic: float = 0.2
    oracles: dict = field(default_factory=dict)    # name -> bool
    renames: dict = field(default_factory=dict)    # (mod, fn) -> (mod, fn)
    events: dict = field(default_factory=dict)     # tag -> oracle name


def _parse_bool(val: str, where: str) -> bool:
    if val == "true":
        return True
    if val == "false":
        return False
    raise ConfigError(f"{where}: expected true or false, got {val!r}")


def _parse_qualified(text: str, where: str) -> tuple[str, str]:
    parts = text.split("::")
    if len(parts) != 2 or not all(p.isidentifier() for p in parts):
        raise ConfigError(f"{where}: expected module::function, got {text!r}")
    return (parts[0], parts[1])


def load_config(path) -> CampaignConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    cfg = parse_config(text, base=path.parent)
    if cfg.package is None:
        raise ConfigError(f"{path}: missing required key 'package'")
    return cfg


def parse_config(text: str, base: Path | None = None) -> CampaignConfig:
    cfg = CampaignConfig()
    oracle_toggles: list[tuple[str, str, bool]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        where = f"line {lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected key = value")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if not val:
            raise ConfigError(f"{where}: empty value for {key!r}")

        if key.startswith("rename "):
            src = _parse_qualified(key[len("rename "):].strip(), where)
            cfg.renames[src] = _parse_qualified(val, where)
        elif key.startswith("event "):
            tag_text = key[len("event "):].strip()
            try:
                tag = int(tag_text, 0)
            except ValueError:
                raise ConfigError(f"{where}: bad event tag {tag_text!r}") from None
            if not val.isidentifier():
                raise ConfigError(f"{where}: oracle name must be an identifier")
            if val in BUILTIN_ORACLES:
                raise ConfigError(f"{where}: {val!r} shadows a built-in oracle")
            cfg.events[tag] = val
        elif key.startswith("oracle_"):
            name = key[len("oracle_"):]
            oracle_toggles.append((where, name, _parse_bool(val, where)))
        elif key in _PATH_KEYS:
            p = Path(val)
            if base is not None and not p.is_absolute():
                p = base / p
            setattr(cfg, key, p)
        elif key in _INT_KEYS:
            try:
                setattr(cfg, key, int(val, 0))
            except ValueError:
                raise ConfigError(f"{where}: expected an integer for {key}") from None
        elif key in _FLOAT_KEYS:
            try:
                setattr(cfg, key, float(val))
            except ValueError:
                raise ConfigError(f"{where}: expected a number for {key}") from None
        elif key in _BOOL_KEYS:
            setattr(cfg, key, _parse_bool(val, where))
        else:
            raise ConfigError(f"{where}: unknown key {key!r}")

    custom = set(cfg.events.values())
    for where, name, flag in oracle_toggles:
        if name not in BUILTIN_ORACLES and name not in custom:
            raise ConfigError(f"{where}: unknown oracle {name!r}")
        cfg.oracles[name] = flag
    return cfg


def describe(cfg: CampaignConfig) -> str:
    """Stable one-key-per-line rendering, used by campaign reports."""
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, Path):
            v = v.name
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines)
