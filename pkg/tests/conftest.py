"""Shared fixtures: benchmark loading and campaign helpers.

Each loader call returns fresh objects; configs are mutable and
campaigns keep state, so tests never share instances.
"""
from pathlib import Path

import pytest

from tgfuzz.config import load_config
from tgfuzz.engine import Campaign
from tgfuzz.parser import parse_package
from tgfuzz.vm import World

ROOT = Path(__file__).resolve().parent.parent
BENCH = ROOT / "benchmarks"

BENCHMARKS = (
    "flashloan",
    "flashswap",
    "liquidity_pool",
    "oracle_amm",
    "leading_zeros",
    "tick_range",
    "boost_farm",
    "boost_farm_control",
    "shop",
)


def load_bench(name: str):
    cfg = load_config(BENCH / name / "campaign.cfg")
    pkg = parse_package(cfg.package.read_text())
    genesis = cfg.genesis.read_text() if cfg.genesis is not None else None
    world = World.build(pkg, genesis)
    return cfg, pkg, world


def run_campaign(name: str, *, iterations: int, seed: int = 0, **kw):
    cfg, pkg, world = load_bench(name)
    cfg.iterations = iterations
    cfg.seed = seed
    return Campaign(pkg, world, cfg, quiet=True, **kw).run()


@pytest.fixture
def bench():
    return load_bench


@pytest.fixture
def campaign():
    return run_campaign
