"""Shared fixtures: cached pipeline runs, random solver instances and the
per-criterion summary printed at the end of an acceptance run."""

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from iqclearn.gram import GramMatrix
from iqclearn.iqc import read_curve_table
from iqclearn.pipeline import PipelineConfig, evaluate, generate, learn, verify

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"

_CRITERIA: dict[int, list[tuple[bool, str]]] = {}


def random_instance(seed, n_z=None, m=None):
    """Random Gram matrices with ``n_z <= 4`` channels and ``m <= 30`` samples."""
    rng = np.random.default_rng(seed)
    n_z = int(n_z or rng.integers(2, 5))
    n_zw = int(rng.integers(1, n_z))
    m = int(m or rng.integers(5, 31))
    grams = []
    for s in rng.uniform(0.1, 3, size=m):
        Z = rng.normal(size=(n_z, n_z + 2)) * s
        grams.append(GramMatrix(Z @ Z.T, n_zw))
    return grams


@dataclass
class Run:
    cfg: PipelineConfig
    out: Path
    grams: list
    solution: object
    record: dict
    learn_seconds: float

    def curve(self):
        with open(self.out / "curve.tsv", encoding="utf-8") as fh:
            return read_curve_table(fh)[1]


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory):
    """``pipeline_run(name, **overrides)`` runs a shipped config once per session."""
    cache = {}

    def run(name, **changes):
        key = (name, json.dumps(changes, sort_keys=True))
        if key not in cache:
            cfg = PipelineConfig.load(CONFIG_DIR / f"{name}.json")
            if changes:
                cfg = cfg.replace(**changes)
            out = tmp_path_factory.mktemp(name)
            grams = generate(cfg, out)
            t0 = time.perf_counter()
            sol = learn(cfg, out, grams)
            seconds = time.perf_counter() - t0
            record = evaluate(cfg, out, sol)
            if cfg.verify.get("omegas"):
                verify(cfg, None, out)
            cache[key] = Run(cfg, out, grams, sol, record, seconds)
        return cache[key]

    return run


class Criterion:
    """Collects the checks of one acceptance criterion and asserts them together."""

    def __init__(self, number):
        self.number = number
        self.items = []

    def check(self, ok, what):
        self.items.append((bool(ok), what))
        return bool(ok)

    def finish(self):
        _CRITERIA.setdefault(self.number, []).extend(self.items)
        failed = [what for ok, what in self.items if not ok]
        assert not failed, "; ".join(failed)


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        items = _CRITERIA[n]
        ok = all(flag for flag, _ in items)
        detail = "; ".join(what for _, what in items)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
