"""Configuration-driven pipeline: generate -> learn -> eval -> verify.

Every stage reads and writes plain files in an output directory, so stages
can be run, cached and tested separately. All outputs are text, carry the
config hash and package version, and contain no timestamps; identical
configurations therefore produce byte-identical files.

Config schema (JSON object)::

    name        experiment label
    seed        master seed (int)
    m           number of trajectories
    plant       {"kind": "delay_mismatch", "theta0", "randomize_theta"}
                | {"kind": "surrogate_reactor", <surrogate params>, "nominal": {...}}
                | {"kind": "foptd", "true": {...}, "nominal": {...}, "mode"}
                | {"kind": "linear_test", "gain", "tau"}
    excitation  ExcitationSpec fields (its seed is overridden by the master seed)
    bank        {"name", "output": [filter decls], "input": [filter decls]}
    solver      SolverConfig fields
    grid        {"lo": decade, "hi": decade, "points": int}
    verify      {"omegas": [...], "amplitude", "duration", "dt"}
    workers     threads for the Gram stage
    out_dir     default output directory (not part of the hash)
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .excitation import ExcitationSpec, draw_rng, sample
from .gram import GramMatrix, TrajectoryError, batch_gram, read_archive, write_archive
from .iqc import (
    IqcCurve,
    compare_with_reference,
    curve_over_grid,
    half_rise_frequency,
    sup_distance,
    write_curve_table,
)
from .lti import FilterBank, filter_from_dict
from .ocsvm import Solution, SolverConfig, margin_violation_stats, solve
from .plant import (
    NominalFOPTD,
    SimulationError,
    Trajectory,
    delay_samples,
    delay_signal,
    ell0_delay,
    ell_megretski,
    linear_test_plant,
    residual,
    simulate_foptd,
    simulate_nonlinear,
    surrogate_reactor,
)

__all__ = [
    "PipelineConfig",
    "PipelineError",
    "build_bank",
    "generate",
    "learn",
    "evaluate",
    "verify",
    "run_all",
    "ARCHIVE_NAME",
    "SOLUTION_NAME",
    "CURVE_NAME",
]

log = logging.getLogger(__name__)

ARCHIVE_NAME = "grams.tsv"
GENERATE_NAME = "generate.json"
SOLUTION_NAME = "solution.json"
LEARN_NAME = "learn.json"
CURVE_NAME = "curve.tsv"
EVAL_NAME = "eval.json"
VERIFY_NAME = "verify.json"

PLANT_KINDS = ("delay_mismatch", "surrogate_reactor", "foptd", "linear_test")
SURROGATE_KEYS = ("gain", "tau1", "tau2", "rate_limit", "delay")
VERIFY_SAMPLES_MAX = 2001  # rows kept per verification table


class PipelineError(RuntimeError):
    """A stage failed; ``record`` is a JSON-serializable description."""

    def __init__(self, stage: str, message: str, **details):
        self.record = {"stage": stage, "error": message, **details}
        super().__init__(f"{stage}: {message}")


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


@dataclass(frozen=True)
class PipelineConfig:
    name: str
    seed: int
    m: int
    plant: dict
    excitation: ExcitationSpec
    bank: dict
    solver: SolverConfig
    grid: dict = field(default_factory=lambda: {"lo": -2.0, "hi": 2.0, "points": 201})
    verify: dict = field(default_factory=dict)
    workers: int = 1
    out_dir: str = "out"

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        kind = self.plant.get("kind")
        if kind not in PLANT_KINDS:
            raise ValueError(f"plant.kind must be one of {PLANT_KINDS}, got {kind!r}")
        if kind == "delay_mismatch" and not float(self.plant.get("theta0", 0)) > 0:
            raise ValueError("delay_mismatch needs theta0 > 0")
        if int(self.grid.get("points", 0)) < 2:
            raise ValueError("grid needs at least two points")
        if not float(self.grid["lo"]) < float(self.grid["hi"]):
            raise ValueError("grid lo must be below hi")
        if self.workers < 1:
            raise ValueError("workers must be positive")
        # fail early on a bad bank declaration
        build_bank(self.bank)
        # the excitation stream follows the master seed
        if self.excitation.seed != int(self.seed):
            object.__setattr__(
                self, "excitation",
                ExcitationSpec.from_dict({**self.excitation.to_dict(), "seed": int(self.seed)}),
            )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": int(self.seed),
            "m": int(self.m),
            "plant": copy.deepcopy(self.plant),
            "excitation": self.excitation.to_dict(),
            "bank": copy.deepcopy(self.bank),
            "solver": self.solver.to_dict(),
            "grid": dict(self.grid),
            "verify": copy.deepcopy(self.verify),
            "workers": int(self.workers),
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = copy.deepcopy(d)
        known = {"name", "seed", "m", "plant", "excitation", "bank", "solver", "grid",
                 "verify", "workers", "out_dir"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        seed = int(d.get("seed", 0))
        exc = dict(d.get("excitation", {}))
        exc["seed"] = seed
        return cls(
            name=str(d.get("name", "experiment")),
            seed=seed,
            m=int(d["m"]),
            plant=dict(d["plant"]),
            excitation=ExcitationSpec.from_dict(exc),
            bank=dict(d["bank"]),
            solver=SolverConfig.from_dict(d.get("solver", {})),
            grid=dict(d.get("grid", {"lo": -2.0, "hi": 2.0, "points": 201})),
            verify=dict(d.get("verify", {})),
            workers=int(d.get("workers", 1)),
            out_dir=str(d.get("out_dir", "out")),
        )

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **changes) -> "PipelineConfig":
        d = self.to_dict()
        d.update(changes)
        return PipelineConfig.from_dict(d)

    @property
    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form, ignoring ``out_dir`` and ``workers``."""
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("workers")
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def provenance(self) -> dict:
        return {"config_hash": self.config_hash, "iqclearn_version": __version__,
                "experiment": self.name}


def build_bank(decl: dict) -> FilterBank:
    out = [f for d in decl.get("output", []) for f in filter_from_dict(d)]
    inp = [f for d in decl.get("input", []) for f in filter_from_dict(d)]
    return FilterBank(out, inp, name=str(decl.get("name", "")))


# --- plants -----------------------------------------------------------------


def _nominal(d: dict) -> NominalFOPTD:
    return NominalFOPTD(float(d["gain"]), float(d["tau"]), float(d.get("theta", 0.0)))


def _outputs(plant: dict, u: np.ndarray, dt: float, thetas=None):
    """Plant and nominal outputs for a batch of equal-length inputs (rows of ``u``)."""
    kind = plant["kind"]
    if kind == "delay_mismatch":
        y = np.empty_like(u)
        for r in range(u.shape[0]):
            y[r] = delay_signal(u[r], delay_samples(thetas[r], dt))
        return y, u.copy()
    if kind == "surrogate_reactor":
        sp = surrogate_reactor(**{k: float(plant[k]) for k in SURROGATE_KEYS if k in plant})
        y = simulate_nonlinear(sp, u, dt)
        return y, simulate_foptd(_nominal(plant["nominal"]), u, dt)
    if kind == "linear_test":
        gain, tau = float(plant.get("gain", 1.0)), float(plant.get("tau", 1.0))
        y = simulate_nonlinear(linear_test_plant(gain, tau), u, dt)
        return y, simulate_foptd(NominalFOPTD(gain, tau, 0.0), u, dt)
    if kind == "foptd":
        y = simulate_foptd(_nominal(plant["true"]), u, dt)
        return y, simulate_foptd(_nominal(plant["nominal"]), u, dt)
    raise ValueError(f"unknown plant kind {kind!r}")


def _mode(plant: dict) -> str:
    if plant["kind"] == "delay_mismatch":
        return "multiplicative"
    return str(plant.get("mode", "additive"))


def _theta(plant: dict, seed: int, index: int) -> float | None:
    if plant["kind"] != "delay_mismatch":
        return None
    theta0 = float(plant["theta0"])
    if plant.get("randomize_theta", True):
        return float(draw_rng(seed, index, 1).uniform(0.0, theta0))
    return theta0


def _simulate_group(cfg: PipelineConfig, idx: list[int], sigs: dict, dt: float):
    """Simulate trajectories sharing ``(dt, length)`` together; on failure fall
    back to one-by-one so the failing indices can be reported."""
    thetas = [_theta(cfg.plant, cfg.seed, i) for i in idx]
    u = np.array([sigs[i].values for i in idx])
    try:
        return dict(zip(idx, zip(*_outputs(cfg.plant, u, dt, thetas)))), {}
    except SimulationError as exc:
        if len(idx) == 1:
            return {}, {idx[0]: str(exc)}
    good, bad = {}, {}
    for i, th in zip(idx, thetas):
        try:
            y, y0 = _outputs(cfg.plant, sigs[i].values[None, :], dt, [th])
            good[i] = (y[0], y0[0])
        except SimulationError as exc:
            bad[i] = str(exc)
    return good, bad


def make_trajectories(cfg: PipelineConfig) -> tuple[list[Trajectory | None], dict]:
    sigs = {i: sample(cfg.excitation, i) for i in range(cfg.m)}
    groups: dict[tuple, list[int]] = {}
    for i, s in sigs.items():
        groups.setdefault((s.dt, s.values.size), []).append(i)
    outputs, failures = {}, {}
    for (dt, _), idx in sorted(groups.items()):
        good, bad = _simulate_group(cfg, idx, sigs, dt)
        outputs.update(good)
        failures.update(bad)
    mode = _mode(cfg.plant)
    trajs: list[Trajectory | None] = []
    for i in range(cfg.m):
        if i in failures:
            trajs.append(None)
            continue
        y, y0 = outputs[i]
        s = sigs[i]
        v, w = residual(y, y0, s.values, mode)
        meta = {k: v_ for k, v_ in s.info.items() if k != "kind"}
        meta["seed"] = int(cfg.seed)
        th = _theta(cfg.plant, cfg.seed, i)
        if th is not None:
            meta["theta"] = th
        trajs.append(Trajectory(s.dt, v, w, meta))
    return trajs, failures


# --- stages -----------------------------------------------------------------


def _out(cfg: PipelineConfig, out_dir) -> Path:
    p = Path(out_dir if out_dir is not None else cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def generate(cfg: PipelineConfig, out_dir=None) -> list[GramMatrix]:
    """Simulate, filter and reduce ``m`` trajectories; write the Gram archive.

    Failed trajectories are left out, the archive header is flagged
    ``valid: false`` and a ``PipelineError`` listing the indices is raised.
    """
    out = _out(cfg, out_dir)
    bank = build_bank(cfg.bank)
    trajs, failures = make_trajectories(cfg)
    ok = [t for t in trajs if t is not None]
    ok_index = [i for i, t in enumerate(trajs) if t is not None]
    try:
        grams = batch_gram(ok, bank, workers=cfg.workers)
    except TrajectoryError as exc:
        failures[ok_index[exc.index]] = str(exc.cause)
        grams = []
        for i, t in zip(ok_index, ok):
            if i in failures:
                continue
            try:
                grams.extend(batch_gram([t], bank))
            except TrajectoryError as inner:
                failures[i] = str(inner.cause)
    grams = [GramMatrix(g.matrix, g.n_zw, {**g.meta, "index": i})
             for i, g in zip([i for i in ok_index if i not in failures], grams)]
    header = {**cfg.provenance(), "valid": not failures, "bank": bank.describe(),
              "failed": {str(k): v for k, v in sorted(failures.items())}}
    buf = _StringSink()
    write_archive(buf, grams, {**header, "n_z": bank.n_z, "n_zw": bank.n_zw})
    _write(out / ARCHIVE_NAME, buf.text())
    durations = [g.meta.get("duration", 0.0) for g in grams]
    summary = {**cfg.provenance(), "records": len(grams), "failed": sorted(failures),
               "total_duration": float(np.sum(durations)),
               "mean_trace": float(np.mean([g.trace for g in grams])) if grams else None}
    _write(out / GENERATE_NAME, _dumps(summary))
    if failures:
        raise PipelineError("generate", "trajectory simulation failed",
                            failed_indices=sorted(failures),
                            causes={str(k): v for k, v in sorted(failures.items())})
    return grams


class _StringSink:
    def __init__(self):
        self.parts: list[str] = []

    def write(self, s: str) -> None:
        self.parts.append(s)

    def text(self) -> str:
        return "".join(self.parts)


def load_archive(path) -> tuple[dict, list[GramMatrix]]:
    with open(path, encoding="utf-8") as fh:
        return read_archive(fh)


def learn(cfg: PipelineConfig, out_dir=None, grams: list[GramMatrix] | None = None) -> Solution:
    """Solve the OC-SVM on the archive in ``out_dir`` and write the solution record."""
    out = _out(cfg, out_dir)
    if grams is None:
        header, grams = load_archive(out / ARCHIVE_NAME)
        if header.get("config_hash") not in (None, cfg.config_hash):
            log.warning("archive was generated from a different config")
    try:
        sol = solve(grams, cfg.solver)
    except Exception as exc:
        details = getattr(exc, "diagnostics", {})
        details = {k: v for k, v in details.items() if k != "solution"}
        raise PipelineError("learn", str(exc), diagnostics=details) from exc
    stats = margin_violation_stats(sol)
    record = {**cfg.provenance(), "solver_config": cfg.solver.to_dict(), **sol.to_dict()}
    _write(out / SOLUTION_NAME, _dumps(record))
    summary = {**cfg.provenance(), "m": len(grams), "rho": sol.rho,
               "objective": sol.objective, "M_ww": sol.M.M_ww.tolist(),
               "M_vv": sol.M.M_vv.tolist(), **stats,
               "diagnostics": sol.diagnostics}
    _write(out / LEARN_NAME, _dumps(summary))
    return sol


def load_solution(path) -> Solution:
    with open(path, encoding="utf-8") as fh:
        return Solution.from_dict(json.load(fh))


def _references(cfg: PipelineConfig) -> dict:
    """Reference curves that make sense for the configured plant."""
    if cfg.plant["kind"] != "delay_mismatch":
        return {}
    theta0 = float(cfg.plant["theta0"])
    refs = {"ell0": lambda om: ell0_delay(om, theta0)}
    if abs(theta0 - 0.5) < 1e-12:
        refs["ell_megretski"] = ell_megretski
    return refs


def evaluate(cfg: PipelineConfig, out_dir=None, sol: Solution | None = None) -> dict:
    """Learned curve plus references as a table, and a comparison record."""
    out = _out(cfg, out_dir)
    if sol is None:
        sol = load_solution(out / SOLUTION_NAME)
    bank = build_bank(cfg.bank)
    if sol.M.n_zv != bank.n_zv or sol.M.n_zw != bank.n_zw:
        raise PipelineError("eval", "solution and filter bank dimensions disagree",
                            solution=[sol.M.n_zw, sol.M.n_zv], bank=[bank.n_zw, bank.n_zv])
    g = cfg.grid
    curve = curve_over_grid(bank, sol.M.M_vv, float(g["lo"]), float(g["hi"]), int(g["points"]),
                            {"M_source": SOLUTION_NAME})
    columns = {"omega": curve.omega, "ell": curve.ell}
    if not cfg.solver.fix_output_block and sol.M.n_zw:
        scale = abs(float(np.linalg.eigvalsh(sol.M.M_ww).min()))
        columns["ell_normalized"] = curve.ell / scale
    refs = _references(cfg)
    for name, fn in refs.items():
        columns[name] = fn(curve.omega)
    record = {**cfg.provenance(), "grid": dict(g), "argmax_omega": float(
        curve.omega[int(np.argmax(curve.ell))]), "max_value": float(curve.ell.max()),
        "low_end": float(curve.ell[0]), "high_end": float(curve.ell[-1])}
    try:
        record["half_rise_frequency"] = half_rise_frequency(curve)
    except ValueError as exc:
        record["half_rise_frequency"] = None
        record["half_rise_note"] = str(exc)
    for name, fn in refs.items():
        cmp = compare_with_reference(curve, fn)
        cmp["sup_distance"] = sup_distance(curve, fn)
        record[f"vs_{name}"] = cmp
    header = {**cfg.provenance(), "bank": bank.describe(), "M_source": SOLUTION_NAME,
              "references": sorted(refs)}
    buf = _StringSink()
    write_curve_table(buf, columns, header)
    _write(out / CURVE_NAME, buf.text())
    _write(out / EVAL_NAME, _dumps(record))
    return record


def verify(cfg: PipelineConfig, omegas=None, out_dir=None) -> dict:
    """Plant vs nominal responses to ``A cos(w t)`` at each requested frequency."""
    out = _out(cfg, out_dir)
    vc = cfg.verify
    omegas = [float(w) for w in (omegas if omegas is not None else vc.get("omegas", []))]
    if not omegas:
        raise PipelineError("verify", "no verification frequencies given")
    amp = float(vc.get("amplitude", cfg.excitation.amplitude))
    dt = float(vc.get("dt", cfg.excitation.dt or cfg.excitation.dt_max))
    plant = dict(cfg.plant)
    if plant["kind"] == "delay_mismatch":
        plant["randomize_theta"] = False
    summary = {**cfg.provenance(), "amplitude": amp, "dt": dt, "runs": []}
    errors = []
    for k, om in enumerate(omegas):
        duration = float(vc.get("duration", max(20.0 * 2.0 * np.pi / om, 50.0)))
        t = dt * np.arange(int(round(duration / dt)) + 1)
        u = amp * np.cos(om * t)
        try:
            th = _theta(plant, cfg.seed, 0)
            y, y0 = _outputs(plant, u[None, :], dt, [th])
        except SimulationError as exc:
            errors.append({"omega": om, "error": str(exc), "time": exc.time})
            continue
        y, y0 = y[0], y0[0]
        r = y - y0
        tail = t >= 0.5 * t[-1]
        name = f"verify_{k}.tsv"
        stride = max(1, int(np.ceil(t.size / VERIFY_SAMPLES_MAX)))
        buf = _StringSink()
        write_curve_table(buf, {"t": t[::stride], "u": u[::stride], "y": y[::stride],
                                "y_nominal": y0[::stride], "residual": r[::stride]},
                          {**cfg.provenance(), "omega": om, "amplitude": amp})
        _write(out / name, buf.text())
        summary["runs"].append({
            "omega": om, "file": name,
            "residual_amplitude": float(np.max(np.abs(r[tail]))),
            "output_amplitude": float(np.max(np.abs(y[tail]))),
            "nominal_amplitude": float(np.max(np.abs(y0[tail]))),
        })
    summary["errors"] = errors
    _write(out / VERIFY_NAME, _dumps(summary))
    if errors:
        raise PipelineError("verify", "simulation failed at some frequencies", failures=errors)
    return summary


def run_all(cfg: PipelineConfig, out_dir=None) -> dict:
    out = _out(cfg, out_dir)
    echo = cfg.to_dict()
    echo.pop("out_dir")
    echo.pop("workers")
    _write(out / "config.json", _dumps({**echo, "config_hash": cfg.config_hash}))
    grams = generate(cfg, out)
    sol = learn(cfg, out, grams)
    record = evaluate(cfg, out, sol)
    if cfg.verify.get("omegas"):
        verify(cfg, None, out)
    return record
