"""Seeded input excitations: random-frequency sinusoids, PRBS and short Fourier series.

Every draw is generated from a Philox counter-based stream keyed by
``(seed, draw_index)``, so a given draw is reproducible on its own and does
not depend on how many other draws were made before it or in which order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

__all__ = [
    "ExcitationSpec",
    "SampledSignal",
    "draw_rng",
    "sample",
    "sample_sinusoid",
    "sample_prbs",
    "sample_fourier",
    "default_duration",
    "default_dt",
]

KINDS = ("sinusoid", "prbs", "fourier")


@dataclass(frozen=True)
class ExcitationSpec:
    """How to draw one input signal.

    Frequencies are drawn as ``omega = 10**x / freq_scale`` with
    ``x ~ U[log_lo, log_hi]``; ``freq_scale`` lets a range be given in units
    of ``omega * tau0``. ``duration`` and ``dt`` of ``None`` select the
    per-draw defaults (see ``default_duration`` / ``default_dt``).
    """

    kind: str = "sinusoid"
    amplitude: float = 1.0
    log_lo: float = -2.0
    log_hi: float = 2.0
    freq_scale: float = 1.0
    bit_time: float = 0.05
    n_terms: int = 5
    duration: float | None = None
    dt: float | None = None
    dt_max: float = 0.01
    seed: int = 0
    duration_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.amplitude > 0:
            raise ValueError("amplitude must be positive")
        if not self.log_lo < self.log_hi:
            raise ValueError("log_lo must be below log_hi")
        if not self.freq_scale > 0:
            raise ValueError("freq_scale must be positive")
        if self.duration is not None and not self.duration > 0:
            raise ValueError("duration must be positive")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.dt_max > 0:
            raise ValueError("dt_max must be positive")
        if self.duration is not None and self.dt is not None and self.duration / self.dt < 16:
            raise ValueError("duration / dt must be at least 16")
        if self.kind == "fourier" and self.n_terms < 1:
            raise ValueError("n_terms must be at least 1")
        if self.duration_range is not None:
            lo, hi = self.duration_range
            if not 0 < lo <= hi:
                raise ValueError("duration_range must satisfy 0 < lo <= hi")
            object.__setattr__(self, "duration_range", (float(lo), float(hi)))
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["duration_range"] is not None:
            d["duration_range"] = list(d["duration_range"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExcitationSpec":
        d = dict(d)
        if d.get("duration_range") is not None:
            d["duration_range"] = tuple(d["duration_range"])
        return cls(**d)


@dataclass(frozen=True)
class SampledSignal:
    """Uniformly sampled signal starting at ``t = 0``."""

    values: np.ndarray
    dt: float
    info: dict = field(default_factory=dict, compare=False)

    @property
    def t(self) -> np.ndarray:
        return self.dt * np.arange(self.values.size)

    @property
    def duration(self) -> float:
        return self.dt * (self.values.size - 1)


def draw_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for draw ``index`` under ``seed``.

    ``stream`` separates unrelated uses of the same draw (e.g. excitation vs
    plant parameters).
    """
    key = np.array([int(seed) % 2**64, (int(index) << 8 | int(stream)) % 2**64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def default_duration(omega: float) -> float:
    """``max(20 periods, 50)`` capped at 200 time units."""
    return float(min(max(20.0 * 2.0 * np.pi / omega, 50.0), 200.0))


def default_dt(omega: float, dt_max: float = 0.01) -> float:
    """200 samples per period of ``omega``, never coarser than ``dt_max``."""
    return float(min(2.0 * np.pi / (200.0 * omega), dt_max))


def _grid(duration: float, dt: float) -> np.ndarray:
    n = int(round(duration / dt)) + 1
    if n < 17:
        raise ValueError(f"duration {duration} with dt {dt} gives only {n} samples")
    return dt * np.arange(n)


def _duration(spec: ExcitationSpec, rng: np.random.Generator, omega: float | None) -> float:
    if spec.duration is not None:
        return spec.duration
    if spec.duration_range is not None:
        lo, hi = spec.duration_range
        return float(rng.uniform(lo, hi))
    if omega is None:
        return 50.0
    return default_duration(omega)


def _log_uniform(spec: ExcitationSpec, rng: np.random.Generator, size=None):
    x = rng.uniform(spec.log_lo, spec.log_hi, size=size)
    return 10.0**x / spec.freq_scale


def sample_sinusoid(spec: ExcitationSpec, index: int) -> SampledSignal:
    """``A sin(omega t)`` with log-uniform ``omega``."""
    if spec.kind != "sinusoid":
        raise ValueError("spec.kind must be 'sinusoid'")
    rng = draw_rng(spec.seed, index)
    omega = float(_log_uniform(spec, rng))
    duration = _duration(spec, rng, omega)
    dt = spec.dt if spec.dt is not None else default_dt(omega, spec.dt_max)
    t = _grid(duration, dt)
    u = spec.amplitude * np.sin(omega * t)
    return SampledSignal(u, dt, {"kind": "sinusoid", "index": int(index), "omega": omega,
                                 "amplitude": spec.amplitude, "duration": float(t[-1])})


def sample_prbs(spec: ExcitationSpec, index: int) -> SampledSignal:
    """Random binary sequence of ``±A`` with fair-coin bits held for ``bit_time``."""
    if spec.kind != "prbs":
        raise ValueError("spec.kind must be 'prbs'")
    dt = spec.dt if spec.dt is not None else spec.dt_max
    if spec.bit_time < dt:
        raise ValueError(f"bit_time {spec.bit_time} is shorter than dt {dt}")
    rng = draw_rng(spec.seed, index)
    duration = _duration(spec, rng, None)
    t = _grid(duration, dt)
    # small offset keeps samples on bit boundaries in the bit they start
    bit_index = np.floor(t / spec.bit_time + 1e-9).astype(np.int64)
    bits = rng.integers(0, 2, size=int(bit_index[-1]) + 1)
    u = spec.amplitude * (2.0 * bits[bit_index] - 1.0)
    return SampledSignal(u, dt, {"kind": "prbs", "index": int(index),
                                 "bit_time": spec.bit_time, "amplitude": spec.amplitude,
                                 "duration": float(t[-1])})


def sample_fourier(spec: ExcitationSpec, index: int) -> SampledSignal:
    """``sum_i a_i sin(omega_i t)`` with ``a_i ~ U[-A, A]`` and log-uniform ``omega_i``."""
    if spec.kind != "fourier":
        raise ValueError("spec.kind must be 'fourier'")
    rng = draw_rng(spec.seed, index)
    omegas = np.atleast_1d(_log_uniform(spec, rng, size=spec.n_terms))
    amps = rng.uniform(-spec.amplitude, spec.amplitude, size=spec.n_terms)
    duration = _duration(spec, rng, float(omegas.min()))
    dt = spec.dt if spec.dt is not None else default_dt(float(omegas.max()), spec.dt_max)
    t = _grid(duration, dt)
    u = amps @ np.sin(np.outer(omegas, t))
    return SampledSignal(u, dt, {"kind": "fourier", "index": int(index),
                                 "omegas": omegas.tolist(), "amplitudes": amps.tolist(),
                                 "duration": float(t[-1])})


def sample(spec: ExcitationSpec, index: int) -> SampledSignal:
    return {"sinusoid": sample_sinusoid, "prbs": sample_prbs, "fourier": sample_fourier}[
        spec.kind
    ](spec, index)
