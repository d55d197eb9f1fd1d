"""True plants, nominal models and the mismatch channel between them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "SimulationError",
    "Trajectory",
    "NominalFOPTD",
    "NonlinearPlant",
    "simulate_nonlinear",
    "simulate_foptd",
    "delay_samples",
    "delay_signal",
    "delay_mismatch_channel",
    "residual",
    "ell0_delay",
    "ell_megretski",
    "linear_test_plant",
    "surrogate_reactor",
]


class SimulationError(RuntimeError):
    """A simulated state became non-finite."""

    def __init__(self, time: float, message: str = ""):
        self.time = float(time)
        super().__init__(message or f"non-finite state at t = {self.time:.6g}")


@dataclass(frozen=True)
class Trajectory:
    """One sampled run of the mismatch system, starting from rest at ``t = 0``.

    ``v`` is the mismatch input and ``w`` the mismatch output; ``meta`` carries
    whatever the generator wants to record (frequencies, delay, seed ...).
    """

    dt: float
    v: np.ndarray
    w: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        w = np.asarray(self.w, dtype=float)
        if v.ndim != 1 or v.shape != w.shape:
            raise ValueError(f"v and w must be 1-D of equal length, got {v.shape}, {w.shape}")
        if v.size < 2:
            raise ValueError("a trajectory needs at least two samples")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "w", w)

    @property
    def duration(self) -> float:
        return self.dt * (self.v.size - 1)


@dataclass(frozen=True)
class NominalFOPTD:
    """First-order-plus-time-delay model ``K e^{-theta s} / (tau s + 1)``."""

    gain: float
    tau: float
    theta: float = 0.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.theta < 0:
            raise ValueError("theta must be nonnegative")

    def freq_response(self, omega):
        omega = np.asarray(omega, dtype=float)
        return self.gain * np.exp(-1j * omega * self.theta) / (1j * omega * self.tau + 1.0)


@dataclass(frozen=True)
class NonlinearPlant:
    """SISO plant ``x' = f(x, u)``, ``y = h(x, u)`` with an optional input dead time.

    ``f`` and ``h`` receive the state with the state index on the *last* axis
    and must broadcast over leading axes, so a batch of trajectories sharing a
    time step can be integrated together. ``f(0, 0) = 0`` and ``h(0, 0) = 0``
    are part of the contract.
    """

    n_x: int
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    h: Callable[[np.ndarray, np.ndarray], np.ndarray]
    input_delay: float = 0.0
    name: str = ""
    params: dict = field(default_factory=dict, compare=False)


def delay_samples(theta: float, dt: float) -> int:
    """Delay snapped to the nearest whole number of samples."""
    if theta < 0:
        raise ValueError(f"delay must be nonnegative, got {theta!r}")
    return int(round(theta / dt))


def delay_signal(u: np.ndarray, n: int) -> np.ndarray:
    """Shift ``u`` right by ``n`` samples through a zero-prefilled delay line."""
    u = np.asarray(u, dtype=float)
    if n == 0:
        return u.copy()
    out = np.zeros_like(u)
    if n < u.shape[-1]:
        out[..., n:] = u[..., :-n]
    return out


def simulate_nonlinear(plant: NonlinearPlant, u, dt: float) -> np.ndarray:
    """Classical RK4 from the origin with the input held constant over each step.

    ``u`` may be 1-D (one trajectory) or 2-D (a batch, one row per
    trajectory). Output samples are taken on the input grid.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    u = np.asarray(u, dtype=float)
    batch = u.ndim == 2
    u2 = u if batch else u[None, :]
    ud = delay_signal(u2, delay_samples(plant.input_delay, dt))
    n_traj, n = ud.shape
    x = np.zeros((n_traj, plant.n_x))
    y = np.empty((n_traj, n))
    f, h = plant.f, plant.h
    half = 0.5 * dt
    # overflow is detected below and reported with its time
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            uk = ud[:, k : k + 1]
            y[:, k] = h(x, uk)
            if k == n - 1:
                break
            k1 = f(x, uk)
            k2 = f(x + half * k1, uk)
            k3 = f(x + half * k2, uk)
            k4 = f(x + dt * k3, uk)
            x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(x)):
                raise SimulationError((k + 1) * dt)
    if not np.all(np.isfinite(y)):
        bad = np.argwhere(~np.isfinite(y))[0, 1]
        raise SimulationError(bad * dt)
    return y if batch else y[0]


def simulate_foptd(model: NominalFOPTD, u, dt: float) -> np.ndarray:
    """Exact zero-order-hold response of the FOPTD model from rest.

    The delay is snapped to ``round(theta / dt)`` samples.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    u = np.asarray(u, dtype=float)
    ud = delay_signal(u, delay_samples(model.theta, dt))
    a = np.exp(-dt / model.tau)
    b = model.gain * (1.0 - a)
    from scipy.signal import lfilter

    # y[k+1] = a y[k] + b ud[k], y[0] = 0
    y = np.zeros_like(ud)
    y[..., 1:] = lfilter([b], [1.0, -a], ud[..., :-1], axis=-1)
    return y


def delay_mismatch_channel(theta: float, u, dt: float) -> np.ndarray:
    """Output of ``e^{-theta s} - 1`` driven by ``u`` (zero before ``t = 0``)."""
    if theta < 0:
        raise ValueError(f"theta must be nonnegative, got {theta!r}")
    u = np.asarray(u, dtype=float)
    return delay_signal(u, delay_samples(theta, dt)) - u


def residual(y, y0, u=None, mode: str = "additive") -> tuple[np.ndarray, np.ndarray]:
    """Split a plant/nominal output pair into mismatch input ``v`` and output ``w``.

    Additive mismatch ``Delta = Pi - Pi0`` is driven by the plant input ``u``;
    multiplicative mismatch ``Pi = (1 + Delta) Pi0`` is driven by ``y0``.
    In both cases ``w = y - y0``.
    """
    y = np.asarray(y, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    if y.shape != y0.shape:
        raise ValueError(f"y and y0 differ in shape: {y.shape} vs {y0.shape}")
    w = y - y0
    if mode == "additive":
        if u is None:
            raise ValueError("additive mode needs the plant input u")
        v = np.asarray(u, dtype=float)
        if v.shape != y.shape:
            raise ValueError(f"u has shape {v.shape}, expected {y.shape}")
        return v.copy(), w
    if mode == "multiplicative":
        return y0.copy(), w
    raise ValueError(f"mode must be 'additive' or 'multiplicative', got {mode!r}")


def ell0_delay(omega, theta0: float):
    """Tightest IQC weight for an uncertain delay in ``[0, theta0]``:
    ``max_theta |e^{-j omega theta} - 1|^2``."""
    if not theta0 > 0:
        raise ValueError("theta0 must be positive")
    omega = np.asarray(omega, dtype=float)
    val = np.where(omega < np.pi / theta0, 4.0 * np.sin(0.5 * omega * theta0) ** 2, 4.0)
    return val if val.ndim else float(val)


def ell_megretski(omega):
    """Rational majorant ``(4w^4 + 50w^2) / (w^4 + 6.5w^2 + 50)`` for a delay in ``[0, 1/2]``."""
    w2 = np.asarray(omega, dtype=float) ** 2
    val = (4.0 * w2 * w2 + 50.0 * w2) / (w2 * w2 + 6.5 * w2 + 50.0)
    return val if val.ndim else float(val)


def linear_test_plant(gain: float = 1.0, tau: float = 1.0) -> NonlinearPlant:
    """``tau x' = -x + gain u``, ``y = x``; matches ``NominalFOPTD(gain, tau, 0)`` exactly."""

    def f(x, u):
        return (gain * u - x) / tau

    def h(x, u):
        return x[..., 0]

    return NonlinearPlant(1, f, h, name="linear_test", params={"gain": gain, "tau": tau})


def surrogate_reactor(
    gain: float = 0.28,
    tau1: float = 3.75,
    tau2: float = 0.25,
    rate_limit: float = 3e-3,
    delay: float = 12.0,
) -> NonlinearPlant:
    """Fixed nonlinear SISO stand-in for a slow process with dead time.

    States: ``x1`` is a first-order lag toward ``gain * u`` whose slew rate is
    softly saturated at ``rate_limit`` through a ``tanh``; ``x2`` is a fast
    second lag on ``x1``; the output is ``x2``. The input reaches the plant
    through a ``delay`` dead time. Around the origin this linearizes to
    ``gain e^{-delay s} / ((tau1 s + 1)(tau2 s + 1))``, which for
    ``tau1 + tau2 = 4`` is close to ``0.28 e^{-12 s} / (4 s + 1)`` at low
    frequency. At an input amplitude of ``1/4`` the slew limit is hit for
    frequencies above roughly ``0.03`` rad/time while the lag has not yet
    attenuated the response, so the mismatch is largest in a mid band and
    small at both very low and very high frequency.
    """

    def f(x, u):
        drive = (gain * u[..., 0] - x[..., 0]) / tau1
        dx1 = rate_limit * np.tanh(drive / rate_limit)
        dx2 = (x[..., 0] - x[..., 1]) / tau2
        return np.stack([dx1, dx2], axis=-1)

    def h(x, u):
        return x[..., 1]

    return NonlinearPlant(
        2,
        f,
        h,
        input_delay=delay,
        name="surrogate_reactor",
        params={"gain": gain, "tau1": tau1, "tau2": tau2, "rate_limit": rate_limit,
                "delay": delay},
    )
