"""Stable proper SISO transfer functions, their realizations and simulation.

Everything that makes up the dynamic multiplier lives here: rational filters
(low/high/band-pass, Butterworth, Laguerre/Kautz bases), controllable
canonical realizations, Tustin simulation and the block-diagonal filter bank
that maps ``(w, v)`` to the feature signal ``z``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import signal

__all__ = [
    "StabilityError",
    "TransferFunction",
    "StateSpace",
    "FilterBank",
    "tf_from_coeffs",
    "tf_multiply",
    "freq_response",
    "make_band_pass",
    "make_butterworth2",
    "make_laguerre_basis",
    "to_state_space",
    "tustin",
    "simulate_filter",
    "filter_bank_apply",
    "filter_from_dict",
    "filter_to_dict",
    "log_spaced_bank",
]

# Poles with real part above this are rejected.
STABILITY_MARGIN = -1e-9


class StabilityError(ValueError):
    """Raised when a denominator has a root in the closed right half-plane."""

    def __init__(self, root: complex):
        self.root = complex(root)
        super().__init__(f"unstable or marginal pole at s = {self.root:.6g}")


def _trim(coeffs: np.ndarray) -> np.ndarray:
    trimmed = np.trim_zeros(coeffs, "f")
    return trimmed if trimmed.size else np.zeros(1)


class TransferFunction:
    """Real rational transfer function ``num(s) / den(s)``.

    Coefficients are in descending powers of ``s``. On construction the
    denominator is made monic, the ratio is checked to be proper and every
    pole is checked to lie strictly in the left half-plane.

    Parameters
    ----------
    num, den : sequence of float
        Numerator and denominator coefficients.
    """

    __slots__ = ("_num", "_den", "_desc")

    def __init__(self, num: Sequence[float], den: Sequence[float], desc: dict | None = None):
        num = np.atleast_1d(np.asarray(num, dtype=float))
        den = np.atleast_1d(np.asarray(den, dtype=float))
        if den.size == 0 or den[0] == 0.0:
            raise ValueError("leading denominator coefficient must be nonzero")
        if not (np.all(np.isfinite(num)) and np.all(np.isfinite(den))):
            raise ValueError("coefficients must be finite")
        num = _trim(num)
        lead = den[0]
        num = num / lead
        den = den / lead
        if num.size > den.size:
            raise ValueError(
                f"improper transfer function: numerator degree {num.size - 1} "
                f"exceeds denominator degree {den.size - 1}"
            )
        if den.size > 1:
            # companion-matrix eigenvalues
            roots = np.roots(den)
            worst = roots[np.argmax(roots.real)]
            if worst.real >= STABILITY_MARGIN:
                raise StabilityError(worst)
        num.setflags(write=False)
        den.setflags(write=False)
        self._num = num
        self._den = den
        self._desc = desc

    @property
    def num(self) -> np.ndarray:
        return self._num

    @property
    def den(self) -> np.ndarray:
        return self._den

    @property
    def order(self) -> int:
        return self._den.size - 1

    @property
    def poles(self) -> np.ndarray:
        return np.roots(self._den) if self.order else np.zeros(0, dtype=complex)

    @property
    def desc(self) -> dict | None:
        """Declarative description this filter was built from, if any."""
        return self._desc

    def __call__(self, omega):
        return freq_response(self, omega)

    def __mul__(self, other: "TransferFunction") -> "TransferFunction":
        return tf_multiply(self, other)

    def __repr__(self) -> str:
        return f"TransferFunction(num={self._num.tolist()}, den={self._den.tolist()})"


@dataclass(frozen=True)
class StateSpace:
    """SISO realization ``x' = A x + B u``, ``y = C x + D u``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: float

    @property
    def order(self) -> int:
        return self.A.shape[0]

    def freq_response(self, omega):
        omega = np.asarray(omega, dtype=float)
        n = self.order
        if n == 0:
            return np.full(omega.shape, complex(self.D))
        eye = np.eye(n)
        out = np.empty(omega.size, dtype=complex)
        if self.D != 0.0:
            # D det(sI - A + B C / D) / det(sI - A) avoids cancelling D against
            # C (sI - A)^-1 B where the response is small
            Az = self.A - (self.B @ self.C) / self.D
            for k, w in enumerate(omega.ravel()):
                s = 1j * w * eye
                out[k] = self.D * np.linalg.det(s - Az) / np.linalg.det(s - self.A)
            return out.reshape(omega.shape)
        for k, w in enumerate(omega.ravel()):
            x = np.linalg.solve(1j * w * eye - self.A, self.B)
            out[k] = (self.C @ x).item()
        return out.reshape(omega.shape)


@dataclass(frozen=True)
class FilterBank:
    """Block-diagonal dynamic multiplier.

    ``output_filters`` act on the mismatch output ``w`` and produce the first
    ``n_zw`` feature channels; ``input_filters`` act on the mismatch input
    ``v`` and produce the remaining ``n_zv`` channels.
    """

    output_filters: tuple[TransferFunction, ...]
    input_filters: tuple[TransferFunction, ...]
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "output_filters", tuple(self.output_filters))
        object.__setattr__(self, "input_filters", tuple(self.input_filters))
        if self.n_z == 0:
            raise ValueError("filter bank must have at least one channel")

    @property
    def n_zw(self) -> int:
        return len(self.output_filters)

    @property
    def n_zv(self) -> int:
        return len(self.input_filters)

    @property
    def n_z(self) -> int:
        return self.n_zw + self.n_zv

    def input_response(self, omega) -> np.ndarray:
        """Stack of input-channel responses, shape ``(n_zv, len(omega))``."""
        omega = np.atleast_1d(np.asarray(omega, dtype=float))
        return np.array([freq_response(tf, omega) for tf in self.input_filters]).reshape(
            self.n_zv, omega.size
        )

    def describe(self) -> dict:
        return {
            "name": self.name,
            "output": [filter_to_dict(tf) for tf in self.output_filters],
            "input": [filter_to_dict(tf) for tf in self.input_filters],
        }


def tf_from_coeffs(num: Sequence[float], den: Sequence[float]) -> TransferFunction:
    """Build a validated, normalized transfer function from coefficients."""
    return TransferFunction(num, den, desc={"kind": "tf", "num": list(map(float, num)),
                                            "den": list(map(float, den))})


def tf_multiply(a: TransferFunction, b: TransferFunction) -> TransferFunction:
    """Series connection: convolve numerators and denominators."""
    desc = None
    if a.desc is not None and b.desc is not None:
        desc = {"kind": "product", "factors": [a.desc, b.desc]}
    return TransferFunction(np.convolve(a.num, b.num), np.convolve(a.den, b.den), desc=desc)


def freq_response(tf: TransferFunction, omega):
    """Evaluate ``tf(jω)``; accepts a scalar or an array of frequencies."""
    s = 1j * np.asarray(omega, dtype=float)
    return np.polyval(tf.num, s) / np.polyval(tf.den, s)


def _check_positive(name: str, value: float) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0.0:
        raise ValueError(f"{name} must be positive, got {value!r}")
    return value


def make_band_pass(omega_lo: float, omega_hi: float) -> TransferFunction:
    """``(s/lo)/(s/lo + 1) * 1/(s/hi + 1)``, a high-pass corner at ``lo`` followed
    by a low-pass corner at ``hi``."""
    lo = _check_positive("omega_lo", omega_lo)
    hi = _check_positive("omega_hi", omega_hi)
    num = np.array([1.0 / lo, 0.0])
    den = np.convolve([1.0 / lo, 1.0], [1.0 / hi, 1.0])
    return TransferFunction(num, den, desc={"kind": "bandpass", "lo": lo, "hi": hi})


def make_lowpass1(cutoff: float) -> TransferFunction:
    wc = _check_positive("cutoff", cutoff)
    return TransferFunction([1.0], [1.0 / wc, 1.0], desc={"kind": "lowpass1", "cutoff": wc})


def make_highpass1(cutoff: float) -> TransferFunction:
    wc = _check_positive("cutoff", cutoff)
    return TransferFunction([1.0 / wc, 0.0], [1.0 / wc, 1.0],
                            desc={"kind": "highpass1", "cutoff": wc})


def make_butterworth2(cutoff: float, kind: str = "low") -> TransferFunction:
    """Second-order Butterworth low- or high-pass filter."""
    wc = _check_positive("cutoff", cutoff)
    den = [1.0, np.sqrt(2.0) * wc, wc * wc]
    if kind == "low":
        num = [wc * wc]
    elif kind == "high":
        num = [1.0, 0.0, 0.0]
    else:
        raise ValueError(f"kind must be 'low' or 'high', got {kind!r}")
    return TransferFunction(num, den, desc={"kind": "butter2", "cutoff": wc, "pass": kind})


def _pair_poles(poles: Sequence[complex], n: int, tol: float = 1e-9) -> list[tuple[complex, ...]]:
    """Group the first ``n`` poles into real singletons and conjugate pairs."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    if n > len(poles):
        raise ValueError(f"need {n} poles, got {len(poles)}")
    groups: list[tuple[complex, ...]] = []
    k = 0
    while k < n:
        b = complex(poles[k])
        if b.real <= 0.0:
            raise ValueError(f"Laguerre pole parameter b must have Re b > 0, got {b}")
        if abs(b.imag) <= tol * max(1.0, abs(b)):
            groups.append((complex(b.real, 0.0),))
            k += 1
            continue
        if k + 1 >= n or abs(complex(poles[k + 1]) - b.conjugate()) > tol * max(1.0, abs(b)):
            raise ValueError(
                f"complex pole {b} must be immediately followed by its conjugate "
                "within the first n poles"
            )
        groups.append((b, b.conjugate()))
        k += 2
    return groups


def make_laguerre_basis(poles: Sequence[complex], n: int) -> list[TransferFunction]:
    """Orthonormal rational basis with preassigned poles ``-b_k``.

    Real ``b_k`` give the Takenaka-Malmquist (Müntz-Laguerre) functions
    ``sqrt(2 Re b_k)/(s + b_k) * prod_{k'<k} (s - b_k')/(s + b_k')``. A
    conjugate pair ``(b, conj b)`` is replaced by the real Kautz pair
    ``sqrt(2 c1) s / D(s)`` and ``sqrt(2 c1 c0) / D(s)`` with
    ``D = s^2 + c1 s + c0 = (s + b)(s + conj b)``, times the same all-pass
    prefix. That pair spans the same two-dimensional subspace of H2 as the
    complex functions, so the whole family stays orthonormal with real
    coefficients.
    """
    groups = _pair_poles(list(poles), int(n))
    basis: list[TransferFunction] = []
    allpass_num = np.ones(1)
    allpass_den = np.ones(1)
    for group in groups:
        if len(group) == 1:
            b = group[0].real
            base_num = [[np.sqrt(2.0 * b)]]
            den = np.array([1.0, b])
            ap_num = np.array([1.0, -b])
        else:
            b = group[0]
            c1 = 2.0 * b.real
            c0 = abs(b) ** 2
            den = np.array([1.0, c1, c0])
            base_num = [[np.sqrt(2.0 * c1), 0.0], [np.sqrt(2.0 * c1 * c0)]]
            ap_num = np.array([1.0, -c1, c0])
        full_den = np.convolve(allpass_den, den)
        for bn in base_num:
            basis.append(
                TransferFunction(np.convolve(allpass_num, bn), full_den, desc=None)
            )
        allpass_num = np.convolve(allpass_num, ap_num)
        allpass_den = full_den
    pole_list = [[complex(p).real, complex(p).imag] for p in list(poles)[: int(n)]]
    for k, tf in enumerate(basis):
        tf._desc = {"kind": "laguerre", "poles": pole_list, "n": int(n), "index": k}
    return basis


def to_state_space(tf: TransferFunction) -> StateSpace:
    """Controllable canonical realization.

    ``A`` has ``-den[1:]`` in its first row and ones on the subdiagonal,
    ``B = e_1``, and ``C`` holds the strictly proper remainder of ``num/den``.
    """
    n = tf.order
    num = np.concatenate([np.zeros(n + 1 - tf.num.size), tf.num])
    d = float(num[0])
    rem = num[1:] - d * tf.den[1:]
    A = np.zeros((n, n))
    if n:
        A[0, :] = -tf.den[1:]
        A[1:, :-1] = np.eye(n - 1)
    B = np.zeros((n, 1))
    if n:
        B[0, 0] = 1.0
    C = rem.reshape(1, n)
    for arr in (A, B, C):
        arr.setflags(write=False)
    return StateSpace(A, B, C, d)


def tustin(ss: StateSpace, dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Bilinear discretization of ``ss`` at step ``dt`` (no prewarping)."""
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    n = ss.order
    if n == 0:
        return ss.A, ss.B, ss.C, ss.D
    eig = np.linalg.eigvals(ss.A)
    pivot = np.min(np.abs(1.0 - 0.5 * dt * eig))
    if pivot < 1e-12:
        raise ValueError(f"dt={dt} degenerates the Tustin map (|1 - dt*lambda/2| = {pivot:.3g})")
    ima = np.eye(n) - 0.5 * dt * ss.A
    ad = np.linalg.solve(ima, np.eye(n) + 0.5 * dt * ss.A)
    bd = np.linalg.solve(ima, dt * ss.B)
    cd = np.linalg.solve(ima.T, ss.C.T).T
    dd = ss.D + 0.5 * (ss.C @ bd).item()
    return ad, bd, cd, dd


def _simulate_recursive(ss: StateSpace, u: np.ndarray, dt: float) -> np.ndarray:
    """Plain state recursion of the Tustin model; the reference for ``simulate_filter``."""
    ad, bd, cd, dd = tustin(ss, dt)
    x = np.zeros(ss.order)
    y = np.empty(u.size)
    bd = bd.ravel()
    cd = cd.ravel()
    for k, uk in enumerate(u):
        y[k] = cd @ x + dd * uk
        x = ad @ x + bd * uk
    return y


def simulate_filter(ss: StateSpace, u, dt: float) -> np.ndarray:
    """Response of ``ss`` to the sampled input ``u`` from zero initial state.

    The model is discretized with the bilinear transform; the resulting
    discrete system is run as cascaded second-order sections, which is
    sample-for-sample the same response as the state recursion.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim != 1:
        raise ValueError("u must be one-dimensional")
    ad, bd, cd, dd = tustin(ss, dt)
    if ss.order == 0:
        return dd * u
    z, p, k = signal.ss2zpk(ad, bd, cd, np.array([[dd]]))
    sos = signal.zpk2sos(z, p, k)
    return signal.sosfilt(sos, u)


def filter_bank_apply(bank: FilterBank, w, v, dt: float) -> np.ndarray:
    """Feature signal ``z = [Psi_w w; Psi_v v]`` with shape ``(n_z, len(w))``."""
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    if w.shape != v.shape or w.ndim != 1:
        raise ValueError(f"w and v must be 1-D and equal length, got {w.shape} and {v.shape}")
    z = np.empty((bank.n_z, w.size))
    for k, tf in enumerate(bank.output_filters):
        z[k] = simulate_filter(to_state_space(tf), w, dt)
    for k, tf in enumerate(bank.input_filters):
        z[bank.n_zw + k] = simulate_filter(to_state_space(tf), v, dt)
    return z


def log_spaced_bank(omega_lo: float, omega_hi: float, count: int, kind: str = "first") -> list[dict]:
    """Declarations for a low-pass / band-passes / high-pass bank over ``count`` corners.

    With ``count`` log-spaced corner frequencies this gives ``count + 1``
    filters: a low-pass at the first corner, a band-pass between each pair of
    neighbouring corners, and a high-pass at the last corner. ``kind="butter2"``
    swaps the two end filters for second-order Butterworth ones.
    """
    corners = np.logspace(np.log10(omega_lo), np.log10(omega_hi), count)
    if kind == "first":
        decls = [{"kind": "lowpass1", "cutoff": float(corners[0])}]
    elif kind == "butter2":
        decls = [{"kind": "butter2", "cutoff": float(corners[0]), "pass": "low"}]
    else:
        raise ValueError(f"unknown bank kind {kind!r}")
    decls += [
        {"kind": "bandpass", "lo": float(lo), "hi": float(hi)}
        for lo, hi in zip(corners[:-1], corners[1:])
    ]
    if kind == "first":
        decls.append({"kind": "highpass1", "cutoff": float(corners[-1])})
    else:
        decls.append({"kind": "butter2", "cutoff": float(corners[-1]), "pass": "high"})
    return decls


def filter_from_dict(decl: dict) -> list[TransferFunction]:
    """Build the filter(s) named by one declaration in a bank config.

    Every kind yields a single filter except ``laguerre``, which expands to
    ``n`` basis functions.
    """
    kind = decl.get("kind")
    if kind == "tf":
        return [tf_from_coeffs(decl["num"], decl["den"])]
    if kind == "bandpass":
        return [make_band_pass(decl["lo"], decl["hi"])]
    if kind == "butter2":
        return [make_butterworth2(decl["cutoff"], decl.get("pass", "low"))]
    if kind == "lowpass1":
        return [make_lowpass1(decl["cutoff"])]
    if kind == "highpass1":
        return [make_highpass1(decl["cutoff"])]
    if kind == "product":
        factors = [f for part in decl["factors"] for f in filter_from_dict(part)]
        out = factors[0]
        for f in factors[1:]:
            out = tf_multiply(out, f)
        return [out]
    if kind == "laguerre":
        poles = [complex(p[0], p[1]) if isinstance(p, (list, tuple)) else complex(p)
                 for p in decl["poles"]]
        basis = make_laguerre_basis(poles, int(decl["n"]))
        if "index" in decl:
            return [basis[int(decl["index"])]]
        return basis
    raise ValueError(f"unknown filter kind {kind!r}")


def filter_to_dict(tf: TransferFunction) -> dict:
    if tf.desc is not None:
        return tf.desc
    return {"kind": "tf", "num": tf.num.tolist(), "den": tf.den.tolist()}
