"""Frequency-domain view of a learned multiplier: the scalar weight ``l(jw)``.

With the structured IQC ``Pi(jw) = diag(-1, l(jw))`` the learned input block
gives ``l(jw) = Psi_v(jw)^H M_vv Psi_v(jw)``. This module evaluates that
curve, compares it against reference bounds and exports it as a text table.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from .lti import FilterBank

__all__ = [
    "IqcCurve",
    "eval_ell",
    "curve_over_grid",
    "log_grid",
    "compare_with_reference",
    "half_rise_frequency",
    "sup_distance",
    "write_curve_table",
    "read_curve_table",
]

RATIO_FLOOR = 1e-9


@dataclass(frozen=True)
class IqcCurve:
    """Values of ``l`` on a strictly increasing frequency grid (rad/time)."""

    omega: np.ndarray
    ell: np.ndarray
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        om = np.asarray(self.omega, dtype=float).ravel()
        ell = np.asarray(self.ell, dtype=float).ravel()
        if om.shape != ell.shape:
            raise ValueError(f"omega and ell differ in length: {om.size} vs {ell.size}")
        if om.size < 1:
            raise ValueError("empty frequency grid")
        if np.any(np.diff(om) <= 0):
            raise ValueError("frequency grid must be strictly increasing")
        if np.any(ell < -1e-10 * max(1.0, float(np.max(np.abs(ell))))):
            raise ValueError("l(jw) must be nonnegative")
        om.setflags(write=False)
        ell.setflags(write=False)
        object.__setattr__(self, "omega", om)
        object.__setattr__(self, "ell", ell)

    def at(self, omega: float) -> float:
        """Value at the grid point nearest to ``omega`` on a log scale."""
        k = int(np.argmin(np.abs(np.log(self.omega) - np.log(omega))))
        return float(self.ell[k])


def eval_ell(bank: FilterBank, M_vv, omega) -> np.ndarray | float:
    """``Re(Psi_v(jw)^H M_vv Psi_v(jw))`` at each frequency in ``omega``."""
    M = np.atleast_2d(np.asarray(M_vv, dtype=float))
    if M.shape != (bank.n_zv, bank.n_zv):
        raise ValueError(f"M_vv has shape {M.shape}, bank has {bank.n_zv} input filters")
    scalar = np.ndim(omega) == 0
    P = bank.input_response(omega)
    q = np.einsum("iw,ij,jw->w", P.conj(), M, P)
    size = np.einsum("iw,ij,jw->w", np.abs(P), np.abs(M), np.abs(P))
    if np.any(np.abs(q.imag) > 1e-12 * np.maximum(size, 1e-300)):
        raise ArithmeticError("quadratic form has a non-negligible imaginary part")
    return float(q.real[0]) if scalar else q.real


def log_grid(lo_decade: float, hi_decade: float, points: int) -> np.ndarray:
    if points < 2:
        raise ValueError("a grid needs at least two points")
    if not lo_decade < hi_decade:
        raise ValueError("lo_decade must be below hi_decade")
    return np.logspace(lo_decade, hi_decade, int(points))


def curve_over_grid(
    bank: FilterBank,
    M_vv,
    lo_decade: float = -2.0,
    hi_decade: float = 2.0,
    points: int = 201,
    provenance: dict | None = None,
) -> IqcCurve:
    om = log_grid(lo_decade, hi_decade, points)
    prov = {"bank": bank.describe()}
    prov.update(provenance or {})
    return IqcCurve(om, eval_ell(bank, M_vv, om), prov)


def compare_with_reference(
    learned: IqcCurve, reference: Callable[[np.ndarray], np.ndarray]
) -> dict:
    """Pointwise comparison of a learned curve with a reference bound.

    Returns the fraction of grid points where the learned curve is at least
    the reference (ties count as covered), both endpoint pairs, the largest
    ratio ``learned / max(reference, 1e-9)`` and the frequency where the
    learned curve peaks.
    """
    om = learned.omega
    ref = np.asarray(reference(om), dtype=float)
    if ref.shape != om.shape:
        raise ValueError("reference must return one value per grid point")
    ell = learned.ell
    ratio = ell / np.maximum(ref, RATIO_FLOOR)
    k = int(np.argmax(ell))
    return {
        "overestimation_fraction": float(np.mean(ell >= ref)),
        "low_end": {"omega": float(om[0]), "learned": float(ell[0]), "reference": float(ref[0])},
        "high_end": {"omega": float(om[-1]), "learned": float(ell[-1]),
                     "reference": float(ref[-1])},
        "max_ratio": float(np.max(ratio)),
        "argmax_omega": float(om[k]),
        "max_value": float(ell[k]),
    }


def half_rise_frequency(curve: IqcCurve) -> float:
    """First grid frequency where ``l`` reaches half of its plateau.

    The plateau is the mean of the top decile of values. A curve whose last
    grid value is below 90% of its maximum is not saturating within the grid
    and is rejected.
    """
    ell = curve.ell
    top = float(np.max(ell))
    if top <= 0:
        raise ValueError("curve is identically zero")
    if ell[-1] < 0.9 * top:
        raise ValueError("curve does not saturate on the grid")
    n_top = max(1, int(np.ceil(0.1 * ell.size)))
    plateau = float(np.mean(np.sort(ell)[-n_top:]))
    k = int(np.argmax(ell >= 0.5 * plateau))
    return float(curve.omega[k])


def sup_distance(curve: IqcCurve, reference: Callable[[np.ndarray], np.ndarray]) -> float:
    return float(np.max(np.abs(curve.ell - np.asarray(reference(curve.omega), dtype=float))))


def write_curve_table(stream: TextIO, columns: dict[str, np.ndarray], header: dict) -> None:
    """Tab-separated table; first line ``# <json descriptor>``, then column names.

    ``columns`` maps a column name to its values; the first column is the
    frequency grid.
    """
    names = list(columns)
    data = [np.asarray(columns[n], dtype=float) for n in names]
    if len({d.size for d in data}) != 1:
        raise ValueError("all columns must have the same length")
    stream.write("# " + json.dumps(header, sort_keys=True) + "\n")
    stream.write("\t".join(names) + "\n")
    for row in zip(*data):
        stream.write("\t".join(repr(float(x)) for x in row) + "\n")


def read_curve_table(stream: TextIO) -> tuple[dict, dict[str, np.ndarray]]:
    first = stream.readline()
    if not first.startswith("# "):
        raise ValueError("missing curve table header")
    header = json.loads(first[2:])
    names = stream.readline().rstrip("\n").split("\t")
    rows = [line.rstrip("\n").split("\t") for line in stream if line.strip()]
    data = np.array(rows, dtype=float).reshape(len(rows), len(names))
    return header, {n: data[:, k] for k, n in enumerate(names)}
