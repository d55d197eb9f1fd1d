"""Per-trajectory Gram matrices ``Gamma = int_0^T z z^T dt`` and their text archive."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

from .lti import FilterBank, filter_bank_apply
from .plant import Trajectory

__all__ = [
    "GramMatrix",
    "TrajectoryError",
    "compute_gram",
    "batch_gram",
    "write_archive",
    "read_archive",
]

ARCHIVE_FORMAT = "iqclearn-gram-archive/1"


@dataclass(frozen=True)
class GramMatrix:
    """Symmetric PSD matrix with the ``(n_zw, n_zv)`` block split of its channels."""

    matrix: np.ndarray
    n_zw: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        G = np.asarray(self.matrix, dtype=float)
        if G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise ValueError(f"Gram matrix must be square, got shape {G.shape}")
        if not 0 <= self.n_zw <= G.shape[0]:
            raise ValueError("n_zw out of range")
        G.setflags(write=False)
        object.__setattr__(self, "matrix", G)

    @property
    def n_z(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_zv(self) -> int:
        return self.n_z - self.n_zw

    @property
    def ww(self) -> np.ndarray:
        return self.matrix[: self.n_zw, : self.n_zw]

    @property
    def vv(self) -> np.ndarray:
        return self.matrix[self.n_zw :, self.n_zw :]

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix))

    def pair(self, M: np.ndarray) -> float:
        """Trace inner product ``<M, Gamma>``."""
        return float(np.sum(np.asarray(M) * self.matrix))


class TrajectoryError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        self.index = index
        self.cause = cause
        super().__init__(f"trajectory {index}: {cause}")


def compute_gram(z, dt: float, n_zw: int = 0) -> GramMatrix:
    """Trapezoidal quadrature of ``z(t) z(t)^T`` over the sample grid.

    ``z`` has one row per channel. The result is not normalized by the
    horizon length.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[1] < 2:
        raise ValueError("need at least two samples")
    if not np.all(np.isfinite(z)):
        raise ValueError("feature signal contains non-finite values")
    with np.errstate(over="ignore", invalid="ignore"):
        G = z @ z.T
        G -= 0.5 * (np.outer(z[:, 0], z[:, 0]) + np.outer(z[:, -1], z[:, -1]))
        G *= dt
    if not np.all(np.isfinite(G)):
        raise ValueError("Gram matrix overflowed")
    G = 0.5 * (G + G.T)
    return GramMatrix(G, n_zw)


def _one(index: int, traj: Trajectory, bank: FilterBank) -> GramMatrix:
    try:
        z = filter_bank_apply(bank, traj.w, traj.v, traj.dt)
        G = compute_gram(z, traj.dt, bank.n_zw)
    except Exception as exc:  # annotate with the failing trajectory
        raise TrajectoryError(index, exc) from exc
    meta = dict(traj.meta)
    meta.setdefault("duration", traj.duration)
    meta.setdefault("dt", traj.dt)
    return GramMatrix(G.matrix, G.n_zw, meta)


def batch_gram(
    trajectories: Sequence[Trajectory], bank: FilterBank, workers: int = 1
) -> list[GramMatrix]:
    """Filter and reduce every trajectory; results keep the input order."""
    if workers <= 1 or len(trajectories) < 2:
        return [_one(i, tr, bank) for i, tr in enumerate(trajectories)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda a: _one(a[0], a[1], bank), enumerate(trajectories)))


def write_archive(
    stream: TextIO, grams: Iterable[GramMatrix], header: dict | None = None
) -> None:
    """Write Gram matrices as a tab-separated table.

    Layout: ``#``-prefixed header lines (a JSON object on the first line with
    ``format``, ``n_zw``, ``n_zv`` and caller fields), one column-name line,
    then one row per trajectory with columns ``index``, ``n_z``, ``meta``
    (compact JSON) and ``g_<r>_<c>`` for every entry in row-major order.
    Floats are written with ``repr`` so they read back bit-for-bit.
    """
    grams = list(grams)
    n_z = grams[0].n_z if grams else int((header or {}).get("n_z", 0))
    n_zw = grams[0].n_zw if grams else int((header or {}).get("n_zw", 0))
    head = {"format": ARCHIVE_FORMAT, "n_z": n_z, "n_zw": n_zw, "n_zv": n_z - n_zw,
            "count": len(grams)}
    head.update(header or {})
    stream.write("# " + json.dumps(head, sort_keys=True) + "\n")
    cols = ["index", "n_z", "meta"] + [f"g_{r}_{c}" for r in range(n_z) for c in range(n_z)]
    stream.write("\t".join(cols) + "\n")
    for i, G in enumerate(grams):
        if G.n_z != n_z or G.n_zw != n_zw:
            raise ValueError(f"record {i} has a different block layout")
        meta = json.dumps(G.meta, sort_keys=True, separators=(",", ":"))
        vals = "\t".join(repr(float(x)) for x in G.matrix.ravel())
        stream.write(f"{i}\t{n_z}\t{meta}\t{vals}\n")


def read_archive(stream: TextIO) -> tuple[dict, list[GramMatrix]]:
    """Inverse of ``write_archive``; returns ``(header, grams)``."""
    first = stream.readline()
    if not first.startswith("# "):
        raise ValueError("missing archive header")
    header = json.loads(first[2:])
    if header.get("format") != ARCHIVE_FORMAT:
        raise ValueError(f"unsupported archive format {header.get('format')!r}")
    if header.get("valid") is False:
        raise ValueError("archive is flagged invalid (partial generation)")
    stream.readline()  # column names
    n_zw = int(header["n_zw"])
    grams = []
    for line in stream:
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        n_z = int(parts[1])
        meta = json.loads(parts[2])
        vals = np.array([float(x) for x in parts[3:]])
        if vals.size != n_z * n_z:
            raise ValueError(f"record {parts[0]} has {vals.size} values, expected {n_z * n_z}")
        grams.append(GramMatrix(vals.reshape(n_z, n_z), n_zw, meta))
    if "count" in header and len(grams) != int(header["count"]):
        raise ValueError(f"archive truncated: {len(grams)} of {header['count']} records")
    return header, grams
