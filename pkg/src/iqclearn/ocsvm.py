"""One-class SVM over block-diagonal dissipativity parameters.

The program solved is::

    min_{M, rho, xi}  1/2 ||M||_F^2 - rho + 1/(nu m) sum_i xi_i
    s.t.              <M, Gamma_i> >= rho - xi_i,   xi_i >= 0,
                      M = blockdiag(M_ww, M_vv),  -M_ww >= eps_w I,  M_vv >= eps_v I.

``solve`` uses ADMM on the primal (operator splitting with a cached
Cholesky factorization, PSD cones handled by eigenvalue clamping).
``oracle_solve`` maximizes the dual over the capped simplex
``{0 <= alpha_i <= 1/(nu m), sum alpha = 1}`` with accelerated projected
gradient ascent and certifies its answer with the duality gap; at the dual
optimum ``M = Proj_K(sum_i alpha_i Gamma_i)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .gram import GramMatrix

__all__ = [
    "SolverError",
    "DissipativityParams",
    "SolverConfig",
    "Solution",
    "project_block_psd",
    "solve",
    "oracle_solve",
    "kkt_residual",
    "margin_violation_stats",
    "holdout_violation_rate",
]

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """The solver stopped without meeting its tolerances."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


@dataclass(frozen=True)
class DissipativityParams:
    """``M = blockdiag(M_ww, M_vv)``; the off-diagonal blocks are structurally zero."""

    M_ww: np.ndarray
    M_vv: np.ndarray

    def __post_init__(self):
        for name in ("M_ww", "M_vv"):
            a = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if a.size == 0:
                a = a.reshape(0, 0)
            if a.shape[0] != a.shape[1]:
                raise ValueError(f"{name} must be square")
            a = 0.5 * (a + a.T)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def n_zw(self) -> int:
        return self.M_ww.shape[0]

    @property
    def n_zv(self) -> int:
        return self.M_vv.shape[0]

    @property
    def full(self) -> np.ndarray:
        return scipy.linalg.block_diag(self.M_ww, self.M_vv)

    def pair(self, G: GramMatrix) -> float:
        return float(np.sum(self.M_ww * G.ww) + np.sum(self.M_vv * G.vv))

    def check_cones(self, eps_w: float, eps_v: float, tol: float = 1e-9) -> bool:
        ok_w = self.n_zw == 0 or np.linalg.eigvalsh(self.M_ww).max() <= -eps_w + tol
        ok_v = self.n_zv == 0 or np.linalg.eigvalsh(self.M_vv).min() >= eps_v - tol
        return bool(ok_w and ok_v)


@dataclass(frozen=True)
class SolverConfig:
    """Problem and algorithm settings.

    ``fix_output_block`` pins a scalar output block to ``M_ww = -1`` (and a
    scalar input block to ``M_vv = 1``); non-scalar blocks keep their
    ``eps`` floors. With ``polish`` on, ``solve`` periodically tries to
    finish exactly from the active set guessed by ADMM and accepts the
    result only when its KKT residual is at most ``polish_tol``.
    """

    nu: float = 0.01
    eps_w: float = 1e-6
    eps_v: float = 1e-6
    fix_output_block: bool = True
    max_iter: int = 100_000
    eps_abs: float = 1e-8
    eps_rel: float = 1e-8
    rho0: float = 0.1
    sigma: float = 1e-6
    relax: float = 1.6
    adapt_every: int = 25
    check_every: int = 10
    polish: bool = True
    polish_every: int = 200
    polish_tol: float = 1e-10
    oracle_max_iter: int = 400_000
    oracle_gap: float = 1e-9

    def __post_init__(self):
        if not 0.0 < self.nu < 1.0:
            raise ValueError(f"nu must lie strictly inside (0, 1), got {self.nu!r}")
        if self.eps_w < 0 or self.eps_v < 0:
            raise ValueError("eps_w and eps_v must be nonnegative")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if not 0.0 < self.relax < 2.0:
            raise ValueError("relax must lie in (0, 2)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        return cls(**d)


@dataclass(frozen=True)
class Solution:
    M: DissipativityParams
    rho: float
    xi: np.ndarray
    objective: float
    alpha: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def rho_star(self) -> np.ndarray:
        """Per-sample effective margins ``rho - xi_i``."""
        return self.rho - self.xi

    def to_dict(self) -> dict:
        return {
            "M_ww": self.M.M_ww.tolist(),
            "M_vv": self.M.M_vv.tolist(),
            "rho": self.rho,
            "xi": self.xi.tolist(),
            "alpha": self.alpha.tolist(),
            "objective": self.objective,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Solution":
        M = DissipativityParams(np.array(d["M_ww"], dtype=float).reshape(
            len(d["M_ww"]), len(d["M_ww"])), np.array(d["M_vv"], dtype=float).reshape(
            len(d["M_vv"]), len(d["M_vv"])))
        return cls(M, float(d["rho"]), np.array(d["xi"], dtype=float), float(d["objective"]),
                   np.array(d.get("alpha", []), dtype=float), dict(d.get("diagnostics", {})))


# --- cone helpers -----------------------------------------------------------


def project_block_psd(S, eps: float = 0.0, sign: str = "positive") -> np.ndarray:
    """Nearest (Frobenius) symmetric matrix with all eigenvalues ``>= eps``
    (``sign="positive"``) or ``<= -eps`` (``sign="negative"``)."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.size == 0:
        return S.reshape(0, 0)
    S = 0.5 * (S + S.T)
    lam, V = np.linalg.eigh(S)
    if sign == "positive":
        if lam[0] >= eps:
            return S
        lam = np.maximum(lam, eps)
    elif sign == "negative":
        if lam[-1] <= -eps:
            return S
        lam = np.minimum(lam, -eps)
    else:
        raise ValueError(f"sign must be 'positive' or 'negative', got {sign!r}")
    out = (V * lam) @ V.T
    return 0.5 * (out + out.T)


def _svec_index(n: int):
    rows, cols = np.triu_indices(n)
    scale = np.where(rows == cols, 1.0, math.sqrt(2.0))
    return rows, cols, scale


def _svec(S: np.ndarray) -> np.ndarray:
    rows, cols, scale = _svec_index(S.shape[0])
    return S[rows, cols] * scale


def _smat(v: np.ndarray, n: int) -> np.ndarray:
    rows, cols, scale = _svec_index(n)
    S = np.zeros((n, n))
    S[rows, cols] = v / scale
    S[cols, rows] = v / scale
    return S


class _Problem:
    """Shared data layout for both solvers."""

    def __init__(self, grams: Sequence[GramMatrix], config: SolverConfig):
        if len(grams) == 0:
            raise ValueError("need at least one Gram matrix")
        n_z, n_zw = grams[0].n_z, grams[0].n_zw
        for i, G in enumerate(grams):
            if G.n_z != n_z or G.n_zw != n_zw:
                raise ValueError(
                    f"Gram {i} has layout ({G.n_zw}, {G.n_zv}), expected ({n_zw}, {n_z - n_zw})"
                )
        self.config = config
        self.m = len(grams)
        self.n_zw = n_zw
        self.n_zv = n_z - n_zw
        self.c = 1.0 / (config.nu * self.m)
        fix = config.fix_output_block
        self.fixed_w = -np.eye(1) if (fix and n_zw == 1) else None
        self.fixed_v = np.eye(1) if (fix and self.n_zv == 1) else None
        self.ww = np.array([G.ww for G in grams]).reshape(self.m, n_zw, n_zw)
        self.vv = np.array([G.vv for G in grams]).reshape(self.m, self.n_zv, self.n_zv)
        blocks = []
        self.offset = np.zeros(self.m)
        if self.fixed_w is None:
            blocks.append(np.array([_svec(g) for g in self.ww]).reshape(self.m, -1))
        else:
            self.offset += np.einsum("ij,kij->k", self.fixed_w, self.ww)
        if self.fixed_v is None:
            blocks.append(np.array([_svec(g) for g in self.vv]).reshape(self.m, -1))
        else:
            self.offset += np.einsum("ij,kij->k", self.fixed_v, self.vv)
        self.pw = 0 if self.fixed_w is not None else n_zw * (n_zw + 1) // 2
        self.pv = 0 if self.fixed_v is not None else self.n_zv * (self.n_zv + 1) // 2
        self.p = self.pw + self.pv
        self.G = np.hstack(blocks) if blocks else np.zeros((self.m, 0))
        self.const = 0.0
        for F in (self.fixed_w, self.fixed_v):
            if F is not None:
                self.const += 0.5 * float(np.sum(F * F))

    def unpack(self, mvec: np.ndarray) -> DissipativityParams:
        Mw = self.fixed_w if self.fixed_w is not None else _smat(mvec[: self.pw], self.n_zw)
        Mv = self.fixed_v if self.fixed_v is not None else _smat(mvec[self.pw :], self.n_zv)
        return DissipativityParams(Mw, Mv)

    def project_cones(self, mvec: np.ndarray) -> np.ndarray:
        out = mvec.copy()
        cfg = self.config
        if self.pw:
            Mw = project_block_psd(_smat(mvec[: self.pw], self.n_zw), cfg.eps_w, "negative")
            out[: self.pw] = _svec(Mw)
        if self.pv:
            Mv = project_block_psd(_smat(mvec[self.pw :], self.n_zv), cfg.eps_v, "positive")
            out[self.pw :] = _svec(Mv)
        return out

    def project_dual_point(self, S_ww: np.ndarray, S_vv: np.ndarray) -> DissipativityParams:
        """``Proj_K`` of a block pair ``(S_ww, S_vv)``."""
        cfg = self.config
        Mw = self.fixed_w if self.fixed_w is not None else project_block_psd(S_ww, cfg.eps_w,
                                                                             "negative")
        Mv = self.fixed_v if self.fixed_v is not None else project_block_psd(S_vv, cfg.eps_v,
                                                                             "positive")
        return DissipativityParams(Mw, Mv)

    def margins(self, M: DissipativityParams) -> np.ndarray:
        return np.einsum("ij,kij->k", M.M_ww, self.ww) + np.einsum("ij,kij->k", M.M_vv, self.vv)

    def best_rho(self, f: np.ndarray) -> float:
        """Minimizer of ``-rho + c sum_i (rho - f_i)_+``: the ``ceil(nu m)``-th smallest margin."""
        k = math.ceil(self.config.nu * self.m - 1e-12)
        return float(np.sort(f)[max(k, 1) - 1])

    def finish(self, M: DissipativityParams, alpha: np.ndarray, diagnostics: dict) -> Solution:
        f = self.margins(M)
        rho = self.best_rho(f)
        xi = np.maximum(rho - f, 0.0)
        obj = 0.5 * float(np.sum(M.full**2)) - rho + self.c * float(xi.sum())
        diagnostics = dict(diagnostics)
        n_free = int(np.sum((alpha > 1e-9 * self.c) & (alpha < self.c * (1 - 1e-9))))
        if n_free == 0:
            diagnostics["note"] = "rho is not pinned by a free support vector; (rho, xi) may be non-unique"
        sol = Solution(M, rho, xi, obj, alpha, diagnostics)
        sol.diagnostics["kkt_residual"] = _kkt(self, sol)
        return sol


# --- ADMM -------------------------------------------------------------------


def _capped_simplex_sort(v: np.ndarray, cap: float) -> np.ndarray:
    """Exact projection onto ``{0 <= a_i <= cap, sum a = 1}``.

    The projection is ``clip(v - tau, 0, cap)``; the clipped sum is piecewise
    linear and nonincreasing in ``tau`` with kinks at ``v_i`` and
    ``v_i - cap``, so the root is found by sorting the kinks and solving
    the linear piece that brackets it.
    """
    v = np.asarray(v, dtype=float)
    knots = np.sort(np.concatenate([v, v - cap]))
    vs = np.sort(v)
    csum = np.concatenate([[0.0], np.cumsum(vs)])
    # coordinates with v_i >= tau + cap sit at the cap, those in (tau, tau + cap) are free
    hi = np.searchsorted(vs, knots + cap, side="left")
    lo = np.searchsorted(vs, knots, side="right")
    sums = cap * (v.size - hi) + (csum[hi] - csum[lo]) - knots * (hi - lo)
    # sums is nonincreasing along knots; find the last knot with sum >= 1
    k = int(np.searchsorted(-sums, -1.0, side="right")) - 1
    if k < 0:
        return np.clip(v - knots[0], 0.0, cap)
    if k == knots.size - 1 or sums[k] == 1.0:
        return np.clip(v - knots[k], 0.0, cap)
    t0, t1, s0, s1 = knots[k], knots[k + 1], sums[k], sums[k + 1]
    tau = t0 + (s0 - 1.0) * (t1 - t0) / (s0 - s1) if s0 > s1 else t0
    return np.clip(v - tau, 0.0, cap)


def _proj_derivative(S: np.ndarray, eps: float, sign: str):
    """Directional derivative ``H -> dProj(S)[H]`` of the shifted-cone projection."""
    lam, V = np.linalg.eigh(S)
    if sign == "positive":
        g, free = np.maximum(lam, eps), lam > eps
    else:
        g, free = np.minimum(lam, -eps), lam < -eps
    dl = lam[:, None] - lam[None, :]
    close = np.abs(dl) <= 1e-12 * (1.0 + np.abs(lam).max())
    with np.errstate(divide="ignore", invalid="ignore"):
        omega = np.where(close, 0.0, (g[:, None] - g[None, :]) / np.where(close, 1.0, dl))
    same = np.where(close & free[:, None] & free[None, :], 1.0, 0.0)
    omega = np.where(close, same, omega)

    def apply(H):
        return V @ (omega * (V.T @ H @ V)) @ V.T

    return apply


def _newton_on_face(pb: _Problem, alpha0: np.ndarray, upper: np.ndarray, lower: np.ndarray):
    """Newton solve of the margin equalities with the bound sets held fixed."""
    cfg, c = pb.config, pb.c
    free = np.flatnonzero(~upper & ~lower)
    alpha = np.where(upper, c, np.where(lower, 0.0, alpha0))
    M = pb.project_dual_point(np.einsum("k,kij->ij", alpha, pb.ww),
                              np.einsum("k,kij->ij", alpha, pb.vv))
    f = pb.margins(M)
    rho = float(np.mean(f[free])) if free.size else pb.best_rho(f)
    history = []
    for _ in range(20):
        S_ww = np.einsum("k,kij->ij", alpha, pb.ww)
        S_vv = np.einsum("k,kij->ij", alpha, pb.vv)
        M = pb.project_dual_point(S_ww, S_vv)
        f = pb.margins(M)
        r = np.concatenate([f[free] - rho, [alpha.sum() - 1.0]])
        res = float(np.max(np.abs(r)))
        if res <= 1e-14 * (1.0 + np.abs(f).max()):
            break
        # on the right face Newton converges fast; stalling means a wrong face
        history.append(res)
        if len(history) > 3 and res > 0.5 * history[-4]:
            break
        dw = (_proj_derivative(S_ww, cfg.eps_w, "negative")
              if pb.fixed_w is None and pb.n_zw else None)
        dv = (_proj_derivative(S_vv, cfg.eps_v, "positive")
              if pb.fixed_v is None and pb.n_zv else None)
        J = np.zeros((free.size + 1, free.size + 1))
        for col, j in enumerate(free):
            dMw = dw(pb.ww[j]) if dw else np.zeros_like(pb.ww[j])
            dMv = dv(pb.vv[j]) if dv else np.zeros_like(pb.vv[j])
            J[:-1, col] = (np.einsum("ij,kij->k", dMw, pb.ww[free])
                           + np.einsum("ij,kij->k", dMv, pb.vv[free]))
            J[-1, col] = 1.0
        J[:-1, -1] = -1.0
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        alpha[free] += step[:-1]
        rho += step[-1]
    return alpha, rho, f


def _polish(pb: _Problem, alpha0: np.ndarray) -> Solution | None:
    """Exact finish from the active set suggested by an approximate dual point.

    With the weights split into those at 0, at the cap and free, the free
    weights and ``rho`` solve ``f_i(M(alpha)) = rho`` on the free set and
    ``sum alpha = 1``, where ``M(alpha) = Proj_K(sum alpha_i Gamma_i)``. This
    piecewise smooth system is solved by Newton steps with the analytic
    projection derivative (least squares when the dual is degenerate).
    """
    cfg, c = pb.config, pb.c
    M0 = pb.project_dual_point(np.einsum("k,kij->ij", alpha0, pb.ww),
                               np.einsum("k,kij->ij", alpha0, pb.vv))
    f0 = pb.margins(M0)
    rho0 = pb.best_rho(f0)
    scale0 = 1.0 + float(np.abs(f0).max())
    guesses = []
    for delta in (1e-3, 1e-6, 1e-2):
        guesses.append((alpha0 >= c * (1.0 - delta), alpha0 <= c * delta))
    for tol in (1e-4, 1e-6, 1e-3):
        guesses.append((f0 < rho0 - tol * scale0, f0 > rho0 + tol * scale0))
    # a vertex of the dual has at most p + 1 free weights; allow some degeneracy
    max_free = max(2 * (pb.p + 1), 10)
    best = None
    for upper, lower in guesses:
        upper, lower = upper.copy(), lower.copy()
        if np.count_nonzero(~upper & ~lower) > max_free:
            continue
        seen = set()
        for _ in range(8):
            key = (upper.tobytes(), lower.tobytes())
            if key in seen:
                break
            seen.add(key)
            alpha, rho, f = _newton_on_face(pb, alpha0, upper, lower)
            free = ~upper & ~lower
            low_out = free & (alpha < -1e-12 * c)
            high_out = free & (alpha > c * (1 + 1e-12))
            gap = 1e-12 * (1.0 + float(np.abs(f).max()))
            wake = (lower & (f < rho - gap)) | (upper & (f > rho + gap))
            if not (low_out.any() or high_out.any() or wake.any()):
                break
            lower = (lower | low_out) & ~wake
            upper = (upper | high_out) & ~wake
        alpha = np.clip(alpha, 0.0, c)
        M = pb.project_dual_point(np.einsum("k,kij->ij", alpha, pb.ww),
                                  np.einsum("k,kij->ij", alpha, pb.vv))
        sol = pb.finish(M, alpha, {})
        if best is None or sol.diagnostics["kkt_residual"] < best.diagnostics["kkt_residual"]:
            best = sol
        if best.diagnostics["kkt_residual"] <= cfg.polish_tol:
            break
    return best


def solve(grams: Sequence[GramMatrix], config: SolverConfig | None = None) -> Solution:
    """Solve the OC-SVM program by ADMM.

    For fixed ``M`` the best ``(rho, xi)`` is available in closed form and the
    remaining cost of the margins ``f = G svec(M) + offset`` is
    ``phi(f) = -min_{alpha in C} alpha^T f`` over the capped simplex ``C``.
    ADMM splits ``x = svec M`` (strongly convex quadratic, one small cached
    Cholesky solve per iteration) from the copies ``u = f`` and ``s = svec M``:
    the ``u`` update is the prox of ``phi`` (a capped-simplex projection) and
    the ``s`` update projects each block onto its shifted PSD cone. The step
    parameter is rebalanced from the residual ratio. The returned ``M`` is the
    cone copy, so the cone constraints hold exactly; ``rho`` and ``xi`` are
    then recomputed exactly for that ``M``.
    """
    config = config or SolverConfig()
    pb = _Problem(grams, config)
    m, p, c = pb.m, pb.p, pb.c
    if c * m < 1.0 - 1e-12:
        raise ValueError("1/(nu m) * m < 1: no feasible margin weights")
    G, off = pb.G, pb.offset
    diagnostics = {"method": "admm", "iterations": 0}
    if p == 0:
        # every block pinned: only (rho, xi) remain
        M = pb.unpack(np.zeros(0))
        # weights fill the smallest margins at the cap, in order
        order = np.argsort(pb.margins(M), kind="stable")
        alpha = np.zeros(m)
        alpha[order] = np.clip(1.0 - c * np.arange(m), 0.0, c)
        diagnostics["status"] = "converged"
        return pb.finish(M, alpha, diagnostics)

    # column scale so the constraint map is well balanced
    colnorm = np.linalg.norm(G, axis=0)
    gscale = float(np.sqrt(np.mean(colnorm**2))) or 1.0
    A = np.vstack([G, gscale * np.eye(p)])
    n_rows = m + p
    step = config.rho0 * 1.0
    AtA = A.T @ A

    def factor(rh):
        K = rh * AtA
        K[np.diag_indices(p)] += 1.0
        return scipy.linalg.cho_factor(K)

    def prox(v, rh):
        out = np.empty_like(v)
        out[:m] = v[:m] + _capped_simplex_sort(-rh * v[:m], c) / rh
        out[m:] = gscale * pb.project_cones(v[m:] / gscale)
        return out

    b = np.concatenate([off, np.zeros(p)])
    chol = factor(step)
    x = np.zeros(p)
    z = prox(A @ x + b, step)
    y = np.zeros(n_rows)
    relax = config.relax
    status = "max_iter"
    r_prim = r_dual = np.inf
    n_refactor = 0
    it = 0
    tol_scale = math.sqrt(n_rows)
    next_polish = config.polish_every
    for it in range(1, config.max_iter + 1):
        x = scipy.linalg.cho_solve(chol, step * (A.T @ (z - b - y)))
        Axb = A @ x + b
        v = relax * Axb + (1.0 - relax) * z
        z_old = z
        z = prox(v + y, step)
        y = y + v - z
        if it % config.check_every and it % config.adapt_every:
            continue
        r_prim = float(np.linalg.norm(Axb - z))
        r_dual = float(step * np.linalg.norm(A.T @ (z - z_old)))
        n_prim = max(float(np.linalg.norm(Axb)), float(np.linalg.norm(z)))
        n_dual = float(step * np.linalg.norm(A.T @ y))
        eps_p = tol_scale * config.eps_abs + config.eps_rel * n_prim
        eps_d = tol_scale * config.eps_abs + config.eps_rel * n_dual
        if r_prim <= eps_p and r_dual <= eps_d:
            status = "converged"
            break
        if config.polish and it >= next_polish:
            # attempts thin out geometrically so failures cost a bounded share
            next_polish = max(it + config.polish_every, int(1.25 * it))
            polished = _polish(pb, np.clip(-step * y[:m], 0.0, c))
            if polished is not None and polished.diagnostics["kkt_residual"] <= config.polish_tol:
                polished.diagnostics.update({
                    "method": "admm", "status": "polished", "iterations": it,
                    "primal_residual": r_prim, "dual_residual": r_dual,
                    "step_parameter": step, "refactorizations": n_refactor,
                })
                log.debug("admm polished after %d iterations", it)
                return polished
        if it % config.adapt_every == 0:
            ratio = math.sqrt((r_prim / (n_prim + 1e-300)) / (r_dual / (n_dual + 1e-300) + 1e-300))
            if ratio > 5.0 or ratio < 0.2:
                new = float(np.clip(step * ratio, 1e-8, 1e8))
                y *= step / new
                step = new
                chol = factor(step)
                n_refactor += 1
    M = pb.unpack(z[m:] / gscale)
    alpha = np.clip(-step * y[:m], 0.0, c)
    diagnostics.update({
        "status": status,
        "iterations": it,
        "primal_residual": r_prim,
        "dual_residual": r_dual,
        "step_parameter": step,
        "refactorizations": n_refactor,
    })
    sol = pb.finish(M, alpha, diagnostics)
    if status != "converged":
        raise SolverError(
            f"ADMM did not converge in {config.max_iter} iterations "
            f"(primal {r_prim:.3g}, dual {r_dual:.3g})",
            sol.diagnostics | {"solution": sol.to_dict()},
        )
    log.debug("admm converged in %d iterations", it)
    return sol


# --- dual oracle ------------------------------------------------------------


def _project_capped_simplex(v: np.ndarray, cap: float) -> np.ndarray:
    """Euclidean projection onto ``{0 <= a_i <= cap, sum a = 1}``."""
    lo = float(np.min(v)) - cap - 1.0
    hi = float(np.max(v)) + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        s = np.clip(v - mid, 0.0, cap).sum()
        if s > 1.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-16 * max(1.0, abs(mid)):
            break
    a = np.clip(v - 0.5 * (lo + hi), 0.0, cap)
    # spread the rounding error over the free coordinates
    free = (a > 0) & (a < cap)
    if free.any():
        a[free] += (1.0 - a.sum()) / free.sum()
    return np.clip(a, 0.0, cap)


def oracle_solve(grams: Sequence[GramMatrix], config: SolverConfig | None = None) -> Solution:
    """Reference solution for small instances via the dual problem.

    Maximizes ``g(alpha) = min_{M in K} 1/2||M||^2 - <M, sum alpha_i Gamma_i>``
    over the capped simplex by FISTA with gradient-based restarts, then
    recovers ``M = Proj_K(sum alpha_i Gamma_i)``. Stops once the duality gap
    is below ``config.oracle_gap * (1 + |objective|)``.
    """
    config = config or SolverConfig()
    pb = _Problem(grams, config)
    if pb.n_zw + pb.n_zv > 6 or pb.m > 200:
        log.warning("oracle_solve is meant for small instances (n_z <= 5, m <= 50)")
    m, c = pb.m, pb.c
    if c * m < 1.0 - 1e-12:
        raise ValueError("infeasible dual: 1/(nu m) * m < 1")

    def primal_point(alpha):
        return pb.project_dual_point(np.einsum("k,kij->ij", alpha, pb.ww),
                                     np.einsum("k,kij->ij", alpha, pb.vv))

    def dual_value(M, alpha):
        S = np.einsum("k,kij->ij", alpha, pb.ww), np.einsum("k,kij->ij", alpha, pb.vv)
        return 0.5 * float(np.sum(M.full**2)) - float(np.sum(M.M_ww * S[0]) +
                                                     np.sum(M.M_vv * S[1]))

    # gradient Lipschitz constant: squared spectral norm of the data map
    data = np.hstack([pb.ww.reshape(m, -1), pb.vv.reshape(m, -1)])
    lip = float(np.linalg.norm(data, 2) ** 2) or 1.0
    step = 1.0 / lip
    alpha = np.full(m, 1.0 / m)
    mom = alpha.copy()
    t = 1.0
    status = "max_iter"
    gap = np.inf
    best = None
    it = 0
    for it in range(1, config.oracle_max_iter + 1):
        M = primal_point(mom)
        grad = -pb.margins(M)
        new = _project_capped_simplex(mom + step * grad, c)
        if np.dot(grad, new - alpha) < 0:
            # momentum points downhill: restart with a plain projected step
            M = primal_point(alpha)
            alpha = _project_capped_simplex(alpha - step * pb.margins(M), c)
            mom = alpha.copy()
            t = 1.0
        else:
            t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            mom = new + ((t - 1.0) / t_next) * (new - alpha)
            alpha, t = new, t_next
        if it % 50 == 0 or it == config.oracle_max_iter:
            Ma = primal_point(alpha)
            sol = pb.finish(Ma, alpha, {})
            gap = sol.objective - dual_value(Ma, alpha)
            best = (sol, gap)
            if gap <= config.oracle_gap * (1.0 + abs(sol.objective)):
                status = "converged"
                break
    if best is None:
        Ma = primal_point(alpha)
        sol = pb.finish(Ma, alpha, {})
        gap = sol.objective - dual_value(Ma, alpha)
        best = (sol, gap)
    sol, gap = best
    sol.diagnostics.update({"method": "dual-fista", "status": status, "iterations": it,
                            "duality_gap": float(gap)})
    if status != "converged":
        raise SolverError(f"dual oracle did not reach gap tolerance (gap {gap:.3g})",
                          sol.diagnostics)
    return sol


# --- certificates and statistics -------------------------------------------


def _kkt(pb: _Problem, sol: Solution) -> float:
    cfg = pb.config
    M = sol.M
    f = pb.margins(M)
    scale = 1.0 + float(np.max(np.abs(f)))
    prim = max(float(np.max(np.maximum(sol.rho - sol.xi - f, 0.0))),
               float(np.max(np.maximum(-sol.xi, 0.0)))) / scale
    cone = 0.0
    if pb.fixed_w is None and pb.n_zw:
        cone = max(cone, float(np.linalg.eigvalsh(M.M_ww).max() + cfg.eps_w))
    if pb.fixed_v is None and pb.n_zv:
        cone = max(cone, float(cfg.eps_v - np.linalg.eigvalsh(M.M_vv).min()))
    cone = max(cone, 0.0)
    a = sol.alpha
    if a.size != pb.m:
        return float("inf")
    dual = max(abs(float(a.sum()) - 1.0), float(np.max(np.maximum(-a, 0.0))),
               float(np.max(np.maximum(a - pb.c, 0.0))) / pb.c)
    target = pb.project_dual_point(np.einsum("k,kij->ij", a, pb.ww),
                                   np.einsum("k,kij->ij", a, pb.vv))
    stat = float(np.linalg.norm(M.full - target.full)) / (1.0 + float(np.linalg.norm(M.full)))
    slack = f - sol.rho + sol.xi
    comp = max(float(np.max(a * np.abs(slack))) / scale,
               float(np.max((pb.c - a) * sol.xi)) / (pb.c * scale))
    return max(prim, cone, dual, stat, comp)


def kkt_residual(sol: Solution, grams: Sequence[GramMatrix], config: SolverConfig) -> float:
    """Largest relative violation among primal/dual feasibility, stationarity
    ``M = Proj_K(sum alpha_i Gamma_i)`` and complementary slackness."""
    return _kkt(_Problem(grams, config), sol)


def margin_violation_stats(sol: Solution, m: int | None = None) -> dict:
    m = int(m if m is not None else sol.xi.size)
    xi = sol.xi
    return {
        "mean_violation": float(xi.sum() / m),
        "violating_count": int(np.count_nonzero(xi > 0.0)),
        "rho": float(sol.rho),
        "rho_star_min": float(np.min(sol.rho_star)) if xi.size else float(sol.rho),
    }


def holdout_violation_rate(
    M: DissipativityParams, rho_star: float, holdout: Sequence[GramMatrix], eps: float = 0.0
) -> float:
    """Fraction of held-out trajectories with ``<M, Gamma> < rho_star - eps``."""
    if len(holdout) == 0:
        raise ValueError("holdout set is empty")
    vals = np.array([M.pair(G) for G in holdout])
    return float(np.mean(vals < rho_star - eps))
