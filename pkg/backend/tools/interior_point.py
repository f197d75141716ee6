# backend/tools/interior_point.py

"""
Primal-dual interior-point solver for smooth nonlinear programs

    min f(x)  s.t.  g(x) = 0,  h(x) <= 0,  xmin <= x <= xmax

Variable bounds are folded into linear inequality rows; variables with equal
bounds become linear equality rows. Inequalities carry slacks z > 0 and
multipliers mu > 0, the barrier parameter follows min(previous, sigma * z'mu / n_ineq).
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

logger = logging.getLogger(__name__)

BOUND_INF = 1e10
DIVERGENCE_NORM = 1e10
# seeded slacks that would hold the primal step below this are reset to the cold rule
RELEASE_STEP = 0.5


# ─────────────────────────────────────────────
# Problem / result containers
# ─────────────────────────────────────────────

@dataclass
class NlpProblem:
    """
    f_fcn(x)            -> (f, df)
    gh_fcn(x)           -> (h, g, dh, dg), Jacobians as sparse (rows = constraints)
    hess_fcn(x, lam, mu)-> sparse Hessian of the Lagrangian over the nonlinear parts
    """
    f_fcn:    Callable[[np.ndarray], Tuple[float, np.ndarray]]
    gh_fcn:   Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray, sp.spmatrix, sp.spmatrix]]
    hess_fcn: Callable[[np.ndarray, np.ndarray, np.ndarray], sp.spmatrix]
    x0:       np.ndarray
    xmin:     np.ndarray
    xmax:     np.ndarray


@dataclass
class BoundLayout:
    """Row positions of folded bounds: equality rows, then upper rows, then lower rows."""
    fixed: np.ndarray
    upper: np.ndarray
    lower: np.ndarray

    @classmethod
    def of(cls, xmin: np.ndarray, xmax: np.ndarray, eq_tol: float = 1e-10) -> "BoundLayout":
        fixed = np.abs(xmax - xmin) <= eq_tol
        upper = (xmax < BOUND_INF) & ~fixed
        lower = (xmin > -BOUND_INF) & ~fixed
        return cls(np.flatnonzero(fixed), np.flatnonzero(upper), np.flatnonzero(lower))


@dataclass
class StartPoint:
    """
    Optional slack and multiplier start at barrier level `gamma`.
    NaN slacks fall back to the cold rule max(1, -h); NaN multipliers to gamma / z.
    """
    z:     Optional[np.ndarray] = None
    mu:    Optional[np.ndarray] = None
    gamma: float = 1.0


@dataclass
class IpmResult:
    x:          np.ndarray
    f:          float
    lam:        np.ndarray
    mu:         np.ndarray
    z:          np.ndarray
    converged:  bool
    iterations: int
    conditions: Dict[str, float]
    barrier_history: List[float] = field(default_factory=list)
    message:    str = ""

    @property
    def kkt_residual(self) -> float:
        return max(self.conditions["feascond"], self.conditions["gradcond"], self.conditions["compcond"])


# ─────────────────────────────────────────────
# Solver
# ─────────────────────────────────────────────

def _conditions(x, z, f, f0, g, h, lx, lam, mu) -> Dict[str, float]:
    norm_x = np.linalg.norm(x, np.inf) if len(x) else 0.0
    norm_z = np.linalg.norm(z, np.inf) if len(z) else 0.0
    norm_g = np.linalg.norm(g, np.inf) if len(g) else 0.0
    max_h = float(np.max(h)) if len(h) else 0.0
    norm_lam = np.linalg.norm(lam, np.inf) if len(lam) else 0.0
    norm_mu = np.linalg.norm(mu, np.inf) if len(mu) else 0.0
    return {
        "feascond": max(norm_g, max_h) / (1 + max(norm_x, norm_z)),
        "gradcond": float(np.linalg.norm(lx, np.inf)) / (1 + max(norm_lam, norm_mu)),
        "compcond": float(z @ mu) / (1 + norm_x),
        "costcond": abs(f - f0) / (1 + abs(f0)),
    }


def _newton_direction(problem, x, z, lam, mu, gamma, df, h, g, dh, dg, n_nonlinear):
    """Reduced primal-dual Newton step; None when the step is not finite."""
    neq_nl, niq_nl = n_nonlinear
    nx, neq, niq = len(x), len(g), len(h)

    lx = df + dg.T @ lam + dh.T @ mu
    lxx = sp.csr_matrix(problem.hess_fcn(x, lam[:neq_nl], mu[:niq_nl]))
    zinv = sp.diags(1.0 / z, 0, shape=(niq, niq), format="csr")
    mu_diag = sp.diags(mu, 0, shape=(niq, niq), format="csr")
    if niq:
        dh_zinv = dh.T @ zinv
        M = lxx + dh_zinv @ mu_diag @ dh
        N = lx + dh_zinv @ (mu_diag @ h + gamma)
    else:
        M, N = lxx, lx

    if neq:
        kkt = sp.bmat([[M, dg.T], [dg, None]], format="csc")
    else:
        kkt = sp.csc_matrix(M)
    step = splu(kkt).solve(np.r_[-N, -g])
    if not np.all(np.isfinite(step)):
        return None

    dx = step[:nx]
    dlam = step[nx:]
    dz = -h - z - dh @ dx
    dmu = -mu + zinv @ (gamma - mu_diag @ dz)
    return dx, dlam, dz, dmu


def solve(
    problem: NlpProblem,
    tol: float = 1e-6,
    max_iter: int = 50,
    sigma: float = 0.1,
    step_fraction: float = 0.995,
    start: Optional[StartPoint] = None,
) -> IpmResult:
    x = np.asarray(problem.x0, dtype=float).copy()
    nx = len(x)
    xmin = np.asarray(problem.xmin, dtype=float)
    xmax = np.asarray(problem.xmax, dtype=float)
    layout = BoundLayout.of(xmin, xmax)

    eye = sp.identity(nx, format="csr")
    ae = eye[layout.fixed]
    be = xmin[layout.fixed]
    ai = sp.vstack([eye[layout.upper], -eye[layout.lower]], format="csr")
    bi = np.r_[xmax[layout.upper], -xmin[layout.lower]]

    def evaluate(x):
        f, df = problem.f_fcn(x)
        hn, gn, dhn, dgn = problem.gh_fcn(x)
        h = np.r_[hn, ai @ x - bi]
        g = np.r_[gn, ae @ x - be]
        dh = sp.vstack([dhn, ai], format="csr")
        dg = sp.vstack([dgn, ae], format="csr")
        return f, df, h, g, dh, dg, len(hn), len(gn)

    f, df, h, g, dh, dg, niq_nl, neq_nl = evaluate(x)
    n_nonlinear = (neq_nl, niq_nl)
    f0 = f
    neq, niq = len(g), len(h)

    # cold rule: z = max(1, -h), mu = 1, barrier starts at 1
    gamma = 1.0
    z = np.maximum(1.0, -h)
    mu = np.ones(niq)
    tight = np.zeros(niq, dtype=bool)
    if start is not None:
        gamma = float(start.gamma)
        if start.z is not None:
            if len(start.z) != niq:
                raise ValueError(f"start has {len(start.z)} slacks, problem has {niq} inequalities")
            hint = ~np.isnan(start.z)
            z[hint] = start.z[hint]
            tight = hint & (z < 1.0)
        mu = gamma / z
        if start.mu is not None:
            hint = ~np.isnan(start.mu)
            mu[hint] = start.mu[hint]
    lam = np.zeros(neq)

    lx = df + dg.T @ lam + dh.T @ mu
    cond = _conditions(x, z, f, f0, g, h, lx, lam, mu)
    barrier_history = [gamma]
    converged = all(v < tol for v in cond.values())
    message = "converged" if converged else ""
    i = 0

    while not converged and i < max_iter:
        i += 1

        try:
            step = _newton_direction(problem, x, z, lam, mu, gamma, df, h, g, dh, dg, n_nonlinear)
            if step is not None and tight.any():
                dz = step[2]
                blocked = tight & (dz < 0) & (step_fraction * z < RELEASE_STEP * -dz)
                if blocked.any():
                    z[blocked] = np.maximum(1.0, -h[blocked])
                    mu[blocked] = gamma / z[blocked]
                    tight &= ~blocked
                    logger.debug(f"   IPM iter {i}: released {int(blocked.sum())} seeded slacks")
                    step = _newton_direction(problem, x, z, lam, mu, gamma, df, h, g, dh, dg, n_nonlinear)
        except RuntimeError as err:
            message = f"singular KKT system: {err}"
            logger.debug(f"   IPM iter {i}: {message}")
            break
        if step is None:
            message = "non-finite Newton step"
            break
        dx, dlam, dz, dmu = step

        # fraction-to-boundary step lengths
        alpha_p = 1.0
        k = dz < 0
        if np.any(k):
            alpha_p = min(step_fraction * np.min(z[k] / -dz[k]), 1.0)
        alpha_d = 1.0
        k = dmu < 0
        if np.any(k):
            alpha_d = min(step_fraction * np.min(mu[k] / -dmu[k]), 1.0)

        x = x + alpha_p * dx
        z = z + alpha_p * dz
        lam = lam + alpha_d * dlam
        mu = mu + alpha_d * dmu
        if niq > 0:
            gamma = min(gamma, sigma * float(z @ mu) / niq)
        barrier_history.append(gamma)

        f_prev = f
        f, df, h, g, dh, dg, _, _ = evaluate(x)
        lx = df + dg.T @ lam + dh.T @ mu
        cond = _conditions(x, z, f, f_prev, g, h, lx, lam, mu)
        logger.debug(
            f"   IPM iter {i}: f={f:.6g} feas={cond['feascond']:.2e} grad={cond['gradcond']:.2e} "
            f"comp={cond['compcond']:.2e} cost={cond['costcond']:.2e} gamma={gamma:.2e}"
        )

        if not np.all(np.isfinite(x)) or np.linalg.norm(x, np.inf) > DIVERGENCE_NORM or not np.isfinite(f):
            message = "numerically failed"
            break
        if all(v < tol for v in cond.values()):
            converged = True
            message = "converged"

    if not converged and not message:
        message = f"iteration limit {max_iter} reached"

    return IpmResult(
        x=x, f=float(f), lam=lam, mu=mu, z=z,
        converged=converged,
        iterations=i,
        conditions=cond,
        barrier_history=barrier_history,
        message=message,
    )
