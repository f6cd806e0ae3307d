"""Quasi-likelihood random fields, the local likelihood-ratio field, and limits.

Two concrete fields are built from simulated data:

* the continuous-record field of the ergodic regression model, an Ito-sum
  discretization of ``int S^-1[b(theta), dY] - 1/2 int S^-1[b(theta)^x2] dt``
  with left-endpoint integrands, and
* the discrete-observation volatility field
  ``-1/2 sum_j { log det S_j(theta) + h^-1 S_j(theta)^-1[(Delta_j Y)^x2] }``.

On top of a field, the module exposes the likelihood-ratio field
``Z(u) = exp(H(theta* + a_T u) - H(theta*))`` (always handled in log space;
the exponential is materialized only on demand), its local asymptotic
quadratic decomposition, a Monte Carlo estimate of the limit criterion and
limit information, and the modulus of continuity of ``log Z``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from ._seeds import substream
from .process_sim import (
    ErgodicModelSpec,
    RegressionSimulation,
    SamplePath,
    ThetaBox,
    VolEnvModelSpec,
    VolEnvSimulation,
)

__all__ = [
    "FieldError",
    "DomainError",
    "FieldEval",
    "LAQDecomp",
    "LimitField",
    "h_continuous",
    "h_volatility",
    "regression_suff_stats",
    "build_regression_field",
    "build_vol_field",
    "make_field",
    "log_z",
    "z_field",
    "u_box",
    "laq_decompose",
    "limit_field",
    "modulus_of_continuity",
    "field_to_csv",
    "laq_to_csv",
]


class FieldError(RuntimeError):
    """Field evaluation failed (singular diffusion, invalid inputs)."""


class DomainError(FieldError):
    """Requested local parameter lies outside U_T."""


# ---------------------------------------------------------------------------
# field container
# ---------------------------------------------------------------------------


@dataclass
class FieldEval:
    """A quasi-likelihood field evaluated over a theta-grid.

    Carries the evaluator itself (exact evaluation anywhere on the closed
    box), the grid snapshot, the local rate matrix a_T, the target theta*,
    and b_T = 1/lambda_min(a_T' a_T).  Immutable by convention after
    construction; safe to share across threads.
    """

    evaluator: Callable
    box: ThetaBox
    theta_star: np.ndarray
    a_T: np.ndarray
    theta_grid: np.ndarray
    values: np.ndarray
    grad: Optional[Callable] = None
    hess: Optional[Callable] = None
    batch_evaluator: Optional[Callable] = None
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.theta_star = np.atleast_1d(np.asarray(self.theta_star, dtype=float))
        p = self.theta_star.shape[0]
        self.a_T = np.atleast_2d(np.asarray(self.a_T, dtype=float))
        if self.a_T.shape != (p, p):
            raise ValueError("a_T must be a (p, p) matrix")
        self.theta_grid = np.asarray(self.theta_grid, dtype=float).reshape(-1, p)
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.shape[0] != self.theta_grid.shape[0]:
            raise ValueError("grid/value length mismatch")
        if not np.all(np.isfinite(self.values)):
            raise FieldError("field values must be finite on the grid")
        self._h_star = float(self.evaluator(self.theta_star))

    @property
    def dim(self) -> int:
        return self.theta_star.shape[0]

    @property
    def h_star(self) -> float:
        return self._h_star

    @property
    def b_T(self) -> float:
        sym = self.a_T.T @ self.a_T
        lam_min = float(np.linalg.eigvalsh(sym)[0])
        if lam_min <= 0:
            raise FieldError("a_T must be nonsingular")
        return 1.0 / lam_min

    def theta_of_u(self, u) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return self.theta_star + self.a_T @ u

    def u_of_theta(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        return np.linalg.solve(self.a_T, theta - self.theta_star)


def make_field(evaluator, box: ThetaBox, theta_star, a_T, points_per_axis: int = 401,
               grad=None, hess=None, batch_evaluator=None, meta=None) -> FieldEval:
    """Evaluate a scalar field over the box's tensor grid and wrap it."""
    grid = box.grid(points_per_axis)
    if batch_evaluator is not None:
        values = np.asarray(batch_evaluator(grid), dtype=float)
    else:
        values = np.array([evaluator(t) for t in grid], dtype=float)
    return FieldEval(
        evaluator=evaluator, box=box, theta_star=theta_star, a_T=a_T,
        theta_grid=grid, values=values, grad=grad, hess=hess,
        batch_evaluator=batch_evaluator, meta=dict(meta or {}),
    )


# ---------------------------------------------------------------------------
# concrete fields
# ---------------------------------------------------------------------------


def _regression_arrays(paths):
    if isinstance(paths, RegressionSimulation):
        l, u, y = paths.l_path, paths.u_path, paths.y_path
    else:
        l, u, y = paths
    if not (l.grid == u.grid == y.grid):
        raise FieldError("paths must share one grid")
    return l.values, u.values, y.values, l.grid


def h_continuous(paths, model: ErgodicModelSpec, theta) -> float:
    """Direct Ito-sum evaluation of the regression field at one theta.

    sum_j S_j^-1 b_j(theta) Delta_j Y - 1/2 sum_j S_j^-1 b_j(theta)^2 h,
    with all integrands frozen at the left endpoint (predictable version).
    """
    lv, uv, yv, grid = _regression_arrays(paths)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if not model.box.contains(theta, closed=True):
        raise DomainError("theta outside the closed parameter box")
    s = model.diffusion(lv[:-1], uv[:-1]) ** 2
    if np.min(s) <= 0:
        j = int(np.flatnonzero(s <= 0)[0])
        raise FieldError(f"singular diffusion S at grid index {j}")
    b = model.drift(lv[:-1], uv[:-1], theta)
    dy = np.diff(yv)
    return float(np.sum(b * dy / s) - 0.5 * grid.h * np.sum(b * b / s))


def regression_suff_stats(paths, model: ErgodicModelSpec):
    """(A, B) with H(theta) = theta'A - theta'B theta/2 for basis-linear drift."""
    if model.b1_basis is None:
        raise FieldError("model does not declare a linear drift basis")
    lv, uv, yv, grid = _regression_arrays(paths)
    s = model.diffusion(lv[:-1], uv[:-1]) ** 2
    if np.min(s) <= 0:
        j = int(np.flatnonzero(s <= 0)[0])
        raise FieldError(f"singular diffusion S at grid index {j}")
    b0 = model.b0(lv[:-1])
    g = np.stack([gk(uv[:-1]) for gk in model.b1_basis])        # (p, n)
    dy = np.diff(yv)
    w = b0 / s
    a_vec = g @ (w * dy)
    b_mat = (g * (w * b0)) @ (g.T * grid.h)
    return a_vec, 0.5 * (b_mat + b_mat.T)


def build_regression_field(paths, model: ErgodicModelSpec, points_per_axis: int = 401,
                           rate: str = "sqrt_T") -> FieldEval:
    """FieldEval for the regression model with a_T = T^(-1/2) I.

    Basis-linear models evaluate through the quadratic sufficient statistics
    (the same Ito sums, reorganized); other models fall back to direct
    summation per grid point.
    """
    lv, uv, yv, grid = _regression_arrays(paths)
    p = model.dim_theta
    a_T = np.eye(p) / math.sqrt(grid.T)
    if model.b1_basis is not None:
        a_vec, b_mat = regression_suff_stats(paths, model)

        def evaluator(theta):
            theta = np.atleast_1d(np.asarray(theta, dtype=float))
            return float(theta @ a_vec - 0.5 * theta @ b_mat @ theta)

        def batch(thetas):
            return thetas @ a_vec - 0.5 * np.einsum("ij,jk,ik->i", thetas, b_mat, thetas)

        grad = lambda theta: a_vec - b_mat @ np.atleast_1d(theta)
        hess = lambda theta: -b_mat
        meta = {"suff_stats": (a_vec, b_mat), "T": grid.T}
        return make_field(evaluator, model.box, model.theta_star, a_T,
                          points_per_axis, grad=grad, hess=hess,
                          batch_evaluator=batch, meta=meta)

    evaluator = lambda theta: h_continuous(paths, model, theta)
    return make_field(evaluator, model.box, model.theta_star, a_T, points_per_axis,
                      meta={"T": grid.T})


def _vol_arrays(data):
    if isinstance(data, VolEnvSimulation):
        gamma, x, y = data.gamma, data.x_path.values, data.y_path.values
        grid = data.x_path.grid
    else:
        gamma, xp, yp = data
        x, y, grid = xp.values, yp.values, xp.grid
    return gamma, x, y, grid


def h_volatility(data, model: VolEnvModelSpec, theta) -> float:
    """Discrete volatility field at one theta.

    -1/2 sum_j { log S(gamma, X_{t_{j-1}}, theta) + (Delta_j Y)^2 / (S h) }.
    """
    gamma, x, y, grid = _vol_arrays(data)
    theta = float(np.atleast_1d(theta)[0])
    s = np.asarray(model.s_func(gamma, x[:-1], theta), dtype=float)
    if np.min(s) <= 0 or not np.all(np.isfinite(s)):
        j = int(np.flatnonzero(~(s > 0) | ~np.isfinite(s))[0])
        raise FieldError(f"singular S at observation {j}")
    q = np.diff(y) ** 2
    return float(-0.5 * (np.sum(np.log(s)) + np.sum(q / s) / grid.h))


def build_vol_field(data, model: VolEnvModelSpec, points_per_axis: int = 401) -> FieldEval:
    """FieldEval for the volatility model with a_n = n^(-1/2)."""
    gamma, x, y, grid = _vol_arrays(data)
    n = grid.n_steps
    a_T = np.eye(1) / math.sqrt(n)
    q = np.diff(y) ** 2
    xl = x[:-1]
    h = grid.h

    def _s(theta):
        s = np.asarray(model.s_func(gamma, xl, theta), dtype=float)
        if np.min(s) <= 0 or not np.all(np.isfinite(s)):
            j = int(np.flatnonzero(~(s > 0) | ~np.isfinite(s))[0])
            raise FieldError(f"singular S at observation {j}")
        return s

    def evaluator(theta):
        theta = float(np.atleast_1d(theta)[0])
        s = _s(theta)
        return float(-0.5 * (np.sum(np.log(s)) + np.sum(q / s) / h))

    def grad(theta):
        theta = float(np.atleast_1d(theta)[0])
        s = _s(theta)
        ds = np.asarray(model.ds_dtheta(gamma, xl, theta), dtype=float)
        return np.atleast_1d(-0.5 * np.sum((ds / s) * (1.0 - q / (s * h))))

    def hess(theta):
        theta = float(np.atleast_1d(theta)[0])
        s = _s(theta)
        ds = np.asarray(model.ds_dtheta(gamma, xl, theta), dtype=float)
        d2s = np.asarray(model.d2s_dtheta2(gamma, xl, theta), dtype=float)
        val = -0.5 * np.sum(
            d2s / s - (ds / s) ** 2 - (q / h) * (d2s / s ** 2 - 2.0 * ds ** 2 / s ** 3)
        )
        return np.array([[val]])

    return make_field(evaluator, model.box, np.atleast_1d(model.theta_star), a_T,
                      points_per_axis, grad=grad, hess=hess, meta={"n": n, "T": grid.T})


# ---------------------------------------------------------------------------
# likelihood-ratio field and LAQ
# ---------------------------------------------------------------------------


def log_z(fev: FieldEval, u) -> float:
    """log Z(u) = H(theta* + a_T u) - H(theta*); exact 0 at u = 0."""
    theta = fev.theta_of_u(u)
    if not fev.box.contains(theta, closed=True):
        raise DomainError("outside U_T")
    if np.all(np.atleast_1d(u) == 0.0):
        return 0.0
    return float(fev.evaluator(theta)) - fev.h_star


def z_field(fev: FieldEval, u) -> float:
    """Z(u), materialized from log space on demand."""
    return math.exp(log_z(fev, u))


def u_box(fev: FieldEval) -> ThetaBox:
    """U_T as a box in local coordinates (diagonal a_T only)."""
    a = np.diag(fev.a_T)
    if not np.allclose(fev.a_T, np.diag(a)):
        raise FieldError("u-space box requires diagonal a_T")
    lo = (fev.box.lower - fev.theta_star) / a
    hi = (fev.box.upper - fev.theta_star) / a
    return ThetaBox(lower=np.minimum(lo, hi), upper=np.maximum(lo, hi))


@dataclass
class LAQDecomp:
    """Local quadratic decomposition of log Z around theta*.

    delta[u] is the a_T-rescaled score, gamma_T the rescaled observed
    information; ``remainder(u)`` returns
    log Z(u) - delta'u + u'Gamma u / 2 with the *limit* Gamma, which is the
    quantity driven to zero by the theory.
    """

    delta: np.ndarray
    gamma_T: np.ndarray
    gamma_limit: np.ndarray
    field: FieldEval

    def log_z_quadratic(self, u) -> float:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return float(self.delta @ u - 0.5 * u @ self.gamma_limit @ u)

    def remainder(self, u) -> float:
        return log_z(self.field, u) - self.log_z_quadratic(u)


def laq_decompose(fev: FieldEval, gamma_limit=None) -> LAQDecomp:
    """Delta and Gamma_T from the field's analytic derivatives at theta*.

    Delta[u] = dH(theta*)[a_T u] and Gamma_T[u^x2] = -d2H(theta*)[(a_T u)^x2].
    ``gamma_limit`` defaults to Gamma_T, making the remainder the pure
    curvature mismatch along the path.
    """
    if fev.grad is None or fev.hess is None:
        raise FieldError("field must provide analytic gradient and Hessian")
    g = np.atleast_1d(np.asarray(fev.grad(fev.theta_star), dtype=float))
    h = np.atleast_2d(np.asarray(fev.hess(fev.theta_star), dtype=float))
    delta = fev.a_T.T @ g
    gamma_T = -(fev.a_T.T @ h @ fev.a_T)
    gamma_T = 0.5 * (gamma_T + gamma_T.T)
    gl = gamma_T if gamma_limit is None else np.atleast_2d(np.asarray(gamma_limit, dtype=float))
    return LAQDecomp(delta=delta, gamma_T=gamma_T, gamma_limit=gl, field=fev)


# ---------------------------------------------------------------------------
# limit field
# ---------------------------------------------------------------------------


@dataclass
class LimitField:
    """Monte Carlo estimate of the limit criterion Y and limit information."""

    theta_grid: np.ndarray
    y_values: np.ndarray
    gamma: np.ndarray
    gamma_se: np.ndarray
    chi0: float
    n_mc: int
    y_se: np.ndarray

    @property
    def gamma_scalar(self) -> float:
        return float(self.gamma[0, 0])


def limit_field(model: ErgodicModelSpec, theta_grid=None, n_mc: int = 1_000_000,
                seed: int = 0, points_per_axis: int = 401) -> LimitField:
    """Estimate Y(theta) and Gamma by Monte Carlo over the stationary law.

    Draws (L_0, U_0) from the stationary marginals (independent components),
    averages the criterion integrand
    -1/2 S^-1 (b(theta) - b(theta*))^2 and the information integrand
    S^-1 (d_theta b)^x2, and reports the identifiability constant
    chi0 = inf over the grid, theta != theta*, of -Y(theta)/|theta-theta*|^2.
    """
    if n_mc < 10_000:
        raise ValueError("need n_mc >= 1e4 for a usable limit-field estimate")
    if theta_grid is None:
        theta_grid = model.box.grid(points_per_axis)
    theta_grid = np.asarray(theta_grid, dtype=float).reshape(-1, model.dim_theta)
    rng = substream(seed, "limit_field")
    sd_l, sd_u = model.stationary_marginal_sds()
    p = model.dim_theta

    gram = np.zeros((p, p))
    gram2 = np.zeros((p, p))
    n_done = 0
    chunk = 200_000
    if model.b1_basis is None:
        y_sum = np.zeros(theta_grid.shape[0])
        y_sumsq = np.zeros(theta_grid.shape[0])
    while n_done < n_mc:
        m = min(chunk, n_mc - n_done)
        l0 = rng.standard_normal(m) * sd_l
        u0 = rng.standard_normal(m) * sd_u
        s = model.diffusion(l0, u0) ** 2
        w = model.b0(l0) ** 2 / s
        db = np.asarray(model.db1(u0, model.theta_star), dtype=float).reshape(p, m)
        gram += (db * w) @ db.T
        gram2 += ((db ** 2) * w ** 2) @ (db ** 2).T  # entrywise sum of squared contributions
        if model.b1_basis is None:
            bstar = model.b1(u0, model.theta_star)
            for i, th in enumerate(theta_grid):
                d = model.b1(u0, th) - bstar
                contrib = -0.5 * w * d * d
                y_sum[i] += contrib.sum()
                y_sumsq[i] += (contrib ** 2).sum()
        n_done += m

    gamma = gram / n_mc
    gamma = 0.5 * (gamma + gamma.T)
    gamma_se = np.sqrt(np.maximum(gram2 / n_mc - gamma ** 2, 0.0) / n_mc)

    diffs = theta_grid - model.theta_star
    if model.b1_basis is not None:
        # linear drift: the shared-draw MC estimate of Y is exactly quadratic
        y_values = -0.5 * np.einsum("ij,jk,ik->i", diffs, gamma, diffs)
        y_se = 0.5 * np.einsum("ij,jk,ik->i", np.abs(diffs), gamma_se, np.abs(diffs))
    else:
        y_values = y_sum / n_mc
        y_se = np.sqrt(np.maximum(y_sumsq / n_mc - y_values ** 2, 0.0) / n_mc)

    norms = np.sum(diffs ** 2, axis=1)
    mask = norms > 1e-12
    chi0 = float(np.min(-y_values[mask] / norms[mask])) if np.any(mask) else math.inf
    return LimitField(theta_grid=theta_grid, y_values=y_values, gamma=gamma,
                      gamma_se=gamma_se, chi0=chi0, n_mc=n_mc, y_se=y_se)


# ---------------------------------------------------------------------------
# modulus of continuity
# ---------------------------------------------------------------------------


def modulus_of_continuity(fev: FieldEval, delta: float, c: float) -> float:
    """sup of |log Z(u2) - log Z(u1)| over grid pairs in B_c with |u2-u1| <= delta.

    Uses the field's theta-grid mapped into local coordinates; requires the
    grid spacing to be at most delta/2 so the discrete sup is meaningful.
    """
    if delta < 0 or c <= 0:
        raise ValueError("need delta >= 0 and c > 0")
    if delta == 0:
        return 0.0
    a = np.diag(fev.a_T)
    if not np.allclose(fev.a_T, np.diag(a)):
        raise FieldError("modulus computation requires diagonal a_T")
    u_grid = (fev.theta_grid - fev.theta_star) / a
    spacing = 0.0
    for k in range(u_grid.shape[1]):
        uniq = np.unique(np.round(u_grid[:, k], 12))
        if uniq.shape[0] > 1:
            spacing = max(spacing, float(np.min(np.diff(uniq))))
    if spacing > delta / 2 + 1e-12:
        raise FieldError(
            f"theta grid too coarse for delta={delta}: u-spacing {spacing:.3g} > delta/2"
        )
    inside = np.sum(u_grid ** 2, axis=1) < c * c
    if not np.any(inside):
        return 0.0
    pts = u_grid[inside]
    logz = fev.values[inside] - fev.h_star
    p = pts.shape[1]
    if p == 1:
        order = np.argsort(pts[:, 0])
        x = pts[order, 0]
        v = logz[order]
        best = 0.0
        j0 = 0
        for i in range(x.shape[0]):
            while x[i] - x[j0] > delta:
                j0 += 1
            seg = v[j0 : i + 1]
            best = max(best, float(seg.max() - seg.min()))
        return best
    # small-p fallback: restrict pair search to a delta-window in the first axis
    order = np.lexsort(pts.T[::-1])
    pts = pts[order]
    logz = logz[order]
    best = 0.0
    j0 = 0
    for i in range(pts.shape[0]):
        while pts[i, 0] - pts[j0, 0] > delta:
            j0 += 1
        d = pts[j0 : i + 1] - pts[i]
        ok = np.sum(d * d, axis=1) <= delta * delta
        if np.any(ok):
            diffs = np.abs(logz[j0 : i + 1][ok] - logz[i])
            best = max(best, float(diffs.max()))
    return best


# ---------------------------------------------------------------------------
# CSV dumps
# ---------------------------------------------------------------------------


def field_to_csv(fev: FieldEval, path_or_buf, comment: str = "") -> None:
    close = False
    if isinstance(path_or_buf, (str, bytes)):
        buf = open(path_or_buf, "w")
        close = True
    else:
        buf = path_or_buf
    try:
        buf.write(f"# field p={fev.dim} {comment}".rstrip() + "\n")
        buf.write(",".join(f"theta_{k+1}" for k in range(fev.dim)) + ",H\n")
        for row, val in zip(fev.theta_grid, fev.values):
            buf.write(",".join(repr(float(x)) for x in row) + "," + repr(float(val)) + "\n")
    finally:
        if close:
            buf.close()


def laq_to_csv(decomp: LAQDecomp, u_grid, path_or_buf, comment: str = "") -> None:
    close = False
    if isinstance(path_or_buf, (str, bytes)):
        buf = open(path_or_buf, "w")
        close = True
    else:
        buf = path_or_buf
    try:
        p = decomp.delta.shape[0]
        buf.write(f"# laq p={p} {comment}".rstrip() + "\n")
        buf.write(",".join(f"u_{k+1}" for k in range(p)) + ",logZ,delta_term,gamma_term,remainder\n")
        for u in np.asarray(u_grid, dtype=float).reshape(-1, p):
            lz = log_z(decomp.field, u)
            dterm = float(decomp.delta @ u)
            gterm = float(-0.5 * u @ decomp.gamma_limit @ u)
            buf.write(
                ",".join(repr(float(x)) for x in u)
                + f",{lz!r},{dterm!r},{gterm!r},{lz - dterm - gterm!r}\n"
            )
    finally:
        if close:
            buf.close()
