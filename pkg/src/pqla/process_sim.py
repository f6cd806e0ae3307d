"""Simulation of the driving noise and the two reference models.

The module provides exact samplers for the building blocks (Wiener increments,
a fast-mixing Ornstein-Uhlenbeck component ``U``, a slowly-mixing stationary
Gaussian environment ``L``) and Euler-Maruyama integrators, on an internally
refined grid, for

* an ergodic stochastic regression model whose drift couples the slow and the
  fast component, observed continuously (in practice: on a dense grid), and
* a volatility model observed discretely whose diffusion coefficient lives in
  a random environment drawn before the state evolves.

All samplers are pure functions of ``(spec, grid, seed)``: identical inputs
give bit-identical paths, and independent sub-seeds are derived per component
so that parallel callers never share generator state.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.signal import lfilter

from ._seeds import substream

__all__ = [
    "SimulationError",
    "ExplosionError",
    "TimeGrid",
    "SamplePath",
    "ThetaBox",
    "OUSpec",
    "SlowMixSpec",
    "ErgodicModelSpec",
    "VolEnvModelSpec",
    "RegressionSimulation",
    "VolEnvSimulation",
    "gen_wiener",
    "sim_ou",
    "sim_slow_gaussian",
    "sim_regression",
    "sim_vol_env",
    "mixing_alpha_bound",
    "reference_ergodic_model",
    "reference_vol_env_model",
    "refinement_study",
]


class SimulationError(RuntimeError):
    """Simulation produced an invalid state (non-finite values, bad spec)."""


class ExplosionError(SimulationError):
    """The state process exceeded the explosion guard within the horizon.

    The conditionally linear drift of the volatility-in-environment model can
    blow up inside [0, T] for extreme environments; such replications are
    reported through this error, never silently dropped.
    """

    def __init__(self, message, first_bad_index=None, seed=None):
        super().__init__(message)
        self.first_bad_index = first_bad_index
        self.seed = seed


# ---------------------------------------------------------------------------
# grids and paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    """Uniform observation grid 0 = t_0 < t_1 < ... < t_n = T with h = T/n."""

    T: float
    n_steps: int
    t0: float = 0.0

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ValueError(f"horizon T must be positive and finite, got {self.T}")
        if self.n_steps < 2:
            raise ValueError(f"n_steps must be >= 2, got {self.n_steps}")
        if self.t0 != 0.0:
            raise ValueError("grids start at t0 = 0")

    @property
    def h(self) -> float:
        return self.T / self.n_steps

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def refined(self, refine: int) -> "TimeGrid":
        if refine < 1:
            raise ValueError("refinement factor must be >= 1")
        return TimeGrid(T=self.T, n_steps=self.n_steps * refine)


@dataclass
class SamplePath:
    """Values of one process aligned on a grid, plus the seed that made them.

    ``values`` holds levels at the n+1 grid times, or, when ``increments`` is
    true, the n per-step increments (left-endpoint time stamps).
    """

    grid: TimeGrid
    values: np.ndarray
    seed: int
    label: str = "path"
    increments: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = self.grid.n_steps if self.increments else self.grid.n_steps + 1
        if self.values.shape[0] != expected:
            raise ValueError(
                f"path '{self.label}': expected {expected} rows, got {self.values.shape[0]}"
            )
        if not np.all(np.isfinite(self.values)):
            bad = int(np.flatnonzero(~np.isfinite(self.values).reshape(self.values.shape[0], -1).all(axis=1))[0])
            raise SimulationError(f"path '{self.label}': non-finite value at index {bad}")

    @property
    def dim(self) -> int:
        return 1 if self.values.ndim == 1 else self.values.shape[1]

    def component_labels(self) -> list[str]:
        if self.values.ndim == 1:
            return [self.label]
        return [f"{self.label}_{k}" for k in range(self.values.shape[1])]

    def to_csv(self, path_or_buf, model_name: str = "") -> None:
        """Write ``t,<labels>`` rows preceded by one metadata comment line.

        Floats are serialized with shortest round-trip decimals, so reading
        the file back reproduces the array bit for bit.
        """
        close = False
        if isinstance(path_or_buf, (str, bytes)):
            buf = open(path_or_buf, "w")
            close = True
        else:
            buf = path_or_buf
        try:
            buf.write(
                f"# seed={self.seed} model={model_name or self.label} "
                f"T={self.grid.T!r} n={self.grid.n_steps}\n"
            )
            buf.write("t," + ",".join(self.component_labels()) + "\n")
            times = self.grid.times()
            if self.increments:
                times = times[:-1]
            vals = self.values.reshape(self.values.shape[0], -1)
            for t, row in zip(times, vals):
                buf.write(repr(float(t)) + "," + ",".join(repr(float(v)) for v in row) + "\n")
        finally:
            if close:
                buf.close()

    @classmethod
    def from_csv(cls, path_or_buf) -> "SamplePath":
        close = False
        if isinstance(path_or_buf, (str, bytes)):
            buf = open(path_or_buf, "r")
            close = True
        else:
            buf = path_or_buf
        try:
            meta_line = buf.readline().strip()
            if not meta_line.startswith("#"):
                raise ValueError("missing metadata comment line")
            meta = dict(kv.split("=", 1) for kv in meta_line[1:].split())
            header = buf.readline().strip().split(",")
            rows = [line.strip().split(",") for line in buf if line.strip()]
        finally:
            if close:
                buf.close()
        data = np.array([[float(v) for v in row] for row in rows])
        grid = TimeGrid(T=float(meta["T"]), n_steps=int(meta["n"]))
        values = data[:, 1:]
        increments = values.shape[0] == grid.n_steps
        if values.shape[1] == 1:
            values = values[:, 0]
        labels = header[1:]
        label = labels[0].rsplit("_", 1)[0] if len(labels) > 1 else labels[0]
        return cls(
            grid=grid,
            values=values,
            seed=int(meta["seed"]),
            label=label,
            increments=increments,
        )


@dataclass(frozen=True)
class ThetaBox:
    """Axis-aligned bounded parameter box with an interior margin.

    The closure of the box is the optimization domain of the QMLE; the
    interior margin only classifies estimates as interior vs boundary hits.
    """

    lower: np.ndarray
    upper: np.ndarray
    interior_margin: float = 1e-9

    def __post_init__(self):
        object.__setattr__(self, "lower", np.atleast_1d(np.asarray(self.lower, dtype=float)))
        object.__setattr__(self, "upper", np.atleast_1d(np.asarray(self.upper, dtype=float)))
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValueError("lower/upper must be 1-D arrays of equal length")
        if not np.all(self.lower < self.upper):
            raise ValueError("need lower < upper coordinatewise")
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise ValueError("box must be bounded")
        if self.interior_margin <= 0:
            raise ValueError("interior margin must be positive")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def contains(self, theta, closed: bool = True) -> bool:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if closed:
            return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))
        return bool(np.all(theta > self.lower) and np.all(theta < self.upper))

    def clip(self, theta) -> np.ndarray:
        return np.clip(np.atleast_1d(np.asarray(theta, dtype=float)), self.lower, self.upper)

    def on_boundary(self, theta) -> bool:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        return bool(
            np.any(theta - self.lower <= self.interior_margin)
            or np.any(self.upper - theta <= self.interior_margin)
        )

    def axis_grids(self, points_per_axis: int) -> list[np.ndarray]:
        return [np.linspace(lo, hi, points_per_axis) for lo, hi in zip(self.lower, self.upper)]

    def grid(self, points_per_axis: int) -> np.ndarray:
        """Tensor grid as an (N, p) array in ascending lexicographic order."""
        axes = self.axis_grids(points_per_axis)
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))


# ---------------------------------------------------------------------------
# component specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OUSpec:
    """Ornstein-Uhlenbeck component dU = -kappa U dt + s dW, stationary start."""

    kappa: float = 1.0
    s: float = math.sqrt(2.0)

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError(f"mean-reversion rate must be positive, got {self.kappa}")
        if self.s <= 0:
            raise ValueError(f"diffusion scale must be positive, got {self.s}")

    @property
    def stationary_var(self) -> float:
        return self.s ** 2 / (2.0 * self.kappa)

    def autocovariance(self, lag) -> np.ndarray:
        return self.stationary_var * np.exp(-self.kappa * np.abs(np.asarray(lag, dtype=float)))


@dataclass(frozen=True)
class SlowMixSpec:
    """Stationary Gaussian environment with covariance (1 + |h|)^(-a).

    The covariance is convex and decreasing on h >= 0 with c(0) = 1, hence
    positive definite by Polya's criterion; the same shape guarantees an
    (essentially) nonnegative circulant embedding.  The exponent ``a``
    controls the polynomial mixing rate of the component.
    """

    a: float = 1.5
    clip_tol: float = 1e-8

    def __post_init__(self):
        if self.a <= 0:
            raise ValueError(f"mixing exponent must be positive, got {self.a}")

    def covariance(self, lag) -> np.ndarray:
        return (1.0 + np.abs(np.asarray(lag, dtype=float))) ** (-self.a)


# ---------------------------------------------------------------------------
# elementary samplers
# ---------------------------------------------------------------------------


def gen_wiener(grid: TimeGrid, dim: int = 1, seed: int = 0) -> SamplePath:
    """n_steps independent N(0, h I_dim) increments on the grid.

    Returns an increments path (values shape (n,) for dim=1, else (n, dim));
    cumulative levels follow by prefix summation.
    """
    if dim < 1:
        raise ValueError(f"dimension must be >= 1, got {dim}")
    rng = substream(seed, "wiener")
    shape = (grid.n_steps,) if dim == 1 else (grid.n_steps, dim)
    incr = rng.standard_normal(shape) * math.sqrt(grid.h)
    return SamplePath(grid=grid, values=incr, seed=seed, label="dW", increments=True)


def _ou_exact(spec: OUSpec, n_steps: int, h: float, rng, u0: Optional[float]) -> np.ndarray:
    """Exact Gaussian transition sampling of the OU process on a uniform grid."""
    phi = math.exp(-spec.kappa * h)
    step_sd = math.sqrt(spec.stationary_var * (1.0 - phi * phi))
    z = rng.standard_normal(n_steps + 1)
    x = np.empty(n_steps + 1)
    x[0] = math.sqrt(spec.stationary_var) * z[0] if u0 is None else float(u0)
    x[1:] = step_sd * z[1:]
    # AR(1) recursion u_i = phi u_{i-1} + innovation, run in C by lfilter
    return lfilter([1.0], [1.0, -phi], x)


def sim_ou(spec: OUSpec, grid: TimeGrid, seed: int = 0, u0: Optional[float] = None) -> SamplePath:
    """Stationary OU path via the exact discrete transition.

    U_{t+h} = e^{-kappa h} U_t + N(0, s^2 (1 - e^{-2 kappa h}) / (2 kappa)),
    started from N(0, s^2/(2 kappa)) unless ``u0`` pins the initial value.
    """
    rng = substream(seed, "ou")
    values = _ou_exact(spec, grid.n_steps, grid.h, rng, u0)
    return SamplePath(grid=grid, values=values, seed=seed, label="U")


@lru_cache(maxsize=32)
def _embedding_sqrt_eigs(a: float, dt: float, n_points: int, embed_factor: int, clip_tol: float):
    """sqrt(lambda/m) for the circulant embedding of (1+|h|)^(-a) on n_points.

    Returns (sqrt_eigs, m, clip_mass).  Negative eigenvalue mass above
    ``clip_tol`` (relative to total) raises, advising a larger embedding.
    """
    m = 1 << max(1, int(math.ceil(math.log2(max(2, embed_factor * n_points)))))
    k = np.arange(m)
    lag = np.minimum(k, m - k) * dt
    row = (1.0 + lag) ** (-a)
    lam = np.fft.rfft(row).real  # row is even around m/2, spectrum is real
    lam = np.concatenate([lam, lam[-2:0:-1]]) if m % 2 == 0 else np.concatenate([lam, lam[-1:0:-1]])
    neg_mass = float(-np.minimum(lam, 0.0).sum())
    total = float(np.abs(lam).sum())
    if neg_mass > clip_tol * total:
        raise SimulationError(
            f"circulant embedding has negative eigenvalue mass {neg_mass/total:.3e} "
            f"(tolerance {clip_tol:.1e}); increase the embedding factor"
        )
    lam = np.clip(lam, 0.0, None)
    return np.sqrt(lam / m), m, neg_mass / total


def implied_embedding_covariance(spec: SlowMixSpec, grid: TimeGrid, n_lags: int,
                                 embed_factor: int = 2) -> np.ndarray:
    """Covariance actually realized by the sampler at the first grid lags.

    Computed exactly from the clipped eigenvalues; equals the target
    covariance up to the clipping tolerance.
    """
    sqrt_eigs, m, _ = _embedding_sqrt_eigs(
        spec.a, grid.h, grid.n_steps + 1, embed_factor, spec.clip_tol
    )
    lam = (sqrt_eigs ** 2) * m
    cov = np.fft.ifft(lam).real
    return cov[: n_lags + 1]


def sim_slow_gaussian(spec: SlowMixSpec, grid: TimeGrid, seed: int = 0,
                      embed_factor: int = 2) -> SamplePath:
    """Sample the slow stationary Gaussian environment by circulant embedding.

    The covariance row is wrapped onto a circulant of FFT-friendly size m,
    its spectrum clipped at zero (mass recorded in ``meta['eig_clip_mass']``),
    and one complex white-noise FFT yields the path; the real part restricted
    to the first n+1 coordinates has exactly the embedded covariance.
    """
    rng = substream(seed, "slow")
    n_points = grid.n_steps + 1
    sqrt_eigs, m, clip_mass = _embedding_sqrt_eigs(
        spec.a, grid.h, n_points, embed_factor, spec.clip_tol
    )
    eps = rng.standard_normal(m) + 1j * rng.standard_normal(m)
    values = np.fft.fft(sqrt_eigs * eps)[:n_points].real
    return SamplePath(
        grid=grid, values=values, seed=seed, label="L",
        meta={"eig_clip_mass": clip_mass, "embedding_size": m},
    )


def mixing_alpha_bound(spec, h) -> np.ndarray:
    """Analytic upper bound for the alpha-mixing coefficient at lag h.

    For the OU component the maximal correlation across a gap h is
    e^{-kappa h}, which dominates the alpha coefficient; for the slow
    Gaussian environment the bound is the (Kolmogorov-Rozanov style) maximal
    correlation surrogate given by the normalized covariance (1+h)^(-a).
    Both are capped at the trivial bound 1/2.
    """
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValueError("lag must be nonnegative")
    if isinstance(spec, OUSpec):
        raw = np.exp(-spec.kappa * h)
    elif isinstance(spec, SlowMixSpec):
        raw = spec.covariance(h)
    else:
        raise TypeError("spec must be OUSpec or SlowMixSpec")
    return np.minimum(0.5, raw)


# ---------------------------------------------------------------------------
# model specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ErgodicModelSpec:
    """Stochastic regression model dY = b0(L) b1(U, theta*) dt + sigma0(L) sigma1(U) dW.

    Coefficient callables are vectorized over their state argument; ``db1``
    returns the theta-gradient of b1 with shape (p,) + u.shape.  Models linear
    in theta may declare ``b1_basis`` (callables g_k with b1 = sum theta_k g_k),
    which unlocks closed-form sufficient statistics for the likelihood field.
    """

    b0: Callable
    b1: Callable
    sigma0: Callable
    sigma1: Callable
    db1: Callable
    theta_star: np.ndarray
    box: ThetaBox
    ou: OUSpec = OUSpec()
    slow: SlowMixSpec = SlowMixSpec()
    d2b1: Optional[Callable] = None
    b1_basis: Optional[tuple] = None
    envelope: Optional[Callable] = None
    y0: float = 0.0
    name: str = "ergodic_regression"

    def __post_init__(self):
        object.__setattr__(
            self, "theta_star", np.atleast_1d(np.asarray(self.theta_star, dtype=float))
        )
        if self.theta_star.shape[0] != self.box.dim:
            raise ValueError("theta_star dimension does not match the box")
        if not self.box.contains(self.theta_star, closed=False):
            raise ValueError("theta_star must lie in the interior of the box")
        probe = np.linspace(-5.0, 5.0, 41)
        diff = np.outer(self.sigma0(probe), self.sigma1(probe))
        if np.min(diff) <= 0 or not np.all(np.isfinite(diff)):
            raise ValueError("sigma0 * sigma1 must be strictly positive (probed on [-5,5]^2)")

    @property
    def dim_theta(self) -> int:
        return self.box.dim

    def stationary_marginal_sds(self) -> tuple[float, float]:
        """(sd of L_0, sd of U_0) under the stationary law."""
        return 1.0, math.sqrt(self.ou.stationary_var)

    def drift(self, l_values, u_values, theta) -> np.ndarray:
        return self.b0(l_values) * self.b1(u_values, theta)

    def diffusion(self, l_values, u_values) -> np.ndarray:
        return self.sigma0(l_values) * self.sigma1(u_values)


@dataclass(frozen=True)
class VolEnvModelSpec:
    """Discretely observed volatility model in a random environment.

    Environment first: ``env_sampler(rng, times)`` draws gamma (for the
    reference model, a Brownian path B on the fine grid).  Then, conditionally
    on gamma, dX = drift_factor(gamma)_t X dt + d(wtilde) and
    dY = b dt + sigma(gamma, X, theta*) dw.  ``s_func`` is S = sigma sigma',
    with theta-derivatives for the observed-information computations.
    """

    sigma: Callable            # sigma(gamma, x, theta)
    s_func: Callable           # S(gamma, x, theta) = sigma^2
    ds_dtheta: Callable
    d2s_dtheta2: Callable
    env_sampler: Callable      # (rng, times) -> gamma
    drift_factor: Callable     # (gamma, times) -> per-time linear drift coefficient
    theta_star: float
    box: ThetaBox
    drift_b: Optional[Callable] = None  # unobserved drift of Y; None means zero
    explosion_guard: float = 1e6
    x0: float = 0.0
    name: str = "vol_in_environment"

    def __post_init__(self):
        if self.box.dim != 1:
            raise ValueError("scalar-parameter volatility model expected")
        if not self.box.contains(np.atleast_1d(self.theta_star), closed=False):
            raise ValueError("theta_star must lie in the interior of the box")
        if self.explosion_guard <= 0:
            raise ValueError("explosion guard must be positive")
        # the box closure must stay away from singular S
        probe_x = np.linspace(-3.0, 3.0, 13)
        for theta in (self.box.lower[0], self.box.upper[0]):
            s = self.s_func(None, probe_x, theta)
            if np.min(s) <= 0 or not np.all(np.isfinite(s)):
                raise ValueError("det S must be positive on the closed box")


# ---------------------------------------------------------------------------
# reference models
# ---------------------------------------------------------------------------


def reference_ergodic_model(p: int = 1, a: float = 1.5, kappa: float = 1.0,
                            s: float = math.sqrt(2.0), theta_star=None) -> ErgodicModelSpec:
    """Reference instantiation of the ergodic regression model.

    p=1: b0(l) = 1 + l^2, b1(u, th) = th * tanh(u), sigma0 = sigma1 = 1 on
    Theta = [-2, 2] with theta* = 1.  p=2 adds an intercept,
    b1(u, th) = th_1 tanh(u) + th_2 on [-2, 2]^2.  The drift is linear in
    theta with positive-definite curvature, so identifiability holds with a
    quadratic limit criterion and the maximizer has a closed form.
    """
    if p not in (1, 2):
        raise ValueError("reference model is implemented for p in {1, 2}")
    b0 = lambda l: 1.0 + l ** 2
    sigma0 = lambda l: np.ones_like(np.asarray(l, dtype=float))
    sigma1 = lambda u: np.ones_like(np.asarray(u, dtype=float))
    if p == 1:
        theta_star = np.array([1.0]) if theta_star is None else np.atleast_1d(theta_star)
        box = ThetaBox(lower=[-2.0], upper=[2.0])
        basis = (lambda u: np.tanh(u),)
    else:
        theta_star = np.array([1.0, 0.5]) if theta_star is None else np.atleast_1d(theta_star)
        box = ThetaBox(lower=[-2.0, -2.0], upper=[2.0, 2.0])
        basis = (lambda u: np.tanh(u), lambda u: np.ones_like(np.asarray(u, dtype=float)))

    def b1(u, theta):
        theta = np.atleast_1d(theta)
        return sum(theta[k] * basis[k](u) for k in range(len(basis)))

    def db1(u, theta):
        return np.stack([g(u) for g in basis])

    def d2b1(u, theta):
        u = np.asarray(u, dtype=float)
        return np.zeros((len(basis), len(basis)) + u.shape)

    def envelope(l, u):
        # dominates sup over the closed box of all theta-derivative stacks of
        # the normalized coefficient pair (drift/S, drift cross terms / S)
        return 12.0 * (1.0 + np.asarray(l) ** 2) ** 2 * np.abs(np.tanh(u))

    return ErgodicModelSpec(
        b0=b0, b1=b1, sigma0=sigma0, sigma1=sigma1, db1=db1, d2b1=d2b1,
        b1_basis=basis, envelope=envelope, theta_star=theta_star, box=box,
        ou=OUSpec(kappa=kappa, s=s), slow=SlowMixSpec(a=a),
        name=f"ergodic_ref_p{p}",
    )


def reference_vol_env_model(theta_star: float = 1.0, guard: float = 1e6) -> VolEnvModelSpec:
    """Volatility model with environment drift e^{B^4} X and sigma = theta sqrt(1+x^2).

    The diffusion coefficient is not integrable over environments, which is
    the point of the example: the estimator theory holds conditionally on the
    environment, while a fraction of environments genuinely explode.
    """

    def env_sampler(rng, times):
        dt = np.diff(times)
        b = np.concatenate([[0.0], np.cumsum(rng.standard_normal(dt.shape[0]) * np.sqrt(dt))])
        return b

    def drift_factor(gamma, times):
        return np.exp(np.minimum(np.asarray(gamma) ** 4, 700.0))

    sigma = lambda gamma, x, theta: theta * np.sqrt(1.0 + np.asarray(x) ** 2)
    s_func = lambda gamma, x, theta: theta ** 2 * (1.0 + np.asarray(x) ** 2)
    ds = lambda gamma, x, theta: 2.0 * theta * (1.0 + np.asarray(x) ** 2)
    d2s = lambda gamma, x, theta: 2.0 * (1.0 + np.asarray(x) ** 2)

    return VolEnvModelSpec(
        sigma=sigma, s_func=s_func, ds_dtheta=ds, d2s_dtheta2=d2s,
        env_sampler=env_sampler, drift_factor=drift_factor,
        theta_star=theta_star, box=ThetaBox(lower=[0.2], upper=[5.0]),
        explosion_guard=guard, name="vol_env_ref",
    )


# ---------------------------------------------------------------------------
# model simulation
# ---------------------------------------------------------------------------


@dataclass
class RegressionSimulation:
    """Observation-grid paths of the ergodic regression model."""

    l_path: SamplePath
    u_path: SamplePath
    y_path: SamplePath
    wiener_path: SamplePath
    model_name: str
    seed: int
    refine: int

    @property
    def grid(self) -> TimeGrid:
        return self.y_path.grid


def _euler_regression(model: ErgodicModelSpec, l_fine, u_fine, dw_fine, h_fine,
                      theta=None) -> np.ndarray:
    theta = model.theta_star if theta is None else theta
    drift = model.drift(l_fine[:-1], u_fine[:-1], theta)
    diff = model.diffusion(l_fine[:-1], u_fine[:-1])
    dy = drift * h_fine + diff * dw_fine
    y = np.empty(dy.shape[0] + 1)
    y[0] = model.y0
    np.cumsum(dy, out=y[1:])
    y[1:] += model.y0
    return y


def sim_regression(model: ErgodicModelSpec, grid: TimeGrid, seed: int = 0,
                   refine: int = 10, env_seed: Optional[int] = None) -> RegressionSimulation:
    """Simulate (L, U, Y) on the observation grid.

    L and U are sampled exactly on an internal grid ``refine`` times finer;
    Y is integrated by Euler-Maruyama there and subsampled.  The refinement
    separates the integrator's discretization bias from the statistical error
    of downstream estimators.  Sub-seeds for L, U and W are derived
    independently from ``seed``; ``env_seed`` overrides the seed of the slow
    environment alone, which is how conditioning on the environment is
    realized operationally.
    """
    if refine < 1:
        raise ValueError("refinement factor must be >= 1")
    fine = grid.refined(refine)
    l_fine = sim_slow_gaussian(model.slow, fine, seed=seed if env_seed is None else env_seed).values
    u_fine = sim_ou(model.ou, fine, seed=seed).values
    dw_fine = gen_wiener(fine, dim=1, seed=seed).values
    y_fine = _euler_regression(model, l_fine, u_fine, dw_fine, fine.h)
    if not np.all(np.isfinite(y_fine)):
        bad = int(np.flatnonzero(~np.isfinite(y_fine))[0])
        raise SimulationError(f"non-finite state during integration at fine index {bad}")
    w_fine = np.concatenate([[0.0], np.cumsum(dw_fine)])
    sub = slice(None, None, refine)
    return RegressionSimulation(
        l_path=SamplePath(grid=grid, values=l_fine[sub], seed=seed, label="L"),
        u_path=SamplePath(grid=grid, values=u_fine[sub], seed=seed, label="U"),
        y_path=SamplePath(grid=grid, values=y_fine[sub], seed=seed, label="Y"),
        wiener_path=SamplePath(grid=grid, values=w_fine[sub], seed=seed, label="W"),
        model_name=model.name, seed=seed, refine=refine,
    )


def refinement_study(model: ErgodicModelSpec, grid: TimeGrid, seeds: Sequence[int],
                     refines: Sequence[int] = (2, 4, 8), reference_refine: int = 32):
    """RMS strong error of Y_T against a common fine reference, per refinement.

    The same underlying noise drives every refinement level: noise is drawn
    once on the reference grid and coarsened (subsampling L, U; block-summing
    the Wiener increments), so differences measure the scheme alone.
    """
    if any(reference_refine % r != 0 for r in refines):
        raise ValueError("each refinement must divide the reference refinement")
    errors = np.zeros((len(seeds), len(refines)))
    fine = grid.refined(reference_refine)
    for i, seed in enumerate(seeds):
        l_fine = sim_slow_gaussian(model.slow, fine, seed=seed).values
        u_fine = sim_ou(model.ou, fine, seed=seed).values
        dw_fine = gen_wiener(fine, dim=1, seed=seed).values
        y_ref = _euler_regression(model, l_fine, u_fine, dw_fine, fine.h)[-1]
        for j, r in enumerate(refines):
            step = reference_refine // r
            l = l_fine[::step]
            u = u_fine[::step]
            dw = np.add.reduceat(dw_fine, np.arange(0, dw_fine.shape[0], step))
            y = _euler_regression(model, l, u, dw, grid.T / (grid.n_steps * r))[-1]
            errors[i, j] = y - y_ref
    return refines, np.sqrt(np.mean(errors ** 2, axis=0))


@dataclass
class VolEnvSimulation:
    """Environment draw plus observation-grid (X, Y) of the volatility model."""

    gamma: np.ndarray          # environment path on the fine grid
    x_path: SamplePath
    y_path: SamplePath
    model_name: str
    seed: int
    refine: int
    max_abs_x: float

    @property
    def grid(self) -> TimeGrid:
        return self.y_path.grid


def sim_vol_env(model: VolEnvModelSpec, grid: TimeGrid, seed: int = 0,
                refine: int = 10, env_seed: Optional[int] = None) -> VolEnvSimulation:
    """Draw the environment, then (X, Y) conditionally on it.

    X solves the conditionally linear recursion in closed form via
    log-integrating factors, which stays finite-exact until the explosion
    guard region.  Tripping the guard raises ExplosionError with the first
    offending fine-grid index.  ``env_seed`` overrides the environment
    sub-seed (operational conditioning on the environment sigma-field).
    """
    if refine < 1:
        raise ValueError("refinement factor must be >= 1")
    fine = grid.refined(refine)
    times = fine.times()
    hf = fine.h
    gamma = model.env_sampler(substream(seed if env_seed is None else env_seed, "env"), times)
    factor = model.drift_factor(gamma, times)
    dwt = substream(seed, "state").standard_normal(fine.n_steps) * math.sqrt(hf)
    dw = substream(seed, "obs").standard_normal(fine.n_steps) * math.sqrt(hf)

    # Euler step X_{i+1} = (1 + f_i h) X_i + dwt_i, solved by products:
    # X_i = P_i (x0 + sum_{j<i} dwt_j / P_{j+1}), log P_i = sum_{j<i} log1p(f_j h)
    logp = np.concatenate([[0.0], np.cumsum(np.log1p(factor[:-1] * hf))])
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        growth = np.exp(logp)
        x = growth * (model.x0 + np.concatenate([[0.0], np.cumsum(dwt * np.exp(-logp[1:]))]))
    bad = ~np.isfinite(x) | (np.abs(x) > model.explosion_guard)
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise ExplosionError(
            f"|X| exceeded the explosion guard {model.explosion_guard:g} at fine index {idx}",
            first_bad_index=idx, seed=seed,
        )
    sig = model.sigma(gamma, x[:-1], model.theta_star)
    dy = sig * dw
    if model.drift_b is not None:
        dy = dy + model.drift_b(gamma, x[:-1], times[:-1]) * hf
    y = np.concatenate([[0.0], np.cumsum(dy)])
    sub = slice(None, None, refine)
    return VolEnvSimulation(
        gamma=gamma,
        x_path=SamplePath(grid=grid, values=x[sub], seed=seed, label="X"),
        y_path=SamplePath(grid=grid, values=y[sub], seed=seed, label="Y"),
        model_name=model.name, seed=seed, refine=refine,
        max_abs_x=float(np.max(np.abs(x))),
    )
