"""Domain types and deterministic operations of the quantile panel model.

The latent quantile surface follows the simultaneous recursion

    (I - diag(rho) W) Q_t = (diag(gamma) + diag(delta) W) Q_{t-1}
                            + [X beta]_t + Lambda (s o f_t),      Q_0 = 0,

so one forward pass of blockwise solves evaluates it exactly.  Everything in
this module is pure and safe to share across threads.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse.linalg as spla

from .errors import DataError, UnbalancedPanel
from .spatial import BlockSolver, SpatialWeights

__all__ = [
    "PanelData",
    "QuantileParams",
    "LatentState",
    "AldConstants",
    "StationarityReport",
    "build_spatial_operators",
    "check_stationarity",
    "quantile_recursion",
    "quantile_loss",
    "check_loss",
    "load_panel_csv",
    "save_panel_csv",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PanelData:
    """Observed responses y (N x T) and covariates x (N x T x (p+1)).

    The first covariate slice is the constant regressor; it absorbs the
    quantile of the idiosyncratic error.  Designs built from a full dummy set
    (no explicit intercept) set ``has_intercept=False``; the dummy columns
    then span the constant instead.
    """

    y: np.ndarray
    x: np.ndarray
    has_intercept: bool = True

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        x = np.asarray(self.x, dtype=np.float64)
        if y.ndim != 2:
            raise DataError("y must be an N x T matrix")
        if x.ndim != 3 or x.shape[:2] != y.shape:
            raise DataError("x must be an N x T x (p+1) tensor aligned with y")
        if y.shape[0] < 1 or y.shape[1] < 2:
            raise DataError("need N >= 1 and T >= 2")
        if not (np.isfinite(y).all() and np.isfinite(x).all()):
            raise DataError("panel contains missing or non-finite entries")
        if self.has_intercept and not np.all(x[:, :, 0] == 1.0):
            raise DataError("first covariate slice must be constant one")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x", _frozen(x))

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    @property
    def n_periods(self) -> int:
        return self.y.shape[1]

    @property
    def n_covariates(self) -> int:
        """Number of covariate columns including the constant (p+1)."""
        return self.x.shape[2]


@dataclass(frozen=True)
class AldConstants:
    """Scale-mixture constants of the asymmetric Laplace at level tau."""

    tau: float
    xi1: float
    xi2: float

    @classmethod
    def for_tau(cls, tau: float) -> "AldConstants":
        if not 0.0 < tau < 1.0:
            raise ValueError("tau must lie strictly inside (0, 1)")
        tq = tau * (1.0 - tau)
        return cls(tau=tau, xi1=(1.0 - 2.0 * tau) / tq, xi2=float(np.sqrt(2.0 / tq)))


@dataclass
class QuantileParams:
    """Full parameter state for one quantile level.

    ``loadings`` keeps its top r_max x r_max block lower triangular with a
    positive diagonal (the rotation-fixing restriction); ``switches`` marks
    which factor columns enter the model.
    """

    tau: float
    rho: np.ndarray          # (N,) contemporaneous spatial
    delta: np.ndarray        # (N,) spatial lag
    gamma: np.ndarray        # (N,) own lag
    beta: np.ndarray         # (N, p+1) regression coefficients
    loadings: np.ndarray     # (N, r_max)
    factors: np.ndarray      # (T, r_max)
    phi: np.ndarray          # (r_max,) factor AR(1) coefficients
    switches: np.ndarray     # (r_max,) 0/1
    sigma: float             # ALD scale
    sigma_q2: float          # randomization variance

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=np.float64)
        self.delta = np.asarray(self.delta, dtype=np.float64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.loadings = np.asarray(self.loadings, dtype=np.float64)
        self.factors = np.asarray(self.factors, dtype=np.float64)
        self.phi = np.asarray(self.phi, dtype=np.float64)
        self.switches = np.asarray(self.switches, dtype=np.int64)

    @property
    def n_units(self) -> int:
        return self.rho.shape[0]

    @property
    def r_max(self) -> int:
        return self.loadings.shape[1]

    @property
    def ald(self) -> AldConstants:
        return AldConstants.for_tau(self.tau)

    def active_factors(self) -> np.ndarray:
        return np.nonzero(self.switches == 1)[0]

    def masked_loadings(self) -> np.ndarray:
        """Loadings with inactive columns zeroed (the s o f contraction)."""
        return self.loadings * self.switches[None, :]

    def validate_identification(self) -> None:
        n, r = self.loadings.shape
        top = min(n, r)
        for i in range(top):
            if np.any(self.loadings[i, i + 1:] != 0.0):
                raise ValueError(f"loadings row {i} must vanish above the diagonal")
            if self.loadings[i, i] <= 0.0:
                raise ValueError(f"loading diagonal {i} must be positive")
        if np.any(np.abs(self.phi) >= 1.0):
            raise ValueError("factor AR coefficients must satisfy |phi| < 1")

    def copy(self) -> "QuantileParams":
        return QuantileParams(
            tau=self.tau, rho=self.rho.copy(), delta=self.delta.copy(),
            gamma=self.gamma.copy(), beta=self.beta.copy(),
            loadings=self.loadings.copy(), factors=self.factors.copy(),
            phi=self.phi.copy(), switches=self.switches.copy(),
            sigma=self.sigma, sigma_q2=self.sigma_q2,
        )


@dataclass
class LatentState:
    """Latent quantile surface Q and ALD mixture auxiliaries V, both N x T."""

    q: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.q.shape != self.v.shape or self.q.ndim != 2:
            raise ValueError("q and v must be matching N x T matrices")
        if np.any(self.v <= 0.0):
            raise ValueError("mixture auxiliaries must be strictly positive")

    def copy(self) -> "LatentState":
        return LatentState(q=self.q.copy(), v=self.v.copy())


@dataclass(frozen=True)
class StationarityReport:
    spectral_radius: float
    stationary: bool
    converged: bool
    iterations: int
    method: str = "power"

    def as_dict(self) -> dict:
        return {
            "spectral_radius": self.spectral_radius,
            "stationary": self.stationary,
            "converged": self.converged,
            "iterations": self.iterations,
            "method": self.method,
        }


class CompanionOperator:
    """Applies A = (I - diag(rho) W)^{-1} (diag(gamma) + diag(delta) W) via solves."""

    def __init__(self, solver: BlockSolver, delta: np.ndarray, gamma: np.ndarray,
                 w_sparse):
        self._solver = solver
        self._delta = np.asarray(delta, dtype=np.float64)
        self._gamma = np.asarray(gamma, dtype=np.float64)
        self._w = w_sparse

    def apply(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c, dtype=np.float64)
        wc = self._w @ c
        if c.ndim == 1:
            rhs = self._gamma * c + self._delta * wc
        else:
            rhs = self._gamma[:, None] * c + self._delta[:, None] * wc
        return self._solver.solve(rhs)


def build_spatial_operators(rho: np.ndarray, delta: np.ndarray, gamma: np.ndarray,
                            w: SpatialWeights) -> tuple[BlockSolver, CompanionOperator]:
    """Solver for (I - diag(rho) W) z = c and applicator for the companion map.

    Both work through per-block sparse LU; no dense N x N inverse is formed.
    """
    rho = np.asarray(rho, dtype=np.float64)
    for name, vec in (("rho", rho), ("delta", delta), ("gamma", gamma)):
        if np.asarray(vec).shape != (w.n,):
            raise ValueError(f"{name} must have length N = {w.n}")
    solver = BlockSolver(w, rho)
    return solver, CompanionOperator(solver, delta, gamma, w.to_sparse())


def check_stationarity(rho: np.ndarray, delta: np.ndarray, gamma: np.ndarray,
                       w: SpatialWeights, tol: float = 1e-8,
                       max_iter: int = 1000) -> StationarityReport:
    """Spectral radius of the companion operator by matrix-free power iteration.

    Complex dominant pairs make the plain iteration oscillate; in that case an
    Arnoldi rescue (still matrix-free) recovers the radius, and only if that
    also fails is the report flagged non-converged.
    """
    _, a_op = build_spatial_operators(rho, delta, gamma, w)
    n = w.n
    rng = np.random.default_rng(0)  # fixed probe; the estimate is deterministic
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    estimate = 0.0
    history: list[float] = []
    for it in range(1, max_iter + 1):
        av = a_op.apply(v)
        norm = float(np.linalg.norm(av))
        if norm == 0.0:
            return StationarityReport(0.0, True, True, it)
        estimate = norm
        history.append(norm)
        v = av / norm
        if len(history) >= 3 and all(
            abs(history[-1] - h) <= tol * max(1.0, history[-1]) for h in history[-3:-1]
        ):
            return StationarityReport(estimate, estimate < 1.0, True, it)

    # oscillation: try a small Arnoldi solve on the same operator
    if n > 2:
        try:
            lin = spla.LinearOperator((n, n), matvec=a_op.apply)
            vals = spla.eigs(lin, k=1, which="LM", return_eigenvectors=False,
                             maxiter=5000, tol=tol)
            radius = float(np.abs(vals[0]))
            return StationarityReport(radius, radius < 1.0, True, max_iter, method="arnoldi")
        except Exception:
            pass
    else:
        # tiny systems: materialize A by applying it to the identity
        a = a_op.apply(np.eye(n))
        radius = float(np.max(np.abs(np.linalg.eigvals(a))))
        return StationarityReport(radius, radius < 1.0, True, max_iter, method="dense")
    return StationarityReport(estimate, estimate < 1.0, False, max_iter)


def quantile_recursion(params: QuantileParams, data: PanelData, w: SpatialWeights,
                       warn_nonstationary: bool = False) -> np.ndarray:
    """Deterministic quantile surface Q (N x T) from the forward recursion."""
    n, t_len = data.y.shape
    solver = BlockSolver(w, params.rho)
    w_sparse = w.to_sparse()
    xb = np.einsum("itk,ik->it", data.x, params.beta)
    common = xb + params.masked_loadings() @ params.factors.T
    if warn_nonstationary:
        report = check_stationarity(params.rho, params.delta, params.gamma, w)
        if not report.stationary:
            warnings.warn(
                f"quantile recursion with spectral radius {report.spectral_radius:.4f} >= 1",
                stacklevel=2,
            )
    q = np.zeros((n, t_len))
    prev = np.zeros(n)
    for t in range(t_len):
        rhs = params.gamma * prev + params.delta * (w_sparse @ prev) + common[:, t]
        prev = solver.solve(rhs)
        q[:, t] = prev
    return q


def check_loss(u: np.ndarray, tau: float) -> np.ndarray:
    """Quantile check loss q_tau(u) = u (tau - 1{u <= 0}), elementwise."""
    u = np.asarray(u, dtype=np.float64)
    return u * (tau - (u <= 0.0))


def quantile_loss(data: PanelData, params: QuantileParams, w: SpatialWeights) -> float:
    """Mean check loss of the data against the deterministic quantile surface."""
    q = quantile_recursion(params, data, w)
    return float(np.mean(check_loss(data.y - q, params.tau)))


def save_panel_csv(data: PanelData, path: str | Path) -> None:
    """Long-format CSV: unit_id, time_id, y, x1..xp (constant slice implied)."""
    n, t_len, p1 = data.x.shape
    units = np.repeat(np.arange(n), t_len)
    times = np.tile(np.arange(t_len), n)
    frame = {"unit_id": units, "time_id": times, "y": data.y.reshape(-1)}
    for k in range(1, p1):
        frame[f"x{k}"] = data.x[:, :, k].reshape(-1)
    pd.DataFrame(frame).to_csv(path, index=False, float_format="%.17g")


def load_panel_csv(path: str | Path) -> PanelData:
    """Read the long-format schema back into a balanced PanelData.

    Validates rectangularity: every unit must appear at every period.
    """
    frame = pd.read_csv(path)
    required = {"unit_id", "time_id", "y"}
    if not required.issubset(frame.columns):
        raise DataError(f"panel CSV must contain columns {sorted(required)}")
    x_cols = sorted((c for c in frame.columns if c.startswith("x") and c[1:].isdigit()),
                    key=lambda c: int(c[1:]))
    units = np.sort(frame["unit_id"].unique())
    times = np.sort(frame["time_id"].unique())
    pivot = frame.set_index(["unit_id", "time_id"])
    expected = pd.MultiIndex.from_product([units, times])
    missing = expected.difference(pivot.index)
    if len(missing) > 0:
        raise UnbalancedPanel(
            f"panel is missing {len(missing)} unit/time cells",
            missing=[tuple(m) for m in missing[:50]],
        )
    if pivot.index.has_duplicates:
        raise DataError("panel contains duplicated unit/time cells")
    pivot = pivot.reindex(expected)
    n, t_len = len(units), len(times)
    y = pivot["y"].to_numpy().reshape(n, t_len)
    x = np.ones((n, t_len, 1 + len(x_cols)))
    for k, col in enumerate(x_cols, start=1):
        x[:, :, k] = pivot[col].to_numpy().reshape(n, t_len)
    return PanelData(y=y, x=x)
