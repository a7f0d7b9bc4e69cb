"""Smart-balancing agent (one BRP).

At every NRT step an agent samples an estimate of the minute-resolution FRR
demand over the whole horizon, derives a robustness band from an approximate
standard deviation, and picks one of five plan adjustments only if it is
profitable across the whole band.

Vectors are indexed by minute ``0 .. n-1``; minute ``k`` covers
``[k*T_NRT, (k+1)*T_NRT)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .gauss import (
    MAX_SIGMAS,
    box_distance,
    cholesky,
    condition_factor,
    prior_cov,
    residual_std_future_factor,
    sample_tmvn_factor,
    truncated_std_interval,
)
from .nrt import NrtBulletin
from .pricing import PriceModel, imbalance_price_series

J_VALUES = (-2, -1, 0, 1, 2)


@dataclass(frozen=True)
class AgentParams:
    theta_G: float        # MW
    theta_T: float        # min
    theta_sigma2: float   # MW^2
    theta_d: float
    theta_w: float
    theta_z: float
    theta_c: float = 0.0  # EUR/MWh

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class DemandEstimate:
    """Estimates of one or more agents; the leading axis indexes agents."""

    x_hat: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    sigma_hat: np.ndarray


@dataclass
class AgentState:
    """Mutable state of a group of agents that decide at the same instants.

    Array fields carry a leading agent axis; each agent keeps its own
    generator.  ``x_prev`` is ``None`` until the first estimate.
    """

    params: tuple[AgentParams, ...]
    n: int
    rngs: list
    h: np.ndarray
    prior: np.ndarray
    conv: np.ndarray
    prior_chol: np.ndarray
    u: np.ndarray
    x_prev: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=lambda: {
        "degenerate_bins": 0, "clamped_variances": 0, "far_boxes": 0})

    @classmethod
    def create(cls, params, n: int, rngs, t_nrt: float = 60.0) -> "AgentState":
        """State for one agent (``AgentParams`` + generator) or for sequences of them."""
        if isinstance(params, AgentParams):
            params, rngs = [params], [rngs]
        params = tuple(params)
        rngs = list(rngs)
        if len(params) != len(rngs):
            raise ValueError("need one generator per agent")
        h = np.array([impulse_response(p.theta_G, p.theta_T, n, t_nrt) for p in params]).reshape(-1, n)
        prior = np.array([prior_cov(p.theta_sigma2, p.theta_d, n) for p in params]).reshape(-1, n, n)
        conv = np.array([convolution_matrix(row) for row in h]).reshape(-1, n, n)
        sigma2 = np.array([p.theta_sigma2 for p in params])
        chol = cholesky(prior, sigma2) if n else prior.copy()
        return cls(params, n, rngs, h, prior, conv, chol, np.zeros((len(params), n)))

    def __len__(self) -> int:
        return len(self.params)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(p, name) for p in self.params], dtype=float)

    @property
    def y(self) -> np.ndarray:
        """Planned delivered power ``h * u`` per agent."""
        return np.einsum("akm,am->ak", self.conv, self.u)


def impulse_response(theta_G: float, theta_T: float, n: int, t_nrt: float = 60.0) -> np.ndarray:
    """Kernel ``h`` whose step response is ``theta_G * (1 - exp(-k t_nrt / theta_T))``.

    ``theta_T`` is in minutes, ``t_nrt`` in seconds; ``h[0] = 0``.
    """
    if theta_T <= 0:
        raise ValueError("theta_T must be positive")
    step = theta_G * -np.expm1(-np.arange(n) * t_nrt / (60.0 * theta_T))
    return np.diff(step, prepend=0.0)


def activated_power(u, h) -> np.ndarray:
    """``h * u`` truncated to the length of ``u``."""
    u = np.asarray(u, dtype=float)
    return np.convolve(u, h)[: len(u)]


def convolution_matrix(h) -> np.ndarray:
    """Lower-triangular Toeplitz ``T`` with ``T @ u == activated_power(u, h)``."""
    h = np.asarray(h, dtype=float)
    n = len(h)
    idx = np.subtract.outer(np.arange(n), np.arange(n))
    return np.where(idx >= 0, h[np.clip(idx, 0, max(n - 1, 0))], 0.0)


def _extents(k: int, n: int, isp_len: int) -> np.ndarray:
    """Mask ``(5, n)`` of the indices each adjustment overrides."""
    end_current = min(n, (k // isp_len + 1) * isp_len)
    end_next = min(n, end_current + isp_len)
    mask = np.zeros((5, n), dtype=bool)
    for row, j in enumerate(J_VALUES):
        if j:
            mask[row, k:(end_current if abs(j) == 1 else end_next)] = True
    return mask


def adjustments(u, k: int, isp_len: int) -> np.ndarray:
    """Plan deltas for ``j = -2 .. 2`` as rows of a ``(5, n)`` array.

    ``u + delta_j`` equals ``sign(j)`` from step ``k`` to the end of the
    current ISP (``|j| = 1``) or of the next ISP (``|j| = 2``); outside that
    extent the previous plan is kept, and ``delta_0`` is all zeros.  A stack
    of plans ``(A, n)`` gives ``(A, 5, n)``.
    """
    u = np.asarray(u, dtype=float)
    n = u.shape[-1]
    if not 0 <= k < n:
        raise ValueError(f"step {k} outside horizon of {n}")
    signs = np.sign(np.asarray(J_VALUES, dtype=float))[:, None]
    return np.where(_extents(k, n, isp_len), signs - u[..., None, :], 0.0)


def revenue(x, u, delta, h, price: PriceModel, isp_len: int, theta_c: float = 0.0,
            t_nrt: float = 60.0, start: int = 0) -> float:
    """Imbalance-settlement revenue [EUR] of the plan ``u + delta`` if demand were ``x``.

    The price argument replaces the agent's own contribution already embedded
    in ``x`` (``h*u``) by the candidate one; injection lowers demand.  Only
    elements from ``start`` on are settled.
    """
    u = np.asarray(u, dtype=float)
    h = np.asarray(h, dtype=float)[: len(u)]
    conv = convolution_matrix(np.pad(h, (0, len(u) - len(h))))
    return float(_revenues(np.asarray(x, dtype=float)[None], u,
                           np.asarray(delta, dtype=float)[None], conv,
                           price, isp_len, theta_c, t_nrt, start)[0, 0])


def _revenues(X, u, deltas, conv, price, isp_len, theta_c, t_nrt, start):
    """Revenues ``(..., len(X), len(deltas))``; leading axes (agents) broadcast."""
    hours = t_nrt / 3600.0
    stacked = np.concatenate([u[..., None, :], u[..., None, :] + deltas], axis=-2)
    Y_all = stacked @ np.swapaxes(conv, -1, -2)
    y_old, Y = Y_all[..., :1, :], Y_all[..., 1:, :]
    args = X[..., :, None, :] + (y_old - Y)[..., None, :, :]
    prices = imbalance_price_series(args, price, isp_len)
    Ys = Y[..., start:]
    rev = hours * np.einsum("...jn,...xjn->...xj", Ys, prices[..., start:])
    cost = hours * np.asarray(theta_c, dtype=float)[..., None] * np.abs(Ys).sum(axis=-1)
    return rev - cost[..., None, :]


def estimate(state: AgentState, lookahead, bulletin: NrtBulletin, update: bool = True,
             max_sigmas: float = np.inf) -> DemandEstimate:
    """Sample every agent's demand estimate over the horizon and its robustness band.

    The prior centred on ``lookahead`` (shared by all agents) is blended with
    the previous estimate, conditioned on the exactly published minutes and
    sampled truncated to the published intervals.  Bins farther than
    ``max_sigmas`` from the conditional mean raise ``InfeasibleBoxError``;
    those beyond the usual 12 sigma are counted in ``diagnostics`` either way.
    With ``update`` the estimates become the agents' previous estimates.
    """
    n = state.n
    mu = np.asarray(lookahead, dtype=float)
    if mu.shape != (n,):
        raise ValueError(f"lookahead must have length {n}")
    sigma2 = state.column("theta_sigma2")
    w = state.column("theta_w")
    if np.any((w < 0.0) | (w > 1.0)):
        raise ValueError("theta_w must lie in [0, 1]")
    x_prev = state.x_prev
    if x_prev is None:
        z = np.array([g.standard_normal(n) for g in state.rngs]).reshape(-1, n)
        x_prev = mu + np.einsum("aij,aj->ai", state.prior_chol, z)

    # blended belief: mean (1-w) l + w x_prev, covariance (1 - w^2) prior
    mean_w = (1.0 - w[:, None]) * mu + w[:, None] * x_prev
    scale = np.sqrt(1.0 - w ** 2)[:, None, None]
    exact, interval, future = bulletin.ranges()
    order = np.concatenate([interval, future])
    perm = np.concatenate([exact, order])
    if np.array_equal(perm, np.arange(n)):
        chol = scale * state.prior_chol
    else:
        chol = cholesky(scale ** 2 * state.prior[:, perm[:, None], perm], sigma2)
    _, mean_c, L = condition_factor(mean_w, None, exact, bulletin.upper[exact], order, chol=chol)

    A = len(state)
    x_hat = np.empty((A, n))
    sigma = np.zeros((A, n))
    x_hat[:, exact] = bulletin.upper[exact]
    if order.size:
        m = interval.size
        lo, hi = bulletin.lower[order], bulletin.upper[order]
        std = np.sqrt(np.sum(L * L, axis=-1))
        state.diagnostics["far_boxes"] += int(np.count_nonzero(
            box_distance(mean_c[:, :m], std[:, :m], lo[:m], hi[:m]) > MAX_SIGMAS))
        x_hat[:, order] = sample_tmvn_factor(mean_c, L, lo, hi, state.rngs, max_sigmas=max_sigmas)
        sig_i, degenerate = truncated_std_interval(mean_c[:, :m], std[:, :m] ** 2, lo[:m], hi[:m])
        sig_f, clamped = residual_std_future_factor(L, m, sig_i)
        sigma[:, interval] = sig_i
        sigma[:, future] = sig_f
        state.diagnostics["degenerate_bins"] += int(degenerate.sum())
        state.diagnostics["clamped_variances"] += clamped

    if update:
        state.x_prev = x_hat
    band = state.column("theta_z")[:, None] * sigma
    return DemandEstimate(x_hat, x_hat - band, x_hat + band, sigma)


def choose(revenues: np.ndarray) -> int:
    """Index into ``J_VALUES`` of the robust revenue maximizer (2, i.e. j = 0, if none).

    ``revenues`` has rows (estimate, upper, lower).  Ties go to the smaller
    ``|j|``, then to positive ``j``.
    """
    robust = np.all(revenues > 0, axis=0)
    if not robust.any():
        return J_VALUES.index(0)
    candidates = [r for r in range(len(J_VALUES)) if robust[r]]
    return min(candidates, key=lambda r: (-revenues[0, r], abs(J_VALUES[r]), -J_VALUES[r]))


def decide(est: DemandEstimate, state: AgentState, price: PriceModel, k: int, isp_len: int,
           t_nrt: float = 60.0, window: str = "current_isp") -> tuple[np.ndarray, np.ndarray]:
    """Pick ``j*`` per agent; returns them with the updated plans (``state`` is untouched)."""
    if window == "current_isp":
        start = (k // isp_len) * isp_len
    elif window == "full":
        start = 0
    else:
        raise ValueError(f"unknown revenue window {window!r}")
    deltas = adjustments(state.u, k, isp_len)
    X = np.stack([est.x_hat, est.upper, est.lower], axis=1)
    rev = _revenues(X, state.u, deltas, state.conv, price, isp_len,
                    state.column("theta_c"), t_nrt, start)
    chosen = np.array([choose(r) for r in rev], dtype=int)
    plans = state.u + deltas[np.arange(len(state)), chosen]
    return np.asarray(J_VALUES)[chosen], plans
