"""Multivariate normal machinery used by the agents' demand estimator.

Covers the exponential-decay prior, blending with the previous estimate,
conditioning on exactly known elements, sampling of box-truncated normals and
the diagonal approximations of the truncated standard deviations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import ndtr

MAX_SIGMAS = 12.0
JITTERS = (0.0, 1e-8, 1e-6)


class ConditioningError(np.linalg.LinAlgError):
    """A covariance block stayed singular after the jitter retries."""


class InfeasibleBoxError(ValueError):
    """The truncation box has no probability mass within numeric reach."""


@dataclass(frozen=True)
class GaussianBelief:
    """Normal distribution; leading axes of ``mean``/``cov`` index a batch."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        n = self.mean.shape[-1] if self.mean.ndim else 0
        if self.cov.shape != self.mean.shape + (n,):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean shape {self.mean.shape}")

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diagonal(self.cov, axis1=-2, axis2=-1), 0.0, None))


@dataclass(frozen=True)
class TruncationBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        if self.lower.shape != self.upper.shape:
            raise ValueError("lower and upper must have the same shape")
        if np.any(self.lower > self.upper):
            raise ValueError("box lower bound exceeds upper bound")

    @classmethod
    def unbounded(cls, n: int) -> "TruncationBox":
        return cls(np.full(n, -np.inf), np.full(n, np.inf))


def prior_cov(theta_sigma2: float, theta_d: float, n: int) -> np.ndarray:
    """``theta_sigma2 * exp(-theta_d * |i - j| / n)``."""
    if theta_sigma2 <= 0 or theta_d <= 0:
        raise ValueError("theta_sigma2 and theta_d must be positive")
    lag = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    return theta_sigma2 * np.exp(-theta_d * lag / n)


def blend(mu, cov, x_prev, theta_w) -> GaussianBelief:
    """Pull the mean toward the previous estimate and shrink the covariance.

    ``theta_w`` may be an array matching the batch axes of ``x_prev``.
    """
    w = np.asarray(theta_w, dtype=float)
    if np.any((w < 0.0) | (w > 1.0)):
        raise ValueError(f"theta_w must lie in [0, 1], got {theta_w}")
    mu = np.asarray(mu, dtype=float)
    x_prev = np.asarray(x_prev, dtype=float)
    if mu.shape[-1:] != x_prev.shape[-1:]:
        raise ValueError("mu and x_prev must have the same length")
    mean = (1.0 - w[..., None]) * mu + w[..., None] * x_prev
    return GaussianBelief(mean, (1.0 - w[..., None, None] ** 2) * np.asarray(cov, dtype=float))


def _default_scale(mat: np.ndarray) -> float:
    scale = float(np.trace(mat)) / mat.shape[0]
    return scale if scale > 0 else 1.0


def cholesky(mat: np.ndarray, scale=None) -> np.ndarray:
    """Lower Cholesky factor, retrying with diagonal jitter relative to ``scale``.

    Stacks of matrices are factorized together; a failing member falls back to
    its own jitter retries.
    """
    mat = np.asarray(mat, dtype=float)
    n = mat.shape[-1]
    if n == 0:
        return np.zeros(mat.shape)
    if mat.ndim > 2:
        try:
            return np.linalg.cholesky(mat)
        except np.linalg.LinAlgError:
            flat = mat.reshape(-1, n, n)
            scales = np.broadcast_to(np.asarray(np.nan if scale is None else scale, dtype=float),
                                     mat.shape[:-2]).reshape(-1)
            out = [cholesky(m, None if np.isnan(s) else float(s)) for m, s in zip(flat, scales)]
            return np.stack(out).reshape(mat.shape)
    if scale is None or scale <= 0:
        scale = _default_scale(mat)
    for jitter in JITTERS:
        try:
            if jitter:
                return np.linalg.cholesky(mat + jitter * scale * np.eye(n))
            return np.linalg.cholesky(mat)
        except np.linalg.LinAlgError:
            continue
    raise ConditioningError(f"covariance block of size {n} is singular beyond jitter")


def _take(a: np.ndarray, rows, cols) -> np.ndarray:
    return a[..., rows[:, None], cols[None, :]]


def solve_lower(L: np.ndarray, b: np.ndarray, trans: bool = False) -> np.ndarray:
    """Solve ``L x = b`` (``L^T x = b`` with ``trans``) for lower-triangular ``L``.

    Leading axes of ``L`` are batch axes; ``b`` has the batch axes followed by
    ``(m,)`` or ``(m, k)``.
    """
    L = np.asarray(L, dtype=float)
    b = np.asarray(b, dtype=float)
    if L.ndim == 2:
        return solve_triangular(L, b, lower=True, trans=1 if trans else 0, check_finite=False)
    flat_L = L.reshape(-1, *L.shape[-2:])
    flat_b = b.reshape(flat_L.shape[0], *b.shape[L.ndim - 2:])
    out = np.empty_like(flat_b)
    for i, (Li, bi) in enumerate(zip(flat_L, flat_b)):
        out[i] = solve_triangular(Li, bi, lower=True, trans=1 if trans else 0, check_finite=False)
    return out.reshape(b.shape)


def condition_factor(mean, cov, exact_idx, exact_vals, rest_order=None,
                     jitter_scale=None, chol=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Condition on exact elements and return the conditional Cholesky factor.

    The covariance is factorized once in the order ``[exact_idx, rest_order]``
    (ascending remainder by default); the trailing block of that factor is the
    factor of the conditional covariance and the off-diagonal block gives the
    gain.  ``chol`` may supply that factor precomputed (``cov`` is then not
    used).  Returns ``(rest_order, conditional mean, conditional factor)``.
    """
    mu = np.asarray(mean, dtype=float)
    n = mu.shape[-1]
    exact_idx = np.asarray(exact_idx, dtype=int)
    exact_vals = np.asarray(exact_vals, dtype=float)
    if rest_order is None:
        rest_order = np.setdiff1d(np.arange(n), exact_idx)
    rest_order = np.asarray(rest_order, dtype=int)
    perm = np.concatenate([exact_idx, rest_order])
    if perm.size != n or np.unique(perm).size != n:
        raise ValueError("exact and remaining indices must partition the horizon")
    if chol is None:
        chol = cholesky(_take(np.asarray(cov, dtype=float), perm, perm), jitter_scale)
    m = exact_idx.size
    L_RR = chol[..., m:, m:]
    mean_c = mu[..., rest_order]
    if m:
        v = solve_lower(chol[..., :m, :m], exact_vals - mu[..., exact_idx])
        mean_c = mean_c + np.einsum("...re,...e->...r", chol[..., m:, :m], v)
    return rest_order, mean_c, L_RR


def condition_exact(belief: GaussianBelief, exact_idx, exact_vals,
                    jitter_scale=None) -> tuple[GaussianBelief, np.ndarray]:
    """Condition on ``x[exact_idx] = exact_vals``.

    Returns the conditional belief over the remaining indices (ascending) and
    those indices.  Batched beliefs share the index sets.
    """
    if np.asarray(exact_idx).size == 0:
        n = belief.mean.shape[-1]
        return belief, np.arange(n)
    rest, mean_c, L = condition_factor(belief.mean, belief.cov, exact_idx, exact_vals,
                                       jitter_scale=jitter_scale)
    cov_c = L @ np.swapaxes(L, -1, -2)
    return GaussianBelief(mean_c, cov_c), rest


def sample_mvn(belief: GaussianBelief, rng: np.random.Generator,
               jitter_scale: float | None = None) -> np.ndarray:
    L = cholesky(belief.cov, jitter_scale)
    return belief.mean + L @ rng.standard_normal(len(belief.mean))


def box_distance(mean, std, lower, upper) -> np.ndarray:
    """Distance from the mean to the box in standard deviations (0 inside)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        gap = np.maximum(np.maximum(lower - mean, mean - upper), 0.0)
        return np.where(gap > 0, gap / std, 0.0)


def _check_box(mean, std, lower, upper, max_sigmas=MAX_SIGMAS):
    if np.any(lower > upper):
        raise InfeasibleBoxError("box lower bound exceeds upper bound")
    bad = np.argwhere(box_distance(mean, std, lower, upper) > max_sigmas)
    if bad.size:
        pos = tuple(bad[0])
        i = pos[-1]
        raise InfeasibleBoxError(
            f"box [{lower[i]}, {upper[i]}] on coordinate {i} lies more than "
            f"{max_sigmas:g} sigma from the mean {mean[pos]} (sigma {std[pos]})"
        )


def _feasible_start(mean, std, lower, upper):
    width = upper - lower
    inset = np.where(np.isfinite(width), 0.01 * width, 0.01 * std)
    lo = np.where(np.isfinite(lower), lower + inset, -np.inf)
    hi = np.where(np.isfinite(upper), upper - inset, np.inf)
    x0 = np.clip(mean, lo, hi)
    return np.where(lo > hi, 0.5 * (lower + upper), x0)


def sample_tmvn(belief: GaussianBelief, box: TruncationBox, rng,
                burn_in: int = 100, jitter_scale=None,
                size: int | None = None, max_sigmas: float = MAX_SIGMAS) -> np.ndarray:
    """Draw from the normal ``belief`` restricted to ``box``.

    Coordinates with a finite bound are updated by a coordinate-wise Gibbs
    sweep in whitened coordinates (``x = mean + L z``, constrained coordinates
    ordered first); the unconstrained remainder is drawn exactly given them.
    Each draw is the state after ``burn_in`` sweeps of a fresh chain.  With
    ``size`` given, returns ``size`` independent draws as rows.

    A batched belief (mean of shape ``(B, n)``) takes a sequence of ``B``
    generators, shares ``box`` and returns one draw per member as ``(B, n)``.
    """
    lower = np.asarray(box.lower, dtype=float)
    upper = np.asarray(box.upper, dtype=float)
    n = belief.mean.shape[-1]
    if lower.shape != (n,) or upper.shape != (n,):
        raise ValueError("box dimension does not match belief")
    bounded = np.isfinite(lower) | np.isfinite(upper)
    perm = np.concatenate([np.flatnonzero(bounded), np.flatnonzero(~bounded)])
    L = cholesky(_take(belief.cov, perm, perm), jitter_scale)
    draws = sample_tmvn_factor(belief.mean[..., perm], L, lower[perm], upper[perm], rng,
                               burn_in=burn_in, size=size, max_sigmas=max_sigmas)
    out = np.empty_like(draws)
    out[..., perm] = draws
    return out


def sample_tmvn_factor(mean, chol, lower, upper, rng, burn_in: int = 100,
                       size: int | None = None, max_sigmas: float = MAX_SIGMAS) -> np.ndarray:
    """``sample_tmvn`` for a covariance given by its lower Cholesky factor.

    The coordinates must already be ordered with every bounded one ahead of
    every unbounded one.
    """
    mean = np.asarray(mean, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    bounded = np.isfinite(lower) | np.isfinite(upper)
    m = int(bounded.sum())
    if np.any(bounded[m:]):
        raise ValueError("bounded coordinates must precede unbounded ones")
    batched = mean.ndim == 2
    if batched and size is not None:
        raise ValueError("size is not supported for batched beliefs")
    rngs = list(rng) if batched else [rng]
    means = mean if batched else mean[None]
    Ls = chol if batched else chol[None]
    if len(rngs) != means.shape[0]:
        raise ValueError("need one generator per batch member")
    std = np.sqrt(np.sum(Ls * Ls, axis=-1))
    _check_box(means, std, lower, upper, max_sigmas)
    k = 1 if size is None else int(size)
    n = means.shape[-1]
    out = np.empty((len(rngs), k, n))
    lo_c, hi_c = lower[:m], upper[:m]
    for row, (gen, L, mu) in enumerate(zip(rngs, Ls, means)):
        z_c = np.zeros((k, m))
        if m:
            mu_c = mu[:m]
            x0 = _feasible_start(mu_c, std[row, :m], lo_c, hi_c)
            L_cc = np.ascontiguousarray(L[:m, :m])
            z0 = solve_triangular(L_cc, x0 - mu_c, lower=True)
            x_c = np.empty((k, m))
            _gibbs_batch(L_cc, lo_c, hi_c, z0, mu_c + L_cc @ z0, gen, burn_in, z_c, x_c)
            tol = 1e-9 * (1.0 + np.abs(x_c))
            if np.any(x_c < lo_c - tol) or np.any(x_c > hi_c + tol):
                raise AssertionError("Gibbs sampler left the truncation box")
            out[row, :, :m] = np.clip(x_c, lo_c, hi_c)
        if m < n:
            z_f = gen.standard_normal((k, n - m))
            out[row, :, m:] = mu[m:] + z_c @ L[m:, :m].T + z_f @ L[m:, m:].T
    if batched:
        return out[:, 0]
    return out[0, 0] if size is None else out[0]


@numba.njit(cache=True)
def _trunc_std_normal(a, b, rng):
    """Standard normal restricted to ``[a, b]`` (either end may be infinite)."""
    if a == b:
        return a
    if b <= 0.0:
        return -_trunc_std_normal(-b, -a, rng)
    width = b - a
    if a >= 0.0:
        if width < 2.0 and a * width < 1.0:
            while True:
                z = a + width * rng.random()
                if rng.random() <= math.exp(0.5 * (a * a - z * z)):
                    return z
        lam = 0.5 * (a + math.sqrt(a * a + 4.0))
        while True:
            z = a + rng.exponential() / lam
            if z <= b and rng.random() <= math.exp(-0.5 * (z - lam) ** 2):
                return z
    # a < 0 < b
    if width < 2.0:
        while True:
            z = a + width * rng.random()
            if rng.random() <= math.exp(-0.5 * z * z):
                return z
    while True:
        z = rng.standard_normal()
        if a <= z <= b:
            return z


@numba.njit(cache=True)
def _gibbs_batch(L, lower, upper, z0, x0, rng, sweeps, z_out, x_out):
    for d in range(z_out.shape[0]):
        z = z0.copy()
        x = x0.copy()
        _gibbs_whitened(L, lower, upper, z, x, rng, sweeps)
        z_out[d] = z
        x_out[d] = x


@numba.njit(cache=True)
def _gibbs_whitened(L, lower, upper, z, x, rng, sweeps):
    m = z.shape[0]
    for _ in range(sweeps):
        for j in range(m):
            zj = z[j]
            lo = -np.inf
            hi = np.inf
            for i in range(j, m):
                lij = L[i, j]
                if lij == 0.0:
                    continue
                rest = x[i] - lij * zj
                if lij > 0.0:
                    a = (lower[i] - rest) / lij
                    b = (upper[i] - rest) / lij
                else:
                    a = (upper[i] - rest) / lij
                    b = (lower[i] - rest) / lij
                if a > lo:
                    lo = a
                if b < hi:
                    hi = b
            if lo > hi:
                continue
            znew = _trunc_std_normal(lo, hi, rng)
            step = znew - zj
            z[j] = znew
            for i in range(j, m):
                x[i] += L[i, j] * step


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _pdf(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.where(np.isfinite(x), _INV_SQRT_2PI * np.exp(-0.5 * x * x), 0.0)


def _xpdf(x: np.ndarray) -> np.ndarray:
    finite = np.isfinite(x)
    xs = np.where(finite, x, 0.0)
    return np.where(finite, xs * _pdf(xs), 0.0)


def truncated_std_interval(mean, var, lower, upper) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise standard deviation of 1-D normals truncated to ``[lower, upper]``.

    Cross-correlations are ignored.  Returns ``(sigma, degenerate)``; elements
    whose bin carries less than 1e-300 probability get ``sigma = 0`` and
    ``degenerate = True``.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.sqrt(np.clip(np.asarray(var, dtype=float), 0.0, None))
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(sd > 0, (lower - mean) / sd, np.where(lower <= mean, -np.inf, np.inf))
        b = np.where(sd > 0, (upper - mean) / sd, np.where(upper >= mean, np.inf, -np.inf))
    # evaluate the mass on the side with the smaller tail to keep precision
    right = a > 0
    mass = np.where(right, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))
    degenerate = ~(mass >= 1e-300)
    safe = np.where(degenerate, 1.0, mass)
    pa, pb = _pdf(a), _pdf(b)
    ratio = 1.0 + (_xpdf(a) - _xpdf(b)) / safe - ((pb - pa) / safe) ** 2
    sigma = sd * np.sqrt(np.clip(ratio, 0.0, 1.0))
    return np.where(degenerate, 0.0, sigma), degenerate


def residual_std_future(S_FF, S_FI, S_II, sigma_I, jitter_scale=None) -> tuple[np.ndarray, int]:
    """Standard deviations of the future block given truncated interval elements.

    ``V = S_FF - S_FI (S_II^-1 - S_II^-1 diag(sigma_I) S_II^-1) S_IF`` with only
    the diagonal evaluated.  Negative diagonal entries are clamped to zero;
    their count is returned alongside.  Leading axes are batch axes.
    """
    S_FF = np.asarray(S_FF, dtype=float)
    if S_FF.ndim < 2:
        S_FF = np.atleast_2d(S_FF)
    var_F = np.diagonal(S_FF, axis1=-2, axis2=-1).copy()
    sigma_I = np.asarray(sigma_I, dtype=float)
    if sigma_I.ndim == 0:
        sigma_I = sigma_I[None]
    if sigma_I.shape[-1]:
        S_FI = np.asarray(S_FI, dtype=float).reshape(var_F.shape + sigma_I.shape[-1:])
        S_II = np.asarray(S_II, dtype=float).reshape(sigma_I.shape[:-1] + 2 * sigma_I.shape[-1:])
        L = cholesky(S_II, jitter_scale)
        S_IF = np.swapaxes(S_FI, -1, -2)
        half = np.linalg.solve(L, S_IF)                          # L^-1 S_IF
        W = np.linalg.solve(np.swapaxes(L, -1, -2), half)        # S_II^-1 S_IF
        var_F -= np.sum(half * half, axis=-2)
        var_F += np.einsum("...i,...if->...f", sigma_I, W * W)
    negative = int(np.count_nonzero(var_F < 0))
    return np.sqrt(np.clip(var_F, 0.0, None)), negative


def residual_std_future_factor(chol, n_interval: int, sigma_I) -> tuple[np.ndarray, int]:
    """``residual_std_future`` for a covariance given by its Cholesky factor.

    ``chol`` factors the covariance ordered as ``[interval, future]`` with
    ``n_interval`` leading interval elements.
    """
    m = n_interval
    L_II = chol[..., :m, :m]
    L_FI = chol[..., m:, :m]
    L_FF = chol[..., m:, m:]
    # diag(S_FF - S_FI S_II^-1 S_IF) is the row energy of L_FF
    var_F = np.sum(L_FF * L_FF, axis=-1)
    if m:
        W = solve_lower(L_II, np.swapaxes(L_FI, -1, -2), trans=True)   # S_II^-1 S_IF
        var_F = var_F + np.einsum("...i,...if->...f", np.asarray(sigma_I, dtype=float), W * W)
    negative = int(np.count_nonzero(var_F < 0))
    return np.sqrt(np.clip(var_F, 0.0, None)), negative
