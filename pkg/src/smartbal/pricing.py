"""Imbalance price function.

Three components per ISP: a base price read off the marginal aFRR price curve
at the ISP's mean demand, an incentivising clamp toward the intraday index,
and a linear scarcity surcharge above a fraction of the dimensioned FRR
volume.  The shipped curve is a synthetic default; real studies should
configure their own.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_CURVE = ((-3000.0, -90.0), (0.0, 40.0), (3000.0, 650.0))


@dataclass(frozen=True)
class PriceCurve:
    """Piecewise-linear, nondecreasing map from demand [MW] to price [EUR/MWh]."""

    demand: np.ndarray
    price: np.ndarray

    def __post_init__(self):
        if self.demand.size == 0:
            raise ValueError("price curve needs at least one knot")
        if self.demand.shape != self.price.shape:
            raise ValueError("knot arrays differ in length")
        if np.any(np.diff(self.demand) <= 0):
            raise ValueError("curve knots must be strictly increasing in demand")
        if np.any(np.diff(self.price) < 0):
            raise ValueError("marginal price curve must be nondecreasing")

    @classmethod
    def from_knots(cls, knots) -> "PriceCurve":
        arr = np.asarray(knots, dtype=float)
        if arr.size == 0:
            raise ValueError("price curve needs at least one knot")
        arr = arr.reshape(-1, 2)
        return cls(arr[:, 0].copy(), arr[:, 1].copy())

    def __call__(self, demand):
        return marginal_price(demand, self)


def marginal_price(demand, curve: PriceCurve):
    """Linear interpolation between knots, clamped at the end values."""
    out = np.interp(demand, curve.demand, curve.price)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class PriceModel:
    marginal_curve: PriceCurve = PriceCurve.from_knots(DEFAULT_CURVE)
    intraday_index: float = -10.0     # EUR/MWh, per disturbance dataset
    dimensioned_volume: float = 1870.0
    scarcity_threshold_frac: float = 0.8
    scarcity_surcharge: float = 0.5   # EUR/MWh per MW above the threshold

    def __post_init__(self):
        if self.dimensioned_volume <= 0:
            raise ValueError("dimensioned_volume must be positive")

    @property
    def scarcity_threshold(self) -> float:
        return self.scarcity_threshold_frac * self.dimensioned_volume

    @classmethod
    def from_dict(cls, d: dict) -> "PriceModel":
        d = dict(d)
        if "curve" in d:
            d["marginal_curve"] = PriceCurve.from_knots(d.pop("curve"))
        if "dimensioned_volume_mw" in d:
            d["dimensioned_volume"] = d.pop("dimensioned_volume_mw")
        return cls(**d)

    def isp_price(self, mean_demand):
        """Imbalance price for ISPs with the given mean demand (vectorized)."""
        e = np.asarray(mean_demand, dtype=float)
        base = np.interp(e, self.marginal_curve.demand, self.marginal_curve.price)
        price = np.where(e > 0, np.maximum(base, self.intraday_index),
                         np.where(e < 0, np.minimum(base, self.intraday_index), base))
        excess = np.abs(e) - self.scarcity_threshold
        price = price + np.where(excess > 0, np.sign(e) * self.scarcity_surcharge * excess, 0.0)
        return float(price) if price.ndim == 0 else price


def imbalance_price_series(x, model: PriceModel, isp_len: int) -> np.ndarray:
    """Per-element imbalance price of the ISP each element belongs to.

    ``x`` may be a single demand vector or a stack of them (last axis is time).
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if n % isp_len:
        raise ValueError(f"horizon of {n} steps is not a whole number of {isp_len}-step ISPs")
    means = x.reshape(*x.shape[:-1], n // isp_len, isp_len).mean(axis=-1)
    return np.repeat(model.isp_price(means), isp_len, axis=-1)
