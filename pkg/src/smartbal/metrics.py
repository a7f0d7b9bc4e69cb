"""Evaluation of runs: per-BRP behaviour and run-level KPIs against a reference."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .pricing import PriceCurve, marginal_price

ENERGY_FLOOR_MWH = 5.0
RISK_BANDS = (0.8, 1.25)
RISK_CLASSES = ("risk_averse", "self_aware", "risk_affine")

KPI_NAMES = (
    "e_frr_pos", "e_frr_neg", "afrr_cost",
    "df_mean", "df_max", "df_min", "df_std_15min", "df_std_1min",
)
# below these magnitudes a reference value makes its relative change outlier-prone
KPI_FLOORS = {
    "e_frr_pos": 1.0, "e_frr_neg": 1.0, "afrr_cost": 100.0,
    "df_mean": 1e-4, "df_max": 1e-4, "df_min": 1e-4, "df_std_15min": 1e-4, "df_std_1min": 1e-4,
}


def isp_energy(demand, isp_index: int, isp_len: int = 15, t_nrt: float = 60.0) -> float:
    """Energy [MWh] of one ISP from per-minute demand values [MW]."""
    demand = np.asarray(demand, dtype=float)
    start = isp_index * isp_len
    if isp_index < 0 or start + isp_len > len(demand):
        raise ValueError(f"ISP {isp_index} is not fully covered by {len(demand)} values")
    return float(demand[start:start + isp_len].sum() * t_nrt / 3600.0)


def isp_energies(samples, step_s: float, isp_s: float = 900.0) -> np.ndarray:
    """Energies [MWh] of consecutive ISPs from samples of power [MW]; time on the last axis."""
    samples = np.asarray(samples, dtype=float)
    per = int(round(isp_s / step_s))
    n_isp = samples.shape[-1] // per
    blocks = samples[..., : n_isp * per].reshape(*samples.shape[:-1], n_isp, per)
    return blocks.sum(axis=-1) * step_s / 3600.0


def estimation_metrics(estimated, lower, upper, realized, floor: float = ENERGY_FLOOR_MWH,
                       pooled: bool = False) -> tuple[float, float]:
    """``(e_rmse, e_half)`` of one BRP's ISP-energy estimates over its decision steps.

    Each step's error and half width are normalized by ``max(|E|, floor)`` of
    that step.  ``pooled`` instead divides the RMS error and the mean half
    width by one common ``max(RMS(E), floor)``.
    """
    est = np.asarray(estimated, dtype=float)
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    real = np.asarray(realized, dtype=float)
    if est.size == 0:
        raise ValueError("need at least one decision step")
    if pooled:
        denom = max(math.sqrt(float(np.mean(real ** 2))), floor)
        return (math.sqrt(float(np.mean((est - real) ** 2))) / denom,
                float(np.mean(0.5 * (hi - lo))) / denom)
    denom = np.maximum(np.abs(real), floor)
    e_rmse = math.sqrt(float(np.mean(((est - real) / denom) ** 2)))
    e_half = float(np.mean(0.5 * (hi - lo) / denom))
    return e_rmse, e_half


def risk_class(e_rmse: float, e_half: float) -> str:
    """Classify by the ratio ``e_rmse / e_half``."""
    if e_half <= 0:
        return "self_aware" if e_rmse <= 0 else "risk_affine"
    ratio = e_rmse / e_half
    if ratio < RISK_BANDS[0]:
        return "risk_averse"
    if ratio <= RISK_BANDS[1]:
        return "self_aware"
    return "risk_affine"


def smart_metrics(y, demand, plan_trace, dt: float, isp_s: float = 900.0) -> tuple[float, Optional[float]]:
    """``(tau_active, e_eff)`` of one BRP.

    ``y`` is the BRP's delivered power and ``demand`` the realized FRR demand,
    both at ``dt``; ``plan_trace`` holds the committed plan value at every
    decision step.  Delivered energy of an ISP is supportive when its sign
    matches the sign of the ISP's demand with the BRP's own contribution added
    back (injection into a short system).  ``e_eff`` is ``None`` when nothing
    was delivered.
    """
    plan_trace = np.asarray(plan_trace)
    tau = float(np.count_nonzero(plan_trace)) / plan_trace.size if plan_trace.size else 0.0
    e_own = isp_energies(y, dt, isp_s)
    e_res = isp_energies(np.asarray(demand, dtype=float) + np.asarray(y, dtype=float), dt, isp_s)
    total = float(np.abs(e_own).sum())
    if total == 0.0:
        return tau, None
    supportive = float(np.abs(e_own[e_own * e_res > 0]).sum())
    return tau, supportive / total


def _window_std(x: np.ndarray, per: int) -> float:
    n_win = len(x) // per
    if n_win == 0:
        return 0.0
    return float(x[: n_win * per].reshape(n_win, per).std(axis=1).mean())


def frequency_kpis(freq_dev, dt: float, isp_s: float = 900.0, t_nrt: float = 60.0) -> dict:
    """Mean, extrema and mean within-window standard deviations of ``freq_dev``."""
    df = np.asarray(freq_dev, dtype=float)
    if df.size == 0:
        raise ValueError("empty frequency trajectory")
    return {
        "df_mean": float(df.mean()),
        "df_max": float(df.max()),
        "df_min": float(df.min()),
        "df_std_15min": _window_std(df, int(round(isp_s / dt))),
        "df_std_1min": _window_std(df, int(round(t_nrt / dt))),
    }


def frr_kpis(p_afrr, dt: float, curve: PriceCurve) -> dict:
    """Activated aFRR energies [MWh] by direction and activation cost [EUR]."""
    p = np.asarray(p_afrr, dtype=float)
    hours = dt / 3600.0
    return {
        "e_frr_pos": float(np.maximum(p, 0.0).sum() * hours),
        "e_frr_neg": float(np.maximum(-p, 0.0).sum() * hours),
        "afrr_cost": float((p * marginal_price(p, curve)).sum() * hours),
    }


@dataclass(frozen=True)
class RelativeChange:
    value: Optional[float]
    outlier_prone: bool = False


def relative_change(value: float, reference: float, floor: float = 0.0) -> RelativeChange:
    """``(value - reference) / |reference|``; absent for a zero reference."""
    if not math.isfinite(reference):
        raise ValueError("reference must be finite")
    if reference == 0.0:
        return RelativeChange(None, True)
    return RelativeChange((value - reference) / abs(reference), abs(reference) < floor)


@dataclass(frozen=True)
class BrpMetrics:
    e_rmse: float
    e_half: float
    tau_active: float
    e_eff: Optional[float]
    risk_class: str


@dataclass
class RunKpis:
    absolute: dict
    reference: dict
    relative: dict = field(default_factory=dict)
    outlier_prone: tuple = ()

    @classmethod
    def compare(cls, absolute: dict, reference: dict) -> "RunKpis":
        relative, flagged = {}, []
        for name in KPI_NAMES:
            rc = relative_change(absolute[name], reference[name], KPI_FLOORS[name])
            relative[name] = rc.value
            if rc.outlier_prone:
                flagged.append(name)
        return cls(dict(absolute), dict(reference), relative, tuple(flagged))

    def record(self) -> dict:
        """Flat mapping ``name``, ``name_ref``, ``name_rel`` for every KPI."""
        out = {}
        for name in KPI_NAMES:
            out[name] = self.absolute[name]
            out[f"{name}_ref"] = self.reference[name]
            out[f"{name}_rel"] = self.relative.get(name)
        return out


def run_kpis(freq_dev, p_afrr, dt: float, curve: PriceCurve, isp_s: float = 900.0) -> dict:
    return {**frr_kpis(p_afrr, dt, curve), **frequency_kpis(freq_dev, dt, isp_s)}


@dataclass(frozen=True)
class BoxStats:
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: tuple
    count: int


def boxplot(values) -> BoxStats:
    """Quartiles (linear interpolation) with 1.5 IQR whiskers."""
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        raise ValueError("boxplot needs at least one value")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    outliers = tuple(sorted(float(x) for x in v[(v < lo_fence) | (v > hi_fence)]))
    return BoxStats(float(med), float(q1), float(q3), float(inside.min()), float(inside.max()),
                    outliers, int(v.size))
