"""Disturbance ingestion and synthesis, config files and result export."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

import jsonschema
import numpy as np
import yaml

MAX_GAP_S = 300.0
FLOAT_FMT = "{:.9g}"


@dataclass(frozen=True)
class DisturbanceSeries:
    samples: np.ndarray          # MW at dt, demand convention (> 0: system short)
    id: str
    dt: float = 1.0
    intraday_index: Optional[float] = None  # EUR/MWh; None: price model default

    def __post_init__(self):
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"disturbance {self.id!r} contains non-finite samples")

    @property
    def horizon(self) -> float:
        return len(self.samples) * self.dt


@dataclass(frozen=True)
class Archetype:
    """Synthetic Ornstein-Uhlenbeck preset (not fitted to any measured series)."""

    sigma: float                 # MW, stationary std of the total signal
    tau: float                   # s, mean-reversion time
    reversal_at: Optional[float] = None   # s, time of the level sign flip
    level_frac: float = 0.9      # level amplitude as a fraction of sigma


ARCHETYPES = {
    "small": Archetype(150.0, 900.0),
    "reversal": Archetype(400.0, 1800.0, reversal_at=3600.0),
    "fast-large": Archetype(800.0, 300.0),
    "slow-large": Archetype(800.0, 1800.0),
}


def synthesize_disturbance(archetype: str, rng: np.random.Generator, horizon: float = 7200.0,
                           dt: float = 1.0, intraday_index: Optional[float] = None) -> DisturbanceSeries:
    """Mean-reverting synthetic disturbance, quantized to 1 kW.

    The reversal preset is a level of ``level_frac * sigma`` with random sign
    that flips at ``reversal_at``, plus OU noise carrying the remaining
    variance.
    """
    try:
        preset = ARCHETYPES[archetype]
    except KeyError:
        raise ValueError(f"unknown archetype {archetype!r}; choose from {sorted(ARCHETYPES)}") from None
    n = int(round(horizon / dt))
    noise_sigma = preset.sigma
    level = np.zeros(n)
    if preset.reversal_at is not None:
        amp = preset.level_frac * preset.sigma
        noise_sigma = preset.sigma * math.sqrt(max(1.0 - preset.level_frac ** 2, 0.0))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        t = np.arange(n) * dt
        level = np.where(t < preset.reversal_at, sign * amp, -sign * amp)
    a = math.exp(-dt / preset.tau)
    shocks = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = noise_sigma * shocks[0]
    scale = noise_sigma * math.sqrt(1.0 - a * a)
    for i in range(1, n):
        x[i] = a * x[i - 1] + scale * shocks[i]
    samples = np.round(level + x, 3)
    return DisturbanceSeries(samples, archetype, dt, intraday_index)


def load_disturbance(path, horizon: float = 7200.0, dt: float = 1.0, id: Optional[str] = None,
                     intraday_index: Optional[float] = None,
                     sign_convention: str = "demand") -> DisturbanceSeries:
    """Read a ``t_s,p_d_mw`` CSV and interpolate it linearly onto the ``dt`` grid.

    Gaps longer than ``MAX_GAP_S`` are rejected unless both ends carry the
    same value (a constant hold loses nothing).  Extra columns are ignored.  With ``sign_convention="surplus"`` the file's
    values are negated (positive meaning a surplus).
    """
    path = Path(path)
    if sign_convention not in ("demand", "surplus"):
        raise ValueError(f"unknown sign_convention {sign_convention!r}")
    times, values = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if "t_s" not in header or "p_d_mw" not in header:
            raise ValueError(f"{path}: header must contain t_s and p_d_mw, got {header}")
        it, ip = header.index("t_s"), header.index("p_d_mw")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t, p = float(row[it]), float(row[ip])
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: malformed row {row}") from None
            if not (math.isfinite(t) and math.isfinite(p)):
                raise ValueError(f"{path}:{lineno}: non-finite value")
            if times and t <= times[-1]:
                raise ValueError(f"{path}:{lineno}: time {t} is not increasing")
            times.append(t)
            values.append(p)
    if len(times) < 2:
        raise ValueError(f"{path}: need at least two samples")
    t_arr = np.array(times)
    v_arr = np.array(values)
    gaps = np.diff(t_arr)
    long_gaps = np.flatnonzero((gaps > MAX_GAP_S) & (np.diff(v_arr) != 0))
    if long_gaps.size:
        i = int(long_gaps[0])
        raise ValueError(f"{path}: gap of {gaps[i]:g} s after t={t_arr[i]:g} exceeds {MAX_GAP_S:g} s")
    n = int(round(horizon / dt))
    grid = np.arange(n) * dt
    if t_arr[0] > grid[0] or t_arr[-1] < grid[-1]:
        raise ValueError(f"{path}: data spans [{t_arr[0]:g}, {t_arr[-1]:g}] s, "
                         f"need [0, {grid[-1]:g}] s for a {horizon:g} s horizon")
    samples = np.interp(grid, t_arr, v_arr)
    if sign_convention == "surplus":
        samples = -samples
    return DisturbanceSeries(samples, id or path.stem, dt, intraday_index)


def load_config(path) -> dict:
    """Parse a YAML or JSON config document into a nested dict."""
    with Path(path).open() as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping at top level")
    return data


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT.format(float(v))
    return str(v)


def _json_value(v):
    if isinstance(v, dict):
        return {k: _json_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_value(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return float(FLOAT_FMT.format(f)) if math.isfinite(f) else None
    return v


def write_csv(path, header: list[str], rows: Iterable[Iterable]) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def kpis_schema() -> dict:
    text = resources.files("smartbal").joinpath("schemas/kpis.schema.json").read_text()
    return json.loads(text)


TIMESERIES_COLUMNS = ["t_s", "p_d_mw", "df_hz", "p_demand_mw", "p_fcr_mw", "p_afrr_mw", "p_smart_mw"]


def export_run(result, out_dir) -> dict:
    """Write ``timeseries.csv``, ``agents.csv`` and ``kpis.json`` for one run."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    paths = {name: out / name for name in ("timeseries.csv", "agents.csv", "kpis.json")}
    tr = result.trajectory
    if tr is not None:
        t = np.arange(len(tr.p_d)) * result.dt
        rows = zip(t, tr.p_d, tr.freq_dev, tr.p_demand, tr.p_fcr, tr.p_afrr, tr.p_smart)
    else:
        rows = []
    write_csv(paths["timeseries.csv"], TIMESERIES_COLUMNS, rows)
    agent_cols = ["agent", *AGENT_PARAM_COLUMNS, "e_rmse", "e_half", "tau_active", "e_eff", "risk_class"]
    write_csv(paths["agents.csv"], agent_cols, (
        [i, *(p.as_dict()[c] for c in AGENT_PARAM_COLUMNS),
         m.e_rmse, m.e_half, m.tau_active, m.e_eff, m.risk_class]
        for i, (p, m) in enumerate(zip(result.agent_params, result.agent_metrics))
    ))
    doc = _json_value(result.kpi_document())
    jsonschema.validate(doc, kpis_schema())
    try:
        paths["kpis.json"].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {paths['kpis.json']}: {exc}") from exc
    return paths


AGENT_PARAM_COLUMNS = ["theta_G", "theta_T", "theta_sigma2", "theta_d", "theta_w", "theta_z", "theta_c"]


def export_summary(results, path) -> Path:
    """One row per run keyed by its scenario axes; header only for no runs."""
    from .montecarlo import SUMMARY_COLUMNS, summary_row

    write_csv(path, SUMMARY_COLUMNS, (summary_row(r) for r in results))
    return Path(path)


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh, strict=True))
