"""Monte-Carlo orchestration: parameter sampling, single runs and ensembles.

Every random draw is derived from one base seed.  Disturbances are keyed by
(disturbance, repeat) so all runs sharing them see the same series; agent
parameters and estimator streams are keyed by (run, agent).
"""
from __future__ import annotations

import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .agent import AgentParams, AgentState, decide, estimate
from .busbar import T_NRT, T_TSO, BusbarParams, GridModel, minute_averages
from .gauss import ConditioningError, InfeasibleBoxError
from .io import DisturbanceSeries, load_disturbance, synthesize_disturbance
from .metrics import (
    KPI_NAMES,
    BrpMetrics,
    RunKpis,
    estimation_metrics,
    risk_class,
    run_kpis,
    smart_metrics,
)
from .nrt import NrtScenario, publish
from .pricing import PriceModel

log = logging.getLogger(__name__)

# seed-sequence namespaces
NS_DISTURBANCE, NS_PARAMS, NS_AGENT = 0, 1, 2

RANGES = {
    "theta_G": (10.0, 100.0),
    "theta_sigma2": (0.3, 1.0),       # times var(P_d)
    "theta_d": (0.8, 2.0),
    "theta_w": (0.7, 0.9),
    "theta_z": (0.3, 3.3),
}
ALLOWED_SHAPES = {
    "theta_G": {(1, 10), (10, 1)},
    "theta_sigma2": {(1, 10), (10, 10), (10, 1)},
    "theta_d": {(1, 1)},
    "theta_w": {(1, 1)},
    "theta_z": {(1, 10), (10, 1)},
}
THETA_T_CHOICES = (2.0, 5.0, 10.0)


@dataclass(frozen=True)
class ParamShapes:
    """Beta shapes ``(alpha, beta)`` selected for one run's agent population."""

    theta_G: tuple = (1, 10)
    theta_sigma2: tuple = (1, 10)
    theta_z: tuple = (10, 1)
    theta_d: tuple = (1, 1)
    theta_w: tuple = (1, 1)
    theta_T: tuple = THETA_T_CHOICES
    theta_c: float = 0.0
    strict: bool = True

    def __post_init__(self):
        for name, allowed in ALLOWED_SHAPES.items():
            shape = tuple(getattr(self, name))
            if len(shape) != 2 or min(shape) <= 0:
                raise ValueError(f"{name}: beta shape must be two positive numbers, got {shape}")
            if self.strict and tuple(int(s) if float(s).is_integer() else s for s in shape) not in allowed:
                raise ValueError(f"{name}: unknown shape selection {shape}; allowed {sorted(allowed)}")
            object.__setattr__(self, name, tuple(shape))
        if not self.theta_T or min(self.theta_T) <= 0:
            raise ValueError("theta_T choices must be positive")
        object.__setattr__(self, "theta_T", tuple(float(t) for t in self.theta_T))

    @property
    def label(self) -> str:
        def f(s):
            return f"({s[0]:g},{s[1]:g})"
        return f"G{f(self.theta_G)} s2{f(self.theta_sigma2)} z{f(self.theta_z)}"

    @classmethod
    def from_dict(cls, d: dict) -> "ParamShapes":
        d = dict(d)
        for key in ("theta_G", "theta_sigma2", "theta_z", "theta_d", "theta_w", "theta_T"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def sample_params(shapes: ParamShapes, var_pd: float, rng: np.random.Generator) -> AgentParams:
    """Draw one agent's parameters: Beta draws mapped affinely onto the ranges."""
    if var_pd <= 0:
        raise ValueError("var_pd must be positive")

    def beta(name):
        lo, hi = RANGES[name]
        a, b = getattr(shapes, name)
        return lo + (hi - lo) * rng.beta(a, b)

    theta_G = beta("theta_G")
    theta_T = float(shapes.theta_T[rng.integers(len(shapes.theta_T))])
    theta_sigma2 = beta("theta_sigma2") * var_pd
    return AgentParams(theta_G, theta_T, theta_sigma2, beta("theta_d"), beta("theta_w"),
                       beta("theta_z"), shapes.theta_c)


@dataclass(frozen=True)
class DisturbanceSpec:
    id: str
    archetype: Optional[str] = None
    path: Optional[str] = None
    intraday_index: Optional[float] = None

    def __post_init__(self):
        if (self.archetype is None) == (self.path is None):
            raise ValueError(f"disturbance {self.id!r}: give exactly one of archetype or path")

    @classmethod
    def from_dict(cls, d) -> "DisturbanceSpec":
        if isinstance(d, str):
            return cls(d, archetype=d)
        d = dict(d)
        d.setdefault("id", d.get("archetype") or Path(d.get("path", "data")).stem)
        return cls(**d)


@dataclass(frozen=True)
class SimConfig:
    """Settings shared by every run of an ensemble."""

    horizon: float = 7200.0               # s
    n_agents: int = 100
    isp_minutes: int = 15
    busbar: BusbarParams = field(default_factory=BusbarParams)
    price: PriceModel = field(default_factory=PriceModel)
    lookahead_mode: str = "full"          # or "no_competition"
    same_step_fixed_point: bool = False
    revenue_window: str = "current_isp"   # or "full"
    max_sigmas: float = math.inf
    sign_convention: str = "demand"       # or "surplus"

    def __post_init__(self):
        if self.n_agents < 0:
            raise ValueError("n_agents must be non-negative")
        isp_s = self.isp_minutes * T_NRT
        if self.horizon <= 0 or abs(self.horizon / isp_s - round(self.horizon / isp_s)) > 1e-9:
            raise ValueError(f"horizon {self.horizon} s is not a multiple of the {isp_s:g} s ISP")
        if self.lookahead_mode not in ("full", "no_competition"):
            raise ValueError(f"unknown lookahead mode {self.lookahead_mode!r}")
        if self.revenue_window not in ("current_isp", "full"):
            raise ValueError(f"unknown revenue window {self.revenue_window!r}")
        if self.sign_convention not in ("demand", "surplus"):
            raise ValueError(f"unknown sign_convention {self.sign_convention!r}")

    @property
    def dt(self) -> float:
        return self.busbar.dt

    @property
    def n_nrt(self) -> int:
        return int(round(self.horizon / T_NRT))

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        sim = dict(d.get("simulation", {}))
        kw = {}
        if "horizon_s" in sim:
            kw["horizon"] = float(sim.pop("horizon_s"))
        for key in ("n_agents", "isp_minutes", "sign_convention"):
            if key in sim:
                kw[key] = sim.pop(key)
        look = {**d.get("lookahead", {}), **sim.pop("lookahead", {})}
        if "mode" in look:
            kw["lookahead_mode"] = look.pop("mode")
        if "same_step_fixed_point" in look:
            kw["same_step_fixed_point"] = bool(look.pop("same_step_fixed_point"))
        dec = dict(sim.pop("decision", {}))
        if "revenue_window" in dec:
            kw["revenue_window"] = dec.pop("revenue_window")
        est = dict(sim.pop("estimator", {}))
        if "max_sigmas" in est:
            kw["max_sigmas"] = float(est.pop("max_sigmas"))
        leftovers = {**sim, **look, **dec, **est}
        if leftovers:
            raise ValueError(f"unknown simulation keys {sorted(leftovers)}")
        if "busbar" in d:
            kw["busbar"] = BusbarParams.from_dict(d["busbar"])
        if "price" in d:
            kw["price"] = PriceModel.from_dict(d["price"])
        return cls(**kw)


@dataclass(frozen=True)
class RunSpec:
    run_index: int
    disturbance: DisturbanceSpec
    dist_index: int = 0
    repeat: int = 0
    nrt: NrtScenario = field(default_factory=NrtScenario)
    shapes: ParamShapes = field(default_factory=ParamShapes)
    excluded: bool = False

    def axes(self) -> dict:
        return {
            "run_index": self.run_index,
            "disturbance": self.disturbance.id,
            "repeat": self.repeat,
            "nrt": self.nrt.label,
            "nrt_kind": self.nrt.kind,
            "delay_s": self.nrt.delay,
            "theta_G_shape": "({:g},{:g})".format(*self.shapes.theta_G),
            "theta_sigma2_shape": "({:g},{:g})".format(*self.shapes.theta_sigma2),
            "theta_z_shape": "({:g},{:g})".format(*self.shapes.theta_z),
        }


def excluded_by_rule(shapes: ParamShapes) -> bool:
    """Populations of mostly large-gain agents with mostly narrow bands."""
    return tuple(shapes.theta_G) == (10, 1) and tuple(shapes.theta_z) == (1, 10)


@dataclass
class Trajectory:
    """Time series at the integration step."""

    p_d: np.ndarray
    freq_dev: np.ndarray
    p_demand: np.ndarray
    p_fcr: np.ndarray
    p_afrr: np.ndarray
    p_smart: np.ndarray


@dataclass
class RunResult:
    spec: RunSpec
    dt: float
    seed: int
    trajectory: Optional[Trajectory] = None
    reference: Optional[Trajectory] = None
    agent_u: Optional[np.ndarray] = None        # (agents, N_NRT) executed plan values
    agent_y: Optional[np.ndarray] = None        # (agents, N_NRT) delivered power at minute starts
    agent_params: list = field(default_factory=list)
    agent_metrics: list = field(default_factory=list)
    kpis: Optional[RunKpis] = None
    failed: bool = False
    error: Optional[str] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def excluded(self) -> bool:
        return self.spec.excluded

    def slim(self) -> "RunResult":
        """Copy without time series (for collecting large ensembles)."""
        return replace(self, trajectory=None, reference=None, agent_u=None, agent_y=None)

    def kpi_document(self) -> dict:
        k = self.kpis
        return {
            "run_index": self.spec.run_index,
            "seed": self.seed,
            "scenario": self.spec.axes(),
            "n_agents": len(self.agent_params),
            "excluded": self.excluded,
            "failed": self.failed,
            "error": self.error,
            "kpis": k.absolute if k else None,
            "reference": k.reference if k else None,
            "relative": k.relative if k else None,
            "outlier_prone": list(k.outlier_prone) if k else [],
            "diagnostics": dict(self.diagnostics),
        }


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def make_disturbance(spec: DisturbanceSpec, seed: int, dist_index: int, repeat: int,
                     sim: SimConfig) -> DisturbanceSeries:
    if spec.path is not None:
        series = load_disturbance(spec.path, sim.horizon, sim.dt, spec.id, spec.intraday_index,
                                  sim.sign_convention)
    else:
        rng = _stream(seed, NS_DISTURBANCE, dist_index, repeat)
        series = synthesize_disturbance(spec.archetype, rng, sim.horizon, sim.dt, spec.intraday_index)
        series = replace(series, id=spec.id)
    return series


def _price_for(sim: SimConfig, series: DisturbanceSeries) -> PriceModel:
    if series.intraday_index is None:
        return sim.price
    return replace(sim.price, intraday_index=float(series.intraday_index))


def run_simulation(spec: RunSpec, sim: SimConfig, seed: int,
                   disturbance: Optional[DisturbanceSeries] = None) -> RunResult:
    """One run plus its matched reference; numeric failures mark the result failed."""
    with threadpool_limits(1):
        try:
            return _run(spec, sim, seed, disturbance)
        except (FloatingPointError, ConditioningError, InfeasibleBoxError, np.linalg.LinAlgError) as exc:
            log.warning("run %d failed: %s", spec.run_index, exc)
            return RunResult(spec, sim.dt, seed, failed=True, error=f"{type(exc).__name__}: {exc}")


def _run(spec: RunSpec, sim: SimConfig, seed: int, disturbance) -> RunResult:
    started = time.perf_counter()
    series = disturbance or make_disturbance(spec.disturbance, seed, spec.dist_index, spec.repeat, sim)
    dt = sim.dt
    steps_min = int(round(T_NRT / dt))
    stride = int(round(T_TSO / dt))
    N = sim.n_nrt
    isp_len = sim.isp_minutes
    p_d = np.asarray(series.samples, dtype=float)
    if len(p_d) != N * steps_min:
        raise ValueError(f"disturbance has {len(p_d)} samples, horizon needs {N * steps_min}")
    price = _price_for(sim, series)
    pd_min = minute_averages(p_d, dt)
    var_pd = float(np.var(p_d)) or 1.0

    A = sim.n_agents
    params = [sample_params(spec.shapes, var_pd, _stream(seed, NS_PARAMS, spec.run_index, a))
              for a in range(A)]
    p_smart = np.zeros_like(p_d)
    y_dt = np.zeros((A, len(p_d)))
    u_trace = np.zeros((A, N))
    y_min = np.zeros((A, N))
    est_E = np.zeros((3, A, N))
    dem_min = np.zeros(N)
    diagnostics = {}
    if A:
        rngs = [_stream(seed, NS_AGENT, spec.run_index, a) for a in range(A)]
        state = AgentState.create(params, N, rngs, T_NRT)
        gain = state.column("theta_G")
        pole = np.exp(-dt / (T_NRT * state.column("theta_T")))
        decay = pole[:, None] ** np.arange(steps_min)[None, :]
        y_now = np.zeros(A)
        for k in range(N):
            bulletin = publish(dem_min[:k], k * T_NRT, spec.nrt, n=N)
            lookahead = pd_min if sim.lookahead_mode == "no_competition" else pd_min - state.y.sum(axis=0)
            est = estimate(state, lookahead, bulletin, update=False, max_sigmas=sim.max_sigmas)
            _, plans = decide(est, state, price, k, isp_len, T_NRT, sim.revenue_window)
            if sim.same_step_fixed_point and sim.lookahead_mode == "full":
                for _ in range(5):
                    look2 = pd_min - np.einsum("akm,am->k", state.conv, plans)
                    est2 = estimate(state, look2, bulletin, update=False, max_sigmas=sim.max_sigmas)
                    _, plans2 = decide(est2, state, price, k, isp_len, T_NRT, sim.revenue_window)
                    est, converged = est2, np.array_equal(plans2, plans)
                    plans = plans2
                    if converged:
                        break
            state.x_prev = est.x_hat
            state.u = plans
            q = slice((k // isp_len) * isp_len, (k // isp_len + 1) * isp_len)
            for row, vec in enumerate((est.x_hat, est.lower, est.upper)):
                est_E[row, :, k] = vec[:, q].sum(axis=1) * T_NRT / 3600.0
            u_trace[:, k] = plans[:, k]
            y_min[:, k] = y_now
            # first-order lag toward theta_G * u held over the minute, exact at dt
            target = gain * plans[:, k]
            chunk = slice(k * steps_min, (k + 1) * steps_min)
            y_chunk = target[:, None] + (y_now - target)[:, None] * decay
            y_dt[:, chunk] = y_chunk
            p_smart[chunk] = y_chunk.sum(axis=0)
            y_now = target + (y_now - target) * pole ** steps_min
            dem_min[k] = np.mean((p_d[chunk] - p_smart[chunk])[::stride])
        diagnostics.update(state.diagnostics)

    model = GridModel.build(sim.busbar)
    run_tr = model.simulate(p_d, p_smart)
    ref_tr = model.simulate(p_d)
    trajectory = Trajectory(p_d, run_tr.freq_dev, run_tr.p_demand, run_tr.p_fcr, run_tr.p_afrr, p_smart)
    reference = Trajectory(p_d, ref_tr.freq_dev, ref_tr.p_demand, ref_tr.p_fcr, ref_tr.p_afrr,
                           np.zeros_like(p_d))

    realized = dem_min.reshape(-1, isp_len).sum(axis=1) * T_NRT / 3600.0
    realized_k = realized[np.arange(N) // isp_len]
    metrics = []
    for a in range(A):
        e_rmse, e_half = estimation_metrics(est_E[0, a], est_E[1, a], est_E[2, a], realized_k)
        tau, e_eff = smart_metrics(y_dt[a], run_tr.p_demand, u_trace[a], dt, isp_len * T_NRT)
        metrics.append(BrpMetrics(e_rmse, e_half, tau, e_eff, risk_class(e_rmse, e_half)))

    curve = price.marginal_curve
    kpis = RunKpis.compare(run_kpis(run_tr.freq_dev, run_tr.p_afrr, dt, curve, isp_len * T_NRT),
                           run_kpis(ref_tr.freq_dev, ref_tr.p_afrr, dt, curve, isp_len * T_NRT))
    diagnostics["runtime_s"] = round(time.perf_counter() - started, 3)
    return RunResult(spec, dt, seed, trajectory, reference, u_trace, y_min, params, metrics, kpis,
                     diagnostics=diagnostics)


DEFAULT_NRT = tuple(NrtScenario(kind=k, delay=d) for d in (60.0, 120.0) for k in ("E", "Es", "Is", "El", "Il"))


def default_param_combos() -> list[ParamShapes]:
    return [ParamShapes(theta_G=g, theta_sigma2=s, theta_z=z)
            for g in ((1, 10), (10, 1))
            for s in ((1, 10), (10, 10), (10, 1))
            for z in ((1, 10), (10, 1))]


@dataclass(frozen=True)
class EnsembleConfig:
    disturbances: tuple = tuple(DisturbanceSpec(a, archetype=a)
                                for a in ("small", "reversal", "fast-large", "slow-large"))
    nrt_scenarios: tuple = DEFAULT_NRT
    param_combos: tuple = field(default_factory=lambda: tuple(default_param_combos()))
    repeats: int = 1
    seed: int = 0
    sim: SimConfig = field(default_factory=SimConfig)
    exclusion_rule: bool = True

    def __post_init__(self):
        if self.repeats < 0:
            raise ValueError("repeats must be non-negative")
        if self.sim.n_agents < 1:
            raise ValueError("an ensemble needs at least one agent per run")

    def runs(self) -> list[RunSpec]:
        """Cartesian product of the axes, enumerated in a fixed order."""
        specs = []
        grid = itertools.product(enumerate(self.disturbances), self.nrt_scenarios,
                                 self.param_combos, range(self.repeats))
        for index, ((d_idx, dist), nrt, shapes, rep) in enumerate(grid):
            excluded = self.exclusion_rule and excluded_by_rule(shapes)
            specs.append(RunSpec(index, dist, d_idx, rep, nrt, shapes, excluded))
        return specs

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleConfig":
        ens = dict(d.get("ensemble", {}))
        kw = {"sim": SimConfig.from_dict(d)}
        if "seed" in d:
            kw["seed"] = int(d["seed"])
        if "disturbances" in ens:
            kw["disturbances"] = tuple(DisturbanceSpec.from_dict(x) for x in ens.pop("disturbances"))
        if "nrt_scenarios" in ens:
            kw["nrt_scenarios"] = tuple(NrtScenario.from_dict(x) for x in ens.pop("nrt_scenarios"))
        if "param_combos" in ens:
            kw["param_combos"] = tuple(ParamShapes.from_dict(x) for x in ens.pop("param_combos"))
        elif "param_grid" in ens:
            grid = ens.pop("param_grid")
            keys = sorted(grid)
            kw["param_combos"] = tuple(
                ParamShapes.from_dict(dict(zip(keys, combo)))
                for combo in itertools.product(*(grid[k] for k in keys)))
        for key in ("repeats", "exclusion_rule"):
            if key in ens:
                kw[key] = ens.pop(key)
        if ens:
            raise ValueError(f"unknown ensemble keys {sorted(ens)}")
        return cls(**kw)


def single_run_spec(d: dict) -> RunSpec:
    """The run described by the top-level ``disturbance``/``nrt``/``agents`` keys."""
    dist = DisturbanceSpec.from_dict(d.get("disturbance", {"id": "small", "archetype": "small"}))
    nrt = NrtScenario.from_dict(d.get("nrt", {}))
    shapes = ParamShapes.from_dict(d.get("agents", {}))
    return RunSpec(0, dist, 0, 0, nrt, shapes, excluded_by_rule(shapes))


def _work(args):
    spec, sim, seed, out_dir = args
    result = run_simulation(spec, sim, seed)
    if out_dir is not None:
        from .io import export_run
        export_run(result, Path(out_dir) / f"run_{spec.run_index:05d}")
    return result.slim()


def run_ensemble(config: EnsembleConfig, workers: int = 1, out_dir=None,
                 runs: Optional[Sequence[RunSpec]] = None) -> list[RunResult]:
    """Execute every run (optionally exporting each under ``out_dir/runs``).

    Results are slim (no time series) and ordered by run index regardless of
    worker count.  Failed runs are reported and kept with ``failed`` set.
    """
    specs = list(config.runs() if runs is None else runs)
    run_dir = None if out_dir is None else Path(out_dir) / "runs"
    jobs = [(s, config.sim, config.seed, run_dir) for s in specs]
    if workers <= 1 or len(jobs) <= 1:
        results = [_work(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_work, jobs))
    results.sort(key=lambda r: r.spec.run_index)
    failed = [r.spec.run_index for r in results if r.failed]
    if failed:
        log.warning("%d of %d runs failed: %s", len(failed), len(results), failed)
    return results


SUMMARY_AXES = ["run_index", "disturbance", "repeat", "nrt", "nrt_kind", "delay_s",
                "theta_G_shape", "theta_sigma2_shape", "theta_z_shape"]
SUMMARY_COLUMNS = SUMMARY_AXES + ["excluded", "failed"] + [
    col for name in KPI_NAMES for col in (name, f"{name}_ref", f"{name}_rel")
] + ["median_e_rmse", "median_e_half", "mean_tau_active", "median_e_eff"]


def summary_row(result: RunResult) -> list:
    axes = result.spec.axes()
    record = result.kpis.record() if result.kpis else {}
    ms = result.agent_metrics

    def med(vals):
        vals = [v for v in vals if v is not None]
        return float(np.median(vals)) if vals else None

    extra = [
        med(m.e_rmse for m in ms),
        med(m.e_half for m in ms),
        float(np.mean([m.tau_active for m in ms])) if ms else None,
        med(m.e_eff for m in ms),
    ]
    return ([axes[c] for c in SUMMARY_AXES] + [result.excluded, result.failed]
            + [record.get(c) for c in SUMMARY_COLUMNS[len(SUMMARY_AXES) + 2:-4]] + extra)
