"""Single busbar model of the control block.

The block contains the grid inertia with the self-regulating load effect,
saturated FCR with its activation filter, and a PI-controlled aFRR with its
activation lag.  Every linear block is discretized exactly (zero-order hold)
at the integration step; blocks are coupled explicitly, i.e. each block sees
the other blocks' outputs from the start of the step.

Sign convention: ``p_d > 0`` is a generation deficit (system short), positive
smart balancing ``p_smart > 0`` is extra injection, and
``p_demand = p_d - p_smart`` is the need for positive FRR.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np
from scipy.signal import cont2discrete, tf2ss

T_TSO = 4.0
T_NRT = 60.0


@dataclass(frozen=True)
class DiscreteLTI:
    """Discrete state-space realization ``x+ = A x + B u``, ``y = C x + D u``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: float
    dt: float

    @property
    def order(self) -> int:
        return self.A.shape[0]

    def dc_gain(self) -> float:
        if self.order == 0:
            return self.D
        eye = np.eye(self.order)
        return float(self.C @ np.linalg.solve(eye - self.A, self.B) + self.D)

    def simulate(self, u: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
        x = np.zeros(self.order) if x0 is None else np.array(x0, dtype=float)
        y = np.empty(len(u))
        for n, un in enumerate(u):
            y[n] = self.C @ x + self.D * un
            x = self.A @ x + self.B * un
        return y


def discretize_lti(numerator: Sequence[float], denominator: Sequence[float], dt: float) -> DiscreteLTI:
    """Zero-order-hold equivalent of the SISO transfer function ``num(s)/den(s)``.

    Coefficients are in descending powers of ``s``.  Raises ``ValueError`` for
    non-proper transfer functions or a non-positive step.
    """
    num = np.trim_zeros(np.atleast_1d(np.asarray(numerator, dtype=float)), "f")
    den = np.trim_zeros(np.atleast_1d(np.asarray(denominator, dtype=float)), "f")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if den.size == 0:
        raise ValueError("denominator must not be zero")
    if num.size == 0:
        num = np.zeros(1)
    if num.size > den.size:
        raise ValueError(
            f"transfer function is not proper: numerator degree {num.size - 1} "
            f"> denominator degree {den.size - 1}"
        )
    if den.size == 1:
        return DiscreteLTI(np.zeros((0, 0)), np.zeros(0), np.zeros(0), float(num[0] / den[0]), dt)
    A, B, C, D = tf2ss(num, den)
    Ad, Bd, Cd, Dd, _ = cont2discrete((A, B, C, D), dt, method="zoh")
    return DiscreteLTI(
        np.ascontiguousarray(Ad), np.ascontiguousarray(Bd[:, 0]),
        np.ascontiguousarray(Cd[0]), float(Dd[0, 0]), dt,
    )


@dataclass(frozen=True)
class BusbarParams:
    f0: float = 50.0                # Hz
    P0: float = 300_000.0           # MW, reference system load
    Tg: float = 12.0                # s, grid inertia time constant
    fcr_gain: float = 5000.0        # MW/Hz
    fcr_limit: float = 1000.0       # MW, symmetric
    k_afrr: float = 0.1
    t_afrr: float = 250.0           # s
    k_load: float = 2800.0          # MW/Hz (1.75 %/% of 80 GW)
    dt: float = 1.0                 # s
    fcr_num: tuple[float, ...] = (9.0, 1.0)
    fcr_den: tuple[float, ...] = (56.25, 15.0, 1.0)
    afrr_num: tuple[float, ...] = (1.0,)
    afrr_den: tuple[float, ...] = (20.0, 1.0)
    afrr_enabled: bool = True
    afrr_form: str = "parallel"     # or "series"
    afrr_integrator_limit: float = 1870.0  # MW

    def __post_init__(self):
        for name in ("Tg", "t_afrr", "dt", "fcr_limit", "P0", "f0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for period in (T_TSO, T_NRT):
            ratio = period / self.dt
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError(f"dt={self.dt} does not divide {period} s")
        if self.afrr_form not in ("parallel", "series"):
            raise ValueError(f"unknown afrr_form {self.afrr_form!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "BusbarParams":
        d = dict(d)
        for key in ("fcr_num", "fcr_den", "afrr_num", "afrr_den"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)


@dataclass
class GridState:
    freq_dev: float
    fcr_states: np.ndarray
    afrr_integrator: float
    afrr_act_state: np.ndarray

    @classmethod
    def zero(cls, params: BusbarParams) -> "GridState":
        model = GridModel.build(params)
        return cls(0.0, np.zeros(model.fcr.order), 0.0, np.zeros(model.afrr.order))

    def copy(self) -> "GridState":
        return GridState(self.freq_dev, self.fcr_states.copy(), self.afrr_integrator,
                         self.afrr_act_state.copy())


@dataclass(frozen=True)
class GridOutputs:
    freq_dev: float
    p_fcr: float
    p_afrr: float
    p_demand: float


@dataclass(frozen=True)
class GridTrajectory:
    """Outputs sampled at the start of every integration step."""

    freq_dev: np.ndarray
    p_fcr: np.ndarray
    p_afrr: np.ndarray
    p_demand: np.ndarray


@dataclass(frozen=True)
class GridModel:
    params: BusbarParams
    fcr: DiscreteLTI
    afrr: DiscreteLTI
    inertia_pole: float
    inertia_gain: float

    @classmethod
    def build(cls, params: BusbarParams) -> "GridModel":
        fcr = discretize_lti(params.fcr_num, params.fcr_den, params.dt)
        afrr = discretize_lti(params.afrr_num, params.afrr_den, params.dt)
        a = params.f0 / (params.Tg * params.P0)
        # d(df)/dt = a * (u - k_load * df), u held over the step
        if params.k_load > 0:
            pole = np.exp(-a * params.k_load * params.dt)
            gain = (1.0 - pole) / params.k_load
        else:
            pole, gain = 1.0, a * params.dt
        return cls(params, fcr, afrr, float(pole), float(gain))

    def advance(self, state: GridState, p_d: np.ndarray, p_smart: np.ndarray) -> tuple[GridState, GridTrajectory]:
        """Advance ``len(p_d)`` steps; inputs are held constant over each step."""
        p = self.params
        p_d = np.ascontiguousarray(p_d, dtype=float)
        p_smart = np.ascontiguousarray(p_smart, dtype=float)
        if p_d.shape != p_smart.shape:
            raise ValueError("p_d and p_smart must have equal length")
        xf = state.fcr_states.copy()
        xa = state.afrr_act_state.copy()
        scal = np.array([state.freq_dev, state.afrr_integrator])
        out = np.empty((4, len(p_d)))
        _advance_kernel(
            self.fcr.A, self.fcr.B, self.fcr.C, self.fcr.D,
            self.afrr.A, self.afrr.B, self.afrr.C, self.afrr.D,
            self.inertia_pole, self.inertia_gain,
            p.fcr_gain, p.fcr_limit, p.k_afrr, p.t_afrr, p.k_load, p.dt,
            p.afrr_enabled, p.afrr_form == "series", p.afrr_integrator_limit,
            xf, xa, scal, p_d, p_smart, out,
        )
        if not np.all(np.isfinite(out)) or not np.isfinite(scal).all():
            raise FloatingPointError("grid state became non-finite")
        new_state = GridState(float(scal[0]), xf, float(scal[1]), xa)
        return new_state, GridTrajectory(out[0], out[1], out[2], out[3])

    def simulate(self, p_d: np.ndarray, p_smart: np.ndarray | None = None) -> GridTrajectory:
        if p_smart is None:
            p_smart = np.zeros_like(np.asarray(p_d, dtype=float))
        state = GridState(0.0, np.zeros(self.fcr.order), 0.0, np.zeros(self.afrr.order))
        return self.advance(state, p_d, p_smart)[1]


@numba.njit(cache=True)
def _advance_kernel(Af, Bf, Cf, Df, Aa, Ba, Ca, Da, pole, gain,
                    fcr_gain, fcr_limit, k_afrr, t_afrr, k_load, dt,
                    afrr_enabled, series, i_limit,
                    xf, xa, scal, p_d, p_smart, out):
    nf = xf.shape[0]
    na = xa.shape[0]
    tmp_f = np.empty(nf)
    tmp_a = np.empty(na)
    df = scal[0]
    integ = scal[1]
    for n in range(p_d.shape[0]):
        demand = p_d[n] - p_smart[n]
        cmd = -fcr_gain * df
        if cmd > fcr_limit:
            cmd = fcr_limit
        elif cmd < -fcr_limit:
            cmd = -fcr_limit
        p_fcr = Df * cmd
        for i in range(nf):
            p_fcr += Cf[i] * xf[i]
        if p_fcr > fcr_limit:
            p_fcr = fcr_limit
        elif p_fcr < -fcr_limit:
            p_fcr = -fcr_limit

        if afrr_enabled:
            lag = 0.0
            for i in range(na):
                lag += Ca[i] * xa[i]
            # delivered = lag + Da * command, command = k * (demand - delivered) + integral
            if series:
                integral_term = k_afrr * integ
            else:
                integral_term = integ
            p_afrr = (lag + Da * (k_afrr * demand + integral_term)) / (1.0 + Da * k_afrr)
            err = demand - p_afrr
            command = k_afrr * err + integral_term
            integ += err * dt / t_afrr
            if integ > i_limit:
                integ = i_limit
            elif integ < -i_limit:
                integ = -i_limit
        else:
            p_afrr = 0.0
            command = 0.0

        out[0, n] = df
        out[1, n] = p_fcr
        out[2, n] = p_afrr
        out[3, n] = demand

        for i in range(nf):
            acc = Bf[i] * cmd
            for j in range(nf):
                acc += Af[i, j] * xf[j]
            tmp_f[i] = acc
        for i in range(nf):
            xf[i] = tmp_f[i]
        for i in range(na):
            acc = Ba[i] * command
            for j in range(na):
                acc += Aa[i, j] * xa[j]
            tmp_a[i] = acc
        for i in range(na):
            xa[i] = tmp_a[i]

        # self-regulation (p_load) is carried by the inertia pole
        net = p_smart[n] - p_d[n] + p_fcr + p_afrr
        df = pole * df + gain * net
    scal[0] = df
    scal[1] = integ


def step_grid(state: GridState, p_d: float, p_smart: float, params: BusbarParams,
              model: GridModel | None = None) -> tuple[GridState, GridOutputs]:
    """Advance the grid by one integration step."""
    model = model or GridModel.build(params)
    new_state, traj = model.advance(state, np.array([p_d]), np.array([p_smart]))
    return new_state, GridOutputs(float(traj.freq_dev[0]), float(traj.p_fcr[0]),
                                  float(traj.p_afrr[0]), float(traj.p_demand[0]))


def average_demand(samples: Sequence[float]) -> float:
    """Mean of the TSO samples (every 4 s) taken within one NRT minute."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("window contains no samples")
    return float(samples.mean())


def minute_averages(p_demand: np.ndarray, dt: float, t_tso: float = T_TSO,
                    t_nrt: float = T_NRT) -> np.ndarray:
    """Per-minute averages of the values sampled every ``t_tso`` seconds.

    Only fully elapsed minutes are returned.
    """
    stride = int(round(t_tso / dt))
    per_min = int(round(t_nrt / t_tso))
    sampled = np.asarray(p_demand, dtype=float)[::stride]
    n_min = len(sampled) // per_min
    return sampled[: n_min * per_min].reshape(n_min, per_min).mean(axis=1)
