"""Behind-the-meter house model: thermal RC envelope, HVAC, battery, PV, load.

One house exposes exactly two things to the utility: a per-step flexibility
envelope (bounds on its net meter power) and the tracking of a dispatch
signal. Device parameters never leave this module's solves.

Conventions: temperatures degC, powers kW, energies kWh, time steps in hours.
Net meter power ``p_gei`` is positive when the house draws from the grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from flexstart.milp import (
    BINARY,
    CONTINUOUS,
    EQUAL,
    GREATER_EQUAL,
    LESS_EQUAL,
    LinExpr,
    Model,
    SolveLimits,
    solve,
)

logger = logging.getLogger(__name__)

N_WALLS = 4

COOL = "cool"
HEAT = "heat"


class HouseModelError(ValueError):
    """Non-physical parameters or malformed inputs."""


class HouseInfeasible(RuntimeError):
    """A house solve returned no usable solution."""


@dataclass(frozen=True)
class HouseThermalParams:
    """Lumped 3R-2C envelope: four wall nodes coupled to one room node.

    Each wall exchanges heat with the room and the ambient through the same
    wall resistance; the window resistance couples the room to the ambient
    directly.
    """

    c_wall_kwh_per_degc: tuple[float, float, float, float]
    r_wall_degc_per_kw: tuple[float, float, float, float]
    r_win_degc_per_kw: float
    c_room_kwh_per_degc: float
    w_wall: tuple[float, float, float, float]
    w_win: float
    cop: float

    def __post_init__(self):
        if len(self.c_wall_kwh_per_degc) != N_WALLS or len(self.r_wall_degc_per_kw) != N_WALLS \
                or len(self.w_wall) != N_WALLS:
            raise HouseModelError("wall parameter vectors must have four entries")
        if min(self.c_wall_kwh_per_degc) <= 0 or min(self.r_wall_degc_per_kw) <= 0 \
                or self.r_win_degc_per_kw <= 0 or self.c_room_kwh_per_degc <= 0:
            raise HouseModelError("thermal capacitances and resistances must be positive")
        if self.cop <= 0:
            raise HouseModelError("COP must be positive")


@dataclass(frozen=True)
class HvacParams:
    """Comfort band and ratings; thermal q_max_kw, electrical p_max_kw."""

    t_set_lo_degc: float
    t_set_hi_degc: float
    q_max_kw: float
    p_max_kw: float

    def __post_init__(self):
        if not self.t_set_lo_degc < self.t_set_hi_degc:
            raise HouseModelError("comfort band needs t_set_lo < t_set_hi")
        if self.q_max_kw < 0 or self.p_max_kw < 0:
            raise HouseModelError("HVAC ratings must be non-negative")


@dataclass(frozen=True)
class BesParams:
    """Battery energy storage limits; charge/discharge are mutually exclusive."""

    e_lo_kwh: float
    e_hi_kwh: float
    p_c_max_kw: float
    p_d_max_kw: float
    ramp_c_kw: float
    ramp_d_kw: float
    eta_c: float
    eta_d: float

    def __post_init__(self):
        if not self.e_lo_kwh < self.e_hi_kwh:
            raise HouseModelError("battery bounds need e_lo < e_hi")
        if not (0.0 < self.eta_c <= 1.0 and 0.0 < self.eta_d <= 1.0):
            raise HouseModelError("battery efficiencies must lie in (0, 1]")
        if min(self.p_c_max_kw, self.p_d_max_kw, self.ramp_c_kw, self.ramp_d_kw) < 0:
            raise HouseModelError("battery power limits must be non-negative")


@dataclass(frozen=True)
class House:
    """One dwelling and its controllable devices, attached to a bus phase."""

    id: str
    bus: str
    phase: str
    thermal: HouseThermalParams
    hvac: HvacParams
    bes: BesParams
    hvac_mode: str = COOL

    def __post_init__(self):
        if self.hvac_mode not in (COOL, HEAT):
            raise HouseModelError(f"hvac_mode must be '{COOL}' or '{HEAT}'")


@dataclass(frozen=True)
class HouseForecast:
    """Per-step exogenous inputs over one optimization horizon."""

    t_out_degc: tuple[float, ...]
    q_rad_wall_kw: tuple[tuple[float, ...], ...]
    q_rad_win_kw: tuple[float, ...]
    q_int_kw: tuple[float, ...]
    p_pv_hat_kw: tuple[float, ...]
    p_load_hat_kw: tuple[float, ...]

    def __post_init__(self):
        n = len(self.t_out_degc)
        if len(self.q_rad_wall_kw) != N_WALLS:
            raise HouseModelError("q_rad_wall_kw must have one series per wall")
        series = [self.q_rad_win_kw, self.q_int_kw, self.p_pv_hat_kw, self.p_load_hat_kw,
                  *self.q_rad_wall_kw]
        if any(len(s) != n for s in series):
            raise HouseModelError("forecast series lengths disagree")
        if n == 0:
            raise HouseModelError("forecast horizon is empty")

    @property
    def n_steps(self) -> int:
        return len(self.t_out_degc)

    @staticmethod
    def from_arrays(t_out, q_rad_wall, q_rad_win, q_int, p_pv_hat, p_load_hat) -> "HouseForecast":
        return HouseForecast(
            t_out_degc=tuple(float(v) for v in t_out),
            q_rad_wall_kw=tuple(tuple(float(v) for v in row) for row in q_rad_wall),
            q_rad_win_kw=tuple(float(v) for v in q_rad_win),
            q_int_kw=tuple(float(v) for v in q_int),
            p_pv_hat_kw=tuple(float(v) for v in p_pv_hat),
            p_load_hat_kw=tuple(float(v) for v in p_load_hat),
        )


@dataclass(frozen=True)
class HouseState:
    """Plant state at one clock instant."""

    t_wall_degc: tuple[float, float, float, float]
    t_room_degc: float
    e_es_kwh: float
    connected: bool
    clock_h: float


@dataclass(frozen=True)
class FlexibilityEnvelope:
    """Per-step box on achievable net meter power over the horizon.

    The bounds come from two whole-horizon solves, so each step's interval is
    individually achievable but the box is not a joint guarantee.
    """

    lower_kw: tuple[float, ...]
    upper_kw: tuple[float, ...]
    horizon_start_h: float
    dt_h: float

    @property
    def n_steps(self) -> int:
        return len(self.lower_kw)


@dataclass(frozen=True)
class DispatchSignal:
    """Utility-requested net meter power per step."""

    p_ref_kw: tuple[float, ...]
    horizon_start_h: float
    dt_h: float


@dataclass(frozen=True)
class HouseDecision:
    """Solved device trajectories for one horizon (step arrays)."""

    t_hvac_degc: tuple[float, ...]
    q_hvac_kw: tuple[float, ...]
    p_hvac_kw: tuple[float, ...]
    p_es_c_kw: tuple[float, ...]
    p_es_d_kw: tuple[float, ...]
    beta_c: tuple[int, ...]
    beta_d: tuple[int, ...]
    x_pv: tuple[float, ...]
    x_load: tuple[float, ...]
    p_gei_kw: tuple[float, ...]
    status: str
    objective: float
    tracking_residual_kw: tuple[float, ...] | None = None


@dataclass
class HouseVars:
    """Variable handles produced by :func:`build_house_milp`."""

    t_wall: list[list]
    t_room: list
    q_hvac: list
    p_hvac: list
    p_c: list
    p_d: list
    b_c: list
    b_d: list
    e: list
    x_pv: list
    x_load: list
    p_pv: list
    p_load: list
    p_gei: list


def hvac_power_coefficient(house: House, t_room_measured: float,
                           min_delta_degc: float = 1.0) -> float:
    """Frozen electric-per-thermal ratio for the horizon.

    Evaluated at the measured room temperature against the comfort band
    midpoint; the driving temperature difference is floored so the
    coefficient never degenerates to zero.
    """
    t_mid = 0.5 * (house.hvac.t_set_lo_degc + house.hvac.t_set_hi_degc)
    delta = max(abs(t_mid - t_room_measured), min_delta_degc)
    return delta / (house.thermal.cop * (273.0 + t_room_measured))


def build_house_milp(house: House, forecast: HouseForecast, state: HouseState,
                     dt_h: float, pv_floor: float = 0.5, load_floor: float = 0.5
                     ) -> tuple[Model, HouseVars]:
    """Instantiate the device model over the forecast horizon.

    Returns the model plus variable handles; the caller chooses the objective
    (envelope direction, standalone minimum draw, or dispatch tracking).
    """
    if dt_h <= 0:
        raise HouseModelError("dt must be positive")
    th, hvac, bes = house.thermal, house.hvac, house.bes
    n = forecast.n_steps
    m = Model(f"house_{house.id}")
    c_lin = hvac_power_coefficient(house, state.t_room_degc)
    cooling = house.hvac_mode == COOL

    hv = HouseVars(t_wall=[], t_room=[], q_hvac=[], p_hvac=[], p_c=[], p_d=[],
                   b_c=[], b_d=[], e=[], x_pv=[], x_load=[], p_pv=[], p_load=[],
                   p_gei=[])

    p_gei_cap = (bes.p_c_max_kw + bes.p_d_max_kw + hvac.p_max_kw
                 + max(forecast.p_load_hat_kw) + max(forecast.p_pv_hat_kw) + 1.0)

    for k in range(n):
        hv.t_wall.append([m.add_var(CONTINUOUS, -40.0, 80.0, f"t_wall{i}_{k}")
                          for i in range(N_WALLS)])
        hv.t_room.append(m.add_var(CONTINUOUS, hvac.t_set_lo_degc, hvac.t_set_hi_degc,
                                   f"t_room_{k}"))
        q_lo, q_hi = (-hvac.q_max_kw, 0.0) if cooling else (0.0, hvac.q_max_kw)
        hv.q_hvac.append(m.add_var(CONTINUOUS, q_lo, q_hi, f"q_hvac_{k}"))
        hv.p_hvac.append(m.add_var(CONTINUOUS, 0.0, hvac.p_max_kw, f"p_hvac_{k}"))
        hv.p_c.append(m.add_var(CONTINUOUS, 0.0, bes.p_c_max_kw, f"p_c_{k}"))
        hv.p_d.append(m.add_var(CONTINUOUS, 0.0, bes.p_d_max_kw, f"p_d_{k}"))
        hv.b_c.append(m.add_var(BINARY, name=f"b_c_{k}"))
        hv.b_d.append(m.add_var(BINARY, name=f"b_d_{k}"))
        hv.e.append(m.add_var(CONTINUOUS, bes.e_lo_kwh, bes.e_hi_kwh, f"e_{k}"))
        hv.x_pv.append(m.add_var(CONTINUOUS, pv_floor, 1.0, f"x_pv_{k}"))
        hv.x_load.append(m.add_var(CONTINUOUS, load_floor, 1.0, f"x_load_{k}"))
        hv.p_pv.append(m.add_var(CONTINUOUS, 0.0, None, f"p_pv_{k}"))
        hv.p_load.append(m.add_var(CONTINUOUS, 0.0, None, f"p_load_{k}"))
        hv.p_gei.append(m.add_var(CONTINUOUS, -p_gei_cap, p_gei_cap, f"p_gei_{k}"))

    for k in range(n):
        t_out = forecast.t_out_degc[k]
        # wall nodes: implicit step of the capacitive balance against room and ambient
        for i in range(N_WALLS):
            ci_dt = th.c_wall_kwh_per_degc[i] / dt_h
            inv_r = 1.0 / th.r_wall_degc_per_kw[i]
            expr = (ci_dt + 2.0 * inv_r) * hv.t_wall[k][i] - inv_r * hv.t_room[k]
            rhs = t_out * inv_r + th.w_wall[i] * forecast.q_rad_wall_kw[i][k]
            if k == 0:
                rhs += ci_dt * state.t_wall_degc[i]
            else:
                expr = expr - ci_dt * hv.t_wall[k - 1][i]
            m.add_constraint(expr, EQUAL, rhs, "eq1")

        # room node: walls, window, radiation, internal gains, HVAC
        cr_dt = th.c_room_kwh_per_degc / dt_h
        inv_rw = 1.0 / th.r_win_degc_per_kw
        sum_inv = sum(1.0 / r for r in th.r_wall_degc_per_kw)
        expr = (cr_dt + sum_inv + inv_rw) * hv.t_room[k] - hv.q_hvac[k]
        for i in range(N_WALLS):
            expr = expr - (1.0 / th.r_wall_degc_per_kw[i]) * hv.t_wall[k][i]
        rhs = (t_out * inv_rw + th.w_win * forecast.q_rad_win_kw[k]
               + forecast.q_int_kw[k])
        if k == 0:
            rhs += cr_dt * state.t_room_degc
        else:
            expr = expr - cr_dt * hv.t_room[k - 1]
        m.add_constraint(expr, EQUAL, rhs, "eq2")

        # electric draw proportional to thermal output through the frozen ratio
        q_sign = -1.0 if cooling else 1.0
        m.add_constraint(hv.p_hvac[k] - q_sign * c_lin * hv.q_hvac[k], EQUAL, 0.0, "eq3")

        # comfort band on the planned room temperature (the setpoint tracks it)
        m.add_range(hv.t_room[k], hvac.t_set_lo_degc, hvac.t_set_hi_degc, "eq4")

        # battery energy recursion and bounds
        expr = hv.e[k] - dt_h * (bes.eta_c * hv.p_c[k] - (1.0 / bes.eta_d) * hv.p_d[k])
        if k == 0:
            m.add_constraint(expr, EQUAL, state.e_es_kwh, "eq5")
        else:
            m.add_constraint(expr - hv.e[k - 1], EQUAL, 0.0, "eq5")
        m.add_range(hv.e[k], bes.e_lo_kwh, bes.e_hi_kwh, "eq6")

        # charge/discharge only while the matching binary is up, never both
        m.add_constraint(hv.p_c[k] - bes.p_c_max_kw * hv.b_c[k], LESS_EQUAL, 0.0, "eq7")
        m.add_constraint(hv.p_d[k] - bes.p_d_max_kw * hv.b_d[k], LESS_EQUAL, 0.0, "eq8")
        if k >= 1:
            m.add_range(hv.p_c[k] - hv.p_c[k - 1], -bes.ramp_c_kw, bes.ramp_c_kw, "eq9")
            m.add_range(hv.p_d[k] - hv.p_d[k - 1], -bes.ramp_d_kw, bes.ramp_d_kw, "eq10")
        m.add_constraint(hv.b_c[k] + hv.b_d[k], LESS_EQUAL, 1.0, "eq11")

        # curtailable PV and sheddable load through scaling factors
        m.add_constraint(hv.p_pv[k] - forecast.p_pv_hat_kw[k] * hv.x_pv[k], EQUAL, 0.0, "eq12")
        m.add_constraint(hv.p_load[k] - forecast.p_load_hat_kw[k] * hv.x_load[k],
                         EQUAL, 0.0, "eq13")

        # net meter power
        expr = (hv.p_gei[k] - hv.p_c[k] + hv.p_d[k] + hv.p_pv[k]
                - hv.p_load[k] - hv.p_hvac[k])
        m.add_constraint(expr, EQUAL, 0.0, "eq14")

    return m, hv


def _require(result, what: str):
    if not result.ok:
        raise HouseInfeasible(f"{what}: solver status {result.status}")


def estimate_flexibility_envelope(house: House, forecast: HouseForecast,
                                  state: HouseState, dt_h: float,
                                  limits: SolveLimits | None = None,
                                  backend: str | None = None) -> FlexibilityEnvelope:
    """Bound the net meter power per step via two whole-horizon solves.

    Upper bounds come from the maximum-total-draw trajectory, lower bounds
    from the minimum-total-draw trajectory.
    """
    m, hv = build_house_milp(house, forecast, state, dt_h)
    total = LinExpr.total(hv.p_gei)
    hi = solve(m, total, "max", limits, backend)
    _require(hi, f"house {house.id} envelope upper")
    lo = solve(m, total, "min", limits, backend)
    _require(lo, f"house {house.id} envelope lower")
    return FlexibilityEnvelope(
        lower_kw=tuple(lo.value(v) for v in hv.p_gei),
        upper_kw=tuple(hi.value(v) for v in hv.p_gei),
        horizon_start_h=state.clock_h,
        dt_h=dt_h,
    )


def optimize_house(house: House, forecast: HouseForecast, state: HouseState,
                   dt_h: float, dispatch: DispatchSignal | None = None,
                   limits: SolveLimits | None = None,
                   backend: str | None = None) -> HouseDecision:
    """Solve one horizon: dispatch tracking when connected, minimum draw when not.

    Tracking minimizes the L1 gap to the reference; an unreachable reference
    clamps to the nearest achievable power and reports the residual rather
    than failing. Among tracking optima the solve then prefers trajectories
    that serve more local end use, which keeps device schedules
    deterministic.
    """
    m, hv = build_house_milp(house, forecast, state, dt_h)
    n = forecast.n_steps
    if dispatch is None:
        objective = LinExpr.total(hv.p_gei)
        res = solve(m, objective, "min", limits, backend)
        _require(res, f"house {house.id} standalone")
        residuals = None
    else:
        if len(dispatch.p_ref_kw) != n:
            raise HouseModelError("dispatch horizon length disagrees with forecast")
        gaps = []
        for k in range(n):
            u = m.add_var(CONTINUOUS, 0.0, None, f"track_gap_{k}")
            m.add_constraint(u - hv.p_gei[k], GREATER_EQUAL, -dispatch.p_ref_kw[k],
                             "track_abs")
            m.add_constraint(u + hv.p_gei[k], GREATER_EQUAL, dispatch.p_ref_kw[k],
                             "track_abs")
            gaps.append(u)
        gap_total = LinExpr.total(gaps)
        res = solve(m, gap_total, "min", limits, backend)
        _require(res, f"house {house.id} tracking")
        objective = float(res.objective)
        m.add_constraint(gap_total, LESS_EQUAL, objective + 1e-7, "track_hold")
        served = LinExpr.total(hv.p_load) + LinExpr.total(hv.p_hvac)
        res2 = solve(m, served, "max", limits, backend)
        if res2.ok:
            res = res2
        residuals = tuple(abs(res.value(hv.p_gei[k]) - dispatch.p_ref_kw[k])
                          for k in range(n))

    if dispatch is None:
        objective = float(res.objective)

    def vals(vs, cast=float):
        return tuple(cast(round(res.value(v), 12)) if cast is float
                     else cast(round(res.value(v))) for v in vs)

    return HouseDecision(
        t_hvac_degc=vals(hv.t_room),
        q_hvac_kw=vals(hv.q_hvac),
        p_hvac_kw=vals(hv.p_hvac),
        p_es_c_kw=vals(hv.p_c),
        p_es_d_kw=vals(hv.p_d),
        beta_c=vals(hv.b_c, int),
        beta_d=vals(hv.b_d, int),
        x_pv=vals(hv.x_pv),
        x_load=vals(hv.x_load),
        p_gei_kw=vals(hv.p_gei),
        status=res.status,
        objective=objective,
        tracking_residual_kw=residuals,
    )


def step_house_state(house: House, state: HouseState, decision: HouseDecision,
                     forecast: HouseForecast, dt_h: float,
                     connected: bool | None = None) -> HouseState:
    """Advance the plant one step using the first entries of the decision.

    The thermal update evaluates the same implicit discrete dynamics the
    optimizer uses (one linear solve), so a feasible plan replays exactly.
    """
    th = house.thermal
    q_hvac = decision.q_hvac_kw[0]
    t_out = forecast.t_out_degc[0]

    a = np.zeros((N_WALLS + 1, N_WALLS + 1))
    b = np.zeros(N_WALLS + 1)
    for i in range(N_WALLS):
        ci_dt = th.c_wall_kwh_per_degc[i] / dt_h
        inv_r = 1.0 / th.r_wall_degc_per_kw[i]
        a[i, i] = ci_dt + 2.0 * inv_r
        a[i, N_WALLS] = -inv_r
        b[i] = ci_dt * state.t_wall_degc[i] + t_out * inv_r \
            + th.w_wall[i] * forecast.q_rad_wall_kw[i][0]
    cr_dt = th.c_room_kwh_per_degc / dt_h
    inv_rw = 1.0 / th.r_win_degc_per_kw
    a[N_WALLS, N_WALLS] = cr_dt + sum(1.0 / r for r in th.r_wall_degc_per_kw) + inv_rw
    for i in range(N_WALLS):
        a[N_WALLS, i] = -1.0 / th.r_wall_degc_per_kw[i]
    b[N_WALLS] = (cr_dt * state.t_room_degc + t_out * inv_rw
                  + th.w_win * forecast.q_rad_win_kw[0] + forecast.q_int_kw[0] + q_hvac)
    temps = np.linalg.solve(a, b)

    e_new = state.e_es_kwh + dt_h * (house.bes.eta_c * decision.p_es_c_kw[0]
                                     - decision.p_es_d_kw[0] / house.bes.eta_d)
    return HouseState(
        t_wall_degc=tuple(float(t) for t in temps[:N_WALLS]),
        t_room_degc=float(temps[N_WALLS]),
        e_es_kwh=float(e_new),
        connected=state.connected if connected is None else bool(connected),
        clock_h=state.clock_h + dt_h,
    )


def realized_house_load_kw(decision: HouseDecision, forecast: HouseForecast,
                           step: int = 0) -> float:
    """End-use consumption actually served at a step (scaled load plus HVAC draw)."""
    return (decision.x_load[step] * forecast.p_load_hat_kw[step]
            + decision.p_hvac_kw[step])
