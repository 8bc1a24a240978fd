"""Time integration of the cell model and noisy grade measurement generation.

Fixed-step classical Runge-Kutta, re-solving the froth algebraic loop at
every stage; each 1 s measurement interval is covered by a configurable
number of micro-steps. One shared flat-vector worker drives both the truth
simulation and the estimator's one-step predictions, so a prediction from
the true state under the true parameters reproduces the truth bitwise.
"""

import math
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .model import (FrothParameters, LoopStats, PlantState, SimulationFault,
                    StateInvariantFault, solve_algebraic_loop,
                    state_derivatives)

_NEG_CLAMP = -1e-12   # grace band: tiny negative states are rounded to zero


@dataclass(frozen=True)
class SimConfig:
    """Integration and measurement settings."""

    dt: float = 1.0          # sampling/measurement interval [s]
    t_end: float = 2400.0    # horizon [s]
    noise_std: float = 1e-3  # grade measurement noise std [-]
    rng_seed: int = 0
    substeps: int = 10       # RK4 micro-steps per measurement interval

    def validate(self):
        errors = []
        if self.dt <= 0.0:
            errors.append("sim.dt must be strictly positive")
        if self.t_end <= 0.0:
            errors.append("sim.t_end must be strictly positive")
        if self.noise_std < 0.0:
            errors.append("sim.noise_std must be >= 0")
        if self.substeps < 1:
            errors.append("sim.substeps must be >= 1")
        return errors


@dataclass(frozen=True)
class ParameterSchedule:
    """Piecewise-constant true parameters: ordered (t_start, theta) segments."""

    segments: tuple  # of (float, FrothParameters), t_start ascending from 0

    def __post_init__(self):
        starts = [s[0] for s in self.segments]
        if not starts or starts[0] != 0.0:
            raise ValueError("schedule must start at t=0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("schedule segment starts must be strictly increasing")
        object.__setattr__(self, "_starts", tuple(starts))

    def theta_at(self, t):
        idx = bisect_right(self._starts, t) - 1
        return self.segments[idx][1]

    @staticmethod
    def constant(theta):
        return ParameterSchedule(segments=((0.0, theta),))


@dataclass(frozen=True)
class MeasurementRecord:
    """One sampling instant: truth, measurement and full snapshots."""

    t: float
    g1_true: float
    g1_measured: float
    state: PlantState
    algebraics: object          # AlgebraicOutputs
    theta_true: FrothParameters


def _pack(state):
    return [state.q_tails, state.h_p, *state.m, *state.eps0]


def _unpack(y, n_minerals):
    return PlantState(q_tails=y[0], h_p=y[1],
                      m=tuple(y[2:2 + n_minerals]),
                      eps0=tuple(y[2 + n_minerals:]))


def _rhs(plant, y, inputs, theta, n_minerals, q_seed, loop_opts, stats):
    state = _unpack(y, n_minerals)
    alg = solve_algebraic_loop(plant, state, inputs, theta,
                               q_conc_seed=q_seed, stats=stats, **loop_opts)
    return state_derivatives(plant, state, inputs, theta, alg), alg.q_conc


def _enforce_invariants(plant, y, n_minerals):
    """Clamp grace-band negatives to zero, fault on real violations."""
    if y[0] < 0.0:
        if y[0] < _NEG_CLAMP:
            raise StateInvariantFault(f"q_tails={y[0]:.6g} < 0 after step")
        y[0] = 0.0
    h_total = plant.constants.h_total
    if not (0.0 < y[1] < h_total):
        raise StateInvariantFault(
            f"h_p={y[1]:.6g} outside (0, {h_total:.6g}) after step")
    for i in range(2, 2 + n_minerals):
        if y[i] < 0.0:
            if y[i] < _NEG_CLAMP:
                raise StateInvariantFault(
                    f"mineral mass {y[i]:.6g} < -1e-12 after step")
            y[i] = 0.0
    eps_tot = 0.0
    for i in range(2 + n_minerals, len(y)):
        e = y[i]
        if e < 0.0:
            if e < _NEG_CLAMP:
                raise StateInvariantFault(
                    f"gas holdup {e:.6g} < -1e-12 after step")
            y[i] = 0.0
            e = 0.0
        if e >= 1.0:
            raise StateInvariantFault(f"gas holdup {e:.6g} >= 1 after step")
        eps_tot += e
    if eps_tot >= 1.0:
        raise StateInvariantFault(
            f"total gas holdup {eps_tot:.6g} >= 1 after step")
    return y


def _advance(plant, y, inputs, theta, dt, substeps, q_seed, loop_opts, stats):
    """Advance the flat state over dt with `substeps` RK4 micro-steps.

    Chains the concentrate-flow seed across stages and steps. Returns the
    new flat state and the seed for the next call.
    """
    n_min = plant.constants.n_mineral_classes
    h = dt / substeps
    half = 0.5 * h
    sixth = h / 6.0
    n = len(y)
    for _ in range(substeps):
        k1, q_seed = _rhs(plant, y, inputs, theta, n_min, q_seed, loop_opts,
                          stats)
        y2 = [y[i] + half * k1[i] for i in range(n)]
        k2, q_seed = _rhs(plant, y2, inputs, theta, n_min, q_seed, loop_opts,
                          stats)
        y3 = [y[i] + half * k2[i] for i in range(n)]
        k3, q_seed = _rhs(plant, y3, inputs, theta, n_min, q_seed, loop_opts,
                          stats)
        y4 = [y[i] + h * k3[i] for i in range(n)]
        k4, q_seed = _rhs(plant, y4, inputs, theta, n_min, q_seed, loop_opts,
                          stats)
        y = [y[i] + sixth * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i])
             for i in range(n)]
        y = _enforce_invariants(plant, y, n_min)
    return y, q_seed


def integrate_step(plant, state, inputs, theta, dt, q_conc_seed=0.0,
                   stats=None, loop_opts=None):
    """One classical RK4 step of size dt; returns the new PlantState.

    The froth algebraic loop is re-solved at every stage. A zero dt returns
    the state unchanged. Raises StateInvariantFault if the step leaves the
    admissible region (tiny negatives inside the grace band are clamped).
    """
    if dt == 0.0:
        return state
    if dt < 0.0:
        raise ValueError("dt must be >= 0")
    y, _ = _advance(plant, _pack(state), inputs, theta, dt, 1, q_conc_seed,
                    loop_opts or {}, stats)
    return _unpack(y, plant.constants.n_mineral_classes)


def advance_sample(plant, state, inputs, theta, dt, substeps,
                   q_conc_seed=0.0, stats=None, loop_opts=None):
    """Advance one measurement interval; returns (state, q_conc_seed)."""
    y, seed = _advance(plant, _pack(state), inputs, theta, dt, substeps,
                       q_conc_seed, loop_opts or {}, stats)
    return _unpack(y, plant.constants.n_mineral_classes), seed


def simulate(plant, initial, input_schedule, schedule, cfg, stats=None):
    """Run the truth simulation and emit one MeasurementRecord per sample.

    ``input_schedule`` maps a sample time to PlantInputs (held constant over
    the following interval); ``schedule`` supplies the true parameters. The
    grade measurement adds one seeded Gaussian draw per sample. Faults
    propagate with the failing timestamp attached.
    """
    if stats is None:
        stats = LoopStats()
    rng = np.random.default_rng(cfg.rng_seed)
    n_samples = int(round(cfg.t_end / cfg.dt))
    records = []
    state = initial
    q_seed = 0.0
    for k in range(n_samples + 1):
        t = k * cfg.dt
        inputs = input_schedule.at_time(t)
        theta = schedule.theta_at(t)
        try:
            alg = solve_algebraic_loop(plant, state, inputs, theta,
                                       q_conc_seed=q_seed, stats=stats)
        except SimulationFault as fault:
            _stamp(fault, t)
            raise
        q_seed = alg.q_conc
        noise = rng.standard_normal() * cfg.noise_std
        records.append(MeasurementRecord(
            t=t, g1_true=alg.g1, g1_measured=alg.g1 + noise, state=state,
            algebraics=alg, theta_true=theta))
        if k < n_samples:
            try:
                state, q_seed = advance_sample(plant, state, inputs, theta,
                                               cfg.dt, cfg.substeps, q_seed,
                                               stats)
            except SimulationFault as fault:
                _stamp(fault, t)
                raise
    return records


def _stamp(fault, t):
    """Attach the sample time to a fault raised without one."""
    if fault.t is None:
        fault.t = t
        fault.args = (f"t={t:.3f}s: {fault.args[0]}",) + fault.args[1:]


def settle(plant, inputs, theta, duration, dt=1.0, substeps=10, state=None,
           stats=None):
    """Run the plant to steady conditions under constant inputs; return the
    final state. Used to construct the initial condition."""
    if state is None:
        state = _coarse_initial_state(plant, inputs)
    q_seed = 0.0
    steps = int(round(duration / dt))
    for _ in range(steps):
        state, q_seed = advance_sample(plant, state, inputs, theta, dt,
                                       substeps, q_seed, stats)
    return state


def _coarse_initial_state(plant, inputs):
    """A rough but admissible starting point for settling."""
    c = plant.constants
    n_bubble = len(inputs.bubble_fractions)
    v_pulp0 = inputs.h_p_setpoint * c.a_cell
    m = tuple(cf * v_pulp0 for cf in inputs.c_feed)
    eps0 = tuple(0.01 / n_bubble for _ in range(n_bubble))
    return PlantState(q_tails=inputs.q_feed, h_p=inputs.h_p_setpoint, m=m,
                      eps0=eps0)


def richardson_order(errors):
    """Observed convergence order from three successively halved step sizes."""
    e01, e12 = errors
    return math.log2(e01 / e12)
