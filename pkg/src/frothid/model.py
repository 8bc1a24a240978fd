"""Core flotation-cell model: domain types, froth-phase algebra, and the
coupled algebraic/differential relations.

The cell is described by 2+I+K ordinary differential equations (tails flow
under PI level control, pulp height, I mineral-class masses, K bubble-class
gas holdups), closed by froth-phase algebraic relations that are mutually
coupled through the concentrate flow: the interfacial gas velocity sets the
froth residence time, which sets the froth-top bubble size, which sets the
concentrate flow, which feeds back into the interfacial gas velocity.
``solve_algebraic_loop`` resolves that coupling by damped fixed-point
iteration on the concentrate flow; ``state_derivatives`` evaluates the ODE
right-hand side at the resolved point.

Sub-models that are not part of the cell description proper (gas velocity
out of the pulp, interfacial bubble size, particle settling velocity, axial
dispersion, overflow resistance, bubble bursting rate) enter through
``ClosureSet`` and are pluggable; default surrogates live in
``frothid.closures``.

All quantities are SI (m, s, kg); unit conversion happens at config
ingestion, never here.
"""

import logging
import math
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)

# Damped-Picard settings for the concentrate-flow fixed point.
LOOP_TOL = 1e-12        # absolute stop threshold on |Q_conc change| [m^3/s]
LOOP_MAX_ITER = 100
LOOP_DAMPING = 0.5

# Largest representable air recovery strictly below 1; keeps the high-air
# branch selected when bursting vanishes entirely.
ONE_MINUS_ULP = math.nextafter(1.0, 0.0)

_GRADE_DENOM_TINY = 1e-30   # kg/s; below this there is no concentrate stream


class SimulationFault(Exception):
    """Base class for faults raised while evaluating the plant model."""

    def __init__(self, message, t=None):
        if t is not None:
            message = f"t={t:.3f}s: {message}"
        super().__init__(message)
        self.t = t


class FrothCollapseFault(SimulationFault):
    """Interfacial gas velocity non-positive: no froth can form."""


class LoopConvergenceFault(SimulationFault):
    """Concentrate-flow fixed point did not converge; carries last iterate."""

    def __init__(self, message, last=None, t=None):
        super().__init__(message, t=t)
        self.last = last


class StateInvariantFault(SimulationFault):
    """Integrated state left the physically admissible region."""


class DegenerateGradeFault(SimulationFault):
    """No mineral transport to the concentrate; grade undefined."""


@dataclass(frozen=True)
class PhysicalConstants:
    """Fixed cell geometry, mineral floatabilities and level-controller gains.

    ``pi_gain`` is the dimensionless proportional gain of the tails-flow
    level controller (tails velocity per pulp-height velocity); the
    controller equation multiplies it by the cell cross-section.
    """

    a_cell: float           # cross-sectional area [m^2]
    v_cell: float           # cell volume [m^3]
    h_total: float          # total cell height [m]
    l_lip: float            # lip perimeter [m]
    floatability: tuple     # per mineral class, length I
    pi_gain: float          # dimensionless
    pi_integral_time: float  # [s]

    @property
    def n_mineral_classes(self):
        return len(self.floatability)

    def validate(self):
        errors = []
        for name in ("a_cell", "v_cell", "h_total", "l_lip", "pi_gain",
                     "pi_integral_time"):
            if getattr(self, name) <= 0.0:
                errors.append(f"physical.{name} must be strictly positive")
        if len(self.floatability) == 0:
            errors.append("physical.floatability must have at least one class")
        if any(p <= 0.0 for p in self.floatability):
            errors.append("physical.floatability entries must be strictly positive")
        return errors


@dataclass(frozen=True)
class FrothParameters:
    """The two froth bubble-growth parameters estimated online.

    ``n`` is the growth exponent; ``c`` the growth rate coefficient
    [m^n/s]. Both must be positive for the froth-top bubble size to be
    real-valued at every residence time.
    """

    n: float
    c: float

    def validate(self):
        errors = []
        if not (self.n > 0.0 and math.isfinite(self.n)):
            errors.append("theta.n must be strictly positive and finite")
        if not (self.c > 0.0 and math.isfinite(self.c)):
            errors.append("theta.c must be strictly positive and finite")
        return errors


@dataclass
class PlantState:
    """Dynamic state: tails flow, pulp height, per-class mass and gas holdup.

    Treated as a value object: constructed in the integrator hot path and
    never mutated after construction.
    """

    q_tails: float    # [m^3/s]
    h_p: float        # [m]
    m: tuple          # per mineral class [kg], length I
    eps0: tuple       # per bubble class [-], length K

    def validate(self, h_total):
        errors = []
        if self.q_tails < 0.0:
            errors.append(f"q_tails={self.q_tails:.6g} < 0")
        if not (0.0 < self.h_p < h_total):
            errors.append(f"h_p={self.h_p:.6g} outside (0, {h_total:.6g})")
        if any(mi < 0.0 for mi in self.m):
            errors.append(f"negative mineral mass {self.m}")
        if any(e < 0.0 for e in self.eps0):
            errors.append(f"negative gas holdup {self.eps0}")
        if sum(self.eps0) >= 1.0:
            errors.append(f"total gas holdup {sum(self.eps0):.6g} >= 1")
        return errors


@dataclass(frozen=True)
class PlantInputs:
    """Exogenous inputs: flows, feed composition, level setpoint and the
    pulp bubble-size distribution."""

    q_air: float            # [m^3/s]
    q_feed: float           # [m^3/s]
    c_feed: tuple           # per mineral class [kg/m^3], length I
    h_p_setpoint: float     # [m]
    bubble_fractions: tuple  # per bubble class [-], length K, sums to 1
    d_b_pulp: tuple         # per bubble class [m], length K

    def validate(self, h_total):
        errors = []
        if self.q_air < 0.0:
            errors.append("q_air must be >= 0")
        if self.q_feed < 0.0:
            errors.append("q_feed must be >= 0")
        if any(c < 0.0 for c in self.c_feed):
            errors.append("feed concentrations must be >= 0")
        if not (0.0 < self.h_p_setpoint < h_total):
            errors.append(
                f"h_p_setpoint={self.h_p_setpoint:.6g} outside (0, {h_total:.6g})")
        if any(f < 0.0 for f in self.bubble_fractions):
            errors.append("bubble-class fractions must be >= 0")
        if abs(sum(self.bubble_fractions) - 1.0) > 1e-9:
            errors.append(
                f"bubble-class fractions sum to {sum(self.bubble_fractions):.9g}, not 1")
        if any(d <= 0.0 for d in self.d_b_pulp):
            errors.append("pulp bubble diameters must be strictly positive")
        if len(self.bubble_fractions) != len(self.d_b_pulp):
            errors.append("bubble_fractions and d_b_pulp lengths differ")
        return errors


@dataclass(frozen=True)
class ClosureSet:
    """Pluggable sub-models.

    Every field is a pure function; all must return finite, strictly
    positive values on the admissible operating box. None of them may
    depend on the concentrate flow (that is what keeps them outside the
    algebraic loop).

    v_gas_out_k(state, inputs) -> tuple[K]   gas velocity out of the pulp [m/s]
    d_b_int(state, inputs)     -> float      interfacial bubble size [m]
    v_set(state, inputs)       -> tuple[I]   particle settling velocity [m/s]
    d_axial(q_air)             -> float      axial dispersion coefficient [m^2/s]
    k1(state, inputs)          -> float      overflow resistance [1/(m s)]
    v_b(q_air)                 -> float      bubble bursting rate [m/s]
    """

    v_gas_out_k: object
    d_b_int: object
    v_set: object
    d_axial: object
    k1: object
    v_b: object


@dataclass(frozen=True)
class Plant:
    """Constants plus closures: everything fixed about one flotation cell."""

    constants: PhysicalConstants
    closures: ClosureSet


@dataclass
class AlgebraicOutputs:
    """Froth-phase quantities at the resolved algebraic fixed point.

    A value object like PlantState: built once per loop solve, never
    mutated.
    """

    v_g_star: float        # interfacial gas velocity [m/s]
    q_conc: float          # concentrate flow [m^3/s]
    d_b_froth_out: float   # froth-top bubble size [m]
    tau_f: float           # froth residence time [s]
    alpha: float           # air recovery used for branch selection [-]
    alpha_star: float      # bursting-corrected air recovery [-]
    r_f: tuple             # froth recovery per mineral class [-]
    r_ent: tuple           # entrainment factor per mineral class [-]
    g1: float              # concentrate grade of class 1 [-]
    d_b_int: float         # interfacial bubble size [m]
    s_b: float             # bubble surface-area flux [1/s]
    iterations: int        # fixed-point iterations used


@dataclass
class LoopStats:
    """Mutable counters threaded through a run for diagnostics."""

    solves: int = 0
    iterations: int = 0
    max_iterations: int = 0
    rf_clips: int = 0
    alpha_star_clips: int = 0
    branch_flips: int = 0
    _last_branch_high: bool = field(default=None, repr=False)
    _rf_warned: bool = field(default=False, repr=False)


def interfacial_gas_velocity(plant, state, inputs, q_conc):
    """Superficial gas velocity crossing the pulp-froth interface [m/s]."""
    return (inputs.q_feed - state.q_tails - q_conc + inputs.q_air) \
        / plant.constants.a_cell


def froth_top_bubble_size(theta, tau_f, d_b_int):
    """Bubble size at the froth top after residence-time growth [m].

    d = (n*c*tau_f + d_int^n)^(1/n); strictly increasing in tau_f and c.
    """
    base = theta.n * theta.c * tau_f + d_b_int ** theta.n
    if base <= 0.0:
        raise ValueError(
            f"froth-top bubble size undefined: n*c*tau_f + d_int^n = {base:.6g} <= 0")
    return base ** (1.0 / theta.n)


def air_recovery(v_g_star, v_b, stats=None):
    """Air recovery pair (alpha, alpha_star) from bursting and supply.

    alpha_star = 1 - v_b/v_g*; the branch-selection alpha is alpha_star
    clipped into [0, 1) since the camera-side overflow measurement has no
    model counterpart. Raises FrothCollapseFault when v_g* <= 0.
    """
    if v_g_star <= 0.0:
        raise FrothCollapseFault(
            f"froth collapse: interfacial gas velocity {v_g_star:.6g} <= 0")
    raw = 1.0 - v_b / v_g_star
    alpha_star = raw
    if alpha_star < 0.0:
        alpha_star = 0.0
        if stats is not None:
            stats.alpha_star_clips += 1
    elif alpha_star > 1.0:
        alpha_star = 1.0
    alpha = alpha_star if alpha_star < ONE_MINUS_ULP else ONE_MINUS_ULP
    return alpha, alpha_star


def froth_recovery(alpha, alpha_star, v_g_star, v_set, d_b_int,
                   d_b_froth_out, stats=None):
    """Fraction of attached particles surviving the froth, one class [-].

    Piecewise in froth stability; both branches coincide at alpha_star = 0.5
    because alpha_star*(1 - alpha_star) = 1/4 there. The closed form can
    exceed 1 for extreme velocity ratios, so the result is clipped to [0, 1]
    with a counted warning.
    """
    size_factor = math.sqrt(d_b_int / d_b_froth_out)
    if alpha < 0.5:
        radicand = alpha_star * (1.0 - alpha_star) * v_g_star / v_set
    else:
        radicand = v_g_star / (4.0 * v_set)
    if radicand < 0.0:
        raise ValueError(f"froth recovery radicand {radicand:.6g} < 0")
    rf = radicand ** 0.25 * size_factor
    if rf > 1.0:
        if stats is not None:
            stats.rf_clips += 1
            if not stats._rf_warned:
                stats._rf_warned = True
                logger.warning(
                    "froth recovery %.4f clipped to 1; further clips counted "
                    "silently", rf)
        rf = 1.0
    elif rf < 0.0:
        rf = 0.0
    return rf


def entrainment_factor(alpha, alpha_star, v_g_star, v_set, h_p, h_total,
                       d_axial):
    """Entrained fraction relative to water recovery, one class [-]."""
    depth = h_total - h_p
    if alpha < 0.5:
        drainage = 1.0 - alpha_star
        if drainage <= 0.0:
            raise ValueError("entrainment undefined: 1 - alpha_star <= 0 on "
                             "the low-stability branch")
        return math.exp(-(v_set ** 1.5) * depth
                        / (d_axial * math.sqrt(v_g_star * drainage)))
    return math.exp(-2.0 * (v_set ** 1.5) * depth
                    / (d_axial * math.sqrt(v_g_star)))


def concentrate_flow(alpha, alpha_star, v_g_star, d_b_froth_out, k1, a_cell):
    """Concentrate (overflow) volumetric flow [m^3/s].

    Branches coincide at alpha_star = 0.5; non-negative whenever
    alpha_star is in [0, 1].
    """
    common = 6.815 * a_cell * v_g_star * v_g_star / (k1 * d_b_froth_out ** 2)
    if alpha < 0.5:
        return common * (1.0 - alpha_star) * alpha_star
    return common * 0.25


def concentrate_grade(c_tails, v_cell, floatability, s_b, r_f, q_conc, r_ent):
    """Mass fraction of class 1 in the concentrate stream [-].

    Both true flotation (V_cell * P_i * S_b * R_f,i) and entrainment
    (Q_conc * R_ent,i) routes contribute; grade is invariant under common
    scaling of the tails concentrations.
    """
    num = 0.0
    den = 0.0
    for i, ct in enumerate(c_tails):
        term = ct * (v_cell * floatability[i] * s_b * r_f[i]
                     + q_conc * r_ent[i])
        if i == 0:
            num = term
        den += term
    if den <= _GRADE_DENOM_TINY:
        raise DegenerateGradeFault(
            f"no mineral transport to concentrate (denominator {den:.3g})")
    return num / den


def pulp_volume(state, a_cell):
    """Pulp volume including the gas fraction [m^3]."""
    eps_tot = 0.0
    gas_factor = 1.0
    for e in state.eps0:
        if e >= 1.0:
            raise StateInvariantFault(
                f"gas holdup class at {e:.6g} >= 1: pulp volume singular")
        eps_tot += e
        gas_factor += e / (1.0 - e)
    h0 = (1.0 - eps_tot) * state.h_p
    return h0 * a_cell * gas_factor


def solve_algebraic_loop(plant, state, inputs, theta, q_conc_seed=0.0,
                         tol=LOOP_TOL, max_iter=LOOP_MAX_ITER,
                         damping=LOOP_DAMPING, stats=None):
    """Resolve the froth-phase algebraic coupling by damped Picard iteration.

    The single loop unknown is the concentrate flow; everything else
    (interfacial gas velocity, air recovery, residence time, froth-top
    bubble size) is an explicit function of it. Iterates are clamped so the
    trial interfacial velocity stays positive; the stop criterion is an
    absolute change below ``tol``. Seeding with the previous time-step's
    solution converges in one iteration at an exact fixed point.
    """
    c = plant.constants
    cl = plant.closures

    # Closure values do not depend on the loop unknown: evaluate once.
    d_int = cl.d_b_int(state, inputs)
    v_set = cl.v_set(state, inputs)
    k1 = cl.k1(state, inputs)
    d_ax = cl.d_axial(inputs.q_air)
    v_b = cl.v_b(inputs.q_air)

    a_cell = c.a_cell
    base_flow = inputs.q_feed - state.q_tails + inputs.q_air
    if base_flow <= 0.0:
        raise FrothCollapseFault(
            f"froth collapse: net upward flow {base_flow:.6g} <= 0 even with "
            "zero concentrate")
    q_max = 0.99 * base_flow
    depth = c.h_total - state.h_p
    if depth <= 0.0:
        raise StateInvariantFault(
            f"pulp height {state.h_p:.6g} at or above cell top {c.h_total:.6g}")

    n = theta.n
    growth = theta.n * theta.c
    d_int_pow = d_int ** n
    inv_n = 1.0 / n
    coeff = 6.815 * a_cell / k1

    q = q_conc_seed
    if q < 0.0:
        q = 0.0
    elif q > q_max:
        q = q_max

    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        v_g = (base_flow - q) / a_cell
        a_star = 1.0 - v_b / v_g
        if a_star < 0.0:
            a_star = 0.0
        elif a_star > 1.0:
            a_star = 1.0
        alpha = a_star if a_star < ONE_MINUS_ULP else ONE_MINUS_ULP
        d_froth = (growth * depth / v_g + d_int_pow) ** inv_n
        q_new = coeff * v_g * v_g / (d_froth * d_froth)
        if alpha < 0.5:
            q_new *= (1.0 - a_star) * a_star
        else:
            q_new *= 0.25
        if q_new > q_max:
            q_new = q_max
        q_next = q + damping * (q_new - q)
        delta = q_next - q
        q = q_next
        if -tol < delta < tol:
            converged = True
            break

    # Final consistent evaluation at the converged concentrate flow.
    v_g = (base_flow - q) / a_cell
    alpha, alpha_star = air_recovery(v_g, v_b, stats=stats)
    tau_f = depth / v_g
    d_froth = froth_top_bubble_size(theta, tau_f, d_int)
    r_f_list = []
    r_ent_list = []
    for vs in v_set:
        r_f_list.append(froth_recovery(alpha, alpha_star, v_g, vs, d_int,
                                       d_froth, stats=stats))
        r_ent_list.append(entrainment_factor(alpha, alpha_star, v_g, vs,
                                             state.h_p, c.h_total, d_ax))
    r_f = tuple(r_f_list)
    r_ent = tuple(r_ent_list)
    s_b = 6.0 * v_g / d_int
    v_pulp = pulp_volume(state, a_cell)
    c_tails = tuple(mi / v_pulp for mi in state.m)
    g1 = concentrate_grade(c_tails, c.v_cell, c.floatability, s_b, r_f, q,
                           r_ent)

    out = AlgebraicOutputs(
        v_g_star=v_g, q_conc=q, d_b_froth_out=d_froth, tau_f=tau_f,
        alpha=alpha, alpha_star=alpha_star, r_f=r_f, r_ent=r_ent, g1=g1,
        d_b_int=d_int, s_b=s_b, iterations=iterations)

    if stats is not None:
        stats.solves += 1
        stats.iterations += iterations
        if iterations > stats.max_iterations:
            stats.max_iterations = iterations
        branch_high = alpha >= 0.5
        if stats._last_branch_high is not None and \
                branch_high != stats._last_branch_high:
            stats.branch_flips += 1
        stats._last_branch_high = branch_high

    if not converged:
        raise LoopConvergenceFault(
            f"concentrate-flow loop did not converge in {max_iter} iterations "
            f"(last Q_conc {q:.9g})", last=out)
    return out


def state_derivatives(plant, state, inputs, theta, algebraics):
    """Time derivatives of the 2+I+K state vector.

    Layout matches ``PlantState``: [dq_tails, dh_p, dm_1..dm_I,
    deps0_1..deps0_K]. ``algebraics`` must be the converged loop output for
    (state, inputs, theta).
    """
    c = plant.constants
    eps = state.eps0
    eps_tot = 0.0
    gas_factor = 1.0
    for e in eps:
        if e >= 1.0:
            raise StateInvariantFault(
                f"gas holdup class at {e:.6g} >= 1: derivatives singular")
        eps_tot += e
        gas_factor += e / (1.0 - e)
    h0 = (1.0 - eps_tot) * state.h_p
    v_pulp = h0 * c.a_cell * gas_factor

    v_gas_out = plant.closures.v_gas_out_k(state, inputs)
    one_plus = 1.0 + eps_tot
    v_out_total = 0.0
    for k, vk in enumerate(v_gas_out):
        v_out_total += vk * eps[k] / one_plus

    alg = algebraics
    dh_p = alg.v_g_star - v_out_total

    # Velocity-form PI on the pulp level; the integral term acts on the
    # level error with the sign that makes the tails valve drain a high
    # level (the cell level falls when the tails flow rises).
    kp_area = c.pi_gain * c.a_cell
    dq_tails = kp_area * dh_p + (kp_area / c.pi_integral_time) \
        * (state.h_p - inputs.h_p_setpoint)

    derivs = [dq_tails, dh_p]
    for i, mi in enumerate(state.m):
        c_tails_i = mi / v_pulp
        derivs.append(inputs.c_feed[i] * inputs.q_feed
                      - c_tails_i * (state.q_tails
                                     + c.v_cell * c.floatability[i]
                                     * alg.s_b * alg.r_f[i]
                                     + alg.q_conc * alg.r_ent[i]))

    net_liquid = inputs.q_feed - state.q_tails - alg.q_conc
    pre = one_plus / (c.a_cell * state.h_p)
    for k, e in enumerate(eps):
        derivs.append(pre * (inputs.q_air * inputs.bubble_fractions[k]
                             - c.a_cell * v_gas_out[k] * e / one_plus
                             - net_liquid * e))
    return derivs
