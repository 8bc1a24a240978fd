"""Default surrogate closures for the pluggable sub-models.

These are deliberately simple, smooth, strictly positive correlations: a
Stokes-like rise law for gas leaving the pulp, a Sauter mean for the
interfacial bubble size, Stokes settling for the particles, an affine
axial-dispersion law, a constant overflow resistance and a quadratic
bursting-rate law in superficial air velocity. They stand in for rig
specific sub-models and are configurable; the estimation problem's
structure does not depend on their exact form.
"""

from dataclasses import dataclass

from .model import ClosureSet

GRAVITY = 9.80665  # [m/s^2]


@dataclass(frozen=True)
class SurrogateParams:
    """Constants for the default closure set (SI units)."""

    rise_rate_coeff: float        # v_gas_out = coeff * d_bubble^2 [1/(m s)]
    pulp_viscosity: float         # [Pa s]
    pulp_density: float           # [kg/m^3]
    solid_density: tuple          # per mineral class [kg/m^3]
    particle_diameter: tuple      # per mineral class [m]
    axial_dispersion_base: float  # [m^2/s]
    axial_dispersion_slope: float  # [1/m] -> slope vs Q_air
    overflow_resistance: float    # k1 [1/(m s)]
    burst_rate_const: float       # [m/s]
    burst_rate_linear: float      # [-]
    burst_rate_quadratic: float   # [s/m]

    def validate(self):
        errors = []
        positives = ("rise_rate_coeff", "pulp_viscosity", "pulp_density",
                     "axial_dispersion_base", "overflow_resistance")
        for name in positives:
            if getattr(self, name) <= 0.0:
                errors.append(f"closures.{name} must be strictly positive")
        for name in ("axial_dispersion_slope", "burst_rate_const",
                     "burst_rate_linear", "burst_rate_quadratic"):
            if getattr(self, name) < 0.0:
                errors.append(f"closures.{name} must be >= 0")
        if len(self.solid_density) != len(self.particle_diameter):
            errors.append("closures.solid_density and particle_diameter "
                          "lengths differ")
        if any(r <= self.pulp_density for r in self.solid_density):
            errors.append("closures.solid_density must exceed pulp_density "
                          "(particles must settle)")
        if any(d <= 0.0 for d in self.particle_diameter):
            errors.append("closures.particle_diameter must be strictly positive")
        return errors


def default_closures(params, a_cell):
    """Build the default ClosureSet from surrogate constants.

    ``a_cell`` converts the air flow to a superficial velocity inside the
    bursting-rate law.
    """
    p = params

    stokes = tuple(GRAVITY * (rho - p.pulp_density) * d * d
                   / (18.0 * p.pulp_viscosity)
                   for rho, d in zip(p.solid_density, p.particle_diameter))

    # The integrator evaluates closures at every Runge-Kutta stage but the
    # inputs object only changes at hold boundaries; one-slot identity
    # caches (which keep the key alive, so `is` stays sound) remove the
    # repeated per-class loops from the hot path.
    rise_cache = [None, None]
    sauter_cache = [None, None]

    def v_gas_out_k(state, inputs):
        if inputs is rise_cache[0]:
            return rise_cache[1]
        c = p.rise_rate_coeff
        out = tuple(c * d * d for d in inputs.d_b_pulp)
        rise_cache[0] = inputs
        rise_cache[1] = out
        return out

    def d_b_int(state, inputs):
        if inputs is sauter_cache[0]:
            return sauter_cache[1]
        num = 0.0
        den = 0.0
        for psi, d in zip(inputs.bubble_fractions, inputs.d_b_pulp):
            d2 = d * d
            num += psi * d2 * d
            den += psi * d2
        out = num / den
        sauter_cache[0] = inputs
        sauter_cache[1] = out
        return out

    def v_set(state, inputs):
        return stokes

    def d_axial(q_air):
        return p.axial_dispersion_base + p.axial_dispersion_slope * q_air

    def k1(state, inputs):
        return p.overflow_resistance

    def v_b(q_air):
        j_g = q_air / a_cell
        return (p.burst_rate_const + p.burst_rate_linear * j_g
                + p.burst_rate_quadratic * j_g * j_g)

    return ClosureSet(v_gas_out_k=v_gas_out_k, d_b_int=d_b_int, v_set=v_set,
                      d_axial=d_axial, k1=k1, v_b=v_b)
