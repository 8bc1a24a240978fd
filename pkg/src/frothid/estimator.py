"""Recursive grade-based estimation of the froth bubble-growth parameters.

One-step-ahead output-error prediction with carried plant state, central
finite-difference output gradients, a forgetting-factor Gauss-Newton
parameter update whose inverse Hessian is propagated by the rank-one
(Woodbury) recursion, and an offline batch initializer that fits the same
parameters on a startup window by damped Gauss-Newton with full
re-simulation per candidate.

Update equations, with eta the measurement residual, psi the output
gradient and 0 < lambda <= 1 the forgetting factor:

    eta_N   = y_N - g1_pred(theta_{N-1})
    L_N     = (1/lambda) * (L - (L psi)(psi^T L) / (lambda + psi^T L psi))
    theta_N = Pi_box(theta_{N-1} + L_N psi eta_N)
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .model import FrothParameters, SimulationFault, solve_algebraic_loop
from .sim import advance_sample

GRADIENT_MODES = ("reanchored", "parallel")

# Perturbation order for the parallel-chain gradient: (n+, n-, c+, c-).
_PERTURB = ((0, +1), (0, -1), (1, +1), (1, -1))


class EstimatorFault(Exception):
    """Numerical corruption inside the recursive update."""


class EstimatorAbort(Exception):
    """Too many consecutive frozen samples; the run cannot continue."""


@dataclass(frozen=True)
class EstimatorConfig:
    """Tuning of the recursive estimator.

    ``l_rel_ceiling`` bounds the inverse Hessian: no direction's standard
    deviation (relative to the current estimate) may exceed it. With
    forgetting active, directions the data stops exciting would otherwise
    inflate by 1/lambda per sample and a later large residual would
    catapult the estimate along them; the ceiling is the retuning guard
    against that windup. Set to None to propagate the raw recursion.
    """

    forgetting: float = 0.995    # lambda
    l0_scale: float = 0.1        # initial inverse-Hessian scale vs theta0
    eps_rel: float = 1e-6        # relative finite-difference perturbation
    theta_min: FrothParameters = FrothParameters(n=0.2, c=1.276e-4)
    theta_max: FrothParameters = FrothParameters(n=5.0, c=3.19e-3)
    gradient_mode: str = "reanchored"
    l_rel_floor: float = None    # min relative std of theta along any direction
    l_rel_ceiling: float = 0.3   # max relative std of theta along any direction
    check_spd: bool = False      # Cholesky-check L every update (test builds)

    def validate(self):
        errors = []
        if not (0.0 < self.forgetting <= 1.0):
            errors.append("estimator.forgetting must be in (0, 1]")
        if not (0.0 < self.eps_rel <= 1e-2):
            errors.append("estimator.eps_rel must be in (0, 1e-2]")
        if self.l0_scale <= 0.0:
            errors.append("estimator.l0_scale must be strictly positive")
        box_ok = (0.0 < self.theta_min.n < self.theta_max.n
                  and 0.0 < self.theta_min.c < self.theta_max.c)
        if not box_ok:
            errors.append("estimator.theta bounds must satisfy 0 < min < max")
        if self.gradient_mode not in GRADIENT_MODES:
            errors.append(
                f"estimator.gradient_mode must be one of {GRADIENT_MODES}")
        if self.l_rel_ceiling is not None and self.l_rel_ceiling <= 0.0:
            errors.append("estimator.l_rel_ceiling must be positive or null")
        return errors


@dataclass(frozen=True)
class EstimatorState:
    """Everything the recursion carries from one sample to the next."""

    theta_hat: FrothParameters
    l_matrix: np.ndarray         # 2x2 SPD inverse-Hessian approximation
    predictor_state: object      # PlantState carried by the nominal predictor
    step_count: int = 0
    q_conc_seed: float = 0.0     # warm start for the froth algebraic loop
    perturbed: tuple = None      # parallel-mode chains: ((state, seed) x 4)


@dataclass(frozen=True)
class UpdateDiagnostics:
    """Per-sample update internals."""

    eta: float                   # measurement residual
    psi: np.ndarray              # output gradient, length 2
    gain: np.ndarray             # L_N psi, length 2
    innovation_scale: float      # lambda + psi^T L psi (conditioning guard)
    fault: str = None            # set when the sample was frozen


def initial_l_matrix(theta0, l0_scale):
    """Diagonal inverse Hessian scaled to the initial estimate."""
    return np.diag([(l0_scale * theta0.n) ** 2,
                    (l0_scale * theta0.c) ** 2])


def make_initial_state(theta0, l0_scale, predictor_state, q_conc_seed=0.0):
    return EstimatorState(theta_hat=theta0,
                          l_matrix=initial_l_matrix(theta0, l0_scale),
                          predictor_state=predictor_state,
                          step_count=0, q_conc_seed=q_conc_seed)


def predict_one_step(plant, est, inputs_interval, inputs_at, theta, dt,
                     substeps, stats=None):
    """Predict the grade one sampling interval ahead of the carried state.

    Integrates under ``inputs_interval`` (the zero-order-hold value over the
    interval) and evaluates the grade at the arrival time under
    ``inputs_at``. Returns (g1_pred, post_state, post_loop_seed); never
    mutates ``est``.
    """
    state, seed = advance_sample(plant, est.predictor_state, inputs_interval,
                                 theta, dt, substeps, est.q_conc_seed, stats)
    alg = solve_algebraic_loop(plant, state, inputs_at, theta,
                               q_conc_seed=seed, stats=stats)
    return alg.g1, state, alg.q_conc


def _clamped_pair(theta, j, eps, box_min, box_max):
    """Perturbed parameter values for component j, kept inside the box."""
    vals = [theta.n, theta.c]
    lo_bound = [box_min.n, box_min.c][j]
    hi_bound = [box_max.n, box_max.c][j]
    hi = min(vals[j] + eps, hi_bound)
    lo = max(vals[j] - eps, lo_bound)
    return hi, lo


def _with_component(theta, j, value):
    return FrothParameters(n=value, c=theta.c) if j == 0 \
        else FrothParameters(n=theta.n, c=value)


def output_gradient(plant, est, inputs_interval, inputs_at, dt, substeps,
                    cfg, stats=None):
    """Central-difference gradient of the one-step grade prediction.

    Both perturbed predictions restart from the same carried state (pure
    one-step sensitivity). Perturbations are eps_rel * |theta_j|, shrunk at
    the projection-box edges; a fully pinned component gets a zero entry.
    """
    theta = est.theta_hat
    psi = np.zeros(2)
    for j in range(2):
        base = abs([theta.n, theta.c][j])
        eps = cfg.eps_rel * base
        hi, lo = _clamped_pair(theta, j, eps, cfg.theta_min, cfg.theta_max)
        spread = hi - lo
        if spread <= 0.0:
            continue
        g_hi, _, _ = predict_one_step(plant, est, inputs_interval, inputs_at,
                                      _with_component(theta, j, hi), dt,
                                      substeps, stats)
        g_lo, _, _ = predict_one_step(plant, est, inputs_interval, inputs_at,
                                      _with_component(theta, j, lo), dt,
                                      substeps, stats)
        psi[j] = (g_hi - g_lo) / spread
    return psi


def _parallel_gradient(plant, est, inputs_interval, inputs_at, dt, substeps,
                       cfg, stats=None):
    """Gradient from four independently carried perturbed trajectories."""
    theta = est.theta_hat
    new_chains = []
    g1 = []
    for chain, (j, sign) in zip(est.perturbed, _PERTURB):
        state0, seed0 = chain
        base = abs([theta.n, theta.c][j])
        eps = cfg.eps_rel * base
        hi, lo = _clamped_pair(theta, j, eps, cfg.theta_min, cfg.theta_max)
        value = hi if sign > 0 else lo
        theta_j = _with_component(theta, j, value)
        chain_est = EstimatorState(theta_hat=theta_j, l_matrix=est.l_matrix,
                                   predictor_state=state0,
                                   q_conc_seed=seed0)
        g, state1, seed1 = predict_one_step(plant, chain_est, inputs_interval,
                                            inputs_at, theta_j, dt, substeps,
                                            stats)
        g1.append(g)
        new_chains.append((state1, seed1))
    psi = np.zeros(2)
    for j in range(2):
        base = abs([theta.n, theta.c][j])
        eps = cfg.eps_rel * base
        hi, lo = _clamped_pair(theta, j, eps, cfg.theta_min, cfg.theta_max)
        spread = hi - lo
        if spread > 0.0:
            psi[j] = (g1[2 * j] - g1[2 * j + 1]) / spread
    return psi, tuple(new_chains)


def _project(value, lo, hi):
    return lo if value < lo else hi if value > hi else value


def woodbury_update(l_prev, psi, lam):
    """Rank-one recursion for the inverse of the damped normal matrix.

    Exactly inverts H_N = lam * H_{N-1} + psi psi^T given L_{N-1} =
    H_{N-1}^{-1}; re-symmetrized against rounding drift.
    """
    lpsi = l_prev @ psi
    scale = lam + float(psi @ lpsi)
    if scale <= 0.0:
        raise EstimatorFault(
            f"innovation scale {scale:.6g} <= 0: inverse Hessian corrupted")
    l_new = (l_prev - np.outer(lpsi, lpsi) / scale) / lam
    return 0.5 * (l_new + l_new.T), scale


def _apply_ceiling(l_matrix, theta, cap_rel):
    """Clamp the inverse Hessian so no direction's relative std exceeds
    cap_rel (windup guard); keeps symmetry and positive definiteness."""
    scale = np.array([abs(theta.n), abs(theta.c)])
    l_rel = l_matrix / np.outer(scale, scale)
    evals, evecs = np.linalg.eigh(l_rel)
    cap = cap_rel * cap_rel
    if evals[-1] <= cap:
        return l_matrix
    evals = np.minimum(evals, cap)
    l_rel = (evecs * evals) @ evecs.T
    return l_rel * np.outer(scale, scale)


def rpem_update(est, g1_measured, psi, g1_pred, lam, cfg, post_state,
                post_seed, perturbed=None):
    """One forgetting-factor Gauss-Newton update; returns the new state.

    The inverse Hessian follows the rank-one downdate of the damped normal
    matrix (ceiling-guarded against windup); the parameter step is
    projected onto the admissible box; the carried predictor state advances
    to the nominal prediction's post-state.
    """
    eta = g1_measured - g1_pred
    l_new, scale = woodbury_update(est.l_matrix, psi, lam)
    if cfg.l_rel_ceiling is not None:
        l_new = _apply_ceiling(l_new, est.theta_hat, cfg.l_rel_ceiling)
    if cfg.check_spd:
        np.linalg.cholesky(l_new)   # raises LinAlgError if not SPD
    gain = l_new @ psi
    theta = est.theta_hat
    theta_new = FrothParameters(
        n=_project(theta.n + gain[0] * eta, cfg.theta_min.n, cfg.theta_max.n),
        c=_project(theta.c + gain[1] * eta, cfg.theta_min.c, cfg.theta_max.c))
    new_est = EstimatorState(theta_hat=theta_new, l_matrix=l_new,
                             predictor_state=post_state,
                             step_count=est.step_count + 1,
                             q_conc_seed=post_seed,
                             perturbed=perturbed)
    return new_est, UpdateDiagnostics(eta=eta, psi=psi, gain=gain,
                                      innovation_scale=scale)


@dataclass(frozen=True)
class OnlineResult:
    """Outputs of a recursive estimation run, aligned to sampling instants."""

    t: np.ndarray
    theta_hat: tuple             # FrothParameters per processed sample
    g1_pred: np.ndarray          # one-step predictions (nan when frozen)
    diagnostics: tuple           # UpdateDiagnostics per processed sample
    final: EstimatorState


def run_online(plant, records, input_schedule, cfg, theta0, l0=None,
               dt=1.0, substeps=10, stats=None, max_consecutive_faults=50):
    """Run the full recursion over a measurement stream.

    ``records[0]`` anchors the carried state (its own sample is not
    scored); every later record is predicted, differentiated and used for
    one update. On a simulation fault the sample is skipped with the
    estimate and carried state frozen; the run aborts after
    ``max_consecutive_faults`` consecutive skips.
    """
    if l0 is None:
        l0 = initial_l_matrix(theta0, cfg.l0_scale)
    anchor = records[0]
    est = EstimatorState(theta_hat=theta0, l_matrix=np.array(l0, dtype=float),
                         predictor_state=anchor.state,
                         q_conc_seed=anchor.algebraics.q_conc)
    if cfg.gradient_mode == "parallel":
        est = replace(est, perturbed=tuple(
            (anchor.state, anchor.algebraics.q_conc) for _ in _PERTURB))

    t_out, thetas, preds, diags = [], [], [], []
    consecutive = 0
    prev_t = anchor.t
    for rec in records[1:]:
        inputs_interval = input_schedule.at_time(prev_t)
        inputs_at = input_schedule.at_time(rec.t)
        try:
            g1_pred, post_state, post_seed = predict_one_step(
                plant, est, inputs_interval, inputs_at, est.theta_hat, dt,
                substeps, stats)
            if cfg.gradient_mode == "parallel":
                psi, new_chains = _parallel_gradient(
                    plant, est, inputs_interval, inputs_at, dt, substeps, cfg,
                    stats)
            else:
                psi = output_gradient(plant, est, inputs_interval, inputs_at,
                                      dt, substeps, cfg, stats)
                new_chains = None
        except SimulationFault as fault:
            consecutive += 1
            if consecutive >= max_consecutive_faults:
                raise EstimatorAbort(
                    f"{consecutive} consecutive frozen samples, last fault: "
                    f"{fault}") from fault
            diags.append(UpdateDiagnostics(
                eta=math.nan, psi=np.zeros(2), gain=np.zeros(2),
                innovation_scale=math.nan, fault=str(fault)))
            t_out.append(rec.t)
            thetas.append(est.theta_hat)
            preds.append(math.nan)
            prev_t = rec.t
            continue
        consecutive = 0
        est, diag = rpem_update(est, rec.g1_measured, psi, g1_pred,
                                cfg.forgetting, cfg, post_state, post_seed,
                                perturbed=new_chains)
        t_out.append(rec.t)
        thetas.append(est.theta_hat)
        preds.append(g1_pred)
        diags.append(diag)
        prev_t = rec.t
    return OnlineResult(t=np.array(t_out), theta_hat=tuple(thetas),
                        g1_pred=np.array(preds), diagnostics=tuple(diags),
                        final=est)


def run_constant(plant, records, input_schedule, theta, dt=1.0, substeps=10,
                 stats=None):
    """Chain one-step predictions with frozen parameters (baseline model)."""
    anchor = records[0]
    est = EstimatorState(theta_hat=theta, l_matrix=np.eye(2),
                         predictor_state=anchor.state,
                         q_conc_seed=anchor.algebraics.q_conc)
    preds = []
    prev_t = anchor.t
    for rec in records[1:]:
        g1_pred, post_state, post_seed = predict_one_step(
            plant, est, input_schedule.at_time(prev_t),
            input_schedule.at_time(rec.t), theta, dt, substeps, stats)
        est = replace(est, predictor_state=post_state, q_conc_seed=post_seed)
        preds.append(g1_pred)
        prev_t = rec.t
    return np.array(preds)


def _window_g1(plant, theta, initial_state, q_seed0, inputs_list, dt,
               substeps, stats=None):
    """Simulated grade series over a window from a fixed initial state."""
    state = initial_state
    q_seed = q_seed0
    out = np.empty(len(inputs_list))
    for k, inputs in enumerate(inputs_list):
        alg = solve_algebraic_loop(plant, state, inputs, theta,
                                   q_conc_seed=q_seed, stats=stats)
        out[k] = alg.g1
        q_seed = alg.q_conc
        if k + 1 < len(inputs_list):
            state, q_seed = advance_sample(plant, state, inputs, theta, dt,
                                           substeps, q_seed, stats)
    return out


class OfflineInitFault(Exception):
    """Offline initializer failed to converge; carries the best iterate."""

    def __init__(self, message, best):
        super().__init__(message)
        self.best = best


def offline_init(plant, records, input_schedule, theta_guess, cfg,
                 dt=1.0, substeps=10, max_iters=50, stats=None):
    """Batch prediction-error fit over a startup window (lambda = 1).

    Gauss-Newton with halving line search (at most 20 halvings); every
    candidate is evaluated by full re-simulation from the window's initial
    state. Terminates when the accepted relative step norm drops below
    1e-8; singular normal equations are ridge-regularized and iteration
    continues.
    """
    inputs_list = [input_schedule.at_time(r.t) for r in records]
    y = np.array([r.g1_measured for r in records])
    state0 = records[0].state
    seed0 = records[0].algebraics.q_conc

    def cost_and_series(theta):
        g = _window_g1(plant, theta, state0, seed0, inputs_list, dt, substeps,
                       stats)
        r = y - g
        return 0.5 * float(r @ r), r

    theta = theta_guess
    cost, resid = cost_and_series(theta)
    best = (theta, cost)
    rel_step = 0.0

    for _ in range(max_iters):
        jac = np.empty((len(y), 2))
        for j in range(2):
            base = abs([theta.n, theta.c][j])
            eps = cfg.eps_rel * base
            hi, lo = _clamped_pair(theta, j, eps, cfg.theta_min,
                                   cfg.theta_max)
            spread = hi - lo
            if spread <= 0.0:
                jac[:, j] = 0.0
                continue
            g_hi = _window_g1(plant, _with_component(theta, j, hi), state0,
                              seed0, inputs_list, dt, substeps, stats)
            g_lo = _window_g1(plant, _with_component(theta, j, lo), state0,
                              seed0, inputs_list, dt, substeps, stats)
            jac[:, j] = (g_hi - g_lo) / spread
        normal = jac.T @ jac
        rhs = jac.T @ resid
        try:
            delta = np.linalg.solve(normal, rhs)
            if not np.all(np.isfinite(delta)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            delta = np.linalg.solve(normal + 1e-10 * np.eye(2), rhs)

        step = 1.0
        accepted = False
        for _ in range(21):   # full step plus at most 20 halvings
            cand = FrothParameters(
                n=_project(theta.n + step * delta[0], cfg.theta_min.n,
                           cfg.theta_max.n),
                c=_project(theta.c + step * delta[1], cfg.theta_min.c,
                           cfg.theta_max.c))
            cand_cost, cand_resid = cost_and_series(cand)
            if cand_cost < cost:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # Descent exhausted at numerical resolution: current iterate is
            # the minimizer at this noise floor.
            return best[0]
        rel_step = math.hypot((cand.n - theta.n) / max(abs(theta.n), 1e-300),
                              (cand.c - theta.c) / max(abs(theta.c), 1e-300))
        theta, cost, resid = cand, cand_cost, cand_resid
        if cost < best[1]:
            best = (theta, cost)
        if rel_step < 1e-8:
            return theta
    # Iteration cap reached; fault only if the fit was clearly still moving.
    if rel_step > 1e-6:
        raise OfflineInitFault(
            f"no convergence in {max_iters} iterations "
            f"(last relative step {rel_step:.3g})", best=best[0])
    return best[0]
