"""Sparse LP core and the risk-aware outer loop.

The LP solver is a Mehrotra predictor-corrector interior-point method on
the homogeneous self-dual embedding (min c'x s.t. Ax = b, x >= 0, with
free variables handled by splitting).  Primal-dual residuals and the
relative duality gap are tracked per iteration and reported first-class;
infeasibility and unboundedness are detected from the embedding variables.

On top of it sit the two optimizers over the forward-equation polytope:
a direct solve for risks linear in the terminal measure, and a
conditional-gradient (Frank-Wolfe) loop for smooth nonlinear risks, plus
extraction of the time-state-cost Markov policy from an optimal measure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AssemblyError, InvalidParameterError, RiskflowError
from .forward import (DiscreteDistribution, ForwardProgram,
                      TrajectoryDistribution)
from .risk import RiskSpec, apply_terminal_cost, evaluate, gradient_at_values

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 200
MASS_FLOOR = 1e-12
STEP_SCALE = 0.99995  # fraction of the distance to the boundary taken per step


class LpFailureError(RiskflowError):
    """The LP terminated without a usable optimum."""

    def __init__(self, status: str, message: str = ""):
        super().__init__(message or f"linear program terminated with status {status!r}")
        self.status = status


@dataclass(frozen=True)
class LpProblem:
    """min c'x subject to A x = b, with x_i >= 0 where nonneg[i]."""

    a_eq: sp.csr_matrix
    b_eq: np.ndarray
    c: np.ndarray
    nonneg: Optional[np.ndarray] = None  # default: all nonnegative

    def __post_init__(self):
        m, n = self.a_eq.shape
        if self.b_eq.shape != (m,) or self.c.shape != (n,):
            raise AssemblyError(
                f"LP dimensions disagree: A is {self.a_eq.shape}, "
                f"b is {self.b_eq.shape}, c is {self.c.shape}")
        if np.diff(self.a_eq.indptr).min() < 1:
            raise AssemblyError("every constraint row needs at least one nonzero")


@dataclass(frozen=True)
class LpSolution:
    primal: np.ndarray
    dual: np.ndarray
    primal_objective: float
    dual_objective: float
    duality_gap: float  # |primal - dual| / max(1, |primal|)
    iterations: int
    status: str  # optimal | infeasible | unbounded | max_iter | failed
    history: tuple = ()


def _factorize(m_mat: sp.spmatrix):
    size = m_mat.shape[0]
    if size <= 400:
        cf = scipy.linalg.cho_factor(m_mat.toarray())
        return lambda r: scipy.linalg.cho_solve(cf, r)
    lu = spla.splu(m_mat.tocsc(), permc_spec="COLAMD")
    return lu.solve


def _normal_solver(a_csr, a_t_csr, d_vec):
    """Factor A diag(d) A' with escalating regularization on breakdown."""
    scaled = a_csr.copy()
    scaled.data = scaled.data * d_vec[a_csr.indices]
    m_mat = (scaled @ a_t_csr).tocsc()
    reg = 0.0
    base = abs(m_mat.diagonal()).mean() or 1.0
    for _ in range(4):
        try:
            mat = m_mat if reg == 0.0 else m_mat + reg * sp.identity(m_mat.shape[0], format="csc")
            return _factorize(mat)
        except (RuntimeError, ValueError, np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            reg = base * 1e-12 if reg == 0.0 else reg * 1e4
    raise LpFailureError("failed", "normal-equation factorization failed")


def _max_step(vals, dirs):
    neg = dirs < 0
    if not neg.any():
        return np.inf
    return float(np.min(-vals[neg] / dirs[neg]))


def _ip_hsd(a_csr, b, c, tol, max_iter):
    """Predictor-corrector path following on the self-dual embedding."""
    m, n = a_csr.shape
    a_t = a_csr.T.tocsr()
    x = np.ones(n)
    y = np.zeros(m)
    z = np.ones(n)
    tau, kappa = 1.0, 1.0
    norm_b, norm_c = np.linalg.norm(b), np.linalg.norm(c)
    status = "max_iter"
    history = []
    iteration = 0

    def scaled_report():
        xs, ys, zs = x / tau, y / tau, z / tau
        pobj = float(c @ xs)
        dobj = float(b @ ys)
        rho_p = np.linalg.norm(a_csr @ xs - b) / (1.0 + norm_b)
        rho_d = np.linalg.norm(a_t @ ys + zs - c) / (1.0 + norm_c)
        rho_g = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
        return xs, ys, zs, pobj, dobj, rho_p, rho_d, rho_g

    while True:
        r_p = b * tau - a_csr @ x
        r_d = c * tau - a_t @ y - z
        r_g = float(c @ x - b @ y + kappa)
        mu = (x @ z + tau * kappa) / (n + 1)

        xs, ys, zs, pobj, dobj, rho_p, rho_d, rho_g = scaled_report()
        history.append((pobj, dobj, rho_p, rho_d, rho_g, mu))
        if rho_p <= tol and rho_d <= tol and rho_g <= tol:
            status = "optimal"
            break
        # infeasibility / unboundedness via the embedding scale collapsing
        hp = np.linalg.norm(r_p) / max(1.0, norm_b)
        hd = np.linalg.norm(r_d) / max(1.0, norm_c)
        hg = abs(r_g) / max(1.0, norm_b + norm_c)
        if ((hp <= tol and hd <= tol and hg <= tol and tau <= tol * max(1.0, kappa))
                or (mu <= tol * max(1.0, kappa) and tau <= tol * min(1.0, kappa))):
            status = "infeasible" if b @ y > tol else "unbounded"
            break
        if iteration >= max_iter:
            status = "max_iter"
            break
        iteration += 1

        d_vec = x / z
        try:
            solve_normal = _normal_solver(a_csr, a_t, d_vec)
        except LpFailureError:
            status = "failed"
            break

        def sym_solve(r1, r2):
            rhs = r2 + a_csr @ (d_vec * r1)
            v = solve_normal(rhs)
            u = d_vec * (a_t @ v - r1)
            return u, v

        def direction(eta, rxs, rtk):
            u, v = sym_solve(eta * r_d - rxs / x, eta * r_p)
            d_tau = ((eta * r_g + rtk / tau - (-c @ u + b @ v))
                     / (kappa / tau + (-c @ p_vec + b @ q_vec)))
            d_x = u + p_vec * d_tau
            d_y = v + q_vec * d_tau
            d_z = (rxs - z * d_x) / x
            d_kappa = (rtk - kappa * d_tau) / tau
            return d_x, d_y, d_z, d_tau, d_kappa

        p_vec, q_vec = sym_solve(c, b)
        # predictor (affine scaling)
        aff = direction(1.0, -x * z, -tau * kappa)
        if not all(np.all(np.isfinite(np.atleast_1d(d))) for d in aff):
            status = "failed"
            break
        dxa, dya, dza, dta, dka = aff
        alpha_aff = min(1.0, _max_step(x, dxa), _max_step(z, dza),
                        _max_step(np.array([tau]), np.array([dta])),
                        _max_step(np.array([kappa]), np.array([dka])))
        mu_aff = (((x + alpha_aff * dxa) @ (z + alpha_aff * dza)
                   + (tau + alpha_aff * dta) * (kappa + alpha_aff * dka)) / (n + 1))
        gamma = min(1.0, max(0.0, (mu_aff / mu) ** 3))
        # corrector
        rxs = gamma * mu - x * z - dxa * dza
        rtk = gamma * mu - tau * kappa - dta * dka
        d_x, d_y, d_z, d_tau, d_kappa = direction(1.0 - gamma, rxs, rtk)
        if not np.all(np.isfinite(d_x)) or not math.isfinite(d_tau):
            status = "failed"
            break
        alpha = STEP_SCALE * min(1.0 / STEP_SCALE, _max_step(x, d_x), _max_step(z, d_z),
                                 _max_step(np.array([tau]), np.array([d_tau])),
                                 _max_step(np.array([kappa]), np.array([d_kappa])))
        x = x + alpha * d_x
        y = y + alpha * d_y
        z = z + alpha * d_z
        tau = tau + alpha * d_tau
        kappa = kappa + alpha * d_kappa

    xs, ys, zs, pobj, dobj, _, _, _ = scaled_report()
    gap = abs(pobj - dobj) / max(1.0, abs(pobj))
    return LpSolution(primal=xs, dual=ys, primal_objective=pobj, dual_objective=dobj,
                      duality_gap=gap, iterations=iteration, status=status,
                      history=tuple(history))


def solve_lp(problem: LpProblem, tol_gap: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER) -> LpSolution:
    """Solve the LP; deterministic for identical inputs.

    ``status == "optimal"`` certifies relative primal/dual residuals and
    duality gap at or below ``tol_gap``.
    """
    a = problem.a_eq.tocsr()
    c = np.asarray(problem.c, dtype=float)
    b = np.asarray(problem.b_eq, dtype=float)
    nonneg = (np.ones(a.shape[1], dtype=bool) if problem.nonneg is None
              else np.asarray(problem.nonneg, dtype=bool))
    free = np.flatnonzero(~nonneg)
    if free.size:
        a_split = sp.hstack([a, -a[:, free]], format="csr")
        c_split = np.concatenate([c, -c[free]])
        sol = _ip_hsd(a_split, b, c_split, tol_gap, max_iter)
        primal = sol.primal[:a.shape[1]].copy()
        primal[free] -= sol.primal[a.shape[1]:]
        return LpSolution(primal=primal, dual=sol.dual,
                          primal_objective=sol.primal_objective,
                          dual_objective=sol.dual_objective,
                          duality_gap=sol.duality_gap, iterations=sol.iterations,
                          status=sol.status, history=sol.history)
    return _ip_hsd(a, b, c, tol_gap, max_iter)


# ---------------------------------------------------------------------------
# Markov policies


@dataclass(frozen=True)
class MarkovPolicy:
    """Distribution over actions for every (time, state, cost) cell.

    ``probs[k, x, y, a]`` is the conditional action probability at time
    slice ``k``; ``mask[k, x, y]`` is False where the cell carried no mass
    and the uniform fallback was substituted.  The propagation step from
    ``t_k`` to ``t_{k+1}`` reads slice ``k + 1`` (controls sit on the new
    slice), so slice 0 never influences the dynamics.
    """

    probs: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.probs.ndim != 4 or self.mask.shape != self.probs.shape[:3]:
            raise InvalidParameterError("policy arrays have inconsistent shapes")

    def validate(self, tol: float = 1e-10) -> "MarkovPolicy":
        dev = np.abs(self.probs.sum(axis=-1) - 1.0).max()
        if dev > tol:
            raise InvalidParameterError(f"conditional action mass off by {dev}")
        return self

    @classmethod
    def uniform(cls, n_t: int, n_x: int, n_y: int, n_a: int) -> "MarkovPolicy":
        return cls(probs=np.full((n_t, n_x, n_y, n_a), 1.0 / n_a),
                   mask=np.ones((n_t, n_x, n_y), dtype=bool))

    @classmethod
    def from_actions(cls, actions: np.ndarray, n_a: int) -> "MarkovPolicy":
        """Deterministic policy from an integer table ``actions[k, x, y]``."""
        actions = np.asarray(actions)
        probs = np.zeros(actions.shape + (n_a,))
        np.put_along_axis(probs, actions[..., None], 1.0, axis=-1)
        return cls(probs=probs, mask=np.ones(actions.shape, dtype=bool))

    def strictness(self, threshold: float = 0.99) -> float:
        """Fraction of reachable cells putting >= threshold on one action."""
        peak = self.probs.max(axis=-1)
        reach = self.mask
        if not reach.any():
            return 1.0
        return float((peak[reach] >= threshold).mean())


def extract_policy(traj: TrajectoryDistribution, mass_floor: float = MASS_FLOOR) -> MarkovPolicy:
    """Conditional action distributions of a joint (x, y, a) trajectory.

    Cells whose total mass is at or below ``mass_floor`` get the uniform
    fallback and are excluded from the reachability mask.
    """
    if traj.slices[0].axes != ("x", "y", "a"):
        raise InvalidParameterError(
            f"need slices over (x, y, a), got {traj.slices[0].axes}")
    n_t = traj.n_t
    n_x, n_y, n_a = traj.slices[0].mass.shape
    probs = np.full((n_t, n_x, n_y, n_a), 1.0 / n_a)
    mask = np.zeros((n_t, n_x, n_y), dtype=bool)
    for k, sl in enumerate(traj.slices):
        cell = np.maximum(sl.mass, 0.0)
        tot = cell.sum(axis=-1)
        hit = tot > mass_floor
        mask[k] = hit
        probs[k][hit] = cell[hit] / tot[hit][..., None]
    return MarkovPolicy(probs=probs, mask=mask)


# ---------------------------------------------------------------------------
# Risk-aware optimization over the forward-equation polytope


@dataclass
class SolveReport:
    """Optimal value plus the certificates and diagnostics around it."""

    rho_star: float
    duality_gap: float
    iterations: int
    status: str
    stationarity_w1: float
    boundary_mass: float
    strictness_fraction: float
    mass_deviation_max: float
    min_mass: float
    terminal_cost_mean: float = float("nan")
    rho_linear: Optional[float] = None
    fw_iterations: Optional[int] = None
    fw_gap: Optional[float] = None
    policy: Optional[MarkovPolicy] = None
    trajectory: Optional[TrajectoryDistribution] = None
    lp: Optional[LpSolution] = None

    def to_json_dict(self) -> dict:
        out = {
            "rho_star": self.rho_star,
            "duality_gap": self.duality_gap,
            "iterations": self.iterations,
            "stationarity_w1": self.stationarity_w1,
            "boundary_mass": self.boundary_mass,
            "strictness_fraction": self.strictness_fraction,
            "status": self.status,
            "mass_deviation_max": self.mass_deviation_max,
            "min_mass": self.min_mass,
            "terminal_cost_mean": self.terminal_cost_mean,
        }
        if self.rho_linear is not None:
            out["rho_linear"] = self.rho_linear
        if self.fw_iterations is not None:
            out["fw_iterations"] = self.fw_iterations
            out["fw_gap"] = self.fw_gap
        return out


def _terminal_values(fp: ForwardProgram, v: Optional[np.ndarray]) -> np.ndarray:
    """Total-cost values y + v(x) on the (x, y) grid."""
    theta = np.broadcast_to(fp.y_values, (fp.n_x, fp.n_y)).copy()
    if v is not None:
        v = np.asarray(v, dtype=float)
        if v.shape != (fp.n_x,):
            raise InvalidParameterError(f"terminal cost shape {v.shape} != ({fp.n_x},)")
        theta = theta + v[:, None]
    return theta


def _report_from_solution(fp, sol, rho_star, rho_linear, spec, mass_floor,
                          fw_iterations=None, fw_gap=None, extra_iters=0):
    from .validate import wasserstein1  # deferred: validate pulls in solve_lp

    traj = fp.trajectory_from_solution(sol.primal)
    policy = extract_policy(traj, mass_floor=mass_floor)
    y_last = traj.slices[-1].marginal("y")
    y_prev = traj.slices[-2].marginal("y")
    return SolveReport(
        rho_star=rho_star,
        duality_gap=sol.duality_gap,
        iterations=sol.iterations + extra_iters,
        status=sol.status,
        stationarity_w1=wasserstein1(y_last, y_prev),
        boundary_mass=float(y_last.mass[-1]),
        strictness_fraction=policy.strictness(),
        mass_deviation_max=float(traj.mass_deviation.max()),
        min_mass=traj.min_mass,
        terminal_cost_mean=y_last.mean(),
        rho_linear=rho_linear,
        fw_iterations=fw_iterations,
        fw_gap=fw_gap,
        policy=policy,
        trajectory=traj,
        lp=sol,
    )


def optimize_linear_risk(fp: ForwardProgram, spec: RiskSpec,
                         v: Optional[np.ndarray] = None,
                         tol_gap: float = DEFAULT_TOL,
                         max_iter: int = DEFAULT_MAX_ITER,
                         mass_floor: float = MASS_FLOOR) -> SolveReport:
    """Minimize a measure-linear risk of the terminal cost distribution.

    The objective places the risk coefficients (``y + v(x)`` for the
    expectation, ``exp(theta (y + v(x)))`` for the exponential form) on the
    terminal-slice variables.  For the exponential form the reported
    ``rho_star`` is the log-form value ``log(optimum) / theta``; the raw
    linear optimum is kept in ``rho_linear``.
    """
    if not spec.is_linear:
        raise InvalidParameterError(
            f"optimize_linear_risk needs a measure-linear risk, got {spec.kind!r}")
    theta_vals = _terminal_values(fp, v)
    entropic = spec.kind == "entropic_linear" and spec.theta > 0
    weights = np.exp(spec.theta * theta_vals) if entropic else theta_vals
    lp = LpProblem(a_eq=fp.a_eq, b_eq=fp.b_eq, c=fp.terminal_objective(weights))
    sol = solve_lp(lp, tol_gap=tol_gap, max_iter=max_iter)
    if sol.status in ("infeasible", "unbounded", "failed"):
        # a valid initial distribution always yields a nonempty polytope
        raise LpFailureError(sol.status, f"forward program reported {sol.status}")
    rho_linear = sol.primal_objective
    rho_star = math.log(rho_linear) / spec.theta if entropic else rho_linear
    return _report_from_solution(fp, sol, rho_star, rho_linear if entropic else None,
                                 spec, mass_floor)


def optimize_smooth_risk(fp: ForwardProgram, spec: RiskSpec,
                         v: Optional[np.ndarray] = None,
                         max_fw_iter: int = 50, tol: float = 1e-8,
                         tol_gap: float = DEFAULT_TOL,
                         max_iter: int = DEFAULT_MAX_ITER,
                         mass_floor: float = MASS_FLOOR) -> SolveReport:
    """Conditional-gradient minimization of a smooth risk over the polytope.

    Each round linearizes the risk at the current terminal cost
    distribution, calls the LP for the descent vertex, and mixes with step
    ``2 / (k + 2)``; it stops when the Frank-Wolfe gap drops to ``tol``.
    The best iterate seen is returned (the risk surface need not be convex
    in the measure).
    """
    theta_vals = _terminal_values(fp, v)

    def terminal_dist(vec):
        cube = vec.reshape(fp.n_t, fp.n_x, fp.n_y, fp.n_a)[-1]
        total = cube.sum()
        joint = DiscreteDistribution(
            axes=("x", "y"), coords=(fp.x_values, fp.y_values),
            mass=np.maximum(cube.sum(axis=-1), 0.0) / (total if total > 0 else 1.0))
        return apply_terminal_cost(joint, v if v is not None
                                   else np.zeros(fp.n_x))

    # start from the vertex optimal for the plain expectation
    init = LpProblem(a_eq=fp.a_eq, b_eq=fp.b_eq, c=fp.terminal_objective(theta_vals))
    sol = solve_lp(init, tol_gap=tol_gap, max_iter=max_iter)
    if sol.status in ("infeasible", "unbounded", "failed"):
        raise LpFailureError(sol.status, f"forward program reported {sol.status}")
    mu = sol.primal
    total_iters = sol.iterations
    best_val, best_mu = math.inf, mu
    gap = math.inf
    steps = 0
    for fw_iter in range(1, max_fw_iter + 1):
        dist = terminal_dist(mu)
        val = evaluate(spec, dist)
        if val < best_val:
            best_val, best_mu = val, mu
        grad_xy = gradient_at_values(spec, dist, theta_vals)
        c_vec = fp.terminal_objective(grad_xy)
        sol = solve_lp(LpProblem(a_eq=fp.a_eq, b_eq=fp.b_eq, c=c_vec),
                       tol_gap=tol_gap, max_iter=max_iter)
        total_iters += sol.iterations
        if sol.status in ("infeasible", "unbounded", "failed"):
            raise LpFailureError(sol.status, f"forward program reported {sol.status}")
        gap = float(c_vec @ (mu - sol.primal))
        steps = fw_iter
        if gap <= tol:
            break
        step = 2.0 / ((fw_iter - 1) + 2.0)
        mu = (1.0 - step) * mu + step * sol.primal
    final = evaluate(spec, terminal_dist(mu))
    if final < best_val:
        best_val, best_mu = final, mu
    sol_best = LpSolution(primal=best_mu, dual=sol.dual,
                          primal_objective=best_val, dual_objective=sol.dual_objective,
                          duality_gap=sol.duality_gap, iterations=total_iters,
                          status=sol.status)
    return _report_from_solution(fp, sol_best, best_val, None, spec, mass_floor,
                                 fw_iterations=steps, fw_gap=gap)
