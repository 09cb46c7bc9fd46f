"""Independent oracles: Monte Carlo simulation of the controlled chain,
distribution distances, a risk-neutral dynamic-programming sweep, and
brute-force policy enumeration for desk-size instances."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidParameterError, PolicyEnumerationError
from .forward import DiscreteDistribution, propagate_forward
from .generator import ControlledGenerator, augment_generator, discount_factor
from .grids import UniformGrid
from .risk import RiskSpec, apply_terminal_cost, evaluate
from .solve import MarkovPolicy


# ---------------------------------------------------------------------------
# Monte Carlo simulation


@dataclass(frozen=True)
class McConfig:
    """Path count, seed, and horizon for chain simulation.

    Identical (config, inputs) give bitwise-identical samples: all paths are
    advanced in vectorized lockstep rounds drawing from a single seeded
    PCG64 stream, one block of draws per round.
    """

    n_paths: int
    seed: int = 0
    horizon: Optional[float] = None  # defaults to the end of the time grid

    def __post_init__(self):
        if self.n_paths < 1:
            raise InvalidParameterError(f"need at least one path, got {self.n_paths}")


@dataclass(frozen=True)
class McResult:
    samples: np.ndarray      # terminal discounted costs, never clamped
    occupancy: np.ndarray    # time-weighted state occupancy, normalized
    stderr: float            # standard error of the sample mean
    fallback_lookups: int    # policy lookups that hit a masked cell

    @property
    def mean(self) -> float:
        return float(self.samples.mean())


def _jump_tables(gen: ControlledGenerator):
    """Exit rates and padded cumulative jump distributions per (action, state)."""
    n_x, n_a = gen.dim, gen.n_actions
    exit_rate = np.zeros((n_a, n_x))
    support = []
    width = 1
    for a in range(n_a):
        m = gen.per_action[a].matrix.tocoo()
        rows = [[] for _ in range(n_x)]
        for i, j, r in zip(m.row, m.col, m.data):
            if i != j and r > 0:
                rows[i].append((j, r))
        support.append(rows)
        exit_rate[a] = -gen.per_action[a].matrix.diagonal()
        width = max(width, max((len(r) for r in rows), default=1))
    targets = np.zeros((n_a, n_x, width), dtype=np.int64)
    cumprob = np.ones((n_a, n_x, width))
    for a in range(n_a):
        for i, row in enumerate(support[a]):
            targets[a, i, :] = i
            if not row:
                continue
            js, rs = zip(*row)
            probs = np.asarray(rs) / exit_rate[a, i]
            targets[a, i, :len(js)] = js
            targets[a, i, len(js):] = js[-1]
            cumprob[a, i, :len(js)] = np.cumsum(probs)
            cumprob[a, i, len(js):] = 1.0
    return exit_rate, targets, cumprob


def simulate_paths(gen: ControlledGenerator, policy: MarkovPolicy, cost_rate,
                   alpha: float, y_grid: UniformGrid, initial_x: np.ndarray,
                   t_grid: Union[UniformGrid, np.ndarray], cfg: McConfig) -> McResult:
    """Simulate the controlled chain with exponential clocks, exact in time.

    The policy is piecewise constant on the time grid (the step from t_k
    to t_{k+1} reads slice k+1, matching the forward propagation); actions
    are resampled at jump times and at grid boundaries.  Running costs are
    integrated in closed form between events; the accumulated cost is
    snapped to the cost grid only for policy lookups, never in the returned
    samples.
    """
    if alpha < 0:
        raise InvalidParameterError(f"discount rate must be nonnegative, got {alpha}")
    times = t_grid.points if isinstance(t_grid, UniformGrid) else np.asarray(t_grid, float)
    if cfg.horizon is not None:
        times = times[times <= cfg.horizon + 1e-15]
    n_x, n_a = gen.dim, gen.n_actions
    c = np.asarray(cost_rate, dtype=float)
    nu = np.asarray(initial_x, dtype=float)
    exit_rate, targets, cumprob = _jump_tables(gen)
    pol_cum = np.cumsum(policy.probs, axis=-1)
    n_y = policy.probs.shape[2]

    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_paths
    x = rng.choice(n_x, size=n, p=nu / nu.sum())
    y = np.zeros(n)
    occupancy = np.zeros(n_x)
    fallback = 0

    def snap(yv):
        return np.clip(np.rint((yv - y_grid.lo) / y_grid.spacing), 0, n_y - 1).astype(np.int64)

    def accrue(rate, t0, t1):
        if alpha == 0.0:
            return rate * (t1 - t0)
        return rate * (np.exp(-alpha * t0) - np.exp(-alpha * t1)) / alpha

    t_cur = np.zeros(n)
    for k in range(len(times) - 1):
        t_hi = times[k + 1]
        pol_slice = min(k + 1, policy.probs.shape[0] - 1)
        active = np.arange(n)
        while active.size:
            xs = x[active]
            ys = snap(y[active])
            fallback += int((~policy.mask[pol_slice, xs, ys]).sum())
            u = rng.random(active.size)
            acts = (u[:, None] > pol_cum[pol_slice, xs, ys]).sum(axis=1)
            rates = exit_rate[acts, xs]
            with np.errstate(divide="ignore"):
                wait = np.where(rates > 0, rng.standard_exponential(active.size) / np.maximum(rates, 1e-300), np.inf)
            t_event = t_cur[active] + wait
            t_new = np.minimum(t_event, t_hi)
            y[active] += accrue(c[xs, acts], t_cur[active], t_new)
            np.add.at(occupancy, xs, t_new - t_cur[active])
            t_cur[active] = t_new
            jumped = t_event < t_hi
            if jumped.any():
                sub = active[jumped]
                u2 = rng.random(sub.size)
                sel = (u2[:, None] > cumprob[acts[jumped], x[sub]]).sum(axis=1)
                x[sub] = targets[acts[jumped], x[sub], sel]
            active = active[jumped]
    stderr = float(y.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return McResult(samples=y, occupancy=occupancy / occupancy.sum(),
                    stderr=stderr, fallback_lookups=fallback)


# ---------------------------------------------------------------------------
# Distribution distances


def wasserstein1(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """Exact 1-Wasserstein distance between discrete laws on the line."""
    vp, mp = p.values_1d()
    vq, mq = q.values_1d()
    v = np.concatenate([vp, vq])
    w = np.concatenate([mp, -mq])
    order = np.argsort(v, kind="stable")
    v, w = v[order], w[order]
    if len(v) < 2:
        return 0.0
    cdf_diff = np.cumsum(w)[:-1]
    return float(np.abs(cdf_diff) @ np.diff(v))


def _merge_support(p: DiscreteDistribution, q: DiscreteDistribution, tol=1e-12):
    vp, mp = p.values_1d()
    vq, mq = q.values_1d()
    v = np.concatenate([vp, vq])
    w = np.concatenate([mp, -mq])
    order = np.argsort(v, kind="stable")
    v, w = v[order], w[order]
    sup, wt = [v[0]], [w[0]]
    for vi, wi in zip(v[1:], w[1:]):
        if vi - sup[-1] <= tol:
            wt[-1] += wi
        else:
            sup.append(vi)
            wt.append(wi)
    return np.array(sup), np.array(wt)


def bounded_lipschitz_distance(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """sup of integral differences over f with sup-norm + Lipschitz-norm <= 1.

    Solved as a small LP over function values on the merged support: bound
    |f_i| by a sup variable, bound adjacent increments by a Lipschitz
    variable times the gap, and cap their sum at one.
    """
    from .solve import LpProblem, solve_lp  # deferred: solve imports this module

    sup, wt = _merge_support(p, q)
    n = len(sup)
    if np.abs(wt).max() < 1e-15:
        return 0.0
    gaps = np.diff(sup)
    # columns: f (n, free) | s | l | slacks (4n - 1 of them)
    n_slack = 2 * n + 2 * (n - 1) + 1
    n_cols = n + 2 + n_slack
    rows, cols, data, b = [], [], [], []

    def add_row(entries, rhs):
        r = len(b)
        for col, val in entries:
            rows.append(r)
            cols.append(col)
            data.append(val)
        b.append(rhs)

    s_col, l_col = n, n + 1
    slack = n + 2
    for i in range(n):  # f_i <= s and -f_i <= s
        add_row([(i, 1.0), (s_col, -1.0), (slack, 1.0)], 0.0)
        slack += 1
        add_row([(i, -1.0), (s_col, -1.0), (slack, 1.0)], 0.0)
        slack += 1
    for i in range(n - 1):  # |f_{i+1} - f_i| <= l * gap_i
        add_row([(i + 1, 1.0), (i, -1.0), (l_col, -gaps[i]), (slack, 1.0)], 0.0)
        slack += 1
        add_row([(i + 1, -1.0), (i, 1.0), (l_col, -gaps[i]), (slack, 1.0)], 0.0)
        slack += 1
    add_row([(s_col, 1.0), (l_col, 1.0), (slack, 1.0)], 1.0)
    a_eq = sp.csr_matrix((data, (rows, cols)), shape=(len(b), n_cols))
    c = np.zeros(n_cols)
    c[:n] = -wt  # maximize wt . f
    nonneg = np.ones(n_cols, dtype=bool)
    nonneg[:n] = False
    sol = solve_lp(LpProblem(a_eq=a_eq, b_eq=np.array(b), c=c, nonneg=nonneg))
    return float(-sol.primal_objective)


# ---------------------------------------------------------------------------
# Risk-neutral dynamic programming


@dataclass(frozen=True)
class DpResult:
    value: float
    values: np.ndarray   # (n_t, n_x) state values per time slice
    actions: np.ndarray  # (n_t - 1, n_x) greedy action index for each step

    def greedy_policy(self, n_y: int, n_a: int) -> MarkovPolicy:
        """Lift the greedy actions to a cost-independent Markov policy."""
        n_t = self.values.shape[0]
        table = np.zeros((n_t, self.actions.shape[1], n_y), dtype=np.int64)
        for k in range(n_t - 1):  # step k feeds slice k + 1
            table[k + 1] = self.actions[k][:, None]
        return MarkovPolicy.from_actions(table, n_a)


def risk_neutral_dp(gen: ControlledGenerator, cost_rate, alpha: float,
                    t_grid: Union[UniformGrid, np.ndarray], initial_x,
                    v: Optional[np.ndarray] = None) -> DpResult:
    """Backward value sweep for the expected discounted cost.

    Uses the same implicit-Euler resolvent and step-averaged discount as
    the forward module, with the stage cost inside the resolvent, so the
    value matches the forward program exactly for a frozen action field.
    """
    times = t_grid.points if isinstance(t_grid, UniformGrid) else np.asarray(t_grid, float)
    n_t = len(times)
    n_x, n_a = gen.dim, gen.n_actions
    c = np.asarray(cost_rate, dtype=float)
    nu = np.asarray(initial_x, dtype=float)
    values = np.zeros((n_t, n_x))
    values[-1] = 0.0 if v is None else np.asarray(v, dtype=float)
    actions = np.zeros((n_t - 1, n_x), dtype=np.int64)
    eye = sp.identity(n_x, format="csc")
    for k in range(n_t - 2, -1, -1):
        dt = float(times[k + 1] - times[k])
        disc = discount_factor(alpha, times[k], step=dt)
        cand = np.empty((n_a, n_x))
        for a in range(n_a):
            system = (eye - dt * gen.per_action[a].matrix).tocsc()
            cand[a] = spla.spsolve(system, dt * disc * c[:, a] + values[k + 1])
        actions[k] = cand.argmin(axis=0)
        values[k] = cand.min(axis=0)
    return DpResult(value=float(nu @ values[0]), values=values, actions=actions)


# ---------------------------------------------------------------------------
# Brute-force policy enumeration


@dataclass(frozen=True)
class EnumerationResult:
    value: float
    policy: MarkovPolicy
    n_policies: int


def enumerate_policies(gen: ControlledGenerator, cost_rate, alpha: float,
                       y_grid: UniformGrid, t_grid: Union[UniformGrid, np.ndarray],
                       initial_x, spec: RiskSpec, v: Optional[np.ndarray] = None,
                       max_policies: int = 10 ** 6) -> EnumerationResult:
    """Exhaustive minimum over deterministic (time, state, cost) -> action maps.

    Only the slices that drive the dynamics are enumerated (the step from
    t_k to t_{k+1} reads slice k+1, so slice 0 is irrelevant); the policy
    space size is n_a ** ((n_t - 1) * n_x * n_y).
    """
    times = t_grid.points if isinstance(t_grid, UniformGrid) else np.asarray(t_grid, float)
    n_t = len(times)
    n_x, n_a, n_y = gen.dim, gen.n_actions, y_grid.n
    cells = (n_t - 1) * n_x * n_y
    count = n_a ** cells
    if count > max_policies:
        raise PolicyEnumerationError(
            f"{count} deterministic policies exceed the cap of {max_policies}")
    nu = np.asarray(initial_x, dtype=float)
    initial_xy = DiscreteDistribution(
        axes=("x", "y"),
        coords=(gen.state_grid.points if gen.state_grid is not None
                else np.arange(n_x, dtype=float), y_grid.points),
        mass=np.outer(nu, np.eye(n_y)[0]))
    aug = augment_generator(gen, cost_rate, alpha, y_grid, t=float(times[0]))
    best_val, best_pol = math.inf, None
    v_table = None if v is None else np.asarray(v, dtype=float)
    for assignment in itertools.product(range(n_a), repeat=cells):
        table = np.zeros((n_t, n_x, n_y), dtype=np.int64)
        table[1:] = np.reshape(assignment, (n_t - 1, n_x, n_y))
        pol = MarkovPolicy.from_actions(table, n_a)
        traj = propagate_forward(aug, pol, initial_xy, times)
        if v_table is None:
            dist = traj.slices[-1].marginal("y")
        else:
            dist = apply_terminal_cost(traj.slices[-1], v_table)
        val = evaluate(spec, dist)
        if val < best_val:
            best_val, best_pol = val, pol
    return EnumerationResult(value=best_val, policy=best_pol, n_policies=count)
