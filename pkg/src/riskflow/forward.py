"""Time discretization of the forward (Fokker-Planck / master) equation.

Two consumers share the same implicit-Euler scheme: ``propagate_forward``
pushes a distribution through time under a fixed policy, and
``assemble_forward_program`` emits the whole evolution as sparse equality
constraints over time-indexed joint measures ``mu_k(x, y, a)`` for the
optimizer.  Controls are attached to the new time slice: the step from
``t_k`` to ``t_{k+1}`` mixes actions with the policy (or measure) at slice
``k + 1`` and evaluates the generator at the left endpoint ``t_k``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AssemblyError, InvalidParameterError, PropagationError
from .generator import AugmentedGenerator
from .grids import UniformGrid

MASS_SUM_TOL = 1e-10
MASS_FLOOR = -1e-12


@dataclass(frozen=True)
class DiscreteDistribution:
    """Nonnegative mass on a labeled product grid, summing to one.

    ``mass`` has one dimension per axis; ``coords[i]`` holds the grid
    values along ``axes[i]``.
    """

    axes: tuple[str, ...]
    coords: tuple[np.ndarray, ...]
    mass: np.ndarray

    def __post_init__(self):
        if len(self.axes) != len(self.coords) or self.mass.ndim != len(self.axes):
            raise InvalidParameterError("axes, coords, and mass dimensions disagree")
        if self.mass.shape != tuple(len(c) for c in self.coords):
            raise InvalidParameterError(
                f"mass shape {self.mass.shape} does not match coordinate lengths")

    def validate(self, sum_tol: float = MASS_SUM_TOL, floor: float = MASS_FLOOR):
        total = float(self.mass.sum())
        lo = float(self.mass.min())
        if abs(total - 1.0) > sum_tol:
            raise InvalidParameterError(f"mass sums to {total}, not 1")
        if lo < floor:
            raise InvalidParameterError(f"mass {lo} below the numerical zero floor")
        return self

    def marginal(self, axes: Union[str, Sequence[str]]) -> "DiscreteDistribution":
        return marginal(self, axes)

    def values_1d(self) -> tuple[np.ndarray, np.ndarray]:
        """Support values and masses of a one-dimensional distribution."""
        if len(self.axes) != 1:
            raise InvalidParameterError(
                f"expected a 1-d distribution, got axes {self.axes}")
        return self.coords[0], self.mass

    def mean(self) -> float:
        v, m = self.values_1d()
        return float(v @ m)


def marginal(dist: DiscreteDistribution, axes: Union[str, Sequence[str]]) -> DiscreteDistribution:
    """Sum out every axis not requested; mass is preserved exactly."""
    if isinstance(axes, str):
        axes = (axes,)
    axes = tuple(axes)
    unknown = set(axes) - set(dist.axes)
    if unknown:
        raise InvalidParameterError(f"unknown axes {sorted(unknown)}; have {dist.axes}")
    keep = [i for i, name in enumerate(dist.axes) if name in axes]
    drop = tuple(i for i, name in enumerate(dist.axes) if name not in axes)
    mass = dist.mass.sum(axis=drop) if drop else dist.mass
    # reorder to the requested axis order
    kept_names = [dist.axes[i] for i in keep]
    order = [kept_names.index(name) for name in axes]
    if mass.ndim > 1:
        mass = np.transpose(mass, order)
    return DiscreteDistribution(axes=axes,
                                coords=tuple(dist.coords[keep[j]] for j in order),
                                mass=mass)


def distribution_from_samples(samples: np.ndarray, axis: str = "y") -> DiscreteDistribution:
    """Empirical distribution of scalar samples (equal weights, merged ties)."""
    values, counts = np.unique(np.asarray(samples, dtype=float), return_counts=True)
    return DiscreteDistribution(axes=(axis,), coords=(values,),
                                mass=counts / counts.sum())


@dataclass(frozen=True)
class TrajectoryDistribution:
    """Per-time distributions plus propagation diagnostics.

    Slices are over ``(x, y, a)`` for optimizer output or ``(x, y)`` once a
    policy has been folded in.  ``mass_deviation[k]`` is the drift of the
    slice-k total mass from one (pre-normalization where applicable);
    ``min_mass`` is the most negative entry seen.
    """

    times: np.ndarray
    slices: tuple[DiscreteDistribution, ...]
    mass_deviation: np.ndarray = field(default_factory=lambda: np.zeros(0))
    min_mass: float = 0.0

    @property
    def n_t(self) -> int:
        return len(self.slices)


def write_trajectory_csv(traj: TrajectoryDistribution, path, axes: Optional[Sequence[str]] = None):
    """Write ``t,<axes...>,mass`` rows; default axes are the slice axes."""
    axes = tuple(axes) if axes is not None else traj.slices[0].axes
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("t",) + axes + ("mass",))
        for t, sl in zip(traj.times, traj.slices):
            m = sl.marginal(axes) if axes != sl.axes else sl
            grids = np.meshgrid(*m.coords, indexing="ij")
            flat = [g.ravel() for g in grids]
            for vals, w in zip(zip(*flat), m.mass.ravel()):
                writer.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in vals]
                                + [f"{w:.17g}"])


def _policy_mixed_generator(gen_slice: AugmentedGenerator, weights: np.ndarray) -> sp.csr_matrix:
    """Row-wise action mixture sum_a diag(w_a) Q_a on the product space."""
    n_z = gen_slice.dim
    mixed = sp.csr_matrix((n_z, n_z))
    for a in range(gen_slice.base.n_actions):
        mixed = mixed + sp.diags(weights[:, a]) @ gen_slice.per_action[a].matrix
    return mixed.tocsr()


def propagate_forward(gen: AugmentedGenerator, policy, initial_xy: DiscreteDistribution,
                      t_grid: Union[UniformGrid, np.ndarray]) -> TrajectoryDistribution:
    """Implicit-Euler propagation of the joint (x, y) law under a policy.

    Each step solves ``(I - dt Q^T) m_{k+1} = m_k`` with ``Q`` the
    policy-mixed augmented generator built at the left endpoint of the step
    (step-averaged discount).  No renormalization is applied; total-mass
    drift and the most negative entry are reported as diagnostics.
    """
    times = t_grid.points if isinstance(t_grid, UniformGrid) else np.asarray(t_grid, float)
    n_x, n_y = gen.base.dim, gen.y_grid.n
    n_z = n_x * n_y
    if initial_xy.mass.shape != (n_x, n_y):
        raise InvalidParameterError(
            f"initial distribution shape {initial_xy.mass.shape} != ({n_x}, {n_y})")
    probs = policy.probs
    if probs.shape != (len(times), n_x, n_y, gen.base.n_actions):
        raise InvalidParameterError(
            f"policy shape {probs.shape} does not match (n_t, n_x, n_y, n_a)")

    m = initial_xy.mass.reshape(n_z).astype(float).copy()
    x_coords = (gen.base.state_grid.points if gen.base.state_grid is not None
                else np.arange(n_x, dtype=float))
    coords = (x_coords, gen.y_grid.points)

    def as_slice(vec):
        return DiscreteDistribution(axes=("x", "y"), coords=coords,
                                    mass=vec.reshape(n_x, n_y))

    slices = [as_slice(m)]
    deviations = np.zeros(len(times) - 1)
    min_mass = float(m.min())
    eye = sp.identity(n_z, format="csr")
    for k in range(len(times) - 1):
        dt = float(times[k + 1] - times[k])
        gen_k = gen.at(times[k], step=dt)
        mixed = _policy_mixed_generator(gen_k, probs[k + 1].reshape(n_z, -1))
        system = (eye - dt * mixed.T).tocsc()
        try:
            m_next = spla.spsolve(system, m)
        except RuntimeError as exc:
            raise PropagationError(f"implicit step {k} failed: {exc}") from exc
        if not np.all(np.isfinite(m_next)):
            raise PropagationError(f"implicit step {k} produced non-finite mass")
        deviations[k] = abs(float(m_next.sum()) - float(m.sum()))
        min_mass = min(min_mass, float(m_next.min()))
        m = m_next
        slices.append(as_slice(m))
    return TrajectoryDistribution(times=times, slices=tuple(slices),
                                  mass_deviation=deviations, min_mass=min_mass)


@dataclass(frozen=True)
class ForwardProgram:
    """The evolution constraints as one sparse equality system.

    Decision variables are ``mu_k(x, y, a) >= 0`` flattened as
    ``column = ((k * n_z) + x * n_y + y) * n_a + a``.  Rows are the initial
    condition (one per product state) followed by one evolution row per
    (step, product state).
    """

    a_eq: sp.csr_matrix
    b_eq: np.ndarray
    n_t: int
    n_x: int
    n_y: int
    n_a: int
    t_values: np.ndarray
    x_values: np.ndarray
    y_values: np.ndarray
    a_values: np.ndarray

    @property
    def n_z(self) -> int:
        return self.n_x * self.n_y

    @property
    def n_vars(self) -> int:
        return self.n_t * self.n_z * self.n_a

    def var_index(self, k, x, y, a):
        return ((k * self.n_z) + x * self.n_y + y) * self.n_a + a

    def terminal_objective(self, weights_xy: np.ndarray) -> np.ndarray:
        """Objective vector placing ``weights_xy`` on every terminal variable.

        ``weights_xy`` may be shaped ``(n_x, n_y)`` or ``(n_y,)`` (the latter
        is broadcast over states); it multiplies ``mu_{T}(x, y, a)`` for
        every action ``a``.
        """
        w = np.asarray(weights_xy, dtype=float)
        if w.shape == (self.n_y,):
            w = np.broadcast_to(w, (self.n_x, self.n_y))
        if w.shape != (self.n_x, self.n_y):
            raise AssemblyError(f"objective weights shape {w.shape} unusable")
        c = np.zeros(self.n_vars)
        c[(self.n_t - 1) * self.n_z * self.n_a:] = np.repeat(w.ravel(), self.n_a)
        return c

    def trajectory_from_solution(self, x: np.ndarray,
                                 normalize: bool = True) -> TrajectoryDistribution:
        """Reshape an optimal variable vector into per-time joint measures.

        Each slice is renormalized to unit mass (solver drift is recorded in
        ``mass_deviation``) so downstream marginals satisfy the distribution
        invariants.
        """
        cube = np.asarray(x, dtype=float).reshape(self.n_t, self.n_x, self.n_y, self.n_a)
        coords = (self.x_values, self.y_values, self.a_values)
        slices = []
        deviation = np.zeros(self.n_t)
        for k in range(self.n_t):
            m = cube[k]
            total = float(m.sum())
            deviation[k] = abs(total - 1.0)
            if normalize and total > 0:
                m = m / total
            slices.append(DiscreteDistribution(axes=("x", "y", "a"), coords=coords, mass=m))
        return TrajectoryDistribution(times=self.t_values, slices=tuple(slices),
                                      mass_deviation=deviation,
                                      min_mass=float(cube.min()))


def assemble_forward_program(gen: AugmentedGenerator, initial_xy: DiscreteDistribution,
                             t_grid: Union[UniformGrid, np.ndarray],
                             a_values: Optional[np.ndarray] = None) -> ForwardProgram:
    """Stack the implicit-Euler evolution into equality constraints.

    Initial rows: ``sum_a mu_0(z, a) = initial(z)``.  Evolution rows for
    each step ``k`` and product state ``z``:

        sum_a mu_{k+1}(z, a) - dt sum_{z', a} Q_a(t_k)[z', z] mu_{k+1}(z', a)
            = sum_a mu_k(z, a)
    """
    times = t_grid.points if isinstance(t_grid, UniformGrid) else np.asarray(t_grid, float)
    n_t = len(times)
    if n_t < 2:
        raise AssemblyError(f"need at least two time points, got {n_t}")
    n_x, n_y, n_a = gen.base.dim, gen.y_grid.n, gen.base.n_actions
    n_z = n_x * n_y
    if initial_xy.mass.shape != (n_x, n_y):
        raise AssemblyError(
            f"initial distribution shape {initial_xy.mass.shape} != ({n_x}, {n_y})")

    rows, cols, data = [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        data.append(v)

    z_idx = np.arange(n_z)
    # initial condition rows 0 .. n_z-1
    for a in range(n_a):
        add(z_idx, z_idx * n_a + a, np.ones(n_z))
    eye = sp.identity(n_z, format="csr")
    for k in range(n_t - 1):
        dt = float(times[k + 1] - times[k])
        gen_k = gen.at(times[k], step=dt)
        row0 = n_z + k * n_z
        col_new = (k + 1) * n_z * n_a
        col_old = k * n_z * n_a
        for a in range(n_a):
            block = (eye - dt * gen_k.per_action[a].matrix).T.tocoo()
            add(row0 + block.row, col_new + block.col * n_a + a, block.data)
            add(row0 + z_idx, col_old + z_idx * n_a + a, -np.ones(n_z))
    a_eq = sp.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_z * n_t, n_t * n_z * n_a))
    b_eq = np.zeros(n_z * n_t)
    b_eq[:n_z] = initial_xy.mass.reshape(n_z)
    x_values = (gen.base.state_grid.points if gen.base.state_grid is not None
                else np.arange(n_x, dtype=float))
    if a_values is None:
        a_values = np.arange(n_a, dtype=float)
    return ForwardProgram(a_eq=a_eq, b_eq=b_eq, n_t=n_t, n_x=n_x, n_y=n_y, n_a=n_a,
                          t_values=times, x_values=x_values,
                          y_values=gen.y_grid.points,
                          a_values=np.asarray(a_values, dtype=float))
