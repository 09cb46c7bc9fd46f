import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp

from riskflow import (ControlledGenerator, DiscreteDistribution,
                      InvalidParameterError, MarkovPolicy, RateMatrix,
                      assemble_forward_program, augment_generator,
                      build_circle_grid, build_uniform_grid, discount_factor,
                      discretize_circle_diffusion, marginal,
                      propagate_forward, write_trajectory_csv)


def two_state_gen(q01=1.0, q10=2.0):
    m = sp.csr_matrix(np.array([[-q01, q01], [q10, -q10]]))
    return ControlledGenerator(per_action=(RateMatrix(m),))


def start_at(index, n_x, n_y, coords=None):
    mass = np.zeros((n_x, n_y))
    mass[index, 0] = 1.0
    coords = coords or (np.arange(n_x, dtype=float), np.arange(n_y, dtype=float))
    return DiscreteDistribution(axes=("x", "y"), coords=coords, mass=mass)


class TestMarginal:
    def test_product_measure_factorizes(self):
        p = np.array([0.2, 0.8])
        q = np.array([0.5, 0.3, 0.2])
        joint = DiscreteDistribution(axes=("x", "y"),
                                     coords=(np.arange(2.), np.arange(3.)),
                                     mass=np.outer(p, q))
        assert np.allclose(joint.marginal("x").mass, p)
        assert np.allclose(joint.marginal("y").mass, q)

    def test_point_mass(self):
        d = start_at(1, 3, 4)
        m = d.marginal("y")
        assert np.allclose(m.mass, [1, 0, 0, 0])

    def test_uniform_two_by_two(self):
        d = DiscreteDistribution(axes=("x", "y"), coords=(np.arange(2.), np.arange(2.)),
                                 mass=np.full((2, 2), 0.25))
        for ax in ("x", "y"):
            assert np.allclose(d.marginal(ax).mass, [0.5, 0.5])

    def test_axis_reorder(self):
        m = np.arange(6.0).reshape(2, 3)
        m /= m.sum()
        d = DiscreteDistribution(axes=("x", "y"), coords=(np.arange(2.), np.arange(3.)),
                                 mass=m)
        flipped = d.marginal(("y", "x"))
        assert flipped.axes == ("y", "x")
        assert np.allclose(flipped.mass, m.T)

    def test_unknown_axis(self):
        d = start_at(0, 2, 2)
        with pytest.raises(InvalidParameterError):
            marginal(d, "z")


class TestPropagation:
    def test_zero_generator_freezes_mass(self):
        gen = ControlledGenerator(per_action=(RateMatrix(sp.csr_matrix((3, 3))),))
        yg = build_uniform_grid(0.0, 1.0, 2)
        aug = augment_generator(gen, np.zeros((3, 1)), 0.0, yg, t=0.0)
        init = start_at(1, 3, 2, coords=(np.arange(3.), yg.points))
        traj = propagate_forward(aug, MarkovPolicy.uniform(4, 3, 2, 1), init,
                                 np.linspace(0, 1, 4))
        for sl in traj.slices:
            assert np.allclose(sl.mass, init.mass)

    def test_two_state_chain_matches_matrix_exponential(self):
        q = np.array([[-1.0, 1.0], [2.0, -2.0]])
        gen = two_state_gen()
        yg = build_uniform_grid(0.0, 1.0, 2)
        aug = augment_generator(gen, np.zeros((2, 1)), 0.0, yg, t=0.0)
        n_t = 101  # dt = 0.01 over t = 1
        times = np.linspace(0.0, 1.0, n_t)
        init = start_at(0, 2, 2, coords=(np.arange(2.), yg.points))
        traj = propagate_forward(aug, MarkovPolicy.uniform(n_t, 2, 2, 1), init, times)
        got = traj.slices[-1].marginal("x").mass
        want = scipy.linalg.expm(q.T) @ np.array([1.0, 0.0])
        # oracle value: (2/3 + e^-3/3, 1/3 - e^-3/3)
        assert want[0] == pytest.approx(2 / 3 + np.exp(-3) / 3, rel=1e-12)
        assert np.abs(got - want).max() < 2e-3

    def test_uniform_stays_uniform_on_circle(self):
        grid = build_circle_grid(7)
        gen = ControlledGenerator(
            per_action=(discretize_circle_diffusion(grid, 0.0, 1.0),),
            state_grid=grid)
        yg = build_uniform_grid(0.0, 1.0, 3)
        aug = augment_generator(gen, np.zeros((7, 1)), 0.0, yg, t=0.0)
        mass = np.zeros((7, 3))
        mass[:, 0] = 1.0 / 7.0
        init = DiscreteDistribution(axes=("x", "y"), coords=(grid.points, yg.points),
                                    mass=mass)
        traj = propagate_forward(aug, MarkovPolicy.uniform(5, 7, 3, 1), init,
                                 np.linspace(0, 2, 5))
        for sl in traj.slices:
            assert np.allclose(sl.marginal("x").mass, 1.0 / 7.0, atol=1e-12)

    def test_mass_conservation_and_positivity(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            n_x, n_y, n_a = rng.integers(2, 6), rng.integers(2, 5), rng.integers(1, 4)
            mats = []
            for _ in range(n_a):
                off = rng.uniform(0, 3, (n_x, n_x))
                np.fill_diagonal(off, 0.0)
                q = off - np.diag(off.sum(axis=1))
                mats.append(RateMatrix(sp.csr_matrix(q)))
            gen = ControlledGenerator(per_action=tuple(mats))
            cost = rng.uniform(0, 2, (n_x, n_a))
            yg = build_uniform_grid(0.0, 1.5, n_y)
            aug = augment_generator(gen, cost, rng.uniform(0, 1), yg, t=0.0)
            probs = rng.dirichlet(np.ones(n_a), size=(4, n_x, n_y))
            policy = MarkovPolicy(probs=probs, mask=np.ones((4, n_x, n_y), bool))
            mass = rng.dirichlet(np.ones(n_x * n_y)).reshape(n_x, n_y)
            init = DiscreteDistribution(axes=("x", "y"),
                                        coords=(np.arange(float(n_x)), yg.points),
                                        mass=mass)
            traj = propagate_forward(aug, policy, init, np.linspace(0, 1.5, 4))
            assert traj.mass_deviation.max() <= 1e-12
            assert traj.min_mass >= -1e-12

    def test_first_moment_identity(self):
        # mean cost increment per step = dt * disc * E_{mu_{k+1}}[c] off the top cell
        rng = np.random.default_rng(5)
        grid = build_circle_grid(5)
        a_vals = np.array([-0.3, 0.4])
        gen = ControlledGenerator(
            per_action=tuple(discretize_circle_diffusion(grid, a, 0.8) for a in a_vals),
            state_grid=grid)
        cost = rng.uniform(0, 1.5, (5, 2))
        alpha = 0.3
        yg = build_uniform_grid(0.0, 2.0, 9)
        aug = augment_generator(gen, cost, alpha, yg, t=0.0)
        times = np.linspace(0.0, 2.0, 6)
        probs = rng.dirichlet(np.ones(2), size=(6, 5, 9))
        policy = MarkovPolicy(probs=probs, mask=np.ones((6, 5, 9), bool))
        init = start_at(0, 5, 9, coords=(grid.points, yg.points))
        traj = propagate_forward(aug, policy, init, times)
        means = [sl.marginal("y").mean() for sl in traj.slices]
        assert np.all(np.diff(means) >= -1e-14)
        dt = times[1] - times[0]
        for k in range(5):
            disc = discount_factor(alpha, times[k], step=dt)
            nxt = traj.slices[k + 1].mass  # (x, y)
            w = policy.probs[k + 1]        # (x, y, a)
            flow = sum((nxt[:, :-1] * w[:, :-1, a] * cost[:, None, a]).sum()
                       for a in range(2))
            assert means[k + 1] - means[k] == pytest.approx(dt * disc * flow, abs=1e-12)

    def test_policy_shape_checked(self):
        gen = two_state_gen()
        yg = build_uniform_grid(0.0, 1.0, 2)
        aug = augment_generator(gen, np.zeros((2, 1)), 0.0, yg, t=0.0)
        init = start_at(0, 2, 2, coords=(np.arange(2.), yg.points))
        with pytest.raises(InvalidParameterError):
            propagate_forward(aug, MarkovPolicy.uniform(3, 2, 2, 1), init,
                              np.linspace(0, 1, 4))


class TestAssembly:
    def test_degenerate_single_cell(self):
        gen = ControlledGenerator(per_action=(RateMatrix(sp.csr_matrix((1, 1))),))
        yg = build_uniform_grid(0.0, 1.0, 2)
        aug = augment_generator(gen, np.zeros((1, 1)), 0.0, yg, t=0.0)
        init = start_at(0, 1, 2, coords=(np.zeros(1), yg.points))
        fp = assemble_forward_program(aug, init, np.linspace(0, 1, 2))
        assert fp.n_vars == 4  # 2 slices x 2 cost levels x 1 action
        assert fp.a_eq.shape == (4, 4)

    def test_reference_problem_size(self):
        grid = build_circle_grid(21)
        a_vals = np.linspace(-0.5, 0.5, 21)
        gen = ControlledGenerator(
            per_action=tuple(discretize_circle_diffusion(grid, a, 1.0) for a in a_vals),
            state_grid=grid)
        cost = (1 - np.cos(grid.points))[:, None] + 2.0 * a_vals[None, :] ** 2
        yg = build_uniform_grid(0.0, 2.5, 21)
        aug = augment_generator(gen, cost, 0.25, yg, t=0.0)
        init = start_at(0, 21, 21, coords=(grid.points, yg.points))
        fp = assemble_forward_program(aug, init, build_uniform_grid(0.0, 25.0, 21),
                                      a_values=a_vals)
        assert fp.n_vars == 21 * 21 * 21 * 21 == 194_481
        assert fp.a_eq.shape[0] == 20 * 441 + 441 == 9_261
        assert np.diff(fp.a_eq.tocsr().indptr).min() >= 1
        # every variable appears in at least one constraint
        assert np.diff(fp.a_eq.tocsc().indptr).min() >= 1

    def test_evolution_rows_telescope_total_mass(self):
        # summing evolution rows over states leaves +1 on the new slice and
        # -1 on the old slice: row sums of the generator cancel exactly
        rng = np.random.default_rng(2)
        grid = build_circle_grid(4)
        a_vals = np.array([0.0, 0.5])
        gen = ControlledGenerator(
            per_action=tuple(discretize_circle_diffusion(grid, a, 1.0) for a in a_vals),
            state_grid=grid)
        cost = rng.uniform(0, 1, (4, 2))
        yg = build_uniform_grid(0.0, 1.0, 3)
        aug = augment_generator(gen, cost, 0.2, yg, t=0.0)
        init = start_at(0, 4, 3, coords=(grid.points, yg.points))
        times = np.linspace(0, 1, 3)
        fp = assemble_forward_program(aug, init, times)
        n_z, n_a = 12, 2
        dense = fp.a_eq.toarray()
        for k in range(2):
            rows = dense[n_z + k * n_z: n_z + (k + 1) * n_z]
            colsum = rows.sum(axis=0)
            expect = np.zeros(fp.n_vars)
            expect[(k + 1) * n_z * n_a:(k + 2) * n_z * n_a] = 1.0
            expect[k * n_z * n_a:(k + 1) * n_z * n_a] = -1.0
            assert np.allclose(colsum, expect, atol=1e-12)

    def test_csv_export_round_trip(self, tmp_path):
        gen = two_state_gen()
        yg = build_uniform_grid(0.0, 1.0, 2)
        aug = augment_generator(gen, np.full((2, 1), 0.4), 0.0, yg, t=0.0)
        init = start_at(0, 2, 2, coords=(np.arange(2.), yg.points))
        traj = propagate_forward(aug, MarkovPolicy.uniform(3, 2, 2, 1), init,
                                 np.linspace(0, 1, 3))
        path = tmp_path / "traj.csv"
        write_trajectory_csv(traj, path, axes=("y",))
        rows = np.loadtxt(path, delimiter=",", skiprows=1)
        assert rows.shape == (6, 3)
        got = rows[rows[:, 0] == 1.0][:, 2]
        assert np.allclose(got, traj.slices[-1].marginal("y").mass)
