import math

import numpy as np
import pytest

from qemlab.equilibrium import (MarkovModel, TestDictionary,
                                equilibrium_cylinder_measure,
                                full_shift_model, model_for, pressure_sft,
                                w1_1d, weak_star_discrepancy)
from qemlab.ulam import build_grid

from oracles import quad_w1_uniform_vs_cantor

TERNARY = model_for("ternary_hole")
FIVE = model_for("five_hole")
GOLDEN = MarkovModel.from_matrix([[1.0, 1.0], [1.0, 0.0]], digits=(0, 1), base=2)


def unit_grid(resolution):
    return build_grid([([0.0], [1.0])], resolution)


class TestPressure:
    def test_ternary(self):
        assert pressure_sft(TERNARY) == pytest.approx(math.log(2.0 / 3.0))

    def test_five(self):
        assert pressure_sft(FIVE) == pytest.approx(math.log(3.0 / 5.0))

    def test_single_loop(self):
        assert pressure_sft(MarkovModel(np.zeros((1, 1)))) == pytest.approx(0.0)

    def test_constant_shift(self):
        c = 0.37
        shifted = full_shift_model((0, 2), 3, c - math.log(3.0))
        assert pressure_sft(shifted) == pytest.approx(pressure_sft(TERNARY) + c)

    def test_reducible_takes_max_block(self):
        A = np.zeros((3, 3))
        A[0, 0] = 0.4
        A[1:, 1:] = 0.3  # Perron root 0.6 on the second block
        assert pressure_sft(MarkovModel.from_matrix(A)) \
            == pytest.approx(math.log(0.6))

    def test_zero_matrix_rejected(self):
        with pytest.raises(ValueError):
            MarkovModel.from_matrix(np.zeros((2, 2)))


class TestEquilibriumMeasure:
    def test_ternary_depth1_uniform(self):
        m = equilibrium_cylinder_measure(TERNARY, 1)
        assert np.allclose(m.masses, 0.5)

    def test_ternary_depth2_product(self):
        m = equilibrium_cylinder_measure(TERNARY, 2)
        assert len(m.words) == 4
        assert np.allclose(m.masses, 0.25)

    def test_golden_mean_parry(self):
        m = equilibrium_cylinder_measure(GOLDEN, 1)
        phi = (1.0 + math.sqrt(5.0)) / 2.0
        expected = {(0,): phi ** 2 / (1 + phi ** 2), (1,): 1 / (1 + phi ** 2)}
        for w, mass in zip(m.words, m.masses):
            assert mass == pytest.approx(expected[w])

    def test_golden_mean_forbidden_word_has_no_mass(self):
        m = equilibrium_cylinder_measure(GOLDEN, 3)
        assert all((1, 1) != w[i:i + 2] for w in m.words for i in range(2))
        assert m.masses.sum() == pytest.approx(1.0)

    def test_moment_oracle(self):
        deep = equilibrium_cylinder_measure(TERNARY, 12)
        assert deep.mean() == pytest.approx(0.5, abs=1e-9)
        assert deep.variance() == pytest.approx(0.125, abs=1e-6)

    def test_marginalization_consistency(self):
        m7 = equilibrium_cylinder_measure(TERNARY, 7)
        m6 = m7.marginalize()
        direct = equilibrium_cylinder_measure(TERNARY, 6)
        assert m6.words == direct.words
        assert np.allclose(m6.masses, direct.masses)

    def test_uniform_bernoulli_masses(self):
        m = equilibrium_cylinder_measure(FIVE, 3)
        assert np.allclose(m.masses, 3.0 ** -3)

    def test_shift_invariance(self):
        shifted = full_shift_model((0, 2), 3, 1.3 - math.log(3.0))
        a = equilibrium_cylinder_measure(TERNARY, 4)
        b = equilibrium_cylinder_measure(shifted, 4)
        assert np.allclose(a.masses, b.masses)

    def test_reducible_rejected(self):
        A = np.eye(2) * 0.5
        with pytest.raises(ValueError, match="reducible"):
            equilibrium_cylinder_measure(MarkovModel.from_matrix(A), 2)

    def test_depth_validation(self):
        with pytest.raises(ValueError):
            equilibrium_cylinder_measure(TERNARY, 0)

    def test_grid_projection_sums_to_one(self):
        grid = unit_grid(729)
        proj = equilibrium_cylinder_measure(TERNARY, 7).grid_projection(grid)
        assert proj.sum() == pytest.approx(1.0)
        hole = (grid.centers()[:, 0] >= 1 / 3) & (grid.centers()[:, 0] < 2 / 3)
        assert proj[hole].max() == 0.0

    def test_csv_export(self, tmp_path):
        grid = unit_grid(27)
        measure = equilibrium_cylinder_measure(TERNARY, 3)
        path = tmp_path / "measure.csv"
        measure.write_csv(path, grid=grid)
        lines = path.read_text().splitlines()
        assert lines[0] == "cylinder,mass"
        masses = [float(line.split(",")[1]) for line in lines[1:]]
        assert sum(masses) == pytest.approx(1.0)
        proj_lines = (tmp_path / "measure.projection.csv").read_text().splitlines()
        assert len(proj_lines) == 28


class TestDictionaryAndMetrics:
    def test_members_are_lipschitz(self):
        d = TestDictionary(k_max=8, dimension=1)
        xs = np.linspace(0.0, 1.0, 4001)[:, None]
        for name, f in d.members():
            vals = f(xs)
            slopes = np.abs(np.diff(vals)) / np.diff(xs[:, 0])
            assert slopes.max() <= 1.0 + 1e-6, name

    def test_discrepancy_zero_for_equal(self):
        grid = unit_grid(81)
        mu = np.full(81, 1.0 / 81.0)
        assert weak_star_discrepancy(mu, mu, TestDictionary(), grid) == 0.0

    def test_discrepancy_separated_point_masses(self):
        grid = unit_grid(2000)
        mu = np.zeros(2000); mu[0] = 1.0
        nu = np.zeros(2000); nu[1000] = 1.0
        disc = weak_star_discrepancy(mu, nu, TestDictionary(), grid)
        assert disc >= 1.0 / math.pi - 1e-2
        assert disc == pytest.approx(1.0 / math.pi, abs=1e-2)

    def test_discrepancy_one_cell_shift(self):
        grid = unit_grid(729)
        g = np.random.default_rng(0)
        mu = g.uniform(size=729)
        mu /= mu.sum()
        nu = np.roll(mu, 1)
        disc = weak_star_discrepancy(mu, nu, TestDictionary(), grid)
        assert disc <= 1.0 / 729.0 + 1e-12  # Lipschitz-1 members

    def test_w1_identical(self):
        grid = unit_grid(10)
        mu = np.full(10, 0.1)
        assert w1_1d(mu, mu, grid) == 0.0

    def test_w1_end_point_masses(self):
        # half-cell quantization: centers sit 1/(2*100) in from each end
        grid = unit_grid(100)
        mu = np.zeros(100); mu[0] = 1.0
        nu = np.zeros(100); nu[-1] = 1.0
        assert w1_1d(mu, nu, grid) == pytest.approx(0.99, abs=1e-12)

    def test_w1_uniform_vs_cantor_quadrature(self):
        grid = unit_grid(2187)
        uniform = np.full(2187, 1.0 / 2187.0)
        proj = equilibrium_cylinder_measure(TERNARY, 7).grid_projection(grid)
        lhs = w1_1d(uniform, proj, grid)
        rhs = quad_w1_uniform_vs_cantor(100_001)
        assert lhs == pytest.approx(rhs, abs=1e-3)

    def test_w1_requires_1d(self):
        grid = build_grid([([0.0, 0.0], [1.0, 1.0])], 4)
        mu = np.full(16, 1 / 16)
        with pytest.raises(ValueError):
            w1_1d(mu, mu, grid)

    def test_w1_two_box_gap(self):
        grid = build_grid([([0.0], [1.0]), ([2.0], [3.0])], 2)
        mu = np.array([1.0, 0.0, 0.0, 0.0])   # center 0.25
        nu = np.array([0.0, 0.0, 1.0, 0.0])   # center 2.25
        assert w1_1d(mu, nu, grid) == pytest.approx(2.0, abs=0.5 / 2.0 + 1e-12)

    def test_metric_grid_mismatch(self):
        grid = unit_grid(10)
        with pytest.raises(ValueError):
            w1_1d(np.ones(9) / 9, np.ones(10) / 10, grid)
        with pytest.raises(ValueError):
            weak_star_discrepancy(np.ones(9) / 9, np.ones(10) / 10,
                                  TestDictionary(), grid)


class TestGeometry:
    def test_cylinder_intervals(self):
        lo, hi = TERNARY.cylinder_interval((0, 1))  # symbols 0, 2 -> digits
        assert (lo, hi) == (pytest.approx(2.0 / 9.0), pytest.approx(3.0 / 9.0))
        lo, hi = FIVE.cylinder_interval((2,))
        assert (lo, hi) == (pytest.approx(0.4), pytest.approx(0.6))

    def test_no_geometry_model(self):
        m = MarkovModel.from_matrix([[1.0, 1.0], [1.0, 0.0]])
        with pytest.raises(ValueError):
            m.cylinder_interval((0,))

    def test_model_for_unknown(self):
        with pytest.raises(KeyError):
            model_for("smooth_perturbed")
