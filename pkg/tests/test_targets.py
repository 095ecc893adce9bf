"""Toy generator, energy, and tabular loader tests."""

import numpy as np
import pytest
from scipy import stats

from gbnf import autodiff as ad
from gbnf import targets
from gbnf.errors import ConfigError


class TestEightGaussians:
    def test_every_sample_near_a_mode(self):
        s = targets.ToySampler("eight_gaussians", seed=0)
        x = s.sample(1_000_000)
        d = np.linalg.norm(x[:, None, :] - targets.EIGHT_GAUSSIAN_CENTERS[None], axis=2)
        assert d.min(axis=1).max() < 4.0

    def test_mode_frequencies_uniform(self):
        s = targets.ToySampler("eight_gaussians", seed=1)
        x = s.sample(100_000)
        d = np.linalg.norm(x[:, None, :] - targets.EIGHT_GAUSSIAN_CENTERS[None], axis=2)
        counts = np.bincount(d.argmin(axis=1), minlength=8)
        assert stats.chisquare(counts).pvalue > 0.001

    def test_true_log_prob_matches_mc_mass(self):
        # Quadrature of the exact density over the grid box is ~1.
        s = targets.ToySampler("eight_gaussians")
        xs = np.linspace(-4, 4, 400, endpoint=False) + 0.01
        grid = np.stack(np.meshgrid(xs, xs, indexing="ij"), axis=-1).reshape(-1, 2)
        mass = np.exp(s.true_log_prob(grid)).sum() * (8.0 / 400) ** 2
        assert mass == pytest.approx(1.0, abs=0.01)


class TestCheckerboard:
    def test_x_marginal_uniform_ks(self):
        s = targets.ToySampler("checkerboard", seed=2)
        x = s.sample(100_000)[:, 0]
        u = np.sort((x + 4.0) / 8.0)
        ecdf = np.arange(1, len(u) + 1) / len(u)
        ks = np.max(np.maximum(np.abs(ecdf - u), np.abs(u - (ecdf - 1 / len(u)))))
        assert ks < 0.01

    def test_samples_on_dark_cells(self):
        s = targets.ToySampler("checkerboard", seed=3)
        x = s.sample(50_000)
        lp = s.true_log_prob(x)
        assert np.all(np.isfinite(lp))
        np.testing.assert_allclose(lp, np.log(1 / 32.0))

    def test_bbox(self):
        s = targets.ToySampler("checkerboard", seed=4)
        x = s.sample(100_000)
        assert np.all(np.abs(x) <= 4.0)


class TestOtherToys:
    @pytest.mark.parametrize("name", ["pinwheel", "spiral"])
    def test_bbox_mostly(self, name):
        s = targets.ToySampler(name, seed=5)
        x = s.sample(100_000)
        frac_inside = np.mean(np.all(np.abs(x) <= 4.0, axis=1))
        assert frac_inside > 0.999

    def test_deterministic_per_seed(self):
        for name in targets.TOY_NAMES:
            a = targets.ToySampler(name, seed=7).sample(100)
            b = targets.ToySampler(name, seed=7).sample(100)
            np.testing.assert_array_equal(a, b)

    def test_unknown_name_rejected(self):
        with pytest.raises(ConfigError):
            targets.ToySampler("moons")

    def test_reference_entropy_close_to_true_for_checkerboard(self):
        ent = targets.reference_entropy(targets.ToySampler("checkerboard", seed=0), n=1000)
        assert ent == pytest.approx(np.log(32.0), abs=1e-9)


class TestEnergies:
    @pytest.mark.parametrize("name", targets.ENERGY_NAMES)
    def test_upper_bound(self, name):
        e = targets.EnergyTarget(name)
        z = np.random.default_rng(0).uniform(-6, 6, size=(100_000, 2))
        assert np.max(e.log_unnorm(z)) <= e.upper_bound

    @pytest.mark.parametrize("name", targets.ENERGY_NAMES)
    def test_decay_at_radius_100(self, name):
        e = targets.EnergyTarget(name)
        angles = np.linspace(0, 2 * np.pi, 64, endpoint=False)
        z = 100.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        assert np.max(e.log_unnorm(z)) < -100.0

    def test_u1_value_at_ring(self):
        # On the ring r=2 at z1=2 the ring term vanishes and one bump is centered.
        e = targets.EnergyTarget("u1")
        val = e.log_unnorm(np.array([[2.0, 0.0]]))[0]
        expected = np.log(np.exp(0.0) + np.exp(-0.5 * (4.0 / 0.6) ** 2))
        assert val == pytest.approx(expected, abs=1e-12)

    def test_u2_valley_center(self):
        e = targets.EnergyTarget("u2")
        z1 = 1.0
        z = np.array([[z1, np.sin(2 * np.pi * z1 / 4)]])
        val = e.log_unnorm(z)[0]
        assert val == pytest.approx(-0.5 * (z1 / 4.0) ** 8, abs=1e-12)

    @pytest.mark.parametrize("name", targets.ENERGY_NAMES)
    def test_gradcheck_through_input(self, name):
        e = targets.EnergyTarget(name)
        rng = np.random.default_rng(31)
        layout = ad.ParamLayout([("z", (6, 2))])
        for _ in range(5):
            pv = ad.ParamVector(layout, rng.uniform(-3, 3, size=12))

            def program(p):
                return ad.sum(e.log_unnorm(p["z"]))

            check = ad.finite_diff_check(program, pv, epsilon=1e-5)
            assert check.max_rel_error < 1e-4, name

    @pytest.mark.parametrize("name", targets.ENERGY_NAMES)
    def test_graph_path_matches_fast_path(self, name):
        e = targets.EnergyTarget(name)
        rng = np.random.default_rng(8)
        z = rng.uniform(-5, 5, size=(64, 2))
        fast = e.log_unnorm(z)
        traced = e.log_unnorm(ad.Tensor(z))
        np.testing.assert_allclose(traced.value, fast, rtol=1e-14)


class TestTabular:
    def _write(self, tmp_path, text, name="t.csv"):
        p = tmp_path / name
        p.write_text(text)
        return p

    def test_split_counts(self, tmp_path):
        p = self._write(tmp_path, "1,2\n3,4\n5,6\n7,8\n")
        ds = targets.load_tabular(p, splits=(0.5, 0.25, 0.25), seed=0, standardize=False)
        assert (len(ds.train), len(ds.val), len(ds.test)) == (2, 1, 1)

    def test_standardization_from_train_only(self, tmp_path):
        rng = np.random.default_rng(0)
        raw = rng.normal(loc=5.0, scale=3.0, size=(100, 2))
        p = tmp_path / "d.csv"
        np.savetxt(p, raw, delimiter=",")
        ds = targets.load_tabular(p, splits=(0.6, 0.2, 0.2), seed=1)
        perm = np.random.default_rng(1).permutation(100)
        expected_train_raw = raw[perm][:60]
        np.testing.assert_allclose(ds.mean, expected_train_raw.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(ds.train.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(ds.train.std(axis=0), 1.0, atol=1e-12)
        # val/test use train statistics, so they are not exactly standardized
        assert abs(ds.val.mean()) > 0

    def test_deterministic_shuffle(self, tmp_path):
        p = self._write(tmp_path, "\n".join(f"{i},{i * 2}" for i in range(20)) + "\n")
        a = targets.load_tabular(p, seed=3, standardize=False)
        b = targets.load_tabular(p, seed=3, standardize=False)
        np.testing.assert_array_equal(a.train, b.train)

    def test_parse_error_reports_row_and_column(self, tmp_path):
        p = self._write(tmp_path, "1,2\n3,oops\n5,6\n")
        with pytest.raises(ConfigError, match="row 2, column 2"):
            targets.load_tabular(p)

    def test_ragged_row_rejected(self, tmp_path):
        p = self._write(tmp_path, "1,2\n3\n")
        with pytest.raises(ConfigError, match="row 2"):
            targets.load_tabular(p)

    def test_empty_split_rejected(self, tmp_path):
        p = self._write(tmp_path, "1,2\n3,4\n")
        with pytest.raises(ConfigError, match="split"):
            targets.load_tabular(p, splits=(0.9, 0.05, 0.05))

    def test_header_flag(self, tmp_path):
        p = self._write(tmp_path, "a,b\n1,2\n3,4\n5,6\n7,8\n")
        ds = targets.load_tabular(p, splits=(0.5, 0.25, 0.25), header=True, standardize=False)
        assert len(ds.train) == 2

    def test_zero_variance_column_rejected(self, tmp_path):
        p = self._write(tmp_path, "1,7\n2,7\n3,7\n4,7\n")
        with pytest.raises(ConfigError, match="zero variance"):
            targets.load_tabular(p, splits=(0.5, 0.25, 0.25))


class TestExport:
    def test_seventeen_digit_roundtrip(self, tmp_path):
        pts = np.random.default_rng(0).normal(size=(50, 2))
        path = tmp_path / "pts.csv"
        targets.export_csv(pts, path)
        back = np.loadtxt(path, delimiter=",")
        np.testing.assert_array_equal(back, pts)
