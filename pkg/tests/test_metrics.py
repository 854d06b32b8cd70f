import json
import math
import struct

import numpy as np
import pytest
from scipy.stats import norm

from lrmis.density import StandardNormalPrior
from lrmis.metrics import (
    MetricReport,
    ReferenceSet,
    avg_nll,
    build_reference_set,
    coverage,
    ndb,
    relative_error,
)
from lrmis.problems import branches_problem


class TestRelativeError:
    def test_zero(self):
        assert relative_error(1e-3, 1e-3) == 0.0

    def test_overestimate_positive(self):
        assert relative_error(2e-3, 1e-3) == pytest.approx(1.0)

    def test_published_value(self):
        assert relative_error(9.32e-4, 9.55e-4) == pytest.approx(-0.024, abs=5e-4)

    def test_exact_zero_for_any_pf(self):
        for pf in (1e-12, 0.3, 0.999):
            assert relative_error(pf, pf) == 0.0

    def test_requires_positive_reference(self):
        with pytest.raises(ValueError):
            relative_error(1e-3, 0.0)


class TestAvgNll:
    def test_origin_d40(self):
        prior = StandardNormalPrior(40)
        samples = np.zeros((7, 40))
        expected = 20 * math.log(2 * math.pi)
        assert avg_nll(samples, prior) == pytest.approx(expected, abs=1e-10)
        assert expected == pytest.approx(36.7575, abs=1e-4)

    def test_standard_normal_batch_entropy(self):
        prior = StandardNormalPrior(2)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((10000, 2))
        got = avg_nll(x, prior)
        expected = math.log(2 * math.pi) + 1.0  # differential entropy of N(0, I_2)
        # SE of the mean of -log p for d=2 is 1/sqrt(n)
        assert abs(got - expected) < 3.0 / math.sqrt(10000)

    def test_translation_identity(self):
        # shifting all samples by t changes the value by t.x_bar + |t|^2/2
        prior = StandardNormalPrior(5)
        rng = np.random.default_rng(1)
        x = rng.standard_normal((500, 5))
        t = rng.standard_normal(5)
        base = avg_nll(x, prior)
        shifted = avg_nll(x + t, prior)
        expected_delta = float(t @ x.mean(axis=0) + 0.5 * t @ t)
        assert shifted - base == pytest.approx(expected_delta, abs=1e-9)


class TestCoverage:
    def test_identical_sets(self):
        rng = np.random.default_rng(2)
        s = rng.standard_normal((50, 3))
        assert coverage(s, s, k=5) == 1.0

    def test_far_shift(self):
        rng = np.random.default_rng(3)
        s = rng.standard_normal((50, 3))
        assert coverage(s, s + 1e6, k=5) == 0.0

    def test_small_planar_instance_vs_bruteforce(self):
        rng = np.random.default_rng(4)
        real = rng.standard_normal((10, 2))
        gen = rng.standard_normal((6, 2))
        k = 2
        covered = 0
        for i in range(10):
            dists = sorted(
                float(np.linalg.norm(real[i] - real[j])) for j in range(10) if j != i
            )
            radius = dists[k - 1]
            dmin = min(float(np.linalg.norm(real[i] - g)) for g in gen)
            covered += dmin <= radius
        assert coverage(real, gen, k=k) == pytest.approx(covered / 10)

    def test_row_order_invariance(self):
        rng = np.random.default_rng(5)
        real = rng.standard_normal((40, 3))
        gen = rng.standard_normal((30, 3))
        base = coverage(real, gen, k=3)
        perm_r = rng.permutation(40)
        perm_g = rng.permutation(30)
        assert coverage(real[perm_r], gen[perm_g], k=3) == pytest.approx(base)

    def test_requires_more_than_k(self):
        with pytest.raises(ValueError):
            coverage(np.zeros((5, 2)), np.zeros((5, 2)), k=5)

    def test_blocked_matches_unblocked(self):
        rng = np.random.default_rng(6)
        real = rng.standard_normal((100, 4))
        gen = rng.standard_normal((80, 4))
        assert coverage(real, gen, k=5, block=7) == pytest.approx(
            coverage(real, gen, k=5, block=1000)
        )


class TestNdb:
    def test_identical_sets_zero(self):
        rng = np.random.default_rng(7)
        for case in range(20):
            s = rng.standard_normal((60 + case, 3))
            n, ratio = ndb(s, s, n_bins=5, alpha=0.05, seed=case)
            assert n == 0
            assert ratio == 0.0

    def test_disjoint_clusters(self):
        rng = np.random.default_rng(8)
        real = rng.standard_normal((200, 2))
        gen = rng.standard_normal((200, 2)) + 50.0
        n, ratio = ndb(real, gen, n_bins=2, alpha=0.05, seed=0)
        assert ratio == 1.0

    def test_three_bin_ztest_oracle(self):
        # well-separated clusters with proportions (.5,.3,.2) vs (.5,.2,.3):
        # z = 0.1/sqrt(.25*.75*(2/1000)) = 5.16 for the two swapped bins
        rng = np.random.default_rng(9)
        centers = np.array([[0.0, 0.0], [30.0, 0.0], [60.0, 0.0]])
        def make(props):
            parts = [
                centers[i] + 0.5 * rng.standard_normal((int(1000 * p), 2))
                for i, p in enumerate(props)
            ]
            return np.vstack(parts)
        real = make([0.5, 0.3, 0.2])
        gen = make([0.5, 0.2, 0.3])
        n, ratio = ndb(real, gen, n_bins=3, alpha=0.05, seed=1)
        pooled = 0.25
        z = 0.1 / math.sqrt(pooled * (1 - pooled) * (2 / 1000))
        assert z > norm.ppf(0.975)
        assert n == 2
        assert ratio == pytest.approx(2 / 3)

    def test_row_order_invariance(self):
        rng = np.random.default_rng(10)
        real = rng.standard_normal((100, 3))
        gen = rng.standard_normal((90, 3)) * 1.3
        base = ndb(real, gen, n_bins=4, alpha=0.05, seed=2)
        shuffled = ndb(
            real[rng.permutation(100)], gen[rng.permutation(90)],
            n_bins=4, alpha=0.05, seed=2,
        )
        assert base == shuffled

    def test_needs_two_bins(self):
        with pytest.raises(ValueError):
            ndb(np.zeros((10, 2)), np.zeros((10, 2)), n_bins=1)


class TestMetricReport:
    def test_range_validation(self):
        with pytest.raises(ValueError):
            MetricReport(0.0, 1.0, coverage=1.5, ndb_ratio=0.0, n_total=1)
        report = MetricReport(0.0, 1.0, coverage=math.nan, ndb_ratio=0.5, n_total=1)
        assert math.isnan(report.coverage)


class TestReferenceSet:
    def test_build_and_roundtrip(self, tmp_path):
        problem = branches_problem(dim=4, beta=2.0)
        ref = build_reference_set(problem, 20000, seed=5, max_keep=500)
        assert ref.points.shape[0] == 500
        assert np.all(problem.cost(ref.points) <= 0)
        # exact union of the two antipodal half-space pairs
        q = norm.cdf(-2.0)
        pf_true = 1.0 - (1.0 - 2 * q) ** 2
        assert ref.pf_ref == pytest.approx(pf_true, rel=0.1)

        path = tmp_path / "ref.rset"
        ref.save(path)
        loaded = ReferenceSet.load(path)
        np.testing.assert_array_equal(loaded.points, ref.points)
        assert loaded.pf_ref == ref.pf_ref
        assert loaded.problem_name == "branches"
        assert loaded.seed == 5
        assert loaded.n_samples == 20000

    def test_binary_layout(self, tmp_path):
        ref = ReferenceSet(
            points=np.array([[1.5, -2.25], [0.0, 3.0]]),
            pf_ref=0.125,
            problem_name="toy",
            seed=1,
            n_samples=16,
        )
        path = tmp_path / "layout.rset"
        ref.save(path)
        raw = path.read_bytes()
        assert raw[:5] == b"RSET1"
        d, m = struct.unpack("<QQ", raw[5:21])
        assert (d, m) == (2, 2)
        vals = np.frombuffer(raw[21:], dtype="<f8")
        np.testing.assert_array_equal(vals, [1.5, -2.25, 0.0, 3.0])
        sidecar = json.loads((tmp_path / "layout.rset.json").read_text())
        assert sidecar["pf_ref"] == 0.125
        assert sidecar["problem"] == "toy"

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.rset"
        path.write_bytes(b"NOTIT" + b"\x00" * 16)
        (tmp_path / "bad.rset.json").write_text("{}")
        with pytest.raises(ValueError, match="magic"):
            ReferenceSet.load(path)
