"""Tests for the synthetic-truth study harness."""

import numpy as np
import numpy.testing as npt
import pytest
from dataclasses import replace

from fable.errors import DimensionMismatch
from fable.simharness import (
    BenchmarkRow,
    SimulationConfig,
    generate_data,
    generate_data_with_scores,
    generate_truth,
    rel_spectral_error,
    run_study,
    runtime_benchmark,
)


def truth_rng(seed):
    return np.random.default_rng(np.random.SeedSequence((seed, 0)))


def metric_fields(records):
    keys = ("config_id", "replicate", "rel_error", "coverage", "mean_width", "error")
    return [tuple(getattr(r, k) for k in keys) for r in records]


class TestSimulationConfig:
    def test_config_id(self):
        cfg = SimulationConfig(n=500, p=1000, k_true=10, replicates=2)
        assert cfg.config_id == "n500_p1000_k10"

    def test_defaults(self):
        cfg = SimulationConfig(n=50, p=200)
        assert cfg.k_true == 10
        assert cfg.spike_prob == 0.5
        assert cfg.noise_lo == 0.5 and cfg.noise_hi == 5.0
        assert cfg.interval_method == "asymptotic"
        assert cfg.fit_rank == "true"

    def test_rejects_tiny_n(self):
        with pytest.raises(DimensionMismatch):
            SimulationConfig(n=1, p=10)

    def test_rejects_rank_above_dimensions(self):
        with pytest.raises(ValueError, match="k_true"):
            SimulationConfig(n=20, p=10, k_true=11)

    def test_rejects_zero_replicates(self):
        with pytest.raises(ValueError, match="replicates"):
            SimulationConfig(n=20, p=10, k_true=2, replicates=0)

    def test_rejects_tracked_above_p(self):
        with pytest.raises(ValueError, match="tracked"):
            SimulationConfig(n=20, p=10, k_true=2, tracked=11)

    def test_rejects_bad_spike_prob(self):
        with pytest.raises(ValueError, match="spike_prob"):
            SimulationConfig(n=20, p=10, k_true=2, tracked=5, spike_prob=1.5)

    def test_rejects_bad_noise_bounds(self):
        with pytest.raises(ValueError, match="noise"):
            SimulationConfig(n=20, p=10, k_true=2, tracked=5, noise_lo=0.0)
        with pytest.raises(ValueError, match="noise"):
            SimulationConfig(n=20, p=10, k_true=2, tracked=5,
                             noise_lo=2.0, noise_hi=1.0)

    def test_rejects_unknown_fit_rank_string(self):
        with pytest.raises(ValueError, match="fit_rank"):
            SimulationConfig(n=20, p=10, k_true=2, tracked=5, fit_rank="auto")

    def test_rejects_unknown_interval_method(self):
        with pytest.raises(ValueError, match="interval_method"):
            SimulationConfig(n=20, p=10, k_true=2, tracked=5,
                             interval_method="bootstrap")


class TestGenerateTruth:
    def test_shapes(self):
        cfg = SimulationConfig(n=50, p=80, k_true=4, tracked=10)
        truth = generate_truth(cfg, truth_rng(0))
        assert truth.loadings.shape == (80, 4)
        assert truth.diag.shape == (80,)

    def test_zero_fraction_matches_spike_prob(self):
        # 1e5 loading entries; binomial sd is about 0.0016
        cfg = SimulationConfig(n=50, p=10_000, k_true=10, tracked=10, seed=3)
        truth = generate_truth(cfg, truth_rng(3))
        frac = np.mean(truth.loadings == 0.0)
        assert abs(frac - 0.5) < 0.01

    def test_noise_uniform_on_interval(self):
        # 1e5 uniform draws; sd of the mean is about 0.004
        cfg = SimulationConfig(n=50, p=100_000, k_true=1, tracked=10, seed=4)
        truth = generate_truth(cfg, truth_rng(4))
        assert truth.diag.min() >= 0.5
        assert truth.diag.max() <= 5.0
        assert abs(truth.diag.mean() - 2.75) < 0.02

    def test_slab_scale(self):
        cfg = SimulationConfig(n=50, p=1000, k_true=5, tracked=10, seed=5,
                               slab_sd=0.5)
        truth = generate_truth(cfg, truth_rng(5))
        nonzero = truth.loadings[truth.loadings != 0.0]
        assert abs(nonzero.std() - 0.5) < 0.03

    def test_spike_prob_limits(self):
        base = SimulationConfig(n=50, p=60, k_true=3, tracked=10, seed=6)
        dense = generate_truth(replace(base, spike_prob=0.0), truth_rng(6))
        assert np.all(dense.loadings != 0.0)
        empty = generate_truth(replace(base, spike_prob=1.0), truth_rng(6))
        assert np.all(empty.loadings == 0.0)

    def test_deterministic(self):
        cfg = SimulationConfig(n=50, p=70, k_true=3, tracked=10, seed=8)
        a = generate_truth(cfg, truth_rng(8))
        b = generate_truth(cfg, truth_rng(8))
        npt.assert_array_equal(a.loadings, b.loadings)
        npt.assert_array_equal(a.diag, b.diag)


class TestGenerateData:
    def test_shape_and_centered(self):
        cfg = SimulationConfig(n=40, p=30, k_true=2, tracked=10)
        truth = generate_truth(cfg, truth_rng(0))
        dm = generate_data(truth, 40, np.random.default_rng(1))
        assert dm.values.shape == (40, 30)
        assert dm.centered
        npt.assert_allclose(dm.values.mean(axis=0), 0.0, atol=1e-12)

    def test_scores_variant_matches_and_exposes_factors(self):
        cfg = SimulationConfig(n=60, p=25, k_true=3, tracked=10)
        truth = generate_truth(cfg, truth_rng(5))
        dm, scores = generate_data_with_scores(truth, 60, np.random.default_rng(9))
        plain = generate_data(truth, 60, np.random.default_rng(9))
        npt.assert_array_equal(dm.values, plain.values)
        assert scores.shape == (60, 3)
        # The scores are the pre-centering draws: data minus the factor
        # part must be centered white noise scaled by the truth diagonal.
        resid = dm.values - (scores - scores.mean(axis=0)) @ truth.loadings.T
        npt.assert_allclose(resid.mean(axis=0), 0.0, atol=1e-12)

    def test_zero_loadings_give_independent_noise(self):
        cfg = SimulationConfig(n=50, p=40, k_true=3, tracked=10, spike_prob=1.0)
        truth = generate_truth(cfg, truth_rng(1))
        dm = generate_data(truth, 5000, np.random.default_rng(3))
        var = dm.values.var(axis=0, ddof=1)
        # per-column sample variance has sd sigma^2 * sqrt(2/(n-1))
        bands = 5 * truth.diag * np.sqrt(2.0 / 4999)
        npt.assert_array_less(np.abs(var - truth.diag), bands)

    def test_sample_covariance_matches_truth(self):
        # entrywise 3 MC SEs against the law-of-large-numbers limit
        cfg = SimulationConfig(n=50, p=5, k_true=3, tracked=5, seed=12)
        truth = generate_truth(cfg, truth_rng(12))
        m = 100_000
        big = generate_data(truth, m, np.random.default_rng(2)).values
        sample_cov = np.cov(big, rowvar=False)
        dense = truth.dense()
        d = np.diag(dense)
        se = np.sqrt((np.outer(d, d) + dense**2) / m)
        bad = np.abs(sample_cov - dense) > 3 * se
        # a 25-entry grid can brush a 3-SE band; allow one excursion
        assert bad.sum() <= 1

    def test_deterministic(self):
        cfg = SimulationConfig(n=30, p=20, k_true=2, tracked=10)
        truth = generate_truth(cfg, truth_rng(0))
        a = generate_data(truth, 30, np.random.default_rng(7)).values
        b = generate_data(truth, 30, np.random.default_rng(7)).values
        assert a.tobytes() == b.tobytes()


class TestRelSpectralError:
    def test_zero_for_identical(self):
        cfg = SimulationConfig(n=30, p=25, k_true=2, tracked=10)
        truth = generate_truth(cfg, truth_rng(0))
        assert rel_spectral_error(truth, truth) < 1e-12

    def test_doubled_truth_gives_one(self):
        from fable.linalg import StructuredCovariance

        cfg = SimulationConfig(n=30, p=25, k_true=2, tracked=10, seed=20)
        truth = generate_truth(cfg, truth_rng(20))
        doubled = StructuredCovariance(
            truth.loadings * np.sqrt(2.0), truth.diag * 2.0
        )
        npt.assert_allclose(rel_spectral_error(truth, doubled), 1.0, rtol=1e-6)

    def test_matches_dense_oracle(self):
        cfg = SimulationConfig(n=30, p=10, k_true=3, tracked=10, seed=21)
        truth = generate_truth(cfg, truth_rng(21))
        other = generate_truth(cfg, truth_rng(22))
        got = rel_spectral_error(truth, other, tol=1e-12)
        diff = truth.dense() - other.dense()
        want = np.abs(np.linalg.eigvalsh(diff)).max()
        want /= np.abs(np.linalg.eigvalsh(truth.dense())).max()
        npt.assert_allclose(got, want, rtol=1e-8)

    def test_precomputed_norm_agrees(self):
        cfg = SimulationConfig(n=30, p=35, k_true=3, tracked=10, seed=23)
        truth = generate_truth(cfg, truth_rng(23))
        other = generate_truth(cfg, truth_rng(24))
        norm = np.abs(np.linalg.eigvalsh(truth.dense())).max()
        free = rel_spectral_error(truth, other)
        pinned = rel_spectral_error(truth, other, truth_norm=norm)
        npt.assert_allclose(free, pinned, rtol=1e-5)


@pytest.fixture(scope="module")
def small_result():
    cfg = SimulationConfig(n=150, p=200, k_true=4, replicates=4, seed=7,
                           tracked=25)
    return cfg, run_study([cfg])


class TestRunStudy:
    def test_record_count_and_health(self, small_result):
        cfg, res = small_result
        assert len(res.records) == 4
        for rec in res.records:
            assert rec.error is None
            assert 0.0 < rec.rel_error < 1.0
            assert 0.8 <= rec.coverage <= 1.0
            assert rec.mean_width > 0.0
            assert rec.fit_seconds > 0.0
            assert rec.sample_seconds == 0.0

    def test_summary_aggregates(self, small_result):
        cfg, res = small_result
        s = res.summaries[0]
        assert s.config_id == cfg.config_id
        assert (s.n, s.p, s.k_true) == (150, 200, 4)
        assert s.replicates_done == 4 and s.failures == 0
        rels = [r.rel_error for r in res.records]
        npt.assert_allclose(s.mean_rel_error, np.mean(rels))
        npt.assert_allclose(s.median_rel_error, np.median(rels))

    def test_audit_pairs_cover_tracked_submatrix(self, small_result):
        cfg, res = small_result
        audit = res.audits[cfg.config_id]
        assert len(audit.pairs) == 25 * 26 // 2
        assert audit.n_grids == 4
        # replicate-level coverage means agree with the audit's pooled mean
        npt.assert_allclose(
            audit.mean_coverage,
            np.mean([r.coverage for r in res.records]),
        )

    def test_deterministic_metrics(self, small_result):
        cfg, res = small_result
        again = run_study([cfg])
        assert metric_fields(res.records) == metric_fields(again.records)

    def test_thread_count_does_not_change_metrics(self, small_result):
        cfg, res = small_result
        threaded = run_study([cfg], threads=3)
        assert metric_fields(res.records) == metric_fields(threaded.records)
        assert res.summaries == threaded.summaries

    def test_coverage_near_nominal(self):
        cfg = SimulationConfig(n=200, p=400, k_true=5, replicates=6, seed=11,
                               tracked=30)
        s = run_study([cfg]).summaries[0]
        assert 0.90 <= s.mean_coverage <= 0.99

    def test_error_decreases_with_n(self):
        small = SimulationConfig(n=100, p=300, k_true=4, replicates=4, seed=3,
                                 tracked=20)
        large = replace(small, n=400)
        res = run_study([small, large])
        assert res.summaries[1].mean_rel_error < res.summaries[0].mean_rel_error
        assert res.summaries[1].median_rel_error < res.summaries[0].median_rel_error

    def test_multiple_configs_ordered(self):
        a = SimulationConfig(n=60, p=40, k_true=2, replicates=2, seed=1, tracked=10)
        b = SimulationConfig(n=60, p=80, k_true=2, replicates=2, seed=1, tracked=10)
        res = run_study([a, b])
        assert [s.config_id for s in res.summaries] == [a.config_id, b.config_id]
        assert [r.config_id for r in res.records] == [a.config_id] * 2 + [b.config_id] * 2

    def test_failures_are_captured_not_raised(self):
        # rank n-1 leaves no residual, so the noise floor trips every time
        cfg = SimulationConfig(n=150, p=200, k_true=4, replicates=2, seed=7,
                               tracked=25, fit_rank=149)
        res = run_study([cfg])
        s = res.summaries[0]
        assert s.failures == 2 and s.replicates_done == 0
        assert all(r.error is not None for r in res.records)
        assert all(np.isnan(r.rel_error) for r in res.records)
        assert np.isnan(s.mean_rel_error)
        assert cfg.config_id not in res.audits

    def test_sample_quantile_intervals(self):
        cfg = SimulationConfig(n=150, p=200, k_true=4, replicates=2, seed=7,
                               tracked=25, interval_method="sample_quantile",
                               n_samples=300)
        res = run_study([cfg])
        s = res.summaries[0]
        assert s.failures == 0
        assert 0.85 <= s.mean_coverage <= 1.0
        assert all(r.sample_seconds > 0.0 for r in res.records)

    def test_rank_selection_path(self):
        cfg = SimulationConfig(n=300, p=200, k_true=3, replicates=2, seed=5,
                               tracked=15, fit_rank="select")
        s = run_study([cfg]).summaries[0]
        assert s.failures == 0
        assert s.mean_rel_error < 1.0


class TestRuntimeBenchmark:
    def test_sampling_time_grows_with_p(self):
        # 10x gap in p so scheduler noise cannot flip the ordering
        rows = runtime_benchmark([200, 2000], n=100, k_true=3, n_samples=200,
                                 repeats=5, seed=13)
        assert rows[0].sample_seconds < rows[1].sample_seconds
        assert rows[0].fit_seconds < rows[1].fit_seconds

    def test_rows_and_fields(self):
        rows = runtime_benchmark([60, 120], n=80, k_true=3, n_samples=50,
                                 repeats=2, seed=9)
        assert [r.p for r in rows] == [60, 120]
        for row in rows:
            assert isinstance(row, BenchmarkRow)
            assert row.n == 80
            assert row.n_samples == 50
            assert row.fit_seconds > 0.0
            assert row.sample_seconds > 0.0
            assert row.mean_seconds > 0.0
