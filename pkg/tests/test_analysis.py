import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demosim.analysis import (
    ALL_METRICS,
    SERIES_METRICS,
    GroupFilter,
    SensitivityReport,
    band_counts_to_ages,
    dependency_ratios,
    growth_decomposition,
    median_age,
    metric_series,
    pyramid,
    reproductive_share,
    sampling_error,
    sensitivity,
    sex_ratio,
    stats_rows,
    weighted_median,
)
from demosim.core import N_BANDS, N_ETHNICITIES, EthnicAggregate, Sex, SimDate
from demosim.errors import ConfigError, DataError, DemosimError
from demosim.scenarios import builtin_scenario

mpmath.mp.dps = 50


def _snapshot():
    return np.zeros((2, N_BANDS, N_ETHNICITIES), dtype=np.int64)


# --- filtering ---------------------------------------------------------------


class TestGroupFilter:
    def test_default_is_everything(self, codebook):
        assert GroupFilter().mask(codebook).all()

    def test_sex_and_aggregate_restrictions(self, codebook):
        f = GroupFilter.for_sex(Sex.FEMALE)
        m = f.mask(codebook)
        assert m[0].all() and not m[1].any()

        eu = GroupFilter.for_aggregate(EthnicAggregate.EU_IMMIGRANT)
        m = eu.mask(codebook)
        eu_eths = codebook.aggregates == int(EthnicAggregate.EU_IMMIGRANT)
        assert (m[:, :, eu_eths]).all() and not m[:, :, ~eu_eths].any()

    def test_conjunction(self, codebook):
        f = GroupFilter.for_sex(Sex.MALE) & GroupFilter.for_aggregate(EthnicAggregate.NATIVE_BRITISH)
        m = f.mask(codebook)
        native = codebook.aggregates == int(EthnicAggregate.NATIVE_BRITISH)
        assert m[1, :, native].all()
        assert not m[0].any() and not m[1, :, ~native].any()
        assert f.name == "M&native_british"

    def test_contradictory_aggregates_select_nothing(self, codebook):
        f = GroupFilter(aggregates=(EthnicAggregate.NATIVE_BRITISH, EthnicAggregate.EU_IMMIGRANT))
        assert not f.mask(codebook).any()

    def test_apply_zeroes_the_complement(self, codebook):
        snap = _snapshot()
        snap[:] = 7
        out = GroupFilter.for_sex(Sex.FEMALE).apply(snap, codebook)
        assert out[0].sum() == 7 * N_BANDS * N_ETHNICITIES and out[1].sum() == 0

    def test_explicit_ethnicity_intersection(self, codebook):
        a = GroupFilter(ethnicities=(0, 1, 2), name="abc")
        b = GroupFilter(ethnicities=(2, 3), name="cd")
        assert (a & b).ethnicities == (2,)


# --- age structure ---------------------------------------------------------------


class TestWeightedMedian:
    def test_hand_cases(self):
        assert weighted_median([5.0], [3.0]) == 5.0
        assert weighted_median([1, 2, 3], [1, 1, 1]) == 2.0
        # exact half-mass boundary averages the straddling values
        assert weighted_median([1, 2, 3, 4], [1, 1, 1, 1]) == 2.5
        assert weighted_median([1, 2, 3], [1, 1, 2]) == 2.5
        # zero-weight values are invisible, even at the boundary
        assert weighted_median([1, 1.5, 2, 3, 4], [1, 0, 1, 1, 1]) == 2.5
        assert weighted_median([1, 2], [0, 1]) == 2.0

    def test_unsorted_input(self):
        assert weighted_median([3, 1, 2], [1, 1, 1]) == 2.0

    @given(
        st.lists(
            st.tuples(st.integers(-50, 50), st.integers(0, 6)), min_size=1, max_size=30
        ).filter(lambda vw: sum(w for _, w in vw) > 0)
    )
    @settings(max_examples=300)
    def test_matches_expanded_multiset_median(self, vw):
        values = np.array([v for v, _ in vw], dtype=float)
        weights = np.array([w for _, w in vw], dtype=float)
        expanded = np.repeat(values, weights.astype(int))
        assert weighted_median(values, weights) == np.median(expanded)

    def test_rejects_bad_input(self):
        with pytest.raises(DemosimError, match="parallel 1-d"):
            weighted_median([1, 2], [1])
        with pytest.raises(DemosimError, match="negative weights"):
            weighted_median([1, 2], [1, -1])
        with pytest.raises(DataError, match="empty distribution"):
            weighted_median([1, 2], [0, 0])


class TestBandSpread:
    def test_uniform_within_bands(self):
        bands = np.zeros(N_BANDS)
        bands[4] = 50.0  # ages 20-24
        bands[17] = 30.0  # 85+
        ages = band_counts_to_ages(bands)
        assert ages.sum() == pytest.approx(80.0)
        assert (ages[20:25] == 10.0).all()
        assert (ages[85:100] == 2.0).all()
        assert ages[[19, 25, 84]].sum() == 0

    def test_shape_guard(self):
        with pytest.raises(DemosimError, match="band counts"):
            band_counts_to_ages(np.zeros(5))

    def test_median_age_of_one_band(self, codebook):
        snap = _snapshot()
        snap[0, 4, 0] = 100
        assert median_age(snap, codebook=codebook) == 22.0


# --- shares and ratios --------------------------------------------------------------


class TestRatios:
    def test_reproductive_share_prorates_the_50s_band(self):
        snap = _snapshot()
        snap[int(Sex.FEMALE), 5, 0] = 1000  # 25-29: fully fertile
        snap[int(Sex.FEMALE), 10, 0] = 500  # 50-54: one year in five counts
        snap[int(Sex.MALE), 5, 0] = 1000
        assert reproductive_share(snap) == pytest.approx((1000 + 100) / 2500)

    def test_sex_ratio(self):
        snap = _snapshot()
        snap[int(Sex.MALE), 6, 2] = 300
        snap[int(Sex.FEMALE), 6, 2] = 200
        assert sex_ratio(snap) == pytest.approx(1.5)
        snap[int(Sex.FEMALE)] = 0
        with pytest.raises(DataError, match="no females"):
            sex_ratio(snap)

    def test_dependency_ratios(self):
        snap = _snapshot()
        snap[0, 1, 0] = 100  # 5-9: child
        snap[0, 5, 0] = 500  # 25-29: working
        snap[0, 13, 0] = 100  # 65-69: split 1/5 working, 4/5 elderly
        snap[0, 14, 0] = 100  # 70-74: elderly
        got = dependency_ratios(snap)
        working = 500 + 20.0
        assert got["total"] == pytest.approx((100 + 180) / working)
        assert got["old_age"] == pytest.approx(180 / working)
        with pytest.raises(DataError, match="no working-age"):
            dependency_ratios(_snapshot())

    def test_empty_snapshot_guards(self):
        with pytest.raises(DataError, match="empty snapshot"):
            reproductive_share(_snapshot())

    def test_pyramid_collapses_ethnicity(self):
        snap = _snapshot()
        snap[1, 3, :] = 2
        out = pyramid(snap)
        assert out.shape == (2, N_BANDS)
        assert out[1, 3] == 2 * N_ETHNICITIES and out.sum() == 2 * N_ETHNICITIES


# --- growth decomposition ---------------------------------------------------------


class TestGrowth:
    def test_components_sum_to_population_change(self, quick_run, codebook):
        dates = quick_run.snapshot_dates()
        for agg in [None, *EthnicAggregate]:
            if agg is None:
                mask = np.ones(N_ETHNICITIES, dtype=bool)
            else:
                mask = codebook.aggregates == int(agg)
            for a, b in zip(dates, dates[1:]):
                parts = growth_decomposition(quick_run.ledger, a, b, agg, codebook)
                delta = (
                    quick_run.snapshot(b)[:, :, mask].sum()
                    - quick_run.snapshot(a)[:, :, mask].sum()
                )
                assert parts["natural_growth"] + parts["net_migration"] == delta

    def test_window_validation(self, quick_run):
        led = quick_run.ledger
        with pytest.raises(DemosimError, match="outside the ledger range"):
            growth_decomposition(led, SimDate(1990, 0), SimDate(1992, 0))
        with pytest.raises(DemosimError, match="outside the ledger range"):
            growth_decomposition(led, SimDate(2002, 0), SimDate(2050, 0))


# --- sampling error ----------------------------------------------------------------


class TestSamplingError:
    def test_matches_dirichlet_posterior_moments(self):
        rng = np.random.default_rng(0)
        for _ in range(40):
            counts = rng.integers(0, 5000, rng.integers(2, 9)).astype(float)
            mean, std = sampling_error(counts)
            alpha = [mpmath.mpf(repr(float(c))) + 1 for c in counts]
            a0 = mpmath.fsum(alpha)
            for i, a in enumerate(alpha):
                want_mean = a / a0
                want_std = mpmath.sqrt(a * (a0 - a) / (a0 * a0 * (a0 + 1)))
                assert abs(mean[i] - want_mean) <= 1e-12 * want_mean
                assert abs(std[i] - want_std) <= 1e-12 * want_std

    def test_large_counts_approach_binomial_error(self):
        n, p = 200_000, 0.3
        mean, std = sampling_error(np.array([n * p, n * (1 - p)]))
        assert mean[0] == pytest.approx(p, rel=1e-3)
        assert std[0] == pytest.approx(np.sqrt(p * (1 - p) / n), rel=1e-2)

    def test_input_guards(self):
        with pytest.raises(DemosimError, match="at least two"):
            sampling_error(np.array([4.0]))
        with pytest.raises(DemosimError, match="negative"):
            sampling_error(np.array([4.0, -1.0]))
        with pytest.raises(DemosimError, match="1-d"):
            sampling_error(np.ones((2, 2)))


# --- sensitivity --------------------------------------------------------------------


class TestSensitivity:
    def test_linear_runner_gives_exact_derivative(self):
        sc = builtin_scenario("2nd-enlargement")
        runner = lambda s: np.array([2.0 * s.f_enl, -1.0 * s.f_enl + 3.0])
        rep = sensitivity(runner, sc, "f_enl")
        assert rep.base_value == 2.0
        assert rep.derivative == pytest.approx([2.0, -1.0], rel=1e-12)
        assert rep.max_abs_derivative() == pytest.approx(2.0)
        assert rep.warnings == [] and rep.joint_residual is None

    def test_zero_base_falls_back_to_absolute_step(self, caplog):
        sc = builtin_scenario("status-quo")  # f_ret = 0
        calls = []
        runner = lambda s: (calls.append(s.f_ret), np.array([s.f_ret]))[1]
        rep = sensitivity(runner, sc, "f_ret")
        assert rep.derivative == pytest.approx([1.0])
        assert sorted(calls) == [0.0, 0.05]
        assert any("absolute step" in w for w in rep.warnings)

    def test_joint_residual_vanishes_for_additive_response(self):
        sc = builtin_scenario("radical")
        runner = lambda s: np.array([3.0 * s.f_em - 2.0 * s.f_ret + 1.0])
        rep = sensitivity(runner, sc, "f_em", joint=True)
        assert set(rep.values) == {"low", "high", "base", "ret_high", "joint_high"}
        assert abs(rep.joint_residual[0]) <= 1e-9

    def test_joint_residual_recovers_the_interaction_term(self):
        sc = builtin_scenario("radical")
        runner = lambda s: np.array([5.0 * s.f_em * s.f_ret])
        rep = sensitivity(runner, sc, "f_em", joint=True)
        d_em = 0.05 * sc.f_em
        d_ret = 0.05 * sc.f_ret
        assert rep.joint_residual[0] == pytest.approx(5.0 * d_em * d_ret, rel=1e-9)

    def test_parallel_jobs_match_serial(self):
        sc = builtin_scenario("radical")
        runner = lambda s: np.array([s.f_em ** 2, s.f_ret])
        a = sensitivity(runner, sc, "f_em", joint=True, jobs=1)
        b = sensitivity(runner, sc, "f_em", joint=True, jobs=3)
        assert (a.derivative == b.derivative).all()
        assert (a.joint_residual == b.joint_residual).all()

    def test_guards(self):
        sc = builtin_scenario("radical")
        with pytest.raises(ConfigError, match="unknown sensitivity parameter"):
            sensitivity(lambda s: np.zeros(1), sc, "f_tfr")
        with pytest.raises(ConfigError, match="without Brexit"):
            sensitivity(lambda s: np.zeros(1), sc, "f_enl")
        with pytest.raises(ConfigError, match="pass param='f_em'"):
            sensitivity(lambda s: np.zeros(1), sc, "f_ret", joint=True)


# --- metric series and stats rows ------------------------------------------------


class TestMetricSeries:
    def test_snapshot_metrics_align_with_direct_evaluation(self, quick_run, codebook):
        dates, totals = metric_series(quick_run, "total-population", codebook)
        assert dates == quick_run.snapshot_dates()
        want = [quick_run.snapshot(d).sum() * quick_run.scale_factor for d in dates]
        assert totals == pytest.approx(want)

        _, medians = metric_series(quick_run, "median-age", codebook)
        assert medians[0] == median_age(quick_run.snapshot(dates[0]))

    def test_eu_inflow_is_per_step(self, quick_run, codebook):
        dates, inflow = metric_series(quick_run, "eu-inflow", codebook)
        assert len(dates) == quick_run.config.n_steps
        eu = codebook.aggregates == int(EthnicAggregate.EU_IMMIGRANT)
        led = quick_run.ledger.immigrants.reshape(-1, 2, N_BANDS, N_ETHNICITIES)
        want = led[:, :, :, eu].sum(axis=(1, 2, 3)) * quick_run.scale_factor
        assert inflow == pytest.approx(want)
        assert inflow.sum() > 0

    def test_eu_share_lies_in_unit_interval(self, quick_run, codebook):
        _, share = metric_series(quick_run, "eu-share", codebook)
        assert ((share > 0) & (share < 1)).all()

    def test_rejects_non_series_metrics(self, quick_run):
        with pytest.raises(ConfigError, match="not a single-series metric"):
            metric_series(quick_run, "growth")


class TestStatsRows:
    def test_metric_sets(self):
        assert SERIES_METRICS < ALL_METRICS
        assert {"dependency", "growth", "pyramid"} <= ALL_METRICS

    def test_unknown_metric(self, quick_run):
        with pytest.raises(ConfigError, match="unknown metric 'volume'"):
            stats_rows(quick_run, "volume")

    def test_pyramid_is_not_a_stats_metric(self, quick_run):
        with pytest.raises(ConfigError, match="pyramid is not a stats metric"):
            stats_rows(quick_run, "pyramid")

    def test_row_schema(self, quick_run, codebook):
        n_snaps = len(quick_run.snapshot_dates())
        for metric in sorted(ALL_METRICS - {"pyramid"}):
            rows = stats_rows(quick_run, metric, codebook)
            assert rows, metric
            for row in rows:
                assert len(row) == 6
                date, scen, _, _, value, std = row
                assert scen == "status-quo"
                assert isinstance(value, (int, float)) and np.isfinite(value)
                assert std == "" or float(std) >= 0

    def test_growth_rows_decompose_scaled_population_change(self, quick_run, codebook):
        rows = stats_rows(quick_run, "growth", codebook)
        dates = quick_run.snapshot_dates()
        per_pair = 2 * (1 + len(EthnicAggregate))
        assert len(rows) == (len(dates) - 1) * per_pair
        a, b = dates[0], dates[1]
        got = sum(
            r[4] for r in rows
            if r[0] == str(a) and r[3] == "all"
        )
        delta = (quick_run.snapshot(b).sum() - quick_run.snapshot(a).sum()) * quick_run.scale_factor
        assert got == pytest.approx(delta)

    def test_share_rows_carry_sampling_error(self, quick_run, codebook):
        rows = stats_rows(quick_run, "eu-share", codebook)
        assert all(r[3] == "eu_immigrant" and 0 < float(r[5]) < 0.01 for r in rows)
        rows = stats_rows(quick_run, "reproductive-share", codebook)
        snap = quick_run.snapshot(quick_run.snapshot_dates()[0])
        assert rows[0][4] == pytest.approx(reproductive_share(snap))
