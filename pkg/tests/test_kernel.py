import json

import numpy as np
import pytest

from demosim.core import N_BANDS, N_CELLS, N_ETHNICITIES, SimDate
from demosim.errors import ConfigError, ConservationError, DemosimError
from demosim.kernel import EventLedger, RunConfig, RunResult, run
from demosim.migration import N_COHORTS
from demosim.scenarios import builtin_scenario


class TestRunConfig:
    def test_defaults_cover_the_full_horizon(self):
        cfg = RunConfig()
        assert cfg.n_steps == 200
        cfg.validate()

    def test_rejects_non_quarterly_steps(self):
        with pytest.raises(ConfigError, match="step_months must be 3"):
            RunConfig(step_months=1).validate()

    def test_rejects_reversed_span(self):
        with pytest.raises(ConfigError, match="precedes start"):
            RunConfig(start=SimDate(2000, 0), end=SimDate(1999, 0)).validate()

    def test_rejects_empty_population(self):
        with pytest.raises(ConfigError, match="population_size"):
            RunConfig(population_size=0).validate()

    def test_brexit_wave_must_fit_inside_the_run(self):
        cfg = RunConfig(end=SimDate(2018, 0), scenario=builtin_scenario("radical"))
        with pytest.raises(ConfigError, match="wave ends 2019q3, after run end 2018q0"):
            cfg.validate()
        RunConfig(end=SimDate(2019, 3), scenario=builtin_scenario("radical")).validate()

    def test_scenario_validation_is_reached(self):
        sc = type(builtin_scenario("radical"))("x", brexit=True, f_ex=3.0)
        with pytest.raises(ConfigError, match="f_ex"):
            RunConfig(scenario=sc).validate()


class TestLedger:
    def test_step_index_bounds(self):
        led = EventLedger(4, SimDate(1991, 0))
        assert led.step_index(SimDate(1991, 0)) == 0
        assert led.step_index(SimDate(1991, 3)) == 3
        with pytest.raises(DemosimError, match="outside ledger range"):
            led.step_index(SimDate(1992, 0))

    def test_conservation_catches_a_corrupted_cell(self, quick_run):
        led = quick_run.ledger
        assert led.check_conservation()
        led.births[3, 17] += 1
        with pytest.raises(ConservationError, match="living balance broken at step 3 cell 17"):
            led.check_conservation()
        led.births[3, 17] -= 1
        led.pool_end[5, 40] += 2
        with pytest.raises(ConservationError, match="pool balance broken"):
            led.check_conservation()
        led.pool_end[5, 40] -= 2
        assert led.check_conservation()


class TestRunStructure:
    def test_snapshot_grid_and_start_size(self, quick_run, dataset):
        cfg = quick_run.config
        dates = quick_run.snapshot_dates()
        assert dates[0] == cfg.start and dates[-1] == cfg.end
        assert len(dates) == 13  # one per 1 July, both ends inclusive
        assert all(d.quarter == 0 for d in dates)
        start = quick_run.snapshot(cfg.start)
        assert start.sum() == cfg.population_size
        want_scale = dataset.census.total(1991) / cfg.population_size
        assert quick_run.scale_factor == pytest.approx(want_scale, rel=1e-12)

    def test_only_july_snapshots_exist(self, quick_run):
        with pytest.raises(DemosimError, match="1-July dates only"):
            quick_run.snapshot(SimDate(1995, 2))

    def test_events_happen(self, quick_run):
        led = quick_run.ledger
        assert led.births.sum() > 0
        assert led.deaths.sum() > 0
        assert led.immigrants.sum() > 0
        assert led.emigrants.sum() > 0
        # births land in the infant band only
        born_cells = np.flatnonzero(led.births.sum(axis=0))
        bands = (born_cells // N_ETHNICITIES) % N_BANDS
        assert (bands == 0).all()

    def test_migration_log_shape_and_activity(self, quick_run):
        mlog = quick_run.migration_log
        assert mlog.shape == (quick_run.config.n_steps, 2, N_ETHNICITIES, N_COHORTS)
        assert np.abs(mlog).sum() > 0

    def test_pool_holds_native_emigrants(self, quick_run):
        # status-quo has no waves, so the pool only ever grows
        pool_sizes = [quick_run.snapshots[q][1].sum() for q in sorted(quick_run.snapshots)]
        assert pool_sizes[0] == 0
        assert pool_sizes[-1] > 0
        assert all(b >= a for a, b in zip(pool_sizes, pool_sizes[1:]))


class TestDeterminism:
    CFG = dict(end=SimDate(1994, 0), population_size=20_000)

    def test_same_config_same_digest(self, dataset, schedule):
        cfg = RunConfig(seed=5, **self.CFG)
        a = run(cfg, dataset, schedule)
        b = run(cfg, dataset, schedule)
        assert a.digest() == b.digest()

    def test_seed_changes_everything(self, dataset, schedule):
        a = run(RunConfig(seed=5, **self.CFG), dataset, schedule)
        b = run(RunConfig(seed=6, **self.CFG), dataset, schedule)
        assert a.digest() != b.digest()

    def test_migration_off_scrubs_all_flows(self, dataset):
        cfg = RunConfig(seed=5, migration=False, **self.CFG)
        res = run(cfg, dataset, schedule=None)
        assert res.ledger.check_conservation()
        assert res.ledger.immigrants.sum() == 0
        assert res.ledger.emigrants.sum() == 0
        assert res.ledger.pool_end.sum() == 0

    def test_migration_on_requires_schedule(self, dataset):
        with pytest.raises(ConfigError, match="no calibrated schedule"):
            run(RunConfig(**self.CFG), dataset, schedule=None)


class TestWaveExecution:
    def test_wave_log_covers_the_window(self, brexit_run):
        sc = brexit_run.config.scenario
        log = brexit_run.wave_log
        assert len(log) == sc.wave_quarters
        assert log[0]["date"] == str(sc.wave_start)
        assert log[-1]["date"] == str(sc.wave_start.add_quarters(sc.wave_quarters - 1))
        assert sum(e["exodus"] for e in log) > 0
        assert sum(e["returns"] for e in log) > 0
        assert all(e["post_brexit_selected"] == 0 for e in log)

    def test_exodus_shrinks_the_eu_population(self, brexit_run, codebook, dataset):
        from demosim.core import EthnicAggregate

        eu = codebook.aggregates == int(EthnicAggregate.EU_IMMIGRANT)
        sc = brexit_run.config.scenario

        def eu_total(year):
            return brexit_run.snapshot(SimDate(year, 0))[:, :, eu].sum()

        before = eu_total(sc.wave_start.year)
        after = eu_total(sc.wave_start.year + 3)
        assert after < before


class TestSaveLoad:
    def test_round_trip(self, quick_run, tmp_path):
        quick_run.save(tmp_path / "r")
        back = RunResult.load(tmp_path / "r")
        assert back.config == quick_run.config
        assert back.scale_factor == quick_run.scale_factor
        assert back.wave_log == quick_run.wave_log
        assert sorted(back.snapshots) == sorted(quick_run.snapshots)
        for q in quick_run.snapshots:
            assert (back.snapshots[q] == quick_run.snapshots[q]).all()
        for name in ("births", "deaths", "immigrants", "emigrants"):
            assert (getattr(back.ledger, name) == getattr(quick_run.ledger, name)).all()

    def test_manifest_carries_digest_and_versions(self, quick_run, tmp_path):
        quick_run.save(tmp_path / "r")
        manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
        assert manifest["digest"] == quick_run.digest()
        assert "demosim" in manifest["versions"]
        assert manifest["config"]["scenario"]["name"] == "status-quo"

    def test_brexit_config_round_trips(self, dataset, schedule, tmp_path):
        cfg = RunConfig(
            end=SimDate(2020, 0), population_size=20_000, seed=3,
            scenario=builtin_scenario("radical"),
        )
        res = run(cfg, dataset, schedule)
        res.save(tmp_path / "r")
        back = RunResult.load(tmp_path / "r")
        assert back.config.scenario == cfg.scenario
        assert back.wave_log == res.wave_log


class TestStepErrorContext:
    def test_failures_name_the_step(self, dataset, schedule):
        # a schedule missing the first decade fails inside step 0
        bad = type(schedule)(schedule.laws[1:], schedule.ks[1:], decades=(2001,))
        cfg = RunConfig(end=SimDate(1992, 0), population_size=5_000)
        with pytest.raises(DemosimError, match=r"step 0 \(1991q0\): no schedule for decade 1991"):
            run(cfg, dataset, bad)
