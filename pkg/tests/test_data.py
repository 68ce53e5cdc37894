import numpy as np
import pytest

from evtol_pinn.data import (
    ColumnMap, MissionProfile, SplitSpec, ingest, read_samples_csv, split_by_cell, synthesize,
    write_samples_csv,
)
from evtol_pinn.ecm import EcmState, simulate
from evtol_pinn.errors import ConfigError, DataError, SchemaError

EVTOL_MAP = ColumnMap(time_s="time_s", current_a="I_mA", voltage_v="Ecell_V", temp_c="Temperature__C",
                      cycle="cycleNumber", current_scale=1e-3, current_sign=-1.0)


def write_cell(path, rows):
    lines = ["time_s,Ecell_V,I_mA,Temperature__C,cycleNumber"]
    lines += [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def small_split(train=("A",), test=("B",), cycles=(1,)):
    return SplitSpec(train=tuple((c, cycles) for c in train), test=tuple((c, cycles) for c in test))


class TestSplit:
    def test_reference_default(self):
        s = SplitSpec.reference_default()
        assert [c for c, _ in s.train] == ["VAH05", "VAH10", "VAH12", "VAH26"]
        assert all(cyc == (1, 50, 1000) for _, cyc in s.train)
        assert s.test == (("VAH11", (600,)),)

    def test_disjoint_enforced(self):
        with pytest.raises(ConfigError, match="both"):
            SplitSpec(train=(("A", (1,)),), test=(("A", (2,)),))

    def test_from_dict(self):
        s = SplitSpec.from_dict({"train": {"A": [1, 2]}, "test": {"B": [3]}})
        assert s.train == (("A", (1, 2)),) and s.test == (("B", (3,)),)


class TestColumnMap:
    def test_duplicate_source(self):
        with pytest.raises(ConfigError, match="more than once"):
            ColumnMap(time_s="t", current_a="t")

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ColumnMap.from_dict({"time": "t"})


class TestIngest:
    def test_dt_derivation_and_units(self, tmp_path):
        write_cell(tmp_path / "A.csv", [(0.0, 4.1, -1000, 25, 1), (1.0, 4.0, -2000, 25, 1)])
        write_cell(tmp_path / "B.csv", [(0.0, 4.1, 0, 25, 1), (2.0, 4.0, 0, 25, 1), (3.0, 4.0, 0, 25, 1)])
        res = ingest(tmp_path, EVTOL_MAP, small_split(), initial_dt=0.5)
        assert [s.dt_s for s in res.train] == [0.5, 1.0]
        assert [s.current_a for s in res.train] == [1.0, 2.0]
        assert all(s.soc is None and s.cell == "A" for s in res.train)
        res = ingest(tmp_path, EVTOL_MAP, small_split())
        assert [s.dt_s for s in res.test] == [1.5, 2.0, 1.0]  # first = median of [2, 1]

    def test_nan_row_dropped(self, tmp_path):
        write_cell(tmp_path / "A.csv", [(0.0, 4.1, 0, 25, 1), (1.0, "nan", 0, 25, 1), (2.0, 4.0, 0, 25, 1),
                                        (3.0, 3.9, 0, 25, 1)])
        write_cell(tmp_path / "B.csv", [(0.0, 4.1, 0, 25, 1), (1.0, 4.1, 0, 25, 1)])
        res = ingest(tmp_path, EVTOL_MAP, small_split())
        assert len(res.train) == 3
        assert res.dropped_rows == 1
        assert [s.t_s for s in res.train] == [0.0, 2.0, 3.0]

    def test_missing_column(self, tmp_path):
        (tmp_path / "A.csv").write_text("time_s,Ecell_V,I_mA,cycleNumber\n0,4,0,1\n")
        with pytest.raises(SchemaError, match="Temperature__C"):
            ingest(tmp_path, EVTOL_MAP, small_split())

    def test_non_monotonic_time(self, tmp_path):
        write_cell(tmp_path / "A.csv", [(0.0, 4.1, 0, 25, 1), (2.0, 4.0, 0, 25, 1), (1.0, 4.0, 0, 25, 1)])
        with pytest.raises(DataError) as info:
            ingest(tmp_path, EVTOL_MAP, small_split())
        assert info.value.row == 2

    def test_cycle_selection_and_fallback(self, tmp_path):
        rows = [(float(i), 4.0, 0, 25, c) for c in (1, 2, 7) for i in range(3)]
        write_cell(tmp_path / "A.csv", rows)
        write_cell(tmp_path / "B.csv", rows)
        split = SplitSpec(train=(("A", (2, 6)),), test=(("B", (1,)),))
        with pytest.raises(DataError, match="no cycle 6"):
            ingest(tmp_path, EVTOL_MAP, split)
        res = ingest(tmp_path, EVTOL_MAP, split, cycle_fallback="nearest")
        assert res.cycle_substitutions == {("A", 6): 7}
        assert [s.cycle for s in res.train] == [2, 2, 2, 7, 7, 7]

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="missing data file"):
            ingest(tmp_path, EVTOL_MAP, small_split())

    def test_canonical_round_trip(self, tmp_path, params):
        data = synthesize(MissionProfile(rest=30.0, cruise=(4.0, 30.0), takeoff=(10.0, 10.0), landing=(10.0, 10.0)),
                          params, 2e-4, 0.005, 3, seed=5)
        write_samples_csv(tmp_path / "s.csv", data.samples)
        assert read_samples_csv(tmp_path / "s.csv") == data.samples
        split = SplitSpec(train=(("SYN000", (1,)), ("SYN001", (51,))), test=(("SYN002", (101,)),))
        res = ingest(tmp_path / "s.csv", ColumnMap.canonical(), split)
        assert res.train + res.test == data.samples


class TestSynthesize:
    profile = MissionProfile(takeoff=(15.0, 20.0), cruise=(4.5, 50.0), landing=(15.0, 20.0), rest=40.0)

    def test_degenerate_generator_equals_simulate(self, params):
        data = synthesize(self.profile, params, 0.0, 0.0, n_missions=2, seed=1)
        for cell in data.mission_cells():
            run = [s for s in data.samples if s.cell == cell]
            traj = simulate(params, EcmState((0.0, 0.0), 1.0), [(s.dt_s, s.current_a) for s in run])
            np.testing.assert_array_equal([s.voltage_v for s in run], traj.v_phy)
            np.testing.assert_array_equal([s.soc for s in run], traj.soc)

    def test_nonlinearity_on_takeoff(self, params):
        prof = MissionProfile(takeoff=(15.0, 20.0), cruise=(4.5, 50.0), landing=(15.0, 20.0), rest=40.0)
        data = synthesize(prof, params, 2e-4, 0.0, n_missions=1, seed=1, level_jitter=0.0)
        takeoff = [i for i, s in enumerate(data.samples) if s.current_a == 15.0]
        assert len(takeoff) == 40  # takeoff + landing phases
        np.testing.assert_allclose(data.nonlinear_v[takeoff], 0.045, rtol=1e-15)
        rest = [i for i, s in enumerate(data.samples) if s.current_a == 0.0]
        assert np.all(data.nonlinear_v[rest] == 0.0)

    def test_power_reduction(self, params):
        prof = MissionProfile(takeoff=(10.0, 5.0), cruise=(5.0, 5.0), landing=(10.0, 5.0), rest=5.0,
                              power_reduction=0.2)
        data = synthesize(prof, params, n_missions=1, seed=0, level_jitter=0.0)
        assert max(s.current_a for s in data.samples) == pytest.approx(8.0)

    def test_deterministic(self, params):
        a = synthesize(self.profile, params, 2e-4, 0.005, n_missions=3, seed=42)
        b = synthesize(self.profile, params, 2e-4, 0.005, n_missions=3, seed=42)
        assert a.samples == b.samples
        c = synthesize(self.profile, params, 2e-4, 0.005, n_missions=3, seed=43)
        assert a.samples != c.samples

    def test_noise_level(self, params):
        data = synthesize(self.profile, params, 0.0, 0.005, n_missions=10, seed=0)
        assert np.std(data.noise_v) == pytest.approx(0.005, rel=0.05)

    def test_missions_are_cells(self, params):
        data = synthesize(self.profile, params, n_missions=4, seed=0, cycle_step=50)
        assert data.mission_cells() == ["SYN000", "SYN001", "SYN002", "SYN003"]
        assert sorted({s.cycle for s in data.samples}) == [1, 51, 101, 151]
        train, test = split_by_cell(data.samples, ["SYN003"])
        assert {s.cell for s in test} == {"SYN003"} and "SYN003" not in {s.cell for s in train}

    @pytest.mark.parametrize("bad", [dict(power_reduction=1.0), dict(rest=0.0), dict(cruise=(4.0, -1.0))])
    def test_profile_validation(self, bad):
        with pytest.raises(ConfigError):
            MissionProfile(**bad)
