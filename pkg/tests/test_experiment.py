import csv
import textwrap

import numpy as np
import pytest

from evtol_pinn import cli, experiment
from evtol_pinn.errors import ConfigError
from evtol_pinn.experiment import REFERENCE_GRID, GridCell, config_from_dict, derive_seed, load_config, run_experiment
from evtol_pinn.features import Mode

ECM = """
[ecm]
r0 = 0.015
branches = [{ r = 0.01, tau = 10.0 }, { r = 0.02, tau = 100.0 }]
capacity_ah = 3.0
ocv_knots = [[0.0, 3.0], [0.1, 3.45], [0.2, 3.55], [0.4, 3.65], [0.6, 3.8], [0.8, 3.95], [1.0, 4.2]]
"""

SMALL = """
[synthetic]
k = {k}
noise_std_v = {noise}
n_missions = 4
test_every = 4

[synthetic.profile]
takeoff = [15.0, 20.0]
cruise = [4.5, 60.0]
landing = [15.0, 20.0]
rest = 60.0

[train]
epochs = {epochs}
batch_size = 64

[timing]
repetitions = 5
"""


def write_config(tmp_path, grid='"reference"', k=2e-4, noise=0.005, epochs=3, extra=""):
    path = tmp_path / "cfg.toml"
    path.write_text(f"seed = 3\noutput_dir = \"out\"\ngrid = {grid}\n{extra}\n"
                    + ECM + SMALL.format(k=k, noise=noise, epochs=epochs))
    return path


def read_results(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_reference_grid_default(self, tmp_path):
        cfg = load_config(write_config(tmp_path))
        assert [(c.mode.value, c.hidden_layers, c.neurons) for c in cfg.grid] == list(REFERENCE_GRID)

    def test_full_grid(self, tmp_path):
        assert len(load_config(write_config(tmp_path, grid='"full"')).grid) == 18

    def test_unknown_key_rejected(self, tmp_path):
        path = write_config(tmp_path, extra="learning_rate = 0.1")
        with pytest.raises(ConfigError, match="learning_rate"):
            load_config(path)

    def test_unknown_nested_key(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text(ECM + SMALL.format(k=0, noise=0, epochs=1).replace("batch_size", "batchsize"))
        with pytest.raises(ConfigError, match="batchsize"):
            load_config(path)

    def test_exactly_one_source(self, tmp_path):
        path = write_config(tmp_path)
        text = path.read_text() + '\n[data]\npath = "x"\n'
        path.write_text(text)
        with pytest.raises(ConfigError, match="exactly one"):
            load_config(path)

    def test_repo_configs_load(self):
        from pathlib import Path
        root = Path(__file__).resolve().parents[1] / "configs"
        for name in ("synthetic.toml", "evtol.toml"):
            load_config(root / name)

    def test_seed_derivation(self):
        a = derive_seed(1, GridCell(Mode.FNN, 1, 32))
        assert a == derive_seed(1, GridCell(Mode.FNN, 1, 32))
        assert a != derive_seed(1, GridCell(Mode.PINN, 1, 32))
        assert a != derive_seed(2, GridCell(Mode.FNN, 1, 32))


class TestRun:
    def test_outputs(self, tmp_path):
        cfg = load_config(write_config(tmp_path))
        summary = run_experiment(cfg, tmp_path / "out")
        assert not summary.failed
        rows = read_results(tmp_path / "out" / "results.csv")
        assert [(r["model"], int(r["hidden_layers"]), int(r["neurons"])) for r in rows] == list(REFERENCE_GRID)
        def count(d, l, n):
            return d * n + n + (l - 1) * (n * n + n) + n + 1
        assert [int(r["param_count"]) for r in rows] == [count(5 if m == "FNN" else 9, l, n) for m, l, n in REFERENCE_GRID]
        for r in rows:
            assert float(r["rmse_mv"]) >= float(r["mae_mv"]) >= 0
            assert float(r["max_error_mv"]) >= float(r["rmse_mv"])
        with open(tmp_path / "out" / "PINN-L1-N32_trace.csv") as fh:
            header = next(csv.reader(fh))
        assert header == ["cell", "cycle", "t_s", "v_actual", "v_pred", "error_v", "v_phy"]
        with open(tmp_path / "out" / "FNN-L1-N32_trace.csv") as fh:
            assert "v_phy" not in next(csv.reader(fh))
        timing = read_results(tmp_path / "out" / "timing.csv")
        assert len(timing) == 8 and all(float(t["mean_inference_us"]) > 0 for t in timing)

    def test_physics_identity(self, tmp_path):
        cfg = load_config(write_config(tmp_path, grid='[{mode = "PINN", hidden_layers = 1, neurons = 32}]',
                                       k=0.0, noise=0.0, epochs=0))
        summary = run_experiment(cfg, tmp_path / "out")
        assert summary.results[0].report.rmse_mv == 0.0

    def test_filter_and_parallel_match_serial(self, tmp_path):
        cfg = load_config(write_config(tmp_path))
        run_experiment(cfg, tmp_path / "serial", tag_filter="PINN-L[12]-*")
        run_experiment(cfg, tmp_path / "par", jobs=2, tag_filter="PINN-L[12]-*")
        serial = (tmp_path / "serial" / "results.csv").read_bytes()
        assert serial == (tmp_path / "par" / "results.csv").read_bytes()
        assert len(read_results(tmp_path / "serial" / "results.csv")) == 3
        for tag in ("PINN-L1-N32", "PINN-L2-N64", "PINN-L2-N128"):
            assert (tmp_path / "serial" / f"{tag}.json").read_bytes() == (tmp_path / "par" / f"{tag}.json").read_bytes()

    def test_filter_no_match(self, tmp_path):
        with pytest.raises(ConfigError):
            run_experiment(load_config(write_config(tmp_path)), tmp_path / "o", tag_filter="XYZ*")

    def test_failed_cell_does_not_abort(self, tmp_path, monkeypatch):
        real_train = experiment.train

        def flaky(model, x, y, cfg):
            if model.spec.neurons_per_layer == 64:
                raise RuntimeError("boom")
            return real_train(model, x, y, cfg)

        monkeypatch.setattr(experiment, "train", flaky)
        code = cli.main(["run", str(write_config(tmp_path)), "--out", str(tmp_path / "o")])
        assert code == cli.EXIT_CELL
        rows = read_results(tmp_path / "o" / "results.csv")
        assert len(rows) == 6
        failures = read_results(tmp_path / "o" / "failures.csv")
        assert sorted(f["model"] for f in failures) == ["FNN-L2-N64", "PINN-L2-N64"]


class TestCli:
    def test_run_and_eval_and_bench(self, tmp_path, capsys):
        cfg = write_config(tmp_path, grid='[{mode = "PINN", hidden_layers = 1, neurons = 32}]')
        assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "11"]) == 0
        assert cli.main(["synth", str(cfg), "--out", str(tmp_path / "s"), "--seed", "11"]) == 0
        capsys.readouterr()
        weights = str(tmp_path / "o" / "PINN-L1-N32.json")
        assert cli.main(["eval", weights, str(tmp_path / "s" / "synthetic.csv")]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].startswith("model,") and out[1].startswith("PINN,1,32,")
        assert cli.main(["bench", weights, "--repetitions", "10"]) == 0
        assert "param_count=353" in capsys.readouterr().out

    def test_eval_matches_run(self, tmp_path, capsys):
        # the whole synthetic set includes the test missions, so just check it parses to finite metrics
        cfg = write_config(tmp_path, grid='[{mode = "FNN", hidden_layers = 1, neurons = 32}]')
        cli.main(["run", str(cfg), "--out", str(tmp_path / "o")])
        cli.main(["synth", str(cfg), "--out", str(tmp_path / "s")])
        capsys.readouterr()
        cli.main(["eval", str(tmp_path / "o" / "FNN-L1-N32.json"), str(tmp_path / "s" / "synthetic.csv")])
        vals = capsys.readouterr().out.splitlines()[1].split(",")
        assert all(np.isfinite(float(v)) for v in vals[3:])

    def test_fit_ecm_synthetic(self, tmp_path, capsys):
        cfg = write_config(tmp_path, noise=0.0)
        assert cli.main(["fit-ecm", str(cfg), "--out", str(tmp_path / "f")]) == 0
        import json
        doc = json.loads((tmp_path / "f" / "ecm_fit.json").read_text())
        (b1, b2) = doc["ecm"]["branches"]
        assert b1["tau"] == pytest.approx(10.0, rel=0.01) and b2["tau"] == pytest.approx(100.0, rel=0.01)

    def test_fit_ecm_from_files(self, tmp_path, capsys):
        t = np.arange(1.0, 401.0)
        v = 3.9 - 0.1 * np.exp(-t / 10.0) - 0.2 * np.exp(-t / 100.0)
        (tmp_path / "relax.csv").write_text("t_s,voltage_v\n" + "".join(f"{float(a)!r},{float(b)!r}\n" for a, b in zip(t, v)))
        (tmp_path / "pulse.csv").write_text("current_a,voltage_v\n0,4.0\n10,3.8\n10,3.79\n")
        cfg = write_config(tmp_path, extra='[fit]\npulses = ["pulse.csv"]\n'
                                           'relaxation = [{ path = "relax.csv", current_a = 10.0 }]\n')
        assert cli.main(["fit-ecm", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert '"r0": 0.02' in out

    def test_config_error_exit(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("seed = 1\n")
        assert cli.main(["run", str(path)]) == cli.EXIT_CONFIG
        assert cli.main(["run", str(tmp_path / "missing.toml")]) == cli.EXIT_CONFIG

    def test_data_error_exit(self, tmp_path):
        path = tmp_path / "d.toml"
        path.write_text(ECM + '\n[data]\npath = "nowhere"\n')
        assert cli.main(["run", str(path), "--out", str(tmp_path / "o")]) == cli.EXIT_DATA
