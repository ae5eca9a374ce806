import json

import numpy as np
import pytest

from qpskit import io as qio
from qpskit.cli import EXIT_CONFIG, EXIT_IO, main
from qpskit.config import load_config, parse_config
from qpskit.errors import ConfigInvalid
from qpskit.pipeline import calibrate_strain
from qpskit.qps import localize, forward_observables
from qpskit.telegraph import default_scenario, run_simulation


def write_config(tmp_path, **body):
    body.setdefault("output_dir", "out")
    path = tmp_path / "run.json"
    path.write_text(json.dumps(body))
    return path


def outputs(folder):
    return {p.name: p.read_bytes() for p in sorted(folder.iterdir())}


def test_minimal_config_defaults():
    cfg = parse_config({"rng_seed": 2})
    assert len(cfg.sensors) == 3 and len(cfg.defects) == 16
    assert cfg.noise.sigma_f == 1.0 and cfg.sim.n_epochs == 5000
    assert cfg.grid.dims == (64, 64, 64)


def test_config_collects_all_problems():
    with pytest.raises(ConfigInvalid) as exc:
        parse_config({"noise": {"sigma_f_MHz": 0, "typo": 1}, "solver": {"alpha": 2}, "grid": {"n": "x"}})
    fields = [f for f, _ in exc.value.problems]
    assert sorted(fields) == ["grid.n", "noise.sigma_f_MHz", "noise.typo", "solver.alpha"]


def test_config_explicit_sensors_and_defects():
    raw = {
        "sensors": [{"id": 0, "position_nm": [0, 0, 0], "z_axis": [0, 0, 1], "strain_perp_V_per_cm": [500, 0]},
                    {"id": 1, "position_nm": [100, 0, 0], "z_axis": [1, 1, 1], "strain_perp_V_per_cm": [0, 500]}],
        "defects": [{"position_nm": [50, 50, 50], "flip_prob": 0.1}],
    }
    cfg = parse_config(raw)
    assert [s.id for s in cfg.sensors] == [0, 1]
    assert cfg.defects[0].charge_when_occupied == -1.0
    raw["defects"][0]["position_nm"] = [0, 0, 0.1]
    with pytest.raises(ConfigInvalid) as exc:
        parse_config(raw)
    assert exc.value.problems[0][0] == "defects[0].position"


def test_json_syntax_error_location(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "rng_seed": 1,\n  oops\n}')
    with pytest.raises(ConfigInvalid) as exc:
        load_config(p)
    assert exc.value.problems[0][0] == "line 3 column 3"


def test_seed_override_changes_hash():
    a = parse_config({"rng_seed": 1})
    b = parse_config({"rng_seed": 1}, seed_override=2)
    assert b.rng_seed == 2 and a.digest() != b.digest()


def test_samples_round_trip(tmp_path):
    v = np.random.default_rng(0).normal(0, 1, (7, 3, 2)) * 1e3
    v[2, 1] = np.nan
    qio.write_samples(tmp_path / "s.csv", v, [0, 1, 2])
    back, ids = qio.read_samples(tmp_path / "s.csv")
    np.testing.assert_array_equal(np.isnan(back), np.isnan(v))
    np.testing.assert_array_equal(back[np.isfinite(v)], v[np.isfinite(v)])
    assert ids == [0, 1, 2]


def test_samples_bad_header(tmp_path):
    (tmp_path / "s.csv").write_text("a,b\n1,2\n")
    with pytest.raises(qio.DataFormatError):
        qio.read_samples(tmp_path / "s.csv")


def test_result_round_trip(sensors):
    v = forward_observables([80.0, -150.0, 220.0], sensors, -1.0) + 0.1
    res = localize(v, np.ones(6), sensors)
    text = qio.dumps(qio.result_to_dict(res))
    again = qio.dumps(qio.result_to_dict(qio.result_from_dict(json.loads(text))))
    assert text == again


def test_cluster_and_trace_round_trip():
    from qpskit.pipeline import detect

    cfg = default_scenario(1, n_epochs=800)
    run = run_simulation(cfg)
    det = detect(run.values, cfg.noise)
    for c in det.clusters:
        d = qio.cluster_to_dict(c)
        assert qio.dumps(qio.cluster_to_dict(qio.cluster_from_dict(json.loads(qio.dumps(d))))) == qio.dumps(d)
    for t in run.traces:
        np.testing.assert_array_equal(qio.trace_from_dict(qio.trace_to_dict(t)).occupancy, t.occupancy)
    for s in cfg.sensors:
        d = qio.dumps(qio.sensor_to_dict(s))
        assert qio.dumps(qio.sensor_to_dict(qio.sensor_from_dict(json.loads(d)))) == d


def test_calibrate_strain_recovers_magnitude(sensors):
    values = np.zeros((10, 3, 2))
    values[..., 1] = [s.d_perp * s.strain_magnitude * 1.01 for s in sensors]
    out = calibrate_strain(sensors, values)
    for a, b in zip(sensors, out):
        assert b.strain_magnitude == pytest.approx(1.01 * a.strain_magnitude)
        np.testing.assert_allclose(b.n_perp, a.n_perp, atol=1e-12)


def test_simulate_writes_three_files(tmp_path):
    cfg = write_config(tmp_path, rng_seed=1, simulation={"n_epochs": 300})
    assert main(["simulate", str(cfg), "--quiet"]) == 0
    out = tmp_path / "out"
    assert sorted(p.name for p in out.iterdir()) == ["run-manifest.json", "samples.csv", "truth.json"]
    first = (out / "run-manifest.json").read_bytes()
    assert main(["simulate", str(cfg), "--quiet"]) == 0
    assert (out / "run-manifest.json").read_bytes() == first
    header = (out / "samples.csv").read_text().splitlines()[0]
    assert header == "epoch,sensor_id,f_par_MHz,f_perp_MHz,present"


def test_malformed_config_exit_2_no_outputs(tmp_path):
    p = tmp_path / "run.json"
    p.write_text('{"output_dir": "out", "noise": {"sigma_f_MHz": -1}}')
    assert main(["simulate", str(p), "--quiet"]) == EXIT_CONFIG
    assert not (tmp_path / "out").exists()
    p.write_text('{"output_dir": "out",')
    assert main(["simulate", str(p), "--quiet"]) == EXIT_CONFIG
    assert not (tmp_path / "out").exists()


def test_missing_input_exit_3(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["detect", str(cfg), "--quiet"]) == EXIT_IO


def test_empty_input_gives_empty_outputs(tmp_path):
    cfg = write_config(tmp_path, simulation={"n_epochs": 0})
    assert main(["simulate", str(cfg), "--quiet"]) == 0
    assert main(["detect", str(cfg), "--quiet"]) == 0
    events = json.loads((tmp_path / "out" / "events.json").read_text())
    clusters = json.loads((tmp_path / "out" / "clusters.json").read_text())
    assert events["jumps"] == [] and clusters["clusters"] == []


def test_json_logging(tmp_path, capsys):
    cfg = write_config(tmp_path, simulation={"n_epochs": 10})
    assert main(["simulate", str(cfg), "--json"]) == 0
    line = capsys.readouterr().err.strip().splitlines()[-1]
    assert json.loads(line)["stage"] == "simulate"


def test_stages_rerun_from_files(tmp_path):
    cfg = write_config(tmp_path, rng_seed=4, simulation={"n_epochs": 1500}, grid={"n": 8})
    assert main(["report", str(cfg), "--quiet"]) == 0
    out = tmp_path / "out"
    first = outputs(out)
    for stage in ("detect", "localize", "decompose", "accuracy-map"):
        assert main([stage, str(cfg), "--quiet"]) == 0
    assert outputs(out) == first
    defects = json.loads((out / "defects.json").read_text())
    for r in defects["results"]:
        if r["result"] is not None:
            assert set(r["result"]["spherical"]) == {"r_nm", "theta_rad", "phi_rad"}
            assert len(r["result"]["position_nm"]) == 3
    manifest = json.loads((out / "run-manifest.json").read_text())
    assert set(manifest["stages"]) == {"simulate", "detect", "localize", "decompose", "accuracy-map"}
    assert manifest["rng_seed"] == 4
