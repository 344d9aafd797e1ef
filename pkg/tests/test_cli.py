import json
from pathlib import Path

import pandas as pd
import pytest
import yaml

import main
from core.rd_harness import CURVE_COLUMNS, RDPoint, load_points
from database.results_store import ResultsStore


def write_config(path, data):
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return str(path)


def stdout_json(capsys):
    return json.loads(capsys.readouterr().out)


@pytest.fixture
def sweep_dir(tmp_path):
    store = ResultsStore(tmp_path / "sweep")
    for kl, mel in [(1.0, 2.0), (4.0, 1.5), (16.0, 1.0)]:
        store.insert_point(RDPoint(
            model_id=f"gaussian-kl{kl:g}-lam1-pt0-adv0-s0", family="gaussian", target_kl=kl, lambda_weight=1.0,
            measured_kl=kl, measured_bitrate_bps=40 * kl / 0.6931471805599453, mel_distance=mel, seed=0,
            frame_rate_hz=40.0, latent_dim=4,
        ).to_dict())
    return tmp_path / "sweep"


def test_output_root_precedence(monkeypatch):
    cfg = main.parse_config(overrides=("output_root=from_config",))
    assert main.output_root("flag", cfg) == Path("flag")
    monkeypatch.setenv("RATEBENCH_OUTPUT_ROOT", "from_env")
    assert main.output_root(None, cfg) == Path("from_env")
    monkeypatch.delenv("RATEBENCH_OUTPUT_ROOT")
    assert main.output_root(None, cfg) == Path("from_config")
    assert main.output_root(None, None) == Path("runs")


def test_curve(sweep_dir, tmp_path, capsys):
    out, plot = tmp_path / "curve.csv", tmp_path / "curve.svg"
    assert main.main(["curve", "--in", str(sweep_dir), "--out", str(out), "--plot", str(plot)]) == 0
    written = stdout_json(capsys)
    assert set(written) == {"table", "plot", "plot_metadata"}
    df = pd.read_csv(out)
    assert list(df.columns) == CURVE_COLUMNS and len(df) == 3
    assert plot.stat().st_size > 0


def test_curve_json_format_from_suffix(sweep_dir, tmp_path):
    out = tmp_path / "curve.json"
    assert main.main(["curve", "--in", str(sweep_dir), "--out", str(out)]) == 0
    assert len(json.loads(out.read_text())) == 3


def test_curve_median_over_seeds(tmp_path, capsys):
    store = ResultsStore(tmp_path / "sweep")
    for seed, mel in enumerate([1.0, 3.0, 2.0]):
        store.insert_point(RDPoint(
            model_id=f"gaussian-kl4-lam1-pt0-adv0-s{seed}", family="gaussian", target_kl=4.0, lambda_weight=1.0,
            measured_kl=4.0, measured_bitrate_bps=230.8, mel_distance=mel, seed=seed,
        ).to_dict())
    out = tmp_path / "curve.csv"
    assert main.main(["curve", "--in", str(tmp_path / "sweep"), "--out", str(out), "--median-seeds"]) == 0
    df = pd.read_csv(out)
    assert len(df) == 1
    assert df.loc[0, "model_id"] == "gaussian-kl4-lam1-pt0-adv0"
    assert df.loc[0, "mel_distance"] == 2.0 and df.loc[0, "seed"] == -1


def test_ablation(sweep_dir, tmp_path, capsys):
    out = tmp_path / "ablation.csv"
    assert main.main(["ablation", "--in", str(sweep_dir), "--out", str(out)]) == 0
    assert "passthrough 0%, discriminator off" in capsys.readouterr().out
    assert len(pd.read_csv(out)) == 3


def test_sweep_points_get_predictability_scores(tmp_path, tiny_train_dict, capsys):
    config = write_config(tmp_path / "c.yaml", {
        "train": {**tiny_train_dict, "steps": 2},
        "sweep": {"target_kls": [1.0, 4.0], "lambda_weights": [1.0]},
        "diffusion": {"width": 8, "depth": 1, "steps": 5, "batch_size": 4, "sampler_steps": 2, "eval_repeats": 1},
    })
    sweep_dir = tmp_path / "sweep"
    assert main.main(["sweep", "--config", config, "--out", str(sweep_dir)]) == 0
    swept = stdout_json(capsys)
    assert swept["failed"] == [] and len(swept["points"]) == 2

    assert main.main(["probe", "--sweep", str(sweep_dir), "--config", config]) == 0
    reports = stdout_json(capsys)
    points = {p.model_id: p for p in load_points(sweep_dir)}
    assert sorted(r["model_id"] for r in reports) == sorted(points)
    for report in reports:
        point = points[report["model_id"]]
        assert point.predictability == pytest.approx(report["predictability_score"])
        assert report["mel_distance"] == pytest.approx(point.mel_distance)
        assert report["measured_kl"] == pytest.approx(point.measured_kl)


def test_ratebench_error_exit_code_and_json(tmp_path, capsys):
    code = main.main(["curve", "--in", str(tmp_path / "nothing"), "--out", str(tmp_path / "c.csv")])
    assert code == 2
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "invalid-argument"
    assert error["type"] == "InvalidArgumentError"


def test_config_error_names_key(tmp_path, capsys):
    path = write_config(tmp_path / "c.yaml", {"train": {"bottleneck": {"passthru": 1}}})
    assert main.main(["train", "--config", path]) == 2
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["key"] == "train.bottleneck.passthru"


def test_unexpected_error_is_internal(tmp_path, capsys, mocker):
    mocker.patch("core.rd_harness.load_points", side_effect=KeyError("surprise"))
    assert main.main(["ablation", "--in", str(tmp_path)]) == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "internal"


def test_sweep_without_section(tmp_path, tiny_train_dict):
    path = write_config(tmp_path / "c.yaml", {"train": tiny_train_dict})
    assert main.main(["sweep", "--config", path]) == 2


def test_train_eval_and_probe(tmp_path, tiny_train_dict, capsys):
    config = write_config(tmp_path / "c.yaml", {
        "train": tiny_train_dict,
        "diffusion": {"width": 8, "depth": 1, "steps": 5, "batch_size": 4, "sampler_steps": 2, "eval_repeats": 1},
    })
    run_dir = tmp_path / "run"
    assert main.main(["train", "--config", config, "--set", "steps=2", "--out", str(run_dir)]) == 0
    trained = stdout_json(capsys)
    assert trained["steps"] == 2
    ckpt = trained["checkpoint"]

    report = tmp_path / "eval.json"
    assert main.main(["eval", "--ckpt", ckpt, "--out", str(report)]) == 0
    evaluated = json.loads(report.read_text())
    capsys.readouterr()
    assert evaluated["measured_kl"] == pytest.approx(trained["measured_kl"])
    assert evaluated["mel_distance"] == pytest.approx(trained["mel_distance"])

    probe_out = tmp_path / "probe.json"
    assert main.main(["probe", "--vae", ckpt, "--vae", ckpt, "--config", config, "--out", str(probe_out)]) == 0
    reports = json.loads(probe_out.read_text())
    assert len(reports) == 2
    assert {"vae_id", "model_id", "measured_bitrate", "measured_kl", "mel_distance", "predictability_score"} <= set(reports[0])
    assert reports[0]["mel_distance"] == pytest.approx(trained["mel_distance"])


def test_train_defaults_to_output_root(tmp_path, tiny_train_dict, capsys):
    config = write_config(tmp_path / "c.yaml", {"train": {**tiny_train_dict, "steps": 1}})
    assert main.main(["train", "--config", config]) == 0
    checkpoint = Path(stdout_json(capsys)["checkpoint"])
    assert checkpoint.parent == tmp_path / "runs" / "train"


def test_probe_needs_a_checkpoint(capsys):
    assert main.main(["probe"]) == 2


@pytest.mark.slow
def test_sweep_curve_ablation_end_to_end(tmp_path, tiny_train_dict, capsys):
    train = {**tiny_train_dict, "steps": 150, "eval_every": 50, "log_every": 50,
             "dataset": {**tiny_train_dict["dataset"], "n_items": 16, "segment_s": 0.2}}
    config = write_config(tmp_path / "sweep.yaml", {
        "train": train,
        "sweep": {"target_kls": [1.0, 4.0, 16.0], "lambda_weights": [1.0]},
    })
    sweep_dir = tmp_path / "sweep"
    assert main.main(["sweep", "--config", config, "--out", str(sweep_dir)]) == 0
    capsys.readouterr()

    curve, plot = tmp_path / "curve.csv", tmp_path / "curve.svg"
    assert main.main(["curve", "--in", str(sweep_dir), "--out", str(curve), "--plot", str(plot)]) == 0
    df = pd.read_csv(curve)
    assert list(df.columns) == CURVE_COLUMNS and len(df) == 3
    assert plot.stat().st_size > 0

    assert main.main(["ablation", "--in", str(sweep_dir), "--out", str(tmp_path / "table.txt")]) == 0
    assert (tmp_path / "table.txt").read_text().strip()
