import json

import numpy as np
import pytest

from lgvlab.cli import main
from lgvlab.config import ConfigError, config_hash, load_config
from lgvlab.pipeline import OUTPUT_ROOT_ENV, Pipeline, derive_seed, read_csv
from lgvlab.weightio import read_weights

SMALL = {
    "dataset": {"classes": 3, "dim": 4, "n_per_class": [30, 20, 30], "spread": 0.3},
    "model": {"hidden": [8]},
    "training": {"epochs": 3, "batch_size": 8, "decay_every": 2},
    "lgv": {"n_epochs": 2, "K": 4},
    "surrogates": [
        {"name": "1_dnn", "recipe": "one_dnn"},
        {"name": "lgv", "recipe": "lgv"},
        {"name": "lgv_swa", "recipe": "lgv_swa"},
        {"name": "rd", "recipe": "rd", "sigma": 0.01},
        {"name": "dnn_shifted", "recipe": "shifted", "onto": "one_dnn", "gamma": 0.5},
    ],
    "attack": {"n_iter": 5, "epsilon": 0.3},
    "targets": [{"name": "white", "seed": 0}, {"name": "other", "seed": 7}],
    "seeds": [0],
    "n_examples": 10,
    "n_examples_val": 10,
    "geometry": {"power_iters": 10, "trace_probes": 3, "lgv_models": 2,
                 "ray_directions": [0, 1], "ray_alphas": [0.0, 1.0], "disk_grid": 5},
    "output_dir": "run",
}


@pytest.fixture
def cfg_path(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "out"))
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


@pytest.fixture
def trained(cfg_path):
    assert main(["train", "--config", str(cfg_path)]) == 0
    assert main(["collect", "--config", str(cfg_path)]) == 0
    return cfg_path


def _out(cfg_path):
    return cfg_path.parent / "out" / "run"


def test_overrides_and_hash():
    cfg = load_config(None, ["training.lr=0.05", "surrogates.3.sigma=0.02", "attack.norm=linf"])
    assert cfg["training"]["lr"] == 0.05 and cfg["surrogates"][3]["sigma"] == 0.02
    assert cfg["attack"]["norm"] == "linf"
    a = load_config(None, ["output_dir=a"])
    b = load_config(None, ["output_dir=b"])
    assert config_hash(a) == config_hash(b) != config_hash(cfg)
    with pytest.raises(ConfigError, match="unknown config field 'training.lrr'"):
        load_config(None, ["training.lrr=1"])


def test_invalid_activation_exits_2(capsys):
    assert main(["train", "--set", "model.activation=gelu"]) == 2
    assert "model.activation" in capsys.readouterr().err


def test_show_config(capsys):
    assert main(["show-config", "--set", "seeds=[4]"]) == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown["seeds"] == [4] and len(shown["config_hash"]) == 16


def test_train_creates_dirs_and_is_reproducible(cfg_path):
    assert main(["train", "--config", str(cfg_path)]) == 0
    out = _out(cfg_path)
    files = sorted((out / "weights").glob("*.lgvw"))
    names = {f.name for f in files}
    assert {"dnn_seed0.lgvw", "dnn_independent_seed0.lgvw", "target_white.lgvw",
            "target_other.lgvw"} <= names
    before = {f.name: f.read_bytes() for f in files}
    for f in files:
        f.unlink()
    assert main(["train", "--config", str(cfg_path)]) == 0
    assert {f.name: f.read_bytes() for f in (out / "weights").glob("*.lgvw")} == before
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["config_hash"] == config_hash(load_config(cfg_path))


def test_collect_requires_training(cfg_path, capsys):
    assert main(["collect", "--config", str(cfg_path)]) == 4
    assert "lgvlab train" in capsys.readouterr().err


def test_collect_writes_k_snapshots(trained):
    rows, side = read_weights(_out(trained) / "lgv" / "lgv_seed0.lgvw")
    assert rows.shape[0] == 4 and side["K"] == 4
    assert side["meta"]["sgd_seed"] == derive_seed(0, "lgv")


def test_attack_report(trained):
    assert main(["attack", "--config", str(trained)]) == 0
    out = _out(trained) / "reports"
    text = (out / "transfer.csv").read_text()
    head = text.splitlines()[0]
    cfg = load_config(trained)
    assert head == f"# lgvlab config_hash={config_hash(cfg)} seeds=0"
    rows = read_csv(out / "transfer.csv")
    assert len(rows) == 5 * 2
    rate = {(r["surrogate"], r["target"]): float(r["success_rate"]) for r in rows}
    # target "white" is trained with the surrogate's own seed, so it is the surrogate
    assert rate["1_dnn", "white"] >= rate["1_dnn", "other"]
    assert rate["1_dnn", "white"] > 0.5
    agg = read_csv(out / "transfer_aggregate.csv")
    assert all(float(r["sd"]) == 0.0 and r["runs"] == "1" for r in agg)
    assert json.loads((out / "transfer.json").read_text())["split"] == "test"


def test_attack_never_mutates_weight_files(trained):
    files = sorted(_out(trained).rglob("*.lgvw"))
    before = [f.read_bytes() for f in files]
    assert main(["attack", "--config", str(trained)]) == 0
    assert main(["geometry", "rays", "--config", str(trained)]) == 0
    assert [f.read_bytes() for f in files] == before


def test_geometry_probes(trained):
    for probe in ("hessian", "rays", "interpolate", "pca", "disk"):
        assert main(["geometry", probe, "--config", str(trained)]) == 0
    g = _out(trained) / "geometry"
    pca = read_csv(g / "pca.csv")
    assert len(pca) == 4
    assert sum(float(r["explained_ratio"]) for r in pca) == pytest.approx(1.0)
    rays = read_csv(g / "rays.csv")
    by_dir = {}
    for r in rays:
        by_dir.setdefault(r["direction_seed"], set()).add(r["direction_hash"])
    assert all(len(h) == 1 for h in by_dir.values())
    assert all(float(r["growth"]) == 0.0 for r in rays if float(r["alpha"]) == 0.0)
    hess = read_csv(g / "hessian.csv")
    assert [r["model"] for r in hess] == ["1_dnn", "lgv_0", "lgv_3", "lgv_swa"]
    interp = read_csv(g / "interpolate.csv")
    assert {r["split"] for r in interp} == {"train", "test"}


def test_quadratic_hessian_needs_no_artifacts(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    A = np.diag([4.0, 1.0, 0.5]).tolist()
    q = json.dumps({"A": A, "center": None})
    assert main(["geometry", "hessian", "--set", f"geometry.quadratic={q}", "--set", "seeds=[0]",
                 "--set", "geometry.power_iters=200", "--set", "geometry.trace_probes=50"]) == 0
    row = read_csv(tmp_path / "runs" / "default" / "geometry" / "hessian.csv")[0]
    assert float(row["max_eigenvalue"]) == pytest.approx(4.0, rel=1e-3)
    # Rademacher probes are exact on a diagonal matrix
    assert float(row["trace"]) == pytest.approx(5.5, rel=1e-6)


def test_sweep_lr_zero_matches_single_dnn(trained):
    assert main(["sweep", "lr", "--values", "0", "--config", str(trained)]) == 0
    rows = read_csv(_out(trained) / "sweeps" / "sweep_lr.csv")
    assert len(rows) == 2
    pipe = Pipeline(load_config(trained))
    ref = pipe.transfer("val", entries=[{"name": "1_dnn", "recipe": "one_dnn"}])
    for r in rows:
        assert float(r["success_rate"]) == ref.rate("1_dnn", r["target"])


def test_sweep_gamma_zero_is_the_dnn(trained):
    assert main(["sweep", "gamma", "--values", "0,1", "--config", str(trained)]) == 0
    rows = read_csv(_out(trained) / "sweeps" / "sweep_gamma.csv")
    assert len(rows) == 4
    agg = read_csv(_out(trained) / "sweeps" / "sweep_gamma_aggregate.csv")
    assert len(agg) == 4
    pipe = Pipeline(load_config(trained))
    ref = pipe.transfer("val", entries=[{"name": "1_dnn", "recipe": "one_dnn"}])
    zero = [r for r in rows if r["value"] == "0"]
    for r in zero:
        assert float(r["success_rate"]) == ref.rate("1_dnn", r["target"])


def test_sweep_needs_values(cfg_path):
    assert main(["sweep", "lr", "--values", "", "--config", str(cfg_path)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_3(cfg_path, capsys):
    assert main(["train", "--config", str(cfg_path), "--set", "training.lr=1e200",
                 "--set", "model.activation=relu"]) == 3
    assert "diverge" in capsys.readouterr().err


def test_output_root_env(tmp_path, monkeypatch, cfg_path):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "elsewhere"))
    assert main(["train", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "elsewhere" / "run" / "weights" / "dnn_seed0.lgvw").exists()
