import csv
import json
from importlib import resources

import jsonschema
import numpy as np
import pytest

from diffcd.cli.checkpoint import load_checkpoint, save_checkpoint
from diffcd.cli.config import RunConfig, load_config, parse_config
from diffcd.cli.main import main
from diffcd.errors import ConfigError, LoadError
from diffcd.numerics import Rng, Tensor, gaussian
from diffcd.pgm import read_pgm, write_pgm

TINY = {
    "unet": {"base_channels": 4, "norm_groups": 2},
    "fdaf": {"hidden": 4},
    "cd": {"epochs": 2, "head_channels": 4, "batch": 4},
    "train": {"steps": 3, "batch": 4},
    "data": {"scene": {"size": 16, "misreg_max": 2.0, "seed": 5}},
}


def snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """One small end-to-end run shared by the command tests."""
    root = tmp_path_factory.mktemp("run")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    c = str(cfg)
    assert main(["synth", "--config", c, "--out", str(root / "train"), "--count", "8"]) == 0
    assert main(["synth", "--config", c, "--out", str(root / "val"), "--count", "4", "--seed", "6"]) == 0
    assert main(["synth", "--config", c, "--out", str(root / "test"), "--count", "4", "--seed", "7"]) == 0
    assert main(["train-diffusion", "--config", c, "--data", str(root / "train"), "--out", str(root / "diff")]) == 0
    assert main(["train-cd", "--config", c, "--diffusion", str(root / "diff"), "--data", str(root / "train"),
                 "--val", str(root / "val"), "--out", str(root / "cd")]) == 0
    return root


# config --------------------------------------------------------------------

def test_defaults_are_valid():
    cfg = load_config(None)
    assert cfg.schedule.T == 100 and cfg.cd.timesteps == [5, 50] and cfg.fdaf.mode == "dual"


@pytest.mark.parametrize("data,path", [
    ({"cd": {"epoch": 3}}, "cd.epoch"),
    ({"colour": 1}, "colour"),
    ({"data": {"scene": {"sizee": 16}}}, "data.scene.sizee"),
])
def test_unknown_keys_name_their_path(data, path):
    with pytest.raises(ConfigError, match=path.replace(".", r"\.")):
        parse_config(data)


@pytest.mark.parametrize("data", [
    {"train": {"lr": "fast"}}, {"train": {"steps": 1.5}}, {"fdaf": {"mode": "on"}},
    {"cd": {"timesteps": [0]}}, {"schedule": {"beta_end": 1.5}}, {"unet": {"depth": 0}},
    {"data": {"scene": {"size": 18}}}, {"cd": {"tau": 1.0}}, {"cd": "x"},
])
def test_invalid_values(data):
    with pytest.raises(ConfigError):
        parse_config(data)


def test_config_round_trip():
    cfg = parse_config(TINY)
    assert parse_config(cfg.to_dict()) == cfg


def test_bad_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(LoadError):
        load_config(tmp_path / "missing.json")


# checkpoint ----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    params = {"b": gaussian(Rng(1), [3, 2]), "a": gaussian(Rng(2), [4]), "c": Tensor(np.array(1.5))}
    manifest = save_checkpoint(tmp_path, "cd", params, {"x": 1})
    back, loaded = load_checkpoint(tmp_path, "cd")
    assert loaded == json.loads(json.dumps(manifest))
    for name, t in params.items():
        assert back[name].data.tobytes() == t.data.tobytes() and back[name].shape == t.shape
    offsets = [(e["name"], e["offset"], e["nbytes"]) for e in loaded["params"]]
    assert [o[0] for o in offsets] == ["a", "b", "c"]
    assert offsets[1][1] == offsets[0][1] + offsets[0][2]
    assert sum(o[2] for o in offsets) == (tmp_path / "params.bin").stat().st_size


def test_checkpoint_corruption(tmp_path):
    save_checkpoint(tmp_path, "cd", {"a": gaussian(Rng(1), [4])}, {})
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path, "diffusion")
    data = (tmp_path / "params.bin").read_bytes()
    (tmp_path / "params.bin").write_bytes(data + b"\0")
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path)
    (tmp_path / "params.bin").write_bytes(data[:-8])
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path)
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "nowhere")


# commands ------------------------------------------------------------------

def test_synth_files(run):
    assert len(list((run / "train").glob("*.pgm"))) == 24
    manifest = json.loads((run / "train" / "manifest.json").read_text())
    assert manifest["count"] == 8 and manifest["config"]["size"] == 16


def test_synth_is_deterministic(run, tmp_path):
    assert main(["synth", "--config", str(run / "cfg.json"), "--out", str(tmp_path), "--count", "8"]) == 0
    assert snapshot(tmp_path) == snapshot(run / "train")


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--count", "4"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["train-cd", "--out", str(tmp_path), "--diffusion", "x", "--fdaf", "maybe"])
    assert exc.value.code == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"cd": {"epoch": 1}}')
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "cd.epoch" in capsys.readouterr().err


def test_train_diffusion_outputs(run):
    rows = list(csv.reader((run / "diff" / "loss.csv").open()))
    assert rows[0] == ["step", "loss"] and len(rows) == 4
    params, manifest = load_checkpoint(run / "diff", "diffusion")
    assert manifest["config"]["unet"]["base_channels"] == 4
    assert manifest["format_version"] == 1 and "diffcd" in manifest["versions"]


def test_train_diffusion_zero_steps(run, tmp_path):
    args = ["train-diffusion", "--config", str(run / "cfg.json"), "--data", str(run / "train"), "--steps", "0"]
    assert main(args + ["--out", str(tmp_path / "z")]) == 0
    rows = list(csv.reader((tmp_path / "z" / "loss.csv").open()))
    assert rows == [["step", "loss"]]
    from diffcd.denoiser import init_params
    from diffcd.pipeline import STREAM_INIT
    params, manifest = load_checkpoint(tmp_path / "z", "diffusion")
    fresh = init_params(parse_config(manifest["config"]).unet_obj(), Rng(0).fork(STREAM_INIT))
    assert all(np.array_equal(params[k].data, fresh[k].data) for k in fresh)


def test_train_diffusion_is_deterministic(run, tmp_path):
    args = ["train-diffusion", "--config", str(run / "cfg.json"), "--data", str(run / "train")]
    assert main(args + ["--out", str(tmp_path / "again")]) == 0
    assert snapshot(tmp_path / "again") == snapshot(run / "diff")


def test_train_diffusion_missing_data(run, tmp_path, capsys):
    code = main(["train-diffusion", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")])
    assert code == 1 and "none" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_diffusion_nan_exits_3(run, tmp_path, capsys):
    cfg = dict(TINY, train={"steps": 3, "batch": 4, "lr": 1e300})
    path = tmp_path / "hot.json"
    path.write_text(json.dumps(cfg))
    code = main(["train-diffusion", "--config", str(path), "--data", str(run / "train"), "--out", str(tmp_path / "o")])
    assert code == 3 and "numeric" in capsys.readouterr().err


def test_train_cd_outputs(run):
    params, manifest = load_checkpoint(run / "cd", "cd")
    hist = manifest["history"]
    assert len(hist["epoch_loss"]) == 2 and len(hist["val_f1"]) == 2
    assert any(k.startswith("flow") for k in params) and "proj.w" in params
    assert not any(k.startswith("backbone.") for k in params)
    rows = list(csv.reader((run / "cd" / "history.csv").open()))
    assert rows[0] == ["epoch", "loss", "val_f1"] and len(rows) == 3


def test_train_cd_off_and_rerun(run, tmp_path, capsys):
    base = ["train-cd", "--config", str(run / "cfg.json"), "--diffusion", str(run / "diff"),
            "--data", str(run / "train"), "--val", str(run / "val")]
    capsys.readouterr()
    assert main(base + ["--fdaf", "off", "--out", str(tmp_path / "off")]) == 0
    assert "val_f1" in capsys.readouterr().out
    _, manifest = load_checkpoint(tmp_path / "off", "cd")
    assert manifest["config"]["fdaf"]["mode"] == "off"
    assert main(base + ["--out", str(tmp_path / "again")]) == 0
    _, again = load_checkpoint(tmp_path / "again", "cd")
    _, first = load_checkpoint(run / "cd", "cd")
    assert again["history"]["val_f1"] == first["history"]["val_f1"]
    assert snapshot(tmp_path / "again") == snapshot(run / "cd")


def test_train_cd_unfreeze(run, tmp_path):
    args = ["train-cd", "--config", str(run / "cfg.json"), "--diffusion", str(run / "diff"),
            "--data", str(run / "train"), "--epochs", "1", "--unfreeze", "--out", str(tmp_path / "u")]
    assert main(args) == 0
    params, manifest = load_checkpoint(tmp_path / "u", "cd")
    assert manifest["unfrozen"] and any(k.startswith("backbone.") for k in params)
    frozen, _ = load_checkpoint(run / "diff", "diffusion")
    assert not np.array_equal(params["backbone.conv_in.w"].data, frozen["conv_in.w"].data)
    assert main(["eval", "--diffusion", str(run / "diff"), "--cd", str(tmp_path / "u"),
                 "--data", str(run / "test"), "--out", str(tmp_path / "ev")]) == 0


def test_train_cd_missing_backbone(run, tmp_path, capsys):
    missing = tmp_path / "no-such-ckpt"
    code = main(["train-cd", "--diffusion", str(missing), "--data", str(run / "train"), "--out", str(tmp_path / "o")])
    assert code == 1 and str(missing) in capsys.readouterr().err


def test_eval_report_and_heatmaps(run, tmp_path):
    args = ["eval", "--diffusion", str(run / "diff"), "--cd", str(run / "cd"), "--data", str(run / "test"),
            "--heatmaps", "--out", str(tmp_path / "ev")]
    assert main(args) == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    schema = json.loads(resources.files("diffcd.cli").joinpath("report.schema.json").read_text())
    jsonschema.validate(report, schema)
    assert report["count"] == 4 and len(report["per_sample"]) == 4
    assert report["best_tau"]["tau"] in [round(0.05 * i, 2) for i in range(1, 20)]
    assert report["metrics"]["tau"] == 0.5  # on the grid, so the best can only match or beat it
    assert report["best_tau"]["f1"] >= report["metrics"]["f1"]
    assert len(list((tmp_path / "ev").glob("heat_*.pgm"))) == 4
    assert main(args[:-1] + [str(tmp_path / "ev2")]) == 0
    assert snapshot(tmp_path / "ev") == snapshot(tmp_path / "ev2")


def test_eval_oracle_predictions(run, tmp_path):
    assert main(["eval", "--data", str(run / "test"), "--predictions", str(run / "test"),
                 "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    schema = json.loads(resources.files("diffcd.cli").joinpath("report.schema.json").read_text())
    jsonschema.validate(report, schema)
    m = report["metrics"]
    assert m["fp"] == m["fn"] == 0
    if m["tp"]:
        assert m["f1"] == 1.0


def test_eval_missing_checkpoint(run, tmp_path):
    code = main(["eval", "--diffusion", str(tmp_path / "x"), "--cd", str(run / "cd"),
                 "--data", str(run / "test"), "--out", str(tmp_path / "o")])
    assert code == 1


def test_infer_outputs(run, tmp_path):
    args = ["infer", "--diffusion", str(run / "diff"), "--cd", str(run / "cd"),
            "--a", str(run / "test" / "A_0.pgm"), "--b", str(run / "test" / "B_0.pgm")]
    assert main(args + ["--out", str(tmp_path / "i1")]) == 0
    mask, _ = read_pgm(tmp_path / "i1" / "mask.pgm")
    heat, _ = read_pgm(tmp_path / "i1" / "heatmap.pgm")
    assert mask.shape == heat.shape == (16, 16) and set(np.unique(mask)) <= {0, 255}
    assert sorted(p.name for p in (tmp_path / "i1").glob("flow_l*.pgm")) == ["flow_l0.pgm", "flow_l1.pgm"]
    assert main(args + ["--out", str(tmp_path / "i2")]) == 0
    assert snapshot(tmp_path / "i1") == snapshot(tmp_path / "i2")


def test_infer_extent_mismatch(run, tmp_path):
    write_pgm(tmp_path / "small.pgm", np.zeros((8, 8), dtype=np.int64))
    code = main(["infer", "--diffusion", str(run / "diff"), "--cd", str(run / "cd"),
                 "--a", str(run / "test" / "A_0.pgm"), "--b", str(tmp_path / "small.pgm"),
                 "--out", str(tmp_path / "o")])
    assert code == 2


def test_infer_missing_image(run, tmp_path):
    code = main(["infer", "--diffusion", str(run / "diff"), "--cd", str(run / "cd"),
                 "--a", str(tmp_path / "nope.pgm"), "--b", str(tmp_path / "nope.pgm"),
                 "--out", str(tmp_path / "o")])
    assert code == 1
