import pytest
import argparse
import os
from dataclasses import replace
from pyrflow.io import (
    CONFIG_ENV,
    ConfigBundle,
    DataError,
    LossConfig,
    ModelConfig,
    RunOptions,
    SynthConfig,
    TrainConfig,
    check_positive,
    check_positive_float,
    comma_list,
    configure_runtime,
    extant_file,
    parse_args,
    read_config,
    with_overrides,
    write_config,
)


def namespace(**kwargs):
    values = dict(
        command="config", out="unused.ini", force=True, verbose=False, log=None
    )
    values.update(kwargs)
    return argparse.Namespace(**values)


def test_default_configs():
    model = ModelConfig()
    assert model.levels == 4
    assert model.level_sizes == (2048, 512, 128, 32)
    assert model.use_gf is True
    assert model.w_aggregation == "attentive"

    large = ModelConfig.large()
    assert large.level_sizes == (8192, 2048, 512, 256, 64)
    assert large.heads == 8

    loss = LossConfig()
    assert loss.lambdas == (0.7, 0.15, 0.15)
    assert loss.threshold == 0.95
    assert loss.k == 32

    train = TrainConfig()
    assert train.learning_rate == 1e-3
    assert train.decay_factor == 0.5
    assert train.precision == "single"


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(level_sizes=(64, 64), widths=(8, 8))
    with pytest.raises(ValueError):
        ModelConfig(level_sizes=(64, 32), widths=(8,))
    with pytest.raises(ValueError):
        ModelConfig(w_aggregation="mean")
    with pytest.raises(ValueError):
        ModelConfig(level_sizes=(64, 8), widths=(8, 8), str_k=16)
    with pytest.raises(ValueError):
        TrainConfig(precision="half")
    with pytest.raises(ValueError):
        SynthConfig(occlusion_fraction=1.0)
    with pytest.raises(ValueError):
        SynthConfig(object_count=0)


def test_options_update():
    synth = SynthConfig()
    synth.update({"seed": 9, "noise_sigma": 0.01})
    assert synth.seed == 9
    assert synth.noise_sigma == 0.01

    with pytest.raises(DataError):
        synth.update({"sead": 1})


def test_config_round_trip(tmp_path, tiny_bundle):
    path = os.path.join(tmp_path, "config.ini")
    write_config(tiny_bundle, path)
    loaded = read_config(path)

    assert loaded.as_dict() == tiny_bundle.as_dict()
    assert loaded.fingerprint() == tiny_bundle.fingerprint()


def test_read_config_partial(tmp_path):
    path = os.path.join(tmp_path, "config.ini")
    with open(path, "w") as f:
        f.write("[loss]\nthreshold = 0.9\nlambdas = 0.7, 0.3, 0.0\n\n")
        f.write("[model]\nuse_gf = no\n")
    bundle = read_config(path)

    assert bundle.loss.threshold == 0.9
    assert bundle.loss.lambdas == (0.7, 0.3, 0.0)
    assert bundle.model.use_gf is False
    assert bundle.train == TrainConfig()


@pytest.mark.parametrize(
    "content",
    [
        "[loss]\nthreshhold = 0.9\n",
        "[optimizer]\nlr = 0.1\n",
        "[loss]\nthreshold = high\n",
        "[loss]\nthreshold = 2.0\n",
        "[model]\nuse_gf = maybe\n",
    ],
)
def test_read_config_errors(tmp_path, content):
    path = os.path.join(tmp_path, "config.ini")
    with open(path, "w") as f:
        f.write(content)
    with pytest.raises(DataError):
        read_config(path)


def test_bundle_dict():
    bundle = ConfigBundle()
    copy = bundle.copy()
    assert copy.as_dict() == bundle.as_dict()
    assert copy is not bundle

    changed = ConfigBundle.from_dict({"loss": {"threshold": 0.8}})
    assert changed.loss.threshold == 0.8
    assert changed.fingerprint() != bundle.fingerprint()

    # only the model and loss sections are fingerprinted
    seeded = replace(bundle, train=TrainConfig(seed=4))
    assert seeded.fingerprint() == bundle.fingerprint()

    with pytest.raises(DataError):
        ConfigBundle.from_dict({"optimizer": {}})


def test_with_overrides():
    bundle = ConfigBundle()
    new = with_overrides(
        bundle, {"threshold": "0.9", "model.use_gf": False, "train.seed": 3}
    )
    assert new.loss.threshold == 0.9
    assert new.model.use_gf is False
    assert new.train.seed == 3
    assert bundle.loss.threshold == 0.95

    # seed exists in two sections, the explicit prefix picks one
    synth = with_overrides(bundle, {"synth.seed": "7"})
    assert synth.synth.seed == 7
    assert synth.train.seed == 0

    with pytest.raises(DataError):
        with_overrides(bundle, {"nonexistent": 1})
    with pytest.raises(DataError):
        with_overrides(bundle, {"loss.nonexistent": 1})
    with pytest.raises(ValueError):
        with_overrides(bundle, {"threshold": "1.5"})


def test_check_positive():
    assert check_positive("1") == 1

    with pytest.raises(ValueError):
        check_positive("a")

    with pytest.raises(argparse.ArgumentTypeError):
        check_positive("-1")

    assert check_positive_float("0.5") == 0.5
    with pytest.raises(argparse.ArgumentTypeError):
        check_positive_float("0")


def test_extant_file(tiny_config_file):
    assert extant_file(tiny_config_file) == tiny_config_file

    with pytest.raises(argparse.ArgumentTypeError):
        extant_file("somewhere/nonexistent.file")


def test_comma_list():
    assert comma_list(int)("8,16, 32") == [8, 16, 32]
    assert comma_list(float)("0.5") == [0.5]

    with pytest.raises(argparse.ArgumentTypeError):
        comma_list(int)("a,b")
    with pytest.raises(argparse.ArgumentTypeError):
        comma_list(int)(",")


def test_parse_args(tmp_path, tiny_config_file, monkeypatch):
    monkeypatch.delenv(CONFIG_ENV, raising=False)
    opts = parse_args(namespace(out=os.path.join(tmp_path, "a.ini")))
    assert isinstance(opts, RunOptions)
    assert opts.config.as_dict() == ConfigBundle().as_dict()
    assert opts.config_file is None

    opts = parse_args(namespace(out=os.path.join(tmp_path, "a.ini"), profile="large"))
    assert opts.config.model.level_sizes == ModelConfig.large().level_sizes
    assert opts.config.loss.radius == 0.05

    out = os.path.join(tmp_path, "a.ini")
    opts = parse_args(namespace(out=out, config=tiny_config_file))
    assert opts.config.model.level_sizes == (64, 32, 16, 8)
    assert opts.config_file == tiny_config_file

    monkeypatch.setenv(CONFIG_ENV, tiny_config_file)
    opts = parse_args(namespace(out=os.path.join(tmp_path, "a.ini")))
    assert opts.config_file == tiny_config_file

    monkeypatch.setenv(CONFIG_ENV, os.path.join(tmp_path, "missing.ini"))
    with pytest.raises(FileNotFoundError):
        parse_args(namespace(out=os.path.join(tmp_path, "a.ini")))


def test_parse_args_existing_output(tmp_path, tiny_config_file, monkeypatch):
    monkeypatch.delenv(CONFIG_ENV, raising=False)
    with pytest.raises(FileExistsError):
        parse_args(namespace(out=tiny_config_file, force=False))

    opts = parse_args(namespace(out=tiny_config_file, force=True))
    assert opts.overwrite is True


def test_configure_runtime(tmp_path, scene_dir, monkeypatch):
    monkeypatch.delenv(CONFIG_ENV, raising=False)
    log = os.path.join(tmp_path, "run.log")
    opts = configure_runtime(
        ["search", "--data", scene_dir, "--out", "grid", "--k", "4,8", "--log", log]
    )
    assert opts.command == "search"
    assert opts.ks == [4, 8]
    assert opts.radii == [0.0025, 0.005, 0.01, 0.02, 0.05]
    assert os.path.exists(log)

    opts = configure_runtime(
        ["ablate", "--data", scene_dir, "--val", scene_dir, "--out", "runs"]
        + ["--log", log, "--variants", "full,threshold=0.9", "--seeds", "0"]
    )
    assert opts.variants == ["full", "threshold=0.9"]
    assert opts.seeds == [0]

    with pytest.raises(SystemExit):
        configure_runtime(["fly", "--log", log])

    with pytest.raises(SystemExit):
        configure_runtime(
            ["train", "--data", scene_dir, "--out", "x", "--log", log]
            + ["--val-fraction", "1.5"]
        )

    with pytest.raises(SystemExit):
        configure_runtime(
            ["ablate", "--data", scene_dir, "--val", scene_dir, "--out", "x"]
            + ["--log", log, "--variants", "no_such_variant"]
        )

    with pytest.raises(SystemExit):
        configure_runtime(
            ["eval", "--ckpt", "missing.pt", "--data", scene_dir, "--log", log]
        )


def test_run_options_str(tiny_bundle):
    opts = RunOptions(command="train", config=tiny_bundle, data_dir="scenes", out="runs")
    text = str(opts)
    assert "Command: train" in text
    assert tiny_bundle.fingerprint() in text
    assert "Data read from: scenes" in text
