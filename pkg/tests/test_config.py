"""Config parsing, overrides, derived paths, sub-config conversion."""

import os

import pytest

from endofeat.config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    features_dir,
    homography_config,
    labels_dir,
    load_config,
    loss_config,
    matches_dir,
    method_names,
    model_tags,
    parse_config_text,
    parse_value,
    train_config,
)


def test_defaults_match_release_settings():
    cfg = RunConfig()
    assert cfg.detection_threshold == 0.015
    assert cfg.detection_nms_window == 3
    assert cfg.max_features == 10000
    assert cfg.label_nms_window == 9
    assert cfg.label_max_points == 600
    assert cfg.ransac_confidence == 0.9999
    assert cfg.ransac_threshold_px == 3.0
    assert cfg.correspondence_weight == 250.0
    assert cfg.specularity_weight == 100.0
    assert cfg.learning_rate == 1e-5
    assert cfg.batch_size == 2


def test_parse_config_text_types_and_comments():
    cfg = parse_config_text(
        """
        # run settings
        frames_dir = data/frames   # trailing comment
        iterations = 40
        learning_rate = 2e-4
        steps = 1, 5,10
        methods = learned, orb
        """
    )
    assert cfg.frames_dir == "data/frames"
    assert cfg.iterations == 40
    assert cfg.learning_rate == 2e-4
    assert cfg.steps == (1, 5, 10)
    assert cfg.methods == ("learned", "orb")


def test_parse_config_text_rejects_bad_lines():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("not a setting\n")
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("nonsense = 3\n")
    with pytest.raises(ConfigError, match="line 2: duplicate"):
        parse_config_text("seed = 1\nseed = 2\n")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("iterations = soon\n")


def test_parse_value_tuple_and_scalar():
    assert parse_value("steps", "3") == (3,)
    assert parse_value("steps", "") == ()
    assert parse_value("seed", "7") == 7
    with pytest.raises(ConfigError):
        parse_value("steps", "1,x")


def test_load_config_and_missing_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 5\n")
    assert load_config(path).seed == 5
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.cfg")


def test_apply_overrides_win_and_validate():
    cfg = parse_config_text("seed = 1\niterations = 5\n")
    out = apply_overrides(cfg, ["seed=9", "output_dir=elsewhere"])
    assert out.seed == 9 and out.iterations == 5 and out.output_dir == "elsewhere"
    with pytest.raises(ConfigError, match="key=value"):
        apply_overrides(cfg, ["seed"])
    with pytest.raises(ConfigError, match="unknown key"):
        apply_overrides(cfg, ["sneed=1"])


def test_derived_paths():
    cfg = RunConfig(output_dir="run")
    assert labels_dir(cfg) == os.path.join("run", "labels")
    assert features_dir(cfg, "learned") == os.path.join("run", "features", "learned")
    assert matches_dir(cfg, "orb", 5) == os.path.join("run", "matches", "orb", "step_5")
    custom = RunConfig(labels_dir="L", features_dir="F", matches_dir="M")
    assert labels_dir(custom) == "L"
    assert features_dir(custom, "m") == os.path.join("F", "m")
    assert matches_dir(custom, "m", 1) == os.path.join("M", "m", "step_1")


def test_method_names_and_model_tags():
    assert method_names(RunConfig()) == ("learned",)
    assert method_names(RunConfig(methods=("a", "b"))) == ("a", "b")
    assert model_tags(RunConfig()) == "auto"
    assert model_tags(RunConfig(models="H, E")) == ("H", "E")
    with pytest.raises(ConfigError, match="unknown model tag"):
        model_tags(RunConfig(models="H,Q"))
    with pytest.raises(ConfigError, match="auto"):
        model_tags(RunConfig(models=","))


def test_sub_config_conversion_and_errors():
    cfg = RunConfig(homography_rotation_deg=10.0, iterations=3, specularity_weight=0.0)
    hc = homography_config(cfg)
    assert hc.rotation_deg == 10.0 and hc.scale_min == 0.8
    lc = loss_config(cfg)
    assert lc.specularity_weight == 0.0 and lc.correspondence_weight == 250.0
    tc = train_config(cfg)
    assert tc.iterations == 3 and tc.homography == hc

    with pytest.raises(ConfigError):
        homography_config(RunConfig(homography_scale_min=0.0))
    with pytest.raises(ConfigError):
        loss_config(RunConfig(negative_keep=2.0))
    with pytest.raises(ConfigError):
        train_config(RunConfig(batch_size=0))
