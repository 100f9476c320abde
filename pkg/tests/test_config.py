"""Configuration resolution: defaults, presets, YAML files, dotted overrides,
precedence, strict unknown-key rejection, and the content hash.
"""

import pytest
import yaml

from volmil.config import (
    ENV_OUT_ROOT,
    PRESETS,
    ConfigError,
    RunConfig,
    config_hash,
    config_to_dict,
    dump_config,
    parse_config,
)


def write_yaml(tmp_path, data, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return path


class TestDefaults:
    def test_baseline_values(self):
        cfg = parse_config()
        assert cfg.seed == 0
        assert cfg.workers == 1
        assert cfg.phantom.dims == (64, 128, 128)
        assert cfg.patch.mode == "cuboids3d"
        assert cfg.train.epochs == 50
        assert cfg.eval.folds == 5
        assert cfg.ig.group_scores == "normalized"
        assert cfg.preset is None

    def test_empty_file_keeps_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("")
        cfg = parse_config(path)
        assert cfg.phantom.dims == (64, 128, 128)
        assert cfg.norm.upper_top_percent == 1.0

    def test_out_dir_falls_back_to_runs(self, monkeypatch):
        monkeypatch.delenv(ENV_OUT_ROOT, raising=False)
        assert parse_config().out_dir == "runs"

    def test_out_dir_env_variable(self, monkeypatch):
        monkeypatch.setenv(ENV_OUT_ROOT, "/tmp/elsewhere")
        assert parse_config().out_dir == "/tmp/elsewhere"

    def test_explicit_out_dir_beats_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv(ENV_OUT_ROOT, "/tmp/elsewhere")
        path = write_yaml(tmp_path, {"out_dir": "chosen"})
        assert parse_config(path).out_dir == "chosen"


class TestPresets:
    def test_phantom_preset_values(self):
        cfg = parse_config(preset="phantom")
        assert cfg.preset == "phantom"
        assert cfg.patch.shape == (16, 16, 16)
        assert cfg.patch.overlaps == (8, 0, 0)
        assert cfg.norm.upper_clip == 65535.0
        assert cfg.norm.upper_top_percent is None
        assert cfg.norm.invert is False
        # pass-through segmentation: every plane and voxel survives
        assert cfg.seg.air_mean_threshold == -1.0
        assert cfg.seg.binarize_threshold == -1.0
        assert cfg.seg.median_kernel == 1
        assert cfg.seg.min_tissue_area == 1

    def test_microct_preset_values(self):
        cfg = parse_config(preset="microct")
        assert cfg.patch.shape == (32, 128, 128)
        assert cfg.patch.overlaps == (0, 0, 0)
        assert cfg.norm.lower_clip == 25000.0
        assert cfg.norm.invert is False
        assert cfg.seg.air_mean_threshold == 17030.0

    def test_otls_preset_values(self):
        cfg = parse_config(preset="otls")
        assert cfg.patch.shape == (64, 128, 128)
        assert cfg.patch.overlaps == (32, 0, 0)
        assert cfg.norm.invert is True

    def test_unknown_preset_rejected(self):
        with pytest.raises(ConfigError, match="unknown preset"):
            parse_config(preset="petridish")

    def test_preset_from_file(self, tmp_path):
        path = write_yaml(tmp_path, {"preset": "phantom"})
        cfg = parse_config(path)
        assert cfg.preset == "phantom"
        assert cfg.patch.shape == (16, 16, 16)

    def test_argument_preset_beats_file_preset(self, tmp_path):
        path = write_yaml(tmp_path, {"preset": "otls"})
        cfg = parse_config(path, preset="microct")
        assert cfg.preset == "microct"
        assert cfg.patch.shape == (32, 128, 128)

    def test_all_presets_apply_cleanly(self):
        for name in PRESETS:
            cfg = parse_config(preset=name)
            assert cfg.preset == name


class TestPrecedence:
    def test_file_overrides_preset(self, tmp_path):
        path = write_yaml(tmp_path, {"preset": "phantom",
                                     "patch": {"shape": [8, 16, 16]}})
        cfg = parse_config(path)
        assert cfg.patch.shape == (8, 16, 16)
        assert cfg.patch.overlaps == (8, 0, 0)   # untouched preset value stays

    def test_override_beats_file(self, tmp_path):
        path = write_yaml(tmp_path, {"train": {"lr0": 0.01}})
        cfg = parse_config(path, overrides=["train.lr0=0.5"])
        assert cfg.train.lr0 == 0.5

    def test_override_beats_preset(self):
        cfg = parse_config(preset="phantom",
                           overrides=["patch.shape=[4, 8, 8]"])
        assert cfg.patch.shape == (4, 8, 8)


class TestFileParsing:
    def test_scalar_and_nested_fields(self, tmp_path):
        path = write_yaml(tmp_path, {"seed": 7, "workers": 3,
                                     "train": {"lr0": 0.01, "epochs": 9},
                                     "phantom": {"n_per_class": 12}})
        cfg = parse_config(path)
        assert cfg.seed == 7
        assert cfg.workers == 3
        assert cfg.train.lr0 == 0.01
        assert cfg.train.epochs == 9
        assert cfg.phantom.n_per_class == 12

    def test_unknown_top_level_key_is_named(self, tmp_path):
        path = write_yaml(tmp_path, {"patchh": {"mode": "planes2d"}})
        with pytest.raises(ConfigError, match="'patchh'"):
            parse_config(path)

    def test_unknown_nested_key_gets_dotted_path(self, tmp_path):
        path = write_yaml(tmp_path, {"patch": {"shapee": [1, 2, 3]}})
        with pytest.raises(ConfigError, match="'patch.shapee'"):
            parse_config(path)

    def test_section_expects_mapping(self, tmp_path):
        path = write_yaml(tmp_path, {"train": 5})
        with pytest.raises(ConfigError, match="mapping"):
            parse_config(path)

    def test_non_mapping_top_level_rejected(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("- just\n- a\n- list\n")
        with pytest.raises(ConfigError, match="mapping"):
            parse_config(path)


class TestCoercion:
    def test_list_becomes_tuple(self, tmp_path):
        path = write_yaml(tmp_path, {"patch": {"shape": [2, 4, 4]}})
        assert parse_config(path).patch.shape == (2, 4, 4)

    def test_whole_float_accepted_for_int(self, tmp_path):
        path = write_yaml(tmp_path, {"train": {"epochs": 8.0}})
        assert parse_config(path).train.epochs == 8

    def test_fractional_float_rejected_for_int(self, tmp_path):
        path = write_yaml(tmp_path, {"train": {"epochs": 8.5}})
        with pytest.raises(ConfigError, match="integer"):
            parse_config(path)

    def test_int_accepted_for_float(self, tmp_path):
        path = write_yaml(tmp_path, {"train": {"lr0": 1}})
        cfg = parse_config(path)
        assert cfg.train.lr0 == 1.0
        assert isinstance(cfg.train.lr0, float)

    def test_non_bool_rejected_for_bool(self, tmp_path):
        path = write_yaml(tmp_path, {"norm": {"invert": 1}})
        with pytest.raises(ConfigError, match="boolean"):
            parse_config(path)

    def test_string_rejected_for_number(self, tmp_path):
        path = write_yaml(tmp_path, {"train": {"lr0": "fast"}})
        with pytest.raises(ConfigError, match="number"):
            parse_config(path)

    def test_null_clears_optional(self, tmp_path):
        path = write_yaml(tmp_path, {"norm": {"upper_top_percent": None,
                                              "upper_clip": 500.0}})
        cfg = parse_config(path)
        assert cfg.norm.upper_top_percent is None
        assert cfg.norm.upper_clip == 500.0


class TestDottedOverrides:
    def test_types_parse_as_yaml(self):
        cfg = parse_config(overrides=["train.lr0=0.01",
                                      "patch.mode=planes2d",
                                      "norm.upper_clip=null",
                                      "eval.seeds=[0, 4]",
                                      "seed=11"])
        assert cfg.train.lr0 == 0.01
        assert cfg.patch.mode == "planes2d"
        assert cfg.norm.upper_clip is None
        assert cfg.eval.seeds == (0, 4)
        assert cfg.seed == 11

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="section.key=value"):
            parse_config(overrides=["train.lr0"])

    def test_unknown_root_rejected(self):
        with pytest.raises(ConfigError, match="'trainn'"):
            parse_config(overrides=["trainn.lr0=1"])

    def test_unknown_leaf_rejected(self):
        with pytest.raises(ConfigError, match="'train.lr00'"):
            parse_config(overrides=["train.lr00=1"])

    def test_scalar_is_not_a_section(self):
        with pytest.raises(ConfigError, match="not a section"):
            parse_config(overrides=["seed.inner=1"])


class TestSerialization:
    def test_dump_and_reload_round_trip(self, tmp_path):
        cfg = parse_config(preset="phantom",
                           overrides=["seed=5", "train.lr0=0.003"])
        out = tmp_path / "resolved.yaml"
        dump_config(cfg, out)
        reloaded = parse_config(out)
        assert config_to_dict(reloaded) == config_to_dict(cfg)

    def test_dict_shape(self):
        d = config_to_dict(RunConfig())
        assert set(d) == {"preset", "seed", "workers", "out_dir", "phantom",
                          "seg", "patch", "norm", "encoder", "train", "ig",
                          "eval"}


class TestConfigHash:
    def test_out_dir_and_workers_excluded(self):
        a = parse_config(overrides=["out_dir=x", "workers=1"])
        b = parse_config(overrides=["out_dir=y", "workers=8"])
        assert config_hash(a) == config_hash(b)

    def test_content_fields_included(self):
        base = parse_config()
        assert config_hash(base) != config_hash(parse_config(overrides=["seed=1"]))
        assert config_hash(base) != config_hash(
            parse_config(overrides=["train.lr0=0.123"]))
        assert config_hash(base) != config_hash(parse_config(preset="phantom"))

    def test_stable_across_calls(self):
        assert config_hash(parse_config()) == config_hash(parse_config())
        assert len(config_hash(parse_config())) == 32
