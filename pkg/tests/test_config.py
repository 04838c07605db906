import pytest

from fpquality.config import ConfigError, build_config, dump_config, load_config, parse_config_text


def test_parse_and_nest(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# desk run\nlr = 1e-3\nlambda4 = 5\nchannels_c = 64\npatch_size = 12\ninput_size = 96\n")
    cfg = load_config(path)
    assert cfg.train.lr == 1e-3 and cfg.weights.lambda4 == 5.0 and cfg.patch_size == 12
    model = cfg.model_config()
    assert model.channels_c == 64 and model.input_size == (96, 96)
    assert model.spatial == (3, 3) and model.map_out == (8, 8)


def test_unknown_key_is_error():
    with pytest.raises(ConfigError, match="line 2: unknown config key 'learning_rate'"):
        parse_config_text("lr = 1\nlearning_rate = 2\n")


def test_duplicate_key_is_error():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("lr = 1\nlr = 2\n")


def test_malformed_line():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("lr 1\n")


def test_bad_value():
    with pytest.raises(ConfigError, match="epochs_finetune"):
        build_config({"epochs_finetune": "ten"})


def test_booleans():
    cfg = build_config({"use_fusion": "false", "use_regional_head": "yes"})
    assert cfg.model_config().use_fusion is False and cfg.model_config().use_regional_head is True


def test_override_layers_later_wins():
    cfg = build_config({"seed": "1", "batch_size": "10"}, {"seed": 5, "batch_size": None})
    assert cfg.train.seed == 5 and cfg.train.batch_size == 10


def test_dump_reloads_equal(tmp_path):
    cfg = build_config({"lr": "3e-4", "use_fusion": "0", "fractions": "0,0.1,0.2", "input_size": "96x96",
                        "patch_size": "12"})
    path = tmp_path / "dump.cfg"
    path.write_text(dump_config(cfg))
    again = load_config(path)
    assert again.to_dict() == cfg.to_dict()
    assert again.digest() == cfg.digest()


def test_digest_changes_with_content():
    assert build_config({"lr": "1e-3"}).digest() != build_config({"lr": "2e-3"}).digest()


def test_pipeline_validation():
    with pytest.raises(ConfigError):
        build_config({"threshold": "7"})
