import pytest

from ascfusion.config import (
    ExperimentConfig,
    apply_overrides,
    load_config,
    parse_ini,
    split_flag_overrides,
    valid_keys,
)
from ascfusion.errors import ConfigError


def test_defaults_validate():
    cfg = load_config()
    assert cfg.cnn.classes == 15 and cfg.evaluation.mode == "cv"
    assert cfg.dev_manifest_path().as_posix().endswith("data/manifest.txt")


def test_ini_round_trip(tmp_path):
    cfg = apply_overrides(ExperimentConfig(), [("gbm", "num_leaves", "64"), ("cnn", "groups", "48:3:8,32:3:32"),
                                               ("fusion", "methods", "arithmetic,rank"),
                                               ("lda", "strict", "yes")])
    path = tmp_path / "c.ini"
    path.write_text(cfg.to_ini())
    back = load_config(path)
    assert back == cfg
    assert back.digest() == cfg.digest()
    assert back.cnn.groups == ((48, 3, 8), (32, 3, 32))
    assert back.fusion.methods == ("arithmetic", "rank") and back.lda.strict is True


def test_shipped_configs_load():
    from pathlib import Path
    for path in sorted((Path(__file__).parents[1] / "configs").glob("*.ini")):
        load_config(path)


def test_flag_overrides():
    triples = split_flag_overrides(["--gbm.learning_rate", "0.1", "--training.max_epochs=3"])
    assert triples == [("gbm", "learning_rate", "0.1"), ("training", "max_epochs", "3")]
    cfg = load_config(None, triples)
    assert cfg.gbm.learning_rate == 0.1 and cfg.training.max_epochs == 3


def test_file_then_flags_precedence(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[gbm]\nnum_rounds = 7\nmax_bins = 64\n")
    cfg = load_config(path, [("gbm", "num_rounds", "9")])
    assert cfg.gbm.num_rounds == 9 and cfg.gbm.max_bins == 64


def test_unknown_key_lists_valid_keys():
    with pytest.raises(ConfigError) as exc:
        split_flag_overrides(["--gbm.depth", "3"])
    for key in valid_keys("gbm"):
        assert key in str(exc.value)
    with pytest.raises(ConfigError, match="valid sections"):
        parse_and_load("[nope]\nx = 1\n")


def parse_and_load(text):
    return apply_overrides(ExperimentConfig(), parse_ini(text))


@pytest.mark.parametrize("section,key,value", [
    ("gbm", "num_leaves", "many"),
    ("lda", "strict", "maybe"),
    ("evaluation", "mode", "test"),
    ("evaluation", "branches", "cnn,mlp"),
    ("fusion", "meta_kind", "forest"),
    ("fusion", "method", "median"),
    ("gbm", "learning_rate", "-1"),
    ("dataset", "n_folds", "1"),
    ("cnn", "classes", "10"),
])
def test_invalid_values(section, key, value):
    with pytest.raises(ConfigError):
        load_config(None, [(section, key, value)])


def test_hidden_keys_rejected():
    assert "seed" not in valid_keys("training")
    with pytest.raises(ConfigError):
        split_flag_overrides(["--training.seed", "3"])


def test_bad_tokens():
    with pytest.raises(ConfigError):
        split_flag_overrides(["positional"])
    with pytest.raises(ConfigError, match="needs a value"):
        split_flag_overrides(["--gbm.num_rounds"])
    with pytest.raises(ConfigError, match="does not exist"):
        load_config("/nonexistent/config.ini")
