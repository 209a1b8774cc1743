"""Objective composition, variant dispatch, and flat config handling."""

import math

import pytest

from sketchcolor.config import (
    BINARY,
    MULTICLASS,
    ConfigError,
    LossWeights,
    NonFiniteLossError,
    RunConfig,
    Scheme,
    TrainConfig,
    Variant,
    VariantConfig,
    active_discriminators,
    load_config_file,
    parse_config_text,
    total_objective,
)


def test_total_objective_weighted_sum():
    w = LossWeights(w_g=1.0, w_b=0.5, w_m=2.0)
    assert total_objective(3.0, 4.0, 5.0, w) == pytest.approx(3.0 + 2.0 + 10.0)


def test_total_objective_zero_weights_disable_terms():
    w = LossWeights(w_g=1.0, w_b=0.0, w_m=0.0)
    assert total_objective(1.25, 7.0, 9.0, w) == 1.25


def test_total_objective_unit_weights_plain_sum():
    assert total_objective(1.0, 2.0, 3.0, LossWeights()) == 6.0


@pytest.mark.parametrize("bad,name", [
    ((float("nan"), 1.0, 1.0), "l_g"),
    ((1.0, float("inf"), 1.0), "l_b"),
    ((1.0, 1.0, float("nan")), "l_m"),
])
def test_total_objective_nonfinite_names_term(bad, name):
    with pytest.raises(NonFiniteLossError, match=name):
        total_objective(*bad, LossWeights())


def test_loss_weights_reject_negative_and_nonfinite():
    with pytest.raises(ConfigError):
        LossWeights(w_b=-0.1)
    with pytest.raises(ConfigError):
        LossWeights(w_m=float("nan"))


def test_active_discriminators_by_variant():
    assert active_discriminators(Variant.MULTICLASS) == frozenset({MULTICLASS})
    assert active_discriminators(Variant.BINARY) == frozenset({BINARY})
    assert active_discriminators(Variant.BOTH) == frozenset({MULTICLASS, BINARY})
    vc = VariantConfig(variant=Variant.BINARY)
    assert active_discriminators(vc) == frozenset({BINARY})


def test_train_config_defaults_match_reference_recipe():
    cfg = TrainConfig()
    assert cfg.epochs == 200
    assert cfg.learning_rate == pytest.approx(0.0002)
    assert (cfg.beta1, cfg.beta2) == (0.5, 0.999)
    assert cfg.batch_size == 1
    assert cfg.image_size == 256


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(image_size=30)  # must divide by 4


def test_parse_config_text_comments_and_blank_lines():
    text = """
    # a comment
    epochs = 5
    w_b=0.5   # trailing comment
    run_dir = runs/x
    """
    parsed = parse_config_text(text)
    assert parsed == {"epochs": "5", "w_b": "0.5", "run_dir": "runs/x"}


def test_parse_config_text_rejects_garbage():
    with pytest.raises(ConfigError):
        parse_config_text("this is not a key value line")


def test_load_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epochs = 3\nscheme = unpaired\n")
    assert load_config_file(path) == {"epochs": "3", "scheme": "unpaired"}


def test_run_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_mapping({"epochz": "3"})


def test_run_config_mapping_round_trip():
    cfg = RunConfig.from_mapping({"epochs": "7", "scheme": "unpaired",
                                  "w_b": "0.25", "variant": "binary"})
    again = RunConfig.from_mapping(cfg.to_mapping())
    assert again == cfg
    assert again.train.scheme is Scheme.UNPAIRED
    assert again.variant.weights.w_b == 0.25


def test_run_config_cli_overrides_beat_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epochs = 3\nw_m = 2.0\n")
    cfg = RunConfig.load(path, overrides={"epochs": "9", "w_b": None})
    assert cfg.train.epochs == 9       # override wins
    assert cfg.variant.weights.w_m == 2.0  # file value survives
    assert cfg.variant.weights.w_b == 1.0  # None override means "not given"


def test_with_weights_only_touches_aux_terms():
    cfg = RunConfig.from_mapping({"w_g": "0.5"})
    swept = cfg.with_weights(w_b=5.0, w_m=5.0)
    assert swept.variant.weights.w_g == 0.5
    assert swept.variant.weights.w_b == 5.0
    assert swept.train == cfg.train


def test_every_flat_key_survives_round_trip():
    cfg = RunConfig.from_mapping({})
    mapping = cfg.to_mapping()
    assert set(mapping) == set(RunConfig.FLAT_KEYS)
    for key, value in mapping.items():
        assert isinstance(value, str), key
    assert not math.isnan(float(mapping["w_g"]))
