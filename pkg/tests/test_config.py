"""Tests for experiment configuration."""

from __future__ import annotations

from pathlib import Path

import pytest

from quadfault.config import (
    ExperimentConfig,
    Method,
    TrainConfig,
    apply_overrides,
    config_hash,
    default_workers,
    load_experiment,
    preset_loss,
)
from quadfault.exceptions import ConfigError
from quadfault.losses import QuadrupletLossConfig


CONFIGS_DIR = Path(__file__).parent.parent / "configs"


def test_defaults_follow_process_settings() -> None:
    """Test the default model shape and training settings."""
    cfg = TrainConfig()

    assert (cfg.hidden_size, cfg.layer_count, cfg.embed_dim) == (100, 3, 64)
    assert (cfg.batch_size, cfg.learning_rate, cfg.dropout) == (256, 1e-3, 0.5)
    assert cfg.class_count == 7


def test_bearing_defaults() -> None:
    """Test the bearing preset of model shape and loss."""
    cfg = TrainConfig.cwru_defaults()

    assert (cfg.hidden_size, cfg.embed_dim, cfg.class_count) == (30, 15, 10)
    assert (cfg.loss.margin, cfg.loss.margin2) == (5.0, 10.0)
    assert cfg.loss.beta == 1e-3


def test_load_sample_config() -> None:
    """Test that the shipped synthetic experiment parses."""
    cfg = load_experiment(CONFIGS_DIR / "synthetic.yaml")

    assert cfg.dataset.kind == "synthetic"
    assert cfg.methods[0] is Method.QDM
    assert cfg.scenario.imbalanced_classes == (3,)
    assert cfg.train.loss.margin2 == 10.0


@pytest.mark.parametrize("path", sorted(CONFIGS_DIR.glob("*.yaml")), ids=lambda p: p.stem)
def test_shipped_configs_parse(path: Path) -> None:
    """Test that every example configuration loads and is self-consistent."""
    cfg = load_experiment(path)

    assert cfg.scenario.imbalanced_classes
    assert cfg.train.embed_dim < cfg.train.hidden_size


def test_cwru_config_maps_every_condition() -> None:
    """Test that the bearing example lists ten distinct conditions."""
    cfg = load_experiment(CONFIGS_DIR / "cwru.yaml")

    assert sorted(s.class_id for s in cfg.dataset.signals) == list(range(10))
    assert cfg.train == TrainConfig.cwru_defaults(epochs=50)


def test_overrides_parse_yaml_values() -> None:
    """Test that dotted overrides create nested keys with typed values."""
    data = apply_overrides(
        {"train": {"epochs": 3}},
        ["train.epochs=7", "train.loss.beta=0", "methods=[qdm, plain]", "name=x"],
    )

    assert data == {
        "train": {"epochs": 7, "loss": {"beta": 0}},
        "methods": ["qdm", "plain"],
        "name": "x",
    }


def test_malformed_override() -> None:
    """Test that an override without '=' raises ConfigError."""
    with pytest.raises(ConfigError):
        apply_overrides({}, ["train.epochs"])


def test_unknown_key(tmp_path: Path) -> None:
    """Test that a misspelled key is rejected with its section."""
    path = tmp_path / "exp.yaml"
    path.write_text("train:\n  epoch: 5\n")

    with pytest.raises(ConfigError, match="epoch"):
        load_experiment(path)


def test_unknown_method() -> None:
    """Test that an unknown method name is rejected."""
    with pytest.raises(ConfigError, match="unknown method"):
        load_experiment(None, ["methods=[qdm, magic]"])


def test_embedding_wider_than_hidden() -> None:
    """Test that the embedding must be narrower than the LSTM."""
    with pytest.raises(ConfigError):
        TrainConfig(hidden_size=10, embed_dim=10)


def test_method_overrides_and_seeds() -> None:
    """Test that cells merge method overrides and use seed_base + repeat."""
    cfg = ExperimentConfig.from_dict({
        "seed_base": 100,
        "train": {"hidden_size": 8, "embed_dim": 4},
        "method_overrides": {"siamese": {"loss": {"margin": 2.0}}},
    })

    siamese = cfg.train_config_for(Method.SIAMESE, 3)
    plain = cfg.train_config_for(Method.PLAIN, 0)

    assert siamese.seed == 103
    assert siamese.method is Method.SIAMESE
    assert siamese.loss.margin == 2.0
    assert siamese.hidden_size == 8
    assert plain.loss.margin == 20.0


def test_scenario_targets_resolve_labels() -> None:
    """Test that imbalanced classes may be given by label name."""
    cfg = ExperimentConfig.from_dict({
        "scenario": {"imbalanced_classes": ["fault_8", 1], "ratio": 20}
    })

    targets = cfg.scenario.targets({"fault_1": 0, "fault_8": 3})

    assert targets == {3: 0.05, 1: 0.05}


def test_scenario_unknown_label() -> None:
    """Test that an unknown class label is rejected."""
    cfg = ExperimentConfig.from_dict({"scenario": {"imbalanced_classes": ["fault_9"]}})

    with pytest.raises(ConfigError):
        cfg.scenario.targets({"fault_1": 0})


@pytest.mark.parametrize(
    ("preset", "margin2", "weights"),
    [("A", 20.0, (1.0, 1.0)), ("B", 20.0, (50.0, 20.0)), ("C", 50.0, (1.0, 1.0))],
)
def test_ablation_presets(
    preset: str, margin2: float, weights: tuple[float, float]
) -> None:
    """Test that presets A-C equalize margins and/or drop the weights."""
    loss = preset_loss(QuadrupletLossConfig(), preset)

    assert loss.margin2 == margin2
    assert (loss.lambda_pos, loss.lambda_minor) == weights
    assert not loss.enforce_constraints


def test_preset_d_is_base() -> None:
    """Test that preset D keeps the configured loss."""
    base = QuadrupletLossConfig(beta=0.1)

    assert preset_loss(base, "d") == base


def test_unknown_preset() -> None:
    """Test that an unknown preset is rejected."""
    with pytest.raises(ConfigError):
        preset_loss(QuadrupletLossConfig(), "E")


def test_config_hash_is_stable() -> None:
    """Test that equal configurations hash equally and changes show."""
    a = TrainConfig(seed=1)

    assert config_hash(a) == config_hash(TrainConfig(seed=1))
    assert config_hash(a) != config_hash(TrainConfig(seed=2))
    assert len(config_hash(a)) == 16


def test_config_round_trip() -> None:
    """Test that a configuration survives its dictionary form."""
    cfg = load_experiment(CONFIGS_DIR / "synthetic.yaml", ["repeats=2"])

    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_workers_from_environment(monkeypatch: pytest.MonkeyPatch) -> None:
    """Test that QUADFAULT_WORKERS sets the pool size and is validated."""
    monkeypatch.setenv("QUADFAULT_WORKERS", "3")
    assert default_workers() == 3

    monkeypatch.setenv("QUADFAULT_WORKERS", "0")
    with pytest.raises(ConfigError):
        default_workers()
