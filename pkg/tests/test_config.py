"""Tests for the flat key=value configuration layer."""

import dataclasses

import numpy as np
import pytest

from localign.config import (
    ConfigError,
    config_hash,
    data_options_from_flat,
    flatten_config,
    full_flat_config,
    known_keys,
    merge_flat,
    parse_config_text,
    parse_kv,
    render_value,
    train_config_from_flat,
    validate_flat,
    validate_keys,
    world_config_from_flat,
)
from localign.losses import Reduction
from localign.synthetic import SyntheticWorldConfig
from localign.training import Schedule, TrainConfig


class TestTextParsing:
    def test_comments_and_blanks_ignored(self):
        text = "# a comment\n\ntrain.epochs=3\n  \n# another\nworld.grid=5\n"
        assert parse_config_text(text) == {"train.epochs": "3", "world.grid": "5"}

    def test_duplicate_key_reports_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text("a=1\na=2\n")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="key=value"):
            parse_kv("no separator")

    def test_whitespace_trimmed(self):
        assert parse_kv("  train.epochs =  7 ") == ("train.epochs", "7")

    def test_value_may_contain_equals(self):
        assert parse_kv("data.path=/tmp/x=y") == ("data.path", "/tmp/x=y")

    def test_merge_overrides_win(self):
        assert merge_flat({"a": "1", "b": "2"}, {"b": "3"}) == {"a": "1", "b": "3"}


class TestRendering:
    def test_scalar_forms(self):
        assert render_value(True) == "true"
        assert render_value(False) == "false"
        assert render_value(None) == "none"
        assert render_value(3) == "3"
        assert render_value(0.1) == "0.1"
        assert render_value(Schedule.COSINE) == "cosine"
        assert render_value(Reduction.MEAN) == "mean"

    def test_sequence_forms(self):
        assert render_value((2, 4)) == "2,4"
        assert render_value((0.95, 1.05)) == "0.95,1.05"
        assert render_value(("edema", "nodule")) == "edema|nodule"

    def test_float_repr_round_trips(self):
        for value in (0.1, 1e-5, 2.5000000000000004, 1.0 / 3.0):
            assert float(render_value(value)) == value


class TestRoundTrip:
    def test_train_config_is_a_fixed_point(self):
        cfg = TrainConfig()
        flat = flatten_config(cfg, prefix="train.")
        rebuilt = train_config_from_flat(flat)
        assert rebuilt == cfg
        assert flatten_config(rebuilt, prefix="train.") == flat

    def test_world_config_is_a_fixed_point(self):
        cfg = SyntheticWorldConfig(seed=9, grid=5, image_size=40)
        flat = flatten_config(cfg, prefix="world.")
        rebuilt = world_config_from_flat(flat)
        assert rebuilt == cfg

    def test_non_default_values_survive(self):
        flat = {
            "train.epochs": "7",
            "train.schedule": "step",
            "train.step_milestones": "2,4",
            "train.early_stop_patience": "none",
            "loss.lambdas": "1,0,0.5,0.5",
            "loss.reduction": "mean",
            "augment.enabled": "false",
            "model.grid": "5",
        }
        cfg = train_config_from_flat(flat)
        assert cfg.epochs == 7
        assert cfg.schedule is Schedule.STEP
        assert cfg.step_milestones == (2, 4)
        assert cfg.early_stop_patience is None
        assert cfg.loss.lambdas == (1.0, 0.0, 0.5, 0.5)
        assert cfg.loss.reduction is Reduction.MEAN
        assert cfg.augment.enabled is False
        assert cfg.model.grid == 5

    def test_long_and_short_aliases_agree(self):
        long_form = train_config_from_flat({"train.model.grid": "5"})
        short_form = train_config_from_flat({"model.grid": "5"})
        assert long_form == short_form

    def test_random_round_trips(self):
        """flatten → parse → flatten is the identity on random configs."""
        rng = np.random.default_rng(7)
        for _ in range(100):
            cfg = TrainConfig(
                epochs=int(rng.integers(1, 50)),
                learning_rate=float(10.0 ** rng.uniform(-5, -2)),
                schedule=list(Schedule)[int(rng.integers(len(Schedule)))],
                batch_size=int(rng.integers(1, 64)),
                seed=int(rng.integers(0, 1000)),
                val_fraction=float(rng.uniform(0.0, 0.5)),
                early_stop_patience=None if rng.random() < 0.5 else int(rng.integers(1, 9)),
                step_milestones=tuple(sorted(int(v) for v in rng.integers(1, 40, size=2))),
            )
            flat = flatten_config(cfg, prefix="train.")
            assert flatten_config(train_config_from_flat(flat), prefix="train.") == flat


class TestValidation:
    def test_unknown_key_is_named(self):
        with pytest.raises(ConfigError, match="train.bogus"):
            validate_keys({"train.bogus": "1"})

    def test_bad_value_names_key(self):
        with pytest.raises(ConfigError, match="train.epochs"):
            validate_flat({"train.epochs": "many"})

    def test_bad_enum_lists_choices(self):
        with pytest.raises(ConfigError, match="cosine"):
            validate_flat({"train.schedule": "spiral"})

    def test_pair_arity_enforced(self):
        with pytest.raises(ConfigError, match="augment.scaling"):
            validate_flat({"augment.scaling": "1.0"})

    def test_known_keys_cover_all_sections(self):
        keys = known_keys()
        for expected in (
            "train.epochs",
            "train.augment.enabled",
            "augment.enabled",
            "loss.tau_global",
            "model.grid",
            "world.seed",
            "data.count",
        ):
            assert expected in keys


class TestHashing:
    def test_hash_is_order_independent(self):
        a = {"x.b": "2", "x.a": "1"}
        b = {"x.a": "1", "x.b": "2"}
        assert config_hash(a) == config_hash(b)

    def test_hash_tracks_values(self):
        base = {"train.epochs": "3"}
        assert config_hash(base) != config_hash({"train.epochs": "4"})
        assert len(config_hash(base)) == 64

    def test_full_flat_config_merges_sections(self):
        flat = full_flat_config(
            train_cfg=TrainConfig(),
            world_cfg=SyntheticWorldConfig(),
            data={"count": 10, "start": 0},
        )
        assert flat["data.count"] == "10"
        assert "train.learning_rate" in flat
        assert "world.seed" in flat
        assert list(flat) == sorted(flat)


class TestDataOptions:
    def test_defaults(self):
        assert data_options_from_flat({}) == {"count": 200, "start": 0}

    def test_overrides(self):
        assert data_options_from_flat({"data.count": "12", "data.start": "3"}) == {
            "count": 12,
            "start": 3,
        }
