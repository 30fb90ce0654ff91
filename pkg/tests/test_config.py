from dataclasses import fields

import pytest

from tempsweep.base.exceptions import ConfigError
from tempsweep.config import (
    ModelShape,
    RunOptions,
    Settings,
    all_field_names,
    load_settings,
    parse_text,
    section_fields,
)
from tempsweep.model import ModelDims
from tempsweep.sweep import SweepSpec
from tempsweep.training import TrainConfig

CONFIG = """
seed = 4
batch_size = 16

[train]
seed = 7
learning_rate = 0.05

[lm]
max_epochs = 3

[decode]
alpha = 1
fixed_length = true

[sweep]
values = [1.0, 0.5]
seeds = [0, 1]
samples_per_point = 200
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(CONFIG, encoding="utf-8")
    return path


def _field(cls, name):
    return next(f for f in fields(cls) if f.name == name)


class TestLoadSettings:
    def test_defaults(self):
        settings = load_settings()
        assert settings.build("train") == TrainConfig()
        assert settings.build("lm").max_epochs == 10
        assert settings.build("run") == RunOptions()

    def test_file(self, config_file):
        settings = load_settings(config_file)
        train = settings.build("train")
        assert (train.seed, train.learning_rate, train.batch_size) == (7, 0.05, 16)
        adv = settings.build("adv")
        assert (adv.seed, adv.batch_size) == (4, 16)
        decode = settings.build("decode")
        assert (decode.seed, decode.alpha, decode.fixed_length) == (4, 1.0, True)
        assert isinstance(decode.alpha, float)
        sweep = settings.build("sweep")
        assert (sweep.values, sweep.seeds, sweep.samples_per_point) == ((1.0, 0.5), (0, 1), 200)

    def test_lm_reads_only_its_own_table(self, config_file):
        lm = load_settings(config_file).build("lm")
        assert (lm.max_epochs, lm.seed, lm.batch_size) == (3, 0, 32)

    def test_flags_override_file(self, config_file):
        settings = load_settings(config_file, {"seed": "9", "alpha": "0.7"})
        assert settings.build("train").seed == 9
        assert settings.build("experiment").seed == 9
        assert settings.build("decode").alpha == 0.7

    def test_assignments_override_flags(self, config_file):
        settings = load_settings(
            config_file, {"seed": "9"}, ["train.seed=11", "lm.learning_rate=0.1"]
        )
        assert settings.build("train").seed == 11
        assert settings.build("adv").seed == 9
        assert settings.build("lm").learning_rate == 0.1

    def test_extra_values_in_build(self):
        marker = object()
        decode = load_settings().build("decode", discriminator=marker, strategy="disc_rejection", threshold=0.5)
        assert decode.discriminator is marker

    @pytest.mark.parametrize(
        "text",
        [
            "unknown_key = 1\n",
            "[nowhere]\nseed = 1\n",
            "[train]\nalpha = 0.5\n",
            "[decode]\nfixed_length = 1\n",
            "[sweep]\nvalues = 'fast'\n",
            "seed = \n",
        ],
    )
    def test_invalid_file_failed(self, tmp_path, text):
        path = tmp_path / "bad.toml"
        path.write_text(text, encoding="utf-8")
        with pytest.raises(ConfigError):
            load_settings(path)

    def test_missing_file_failed(self, tmp_path):
        with pytest.raises(ConfigError):
            load_settings(tmp_path / "missing.toml")

    @pytest.mark.parametrize("assignment", ["train.seed", "seed=1", "train.nope=1", "discriminator.seed=1"])
    def test_invalid_assignment_failed(self, assignment):
        with pytest.raises(ConfigError):
            load_settings(assignments=[assignment])

    def test_unknown_flat_key_failed(self):
        with pytest.raises(ConfigError):
            load_settings(flat={"momentum": "0.9"})

    def test_invalid_value_failed_on_build(self):
        settings = load_settings(flat={"learning_rate": "-1"})
        with pytest.raises(ConfigError):
            settings.build("train")


class TestParseText:
    @pytest.mark.parametrize(
        "cls, name, text, expected",
        [
            (SweepSpec, "values", "1.0, 0.5,0.1", (1.0, 0.5, 0.1)),
            (SweepSpec, "seeds", "0,1,2", (0, 1, 2)),
            (SweepSpec, "n", "3", 3),
            (SweepSpec, "range_rules", "no", False),
            (SweepSpec, "range_rules", "TRUE", True),
            (SweepSpec, "control", "beam", "beam"),
            (TrainConfig, "learning_rate", "1e-3", 0.001),
        ],
    )
    def test_values(self, cls, name, text, expected):
        assert parse_text(_field(cls, name), text) == expected

    @pytest.mark.parametrize(
        "cls, name, text",
        [(SweepSpec, "range_rules", "maybe"), (SweepSpec, "n", "five"), (SweepSpec, "seeds", "0,x")],
    )
    def test_invalid_failed(self, cls, name, text):
        with pytest.raises(ConfigError):
            parse_text(_field(cls, name), text)


class TestSections:
    def test_discriminator_is_not_configurable(self):
        assert "discriminator" not in {f.name for f in section_fields("decode")}
        assert "discriminator" not in all_field_names()

    def test_shared_field_is_set_everywhere_but_lm(self):
        settings = Settings()
        settings.set_flat("batch_size", 8)
        assert settings.values["train"]["batch_size"] == 8
        assert settings.values["adv"]["batch_size"] == 8
        assert "batch_size" not in settings.values["lm"]

    def test_model_shape(self):
        assert ModelShape(4, 5, 2).dims(10) == ModelDims(10, 4, 5, 2)

    def test_run_options_workers_failed(self):
        with pytest.raises(ConfigError):
            RunOptions(workers=0)
