import pytest

from batchaug.augment import Compose, HFlip, Identity, PadCrop
from batchaug.config import (
    SCHEMA,
    apply_override,
    build_train_config,
    default_config,
    dump_config,
    parse_config,
)
from batchaug.errors import ConfigError
from batchaug.optim import StepDecay, WarmupThenStep


class TestDefaults:
    def test_every_key_has_a_default(self):
        cfg = default_config()
        for section, keys in SCHEMA.items():
            for key in keys:
                assert key in cfg[section]

    def test_empty_document_is_all_defaults(self):
        assert parse_config("") == default_config()

    def test_defaults_build_a_train_config(self):
        tc = build_train_config(default_config())
        assert tc.replicas == 2
        assert tc.batch_size == 32


class TestParsing:
    def test_values_and_sections(self):
        cfg = parse_config("[train]\nreplicas = 4\nbase_lr = 0.02\n"
                           "[model]\ntext = mlp:64\n")
        assert cfg["train"]["replicas"] == 4
        assert cfg["train"]["base_lr"] == 0.02
        assert cfg["model"]["text"] == "mlp:64"

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config("# top comment\n\n[train]\n"
                           "epochs = 7  # inline\n\n")
        assert cfg["train"]["epochs"] == 7

    def test_lists(self):
        cfg = parse_config("[train]\nmilestones = 10,15\n"
                           "[diagnostics]\nm_list = 1,4\n"
                           "[dynamics]\neta_fractions = 0.2,0.8\n")
        assert cfg["train"]["milestones"] == (10, 15)
        assert cfg["diagnostics"]["m_list"] == (1, 4)
        assert cfg["dynamics"]["eta_fractions"] == (0.2, 0.8)

    def test_empty_list_value(self):
        cfg = parse_config("[train]\nmilestones =\n")
        assert cfg["train"]["milestones"] == ()

    def test_booleans(self):
        cfg = parse_config("[train]\nwith_replacement = true\n")
        assert cfg["train"]["with_replacement"] is True
        with pytest.raises(ConfigError, match="line 2"):
            parse_config("[train]\nwith_replacement = yes\n")

    def test_unknown_section_cites_line(self):
        with pytest.raises(ConfigError, match="line 3.*unknown section"):
            parse_config("[train]\nepochs = 1\n[nonsense]\n")

    def test_unknown_key_cites_line(self):
        with pytest.raises(ConfigError, match="line 2.*train.learning"):
            parse_config("[train]\nlearning = 0.1\n")

    def test_bad_value_cites_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config("[train]\nepochs = soon\n")

    def test_out_of_range_cites_line(self):
        with pytest.raises(ConfigError, match="line 4.*momentum"):
            parse_config("[train]\nepochs = 1\nbase_lr = 0.1\n"
                         "momentum = 1.5\n")

    def test_key_outside_section(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config("epochs = 1\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config("[train]\nepochs\n")

    def test_unterminated_header(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config("[train\n")


class TestCanonicalDump:
    def test_round_trip_fixed_point(self):
        text = ("[train]\nreplicas = 8\nmilestones = 5,9\n"
                "[augment]\nspec = padcrop:4,hflip:0.5\n")
        cfg = parse_config(text)
        canon = dump_config(cfg)
        assert parse_config(canon) == cfg
        assert dump_config(parse_config(canon)) == canon

    def test_dump_orders_sections_like_schema(self):
        lines = dump_config(default_config()).splitlines()
        headers = [l for l in lines if l.startswith("[")]
        assert headers == [f"[{s}]" for s in SCHEMA]


class TestOverrides:
    def test_valid_override(self):
        cfg = default_config()
        apply_override(cfg, "train.replicas=8")
        assert cfg["train"]["replicas"] == 8

    def test_override_list_value(self):
        cfg = default_config()
        apply_override(cfg, "diagnostics.m_list=1,2")
        assert cfg["diagnostics"]["m_list"] == (1, 2)

    def test_unknown_override_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            apply_override(default_config(), "train.nope=1")

    def test_missing_equals_sign(self):
        with pytest.raises(ConfigError, match="section.key=value"):
            apply_override(default_config(), "train.replicas")

    def test_override_still_validated(self):
        with pytest.raises(ConfigError, match="momentum"):
            apply_override(default_config(), "train.momentum=2.0")


class TestBuildTrainConfig:
    def test_schedule_without_warmup(self):
        cfg = parse_config("[train]\nmilestones = 3,6\n"
                           "lr_decay_factor = 5\n")
        tc = build_train_config(cfg)
        assert isinstance(tc.schedule, StepDecay)
        assert tc.schedule.milestones == (3, 6)
        assert tc.schedule.factor == 5.0

    def test_schedule_with_warmup(self):
        cfg = parse_config("[train]\nwarmup_epochs = 2\nmilestones = 8\n")
        tc = build_train_config(cfg)
        assert isinstance(tc.schedule, WarmupThenStep)
        assert tc.schedule.warmup_epochs == 2

    def test_transform_parsed(self):
        cfg = parse_config("[augment]\nspec = padcrop:4,hflip:0.5\n")
        tc = build_train_config(cfg)
        assert isinstance(tc.transform, Compose)
        assert isinstance(tc.transform.parts[0], PadCrop)
        assert isinstance(tc.transform.parts[1], HFlip)

    def test_identity_transform(self):
        cfg = parse_config("[augment]\nspec = identity\n")
        assert isinstance(build_train_config(cfg).transform, Identity)

    def test_bad_transform_is_config_error(self):
        cfg = parse_config("[augment]\nspec = swirl:3\n")
        with pytest.raises(ConfigError):
            build_train_config(cfg)

    def test_ghost_divisibility_enforced(self):
        cfg = parse_config("[train]\nbatch_size = 10\nreplicas = 1\n"
                           "ghost_size = 32\n")
        with pytest.raises(ConfigError, match="ghost"):
            build_train_config(cfg)
