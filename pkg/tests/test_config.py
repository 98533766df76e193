import pytest

from dualreg.config import RunConfig, build_run_config, load_config, parse_config_text
from dualreg.params import ConfigError


class TestGrammar:
    def test_comments_blanks_and_repeats(self):
        vals = parse_config_text("# top\n\nK = 4   # inline\nK=6\n data.pairs =  3 \n")
        assert vals == {"K": "6", "data.pairs": "3"}

    def test_missing_equals_names_line(self):
        with pytest.raises(ConfigError, match="cfg.txt:2"):
            parse_config_text("K = 4\nnonsense\n", "cfg.txt")


class TestBuild:
    def test_defaults(self):
        cfg = build_run_config({})
        assert cfg == RunConfig()

    def test_typed_values(self):
        cfg = build_run_config({"K": "6", "dual": "no", "features.layer_widths": "16,8",
                                "train.grad_clip": "10", "data.keep_fraction": "1.0",
                                "data.shapes": "torus,helix"})
        assert cfg.pipeline.K == 6 and cfg.pipeline.features.K_feat == 6
        assert cfg.pipeline.dual is False
        assert cfg.pipeline.features.layer_widths == (16, 8)
        assert cfg.train.grad_clip == 10.0
        assert cfg.pair.keep_fraction == 1.0
        assert cfg.shapes == ("torus", "helix")

    def test_k_feat_can_differ(self):
        cfg = build_run_config({"K": "6", "features.K_feat": "4"})
        assert cfg.pipeline.features.K_feat == 4

    def test_none_clears_optional(self):
        assert build_run_config({"train.grad_clip": "none"}).train.grad_clip is None

    @pytest.mark.parametrize("values, match", [
        ({"bogus": "1"}, "unknown config key"),
        ({"K": "four"}, "K"),
        ({"dual": "maybe"}, "not a boolean"),
        ({"data.shapes": "teapot"}, "unknown shape"),
        ({"data.pairs": "0"}, "positive"),
        ({"data.keep_fraction": "1.5"}, "keep_fraction"),
    ])
    def test_rejects(self, values, match):
        with pytest.raises(ConfigError, match=match):
            build_run_config(values)

    def test_dump_round_trip(self):
        cfg = build_run_config({"K": "5", "alpha": "0.25", "train.grad_clip": "3.5",
                                "data.shapes": "sphere", "inlier.angle_mode": "all_pairs"})
        assert build_run_config(parse_config_text(cfg.to_text())) == cfg


class TestLoad:
    def test_overrides_beat_file_beat_base(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("K = 5\nn_iter = 2\n")
        cfg = load_config(f, ["n_iter=4"], base={"K": "7", "alpha": "0.5"})
        assert (cfg.pipeline.K, cfg.pipeline.n_iter, cfg.pipeline.alpha) == (5, 4, 0.5)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read config"):
            load_config(tmp_path / "absent.cfg")

    def test_bad_override(self):
        with pytest.raises(ConfigError, match="key=value"):
            load_config(None, ["K"])
