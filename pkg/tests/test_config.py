"""Configuration parsing, validation, and round-trip tests."""

import numpy as np
import pytest

import aerowrench.config as cfgm
from aerowrench.errors import ParseError, ValidationError


def write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestDefaults:
    def test_empty_file_gives_full_defaults(self, tmp_path):
        cfg = cfgm.parse_config(write(tmp_path, ""))
        assert cfg.system.mass == 3.49
        assert cfg.system.gravity == 9.81
        assert cfg.filter.delta == 72.0
        assert cfg.run.t_step == 0.01
        assert cfg.run.duration == 70.0
        assert cfg.run.estimators == ("qukf", "ekf")
        assert np.allclose(np.diag(cfg.admittance.c_v), 1.59)
        assert cfg.filter.q_diag.shape == (19,)
        assert cfg.filter.q_diag[6] == 0.1 and cfg.filter.q_diag[-1] == 0.0
        assert len(cfg.profile.segments) == 4

    def test_packaged_default_file_matches_code_defaults(self):
        cfg = cfgm.parse_config(cfgm.default_config_path())
        assert cfg.to_dict() == cfgm.ScenarioConfig().to_dict()

    def test_partial_override_keeps_other_defaults(self, tmp_path):
        cfg = cfgm.parse_config(write(tmp_path, "run:\n  seed: 9\n"))
        assert cfg.run.seed == 9
        assert cfg.run.duration == 70.0
        assert cfg.system.mass == 3.49


class TestRoundTrip:
    def test_serialize_parse_identity(self, tmp_path):
        cfg = cfgm.ScenarioConfig()
        cfg.run.seed = 1234
        cfg.run.duration = 12.5
        cfg.filter.delta = 55.5
        cfg.system.mass = 2.75
        cfg.profile.segments[0].force = np.array([0.1, -0.2, 0.3])
        text = cfgm.serialize_config(cfg)
        cfg2 = cfgm.parse_config(write(tmp_path, text))
        assert cfg2.to_dict() == cfg.to_dict()
        # and a second cycle is stable
        cfg3 = cfgm.parse_config(write(tmp_path, cfgm.serialize_config(cfg2)))
        assert cfg3.to_dict() == cfg.to_dict()

    def test_digest_tracks_content(self):
        a = cfgm.ScenarioConfig()
        b = cfgm.ScenarioConfig()
        assert cfgm.config_digest(a) == cfgm.config_digest(b)
        b.run.seed = 1
        assert cfgm.config_digest(a) != cfgm.config_digest(b)


class TestParseErrors:
    def test_unknown_section(self, tmp_path):
        with pytest.raises(ParseError, match="unknown section 'fltr'"):
            cfgm.parse_config(write(tmp_path, "fltr:\n  delta: 3\n"))

    def test_unknown_key_names_field(self, tmp_path):
        with pytest.raises(ParseError, match="filter.detla"):
            cfgm.parse_config(write(tmp_path, "filter:\n  detla: 3\n"))

    def test_system_delta_rejected(self, tmp_path):
        # the observer gain lives in the filter section only
        with pytest.raises(ParseError, match="system.delta"):
            cfgm.parse_config(write(tmp_path, "system:\n  delta: 10\n"))

    def test_syntax_error_reports_line(self, tmp_path):
        bad = "run:\n  seed: 3\n bad indent: [\n"
        with pytest.raises(ParseError, match=r":\d+"):
            cfgm.parse_config(write(tmp_path, bad))

    def test_non_numeric_field(self, tmp_path):
        with pytest.raises(ParseError, match="system.mass"):
            cfgm.parse_config(write(tmp_path, "system:\n  mass: heavy\n"))

    def test_fractional_seed_rejected(self, tmp_path):
        with pytest.raises(ParseError, match="run.seed"):
            cfgm.parse_config(write(tmp_path, "run:\n  seed: 3.5\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError, match="nope.yaml"):
            cfgm.parse_config(tmp_path / "nope.yaml")

    def test_unknown_segment_key(self, tmp_path):
        text = ("profile:\n  segments:\n"
                "    - {start: 1.0, end: 2.0, forse: [1, 0, 0]}\n")
        with pytest.raises(ParseError, match=r"segments\[0\].forse"):
            cfgm.parse_config(write(tmp_path, text))


class TestValidation:
    def test_negative_mass_names_field(self, tmp_path):
        with pytest.raises(ValidationError, match="system.mass"):
            cfgm.parse_config(write(tmp_path, "system:\n  mass: -1.0\n"))

    def test_all_violations_listed(self, tmp_path):
        text = ("system:\n  mass: -1.0\n"
                "run:\n  duration: 0.001\n  estimators: [qukf, foo]\n")
        with pytest.raises(ValidationError) as exc:
            cfgm.parse_config(write(tmp_path, text))
        msgs = " | ".join(exc.value.violations)
        assert "system.mass" in msgs
        assert "run.duration" in msgs
        assert "run.estimators" in msgs

    def test_filter_diag_shapes(self, tmp_path):
        with pytest.raises(ValidationError, match="filter.r_diag"):
            cfgm.parse_config(write(tmp_path, "filter:\n  r_diag: [1.0, 2.0]\n"))

    def test_trailing_noise_pinned(self, tmp_path):
        text = "filter:\n  q_diag: [%s, 1.0]\n" % ", ".join(["0.1"] * 18)
        with pytest.raises(ValidationError, match="q_diag last entry"):
            cfgm.parse_config(write(tmp_path, text))


class TestAssembly:
    def test_delta_folds_into_system_params(self, tmp_path):
        cfg = cfgm.parse_config(write(tmp_path, "filter:\n  delta: 31.0\n"))
        assert cfg.filter.delta == 31.0
        assert cfg.system_params().delta == 31.0

    def test_noise_and_scaling_views(self):
        cfg = cfgm.ScenarioConfig()
        nc = cfg.noise_config()
        assert np.array_equal(nc.q_diag, cfg.filter.q_diag)
        assert cfg.scaling() == (1.0, 2.0, 0.0)
