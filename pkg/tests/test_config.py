from __future__ import annotations

import pytest

from lcdg.config import SCHEMA, Config, ConfigError, float_list, int_list, load_config, parse_text


def test_defaults_match_schema():
    cfg = Config()
    for k, (_, default) in SCHEMA.items():
        assert cfg[k] == default


def test_paper_defaults():
    cfg = Config()
    assert cfg["guidance.omega"] == 6.0 and cfg["guidance.ddim_steps"] == 50 and cfg["guidance.ddim_eta"] == 0.0
    assert cfg["schedule.T"] == 1000 and cfg["resample.n"] == 2.0


def test_file_then_flags(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nguidance.beta = 4  # trailing\nguidance.ssc = yes\n")
    cfg = load_config(p, {"guidance.beta": "8"})
    assert cfg["guidance.beta"] == 8.0 and cfg["guidance.ssc"] is True
    assert cfg.sources["guidance.beta"] == "flag" and cfg.sources["guidance.ssc"] == "file"


@pytest.mark.parametrize("text", ["nope = 1", "guidance.beta 2", "guidance.beta = x", "guidance.ssc = maybe"])
def test_bad_config_text(text, tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p)


def test_text_round_trip():
    cfg = Config({"guidance.beta": 3.5, "adapter.kind": "mask"})
    again = Config(parse_text(cfg.to_text()))
    assert again.to_dict() == cfg.to_dict()


def test_lists():
    assert int_list("1, 2,4") == (1, 2, 4)
    assert float_list("0.5,1") == (0.5, 1.0)
    with pytest.raises(ConfigError):
        int_list("a,b")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.cfg")
