import pytest

from fpqkd.config import ConfigError, RunConfig, config_hash, dumps, load_config, loads


def test_empty_gives_defaults():
    cfg = loads("")
    assert cfg == RunConfig()
    assert cfg.channel.misalignment_e_d == 0.012
    assert cfg.reshape_spec().target_scale_C == pytest.approx(0.9619604, abs=1e-7)


def test_overlapping_regions_rejected():
    with pytest.raises(ConfigError, match="delta_z"):
        loads("[regions]\ndelta_z = 0.8\n")


@pytest.mark.parametrize("text, where", [
    ("[channel]\nlosses = 3\n", "channel.losses"),
    ("[bogus]\nx = 1\n", "bogus"),
    ("[run]\nseed = abc\n", "run.seed"),
    ("[decoy]\nmoments = exact\n", "decoy.moments"),
    ("[keyrate]\nf_e = 0.5\n", "keyrate.f_e"),
])
def test_bad_values_name_the_field(text, where):
    with pytest.raises(ConfigError, match=where.replace(".", r"\.")):
        loads(text)


def test_parse_error_has_line():
    with pytest.raises(ConfigError, match="line 2"):
        loads("[run]\nthis is not a key value pair\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")


def test_roundtrip_idempotent():
    text = "[channel]\nloss_db = 7.2, 11.6, 16.7\ndark_prob = 2e-6\n[run]\nseed = 9\n[reshape]\nC = 0.95\n"
    cfg = loads(text)
    assert cfg.channel.loss_db == (7.2, 11.6, 16.7)
    assert loads(dumps(cfg)) == cfg
    assert dumps(loads(dumps(cfg))) == dumps(cfg)
    assert config_hash(cfg) == config_hash(loads(dumps(cfg)))
    assert config_hash(cfg) != config_hash(RunConfig())


def test_custom_regions():
    text = """
[region:ZH]
polar_min = 0
polar_max = 0.02
state = H
[region:ZV]
polar_min = 1.5507963267948966
polar_max = 1.5707963267948966
state = V
[region:XA]
polar_min = 0.69
polar_max = 0.89
radius_max = 0.5
windows = 0:0.1:D, 3.04:3.24:A
"""
    cfg = loads(text)
    regions = cfg.region_list()
    assert [r.label for r in regions] == ["ZH", "ZV", "XA"]
    assert regions[2].radius_max == 0.5 and len(regions[2].windows) == 2
    assert loads(dumps(cfg)).region_list() == regions


def test_region_missing_key():
    with pytest.raises(ConfigError, match="polar_max"):
        loads("[region:R]\npolar_min = 0\nstate = H\n")
