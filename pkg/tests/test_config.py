import pytest

from safemal.harness.config import (ConfigError, ExperimentConfig, dump_config, load_config,
                                    parse_config)


def test_defaults_are_valid():
    cfg = ExperimentConfig()
    assert cfg.episodes == 500 and cfg.steps == 20 and cfg.horizon == 2
    assert cfg.epsilon == 0.05


def test_parse_sections_and_types():
    cfg = parse_config("""
[experiment]
domain = admets
policies = ours, bo random
seeds = 0..3 7
steps = 15   # M
[meta]
q_hidden = 4 4
gamma = 0.5
[policy]
slack_penalty = inf
tighten_bounds = no
""")
    assert cfg.domain == "admets"
    assert cfg.policies == ("ours", "bo", "random")
    assert cfg.seeds == (0, 1, 2, 3, 7)
    assert cfg.steps == 15 and cfg.q_hidden == (4, 4) and cfg.gamma == 0.5
    assert cfg.slack_penalty == float("inf") and cfg.tighten_bounds is False


@pytest.mark.parametrize("text", [
    "[experiment]\nseedz = 1\n",
    "[nonsense]\nx = 1\n",
    "[meta]\nseeds = 1\n",  # key in the wrong section
])
def test_unknown_keys_rejected(text):
    with pytest.raises(ConfigError, match="unknown"):
        parse_config(text)


@pytest.mark.parametrize("text", [
    "[experiment]\nseeds =\n",
    "[experiment]\nseeds = 1 1\n",
    "[experiment]\ndomain = mars\n",
    "[experiment]\npolicies = ours magic\n",
    "[experiment]\npolicies = bo\n",  # bo is admets only
    "[policy]\nepsilon = 0.7\n",
    "[policy]\nhorizon = 0\n",
    "[meta]\ngamma = 1.5\n",
    "[ensemble]\nmembers = 1\n",
    "[experiment]\nsteps = two\n",
    "[policy]\ntighten_bounds = maybe\n",
    "[domain]\ninit_blocks = 2\n",
    "[policy]\ncommit_horizon = 3\n",
    "not an ini file",
])
def test_invalid_values_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_empty_seed_list_is_a_validation_error():
    with pytest.raises(ConfigError, match="seeds"):
        ExperimentConfig(seeds=())


def test_dump_roundtrip():
    cfg = ExperimentConfig(domain="admets", policies=("bo", "ours"), seeds=(3, 5), lr=3e-4,
                           slack_penalty=float("inf"), q_hidden=(6, 5), sweep_epsilon=(0.05, 0.1))
    assert parse_config(dump_config(cfg)) == cfg


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "nope.ini")
    p = tmp_path / "c.ini"
    p.write_text("[experiment]\nseeds = 4\n")
    assert load_config(p).seeds == (4,)


@pytest.mark.parametrize("name", ["aircraft.ini", "admets.ini"])
def test_shipped_configs_are_valid(name):
    from pathlib import Path
    cfg = load_config(Path(__file__).parent.parent / "configs" / name)
    assert cfg.domain == name.split(".")[0] and len(cfg.seeds) == 20
