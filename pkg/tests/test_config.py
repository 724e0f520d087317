import json
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dimkrum.config import AGGREGATORS, ConfigError, ExperimentConfig, from_dict, load_config, parse_text

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_defaults_are_valid():
    cfg = ExperimentConfig()
    assert cfg.aggregator.name == "dimkrum" and cfg.aggregator.rho == 1e-3
    assert cfg.malicious() == (0,)


def test_text_round_trip():
    cfg = ExperimentConfig().with_values({"fed.malicious_indices": [2, 5], "fed.num_malicious": 2, "aggregator.lambda": 2.0})
    assert parse_text(cfg.to_text()) == cfg


@given(
    st.sampled_from(AGGREGATORS),
    st.floats(1e-5, 1.0),
    st.floats(0.0, 0.99),
    st.integers(1, 40),
    st.sampled_from(["iid", "dirichlet"]),
    st.sampled_from(["none", "freeze", "awp"]),
)
def test_round_trip_property(name, rho, alpha, rounds, part, mode):
    cfg = ExperimentConfig().with_values(
        {
            "aggregator.name": name,
            "aggregator.rho": rho,
            "aggregator.alpha": alpha,
            "fed.rounds": rounds,
            "fed.partition": part,
            "adaptive.mode": mode,
        }
    )
    assert parse_text(cfg.to_text()) == cfg
    assert from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_comments_blank_lines_and_bare_words():
    cfg = parse_text("# a comment\n\naggregator.name = multikrum\nfed.partition = dirichlet\n")
    assert cfg.aggregator.name == "multikrum" and cfg.fed.partition == "dirichlet"


def test_lambda_alias():
    assert parse_text("aggregator.lambda = 2").aggregator.lam == 2.0
    assert parse_text("aggregator.lam = 3").aggregator.lam == 3.0


@pytest.mark.parametrize(
    "text, line, fragment",
    [
        ("fed.rounds = 3\naggregator.name = krumm\n", None, "krumm"),
        ("fed.rounds = 3\nfed.roundz = 4\n", 2, "fed.roundz"),
        ("\n\nnonsense\n", 3, "expected"),
        ("bogus.key = 1\n", 1, "bogus"),
        ("fed.rounds = 2.5\n", 1, "fed.rounds"),
        ("fed.rounds = 3\nfed.rounds = 4\n", 2, "duplicate"),
        ("run.dump_updates = maybe\n", 1, "run.dump_updates"),
        ("attack.poison_rate = 0\n", 1, "poison_rate"),
    ],
)
def test_errors_name_the_line_and_key(text, line, fragment):
    with pytest.raises(ConfigError) as exc:
        parse_text(text)
    msg = str(exc.value)
    assert fragment in msg
    if line is not None:
        assert msg.startswith(f"line {line}:")


@pytest.mark.parametrize(
    "changes",
    [
        {"fed.num_malicious": 5},
        {"fed.n_clients": 1},
        {"aggregator.rho": 0.0},
        {"aggregator.alpha": 1.0},
        {"fed.malicious_indices": [0, 0], "fed.num_malicious": 2},
        {"fed.malicious_indices": [12]},
        {"attack.target_label": 2},
        {"attack.kind": "badsent", "task.num_triggers": 3},
        {"fed.optimizer": "rmsprop"},
    ],
)
def test_invalid_combinations(changes):
    with pytest.raises(ConfigError):
        ExperimentConfig().with_values(changes)


def test_with_values_validates_once():
    # switching mode and its required strength together is legal
    cfg = ExperimentConfig().with_values({"adaptive.mode": "wp_clean", "adaptive.lambda_wp": 1.0})
    assert cfg.adaptive.mode == "wp_clean"
    with pytest.raises(ConfigError):
        ExperimentConfig().with_value("adaptive.mode", "wp_clean")


def test_with_value_coerces():
    cfg = ExperimentConfig()
    assert cfg.with_value("fed.rounds", 3.0).fed.rounds == 3
    assert cfg.with_value("fed.malicious_indices", 4).fed.malicious_indices == (4,)
    assert cfg.with_value("run.dump_updates", "true").run.dump_updates is True
    with pytest.raises(ConfigError):
        cfg.with_value("fed.nope", 1)


def test_json_input(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"aggregator": {"name": "fedavg"}, "fed": {"rounds": 2}}))
    cfg = load_config(p)
    assert cfg.aggregator.name == "fedavg" and cfg.fed.rounds == 2
    p.write_text("{ not json")
    with pytest.raises(ConfigError, match="line 1"):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.txt")


def test_shipped_configs_load():
    for path in CONFIGS.glob("*.txt"):
        cfg = load_config(path)
        assert parse_text(cfg.to_text()) == cfg
