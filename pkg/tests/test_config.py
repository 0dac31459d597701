import pytest

from fineformer.config import ConfigError, load_run_config, parse_overrides


def write(tmp_path, text):
    path = tmp_path / "run.ini"
    path.write_text(text)
    return path


def test_defaults_and_shared_extents():
    run = load_run_config()
    assert run.arch == "vision"
    assert run.model.tokens == run.data.tokens == 8
    assert run.model.vocab_size == run.data.num_attributes


def test_file_and_overrides(tmp_path):
    path = write(tmp_path, "[model]\narch = cross\nhidden = 16\nheads = 2\n[data]\nnum_attributes = 6\n"
                           "[train]\noptimizer = adamw\nmilestones = 5,8\nepochs = 10\n")
    run = load_run_config(path, ["train.lr=0.002", "model.seed=3"])
    assert (run.arch, run.model.hidden, run.model_seed) == ("cross", 16, 3)
    assert run.model.vocab_size == 6
    assert run.train.lr == 0.002 and run.train.milestones == (5, 8)


def test_resolved_ini_round_trips(tmp_path):
    run = load_run_config(None, ["model.arch=cross", "train.epochs=7", "paths.dataset=x.ffds"])
    again = load_run_config(write(tmp_path, run.to_ini()))
    assert again == run


@pytest.mark.parametrize("text,match", [
    ("[model]\nwidth = 3\n", "unknown key model.width"),
    ("[optim]\nlr = 1\n", "unknown section"),
    ("[train]\nlr = fast\n", "cannot parse"),
    ("[model]\narch = resnet\n", "model.arch"),
    ("[model]\ntokens = 4\n", "disagrees"),
    ("[model]\nhidden = 30\n", "divisible"),
    ("[paths]\nlogs = x\n", "paths.logs"),
])
def test_config_errors(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        load_run_config(write(tmp_path, text))


def test_override_syntax():
    assert parse_overrides(["train.lr=1e-3"]) == {"train": {"lr": "1e-3"}}
    with pytest.raises(ConfigError):
        parse_overrides(["lr=1e-3"])


def test_shipped_configs_parse():
    from pathlib import Path
    configs = sorted((Path(__file__).parent.parent / "configs").glob("*.ini"))
    assert len(configs) >= 6
    for path in configs:
        load_run_config(path)
