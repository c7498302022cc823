import argparse
import json

import pytest

from i2icodec.config import (ConfigFileError, add_override_flags, collect_overrides, dump_config,
                             field_names, load_config, parse_config)
from i2icodec.training import TrainConfig

from conftest import ROOT


def test_round_trip_through_yaml():
    cfg = parse_config("lambda_t: 0.5\nnet:\n  stages: 3\n  image_size: 32\ndata:\n  image_size: 32\n")
    assert cfg.lambda_t == 0.5 and cfg.net.stages == 3
    assert parse_config(dump_config(cfg)) == cfg


def test_empty_document_gives_defaults():
    assert parse_config("") == TrainConfig()


@pytest.mark.parametrize("text, line, field", [
    ("lambda_t: 0.1\nlambda_q: 3\n", 2, "lambda_q"),
    ("seed: 1\nlambda_a: -2\n", 2, "lambda_a"),
    ("net:\n  stages: 3\n  bogus: 1\n", 3, "net.bogus"),
    ("joint_iters: lots\n", 1, "joint_iters"),
    ("enable_a: 1\n", 1, "enable_a"),
    ("data:\n  image_size: 32\n", 2, "data.image_size"),
])
def test_errors_point_at_the_offending_line(text, line, field):
    with pytest.raises(ConfigFileError) as info:
        parse_config(text, "run.yaml")
    err = info.value
    assert (err.line, err.field) == (line, field)
    assert str(err).startswith(f"run.yaml:{line}: field '{field}'")


def test_yaml_syntax_error_has_line():
    with pytest.raises(ConfigFileError) as info:
        parse_config("seed: 1\nnet: [1, 2\n", "bad.yaml")
    assert info.value.line is not None and "syntax" in str(info.value)


def test_missing_file():
    with pytest.raises(ConfigFileError):
        load_config(ROOT / "configs" / "nope.yaml")


def test_command_line_overrides():
    parser = argparse.ArgumentParser()
    add_override_flags(parser)
    args = parser.parse_args(["--lambda-a", "30", "--net.max-width", "32", "--ds-anneal", "false"])
    overrides = collect_overrides(args)
    assert overrides == {"lambda_a": 30, "net.max_width": 32, "ds_anneal": False}
    cfg = load_config(ROOT / "configs" / "smoke.yaml", overrides)
    assert cfg.lambda_a == 30.0 and cfg.net.max_width == 32 and cfg.ds_anneal is False
    assert "optim.lr_mapping" in field_names()


def test_shipped_configs_parse():
    cfgs = {p.stem: load_config(p) for p in sorted((ROOT / "configs").glob("*.yaml"))}
    assert {"smoke", "desk_lt005_la5", "desk_lt01_la15", "desk_lt05_la30"} <= set(cfgs)
    sweep = sorted((c.lambda_t, c.lambda_a) for n, c in cfgs.items() if n.startswith("desk"))
    assert sweep == [(0.05, 5.0), (0.1, 15.0), (0.5, 30.0)]


def test_exponent_floats_without_dot():
    cfg = parse_config("lambda_t: 1e-2\nnet:\n  norm_eps: 1e-05\noptim:\n  lr: 2E-4\n")
    assert cfg.lambda_t == 0.01 and cfg.net.norm_eps == 1e-5 and cfg.optim.lr == 2e-4


def test_saved_json_config_loads(tmp_path):
    cfg = parse_config("lambda_a: 7\n")
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert load_config(path) == cfg
