import json

import pytest

from vlroute.config import ExperimentConfig, from_dict, load_config, parse_override
from vlroute.errors import ConfigurationError


def test_defaults_validate_and_resolve_alpha():
    cfg = load_config()
    assert cfg.peft.alpha is None and cfg.alpha == 4.0
    assert cfg.to_dict()["peft"]["alpha"] == 4.0
    assert cfg.to_dict(resolved=False)["peft"]["alpha"] is None
    assert json.loads(cfg.to_json())["task"]["K"] == 4


def test_replace_keeps_alpha_tied_to_rank():
    cfg = load_config().replace(peft={"r": 8})
    assert cfg.alpha == 8.0 and cfg.peft_config().alpha == 8.0


def test_file_and_overrides(tiny_toml):
    cfg = load_config(tiny_toml, ["peft.routing=mul", "train.lr=1e-2", "peft.sites=['q']"])
    assert cfg.peft.routing == "mul" and cfg.train.lr == 0.01 and cfg.peft.sites == ["q"]
    assert cfg.model.d == 8


@pytest.mark.parametrize("text,expected", [
    ("train.steps=5", ("train", "steps", 5)),
    ("peft.routing=proj", ("peft", "routing", "proj")),
    ("peft.bias=true", ("peft", "bias", True)),
    ('output.dir="a b"', ("output", "dir", "a b")),
])
def test_parse_override(text, expected):
    assert parse_override(text) == expected


@pytest.mark.parametrize("bad", ["steps=5", "train.steps", "a.b.c=1"])
def test_malformed_overrides(bad):
    with pytest.raises(ConfigurationError):
        parse_override(bad)


@pytest.mark.parametrize("data,match", [
    ({"modle": {}}, "unknown section"),
    ({"peft": {"rank": 4}}, r"unknown key peft\.rank"),
    ({"train": {"steps": "10"}}, "integer"),
    ({"train": {"steps": True}}, "integer"),
    ({"peft": {"share_down": 1}}, "true or false"),
    ({"peft": {"routing": "projection"}}, "unknown routing kind"),
    ({"peft": {"kind": "prefix"}}, "prefix"),
    ({"task": {"name": "caption"}}, "only runs the qa"),
    ({"task": {"V_a": 3}}, "n_classes"),
    ({"task": {"d_v": 16}}, "visual width"),
    ({"task": {"K": 20}}, "vocab"),
    ({"model": {"kind": "decoder_generator"}, "task": {"name": "multitask"}}, "multitask"),
    ({"peft": {"r": 0}}, "positive"),
    ({"train": {"warmup_frac": 2.0}}, "out-of-range"),
    ({"task": {"ablation": "zeros"}}, "ablation"),
    ({"model": {"kind": "encdec_multitask"}, "task": {"name": "multitask"}, "peft": {"routing": {"qa": "mul"}}},
     "no entry"),
])
def test_rejections_name_the_problem(data, match):
    with pytest.raises(ConfigurationError, match=match):
        from_dict(data)


def test_routing_table_implies_multi_unit():
    cfg = from_dict({"model": {"kind": "encdec_multitask"}, "task": {"name": "multitask"},
                     "peft": {"routing": {"qa": "mul", "caption": "proj"}}})
    assert cfg.peft.multi_unit and cfg.peft_config().tasks == ("qa", "caption")
    assert cfg.model.visual_dim == cfg.task.d_v
    narrow = from_dict({"model": {"kind": "encdec_multitask"}, "task": {"name": "multitask", "d_v": 12}})
    assert narrow.model.d_visual == 12  # encoder-decoder models project, so d_v is adopted


def test_bad_file(tmp_path):
    with pytest.raises(ConfigurationError, match="cannot read"):
        load_config(tmp_path / "missing.toml")
    p = tmp_path / "broken.toml"
    p.write_text("[model\n")
    with pytest.raises(ConfigurationError):
        load_config(p)


def test_run_dir_resolves_under_env(tmp_path, monkeypatch):
    monkeypatch.setenv("VLROUTE_OUT", str(tmp_path))
    assert load_config().run_dir() == tmp_path / "run"
    cfg = load_config(overrides=[f'output.dir="{tmp_path / "abs"}"'])
    assert cfg.run_dir() == tmp_path / "abs"


def test_shipped_configs_load():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for path in sorted(root.glob("*.toml")):
        assert isinstance(load_config(path), ExperimentConfig)
