import json

import pytest

from distilkit.config import load_config, parse_config
from distilkit.errors import ConfigParseError, ConfigValidationError


def test_defaults_and_catalog_method():
    cfg = parse_config('{"method": "KD"}')
    assert cfg.descriptor.name == "KD"
    assert [t.name for t in cfg.teachers] == ["toy-teacher"] and cfg.student.name == "toy-student"
    assert cfg.seeds == [0] and cfg.teacher_iterations == (200, 300)


def test_inline_hooks_document():
    doc = {"hooks": {"stage": "task", "loss_terms": [{"feature": "Soft", "distance": {"kind": "KL", "temperature": 10},
                                                      "weight": 1}]},
           "optimizer": {"lr": 0.002}, "stages": {"iterations": 5}}
    cfg = parse_config(json.dumps(doc))
    assert cfg.descriptor.name == "custom"
    assert cfg.stages[0].lr == 0.002 and cfg.stages[0].iterations == 5


def test_resolved_config_reloads():
    cfg = parse_config('{"method": "TinyBERT", "seeds": [1, 2], "models": {"student": '
                       '{"dim": 16, "layers": 2, "heads": 2, "vocab": 256, "max_seq": 64}}}')
    again = parse_config(json.dumps(cfg.to_dict()))
    assert again.descriptor == cfg.descriptor and again.student == cfg.student and again.seeds == [1, 2]


def test_unknown_key_reports_line():
    text = '{\n  "method": "KD",\n  "sedes": [0]\n}'
    with pytest.raises(ConfigValidationError, match=r"sedes.*line 3"):
        parse_config(text)


def test_malformed_json_has_location():
    with pytest.raises(ConfigParseError) as exc:
        parse_config('{\n  "method": "KD",\n}')
    assert exc.value.line == 3


@pytest.mark.parametrize("doc", [
    '{"method": "NoSuchKD"}',
    '{"method": "KD", "seeds": []}',
    '{"method": "KD", "init": "magic"}',
    '{"method": "KD", "stages": {"lr": -1}}',
    '{"method": "KD", "stages": {"colour": 1}}',
    '{"method": "KD", "models": {"student": "nope"}}',
    '{"method": "KD", "teacher_iterations": [1]}',
    '{"hooks": {"loss_terms": [{"feature": "Soft", "weight": -1}]}}',
])
def test_validation_errors(doc):
    with pytest.raises(ConfigValidationError):
        parse_config(doc)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigParseError, match="not found"):
        load_config(tmp_path / "absent.json")


def test_output_env_override(tmp_path, monkeypatch):
    path = tmp_path / "c.json"
    path.write_text('{"method": "KD", "output": "runs/x"}')
    monkeypatch.delenv("GKD_OUT", raising=False)
    assert str(load_config(path).output) == "runs/x"
    monkeypatch.setenv("GKD_OUT", str(tmp_path / "elsewhere"))
    assert load_config(path).output == tmp_path / "elsewhere"
