"""Run configuration files.

A config is a JSON object.  The method is either a catalog name, an
inline descriptor document, or a single hook document under ``hooks``.
Everything else has a documented default::

    {
      "method": "KD",
      "models": {"teachers": ["toy-teacher"], "assistants": [], "student": "toy-student"},
      "stages": {"iterations": 200, "batch_size": 16},
      "seeds": [0, 1, 2],
      "data": {"seed": 0, "size": 2000, "seq_len": 16, "num_labels": 2},
      "output": "runs/kd"
    }

``stages`` is one stage-config object (reused for every descriptor stage)
or a list aligned with the descriptor stages.  An ``optimizer`` block
(``lr``, ``betas``, ``eps``, ``weight_decay``, ``warmup``, ``clip``) sets
values shared by all stages.  Model entries are preset names or objects
with ``dim``, ``layers``, ``heads``, ``vocab`` and ``max_seq``.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import CatalogError, ConfigParseError, ConfigValidationError, DistilError, InputError
from .hooks import StageHooks, load_json
from .methods import Orchestration, MethodDescriptor, get_descriptor, validate
from .model import INIT_STRATEGIES, ModelSpec, get_spec
from .orchestrator import DEFAULTS, StageConfig

TOP_KEYS = {"method", "hooks", "models", "stages", "optimizer", "seeds", "data", "init", "init_source",
            "output", "teacher_iterations", "planner"}
OPTIMIZER_KEYS = {"lr", "betas", "eps", "weight_decay", "warmup", "clip"}
DATA_KEYS = {"seed", "size", "seq_len", "num_labels", "text_file"}
PLANNER_KEYS = {"mp", "dp", "zero", "offload", "grads", "budget_gib"}
_STAGE_FIELDS = {f.name for f in fields(StageConfig)}


@dataclass
class DataConfig:
    seed: int = 0
    size: int = 2000
    seq_len: int = 16
    num_labels: int = 2
    text_file: str | None = None


@dataclass
class RunConfig:
    descriptor: MethodDescriptor
    teachers: list
    student: ModelSpec
    assistants: list = field(default_factory=list)
    stages: list = field(default_factory=lambda: [StageConfig()])
    seeds: list = field(default_factory=lambda: [0])
    data: DataConfig = field(default_factory=DataConfig)
    output: Path = Path("runs")
    init_source: str | None = None
    teacher_iterations: tuple = (200, 300)
    planner: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.descriptor.to_dict(),
            "models": {"teachers": [t.to_dict() for t in self.teachers],
                       "assistants": [a.to_dict() for a in self.assistants],
                       "student": self.student.to_dict()},
            "stages": [s.to_dict() for s in self.stages],
            "seeds": list(self.seeds),
            "data": vars(self.data).copy(),
            "output": str(self.output),
            "teacher_iterations": list(self.teacher_iterations),
            "planner": dict(self.planner),
        }


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _fail(text: str, key: str, message: str, where: str | None = None):
    line = _line_of(text, key)
    suffix = f" (line {line})" if line is not None else ""
    raise ConfigValidationError(where or key, message + suffix)


def _spec(entry, where: str) -> ModelSpec:
    if isinstance(entry, str):
        return get_spec(entry)
    if isinstance(entry, dict):
        try:
            return ModelSpec(**entry)
        except (TypeError, ValueError) as exc:
            raise ConfigValidationError(where, str(exc)) from None
    raise ConfigValidationError(where, "expected a preset name or a spec object")


def _descriptor(doc: dict) -> MethodDescriptor:
    if "method" in doc and "hooks" in doc:
        raise ConfigValidationError("method", "give either 'method' or 'hooks', not both")
    if "hooks" in doc:
        stage = StageHooks.from_dict(doc["hooks"], "hooks")
        return MethodDescriptor("custom", Orchestration(), (stage,))
    method = doc.get("method")
    if method is None:
        raise ConfigValidationError("method", "missing (name a catalog method or give a descriptor)")
    if isinstance(method, str):
        return get_descriptor(method)
    if isinstance(method, dict):
        return MethodDescriptor.from_dict(method)
    raise ConfigValidationError("method", "expected a name or a descriptor object")


def _stage_configs(doc: dict) -> list[StageConfig]:
    opt = doc.get("optimizer", {})
    if not isinstance(opt, dict):
        raise ConfigValidationError("optimizer", "expected an object")
    unknown = sorted(set(opt) - OPTIMIZER_KEYS)
    if unknown:
        raise ConfigValidationError("optimizer", f"unknown key(s) {', '.join(map(repr, unknown))}")
    raw = doc.get("stages", {})
    items = raw if isinstance(raw, list) else [raw]
    out = []
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            raise ConfigValidationError(f"stages[{i}]", "expected an object")
        unknown = sorted(set(item) - _STAGE_FIELDS)
        if unknown:
            raise ConfigValidationError(f"stages[{i}]", f"unknown key(s) {', '.join(map(repr, unknown))}")
        kw = {**opt, **item}
        if "betas" in kw:
            kw["betas"] = tuple(kw["betas"])
        out.append(StageConfig(**kw))
    return out or [StageConfig(**opt)]


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    """Validate a config document held in ``text``."""
    doc = load_json(text)
    if not isinstance(doc, dict):
        raise ConfigParseError("config must be a JSON object", 1, 1)
    unknown = sorted(set(doc) - TOP_KEYS)
    if unknown:
        _fail(text, unknown[0], f"unknown key(s) {', '.join(map(repr, unknown))}; allowed: "
              + ", ".join(sorted(TOP_KEYS)), "config")
    try:
        desc = _descriptor(doc)
    except (ConfigValidationError, CatalogError) as exc:
        _fail(text, "method" if "method" in doc else "hooks", str(exc), "method")

    models = doc.get("models", {})
    try:
        if not isinstance(models, dict):
            raise ConfigValidationError("models", "expected an object")
        bad = sorted(set(models) - {"teachers", "assistants", "student"})
        if bad:
            raise ConfigValidationError("models", f"unknown key(s) {', '.join(map(repr, bad))}")
        teachers = [_spec(t, f"models.teachers[{i}]") for i, t in enumerate(models.get("teachers", ["toy-teacher"]))]
        assistants = [_spec(a, f"models.assistants[{i}]") for i, a in enumerate(models.get("assistants", []))]
        student = _spec(models.get("student", "toy-student"), "models.student")
    except (ConfigValidationError, InputError) as exc:
        _fail(text, "models", str(exc), "models")
    if not teachers:
        _fail(text, "models", "at least one teacher is required", "models.teachers")

    try:
        stages = _stage_configs(doc)
    except ConfigValidationError as exc:
        _fail(text, "stages" if "stages" in doc else "optimizer", str(exc), exc.field)
    except TypeError as exc:
        _fail(text, "stages", str(exc), "stages")

    seeds = doc.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        _fail(text, "seeds", "must be a non-empty list of non-negative integers", "seeds")

    data_doc = doc.get("data", {})
    if not isinstance(data_doc, dict) or set(data_doc) - DATA_KEYS:
        _fail(text, "data", f"expected an object with keys from {sorted(DATA_KEYS)}", "data")
    data = DataConfig(**data_doc)
    if data.text_file is not None and base_dir is not None and not Path(data.text_file).is_absolute():
        data.text_file = str(base_dir / data.text_file)

    init = doc.get("init")
    if init is not None:
        if init not in INIT_STRATEGIES:
            _fail(text, "init", f"unknown init strategy {init!r}; known: {', '.join(INIT_STRATEGIES)}", "init")
        desc = MethodDescriptor(desc.name, desc.orchestration, desc.stages, init)

    planner = doc.get("planner", {})
    if not isinstance(planner, dict) or set(planner) - PLANNER_KEYS:
        _fail(text, "planner", f"expected an object with keys from {sorted(PLANNER_KEYS)}", "planner")

    problems = validate(desc, student.layers, min(t.layers for t in teachers))
    if problems:
        _fail(text, "method" if "method" in doc else "hooks", "; ".join(problems), "method")

    ti = doc.get("teacher_iterations", [200, 300])
    if not (isinstance(ti, list) and len(ti) == 2 and all(isinstance(v, int) and v >= 0 for v in ti)):
        _fail(text, "teacher_iterations", "expected [pretraining_iterations, task_iterations]", "teacher_iterations")

    output = Path(os.environ.get("GKD_OUT") or doc.get("output", "runs"))
    return RunConfig(desc, teachers, student, assistants, stages, list(seeds), data, output,
                     doc.get("init_source"), tuple(ti), planner)


def load_config(path: str | Path) -> RunConfig:
    """Read and validate a config file.

    Raises:
        ConfigParseError: unreadable file or malformed JSON (with line and column).
        ConfigValidationError: a field fails validation (with its line when known).
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigParseError(f"config file not found: {path}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigParseError(f"cannot read {path}: {exc}") from None
    try:
        return parse_config(text, path.parent)
    except DistilError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigValidationError("config", str(exc)) from None


__all__ = ["DEFAULTS", "DataConfig", "RunConfig", "load_config", "parse_config"]
