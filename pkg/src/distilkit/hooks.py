"""Extraction/operation hooks and the auxiliary loss model.

A stage of a distillation method is described by a :class:`StageHooks`
document: operation hooks that alter the forward plan, loss terms that pair
student and teacher features, and named schedules.  The auxiliary model
holds the trainable projections and computes the composed loss.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import (CompositionError, ConfigParseError, ConfigValidationError,
                     DimensionError, NonFiniteError, PlanError)
from .model import (FEATURE_KINDS, LAYERED_KINDS, TapBundle, TransformerModel,
                    forward_with_taps)
from .rng import Rng

DISTANCE_KINDS = ("MSE", "KL", "CE", "Cos", "Huber", "Contrastive")
RELATIONS = ("none", "attention_relation", "value_relation", "qk_relation",
             "token_distance", "token_angle")
TRANSFORMS = ("none", "pairwise_scaled_dot", "first_token_normalized", "mean_normalized", "span_pool",
              "sample_pool")
COMBINERS = ("pair", "alp", "universal", "random_subset")
VIEWS = ("base", "interchange")
SCHEDULE_KINDS = ("constant", "linear", "phase", "anneal_phi")
OPERATION_KINDS = ("replace_block", "interchange", "layer_drop", "freeze")
STAGE_KINDS = ("pretraining", "task")

# features whose last axis is the hidden dimension
HIDDEN_KINDS = frozenset({"Emb", "Q", "K", "V", "HS"})


# -- schedules ------------------------------------------------------------------------------
@dataclass(frozen=True)
class IterState:
    """Where training is: counters plus totals used for relative schedules."""

    iteration: int = 0
    epoch: int = 0
    total_iterations: int = 1
    total_epochs: int = 1

    def position(self, domain: str) -> tuple[float, float]:
        if domain == "epoch":
            return float(self.epoch), float(max(self.total_epochs, 1))
        return float(self.iteration), float(max(self.total_iterations, 1))


@dataclass(frozen=True)
class Schedule:
    kind: str = "constant"
    value: float = 1.0
    start: float = 0.0
    end: float = 1.0
    horizon: float | None = None
    boundaries: tuple = ()
    values: tuple = ()
    t_max: float = 1.0
    fractional: bool = False
    domain: str = "iteration"

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigValidationError("schedule.kind", f"unknown kind {self.kind!r}")
        if self.domain not in ("iteration", "epoch"):
            raise ConfigValidationError("schedule.domain", f"unknown domain {self.domain!r}")
        if self.horizon is not None and not self.horizon > 0:
            raise ConfigValidationError("schedule.horizon", "must be positive")
        if self.kind == "phase":
            b = list(self.boundaries)
            if any(y <= x for x, y in zip(b, b[1:])):
                raise ConfigValidationError("schedule.boundaries", "must be strictly increasing")
            if len(self.values) != len(b) + 1:
                raise ConfigValidationError("schedule.values", "needs one more value than boundaries")
        if self.kind == "anneal_phi" and not self.t_max >= 1:
            raise ConfigValidationError("schedule.t_max", "must be >= 1")

    def __call__(self, state: IterState) -> float:
        t, total = state.position(self.domain)
        horizon = self.horizon if self.horizon is not None else total
        if self.kind == "constant":
            return float(self.value)
        frac = min(1.0, t / horizon) if horizon > 0 else 1.0
        if self.kind == "linear":
            return self.start + (self.end - self.start) * frac
        if self.kind == "anneal_phi":
            lo = 1.0 / self.t_max
            return lo + (1.0 - lo) * frac
        pos = t / total if self.fractional else t
        k = sum(1 for b in self.boundaries if pos >= b)
        return float(self.values[k])

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind, "domain": self.domain}
        if self.kind == "constant":
            d["value"] = self.value
        elif self.kind == "linear":
            d.update(start=self.start, end=self.end, horizon=self.horizon)
        elif self.kind == "phase":
            d.update(boundaries=list(self.boundaries), values=list(self.values), fractional=self.fractional)
        else:
            d.update(t_max=self.t_max, horizon=self.horizon)
        return d

    @classmethod
    def from_dict(cls, d: dict, where: str = "schedule") -> "Schedule":
        allowed = {"kind", "domain", "value", "start", "end", "horizon", "boundaries", "values",
                   "t_max", "fractional"}
        _reject_unknown(d, allowed, where)
        kw = dict(d)
        for key in ("boundaries", "values"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def constant(value: float) -> Schedule:
    return Schedule("constant", value=value)


# -- layer selectors -----------------------------------------------------------------------------
def parse_selector(sel: str) -> tuple[str, int | None]:
    if sel in ("last", "all", "uniform_map"):
        return sel, None
    if isinstance(sel, str) and ":" in sel:
        kind, _, num = sel.partition(":")
        if kind in ("index", "last_k") and num.lstrip("-").isdigit():
            return kind, int(num)
    raise ConfigValidationError("layers", f"invalid layer selector {sel!r}")


def selector_violation(sel: str, L: int) -> str | None:
    kind, n = parse_selector(sel)
    if kind == "index" and not 1 <= n <= L:
        return f"selector index({n}) outside [1..{L}]"
    if kind == "last_k" and not 1 <= n <= L:
        return f"selector last_k({n}) outside [1..{L}]"
    return None


def resolve_layers(sel: str, L: int) -> list[int]:
    kind, n = parse_selector(sel)
    bad = selector_violation(sel, L)
    if bad:
        raise DimensionError(bad)
    if kind == "last":
        return [L]
    if kind in ("all", "uniform_map"):
        return list(range(1, L + 1))
    if kind == "index":
        return [n]
    return list(range(L - n + 1, L + 1))


def uniform_map(i: int, Ls: int, Lt: int) -> int:
    """Student layer ``i`` (1-based) to teacher layer ``ceil(i*Lt/Ls)``."""
    return -(-i * Lt // Ls)


def pair_layers(student_sel: str, teacher_sel: str, Ls: int, Lt: int) -> list[tuple[int, int]]:
    s_layers = resolve_layers(student_sel, Ls)
    if parse_selector(teacher_sel)[0] == "uniform_map":
        return [(i, uniform_map(i, Ls, Lt)) for i in s_layers]
    t_layers = resolve_layers(teacher_sel, Lt)
    if len(t_layers) != len(s_layers):
        raise DimensionError(f"layer selectors {student_sel!r}/{teacher_sel!r} select different counts")
    return list(zip(s_layers, t_layers))


# -- declarative records ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ExtractionHook:
    target: str          # "teacher" | "student" | "assistant"
    index: int = 0
    feature: str = "HS"
    layer_selector: str = "last"
    transform: str = "none"


@dataclass(frozen=True)
class DistanceSpec:
    kind: str = "MSE"
    temperature: float = 1.0
    delta: float = 1.0
    relation: str = "none"
    heads: int | None = None

    def __post_init__(self):
        if self.kind not in DISTANCE_KINDS:
            raise ConfigValidationError("distance.kind", f"unknown distance {self.kind!r}")
        if self.relation not in RELATIONS:
            raise ConfigValidationError("distance.relation", f"unknown relation {self.relation!r}")
        if not self.temperature > 0:
            raise ConfigValidationError("distance.temperature", "must be positive")
        if not self.delta > 0:
            raise ConfigValidationError("distance.delta", "must be positive")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.temperature != 1.0:
            d["temperature"] = self.temperature
        if self.kind == "Huber" or self.delta != 1.0:
            d["delta"] = self.delta
        if self.relation != "none":
            d["relation"] = self.relation
        if self.heads is not None:
            d["heads"] = self.heads
        return d

    @classmethod
    def from_dict(cls, d: dict, where: str = "distance") -> "DistanceSpec":
        _reject_unknown(d, {"kind", "temperature", "delta", "relation", "heads"}, where)
        return cls(**d)


@dataclass(frozen=True)
class LossTerm:
    feature: str
    distance: DistanceSpec = DistanceSpec()
    student_layers: str = "last"
    teacher_layers: str = "last"
    teacher: Any = 0                 # teacher index, "ensemble" or "gold"
    transform: str = "none"
    weight: Any = 1.0                # float or schedule name
    projection: bool = False
    combiner: str = "pair"
    teacher_scale: str | None = None  # schedule name scaling teacher logits
    view: str = "base"

    def __post_init__(self):
        if self.feature not in FEATURE_KINDS:
            raise ConfigValidationError("loss_terms.feature", f"unknown feature {self.feature!r}")
        if self.transform not in TRANSFORMS:
            raise ConfigValidationError("loss_terms.transform", f"unknown transform {self.transform!r}")
        if self.combiner not in COMBINERS:
            raise ConfigValidationError("loss_terms.combiner", f"unknown combiner {self.combiner!r}")
        if self.view not in VIEWS:
            raise ConfigValidationError("loss_terms.view", f"unknown view {self.view!r}")
        parse_selector(self.student_layers)
        parse_selector(self.teacher_layers)
        if isinstance(self.weight, (int, float)) and not isinstance(self.weight, bool):
            if not (math.isfinite(self.weight) and self.weight >= 0):
                raise ConfigValidationError("loss_terms.weight", f"must be finite and >= 0, got {self.weight}")
        elif not isinstance(self.weight, str):
            raise ConfigValidationError("loss_terms.weight", "must be a number or a schedule name")
        if not (self.teacher in ("ensemble", "gold") or (isinstance(self.teacher, int) and self.teacher >= 0)):
            raise ConfigValidationError("loss_terms.teacher", f"invalid teacher reference {self.teacher!r}")

    @property
    def key(self) -> tuple:
        """Deduplication key used when combining methods."""
        return (self.feature, self.student_layers, self.distance.relation, self.transform, self.view)

    @property
    def signature(self) -> tuple:
        return self.key + (self.distance.kind,)

    @property
    def label(self) -> str:
        rel = "" if self.distance.relation == "none" else f"/{self.distance.relation}"
        tr = "" if self.transform == "none" else f"/{self.transform}"
        view = "" if self.view == "base" else f"@{self.view}"
        return f"{self.feature}[{self.student_layers}]{rel}{tr}:{self.distance.kind}{view}"

    def student_hook(self) -> ExtractionHook:
        return ExtractionHook("student", 0, self.feature, self.student_layers, self.transform)

    def teacher_hook(self) -> ExtractionHook | None:
        if self.teacher == "gold":
            return None
        idx = 0 if self.teacher == "ensemble" else self.teacher
        return ExtractionHook("teacher", idx, self.feature, self.teacher_layers, self.transform)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"feature": self.feature, "distance": self.distance.to_dict()}
        if self.feature in LAYERED_KINDS:
            d["student_layers"] = self.student_layers
            d["teacher_layers"] = self.teacher_layers
        defaults = LossTerm(self.feature)
        for name in ("teacher", "transform", "weight", "projection", "combiner", "teacher_scale", "view"):
            value = getattr(self, name)
            if value != getattr(defaults, name) or name == "weight":
                d[name] = value
        return d

    @classmethod
    def from_dict(cls, d: dict, where: str = "loss_terms") -> "LossTerm":
        allowed = {"feature", "distance", "student_layers", "teacher_layers", "layers", "teacher",
                   "transform", "weight", "projection", "combiner", "teacher_scale", "view"}
        _reject_unknown(d, allowed, where)
        kw = dict(d)
        if "feature" not in kw:
            raise ConfigValidationError(f"{where}.feature", "missing")
        if "layers" in kw:
            sel = kw.pop("layers")
            kw.setdefault("student_layers", sel)
            kw.setdefault("teacher_layers", sel)
        if kw["feature"] == "Hard":
            kw.setdefault("teacher", "gold")
            kw.setdefault("distance", {"kind": "CE"})
        kw["distance"] = DistanceSpec.from_dict(kw.get("distance", {"kind": "MSE"}), f"{where}.distance")
        return cls(**kw)


@dataclass(frozen=True)
class OperationHook:
    kind: str
    prob: Any = 0.0                  # replace_block: number or schedule name
    layers: tuple = ()               # interchange: candidate student layers (empty = all)
    alignment: str = "uniform_map"
    fraction: float = 0.5            # interchange: share of token positions swapped
    active: Any = None               # layer_drop: number or schedule name
    params: tuple = ()               # freeze: parameter name prefixes
    when: Any = 1.0                  # freeze: on while value >= 0.5 (number or schedule name)

    def __post_init__(self):
        if self.kind not in OPERATION_KINDS:
            raise ConfigValidationError("operation_hooks.kind", f"unknown operation hook {self.kind!r}")
        if isinstance(self.prob, (int, float)) and not 0 <= self.prob <= 1:
            raise ConfigValidationError("operation_hooks.prob", "must lie in [0, 1]")
        if not 0 < self.fraction <= 1:
            raise ConfigValidationError("operation_hooks.fraction", "must lie in (0, 1]")
        if self.kind == "layer_drop" and self.active is None:
            raise ConfigValidationError("operation_hooks.active", "layer_drop needs an active-layer schedule")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind}
        if self.kind == "replace_block":
            d["prob"] = self.prob
        elif self.kind == "interchange":
            d.update(layers=list(self.layers), alignment=self.alignment, fraction=self.fraction)
        elif self.kind == "layer_drop":
            d["active"] = self.active
        else:
            d.update(params=list(self.params), when=self.when)
        return d

    @classmethod
    def from_dict(cls, d: dict, where: str = "operation_hooks") -> "OperationHook":
        _reject_unknown(d, {"kind", "prob", "layers", "alignment", "fraction", "active", "params", "when"}, where)
        kw = dict(d)
        for key in ("layers", "params"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass(frozen=True)
class StageHooks:
    """Hooks, terms and schedules for one training stage."""

    stage: str = "task"
    operation_hooks: tuple = ()
    loss_terms: tuple = ()
    schedules: tuple = ()            # ((name, Schedule), ...)

    def __post_init__(self):
        if self.stage not in STAGE_KINDS:
            raise ConfigValidationError("stage", f"unknown stage {self.stage!r}")

    @property
    def schedule_map(self) -> dict[str, Schedule]:
        return dict(self.schedules)

    def value(self, ref, state: IterState) -> float:
        """Resolve a number-or-schedule-name reference."""
        if ref is None:
            return None
        if isinstance(ref, str):
            try:
                return self.schedule_map[ref](state)
            except KeyError:
                raise ConfigValidationError("schedules", f"undefined schedule {ref!r}") from None
        return float(ref)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "operation_hooks": [h.to_dict() for h in self.operation_hooks],
            "loss_terms": [t.to_dict() for t in self.loss_terms],
            "schedules": {name: s.to_dict() for name, s in self.schedules},
        }

    @classmethod
    def from_dict(cls, d: dict, where: str = "") -> "StageHooks":
        pre = f"{where}." if where else ""
        _reject_unknown(d, {"stage", "operation_hooks", "loss_terms", "schedules"}, where or "document")
        hooks = tuple(OperationHook.from_dict(h, f"{pre}operation_hooks[{i}]")
                      for i, h in enumerate(d.get("operation_hooks", [])))
        terms = tuple(LossTerm.from_dict(t, f"{pre}loss_terms[{i}]") for i, t in enumerate(d.get("loss_terms", [])))
        schedules = tuple((name, Schedule.from_dict(s, f"{pre}schedules.{name}"))
                          for name, s in d.get("schedules", {}).items())
        out = cls(stage=d.get("stage", "task"), operation_hooks=hooks, loss_terms=terms, schedules=schedules)
        names = {n for n, _ in schedules}
        for i, t in enumerate(terms):
            for ref in (t.weight, t.teacher_scale):
                if isinstance(ref, str) and ref not in names:
                    raise ConfigValidationError(f"{pre}loss_terms[{i}]", f"undefined schedule {ref!r}")
        for i, h in enumerate(hooks):
            for ref in (h.prob, h.active, h.when):
                if isinstance(ref, str) and ref not in names:
                    raise ConfigValidationError(f"{pre}operation_hooks[{i}]", f"undefined schedule {ref!r}")
        return out


def _reject_unknown(d: dict, allowed: set, where: str):
    if not isinstance(d, dict):
        raise ConfigValidationError(where, f"expected an object, got {type(d).__name__}")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigValidationError(where, f"unknown key(s) {', '.join(map(repr, unknown))}")


def load_json(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(exc.msg, exc.lineno, exc.colno) from None


def parse_hook_config(text: str) -> StageHooks:
    """Parse a hook document (JSON text) into validated stage hooks."""
    return StageHooks.from_dict(load_json(text))


# -- distances ----------------------------------------------------------------------------------
def _log_probs(x: Tensor, T: float, is_prob: bool) -> Tensor:
    if is_prob:
        return ag.log(ag.maximum(x, 1e-12))
    return ag.log_softmax(x, axis=-1, temperature=T)


def _probs(x: Tensor, T: float, is_prob: bool) -> Tensor:
    return x if is_prob else ag.softmax(x, axis=-1, temperature=T)


def _rows(x: Tensor) -> int:
    return int(np.prod(x.shape[:-1])) if x.ndim > 1 else 1


def compute_distance(a: Tensor, b: Tensor, spec: DistanceSpec, *, a_probs: bool = False,
                     b_probs: bool = False) -> Tensor:
    """Distance between a target feature ``a`` and a prediction ``b``.

    KL is ``KL(softmax(a/T) || softmax(b/T))`` and CE is
    ``-sum softmax(a/T) * log softmax(b/T)``, both averaged over rows and
    multiplied by ``T**2``.  ``*_probs`` mark inputs that are already
    distributions.
    """
    a, b = ag.as_tensor(a), ag.as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"distance {spec.kind}: shapes {a.shape} and {b.shape} differ")
    kind, T = spec.kind, spec.temperature
    if kind == "MSE":
        d = a - b
        return ag.mean(d * d)
    if kind == "Huber":
        r = ag.absolute(a - b)
        q = ag.minimum(r, spec.delta)
        return ag.mean(0.5 * q * q + spec.delta * (r - q))
    if kind == "Cos":
        num = ag.tsum(a * b, axis=-1)
        den = ag.sqrt(ag.tsum(a * a, axis=-1) * ag.tsum(b * b, axis=-1) + 1e-24)
        return ag.mean(1.0 - num / den)
    if kind == "Contrastive":
        return _contrastive(a, b, T)
    scale = T * T if T != 1.0 else 1.0
    pa = _probs(a, T, a_probs)
    log_pb = _log_probs(b, T, b_probs)
    if kind == "KL":
        log_pa = _log_probs(a, T, a_probs)
        val = ag.tsum(pa * (log_pa - log_pb)) / _rows(a)
    else:  # CE
        val = -ag.tsum(pa * log_pb) / _rows(a)
    return val * scale if scale != 1.0 else val


def _contrastive(target: Tensor, pred: Tensor, T: float) -> Tensor:
    """In-batch contrastive loss on cosine similarity: row i of ``pred`` should match row i of ``target``."""
    def unit(x):
        return x / ag.sqrt(ag.tsum(x * x, axis=-1, keepdims=True) + 1e-24)

    p, t = unit(pred.reshape(pred.shape[0], -1)), unit(target.reshape(target.shape[0], -1))
    sim = (p @ ag.transpose(t, (1, 0))) / T
    n = sim.shape[0]
    return -ag.tsum(ag.log_softmax(sim, axis=-1) * np.eye(n)) / n


def hard_label_ce(logits: Tensor, targets: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(targets)), np.asarray(targets, dtype=np.int64)] = 1.0
    return -ag.tsum(ag.log_softmax(logits, axis=-1) * onehot) / len(targets)


# -- relations and transforms -----------------------------------------------------------------------
def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, S, d = x.shape
    if d % heads:
        raise DimensionError(f"hidden size {d} not divisible by {heads} relation heads")
    return ag.transpose(ag.reshape(x, (B, S, heads, d // heads)), (0, 2, 1, 3))


def apply_relation(h_q: Tensor, h_k: Tensor | None, kind: str, heads: int = 1) -> Tensor:
    """Relation features.

    ``attention_relation``: softmax(Q K^T / sqrt(d_head)) per head;
    ``value_relation``/``qk_relation``: softmax(H H^T / sqrt(d_head)) per head;
    ``pairwise_scaled_dot``: H H^T / sqrt(d) without softmax;
    ``token_distance``: pairwise token distances normalised by their mean;
    ``token_angle``: cosines of angles formed by token triplets.
    """
    if kind == "attention_relation":
        if h_k is None or h_k.shape != h_q.shape:
            raise DimensionError("attention_relation needs Q and K of equal shape")
        return ag.softmax(ag.scaled_dot(_split_heads(h_q, heads), _split_heads(h_k, heads)), axis=-1)
    if kind in ("value_relation", "qk_relation"):
        hq = _split_heads(h_q, heads)
        return ag.softmax(ag.scaled_dot(hq, hq), axis=-1)
    if kind == "pairwise_scaled_dot":
        return ag.scaled_dot(h_q, h_q)
    if kind == "token_distance":
        diff = ag.reshape(h_q, h_q.shape[:-2] + (h_q.shape[-2], 1, h_q.shape[-1])) - \
            ag.reshape(h_q, h_q.shape[:-2] + (1,) + h_q.shape[-2:])
        dist = ag.sqrt(ag.tsum(diff * diff, axis=-1) + 1e-12)
        return dist / (ag.mean(dist, axis=(-1, -2), keepdims=True) + 1e-12)
    if kind == "token_angle":
        S = h_q.shape[-2]
        diff = ag.reshape(h_q, h_q.shape[:-2] + (S, 1, h_q.shape[-1])) - \
            ag.reshape(h_q, h_q.shape[:-2] + (1, S, h_q.shape[-1]))
        e = diff / ag.sqrt(ag.tsum(diff * diff, axis=-1, keepdims=True) + 1e-12)
        # angle at vertex j between tokens i and k: <e_ij, e_kj>
        ej = ag.transpose(e, tuple(range(e.ndim - 3)) + (e.ndim - 2, e.ndim - 3, e.ndim - 1))  # [.., j, i, d]
        return ej @ ag.swap_last(ej)                                                             # [.., j, i, k]
    raise DimensionError(f"unknown relation {kind!r}")


def apply_transform(x: Tensor, kind: str, span: int = 2) -> Tensor:
    if kind == "none":
        return x
    if kind == "pairwise_scaled_dot":
        return apply_relation(x, None, "pairwise_scaled_dot")
    if kind == "first_token_normalized":
        first = x[:, 0, :]
        return first / ag.sqrt(ag.tsum(first * first, axis=-1, keepdims=True) + 1e-24)
    if kind == "mean_normalized":
        pooled = ag.mean(x, axis=1)
        return pooled / ag.sqrt(ag.tsum(pooled * pooled, axis=-1, keepdims=True) + 1e-24)
    if kind == "span_pool":
        B, S, d = x.shape
        n = S // span
        return ag.mean(ag.reshape(x[:, :n * span, :], (B, n, span, d)), axis=2)
    if kind == "sample_pool":
        return ag.mean(x, axis=1)
    raise DimensionError(f"unknown transform {kind!r}")


# -- auxiliary model ----------------------------------------------------------------------------------
class AuxiliaryModel:
    """Trainable projections (and layer-attention keys) owned by the loss side."""

    def __init__(self, seed: int = 0):
        self.rng = Rng(seed)
        self.params: dict[str, Tensor] = {}

    def matrix(self, name: str, rows: int, cols: int, zero: bool = False) -> Tensor:
        p = self.params.get(name)
        if p is None:
            init = np.zeros((rows, cols)) if zero else self.rng.normal((rows, cols), 0.0, 0.02)
            p = Tensor(init, requires_grad=True, name=name)
            self.params[name] = p
        elif p.shape != (rows, cols):
            raise DimensionError(f"projection {name} has shape {p.shape}, needs {(rows, cols)}")
        return p

    def project(self, name: str, x: Tensor, out_dim: int, zero: bool = False) -> Tensor:
        return x @ self.matrix(name, x.shape[-1], out_dim, zero)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]


# -- forward plans (operation hooks) -----------------------------------------------------------------------
@dataclass
class ForwardPlan:
    replace: tuple | None = None           # per student block: substitute the aligned teacher group
    interchange: dict | None = None        # student_layer, teacher_layer, positions, perm
    active_layers: frozenset | None = None
    frozen: tuple = ()


def teacher_groups(Ls: int, Lt: int) -> list[list[int]]:
    """Teacher layers aligned to each student block under the uniform map."""
    return [list(range(uniform_map(i - 1, Ls, Lt) + 1, uniform_map(i, Ls, Lt) + 1)) for i in range(1, Ls + 1)]


def apply_operation_hooks(student: TransformerModel, teachers: Sequence[TransformerModel],
                          hooks: StageHooks, state: IterState, rng: Rng, seq_len: int,
                          batch_size: int) -> ForwardPlan:
    plan = ForwardPlan()
    Ls = student.spec.layers
    for h in hooks.operation_hooks:
        if h.kind == "replace_block":
            if not teachers:
                raise PlanError("replace_block needs a teacher")
            Lt = teachers[0].spec.layers
            if Lt < Ls or h.alignment != "uniform_map":
                raise PlanError("replace_block alignment undefined: teacher shallower than student")
            p = hooks.value(h.prob, state)
            plan.replace = tuple(bool(x) for x in rng.bernoulli(p, (Ls,)))
        elif h.kind == "interchange":
            if not teachers:
                raise PlanError("interchange needs a teacher")
            Lt = teachers[0].spec.layers
            if h.alignment != "uniform_map" or Lt < Ls:
                raise PlanError("interchange alignment undefined")
            candidates = list(h.layers) or list(range(1, Ls + 1))
            if any(not 1 <= c <= Ls for c in candidates):
                raise PlanError(f"interchange layer outside [1..{Ls}]")
            ls = candidates[int(rng.integers(0, len(candidates)))]
            k = max(1, int(round(h.fraction * seq_len)))
            positions = rng.choice(seq_len, k)
            perm = np.roll(np.arange(batch_size), 1 + int(rng.integers(0, max(batch_size - 1, 1))))
            plan.interchange = {"student_layer": ls, "teacher_layer": uniform_map(ls, Ls, Lt),
                                "positions": positions, "perm": perm}
        elif h.kind == "layer_drop":
            k = int(round(hooks.value(h.active, state)))
            if not 1 <= k <= Ls:
                k = min(max(k, 1), Ls)
            plan.active_layers = frozenset(range(1, k + 1))
        elif h.kind == "freeze":
            if hooks.value(h.when, state) >= 0.5:
                plan.frozen = plan.frozen + tuple(h.params)
    return plan


def hybrid_forward(student: TransformerModel, teacher: TransformerModel, tokens: np.ndarray,
                   replace: Sequence[bool], aux: AuxiliaryModel | None = None,
                   rng: Rng | None = None) -> Tensor:
    """Student forward where replaced blocks run the aligned teacher layer group instead."""
    tokens = student.check_tokens(tokens)
    groups = teacher_groups(student.spec.layers, teacher.spec.layers)
    ds, dt = student.spec.dim, teacher.spec.dim
    x = student.embed(tokens, rng)
    for i in range(1, student.spec.layers + 1):
        if replace[i - 1]:
            if ds == dt:
                for j in groups[i - 1]:
                    x = teacher.block(j, x)
            else:
                # Widths differ: run the teacher group in its own width and add
                # its residual update back through a projection.
                h0 = aux.project(f"replace.in.{i}", x, dt)
                h = h0
                for j in groups[i - 1]:
                    h = teacher.block(j, h)
                x = x + aux.project(f"replace.out.{i}", h - h0, ds, zero=True)
        else:
            x = student.block(i, x, rng=rng)
    return student.head(x)


def interchange_forward(model: TransformerModel, base: np.ndarray, source: np.ndarray, layer: int,
                        positions: np.ndarray, requested: Iterable = ()):
    """Run ``source`` to ``layer``, then run ``base`` with the hidden rows at ``positions`` swapped in."""
    captured = {}

    def grab(i, h):
        if i == layer:
            captured["h"] = h
        return h

    forward_with_taps(model, source, (), layer_hook=grab)
    mask = np.zeros((1, base.shape[1], 1))
    mask[0, positions, 0] = 1.0

    def splice(i, h):
        if i == layer:
            return h * (1.0 - mask) + captured["h"] * mask
        return h

    return forward_with_taps(model, base, requested, layer_hook=splice)


# -- tap sets and loss composition ---------------------------------------------------------------------------
@dataclass
class TapSet:
    student: TapBundle
    teachers: list
    batch: Any
    student_spec: Any
    teacher_specs: list
    teacher_weights: Any = None
    reduction: str = "mixture"
    cf_student: TapBundle | None = None
    cf_teachers: list | None = None
    active_layers: frozenset | None = None
    layer_subset: tuple | None = None     # random_subset combiner: teacher layers this epoch


def feature_requests(terms: Iterable[LossTerm], Ls: int, Lt: int) -> tuple[set, set]:
    """``(student, teacher)`` sets of ``(kind, layer)`` needed by ``terms``."""
    s_req, t_req = set(), set()
    for t in terms:
        kinds = [t.feature]
        if t.distance.relation == "attention_relation":
            kinds = ["Q", "K"]
        if t.feature == "Hard":
            s_req.add(("Soft", None))
            if t.teacher != "gold":
                t_req.add(("Soft", None))
            continue
        for kind in kinds:
            if kind in LAYERED_KINDS:
                if t.combiner == "pair":
                    pairs = pair_layers(t.student_layers, t.teacher_layers, Ls, Lt)
                    s_req.update((kind, a) for a, _ in pairs)
                    t_req.update((kind, b) for _, b in pairs)
                else:
                    s_req.update((kind, a) for a in resolve_layers(t.student_layers, Ls))
                    t_req.update((kind, b) for b in range(1, Lt + 1))
            else:
                s_req.add((kind, None))
                if t.teacher != "gold":
                    t_req.add((kind, None))
    return s_req, t_req


def soft_logits(logits: Tensor, batch) -> Tensor:
    """Logits at the batch's prediction positions, restricted to label columns when present."""
    sel = logits[batch.rows, batch.cols]
    if getattr(batch, "label_ids", None) is not None:
        sel = sel[:, batch.label_ids]
    return sel


class _Feature:
    """Resolves a feature from a tap bundle for one side of a term."""

    def __init__(self, taps: TapBundle, spec, batch, term: LossTerm):
        self.taps, self.spec, self.batch, self.term = taps, spec, batch, term

    def get(self, kind: str, layer: int | None) -> Tensor:
        key = (kind, layer if kind in LAYERED_KINDS else None)
        if key not in self.taps:
            raise CompositionError(f"feature {kind}@{layer} missing for term {self.term.label}")
        x = self.taps[key]
        if kind == "Soft":
            x = soft_logits(x, self.batch)
        return x


def _relation_feature(src: _Feature, term: LossTerm, layer, heads) -> Tensor:
    rel = term.distance.relation
    if rel == "attention_relation":
        return apply_relation(src.get("Q", layer), src.get("K", layer), rel, heads)
    x = src.get(term.feature, layer)
    if rel in ("value_relation", "qk_relation"):
        return apply_relation(x, None, rel, heads)
    if rel in ("token_distance", "token_angle"):
        return apply_relation(x, None, rel)
    return x


def _is_prob(term: LossTerm) -> bool:
    return term.feature == "Att" or term.distance.relation in (
        "attention_relation", "value_relation", "qk_relation")


def _relation_heads(term: LossTerm, s_spec, t_spec) -> int:
    if term.distance.heads is not None:
        return term.distance.heads
    if term.distance.relation in ("attention_relation", "value_relation", "qk_relation") and s_spec.heads != t_spec.heads:
        raise DimensionError("relation heads differ between student and teacher; set distance.heads")
    return s_spec.heads


def _pair_distance(term: LossTerm, s: Tensor, t: Tensor, aux: AuxiliaryModel, proj_name: str,
                   teacher_scale: float | None) -> Tensor:
    if term.projection and term.feature in HIDDEN_KINDS and term.distance.relation == "none":
        s = aux.project(proj_name, s, t.shape[-1])
    s = apply_transform(s, term.transform)
    t = apply_transform(t, term.transform)
    if teacher_scale is not None:
        t = t * teacher_scale
    if s.shape != t.shape:
        raise DimensionError(f"term {term.label}: student {s.shape} vs teacher {t.shape}; enable projection")
    probs = _is_prob(term)
    return compute_distance(t, s, term.distance, a_probs=probs, b_probs=probs)


def _term_distance_single(term: LossTerm, taps: TapSet, t_index: int, aux: AuxiliaryModel,
                          state_scale: float | None) -> Tensor:
    s_taps = taps.cf_student if term.view == "interchange" else taps.student
    t_list = taps.cf_teachers if term.view == "interchange" else taps.teachers
    if s_taps is None or t_list is None:
        raise CompositionError(f"term {term.label} needs the interchange view, which no hook produced")
    t_spec = taps.teacher_specs[t_index]
    s_src = _Feature(s_taps, taps.student_spec, taps.batch, term)
    t_src = _Feature(t_list[t_index], t_spec, taps.batch, term)
    Ls, Lt = taps.student_spec.layers, t_spec.layers

    if term.feature not in LAYERED_KINDS:
        s = s_src.get(term.feature, None)
        t = t_src.get(term.feature, None)
        return _pair_distance(term, s, t, aux, f"{term.label}.t{t_index}", state_scale)

    heads = _relation_heads(term, taps.student_spec, t_spec)
    s_layers = resolve_layers(term.student_layers, Ls)
    if taps.active_layers is not None:
        s_layers = [i for i in s_layers if i in taps.active_layers]
    if not s_layers:
        return ag.Tensor(0.0)

    if term.combiner == "pair":
        pairs = [p for p in pair_layers(term.student_layers, term.teacher_layers, Ls, Lt) if p[0] in s_layers]
        vals = [_pair_distance(term, _relation_feature(s_src, term, a, heads),
                               _relation_feature(t_src, term, b, heads), aux,
                               f"{term.label}.t{t_index}.l{a}", state_scale) for a, b in pairs]
        return ag.tsum(ag.stack(vals)) / len(vals)

    t_layers = list(range(1, Lt + 1))
    if term.combiner == "random_subset":
        subset = taps.layer_subset or tuple(uniform_map(i, Ls, Lt) for i in range(1, Ls + 1))
        vals = []
        for a, b in zip(range(1, Ls + 1), subset):
            if a in s_layers:
                vals.append(_pair_distance(term, s_src.get(term.feature, a), t_src.get(term.feature, b),
                                           aux, f"{term.label}.t{t_index}.l{a}", None))
        return ag.tsum(ag.stack(vals)) / len(vals)

    # alp / universal: student layer against an attention-weighted mixture of teacher layers
    T_stack = ag.stack([t_src.get(term.feature, b) for b in t_layers], axis=1)       # [B, Lt, S, dt]
    B, _, S, dt = T_stack.shape
    vals = []
    for a in s_layers:
        s = aux.project(f"{term.label}.t{t_index}.l{a}", s_src.get(term.feature, a), dt)  # [B, S, dt]
        keys = T_stack
        if term.combiner == "universal":
            keys = T_stack @ aux.matrix(f"{term.label}.t{t_index}.key", dt, dt)
        s_flat = ag.reshape(s, (B, 1, S * dt))
        k_flat = ag.reshape(keys, (B, Lt, S * dt))
        scores = (s_flat @ ag.swap_last(k_flat)) / math.sqrt(S * dt)                   # [B, 1, Lt]
        w = ag.softmax(scores, axis=-1)
        mix = ag.reshape(w @ ag.reshape(T_stack, (B, Lt, S * dt)), (B, S, dt))
        vals.append(compute_distance(mix, s, term.distance))
    return ag.tsum(ag.stack(vals)) / len(vals)


def term_value(term: LossTerm, taps: TapSet, aux: AuxiliaryModel, hooks: StageHooks, state: IterState) -> Tensor:
    """Unweighted value of one loss term."""
    scale = hooks.value(term.teacher_scale, state) if term.teacher_scale else None
    if term.feature == "Hard":
        s_taps = taps.cf_student if term.view == "interchange" else taps.student
        logits = soft_logits(s_taps[("Soft", None)], taps.batch)
        if term.teacher == "gold":
            targets = taps.batch.targets
        else:
            idx = 0 if term.teacher == "ensemble" else term.teacher
            targets = np.argmax(soft_logits(taps.teachers[idx][("Soft", None)], taps.batch).data, axis=-1)
        return hard_label_ce(logits, targets)
    if term.teacher == "gold":
        raise CompositionError(f"term {term.label} references gold labels but is not a Hard term")
    n = len(taps.teachers)
    if term.teacher != "ensemble":
        if term.teacher >= n:
            raise CompositionError(f"term {term.label} references teacher {term.teacher}, only {n} present")
        return _term_distance_single(term, taps, term.teacher, aux, scale)
    weights = np.ones(n) / n if taps.teacher_weights is None else np.asarray(taps.teacher_weights, dtype=float)
    if term.feature == "Soft" and taps.reduction == "mixture" and term.distance.kind in ("KL", "CE"):
        T = term.distance.temperature
        s = soft_logits(taps.student[("Soft", None)], taps.batch)
        target = sum(w * ag.softmax(soft_logits(tb[("Soft", None)], taps.batch), temperature=T).data
                     for w, tb in zip(weights, taps.teachers))
        return compute_distance(Tensor(target / weights.sum()), s, term.distance, a_probs=True)
    vals = [w * _term_distance_single(term, taps, i, aux, scale) for i, w in enumerate(weights) if w > 0]
    return ag.tsum(ag.stack(vals))


def compose_loss(terms: Sequence[LossTerm], taps: TapSet, hooks: StageHooks, state: IterState,
                 aux: AuxiliaryModel) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of loss terms plus each term's unweighted value."""
    total = None
    breakdown: dict[str, float] = {}
    for term in terms:
        w = hooks.value(term.weight, state)
        try:
            value = term_value(term, taps, aux, hooks, state)
        except NonFiniteError as exc:
            raise NonFiniteError(f"term {term.label}: {exc}") from None
        label = term.label
        k = 2
        while label in breakdown:
            label = f"{term.label}#{k}"
            k += 1
        breakdown[label] = value.item()
        if w == 0:
            continue
        contrib = value * w
        total = contrib if total is None else total + contrib
    if total is None:
        total = Tensor(0.0)
    return total, breakdown


def with_distance(term: LossTerm, distance: DistanceSpec) -> LossTerm:
    return replace(term, distance=distance)
