"""Method descriptors: the built-in catalog, combination and validation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Sequence

from .errors import CatalogError, CombinationError, ConfigValidationError
from .hooks import (DistanceSpec, LossTerm, OperationHook, Schedule, StageHooks, load_json,
                    parse_selector, selector_violation, _reject_unknown)
from .model import FEATURE_KINDS, INIT_STRATEGIES, LAYERED_KINDS

MODES = ("single_teacher", "multi_teacher", "assistant_chain")
POLICIES = ("TMKD", "MT-BERT", "RL-KD", "Uncertainty")


@dataclass(frozen=True)
class Orchestration:
    mode: str = "single_teacher"
    policy: str | None = None
    chain: tuple = ()         # paper-scale shape of an assistant chain, teacher first
    dense: bool = False       # each link also learns from every earlier model

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"mode": self.mode}
        if self.policy is not None:
            d["policy"] = self.policy
        if self.mode == "assistant_chain":
            d["chain"] = list(self.chain)
            d["dense"] = self.dense
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Orchestration":
        _reject_unknown(d, {"mode", "policy", "chain", "dense"}, "orchestration")
        kw = dict(d)
        if "chain" in kw:
            kw["chain"] = tuple(kw["chain"])
        return cls(**kw)

    def __str__(self):
        if self.mode == "multi_teacher":
            return f"multi_teacher({self.policy})"
        if self.mode == "assistant_chain":
            return f"assistant_chain({'→'.join(self.chain)})"
        return self.mode


class StageSet(tuple):
    """Ordered stages with access by kind (first stage of that kind)."""

    def _first(self, kind):
        return next((s for s in self if s.stage == kind), None)

    @property
    def pretraining(self) -> StageHooks | None:
        return self._first("pretraining")

    @property
    def task(self) -> StageHooks | None:
        return self._first("task")


@dataclass(frozen=True)
class MethodDescriptor:
    name: str
    orchestration: Orchestration = Orchestration()
    stages: StageSet = StageSet()
    init_strategy: str = "random"

    def __post_init__(self):
        object.__setattr__(self, "stages", StageSet(self.stages))

    def to_dict(self) -> dict:
        return {"name": self.name, "orchestration": self.orchestration.to_dict(),
                "init_strategy": self.init_strategy, "stages": [s.to_dict() for s in self.stages]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MethodDescriptor":
        _reject_unknown(d, {"name", "orchestration", "init_strategy", "stages"}, "descriptor")
        if "name" not in d:
            raise ConfigValidationError("name", "missing")
        stages = tuple(StageHooks.from_dict(s, f"stages[{i}]") for i, s in enumerate(d.get("stages", [])))
        return cls(d["name"], Orchestration.from_dict(d.get("orchestration", {})), stages,
                   d.get("init_strategy", "random"))

    @classmethod
    def from_json(cls, text: str) -> "MethodDescriptor":
        return cls.from_dict(load_json(text))

    def term_set(self, stage_index: int | None = None) -> frozenset:
        stages = self.stages if stage_index is None else [self.stages[stage_index]]
        return frozenset(t for s in stages for t in s.loss_terms)


def stage_features(stage: StageHooks) -> set[str]:
    """``{"Emb:MSE", ...}`` summary of a stage's loss terms."""
    return {f"{t.feature}:{t.distance.kind}" for t in stage.loss_terms}


# -- catalog ------------------------------------------------------------------------------
KD_T = 2.0


def _t(feature, kind="MSE", layers=None, **kw) -> LossTerm:
    dist = DistanceSpec(kind, temperature=kw.pop("T", 1.0), delta=kw.pop("delta", 1.0),
                        relation=kw.pop("relation", "none"))
    if layers == "uniform":
        kw.setdefault("student_layers", "all")
        kw.setdefault("teacher_layers", "uniform_map")
    elif layers is not None:
        kw.setdefault("student_layers", layers)
        kw.setdefault("teacher_layers", layers)
    if feature == "Hard":
        kw.setdefault("teacher", "gold")
    return LossTerm(feature, dist, **kw)


def _stage(kind, terms, ops=(), schedules=None) -> StageHooks:
    return StageHooks(kind, tuple(ops), tuple(terms), tuple((schedules or {}).items()))


def _kd_terms(T=KD_T, **soft_kw):
    return [_t("Soft", "CE", T=T, **soft_kw), _t("Hard", "CE")]


def _hs_uniform(kind="MSE", **kw):
    return _t("HS", kind, "uniform", projection=True, **kw)


def _build_catalog() -> dict[str, MethodDescriptor]:
    single = Orchestration()
    d: dict[str, MethodDescriptor] = {}

    def add(name, stages, orch=single, init="random"):
        d[name] = MethodDescriptor(name, orch, tuple(stages), init)

    add("KD", [_stage("task", _kd_terms())])
    add("PD", [_stage("task", _kd_terms())], init="pretrained-student")
    add("PKD", [_stage("task", [_t("HS", "MSE", "uniform", projection=True, transform="first_token_normalized")]
                       + _kd_terms())])
    add("DistilBERT", [
        _stage("pretraining", [_t("Soft", "CE", T=KD_T), _t("HS", "Cos", "last", projection=True), _t("Hard", "CE")]),
        _stage("task", [_t("Hard", "CE")])])
    # teacher-substitution probability = 1 - successor replacement rate (0.3 -> 1.0)
    add("Theseus", [_stage("task", [_t("Hard", "CE")],
                           [OperationHook("replace_block", prob="substitution")],
                           {"substitution": Schedule("linear", start=0.7, end=0.0)})])
    tiny_pre = [_t("Emb", "MSE", projection=True), _t("Att", "MSE", "uniform"), _hs_uniform()]
    add("TinyBERT", [_stage("pretraining", tiny_pre), _stage("task", tiny_pre + [_t("Soft", "CE")])])
    mb_sched = {
        "active": Schedule("phase", boundaries=(0.125, 0.25, 0.375), values=(1, 2, 3, 4), fractional=True),
        "transfer": Schedule("phase", boundaries=(0.5,), values=(1.0, 0.0), fractional=True),
        "kd": Schedule("phase", boundaries=(0.5,), values=(0.0, 1.0), fractional=True),
    }
    add("MobileBERT", [
        _stage("pretraining", [_hs_uniform(weight="transfer"), _t("Att", "MSE", "uniform", weight="transfer"),
                               _t("Soft", "KL", weight="kd"), _t("Hard", "CE", weight="kd")],
               [OperationHook("layer_drop", active="active")], mb_sched),
        _stage("task", [_t("Hard", "CE")])])
    add("SID", [_stage("task", [_hs_uniform()] + _kd_terms(),
                       [OperationHook("layer_drop", active="active")],
                       {"active": Schedule("linear", start=1.0, end=65.0, horizon=64.0, domain="epoch")})])
    add("MiniLM", [
        _stage("pretraining", [_t("Att", "KL", "last", relation="attention_relation"),
                               _t("V", "KL", "last", relation="value_relation")]),
        _stage("task", [_t("Hard", "CE")])])
    minilmv2_pre = [_t("Q", "KL", "last", relation="qk_relation"), _t("K", "KL", "last", relation="qk_relation"),
                    _t("V", "KL", "last", relation="value_relation")]
    add("MiniLMv2", [_stage("pretraining", minilmv2_pre), _stage("task", [_t("Hard", "CE")])])
    add("ALP-KD", [_stage("task", [_t("HS", "MSE", "all", combiner="alp")] + _kd_terms())])
    add("LRC-BERT", [_stage("task", [_t("HS", "Contrastive", "uniform", projection=True, transform="sample_pool")]
                            + _kd_terms())])
    add("Annealing-KD", [
        _stage("task", [_t("Soft", "MSE", teacher_scale="phi")], schedules={"phi": Schedule("anneal_phi", t_max=10.0)}),
        _stage("task", [_t("Hard", "CE")])])
    add("CKD", [_stage("task", [_t("HS", "Huber", "uniform", relation="token_distance"),
                                _t("HS", "Huber", "uniform", relation="token_angle")] + _kd_terms())])
    add("Universal-KD", [_stage("task", [_t("HS", "MSE", "all", combiner="universal")] + _kd_terms())])
    add("DIITO", [_stage("task", [_t("Soft", "KL", T=KD_T, view="interchange")] + _kd_terms(),
                         [OperationHook("interchange")])])
    add("Continuation-KD", [_stage("task", [_t("Soft", "KL", T=KD_T, weight="soft"), _t("Hard", "CE", weight="hard")],
                                   schedules={"soft": Schedule("linear", start=1.0, end=0.0, domain="epoch"),
                                              "hard": Schedule("linear", start=0.0, end=1.0, domain="epoch")})])
    add("RAIL-KD", [_stage("task", [_t("HS", "MSE", "all", projection=True, combiner="random_subset",
                                       transform="mean_normalized")] + _kd_terms())])
    add("MGSKD", [
        _stage("pretraining", [_t("Emb", "MSE", projection=True), _t("Att", "MSE", "uniform"), _hs_uniform()]),
        _stage("task", [_t("Emb", "MSE", projection=True), _t("Emb", "Huber", projection=True, transform="span_pool"),
                        _hs_uniform(), _hs_uniform("Huber", transform="span_pool"),
                        _hs_uniform("Huber", transform="sample_pool"), _t("Soft", "KL")])])
    ens = {"teacher": "ensemble"}
    add("TMKD", [_stage("task", _kd_terms(**ens))], Orchestration("multi_teacher", "TMKD"))
    add("MT-BERT", [_stage("task", _kd_terms(**ens) + [_t("HS", "MSE", "last", projection=True, **ens)])],
        Orchestration("multi_teacher", "MT-BERT"))
    # KL rather than CE: same gradient, but the selected teacher's entropy does not enter the loss value
    add("RL-KD", [_stage("task", [_t("Soft", "KL", T=KD_T, **ens), _t("Hard", "CE")])],
        Orchestration("multi_teacher", "RL-KD"))
    add("Uncertainty", [_stage("task", _kd_terms(**ens))], Orchestration("multi_teacher", "Uncertainty"))
    chain = ("340M", "200M", "110M", "66M")
    add("TAKD", [_stage("task", _kd_terms())], Orchestration("assistant_chain", chain=chain))
    add("DGKD", [_stage("task", _kd_terms(**ens))], Orchestration("assistant_chain", chain=chain, dense=True))
    return d


def _build_bestc() -> MethodDescriptor:
    rel = [_t("Q", "KL", "last", relation="qk_relation"), _t("K", "KL", "last", relation="qk_relation"),
           _t("V", "KL", "last", relation="value_relation")]
    emb, hs = _t("Emb", "MSE", projection=True), _hs_uniform()
    return MethodDescriptor("BestC", Orchestration(), (
        _stage("pretraining", [emb] + rel + [hs, _t("Soft", "KL")]),
        _stage("task", [emb] + rel + [hs, _t("Soft", "CE")])))


CATALOG: dict[str, MethodDescriptor] = _build_catalog()
EXTRA: dict[str, MethodDescriptor] = {"BestC": _build_bestc()}
METHOD_NAMES = tuple(CATALOG)


def get_descriptor(name: str) -> MethodDescriptor:
    if name in CATALOG:
        return CATALOG[name]
    if name in EXTRA:
        return EXTRA[name]
    raise CatalogError(f"unknown method {name!r}; catalog: {', '.join(list(CATALOG) + list(EXTRA))}")


def single_term(name: str, feature: str, distance: DistanceSpec, stage: str = "pretraining",
                **kw) -> MethodDescriptor:
    """A one-term descriptor, handy as a combination ingredient."""
    return MethodDescriptor(name, Orchestration(), (_stage(stage, [LossTerm(feature, distance, **kw)]),))


def without_features(desc: MethodDescriptor, features: Iterable[str]) -> MethodDescriptor:
    drop = set(features)
    stages = tuple(replace(s, loss_terms=tuple(t for t in s.loss_terms if t.feature not in drop))
                   for s in desc.stages)
    return replace(desc, name=f"{desc.name}-{'-'.join(sorted(drop))}", stages=stages)


# -- combination -----------------------------------------------------------------------------------
def _stage_slots(desc: MethodDescriptor) -> list[tuple[str, int]]:
    seen: dict[str, int] = {}
    out = []
    for s in desc.stages:
        k = seen.get(s.stage, 0)
        out.append((s.stage, k))
        seen[s.stage] = k + 1
    return out


def combine(descriptors: Sequence[MethodDescriptor],
            overrides: dict[str, DistanceSpec] | None = None) -> MethodDescriptor:
    """Merge descriptors by integrating their hooks.

    Stages are matched by kind and occurrence.  Loss terms are unioned,
    keeping the first term for each ``(feature, layer selector, relation)``
    key; ``overrides`` then replace the distance of every term of a
    feature (a term's relation is kept).  Operation hooks are concatenated
    without exact duplicates.
    """
    if not descriptors:
        raise CombinationError("nothing to combine")
    orch = descriptors[0].orchestration
    for d in descriptors[1:]:
        if d.orchestration != orch:
            raise CombinationError(f"orchestration conflict: {orch} vs {d.orchestration}")
    inits = {d.init_strategy for d in descriptors} - {"random"}
    if len(inits) > 1:
        raise CombinationError(f"init strategy conflict: {sorted(inits)}")

    slots: dict[tuple, dict] = {}
    for d in descriptors:
        for slot, s in zip(_stage_slots(d), d.stages):
            acc = slots.setdefault(slot, {"terms": {}, "ops": [], "schedules": {}})
            for t in s.loss_terms:
                acc["terms"].setdefault(t.key, t)
            for h in s.operation_hooks:
                if h not in acc["ops"]:
                    acc["ops"].append(h)
            for name, sch in s.schedules:
                if acc["schedules"].get(name, sch) != sch:
                    raise CombinationError(f"schedule {name!r} defined differently in {d.name}")
                acc["schedules"][name] = sch

    stages = []
    order = {"pretraining": 0, "task": 1}
    for slot in sorted(slots, key=lambda s: (order[s[0]], s[1])):
        acc = slots[slot]
        terms = list(acc["terms"].values())
        if overrides:
            terms = [replace(t, distance=replace(overrides[t.feature], relation=t.distance.relation))
                     if t.feature in overrides else t for t in terms]
        stages.append(StageHooks(slot[0], tuple(acc["ops"]), tuple(terms), tuple(acc["schedules"].items())))

    names = list(dict.fromkeys(d.name for d in descriptors))
    return MethodDescriptor("+".join(names), orch, tuple(stages), inits.pop() if inits else "random")


# -- validation ---------------------------------------------------------------------------------------
def validate(desc: MethodDescriptor, student_layers: int | None = None,
             teacher_layers: int | None = None) -> list[str]:
    """Violations found in ``desc`` (empty list when valid)."""
    out: list[str] = []
    if not desc.stages:
        out.append("descriptor has no stages")
    if desc.init_strategy not in INIT_STRATEGIES:
        out.append(f"unknown init strategy {desc.init_strategy!r}")
    o = desc.orchestration
    if o.mode not in MODES:
        out.append(f"unknown orchestration mode {o.mode!r}")
    if o.mode == "multi_teacher" and o.policy not in POLICIES:
        out.append(f"multi_teacher needs a policy in {POLICIES}, got {o.policy!r}")
    if o.mode != "multi_teacher" and o.policy is not None:
        out.append(f"policy {o.policy!r} given for {o.mode}")
    if o.mode == "assistant_chain" and len(o.chain) < 3:
        out.append("assistant_chain needs teacher, at least one assistant and a student")
    kinds = [s.stage for s in desc.stages]
    if "task" in kinds and "pretraining" in kinds and kinds.index("pretraining") > kinds.index("task"):
        out.append("pretraining stage must precede task stages")
    for i, s in enumerate(desc.stages):
        where = f"stages[{i}]"
        if not s.loss_terms:
            out.append(f"{where}: no loss terms")
        names = set(s.schedule_map)
        for name, sch in s.schedules:
            if sch.domain not in ("iteration", "epoch"):
                out.append(f"{where}: schedule {name!r} has unknown domain {sch.domain!r}")
        refs = [t.weight for t in s.loss_terms] + [t.teacher_scale for t in s.loss_terms]
        refs += [x for h in s.operation_hooks for x in (h.prob, h.active, h.when)]
        for ref in refs:
            if isinstance(ref, str) and ref not in names:
                out.append(f"{where}: undefined schedule {ref!r}")
        for t in s.loss_terms:
            if t.feature not in FEATURE_KINDS:
                out.append(f"{where}: unknown feature {t.feature!r}")
            if t.teacher == "ensemble" and o.mode == "single_teacher":
                out.append(f"{where}: {t.label} uses the teacher ensemble under single_teacher")
            if t.feature in LAYERED_KINDS:
                for sel, L, side in ((t.student_layers, student_layers, "student"),
                                     (t.teacher_layers, teacher_layers, "teacher")):
                    if L is not None and parse_selector(sel)[0] != "uniform_map":
                        bad = selector_violation(sel, L)
                        if bad:
                            out.append(f"{where}: {t.feature} {side} {bad} (L={L})")
        for h in s.operation_hooks:
            if h.kind in ("replace_block", "interchange") and o.mode != "single_teacher":
                out.append(f"{where}: {h.kind} requires a single teacher")
    return out
