import pytest

from distilkit.errors import CatalogError, CombinationError
from distilkit.hooks import DistanceSpec, LossTerm, StageHooks
from distilkit.methods import (
    CATALOG, MethodDescriptor, Orchestration, combine, get_descriptor, single_term, stage_features, validate,
    without_features,
)

NAMES = ["KD", "PD", "PKD", "DistilBERT", "Theseus", "TinyBERT", "MobileBERT", "SID", "MiniLM", "MiniLMv2",
         "ALP-KD", "LRC-BERT", "Annealing-KD", "CKD", "Universal-KD", "DIITO", "Continuation-KD", "RAIL-KD",
         "MGSKD", "TMKD", "MT-BERT", "RL-KD", "Uncertainty", "TAKD", "DGKD"]


def soft_kl():
    return single_term("soft-KL", "Soft", DistanceSpec("KL"))


def test_catalog_is_complete():
    assert sorted(CATALOG) == sorted(NAMES)
    assert len(CATALOG) == 25


@pytest.mark.parametrize("name", NAMES)
def test_builtins_validate(name):
    d = get_descriptor(name)
    assert validate(d) == []
    assert validate(d, student_layers=4, teacher_layers=4) == []


@pytest.mark.parametrize("name", NAMES + ["BestC"])
def test_json_roundtrip(name):
    d = get_descriptor(name)
    assert MethodDescriptor.from_json(d.to_json()) == d


def test_unknown_name():
    with pytest.raises(CatalogError):
        get_descriptor("FooKD")


def test_feature_summaries():
    assert stage_features(get_descriptor("TinyBERT").stages.pretraining) == {"Emb:MSE", "Att:MSE", "HS:MSE"}
    assert stage_features(get_descriptor("KD").stages.task) >= {"Soft:CE", "Hard:CE"}
    tiny = get_descriptor("TinyBERT").stages.pretraining.loss_terms
    assert all(t.projection for t in tiny if t.feature in ("Emb", "HS"))


def test_dgkd_chain():
    o = get_descriptor("DGKD").orchestration
    assert o.mode == "assistant_chain" and o.dense
    assert o.chain == ("340M", "200M", "110M", "66M")
    assert not get_descriptor("TAKD").orchestration.dense


def test_bestc_row():
    b = get_descriptor("BestC")
    pre, task = b.stages.pretraining, b.stages.task
    assert stage_features(pre) == {"Emb:MSE", "Q:KL", "K:KL", "V:KL", "HS:MSE", "Soft:KL"}
    assert stage_features(task) == {"Emb:MSE", "Q:KL", "K:KL", "V:KL", "HS:MSE", "Soft:CE"}


def test_combine_reproduces_bestc():
    tiny = without_features(get_descriptor("TinyBERT"), ["Att"])
    parts = [tiny, get_descriptor("MiniLMv2"), soft_kl()]
    merged = combine(parts)
    bestc = get_descriptor("BestC")
    assert merged.term_set(0) == bestc.term_set(0)
    task = combine(parts, overrides={"Soft": DistanceSpec("CE")})
    assert task.stages.pretraining.loss_terms  # overrides keep the stage layout
    # the task-stage BestC terms are the merged pre-training set with Soft switched to CE
    assert task.term_set(0) == bestc.term_set(1)


def test_combine_union_with_kd():
    merged = combine([get_descriptor("KD"), get_descriptor("TinyBERT")])
    tiny = get_descriptor("TinyBERT")
    expected = {f for s in tiny.stages for f in stage_features(s)} | {"Soft:CE", "Hard:CE"}
    got = {f for s in merged.stages for f in stage_features(s)}
    assert got == expected
    # first descriptor wins on a shared key: KD's Soft term (T=2) replaces TinyBERT's
    assert {t.key for t in merged.term_set()} >= {t.key for t in tiny.term_set()}
    soft = [t for t in merged.stages.task.loss_terms if t.feature == "Soft"]
    assert len(soft) == 1 and soft[0].distance.temperature == 2.0


@pytest.mark.parametrize("name", ["KD", "TinyBERT", "MobileBERT", "Theseus", "BestC"])
def test_combine_idempotent(name):
    d = get_descriptor(name)
    assert combine([d, d]).term_set() == d.term_set()
    assert combine([d, d]).stages == combine([d]).stages


@pytest.mark.parametrize("a, b, c", [("KD", "TinyBERT", "MiniLMv2"), ("PKD", "CKD", "ALP-KD"),
                                     ("MiniLM", "MGSKD", "DistilBERT")])
def test_combine_associative(a, b, c):
    A, B, C = (get_descriptor(n) for n in (a, b, c))
    left = combine([combine([A, B]), C])
    right = combine([A, combine([B, C])])
    flat = combine([A, B, C])
    assert left.term_set() == right.term_set() == flat.term_set()
    for i in range(len(flat.stages)):
        assert left.term_set(i) == right.term_set(i) == flat.term_set(i)


def test_combine_orchestration_conflict():
    with pytest.raises(CombinationError):
        combine([get_descriptor("KD"), get_descriptor("TMKD")])
    with pytest.raises(CombinationError):
        combine([])


def test_override_keeps_relation():
    merged = combine([get_descriptor("MiniLM")], overrides={"V": DistanceSpec("MSE")})
    v = [t for t in merged.stages[0].loss_terms if t.feature == "V"][0]
    assert v.distance.kind == "MSE" and v.distance.relation == "value_relation"


def test_validate_violations():
    bad = MethodDescriptor("bad", Orchestration(), (StageHooks("task", loss_terms=(
        LossTerm("Att", student_layers="index:99", teacher_layers="index:99"),)),))
    problems = validate(bad, student_layers=6, teacher_layers=6)
    assert any("index(99)" in p for p in problems)
    assert validate(MethodDescriptor("empty")) == ["descriptor has no stages"]
    assert validate(MethodDescriptor("x", Orchestration("multi_teacher"), get_descriptor("KD").stages))
    ens = MethodDescriptor("y", Orchestration(), get_descriptor("TMKD").stages)
    assert any("ensemble" in p for p in validate(ens))
