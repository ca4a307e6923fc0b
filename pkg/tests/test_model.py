import numpy as np
import pytest

from distilkit.errors import CheckpointError, InputError, SelectorError, SourceError, StrategyError
from distilkit.model import (PRESETS, REPORTED_PARAMS, ModelSpec, TransformerModel, checkpoint_bytes,
                             count_params, forward_with_taps, init_student, load_checkpoint, parse_checkpoint,
                             save_checkpoint)
from distilkit.rng import Rng

TINY = ModelSpec(dim=8, layers=3, heads=2, vocab=20, max_seq=6, name="tiny")


def tokens(n=2, s=5, vocab=20, seed=0):
    return Rng(seed).integers(2, vocab, (n, s))


@pytest.mark.parametrize("name", sorted(REPORTED_PARAMS))
def test_count_params_matches_reported_rows(name):
    assert count_params(PRESETS[name]) == REPORTED_PARAMS[name]


def test_count_params_named_examples():
    assert count_params(ModelSpec(768, 12, 12, 30592, 512)) == 109_338_624
    assert count_params(ModelSpec(768, 6, 12, 30592, 512)) == 66_811_392
    assert count_params(ModelSpec(4096, 48, 64, 50304, 1024)) == 9_880_682_496


def test_element_count_and_logit_shape():
    m = TransformerModel.random(TINY, 0)
    assert m.num_params() == count_params(TINY)
    assert m.forward(tokens()).shape == (2, 5, 20)


def test_taps_contract():
    m = TransformerModel.random(TINY, 1)
    _, taps = forward_with_taps(m, tokens(), ())
    assert len(taps) == 0
    _, taps = forward_with_taps(m, tokens(), [("HS", "last")])
    assert list(taps) == [("HS", 3)] and taps[("HS", 3)].shape == (2, 5, 8)
    _, taps = forward_with_taps(m, tokens(), [("Att", 1)])
    att = taps[("Att", 1)].data
    assert att.shape == (2, 2, 5, 5)
    assert np.max(np.abs(att.sum(-1) - 1)) < 1e-10


def test_tap_errors():
    m = TransformerModel.random(TINY, 1)
    with pytest.raises(InputError):
        m.forward(np.array([[0, 25]]))
    with pytest.raises(SelectorError):
        forward_with_taps(m, tokens(), [("HS", 4)])
    with pytest.raises(SelectorError):
        forward_with_taps(m, tokens(), [("Logits", None)])


def test_random_init_is_deterministic():
    a, b = TransformerModel.random(TINY, 5), TransformerModel.random(TINY, 5)
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)
    c = TransformerModel.random(TINY, 6)
    assert not np.array_equal(a.params["tok_emb"].data, c.params["tok_emb"].data)


def test_truncate_teacher_copies_leading_layers():
    teacher = TransformerModel.random(ModelSpec(8, 12, 2, 20, 6), 0)
    student = init_student("truncate-teacher", ModelSpec(8, 6, 2, 20, 6), teacher)
    for i in range(1, 7):
        t, s = teacher.layer_params(i), student.layer_params(i)
        assert all(np.array_equal(t[k].data, s[k].data) for k in s)
    np.testing.assert_array_equal(teacher.params["tok_emb"].data, student.params["tok_emb"].data)


def test_init_errors(tmp_path):
    teacher = TransformerModel.random(TINY, 0)
    with pytest.raises(StrategyError):
        init_student("truncate-teacher", ModelSpec(16, 2, 2, 20, 6), teacher)
    with pytest.raises(SourceError):
        init_student("pretrained-student", TINY, tmp_path / "missing.ckpt")
    with pytest.raises(StrategyError):
        init_student("magic", TINY)


def test_checkpoint_round_trip(tmp_path):
    m = TransformerModel.random(TINY, 3)
    path = save_checkpoint(m, tmp_path / "m.ckpt", {"note": 1})
    blob = path.read_bytes()
    assert blob[:8] == b"GKDCKPT1"
    back = load_checkpoint(path)
    for n, t in m.params.items():
        np.testing.assert_array_equal(back.params[n].data, t.data.astype("<f4").astype(np.float64))
    assert checkpoint_bytes(back, {"note": 1}) == blob
    assert parse_checkpoint(blob)[2] == {"note": 1}
    with pytest.raises(CheckpointError):
        parse_checkpoint(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointError):
        parse_checkpoint(blob[:-4])


def test_pretrained_student_loads_checkpoint(tmp_path):
    m = TransformerModel.random(TINY, 3)
    path = save_checkpoint(m, tmp_path / "m.ckpt")
    s = init_student("pretrained-student", TINY, path)
    assert all(t.requires_grad for t in s.params.values())


def test_batch_permutation_permutes_outputs():
    m = TransformerModel.random(TINY, 2)
    x = tokens(4, 5, seed=3)
    perm = np.array([2, 0, 3, 1])
    np.testing.assert_array_equal(m.forward(x).data[perm],
                                  m.forward(x[perm]).data)


def test_taps_are_observers():
    m = TransformerModel.random(TINY, 2)
    x = tokens(3, 6, seed=4)
    plain, _ = forward_with_taps(m, x, ())
    every = [("Emb", None), ("Soft", None), ("Hard", None)] + [(k, "all") for k in ("Att", "Q", "K", "V", "HS")]
    tapped, taps = forward_with_taps(m, x, every)
    np.testing.assert_array_equal(plain.data, tapped.data)
    assert len(taps) == 3 + 5 * TINY.layers
