import math

import numpy as np
import pytest

from distilkit.errors import CorrelationError, DataError
from distilkit.model import TransformerModel, forward_with_taps, get_spec
from distilkit.data import generate_corpus
from distilkit.rng import Rng
from distilkit.telemetry import (
    KL_TEMPERATURES, SNAPSHOT_FEATURES, DistanceRecord, TelemetrySink, correlation_report, dump_record,
    normalize_series, pearson, read_records, snapshot_distances, spearman,
)


def brute_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    vx = sum((a - mx) ** 2 for a in x)
    vy = sum((b - my) ** 2 for b in y)
    return cov / math.sqrt(vx * vy)


def brute_ranks(x):
    return [1 + sum(v < a for v in x) + (sum(v == a for v in x) - 1) / 2 for a in x]


def test_pearson_examples():
    assert pearson([1, 2, 3], [2, 4, 6]) == 1.0
    assert pearson([1, 2, 3], [-1, -2, -3]) == -1.0
    assert pearson([1, 2, 3, 4], [3, 1, 4, 2]) == pytest.approx(brute_pearson([1, 2, 3, 4], [3, 1, 4, 2]), abs=1e-15)


def test_spearman_examples():
    assert spearman([1, 2, 3, 4], [3, 1, 4, 2]) == 0.0
    x = np.array([0.3, -1.2, 2.5, 0.9, 1.7])
    assert spearman(x, x ** 3) == 1.0
    assert spearman([1, 1, 2], [1, 1, 2]) == 1.0


def test_undefined_and_short_series():
    with pytest.raises(CorrelationError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(CorrelationError):
        spearman([2, 2, 2, 2], [1, 2, 3, 4])
    with pytest.raises(DataError):
        pearson([1, 2], [1, 2])
    with pytest.raises(DataError):
        pearson([1, 2, 3], [1, 2])


def test_against_brute_force_oracles():
    r = Rng(42)
    worst = 0.0
    for _ in range(1000):
        n = int(r.integers(3, 12))
        x = [float(v) for v in r.integers(0, 6, (n,))]
        y = [float(v) for v in r.normal((n,))]
        if len(set(x)) == 1:
            continue
        worst = max(worst, abs(pearson(x, y) - brute_pearson(x, y)),
                    abs(spearman(x, y) - brute_pearson(brute_ranks(x), brute_ranks(y))))
    assert worst < 1e-10


def test_invariances():
    r = Rng(5)
    for _ in range(50):
        x, y = r.normal((20,)), r.normal((20,))
        base = pearson(x, y)
        assert abs(pearson(3.5 * x - 2.0, y) - base) < 1e-12
        assert abs(pearson(x, 0.25 * y + 10) - base) < 1e-12
        assert spearman(x, np.exp(x)) == pytest.approx(1.0, abs=1e-15)


def test_normalize_series():
    assert normalize_series([2, 4, 6]) == [0.0, 0.5, 1.0]
    assert normalize_series([5]) == [0.0]
    assert normalize_series([3, 3, 3]) == [0.0, 0.0, 0.0]
    r = Rng(9)
    for _ in range(100):
        out = normalize_series(r.normal((7,)) * 1e3 + 17)
        assert min(out) == 0.0 and max(out) == 1.0


def records_from(loss, feats):
    return [DistanceRecord(i, {k: v[i] for k, v in feats.items()}, loss[i]) for i in range(len(loss))]


def test_report_rows():
    loss = [3.0, 2.5, 2.0, 1.2, 1.1]
    recs = records_from(loss, {"same": loss, "flat": [1.0] * 5, "anti": [-v for v in loss]})
    rep = correlation_report(recs)
    assert set(rep.rows) == {"same", "anti"}
    assert rep.rows["same"] == (1.0, 1.0)
    assert rep.rows["anti"] == (-1.0, -1.0)
    assert rep.undefined == ["flat"]
    assert "undefined: flat" in rep.format_table()
    with pytest.raises(DataError):
        correlation_report(recs[:2])
    with pytest.raises(DataError):
        correlation_report(recs, "task_metric")


def test_snapshot_keys():
    t, s = get_spec("toy-teacher"), get_spec("toy-student")
    corpus = generate_corpus(0, 40, 256, 16, 2)
    batch = corpus.task_batches("train", 8)[0]
    _, tt = forward_with_taps(TransformerModel.random(t, 0), batch.tokens, SNAPSHOT_FEATURES)
    _, st = forward_with_taps(TransformerModel.random(s, 1), batch.tokens, SNAPSHOT_FEATURES)
    d = snapshot_distances(st, tt, s, t, batch)
    for T in KL_TEMPERATURES:
        assert f"Soft/KL{T}" in d
    assert any(k.startswith("HS@") and k.endswith("/psd") for k in d)
    assert "Att@1" in d and "HS@2" not in d  # widths differ: only the scaled-dot variant
    assert all(np.isfinite(v) for v in d.values())


def test_io_roundtrip(tmp_path):
    path = tmp_path / "t.jsonl"
    sink = TelemetrySink(path)
    recs = [DistanceRecord(i, {"HS@1": 0.1 * i + 1 / 3, "Emb": 2.0 ** -i}, 1.0 / (i + 1), 1.5 + i, "stage0")
            for i in range(5)]
    for r in recs:
        sink.append(r)
    back = read_records(path)
    assert back == recs
    assert "".join(dump_record(r) + "\n" for r in back) == path.read_text()
    path.write_text('{"iteration": 1}\n')
    with pytest.raises(DataError):
        read_records(path)
