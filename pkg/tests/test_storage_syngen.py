import io
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sau import rng as R
from sau import storage as S
from sau import syngen as G
from sau.data import Sample


def _samples(n, shape=(4,), seed=0):
    g = np.random.default_rng(seed)
    # float32-representable so the f32 blob round-trips exactly
    return [Sample(g.standard_normal(shape).astype(np.float32), int(g.integers(0, 3)), bool(k % 2),
                   float(np.float32(g.random())), k) for k in range(n)]


def test_tensor_roundtrip_both_dtypes():
    buf = io.BytesIO()
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    b = np.random.default_rng(0).standard_normal((2, 2, 2))
    oa = S.write_tensor(buf, a, 0)
    ob = S.write_tensor(buf, b, 1)
    raw = buf.getvalue()
    ra, end = S.read_tensor(raw, oa)
    rb, _ = S.read_tensor(raw, ob)
    assert end == ob
    assert np.array_equal(ra, a) and ra.dtype == np.float32
    assert np.array_equal(rb, b) and rb.dtype == np.float64


def test_blob_header_layout():
    buf = io.BytesIO()
    S.write_tensor(buf, np.zeros((2, 3), np.float32))
    raw = buf.getvalue()
    assert raw[:4] == b"SAUT"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert raw[8] == 0
    assert int.from_bytes(raw[9:13], "little") == 2
    assert int.from_bytes(raw[13:21], "little") == 2 and int.from_bytes(raw[21:29], "little") == 3
    assert len(raw) == 29 + 6 * 4


def test_dataset_roundtrip(tmp_path):
    samples = _samples(7)
    S.write_dataset(samples, tmp_path / "a.jsonl")
    assert G.load_external(tmp_path / "a.jsonl") == samples


def test_empty_manifest(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert G.load_external(tmp_path / "e.jsonl") == []


def test_truncated_blob(tmp_path):
    S.write_dataset(_samples(3), tmp_path / "t.jsonl")
    blob = S.blob_path(tmp_path / "t.jsonl")
    blob.write_bytes(blob.read_bytes()[:-5])
    with pytest.raises(S.FormatError, match="dimension mismatch"):
        G.load_external(tmp_path / "t.jsonl")


def test_malformed_line_reports_line_number(tmp_path):
    S.write_dataset(_samples(3), tmp_path / "m.jsonl")
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    lines[1] = "{not json"
    (tmp_path / "m.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(S.FormatError, match=":2:"):
        G.load_external(tmp_path / "m.jsonl")


@given(st.integers(0, 6), st.integers(1, 3))
def test_roundtrip_property(n, rank):
    with tempfile.TemporaryDirectory() as d:
        samples = _samples(n, shape=(2,) * rank, seed=n)
        S.write_dataset(samples, Path(d) / "p.jsonl")
        assert S.read_dataset(Path(d) / "p.jsonl") == samples


# -- generator ---------------------------------------------------------------

def _spec(**kw):
    means = np.eye(4) * 3.0
    base = dict(class_means=means, spread=1.0, noise_rate=0.2, quality_threshold=0.5, seed=0)
    base.update(kw)
    return G.GenSpec(**base)


def test_count_zero():
    assert G.generate_class_samples(_spec(), 1, 0, R.stream(0, "generate")) == []


def test_degenerate_spread():
    spec = _spec(noise_rate=0.0, spread=1e-9)
    out = G.generate_class_samples(spec, 2, 20, R.stream(0, "generate"))
    assert all(np.allclose(s.features, spec.class_means[2], atol=1e-6) for s in out)
    assert all(s.quality == pytest.approx(1.0) for s in out)
    assert all(s.is_synthetic and s.label == 2 for s in out)


def test_noise_rate_one_mostly_off_class():
    spec = _spec(noise_rate=1.0, spread=0.5, widen=6.0)
    out = G.generate_class_samples(spec, 0, 1000, R.stream(1, "generate"))
    X = np.stack([s.features for s in out])
    d = ((X[:, None, :] - spec.class_means[None]) ** 2).sum(-1)
    own = d[:, 0]
    nearer_wrong = (d[:, 1:].min(axis=1) < own).mean()
    assert nearer_wrong > 0.5


def test_generation_reproducible():
    a = G.generate_class_samples(_spec(), 1, 30, R.stream(4, "generate", 1))
    b = G.generate_class_samples(_spec(), 1, 30, R.stream(4, "generate", 1))
    assert a == b


@given(seed=st.integers(0, 10 ** 6), rate=st.floats(0, 1), c=st.integers(0, 3))
def test_quality_in_unit_interval(seed, rate, c):
    out = G.generate_class_samples(_spec(noise_rate=rate), c, 25, R.stream(seed, "generate"))
    assert all(0.0 <= s.quality <= 1.0 for s in out)


def test_filter_examples():
    samples = G.generate_class_samples(_spec(noise_rate=0.5), 0, 200, R.stream(2, "generate"))
    assert G.filter_by_quality(samples, 0.0) == samples
    assert G.filter_by_quality(samples, 1.0 + 1e-9) == []
    kept = G.filter_by_quality(samples, 0.5)
    assert kept == [s for s in samples if s.quality >= 0.5]


@given(st.lists(st.floats(0, 1), max_size=30), st.floats(0, 1))
def test_filter_is_subsequence(qs, thr):
    samples = [Sample(np.zeros(1), 0, True, q, i) for i, q in enumerate(qs)]
    kept = G.filter_by_quality(samples, thr)
    ids = [s.id for s in kept]
    assert ids == sorted(ids) and all(s.quality >= thr for s in kept)


def test_complement_meets_targets():
    spec = _spec()
    need = [0, 5, 40, 100]
    out = G.generate_complement(spec, need, id_start=1000)
    assert [sum(s.label == c for s in out) for c in range(4)] == need
    assert all(s.quality >= spec.quality_threshold for s in out)
    assert len({s.id for s in out}) == len(out)


def test_complement_noise_free_threshold_zero_exact():
    out = G.generate_complement(_spec(noise_rate=0.0, quality_threshold=0.0), [3, 0, 2, 1], 0)
    assert len(out) == 6


def test_unmeetable_target():
    # identical means give posterior 1/4 for every draw, never above 0.9
    spec = G.GenSpec(np.zeros((4, 2)), 1.0, 0.0, 0.9, 0)
    with pytest.raises(G.UnmeetableTargetError):
        G.generate_complement(spec, [5, 0, 0, 0], 0, max_rounds=3)
