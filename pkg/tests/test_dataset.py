import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xmrs.dataset import (
    MODALITIES,
    ConfigurationError,
    Dataset,
    DatasetError,
    DatasetValidationError,
    Modality,
    Sample,
    batch_sizes,
    generate_synthetic,
    load_dataset,
    make_batches,
    parse_dims_arg,
    write_dataset,
)

DIMS = {Modality.TEXT: (4, 8), Modality.VISUAL: (4, 6), Modality.ACOUSTIC: (4, 5)}


def _write_raw(tmp_path, records, dims=DIMS):
    manifest = {"dims": {m.value: list(dims[m]) for m in MODALITIES}, "splits": {"train": "train.jsonl"}}
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with open(tmp_path / "train.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def _record(sid, label, dims=DIMS, rng=None, lengths=None):
    rng = rng or np.random.default_rng(0)
    rec = {"id": sid, "label": label}
    for m in MODALITIES:
        L = (lengths or {}).get(m, dims[m][0])
        rec[m.value] = rng.standard_normal((L, dims[m][1])).tolist()
    return rec


def test_load_three_samples(tmp_path):
    _write_raw(tmp_path, [_record(f"s{i}", 0.5 * i - 0.5) for i in range(3)])
    ds = load_dataset(tmp_path, "train")
    assert len(ds) == 3
    assert ds.dims == DIMS
    assert [s.id for s in ds] == ["s0", "s1", "s2"]


def test_nan_is_rejected_with_sample_and_modality(tmp_path):
    bad = _record("s2", 1.0)
    bad["visual"][1][2] = float("nan")
    _write_raw(tmp_path, [_record("s0", 1.0), _record("s1", -1.0), bad])
    with pytest.raises(DatasetValidationError, match=r"'s2'.*visual"):
        load_dataset(tmp_path, "train")


def test_empty_data_file(tmp_path):
    _write_raw(tmp_path, [])
    ds = load_dataset(tmp_path, "train")
    assert len(ds) == 0


def test_missing_files(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        load_dataset(tmp_path, "train")
    _write_raw(tmp_path, [])
    (tmp_path / "train.jsonl").unlink()
    with pytest.raises(DatasetError, match="train.jsonl"):
        load_dataset(tmp_path, "train")


def test_feature_dim_mismatch_names_sample(tmp_path):
    rec = _record("odd", 1.0, dims={**DIMS, Modality.ACOUSTIC: (4, 7)})
    _write_raw(tmp_path, [rec])
    with pytest.raises(DatasetValidationError, match="odd"):
        load_dataset(tmp_path, "train")


def test_label_out_of_range(tmp_path):
    _write_raw(tmp_path, [_record("hi", 3.5)])
    with pytest.raises(DatasetValidationError, match="hi"):
        load_dataset(tmp_path, "train")


def test_pad_and_truncate(tmp_path):
    rng = np.random.default_rng(1)
    short = _record("short", 1.0, rng=rng, lengths={Modality.TEXT: 2})
    long = _record("long", -1.0, rng=rng, lengths={Modality.VISUAL: 9})
    _write_raw(tmp_path, [short, long])
    ds = load_dataset(tmp_path, "train")
    t = ds.samples[0].features[Modality.TEXT]
    assert t.shape == (4, 8)
    np.testing.assert_array_equal(t[:2], np.array(short["text"]))
    assert np.all(t[2:] == 0.0)
    v = ds.samples[1].features[Modality.VISUAL]
    np.testing.assert_array_equal(v, np.array(long["visual"])[:4])


def test_duplicate_ids_rejected(tmp_path):
    _write_raw(tmp_path, [_record("a", 1.0), _record("a", -1.0)])
    with pytest.raises(DatasetValidationError, match="duplicate"):
        load_dataset(tmp_path, "train")


def test_round_trip_synthetic(tmp_path):
    ds = generate_synthetic(10, DIMS, 1.0, seed=3)
    write_dataset(ds, tmp_path)
    assert load_dataset(tmp_path, "train").equals(ds)


def test_boundary_labels_and_unit_length(tmp_path):
    dims = {m: (1, 3) for m in MODALITIES}
    rng = np.random.default_rng(2)
    samples = [
        Sample(sid, {m: rng.standard_normal((1, 3)) for m in MODALITIES}, lab)
        for sid, lab in (("lo", -3.0), ("hi", 3.0), ("zero", 0.0))
    ]
    ds = Dataset("valid", samples, dims)
    write_dataset(ds, tmp_path)
    back = load_dataset(tmp_path, "valid")
    assert back.equals(ds)
    assert [s.label for s in back] == [-3.0, 3.0, 0.0]


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(0, 6),
    L=st.integers(1, 3),
    d=st.integers(1, 3),
    seed=st.integers(0, 10_000),
    scale=st.floats(1e-6, 1e6),
)
def test_round_trip_property(tmp_path_factory, n, L, d, seed, scale):
    dims = {m: (L, d + k) for k, m in enumerate(MODALITIES)}
    rng = np.random.default_rng(seed)
    samples = [
        Sample(f"x{i}", {m: rng.standard_normal(dims[m]) * scale for m in MODALITIES}, float(rng.uniform(-3, 3)))
        for i in range(n)
    ]
    ds = Dataset("test", samples, dims)
    path = tmp_path_factory.mktemp("rt")
    write_dataset(ds, path)
    back = load_dataset(path, "test")
    assert back.equals(ds)
    for s in back:
        s.validate(back.dims)


def test_generate_empty_and_deterministic():
    assert len(generate_synthetic(0, DIMS, 2.0, seed=1)) == 0
    a = generate_synthetic(15, DIMS, 2.0, seed=11)
    b = generate_synthetic(15, DIMS, 2.0, seed=11)
    c = generate_synthetic(15, DIMS, 2.0, seed=12)
    assert a.equals(b)
    assert not a.equals(c)


def test_generate_labels_avoid_dead_zone():
    labels = generate_synthetic(500, DIMS, 0.0, seed=4).labels
    assert np.all(np.abs(labels) >= 0.1)
    assert np.all(np.abs(labels) <= 3.0)
    assert (labels > 0).any() and (labels < 0).any()


def test_linear_probe_recovers_polarity():
    # Oracle: ordinary least squares on mean-pooled text features, threshold at 0.
    ds = generate_synthetic(200, DIMS, 2.0, seed=9)
    X = ds.stacked(Modality.TEXT).mean(axis=1)
    X = np.hstack([X, np.ones((len(X), 1))])
    y = ds.labels
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    acc = np.mean(np.sign(X @ coef) == np.sign(y))
    assert acc >= 0.95


def test_batch_sizes_examples():
    ds10 = generate_synthetic(10, DIMS, 1.0, seed=0)
    ds9 = generate_synthetic(9, DIMS, 1.0, seed=0)
    assert [len(b) for b in make_batches(ds10, 4)] == [4, 4, 2]
    assert [len(b) for b in make_batches(ds9, 4)] == [4, 5]
    assert [b.indices for b in make_batches(ds10, 4)][0] == [0, 1, 2, 3]


def test_batching_shuffle_deterministic():
    ds = generate_synthetic(13, DIMS, 1.0, seed=0)
    a = [b.indices for b in make_batches(ds, 4, shuffle_seed=5)]
    b = [b.indices for b in make_batches(ds, 4, shuffle_seed=5)]
    c = [b.indices for b in make_batches(ds, 4, shuffle_seed=6)]
    assert a == b and a != c


def test_batching_errors():
    ds1 = generate_synthetic(1, DIMS, 1.0, seed=0)
    ds5 = generate_synthetic(5, DIMS, 1.0, seed=0)
    with pytest.raises(ConfigurationError):
        make_batches(ds1, 4)
    with pytest.raises(ConfigurationError):
        make_batches(ds5, 1)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(2, 200), bs=st.integers(2, 40), seed=st.one_of(st.none(), st.integers(0, 99)))
def test_batching_partition(n, bs, seed):
    sizes = batch_sizes(n, bs)
    assert sum(sizes) == n
    assert all(s >= 2 for s in sizes)
    assert all(s <= bs + 1 for s in sizes)


def test_batching_partition_on_dataset():
    ds = generate_synthetic(23, DIMS, 1.0, seed=0)
    batches = make_batches(ds, 5, shuffle_seed=1)
    idx = [i for b in batches for i in b.indices]
    assert sorted(idx) == list(range(23))
    assert all(len(b) >= 2 for b in batches)
    for b in batches:
        assert [s.id for s in b.samples] == [ds.samples[i].id for i in b.indices]


def test_parse_dims_arg():
    assert parse_dims_arg("text=4x8,visual=4x6,acoustic=4x5") == DIMS
    assert parse_dims_arg("t=4x8,v=4x6,a=4x5") == DIMS
    with pytest.raises(ConfigurationError):
        parse_dims_arg("text=4x8")
