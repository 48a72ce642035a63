import threading
import uuid

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from p2pfaas.core import Batch
from p2pfaas.dataset import (
    Dataset,
    DatasetSpec,
    ObjectStore,
    decode_batch,
    encode_batch,
    generate,
    load_batch,
    partition_and_batch,
    store_batches,
)
from p2pfaas.errors import ConfigError, DecodeError, IngestionError, NotFoundError, StoreError


def _tiny(n, d=2, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    y = np.arange(n) % 2
    return Dataset(x, y, x[:2], y[:2], 2)


def test_generate_is_deterministic():
    spec = DatasetSpec(classes=2, features=2, samples=1000, separation=3.0, seed=1)
    a, b = generate(spec), generate(spec)
    for name in ("x_train", "y_train", "x_val", "y_val"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_split_is_90_10():
    d = generate(DatasetSpec(samples=1000, seed=3))
    assert (d.n_train, d.y_val.size) == (900, 100)


def test_min_max_columns():
    d = generate(DatasetSpec(samples=500, features=3, preprocessing="min-max", seed=2))
    x = np.concatenate([d.x_train, d.x_val])
    np.testing.assert_allclose(x.min(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(x.max(axis=0), 1.0, atol=1e-12)


def test_standardize_moments():
    d = generate(DatasetSpec(samples=10_000, features=4, classes=3, preprocessing="standardize", seed=5))
    x = np.concatenate([d.x_train, d.x_val])
    # recompute moments with an independent two-pass sum in extended precision
    xl = x.astype(np.longdouble)
    mu = xl.sum(axis=0) / len(x)
    var = ((xl - mu) ** 2).sum(axis=0) / len(x)
    assert np.all(np.abs(mu) < 1e-9)
    assert np.all(np.abs(var - 1) < 1e-9)


def test_invalid_spec():
    with pytest.raises(ConfigError):
        DatasetSpec(preprocessing="whiten")


def test_csv_ingestion(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,label\n0.5,1.0,0\n1.5,-2.0,1\n" + "".join(f"{i},{i},{i % 2}\n" for i in range(20)))
    d = generate(DatasetSpec(kind="csv", path=str(p), preprocessing="none"))
    assert d.feature_dim == 2 and d.n_train + d.y_val.size == 22


def test_csv_bad_row_reports_row_number(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,label\n1,0\n2,1\nx,0\n")
    with pytest.raises(IngestionError) as exc:
        generate(DatasetSpec(kind="csv", path=str(p)))
    assert exc.value.row == 4


def test_csv_missing_file(tmp_path):
    with pytest.raises(IngestionError):
        generate(DatasetSpec(kind="csv", path=str(tmp_path / "nope.csv")))


def test_partition_even_split():
    parts = partition_and_batch(_tiny(120), P=4, B=10, epoch=1)
    assert [p.size for p in parts] == [30] * 4
    assert all(len(p.batches) == 3 for p in parts)


def test_single_peer_gets_everything():
    data = _tiny(50)
    (part,) = partition_and_batch(data, P=1, B=7, epoch=2)
    assert sorted(part.indices.tolist()) == list(range(50))
    assert sum(len(b) for b in part.batches) == 50


def test_uneven_last_batch():
    parts = partition_and_batch(_tiny(100), P=4, B=8, epoch=0)
    for p in parts:
        assert [len(b) for b in p.batches] == [8, 8, 8, 1]
        assert [b.batch_id for b in p.batches] == [0, 1, 2, 3]


def test_more_peers_than_samples():
    with pytest.raises(ConfigError):
        partition_and_batch(_tiny(3), P=4, B=1, epoch=0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 300), st.integers(1, 12), st.integers(1, 40), st.integers(0, 50))
def test_partition_coverage_and_balance(n, P, B, epoch):
    if P > n:
        return
    parts = partition_and_batch(_tiny(n), P, B, epoch, seed=9)
    idx = np.concatenate([p.indices for p in parts])
    assert sorted(idx.tolist()) == list(range(n))
    sizes = [p.size for p in parts]
    assert max(sizes) - min(sizes) <= 1
    for p in parts:
        # batches really hold the rows named by the partition's indices
        rows = np.concatenate([b.features for b in p.batches])
        np.testing.assert_array_equal(rows, _tiny(n).x_train[p.indices])


def test_epochs_shuffle_differently():
    data = _tiny(40)
    for e in range(5):
        a = partition_and_batch(data, 2, 8, e)[0].indices
        b = partition_and_batch(data, 2, 8, e + 1)[0].indices
        assert a.tolist() != b.tolist()


def test_store_round_trip(store):
    part = partition_and_batch(_tiny(37), P=1, B=10, epoch=0)[0]
    manifest = store_batches(store, part)
    assert len(manifest) == len(part.batches) == 4
    assert len({k for _, k in manifest}) == 4
    for (bid, key), batch in zip(manifest, part.batches):
        uuid.UUID(key)
        back = load_batch(store, key)
        assert back.batch_id == bid
        assert back.features.tobytes() == batch.features.tobytes()
        assert back.labels.tolist() == batch.labels.tolist()


def test_unknown_key(store):
    with pytest.raises(NotFoundError):
        load_batch(store, str(uuid.uuid4()))


def test_truncated_blob_is_a_decode_error(store):
    blob = encode_batch(Batch(np.ones((3, 2)), [0, 1, 0], 5))
    key = store.put(blob[:-1])
    with pytest.raises(DecodeError):
        load_batch(store, key)
    with pytest.raises(DecodeError):
        decode_batch(blob[:5])


def test_blob_layout():
    blob = encode_batch(Batch(np.ones((3, 2)), [0, 1, 0], 5))
    assert len(blob) == 12 + 3 * 2 * 8 + 3 * 4
    assert blob[:12] == (5).to_bytes(4, "little") + (3).to_bytes(4, "little") + (2).to_bytes(4, "little")


def test_put_never_overwrites_different_blob(store):
    key = store.put(b"abc")
    assert store.put(b"abc", key) == key
    with pytest.raises(StoreError):
        store.put(b"xyz", key)
    assert store.get(key) == b"abc"


def test_store_concurrent_put_get(tmp_path):
    s = ObjectStore(tmp_path / "s")
    errors = []

    def worker(i):
        try:
            for j in range(30):
                data = f"{i}-{j}".encode() * (j + 1)
                k = s.put(data)
                assert s.get(k) == data
        except Exception as e:  # pragma: no cover - surfaced by assert below
            errors.append(e)

    ts = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert not errors
    assert len(s) == 240
