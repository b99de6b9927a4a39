import hashlib
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from saesteer.io import (
    MAGIC,
    ActivationDataset,
    CorruptDescriptorError,
    DuplicateNameError,
    ResultStore,
    ShapeMismatchError,
    UnknownVersionError,
    load_dataset,
    read_container,
    save_dataset,
    stream_batches,
    write_container,
)


def _raw_container(path, entries, payload: bytes, version=1):
    desc = json.dumps({"tensors": entries, "meta": {}}).encode()
    path.write_bytes(struct.pack("<8sIQ", MAGIC, version, len(desc)) + desc + payload)


def test_zero_vector_round_trip(tmp_path):
    p = tmp_path / "b.saet"
    write_container(p, {"b": np.zeros(2)})
    out = read_container(p)
    assert out["b"].shape == (2,)
    assert np.array_equal(out["b"], [0.0, 0.0])


def test_matrix_round_trip(tmp_path):
    p = tmp_path / "w.saet"
    W = np.arange(6, dtype=float).reshape(2, 3) / 7
    write_container(p, {"W": W})
    assert np.array_equal(read_container(p)["W"], W)


names = st.text(alphabet="abcdefghij._", min_size=1, max_size=8)
arrays = hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=5),
                    elements=st.floats(allow_nan=False, width=64))


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(names, arrays, max_size=5))
def test_round_trip_property(tmp_path_factory, tensors):
    p = tmp_path_factory.mktemp("rt") / "c.saet"
    write_container(p, tensors, meta={"note": "x"})
    out, meta = read_container(p, with_meta=True)
    assert meta == {"note": "x"}
    assert set(out) == set(tensors)
    for k, v in tensors.items():
        assert out[k].shape == v.shape
        assert out[k].tobytes() == v.astype("<f8").tobytes()


def test_large_matrix_bit_identical_with_independent_checksum(tmp_path):
    rng = np.random.default_rng(2024)
    M = rng.normal(size=(16384, 2304))
    # checksum of the little-endian row-major float64 bytes, taken before writing
    expected = hashlib.sha256(M.astype("<f8").tobytes(order="C")).hexdigest()
    p = tmp_path / "big.saet"
    write_container(p, {"M": M})
    data = p.read_bytes()
    _, _, dlen = struct.unpack_from("<8sIQ", data)
    payload = data[struct.calcsize("<8sIQ") + dlen:]
    assert hashlib.sha256(payload).hexdigest() == expected
    back = read_container(p)["M"]
    assert back.tobytes() == M.tobytes()
    del back, M


def test_duplicate_name_rejected_on_write(tmp_path):
    with pytest.raises(DuplicateNameError):
        write_container(tmp_path / "d.saet", [("a", np.zeros(1)), ("a", np.ones(1))])


def test_truncated_payload(tmp_path):
    p = tmp_path / "t.saet"
    write_container(p, {"a": np.arange(10.0)})
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ShapeMismatchError):
        read_container(p)


def test_overlapping_offsets(tmp_path):
    p = tmp_path / "o.saet"
    entries = [{"name": "a", "shape": [2], "offset": 0}, {"name": "b", "shape": [2], "offset": 8}]
    _raw_container(p, entries, np.zeros(3).tobytes())
    with pytest.raises(CorruptDescriptorError):
        read_container(p)


def test_duplicate_name_in_descriptor(tmp_path):
    p = tmp_path / "dd.saet"
    entries = [{"name": "a", "shape": [1], "offset": 0}, {"name": "a", "shape": [1], "offset": 8}]
    _raw_container(p, entries, np.zeros(2).tobytes())
    with pytest.raises(CorruptDescriptorError):
        read_container(p)


def test_garbage_descriptor(tmp_path):
    p = tmp_path / "g.saet"
    desc = b"{not json"
    p.write_bytes(struct.pack("<8sIQ", MAGIC, 1, len(desc)) + desc)
    with pytest.raises(CorruptDescriptorError):
        read_container(p)


def test_unknown_version(tmp_path):
    p = tmp_path / "v.saet"
    _raw_container(p, [], b"", version=99)
    with pytest.raises(UnknownVersionError):
        read_container(p)


def _rows(n):
    return ActivationDataset("m", 0, np.arange(n), np.arange(n, dtype=float)[:, None],
                             np.zeros(n, bool), np.zeros(n, int))


def test_stream_partition():
    batches = list(stream_batches(_rows(10), 5, seed=7))
    assert len(batches) == 2
    seen = np.concatenate(batches).ravel()
    assert sorted(seen.tolist()) == list(range(10))


def test_stream_determinism():
    a = [b.tolist() for b in stream_batches(_rows(10), 3, seed=1)]
    b = [b.tolist() for b in stream_batches(_rows(10), 3, seed=1)]
    assert a == b


def test_stream_last_batch_short():
    sizes = [len(b) for b in stream_batches(_rows(10), 3, seed=0)]
    assert sizes == [3, 3, 3, 1]


def test_stream_skips_masked_rows():
    ds = _rows(6)
    ds.special_mask[[0, 3]] = True
    seen = np.concatenate(list(stream_batches(ds, 2, seed=0))).ravel()
    assert sorted(seen.tolist()) == [1.0, 2.0, 4.0, 5.0]


def test_dataset_round_trip(tmp_path):
    ds = _rows(5)
    ds.special_mask[0] = True
    save_dataset(tmp_path / "ds.saet", ds)
    back = load_dataset(tmp_path / "ds.saet")
    assert back.model_id == "m" and back.layer == 0
    assert np.array_equal(back.tokens, ds.tokens)
    assert np.array_equal(back.special_mask, ds.special_mask)
    assert np.array_equal(back.activations, ds.activations)


def test_result_store_uniqueness_and_reload(tmp_path):
    path = tmp_path / "r.jsonl"
    s = ResultStore(path)
    s.append({"kind": "sae", "run_id": "a", "x": 1})
    with pytest.raises(ValueError):
        s.append({"kind": "sae", "run_id": "a", "x": 2})
    s.append({"kind": "interp", "run_id": "a", "x": 3})
    again = ResultStore(path)
    assert len(again) == 2
    assert again.get("interp", "a")["x"] == 3
    assert again.has("sae", "a") and not again.has("sae", "b")


def test_result_store_discard(tmp_path):
    path = tmp_path / "r.jsonl"
    s = ResultStore(path)
    s.append({"kind": "sae", "run_id": "a"})
    s.append({"kind": "sae", "run_id": "b"})
    assert s.discard("sae", "a")
    assert not s.discard("sae", "a")
    assert [r["run_id"] for r in ResultStore(path).records()] == ["b"]
    s.append({"kind": "sae", "run_id": "a"})


def test_result_store_rejects_nan(tmp_path):
    s = ResultStore(tmp_path / "r.jsonl")
    with pytest.raises(ValueError):
        s.append({"kind": "k", "run_id": "x", "v": float("nan")})
