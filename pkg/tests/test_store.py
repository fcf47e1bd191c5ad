import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from trace_diag.errors import EmptyViewError, FormatError
from trace_diag.store import (
    ExampleFeatures,
    decode_tensor,
    encode_tensor,
    load_feature_set,
    pool_tokens,
    read_tensor,
    select_view,
    validate_feature_dir,
    view_groups,
    write_example,
    write_manifest,
    write_tensor,
)


def test_roundtrip_known_matrix(tmp_path):
    m = np.array([[1.0, -2.5, 3.25], [0.0, 1e-7, -1e30]], dtype=np.float32)
    write_tensor(tmp_path / "m.trcf", m)
    back = read_tensor(tmp_path / "m.trcf")
    assert back.dtype == np.float32
    assert back.tobytes() == m.tobytes()


def test_header_layout():
    blob = encode_tensor(np.zeros((2, 3), dtype=np.float32))
    magic, version, dtype, rank = struct.unpack_from("<4sHBB", blob)
    assert (magic, version, dtype, rank) == (b"TRCF", 1, 0, 2)
    assert struct.unpack_from("<2I", blob, 8) == (2, 3)
    assert len(blob) == 8 + 8 + 6 * 4


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=5),
                  elements=st.floats(width=32, allow_nan=False)))
def test_roundtrip_bit_exact(arr):
    assert decode_tensor(encode_tensor(arr)).tobytes() == arr.tobytes()


def test_empty_shape_rejected():
    with pytest.raises(FormatError):
        encode_tensor(np.zeros((0, 3), dtype=np.float32))


def test_truncated_payload_names_offset():
    blob = encode_tensor(np.ones((2, 3), dtype=np.float32))
    with pytest.raises(FormatError, match="offset"):
        decode_tensor(blob[:-1])


@pytest.mark.parametrize("patch", [b"XXXX", None])
def test_bad_magic_or_version(patch):
    blob = bytearray(encode_tensor(np.ones(3, dtype=np.float32)))
    if patch:
        blob[:4] = patch
    else:
        blob[4:6] = struct.pack("<H", 99)
    with pytest.raises(FormatError):
        decode_tensor(bytes(blob))


def test_trailing_bytes_rejected():
    with pytest.raises(FormatError):
        decode_tensor(encode_tensor(np.ones(3, dtype=np.float32)) + b"\0")


def test_missing_file_named(tmp_path):
    with pytest.raises(FormatError, match="nope.trcf"):
        read_tensor(tmp_path / "nope.trcf")


def _ef(groups=("text",) * 6 + ("query",) * 4, d=3):
    toks = np.arange(len(groups) * d, dtype=np.float32).reshape(len(groups), d)
    return ExampleFeatures("ex", "pre", toks, groups)


def test_select_view_counts_and_order():
    ef = _ef()
    text = select_view(ef, "text")
    assert text.shape == (6, 3)
    np.testing.assert_array_equal(text, ef.tokens[:6])
    assert select_view(ef, "mixed").shape == (10, 3)
    assert select_view(ef, "query").shape == (4, 3)
    assert view_groups(ef, "query") == ("query",) * 4


def test_mixed_is_union_of_groups():
    ef = _ef(groups=("text", "vision", "query", "other", "text"))
    assert select_view(ef, "mixed").shape[0] == 4


def test_query_view_on_text_only_record():
    with pytest.raises(EmptyViewError):
        select_view(_ef(groups=("text",) * 3), "query")


def test_pool_tokens_examples():
    np.testing.assert_array_equal(pool_tokens(np.array([[1.0, 1.0], [3.0, 3.0]])), [2.0, 2.0])
    np.testing.assert_array_equal(pool_tokens(np.array([[5.0, -1.0]])), [5.0, -1.0])
    row = np.array([0.5, 2.0, -3.0])
    np.testing.assert_allclose(pool_tokens(np.tile(row, (7, 1))), row)
    with pytest.raises(EmptyViewError):
        pool_tokens(np.zeros((0, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_pool_commutes_with_permutation(seed):
    r = np.random.default_rng(seed)
    ef = _ef()
    perm = r.permutation(6)
    m = select_view(ef, "text")
    np.testing.assert_allclose(pool_tokens(m[perm]), pool_tokens(m), atol=1e-6)


def test_pooled_must_match_tokens():
    ef = _ef()
    ExampleFeatures("ex", "pre", ef.tokens, ef.token_groups, pooled=ef.tokens.mean(axis=0))
    with pytest.raises(FormatError):
        ExampleFeatures("ex", "pre", ef.tokens, ef.token_groups, pooled=ef.tokens.mean(axis=0) + 1)


def test_group_length_mismatch():
    with pytest.raises(FormatError):
        ExampleFeatures("ex", "pre", np.zeros((3, 2), dtype=np.float32), ("text",) * 2)


def test_manifest_roundtrip(tmp_path):
    recs = []
    for i in range(3):
        ef = ExampleFeatures(f"e{i}", "pre", np.full((4, 2), i, dtype=np.float32), ("text", "text", "query", "query"))
        recs.append(write_example(tmp_path, ef, labels={"edited_slot": "tl"}, split_group_id=f"g{i}"))
    write_manifest(tmp_path / "manifest.jsonl", recs)
    fs = load_feature_set(tmp_path / "manifest.jsonl")
    assert fs.example_ids("pre") == ["e0", "e1", "e2"]
    assert fs.record("pre", "e1").split_group_id == "g1"
    np.testing.assert_array_equal(fs.pooled_matrix("pre", "query")[:, 0], [0, 1, 2])
    summary = validate_feature_dir(tmp_path / "manifest.jsonl")
    assert summary["stages"]["pre"] == {"n_examples": 3, "d": 2}
    line = json.loads((tmp_path / "manifest.jsonl").read_text().splitlines()[0])
    assert line["pooling"] == "mean"
    assert sorted(line["views"]) == ["mixed", "query", "text"]


def test_manifest_missing_tensor(tmp_path):
    ef = ExampleFeatures("e0", "pre", np.ones((2, 2), dtype=np.float32), ("text", "query"))
    rec = write_example(tmp_path, ef)
    write_manifest(tmp_path / "manifest.jsonl", [rec])
    (tmp_path / rec.tensor).unlink()
    with pytest.raises(FormatError, match="not found"):
        load_feature_set(tmp_path / "manifest.jsonl")
