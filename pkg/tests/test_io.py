import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from completion_moment.errors import FormatError, ResolutionError
from completion_moment.features import FrameClassifier
from completion_moment.io import (
    ManifestRecord,
    decode_classifier,
    decode_matrix,
    decode_model,
    encode_classifier,
    encode_matrix,
    encode_model,
    load_dataset,
    load_model,
    parse_manifest_line,
    read_features,
    read_manifest,
    read_raw,
    resolve_paths,
    save_model,
    write_features,
    write_manifest,
    write_raw,
)
from completion_moment.model import PARAM_NAMES, SUPERVISED, LOG, ModelParams


def test_feature_round_trip(tmp_path):
    m = np.random.default_rng(0).standard_normal((7, 3)).astype(np.float32)
    write_features(tmp_path / "a.cmft", m)
    back = read_features(tmp_path / "a.cmft")
    assert back.dtype == np.float32 and np.array_equal(back, m)
    data = (tmp_path / "a.cmft").read_bytes()
    assert data[:4] == b"CMFT" and struct.unpack("<III", data[4:16]) == (1, 7, 3) and len(data) == 16 + 84
    write_features(tmp_path / "b.cmft", back)
    assert (tmp_path / "b.cmft").read_bytes() == data


@given(arrays(np.float32, st.tuples(st.integers(1, 12), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_matrix_bytes_round_trip(m):
    data = encode_matrix(m)
    assert encode_matrix(decode_matrix(data)) == data


def test_raw_files_use_their_own_magic(tmp_path):
    write_raw(tmp_path / "r.cmrw", np.ones((2, 2)))
    assert (tmp_path / "r.cmrw").read_bytes()[:4] == b"CMRW"
    with pytest.raises(FormatError, match="CMFT"):
        read_features(tmp_path / "r.cmrw")
    assert np.array_equal(read_raw(tmp_path / "r.cmrw"), np.ones((2, 2)))


def test_format_errors_carry_offsets():
    good = encode_matrix(np.ones((3, 2), np.float32))
    with pytest.raises(FormatError, match="expected 'CMFT'") as e:
        decode_matrix(b"XXXX" + good[4:])
    assert e.value.offset == 0
    with pytest.raises(FormatError, match="version") as e:
        decode_matrix(good[:4] + struct.pack("<I", 2) + good[8:])
    assert e.value.offset == 4
    with pytest.raises(FormatError) as e:
        decode_matrix(good[:-1])
    assert e.value.offset == 16
    with pytest.raises(FormatError, match="trailing"):
        decode_matrix(good + b"\0")
    with pytest.raises(FormatError):
        decode_matrix(good[:10])
    huge = b"CMFT" + struct.pack("<III", 1, 2**32 - 1, 2**32 - 1)
    with pytest.raises(FormatError, match="needs"):
        decode_matrix(huge)


# --- manifests -------------------------------------------------------------

def _records():
    return [ManifestRecord("a", "walk", 1, 4, "a.cmft"), ManifestRecord("b", "walk", 0, None, "sub/b.cmft")]


def test_manifest_round_trip(tmp_path):
    write_manifest(tmp_path / "m.jsonl", _records())
    first = (tmp_path / "m.jsonl").read_bytes()
    assert read_manifest(tmp_path / "m.jsonl") == _records()
    write_manifest(tmp_path / "m2.jsonl", read_manifest(tmp_path / "m.jsonl"))
    assert (tmp_path / "m2.jsonl").read_bytes() == first
    line = json.loads(first.decode().splitlines()[1])
    assert list(line) == ["id", "action", "label", "tau", "features"] and line["label"] == "incomplete"


@pytest.mark.parametrize("line", [
    "not json", "[1]", '{"id": "a"}',
    '{"id": "a", "action": "x", "label": "done", "tau": null, "features": "f"}',
    '{"id": "a", "action": "x", "label": "complete", "tau": 0, "features": "f"}',
    '{"id": "a", "action": "x", "label": "incomplete", "tau": 3, "features": "f"}',
    '{"id": "", "action": "x", "label": "complete", "tau": null, "features": "f"}',
    '{"id": "a", "action": "x", "label": "complete", "tau": true, "features": "f"}',
])
def test_bad_manifest_lines(line):
    with pytest.raises(FormatError):
        parse_manifest_line(line, 1)


def test_manifest_level_errors(tmp_path):
    (tmp_path / "empty.jsonl").write_text("\n")
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "empty.jsonl")
    write_manifest(tmp_path / "dup.jsonl", _records() + [_records()[0]])
    with pytest.raises(FormatError, match="unique"):
        read_manifest(tmp_path / "dup.jsonl")


def test_missing_files_listed(tmp_path):
    write_manifest(tmp_path / "m.jsonl", _records())
    write_features(tmp_path / "a.cmft", np.zeros((5, 2)))
    with pytest.raises(ResolutionError) as e:
        resolve_paths(tmp_path / "m.jsonl", _records())
    assert e.value.missing == ["b"] and "b" in str(e.value)


def test_load_dataset(tmp_path):
    write_manifest(tmp_path / "m.jsonl", _records())
    write_features(tmp_path / "a.cmft", np.ones((5, 2)))
    (tmp_path / "sub").mkdir()
    write_features(tmp_path / "sub" / "b.cmft", np.zeros((6, 2)))
    seqs = load_dataset(tmp_path / "m.jsonl")
    assert [s.id for s in seqs] == ["a", "b"] and seqs[0].tau == 4 and seqs[1].length == 6
    assert seqs[0].features.dtype == np.float64


# --- checkpoints -----------------------------------------------------------

def test_model_round_trip(tmp_path):
    p = ModelParams.initialize(3, 4, 9, np.random.default_rng(0), SUPERVISED, LOG)
    save_model(tmp_path / "m.cmck", p)
    q = load_model(tmp_path / "m.cmck")
    assert (q.d_feat, q.hidden, q.length, q.mode, q.loss_variant) == (3, 4, 9, SUPERVISED, LOG)
    assert all(np.array_equal(p.tensors[n], q.tensors[n]) and p.tensors[n].shape == q.tensors[n].shape
               for n in PARAM_NAMES)
    assert encode_model(q) == (tmp_path / "m.cmck").read_bytes()
    data = encode_model(p)
    assert data[:4] == b"CMCK" and struct.unpack("<II", data[4:12]) == (1, 5)
    assert struct.unpack("<5I", data[12:32]) == (3, 4, 9, 1, 1)


def test_model_format_errors():
    data = encode_model(ModelParams.initialize(2, 2, 3, np.random.default_rng(1)))
    with pytest.raises(FormatError, match="CMCK"):
        decode_model(b"CMFT" + data[4:])
    with pytest.raises(FormatError):
        decode_model(data[:-3])
    bad_meta = data[:24] + struct.pack("<I", 7) + data[28:]
    with pytest.raises(FormatError, match="metadata"):
        decode_model(bad_meta)


def test_classifier_round_trip():
    c = FrameClassifier.initialize(3, 5, np.random.default_rng(2))
    c.head_w[...] = 0.25
    data = encode_classifier(c)
    back = decode_classifier(data)
    assert data[:4] == b"CMFC" and encode_classifier(back) == data
    assert all(np.array_equal(c.tensors()[k], back.tensors()[k]) for k in FrameClassifier.TENSORS)
    with pytest.raises(FormatError):
        decode_classifier(data[:12] + struct.pack("<I", 9) + data[16:])
