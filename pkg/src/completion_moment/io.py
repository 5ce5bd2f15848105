"""Binary feature files, JSON-lines manifests and checkpoints (all little-endian).

Feature / raw file::

    magic(4) "CMFT" | "CMRW", u32 version = 1, u32 T, u32 D, T*D float32 row-major

Checkpoint::

    magic(4), u32 version, u32 n_meta, n_meta x u32 metadata, u32 n_tensors,
    then per tensor: u32 name_len, name (utf-8), u32 rows, u32 cols, rows*cols float64

Model checkpoints use magic "CMCK" with metadata (D_feat, H, L, mode, loss
variant); frame-classifier checkpoints use "CMFC" with (D_raw, D_feat).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ResolutionError
from .features import FrameClassifier
from .model import MODES, PARAM_NAMES, VARIANTS, ModelParams

FEATURE_MAGIC = b"CMFT"
RAW_MAGIC = b"CMRW"
MODEL_MAGIC = b"CMCK"
CLASSIFIER_MAGIC = b"CMFC"
VERSION = 1
_U32 = struct.Struct("<I")
_MAX_U32 = 2 ** 32 - 1


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.path, self.pos = data, path, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file: needed {n} bytes for {what}, {len(self.data) - self.pos} left",
                              self.path, self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def magic(self, expected: bytes):
        got = self.take(4, "magic")
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected.decode()!r}", self.path, 0)

    def version(self):
        at = self.pos
        v = self.u32("version")
        if v != VERSION:
            raise FormatError(f"unsupported version {v}, expected {VERSION}", self.path, at)

    def end(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes", self.path, self.pos)


# ---------------------------------------------------------------------------
# Feature and raw files
# ---------------------------------------------------------------------------

def encode_matrix(matrix, magic: bytes = FEATURE_MAGIC) -> bytes:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValueError(f"expected a T x D matrix, got shape {m.shape}")
    T, D = m.shape
    if T > _MAX_U32 or D > _MAX_U32:
        raise ValueError("matrix too large for the u32 header")
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    return magic + _U32.pack(VERSION) + _U32.pack(T) + _U32.pack(D) + payload


def decode_matrix(data: bytes, magic: bytes = FEATURE_MAGIC, path=None) -> np.ndarray:
    r = _Reader(data, path)
    r.magic(magic)
    r.version()
    T = r.u32("T")
    D = r.u32("D")
    at = r.pos
    nbytes = T * D * 4
    if nbytes > len(data) - at:
        raise FormatError(f"payload of {T}x{D} float32 needs {nbytes} bytes, file has {len(data) - at}", path, at)
    out = np.frombuffer(r.take(nbytes, "payload"), dtype="<f4").reshape(T, D)
    r.end()
    return out.astype(np.float32)


def write_matrix(path, matrix, magic: bytes = FEATURE_MAGIC) -> None:
    Path(path).write_bytes(encode_matrix(matrix, magic))


def read_matrix(path, magic: bytes = FEATURE_MAGIC) -> np.ndarray:
    return decode_matrix(Path(path).read_bytes(), magic, path)


def write_features(path, features) -> None:
    write_matrix(path, features, FEATURE_MAGIC)


def read_features(path) -> np.ndarray:
    return read_matrix(path, FEATURE_MAGIC)


def write_raw(path, frames) -> None:
    write_matrix(path, frames, RAW_MAGIC)


def read_raw(path) -> np.ndarray:
    return read_matrix(path, RAW_MAGIC)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

LABELS = {"complete": 1, "incomplete": 0}
LABEL_NAMES = {v: k for k, v in LABELS.items()}


@dataclass
class ManifestRecord:
    id: str
    action: str
    label: int
    tau: int | None
    features: str

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "action": self.action, "label": LABEL_NAMES[self.label],
                           "tau": self.tau, "features": self.features}, ensure_ascii=False)


def parse_manifest_line(line: str, lineno: int = 0, path=None) -> ManifestRecord:
    where = f"{path or 'manifest'}:{lineno}"
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{where}: invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: expected an object")
    keys = {"id", "action", "label", "tau", "features"}
    if set(obj) != keys:
        raise FormatError(f"{where}: keys must be {sorted(keys)}, got {sorted(obj)}")
    if obj["label"] not in LABELS:
        raise FormatError(f"{where}: label must be 'complete' or 'incomplete'")
    tau = obj["tau"]
    if tau is not None and (not isinstance(tau, int) or isinstance(tau, bool) or tau < 1):
        raise FormatError(f"{where}: tau must be a positive integer or null")
    if tau is not None and obj["label"] != "complete":
        raise FormatError(f"{where}: incomplete sequences cannot carry tau")
    for k in ("id", "action", "features"):
        if not isinstance(obj[k], str) or not obj[k]:
            raise FormatError(f"{where}: {k} must be a non-empty string")
    return ManifestRecord(obj["id"], obj["action"], LABELS[obj["label"]], tau, obj["features"])


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                records.append(parse_manifest_line(line, lineno, path))
    if not records:
        raise FormatError("manifest has no records", path)
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise FormatError("manifest ids are not unique", path)
    return records


def write_manifest(path, records: Iterable[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def resolve_paths(manifest_path, records: Sequence[ManifestRecord]) -> list[Path]:
    """Absolute file path for every record; relative paths are taken from the manifest's directory."""
    base = Path(manifest_path).resolve().parent
    paths = [(base / r.features) for r in records]
    missing = [r.id for r, p in zip(records, paths) if not p.is_file()]
    if missing:
        raise ResolutionError(missing)
    return paths


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def encode_bundle(magic: bytes, meta: Sequence[int], tensors: dict[str, np.ndarray]) -> bytes:
    parts = [magic, _U32.pack(VERSION), _U32.pack(len(meta)), *(_U32.pack(int(m)) for m in meta),
             _U32.pack(len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ValueError(f"tensor {name!r} must be 1-D or 2-D")
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.shape[0]), _U32.pack(arr.shape[1]),
                  np.ascontiguousarray(arr, dtype="<f8").tobytes()]
    return b"".join(parts)


def decode_bundle(data: bytes, magic: bytes, path=None) -> tuple[list[int], dict[str, np.ndarray]]:
    r = _Reader(data, path)
    r.magic(magic)
    r.version()
    meta = [r.u32(f"metadata[{i}]") for i in range(r.u32("metadata count"))]
    tensors = {}
    for i in range(r.u32("tensor count")):
        at = r.pos
        try:
            name = r.take(r.u32("name length"), "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor {i} name is not utf-8", path, at) from exc
        rows, cols = r.u32("rows"), r.u32("cols")
        at = r.pos
        if rows * cols * 8 > len(data) - at:
            raise FormatError(f"tensor {name!r} of {rows}x{cols} float64 overruns the file", path, at)
        tensors[name] = np.frombuffer(r.take(rows * cols * 8, name), dtype="<f8").reshape(rows, cols).astype(np.float64)
    r.end()
    return meta, tensors


def encode_model(p: ModelParams) -> bytes:
    meta = [p.d_feat, p.hidden, p.length, MODES.index(p.mode), VARIANTS.index(p.loss_variant)]
    return encode_bundle(MODEL_MAGIC, meta, {n: p.tensors[n] for n in PARAM_NAMES})


def decode_model(data: bytes, path=None) -> ModelParams:
    meta, tensors = decode_bundle(data, MODEL_MAGIC, path)
    if len(meta) != 5 or meta[3] >= len(MODES) or meta[4] >= len(VARIANTS):
        raise FormatError(f"bad model metadata {meta}", path, 12)
    d_feat, hidden, length, mode, variant = meta
    fixed = {}
    for name, arr in tensors.items():
        fixed[name] = arr[0] if name.endswith(("biases", "proj_b")) else arr
    return ModelParams(fixed, d_feat, hidden, length, MODES[mode], VARIANTS[variant])


def save_model(path, p: ModelParams) -> None:
    Path(path).write_bytes(encode_model(p))


def load_model(path) -> ModelParams:
    return decode_model(Path(path).read_bytes(), path)


def encode_classifier(c: FrameClassifier) -> bytes:
    return encode_bundle(CLASSIFIER_MAGIC, [c.d_raw, c.d_feat], c.tensors())


def decode_classifier(data: bytes, path=None) -> FrameClassifier:
    meta, tensors = decode_bundle(data, CLASSIFIER_MAGIC, path)
    if set(tensors) != set(FrameClassifier.TENSORS):
        raise FormatError(f"classifier tensors {sorted(tensors)} do not match", path)
    c = FrameClassifier(tensors["hidden_w"], tensors["hidden_b"][0], tensors["head_w"], tensors["head_b"][0])
    if meta != [c.d_raw, c.d_feat]:
        raise FormatError(f"classifier metadata {meta} disagrees with tensor shapes", path, 12)
    return c


def save_classifier(path, c: FrameClassifier) -> None:
    Path(path).write_bytes(encode_classifier(c))


def load_classifier(path) -> FrameClassifier:
    return decode_classifier(Path(path).read_bytes(), path)


def load_dataset(manifest_path) -> list:
    """Labeled feature sequences for every manifest record, in manifest order."""
    from .features import LabeledSequence

    records = read_manifest(manifest_path)
    paths = resolve_paths(manifest_path, records)
    return [
        LabeledSequence(read_features(p).astype(np.float64), r.label, r.id, r.action, r.tau)
        for r, p in zip(records, paths)
    ]
