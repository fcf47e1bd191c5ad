"""Feature storage: the ``.trcf`` tensor container, per-example token features,
views over token groups, and the JSON-lines manifest that binds them together.

Container layout (little-endian)::

    0   4s   magic b"TRCF"
    4   u16  version (1)
    6   u8   dtype code (0 = float32)
    7   u8   rank
    8   u32 * rank  shape
    ..  payload, row-major float32
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyViewError, FormatError

MAGIC = b"TRCF"
VERSION = 1
DTYPES = {0: np.dtype("<f4")}
DTYPE_CODES = {np.dtype("float32"): 0}
_HEADER = struct.Struct("<4sHBB")

TOKEN_GROUPS = ("text", "query", "vision", "other")
VIEWS = {
    "mixed": frozenset({"text", "query", "vision"}),
    "text": frozenset({"text"}),
    "query": frozenset({"query"}),
}
POOLING_METHODS = ("mean",)


def encode_tensor(tensor: np.ndarray) -> bytes:
    arr = np.asarray(tensor)
    if arr.ndim == 0 or arr.ndim > 255:
        raise FormatError(f"tensor rank must be in 1..255, got {arr.ndim}")
    if any(s == 0 for s in arr.shape):
        raise FormatError(f"tensor shape must be nonzero, got {arr.shape}")
    if arr.dtype != np.float32:
        raise FormatError(f"only float32 tensors are supported, got {arr.dtype}")
    header = _HEADER.pack(MAGIC, VERSION, 0, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < _HEADER.size:
        raise FormatError(f"{source}: truncated header at offset {len(data)} (need {_HEADER.size} bytes)")
    magic, version, dtype_code, rank = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version} at offset 4")
    if dtype_code not in DTYPES:
        raise FormatError(f"{source}: unknown dtype code {dtype_code} at offset 6")
    if rank == 0:
        raise FormatError(f"{source}: rank 0 at offset 7")
    off = _HEADER.size
    if len(data) < off + 4 * rank:
        raise FormatError(f"{source}: truncated shape at offset {len(data)}")
    shape = struct.unpack_from(f"<{rank}I", data, off)
    off += 4 * rank
    if any(s == 0 for s in shape):
        raise FormatError(f"{source}: zero-length dimension in shape {shape} at offset 8")
    dtype = DTYPES[dtype_code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) - off < expected:
        raise FormatError(
            f"{source}: truncated payload at offset {len(data)}; expected {expected} bytes from offset {off}"
        )
    if len(data) - off > expected:
        raise FormatError(f"{source}: {len(data) - off - expected} trailing bytes at offset {off + expected}")
    return np.frombuffer(data, dtype=dtype, count=expected // dtype.itemsize, offset=off).reshape(shape).astype(np.float32)


def write_tensor(path: str | Path, tensor: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(tensor))


def read_tensor(path: str | Path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"tensor file not found: {path}") from exc
    return decode_tensor(data, source=str(path))


def pool_tokens(matrix: np.ndarray, method: str = "mean") -> np.ndarray:
    matrix = np.asarray(matrix)
    if method not in POOLING_METHODS:
        raise ValueError(f"unknown pooling method {method!r}")
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise EmptyViewError("cannot pool an empty token matrix")
    return matrix.mean(axis=0)


@dataclass
class ExampleFeatures:
    example_id: str
    stage: str
    tokens: np.ndarray
    token_groups: tuple[str, ...]
    pooled: np.ndarray | None = None

    def __post_init__(self):
        if self.stage not in ("pre", "post"):
            raise FormatError(f"{self.example_id}: stage must be pre or post, got {self.stage!r}")
        if self.tokens.ndim != 2:
            raise FormatError(f"{self.example_id}: tokens must be a T x d matrix, got shape {self.tokens.shape}")
        self.token_groups = tuple(self.token_groups)
        if len(self.token_groups) != self.tokens.shape[0]:
            raise FormatError(
                f"{self.example_id}: {len(self.token_groups)} group tags for {self.tokens.shape[0]} tokens"
            )
        bad = set(self.token_groups) - set(TOKEN_GROUPS)
        if bad:
            raise FormatError(f"{self.example_id}: unknown token groups {sorted(bad)}")
        if self.pooled is not None:
            expect = pool_tokens(self.tokens[self.view_mask("mixed")])
            if self.pooled.shape != expect.shape or not np.allclose(self.pooled, expect, rtol=0, atol=1e-6):
                raise FormatError(f"{self.example_id}: stored pooled vector disagrees with mean pooling")

    def view_mask(self, view: str) -> np.ndarray:
        if view not in VIEWS:
            raise ValueError(f"unknown view {view!r}; expected one of {sorted(VIEWS)}")
        allowed = VIEWS[view]
        return np.array([g in allowed for g in self.token_groups], dtype=bool)

    def available_views(self) -> list[str]:
        return [v for v in VIEWS if self.view_mask(v).any()]


def select_view(ef: ExampleFeatures, view: str) -> np.ndarray:
    mask = ef.view_mask(view)
    if not mask.any():
        raise EmptyViewError(f"{ef.example_id}: view {view!r} has no tokens")
    return ef.tokens[mask]


def view_groups(ef: ExampleFeatures, view: str) -> tuple[str, ...]:
    mask = ef.view_mask(view)
    return tuple(g for g, m in zip(ef.token_groups, mask) if m)


@dataclass
class ManifestRecord:
    example_id: str
    stage: str
    tensor: str
    groups: str
    views: list[str] = field(default_factory=list)
    pooling: str = "mean"
    split_group_id: str | None = None
    labels: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "example_id": self.example_id,
            "stage": self.stage,
            "tensor": self.tensor,
            "groups": self.groups,
            "views": list(self.views),
            "pooling": self.pooling,
            "split_group_id": self.split_group_id,
            "labels": dict(self.labels),
        }


def write_example(root: str | Path, ef: ExampleFeatures, labels: dict | None = None,
                  split_group_id: str | None = None) -> ManifestRecord:
    """Write one example's token tensor and group sidecar under ``root``."""
    root = Path(root)
    sub = root / ef.stage
    sub.mkdir(parents=True, exist_ok=True)
    tensor_rel = f"{ef.stage}/{ef.example_id}.trcf"
    groups_rel = f"{ef.stage}/{ef.example_id}.groups.json"
    write_tensor(root / tensor_rel, np.asarray(ef.tokens, dtype=np.float32))
    (root / groups_rel).write_text(json.dumps(list(ef.token_groups)), encoding="utf-8")
    return ManifestRecord(
        example_id=ef.example_id,
        stage=ef.stage,
        tensor=tensor_rel,
        groups=groups_rel,
        views=ef.available_views(),
        split_group_id=split_group_id,
        labels=dict(labels or {}),
    )


def write_manifest(path: str | Path, records: Iterable[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"manifest not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(ManifestRecord(**rec))
            except (json.JSONDecodeError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
    return out


def load_example(root: str | Path, rec: ManifestRecord) -> ExampleFeatures:
    root = Path(root)
    tokens = read_tensor(root / rec.tensor)
    gpath = root / rec.groups
    try:
        groups = json.loads(gpath.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise FormatError(f"token-group file not found: {gpath}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{gpath}: bad token-group file ({exc})") from exc
    if tokens.ndim != 2:
        raise FormatError(f"{root / rec.tensor}: expected a T x d matrix, got rank {tokens.ndim}")
    return ExampleFeatures(rec.example_id, rec.stage, tokens, tuple(groups))


@dataclass
class FeatureSet:
    """All examples of a manifest, indexed by (stage, example_id)."""

    root: Path
    records: list[ManifestRecord]
    examples: dict[tuple[str, str], ExampleFeatures]

    @property
    def stages(self) -> list[str]:
        return sorted({r.stage for r in self.records})

    def example_ids(self, stage: str) -> list[str]:
        return [r.example_id for r in self.records if r.stage == stage]

    def record(self, stage: str, example_id: str) -> ManifestRecord:
        if not hasattr(self, "_index"):
            self._index = {(r.stage, r.example_id): r for r in self.records}
        return self._index[(stage, example_id)]

    def pooled_matrix(self, stage: str, view: str = "mixed", ids: Sequence[str] | None = None) -> np.ndarray:
        ids = self.example_ids(stage) if ids is None else ids
        return np.stack([pool_tokens(select_view(self.examples[(stage, i)], view)) for i in ids]).astype(np.float64)


def load_feature_set(manifest: str | Path) -> FeatureSet:
    manifest = Path(manifest)
    records = read_manifest(manifest)
    root = manifest.parent
    examples = {}
    for rec in records:
        if rec.pooling not in POOLING_METHODS:
            raise FormatError(f"{rec.example_id}: unsupported pooling {rec.pooling!r}")
        examples[(rec.stage, rec.example_id)] = load_example(root, rec)
    return FeatureSet(root, records, examples)


def validate_feature_dir(manifest: str | Path) -> dict:
    """Load everything a manifest points at; returns a summary or raises FormatError."""
    fs = load_feature_set(manifest)
    summary: dict = {"manifest": str(manifest), "n_records": len(fs.records), "stages": {}}
    for stage in fs.stages:
        ids = fs.example_ids(stage)
        dims = {fs.examples[(stage, i)].tokens.shape[1] for i in ids}
        if len(dims) != 1:
            raise FormatError(f"stage {stage}: inconsistent feature widths {sorted(dims)}")
        for i in ids:
            ef = fs.examples[(stage, i)]
            declared = fs.record(stage, i).views
            if sorted(declared) != sorted(ef.available_views()):
                raise FormatError(f"{i} ({stage}): declared views {declared} != available {ef.available_views()}")
        summary["stages"][stage] = {"n_examples": len(ids), "d": dims.pop()}
    return summary
