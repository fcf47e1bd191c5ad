"""Condition-attention routing statistics from recorded DiT attention.

A trace holds alpha[layer, step, head, generated token, condition token] with
every (layer, step, head, generated token) row already normalized over the
condition tokens.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError
from .store import read_tensor, write_tensor

ROW_SUM_TOL = 1e-4
LAYER_CLASSES = ("dual", "single")


@dataclass
class AttentionTrace:
    weights: np.ndarray  # (L, S, H, Q, K)
    group_map: tuple[str, ...]  # length K
    layer_class: tuple[str, ...]  # length L
    example_id: str = ""

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 5:
            raise FormatError(f"attention weights must be 5-D (L,S,H,Q,K), got shape {w.shape}")
        self.group_map = tuple(self.group_map)
        self.layer_class = tuple(self.layer_class)
        L, S, H, Q, K = w.shape
        if len(self.group_map) != K:
            raise FormatError(f"group_map has {len(self.group_map)} entries for {K} condition tokens")
        if len(self.layer_class) != L:
            raise FormatError(f"layer_class has {len(self.layer_class)} entries for {L} layers")
        bad = set(self.layer_class) - set(LAYER_CLASSES)
        if bad:
            raise FormatError(f"unknown layer classes {sorted(bad)}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise FormatError("attention weights must be finite and non-negative")
        sums = w.sum(axis=-1)
        worst = float(np.max(np.abs(sums - 1.0)))
        if worst > ROW_SUM_TOL:
            raise FormatError(f"attention rows must sum to 1 (worst deviation {worst:.3g} > {ROW_SUM_TOL})")
        self.weights = w / sums[..., None]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.weights.shape

    @property
    def groups(self) -> list[str]:
        return sorted(set(self.group_map))

    def group_mask(self, group: str) -> np.ndarray:
        return np.array([g == group for g in self.group_map], dtype=bool)


def _subset(trace: AttentionTrace, layers=None, steps=None) -> np.ndarray:
    w = trace.weights
    if layers is not None:
        w = w[np.asarray(layers, dtype=int)]
    if steps is not None:
        w = w[:, np.asarray(steps, dtype=int)]
    return w


def group_share(trace: AttentionTrace, group: str, layers=None, steps=None) -> float:
    mask = trace.group_mask(group)
    if not mask.any():
        raise ConfigError(f"condition-token group {group!r} is empty in this trace")
    per_token = _subset(trace, layers, steps).sum(axis=(0, 1, 2, 3))
    return float(per_token[mask].sum() / per_token.sum())


def group_shares(trace: AttentionTrace, layers=None, steps=None) -> dict[str, float]:
    per_token = _subset(trace, layers, steps).sum(axis=(0, 1, 2, 3))
    total = per_token.sum()
    return {g: float(per_token[trace.group_mask(g)].sum() / total) for g in trace.groups}


def condition_distribution(trace: AttentionTrace) -> np.ndarray:
    per_token = trace.weights.sum(axis=(0, 1, 2, 3))
    return per_token / per_token.sum()


def attention_entropy(dist) -> float:
    a = np.asarray(dist, dtype=np.float64)
    nz = a[a > 0]
    return float(-np.sum(nz * np.log(nz)))


def _topk_indices(dist: np.ndarray, K: int) -> np.ndarray:
    # stable sort on -mass: ties go to the lowest condition index
    return np.argsort(-dist, kind="stable")[:K]


def topk_mass(dist, K: int) -> float:
    a = np.asarray(dist, dtype=np.float64)
    if K > a.size:
        raise ConfigError(f"top-K with K={K} exceeds the {a.size} condition tokens")
    if K < 1:
        raise ConfigError(f"K must be positive, got {K}")
    return float(a[_topk_indices(a, K)].sum())


def gini(dist) -> float:
    """Mean-absolute-difference Gini: sum_ij |a_i - a_j| / (2 n sum a)."""
    a = np.sort(np.asarray(dist, dtype=np.float64))
    n = a.size
    total = a.sum()
    if n == 0 or total <= 0:
        raise ConfigError("Gini needs a non-empty distribution with positive mass")
    ranks = np.arange(1, n + 1)
    pair_sum = 2.0 * np.sum((2 * ranks - n - 1) * a)
    return float(pair_sum / (2.0 * n * total))


def head_topk_sets(trace: AttentionTrace, K: int = 16) -> list[frozenset[int]]:
    L, S, H, Q, Kc = trace.shape
    if Kc < K:
        raise ConfigError(f"head agreement needs at least K={K} condition tokens, got {Kc}")
    per_head = trace.weights.sum(axis=(0, 1, 3))  # (H, K)
    return [frozenset(int(i) for i in _topk_indices(per_head[h], K)) for h in range(H)]


def jaccard(a: frozenset, b: frozenset) -> float:
    union = a | b
    return len(a & b) / len(union) if union else 1.0


def head_jaccard(trace: AttentionTrace, K: int = 16) -> float:
    if trace.shape[2] < 2:
        raise ConfigError("head agreement needs at least 2 heads")
    sets = head_topk_sets(trace, K)
    pairs = list(itertools.combinations(sets, 2))
    return float(np.mean([jaccard(a, b) for a, b in pairs]))


def early_late_steps(n_steps: int) -> tuple[list[int], list[int]] | None:
    if n_steps < 2:
        return None
    b = n_steps // 2
    return list(range(b)), list(range(b, n_steps))


def temporal_split(trace: AttentionTrace) -> tuple[dict[str, float], dict[str, float]] | None:
    """Group shares over the first and second half of denoising steps (None for a single step)."""
    halves = early_late_steps(trace.shape[1])
    if halves is None:
        return None
    early, late = halves
    return group_shares(trace, steps=early), group_shares(trace, steps=late)


def layer_split(trace: AttentionTrace) -> dict[str, dict[str, float] | None]:
    out: dict[str, dict[str, float] | None] = {}
    for cls in LAYER_CLASSES:
        layers = [i for i, c in enumerate(trace.layer_class) if c == cls]
        out[cls] = group_shares(trace, layers=layers) if layers else None
    return out


def trace_metrics(trace: AttentionTrace, ks: Sequence[int] = (16, 32), jaccard_k: int = 16) -> dict:
    dist = condition_distribution(trace)
    temporal = temporal_split(trace)
    out = {
        "shares": group_shares(trace),
        "early": temporal[0] if temporal else None,
        "late": temporal[1] if temporal else None,
        "layer_class": layer_split(trace),
        "entropy": attention_entropy(dist),
        "gini": gini(dist),
        "topk_mass": {str(k): (topk_mass(dist, k) if k <= dist.size else None) for k in ks},
        "head_jaccard": (head_jaccard(trace, jaccard_k)
                         if trace.shape[2] >= 2 and dist.size >= jaccard_k else None),
    }
    return out


def _mean_dicts(dicts: list[dict[str, float] | None], keys: Sequence[str]) -> dict[str, float] | None:
    live = [d for d in dicts if d is not None]
    if not live:
        return None
    return {k: float(np.mean([d.get(k, 0.0) for d in live])) for k in keys}


def _mean_opt(vals):
    live = [v for v in vals if v is not None]
    return float(np.mean(live)) if live else None


def routing_suite(traces: Sequence[AttentionTrace], ks: Sequence[int] = (16, 32), jaccard_k: int = 16) -> dict:
    """Per-trace metrics averaged over traces (one trace per example)."""
    if not traces:
        raise ConfigError("routing suite needs at least one trace")
    per = [trace_metrics(t, ks, jaccard_k) for t in traces]
    groups = sorted({g for t in traces for g in t.groups})
    return {
        "kind": "attention",
        "n_examples": len(traces),
        "early_late_boundary": "floor(n_steps / 2)",
        "head_topk_aggregation": "per-head mass summed over layers, steps and generated tokens; ties to lowest index",
        "gini_form": "sum_ij |a_i - a_j| / (2 n sum a)",
        "shares": _mean_dicts([p["shares"] for p in per], groups),
        "early": _mean_dicts([p["early"] for p in per], groups),
        "late": _mean_dicts([p["late"] for p in per], groups),
        "layer_class": {c: _mean_dicts([p["layer_class"][c] for p in per], groups) for c in LAYER_CLASSES},
        "entropy": float(np.mean([p["entropy"] for p in per])),
        "gini": float(np.mean([p["gini"] for p in per])),
        "topk_mass": {str(k): _mean_opt([p["topk_mass"][str(k)] for p in per]) for k in ks},
        "head_jaccard": {str(jaccard_k): _mean_opt([p["head_jaccard"] for p in per])},
        "per_example": [dict(example_id=t.example_id, **p) for t, p in zip(traces, per)],
    }


def write_trace(directory: str | Path, trace: AttentionTrace) -> None:
    """One .trcf per (layer, step, head) holding the Q x K matrix, plus trace.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    L, S, H, Q, K = trace.shape
    for l, s, h in itertools.product(range(L), range(S), range(H)):
        write_tensor(d / f"l{l:03d}_s{s:03d}_h{h:03d}.trcf", trace.weights[l, s, h].astype(np.float32))
    sidecar = {
        "example_id": trace.example_id,
        "shape": [L, S, H, Q, K],
        "group_map": list(trace.group_map),
        "layer_class": list(trace.layer_class),
        "step_order": list(range(S)),
    }
    (d / "trace.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")


def read_trace(directory: str | Path) -> AttentionTrace:
    d = Path(directory)
    side_path = d / "trace.json"
    if not side_path.is_file():
        raise FormatError(f"trace sidecar not found: {side_path}")
    side = json.loads(side_path.read_text(encoding="utf-8"))
    L, S, H, Q, K = side["shape"]
    order = side.get("step_order", list(range(S)))
    if sorted(order) != list(range(S)):
        raise FormatError(f"{side_path}: step_order must be a permutation of 0..{S - 1}")
    w = np.empty((L, S, H, Q, K), dtype=np.float64)
    for l, s, h in itertools.product(range(L), range(S), range(H)):
        m = read_tensor(d / f"l{l:03d}_s{s:03d}_h{h:03d}.trcf")
        if m.shape != (Q, K):
            raise FormatError(f"{d}: matrix (l={l}, s={s}, h={h}) has shape {m.shape}, expected {(Q, K)}")
        w[l, s, h] = m
    # reorder so index 0 is the earliest denoising step
    w = w[:, np.argsort(order)]
    return AttentionTrace(w, side["group_map"], side["layer_class"], side.get("example_id", d.name))


def read_traces(root: str | Path) -> list[AttentionTrace]:
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"trace directory not found: {root}")
    dirs = sorted(p.parent for p in root.glob("*/trace.json"))
    if (root / "trace.json").is_file():
        dirs = [root]
    if not dirs:
        raise FormatError(f"no traces (*/trace.json) under {root}")
    return [read_trace(p) for p in dirs]
