"""Synthetic datasets with known answers, for checking every diagnostic end to end.

Labels come from the real composition pipeline, so planted datasets carry
genuine split groups and forward/inverted pairs. Each label value owns a
unit carrier direction (all mutually orthogonal); the carrier is added to
the tokens of its carrier group on top of isotropic Gaussian noise.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .attention import AttentionTrace, write_trace
from .audit import replay_verdicts
from .compose import ATTRIBUTE_TYPES, DEFAULT_POOLS, SLOTS, RelationExample, compose_dataset, sample_atomics
from .errors import ConfigError
from .probes import ProbeDataset
from .rng import child_rng
from .store import ExampleFeatures, write_tensor, FeatureSet, ManifestRecord, write_example, write_manifest

LABEL_KEYS = ("attribute_type", "edited_slot", "target_value", "edited_object", "reference_object")
CARRIERS = ("text", "query", "both")


@dataclass(frozen=True)
class PlantSpec:
    n: int = 4000
    d: int = 256
    n_text: int = 6
    n_query: int = 4
    signal: Mapping[str, float] = field(default_factory=lambda: {
        "attribute_type": 5.0,
        "edited_slot": 2.0,
        "target_value": 2.0,
        "edited_object": 2.0,
        "reference_object": 2.0,
    })
    carrier: Mapping[str, str] = field(default_factory=lambda: dict.fromkeys(LABEL_KEYS, "both"))
    noise: float = 1.0
    seed: int = 0
    pools: Mapping[str, Sequence[str]] = field(default_factory=lambda: DEFAULT_POOLS)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PlantSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown plant spec keys: {sorted(unknown)}")
        base = cls()
        kw = dict(d)
        if "signal" in kw:
            kw["signal"] = {**base.signal, **kw["signal"]}
        if "carrier" in kw:
            kw["carrier"] = {**base.carrier, **kw["carrier"]}
        return cls(**kw)

    def cardinalities(self) -> dict[str, int]:
        return {
            "attribute_type": len(ATTRIBUTE_TYPES),
            "edited_slot": len(SLOTS),
            "target_value": sum(len(self.pools[a]) for a in ATTRIBUTE_TYPES),
            "edited_object": len(self.pools["objects"]),
            "reference_object": len(self.pools["objects"]),
        }

    @property
    def token_groups(self) -> tuple[str, ...]:
        return ("text",) * self.n_text + ("query",) * self.n_query


@dataclass(frozen=True)
class ConnectorSim:
    rank: int
    scale: float = 1.0
    noise: float = 0.0
    scramble_group: str | None = None
    seed: int = 0

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConnectorSim":
        return cls(**d)


@dataclass
class PlantedData:
    spec: PlantSpec
    examples: list[RelationExample]
    tokens: dict[str, np.ndarray]  # stage -> (n, T, d)
    token_groups: tuple[str, ...]
    directions: dict[str, dict[str, np.ndarray]]

    def labels(self) -> dict[str, np.ndarray]:
        rows = [ex.labels() for ex in self.examples]
        return {k: np.array([r[k] for r in rows]) for k in LABEL_KEYS}

    @property
    def group_ids(self) -> np.ndarray:
        return np.array([ex.split_group_id for ex in self.examples])

    def pooled(self, stage: str, view: str = "mixed") -> np.ndarray:
        mask = _view_mask(self.token_groups, view)
        return self.tokens[stage][:, mask, :].mean(axis=1)

    def probe_dataset(self, view: str = "mixed", stages: Sequence[str] | None = None) -> ProbeDataset:
        stages = list(self.tokens) if stages is None else stages
        return ProbeDataset(
            features={s: self.pooled(s, view) for s in stages},
            labels=self.labels(),
            group_ids=self.group_ids,
            view=view,
            example_ids=np.array([ex.example_id for ex in self.examples]),
        )

    def example_features(self, stage: str) -> list[ExampleFeatures]:
        return [
            ExampleFeatures(ex.example_id, stage, self.tokens[stage][i].astype(np.float32), self.token_groups)
            for i, ex in enumerate(self.examples)
        ]

    def feature_set(self) -> FeatureSet:
        """In-memory FeatureSet equivalent to writing and re-reading the dataset."""
        records, examples = [], {}
        for stage in self.tokens:
            for ex, ef in zip(self.examples, self.example_features(stage)):
                records.append(ManifestRecord(ex.example_id, stage, "", "", ef.available_views(),
                                              split_group_id=ex.split_group_id, labels=ex.labels()))
                examples[(stage, ex.example_id)] = ef
        return FeatureSet(Path("."), records, examples)

    def write(self, root: str | Path) -> Path:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        records = []
        for stage in self.tokens:
            for ex, ef in zip(self.examples, self.example_features(stage)):
                records.append(write_example(root, ef, labels=ex.labels(), split_group_id=ex.split_group_id))
        path = root / "manifest.jsonl"
        write_manifest(path, records)
        return path


def _view_mask(groups: Sequence[str], view: str) -> np.ndarray:
    allowed = {"mixed": {"text", "query", "vision"}, "text": {"text"}, "query": {"query"}}[view]
    return np.array([g in allowed for g in groups], dtype=bool)


def carrier_directions(spec: PlantSpec) -> dict[str, dict[str, np.ndarray]]:
    card = spec.cardinalities()
    total = sum(card.values())
    if spec.d < total:
        raise ConfigError(f"d={spec.d} is smaller than the {total} planted label values")
    rng = child_rng(spec.seed, "carriers")
    q, _ = np.linalg.qr(rng.normal(size=(spec.d, total)))
    values = {
        "attribute_type": list(ATTRIBUTE_TYPES),
        "edited_slot": list(SLOTS),
        "target_value": [v for a in ATTRIBUTE_TYPES for v in spec.pools[a]],
        "edited_object": list(spec.pools["objects"]),
        "reference_object": list(spec.pools["objects"]),
    }
    out: dict[str, dict[str, np.ndarray]] = {}
    col = 0
    for fam in LABEL_KEYS:
        out[fam] = {}
        for v in values[fam]:
            out[fam][v] = q[:, col]
            col += 1
    return out


def planted_examples(spec: PlantSpec) -> list[RelationExample]:
    if spec.n < 2 or spec.n % 2:
        raise ConfigError(f"n must be a positive even number (two directions per scene), got {spec.n}")
    n_scenes = spec.n // 2
    atomics = sample_atomics(spec.pools, max(4 * len(spec.pools["objects"]) * 4, n_scenes // 2), spec.seed)
    atomics = [dataclasses.replace(a, verified="pass") for a in atomics]
    _, examples = compose_dataset(atomics, n_scenes, spec.seed)
    return examples


def plant_dataset(spec: PlantSpec = PlantSpec()) -> PlantedData:
    for fam, c in spec.carrier.items():
        if c not in CARRIERS:
            raise ConfigError(f"carrier for {fam!r} must be one of {CARRIERS}, got {c!r}")
    if spec.n_text + spec.n_query < 1:
        raise ConfigError("need at least one token per example")
    dirs = carrier_directions(spec)
    examples = planted_examples(spec)
    groups = spec.token_groups
    T = len(groups)
    rng = child_rng(spec.seed, "plant-noise")
    tokens = rng.normal(scale=spec.noise, size=(spec.n, T, spec.d))
    is_text = np.array([g == "text" for g in groups])
    is_query = ~is_text
    for i, ex in enumerate(examples):
        labels = ex.labels()
        for fam in LABEL_KEYS:
            strength = spec.signal.get(fam, 0.0)
            if strength == 0:
                continue
            vec = strength * dirs[fam][labels[fam]]
            carrier = spec.carrier.get(fam, "both")
            mask = is_text if carrier == "text" else is_query if carrier == "query" else slice(None)
            tokens[i, mask] += vec
    return PlantedData(spec, examples, {"pre": tokens}, groups, dirs)


def random_projector(d: int, rank: int, seed: int) -> np.ndarray:
    if not 1 <= rank <= d:
        raise ConfigError(f"projector rank must be in 1..{d}, got {rank}")
    q, _ = np.linalg.qr(child_rng(seed, "projector", d, rank).normal(size=(d, rank)))
    return q @ q.T


def apply_connector(tokens: np.ndarray, sim: ConnectorSim, token_groups: Sequence[str] | None = None) -> np.ndarray:
    """Y = scale * X P_r + noise over (..., d) tokens; optional cross-example shuffle of one token group."""
    X = np.asarray(tokens, dtype=np.float64)
    d = X.shape[-1]
    if sim.scale <= 0:
        raise ConfigError(f"connector scale must be positive, got {sim.scale}")
    P = random_projector(d, sim.rank, sim.seed)
    Y = sim.scale * (X @ P)
    if sim.noise > 0:
        Y = Y + child_rng(sim.seed, "connector-noise").normal(scale=sim.noise, size=Y.shape)
    if sim.scramble_group is not None:
        if token_groups is None or X.ndim != 3:
            raise ConfigError("scrambling needs (n, T, d) tokens and their group tags")
        mask = np.array([g == sim.scramble_group for g in token_groups], dtype=bool)
        perm = child_rng(sim.seed, "scramble").permutation(X.shape[0])
        Y[:, mask] = Y[perm][:, mask]
    return Y


def with_connector(data: PlantedData, sim: ConnectorSim, stage: str = "post") -> PlantedData:
    tokens = dict(data.tokens)
    tokens[stage] = apply_connector(data.tokens["pre"], sim, data.token_groups)
    return dataclasses.replace(data, tokens=tokens)


def plant_xor(n: int, d: int, seed: int, separation: float = 3.0, noise: float = 1.0):
    """Two-class XOR on two planted axes plus isotropic noise; each row is its own split group.

    Returns (X, y, group_ids).
    """
    if d < 2:
        raise ConfigError("XOR layout needs d >= 2")
    rng = child_rng(seed, "xor")
    signs = rng.choice([-1.0, 1.0], size=(n, 2))
    y = np.where(signs[:, 0] * signs[:, 1] > 0, "same", "opposite")
    X = rng.normal(scale=noise, size=(n, d))
    X[:, :2] += separation * signs
    groups = np.array([f"xor-{i:06d}" for i in range(n)])
    return X, y, groups


def plant_attention(
    shares: Mapping[str, float],
    group_sizes: Mapping[str, int],
    concentration: float,
    shape: tuple[int, int, int, int],
    seed: int,
    late_shares: Mapping[str, float] | None = None,
    layer_class: Sequence[str] | None = None,
    head_jitter: float = 0.0,
    example_id: str = "",
) -> AttentionTrace:
    """Rows are exact mixtures sum_g share_g * softmax(concentration * z_g).

    Realized group shares equal the targets; with ``head_jitter == 0`` entropy
    is non-increasing in ``concentration``.
    """
    for sh in (shares, late_shares):
        if sh is None:
            continue
        if abs(sum(sh.values()) - 1.0) > 1e-9:
            raise ConfigError(f"target shares must sum to 1, got {sum(sh.values())}")
        if set(sh) - set(group_sizes):
            raise ConfigError(f"shares name groups without sizes: {sorted(set(sh) - set(group_sizes))}")
    L, S, H, Q = shape
    names = list(group_sizes)
    group_map = [g for g in names for _ in range(group_sizes[g])]
    K = len(group_map)
    rng = child_rng(seed, "attention")
    z = rng.normal(size=K)
    zh = z[None, :] + head_jitter * rng.normal(size=(H, K))
    idx = {g: np.array([i for i, x in enumerate(group_map) if x == g]) for g in names}

    def rows(sh: Mapping[str, float]) -> np.ndarray:
        out = np.zeros((H, K))
        for g in names:
            share = sh.get(g, 0.0)
            if share == 0:
                continue
            logits = concentration * zh[:, idx[g]]
            logits -= logits.max(axis=1, keepdims=True)
            e = np.exp(logits)
            out[:, idx[g]] = share * e / e.sum(axis=1, keepdims=True)
        return out

    early_rows, late_rows = rows(shares), rows(late_shares if late_shares is not None else shares)
    w = np.empty((L, S, H, Q, K))
    boundary = S // 2 if S >= 2 else S
    for s in range(S):
        r = early_rows if s < boundary else late_rows
        w[:, s] = r[None, :, None, :]
    return AttentionTrace(w, group_map, tuple(layer_class) if layer_class else ("single",) * L, example_id)


DEMO_BUNDLE = {
    "plant": {"n": 800, "d": 96, "n_text": 6, "n_query": 4, "seed": 0},
    "connector": {"rank": 24, "scale": 0.05, "noise": 0.02, "seed": 0},
    "attention": {
        "n_traces": 3,
        "shares": {"query": 0.985, "text": 0.015},
        "group_sizes": {"text": 24, "query": 40},
        "concentration": 2.0,
        "shape": [4, 4, 4, 8],
        "layer_class": ["dual", "dual", "single", "single"],
        "head_jitter": 0.5,
        "seed": 0,
    },
    "verdicts": {"pass": 30, "under_edit": 15, "wrong_slot": 38, "wrong_object_or_binding": 31,
                 "wrong_target_value": 3, "undetermined": 2},
}
BUNDLE_KEYS = frozenset(DEMO_BUNDLE)


def write_bundle(config: Mapping, out_dir: str | Path) -> dict:
    """Write features/, pooled/, traces/ and verdicts/ under ``out_dir``; returns the analytic ground truth.

    Sections missing from ``config`` are skipped; ``connector: null`` copies pre to post unchanged.
    """
    unknown = set(config) - BUNDLE_KEYS
    if unknown:
        raise ConfigError(f"unknown synth sections: {sorted(unknown)}")
    out = Path(out_dir)
    truth: dict = {}
    if "plant" in config:
        spec = PlantSpec.from_dict(config["plant"])
        data = plant_dataset(spec)
        conn = config.get("connector")
        sim = ConnectorSim.from_dict(conn) if conn else ConnectorSim(rank=spec.d)
        data = with_connector(data, sim)
        data.write(out / "features")
        for stage in data.tokens:
            write_tensor(out / "pooled" / f"{stage}.trcf", data.pooled(stage).astype(np.float32))
        truth["plant"] = {
            "n": spec.n, "d": spec.d, "token_groups": list(spec.token_groups),
            "signal": dict(spec.signal), "carrier": dict(spec.carrier), "noise": spec.noise,
            "cardinalities": spec.cardinalities(),
        }
        truth["connector"] = dataclasses.asdict(sim)
        truth["connector"]["expected_variance_ratio"] = sim.scale ** 2
    if "attention" in config:
        att = dict(config["attention"])
        n_traces = int(att.pop("n_traces", 1))
        base_seed = int(att.pop("seed", 0))
        att["shape"] = tuple(att["shape"])
        for i in range(n_traces):
            ex_id = f"trace-{i:04d}"
            trace = plant_attention(seed=base_seed + i, example_id=ex_id, **att)
            write_trace(out / "traces" / ex_id, trace)
        truth["attention"] = {"n_traces": n_traces, "shares": dict(att["shares"]),
                              "late_shares": att.get("late_shares")}
    if "verdicts" in config:
        counts = dict(config["verdicts"])
        vdir = out / "verdicts"
        vdir.mkdir(parents=True, exist_ok=True)
        i = 0
        for label in sorted(counts):
            for _ in range(int(counts[label])):
                s1, s2 = replay_verdicts(label)
                (vdir / f"out-{i:05d}.stage1.json").write_text(json.dumps(s1, sort_keys=True), encoding="utf-8")
                if s2 is not None:
                    (vdir / f"out-{i:05d}.stage2.json").write_text(json.dumps(s2, sort_keys=True), encoding="utf-8")
                i += 1
        truth["verdicts"] = {"label_counts": counts}
    return truth
