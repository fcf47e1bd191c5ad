"""Linear and MLP probes on standardized, train-only PCA features.

Each probe cell is one (label family, stage, seed). The seed drives both the
group-level split and parameter initialization, through separate child streams.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import erf

from .compose import ATTRIBUTE_TYPES, DEFAULT_POOLS, SLOTS, split_groups
from .errors import ConfigError
from .rng import child_rng
from .store import FeatureSet

FAMILIES = (
    "attribute_type",
    "edited_slot",
    "target_value/action",
    "target_value/material",
    "target_value/color",
    "edited_object",
    "reference_object",
)
TARGET_FAMILIES = tuple(f for f in FAMILIES if f.startswith("target_value/"))


@dataclass(frozen=True)
class ProbeConfig:
    pca_dim: int = 128
    standardize: bool = True
    linear_lr: float = 0.1
    linear_weight_decay: float = 1e-4
    linear_momentum: float = 0.9
    linear_max_epochs: int = 1000
    mlp_lr: float = 1e-3
    mlp_weight_decay: float = 1e-4
    mlp_hidden: int = 256
    mlp_dropout: float = 0.2
    batch_size: int = 512
    max_epochs: int = 300
    patience: int = 30
    split_ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seeds: tuple[int, ...] = (0, 1, 42)

    def __post_init__(self):
        if self.pca_dim < 1:
            raise ConfigError(f"pca_dim must be positive, got {self.pca_dim}")
        if len(self.split_ratios) != 3 or not np.isclose(sum(self.split_ratios), 1.0):
            raise ConfigError(f"split_ratios must be three numbers summing to 1, got {self.split_ratios}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not 0 <= self.mlp_dropout < 1:
            raise ConfigError(f"mlp_dropout must be in [0, 1), got {self.mlp_dropout}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ProbeConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown probe config keys: {sorted(unknown)}")
        kw = dict(d)
        for k in ("split_ratios", "seeds"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        d["seeds"] = list(self.seeds)
        return d


@dataclass
class FeatureMap:
    """phi(x) = ((x - mean) * inv_scale) @ components.T, fit on training rows."""

    mean: np.ndarray
    inv_scale: np.ndarray
    components: np.ndarray  # (k, d)

    @property
    def linear(self) -> np.ndarray:
        """(d, k) matrix A with phi(x) = x @ A + offset."""
        return self.inv_scale[:, None] * self.components.T

    @property
    def offset(self) -> np.ndarray:
        return -(self.mean * self.inv_scale) @ self.components.T

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return ((X - self.mean) * self.inv_scale) @ self.components.T


def fit_feature_map(X_train, config: ProbeConfig) -> FeatureMap:
    X = np.asarray(X_train, dtype=np.float64)
    n, d = X.shape
    k = config.pca_dim
    if n <= k:
        raise ConfigError(f"need more training rows than pca_dim ({n} <= {k})")
    if k > d:
        raise ConfigError(f"pca_dim {k} exceeds feature width {d}")
    mean = X.mean(axis=0)
    if config.standardize:
        std = X.std(axis=0)
        inv = np.zeros(d)
        live = std > 1e-12 * np.maximum(1.0, np.abs(mean))
        inv[live] = 1.0 / std[live]
    else:
        inv = np.ones(d)
    Z = (X - mean) * inv
    _, _, vt = np.linalg.svd(Z, full_matrices=False)
    comps = vt[:k]
    # sign convention: largest-magnitude loading positive
    flip = np.sign(comps[np.arange(k), np.argmax(np.abs(comps), axis=1)])
    flip[flip == 0] = 1.0
    return FeatureMap(mean=mean, inv_scale=inv, components=comps * flip[:, None])


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _split_indices(splits) -> dict[str, np.ndarray]:
    splits = np.asarray(splits)
    return {name: np.flatnonzero(splits == name) for name in ("train", "val", "test")}


def _encode(labels, classes: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(classes, labels)
    return idx


@dataclass
class LinearProbe:
    classes: np.ndarray
    feature_map: FeatureMap
    W: np.ndarray  # (C, k)
    b: np.ndarray  # (C,)

    def decision_function(self, X) -> np.ndarray:
        return self.feature_map(X) @ self.W.T + self.b

    def predict(self, X) -> np.ndarray:
        return self.classes[np.argmax(self.decision_function(X), axis=1)]

    def score(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))


def _gelu(a):
    return 0.5 * a * (1.0 + erf(a / np.sqrt(2.0)))


def _gelu_grad(a):
    cdf = 0.5 * (1.0 + erf(a / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * a * a) / np.sqrt(2.0 * np.pi)
    return cdf + a * pdf


@dataclass
class MlpProbe:
    classes: np.ndarray
    feature_map: FeatureMap
    W1: np.ndarray  # (k, H)
    b1: np.ndarray
    W2: np.ndarray  # (H, C)
    b2: np.ndarray
    dropout: float = 0.2

    def decision_function(self, X) -> np.ndarray:
        # inference: dropout off
        h = _gelu(self.feature_map(X) @ self.W1 + self.b1)
        return h @ self.W2 + self.b2

    def predict(self, X) -> np.ndarray:
        return self.classes[np.argmax(self.decision_function(X), axis=1)]

    def score(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))


def _prepare(features, labels, splits, config, feature_map):
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    idx = _split_indices(splits)
    if len(idx["train"]) == 0 or len(idx["val"]) == 0:
        raise ConfigError("probe training needs non-empty train and val splits")
    classes = np.unique(y)
    if len(np.unique(y[idx["train"]])) < 2:
        raise ConfigError("training split contains a single class")
    fmap = feature_map if feature_map is not None else fit_feature_map(X[idx["train"]], config)
    Z_tr, Z_val = fmap(X[idx["train"]]), fmap(X[idx["val"]])
    return classes, fmap, Z_tr, _encode(y[idx["train"]], classes), Z_val, _encode(y[idx["val"]], classes)


def train_linear_probe(features, labels, splits, config: ProbeConfig, seed: int,
                       feature_map: FeatureMap | None = None) -> tuple[LinearProbe, float]:
    """Full-batch momentum SGD on softmax cross-entropy; best-val checkpoint.

    ``feature_map`` overrides the train-only fit (used by leakage controls).
    """
    classes, fmap, Z, yi, Zv, yv = _prepare(features, labels, splits, config, feature_map)
    n, k = Z.shape
    C = len(classes)
    rng = child_rng(seed, "linear-init", C, k)
    bound = 1.0 / np.sqrt(k)
    W = rng.uniform(-bound, bound, size=(C, k))
    b = rng.uniform(-bound, bound, size=C)
    Y = np.zeros((n, C))
    Y[np.arange(n), yi] = 1.0
    vW, vb = np.zeros_like(W), np.zeros_like(b)
    lr, mu, wd = config.linear_lr, config.linear_momentum, config.linear_weight_decay
    best_acc, best = -1.0, (W.copy(), b.copy())
    stale = 0
    for _ in range(config.linear_max_epochs):
        G = (_softmax(Z @ W.T + b) - Y) / n
        gW = G.T @ Z + wd * W
        gb = G.sum(axis=0) + wd * b
        vW = mu * vW + gW
        vb = mu * vb + gb
        W = W - lr * vW
        b = b - lr * vb
        acc = float(np.mean(np.argmax(Zv @ W.T + b, axis=1) == yv))
        if acc > best_acc:
            best_acc, best, stale = acc, (W.copy(), b.copy()), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return LinearProbe(classes, fmap, best[0], best[1]), best_acc


def train_mlp_probe(features, labels, splits, config: ProbeConfig, seed: int,
                    feature_map: FeatureMap | None = None) -> tuple[MlpProbe, float]:
    """Two-layer GELU MLP with train-time dropout, AdamW minibatches, best-val checkpoint."""
    classes, fmap, Z, yi, Zv, yv = _prepare(features, labels, splits, config, feature_map)
    n, k = Z.shape
    C, H = len(classes), config.mlp_hidden
    rng = child_rng(seed, "mlp", C, k, H)
    b_in, b_hid = 1.0 / np.sqrt(k), 1.0 / np.sqrt(H)
    params = [
        rng.uniform(-b_in, b_in, size=(k, H)),
        rng.uniform(-b_in, b_in, size=H),
        rng.uniform(-b_hid, b_hid, size=(H, C)),
        rng.uniform(-b_hid, b_hid, size=C),
    ]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    lr, wd, p_drop = config.mlp_lr, config.mlp_weight_decay, config.mlp_dropout
    keep = 1.0 - p_drop
    step = 0
    best_acc, best = -1.0, [p.copy() for p in params]
    stale = 0
    for _ in range(config.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            bi = order[start:start + config.batch_size]
            Zb, B = Z[bi], len(bi)
            W1, b1, W2, b2 = params
            a = Zb @ W1 + b1
            h = _gelu(a)
            mask = (rng.random(h.shape) < keep) / keep if p_drop > 0 else 1.0
            hd = h * mask
            P = _softmax(hd @ W2 + b2)
            P[np.arange(B), yi[bi]] -= 1.0
            G = P / B
            da = (G @ W2.T) * mask * _gelu_grad(a)
            grads = [Zb.T @ da, da.sum(axis=0), hd.T @ G, G.sum(axis=0)]
            step += 1
            c1, c2 = 1.0 - beta1 ** step, 1.0 - beta2 ** step
            for j, g in enumerate(grads):
                params[j] = params[j] * (1.0 - lr * wd)
                m[j] = beta1 * m[j] + (1.0 - beta1) * g
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g
                params[j] = params[j] - lr * (m[j] / c1) / (np.sqrt(v[j] / c2) + eps)
        W1, b1, W2, b2 = params
        acc = float(np.mean(np.argmax(_gelu(Zv @ W1 + b1) @ W2 + b2, axis=1) == yv))
        if acc > best_acc:
            best_acc, best, stale = acc, [p.copy() for p in params], 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return MlpProbe(classes, fmap, *best, dropout=p_drop), best_acc


TRAINERS = {"linear": train_linear_probe, "mlp": train_mlp_probe}


def chance_levels(pools: Mapping[str, Sequence[str]] = DEFAULT_POOLS) -> dict[str, float]:
    out = {
        "attribute_type": 1.0 / len(ATTRIBUTE_TYPES),
        "edited_slot": 1.0 / len(SLOTS),
        "edited_object": 1.0 / len(pools["objects"]),
        "reference_object": 1.0 / len(pools["objects"]),
    }
    for a in ATTRIBUTE_TYPES:
        out[f"target_value/{a}"] = 1.0 / len(pools[a])
    out["target_value_avg"] = float(np.mean([out[f] for f in TARGET_FAMILIES]))
    return out


@dataclass
class ProbeDataset:
    """Row-aligned pooled features per stage plus labels and split groups."""

    features: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]
    group_ids: np.ndarray
    view: str = "mixed"
    example_ids: np.ndarray | None = None

    def __post_init__(self):
        self.group_ids = np.asarray(self.group_ids)
        n = len(self.group_ids)
        self.labels = {k: np.asarray(v) for k, v in self.labels.items()}
        for k, v in self.labels.items():
            if len(v) != n:
                raise ConfigError(f"label family {k!r} has {len(v)} rows, expected {n}")
        for stage, X in self.features.items():
            if X.shape[0] != n:
                raise ConfigError(f"stage {stage!r} has {X.shape[0]} rows, expected {n}")

    def family_rows(self, family: str) -> tuple[np.ndarray, np.ndarray]:
        """(row mask, label vector) for a probe family."""
        if family.startswith("target_value/"):
            attr = family.split("/", 1)[1]
            return self.labels["attribute_type"] == attr, self.labels["target_value"]
        return np.ones(len(self.group_ids), dtype=bool), self.labels[family]


def dataset_from_feature_set(fs: FeatureSet, view: str = "mixed", stages: Sequence[str] | None = None) -> ProbeDataset:
    """Pool every example under ``view``; rows are the examples present in all requested stages."""
    stages = fs.stages if stages is None else [s for s in stages if s in fs.stages]
    if not stages:
        raise ConfigError("feature set has none of the requested stages")
    common = set(fs.example_ids(stages[0]))
    for st in stages[1:]:
        common &= set(fs.example_ids(st))
    ids = sorted(common)
    if not ids:
        raise ConfigError(f"no example is present in every stage of {stages}")
    recs = [fs.record(stages[0], i) for i in ids]
    missing = [r.example_id for r in recs if not r.labels or not r.split_group_id]
    if missing:
        raise ConfigError(f"manifest records lack labels or split_group_id, e.g. {missing[0]!r}")
    keys = sorted(set.intersection(*(set(r.labels) for r in recs)))
    return ProbeDataset(
        features={st: fs.pooled_matrix(st, view, ids) for st in stages},
        labels={k: np.array([r.labels[k] for r in recs]) for k in keys},
        group_ids=np.array([r.split_group_id for r in recs]),
        view=view,
        example_ids=np.array(ids),
    )


@dataclass
class ProbeReport:
    probe: str
    view: str
    config: dict
    cells: list[dict] = field(default_factory=list)
    gaps: list[dict] = field(default_factory=list)
    chance: dict = field(default_factory=dict)

    def accuracies(self, family: str, stage: str) -> list[float]:
        return [c["test_acc"] for c in self.cells
                if c["family"] == family and c["stage"] == stage and c["test_acc"] is not None]

    def mean(self, family: str, stage: str) -> float:
        return float(np.mean(self.accuracies(family, stage)))

    def summary(self) -> dict:
        out: dict = {}
        families = sorted({c["family"] for c in self.cells}, key=_family_order)
        stages = sorted({c["stage"] for c in self.cells}, key=lambda s: ("pre", "post").index(s))
        for fam in families:
            out[fam] = {"chance": self.chance.get(fam)}
            for st in stages:
                accs = self.accuracies(fam, st)
                if accs:
                    out[fam][st] = {"mean": float(np.mean(accs)), "std": float(np.std(accs)), "per_seed": accs}
        if all(f in families for f in TARGET_FAMILIES):
            avg = {"chance": self.chance.get("target_value_avg")}
            seeds = sorted({c["seed"] for c in self.cells})
            for st in stages:
                per_seed = []
                for s in seeds:
                    vals = [c["test_acc"] for c in self.cells
                            if c["stage"] == st and c["seed"] == s and c["family"] in TARGET_FAMILIES]
                    if len(vals) == len(TARGET_FAMILIES):
                        per_seed.append(float(np.mean(vals)))
                if per_seed:
                    avg[st] = {"mean": float(np.mean(per_seed)), "std": float(np.std(per_seed)), "per_seed": per_seed}
            out["target_value_avg"] = avg
        return out

    def to_dict(self) -> dict:
        return {
            "kind": "probe",
            "probe": self.probe,
            "view": self.view,
            "config": self.config,
            "std_ddof": 0,
            "preprocessing": "standardize-then-pca, fit on train split only, per family",
            "cells": self.cells,
            "summary": self.summary(),
            "gaps": self.gaps,
        }


def _family_order(f: str):
    key = "target_value_avg" if f == "target_value_avg" else f
    order = list(FAMILIES) + ["target_value_avg"]
    return order.index(key) if key in order else len(order)


def run_probe_suite(
    dataset: ProbeDataset,
    config: ProbeConfig = ProbeConfig(),
    probe: str = "linear",
    families: Sequence[str] = FAMILIES,
    stages: Sequence[str] = ("pre", "post"),
    pools: Mapping[str, Sequence[str]] = DEFAULT_POOLS,
) -> ProbeReport:
    if probe not in TRAINERS:
        raise ConfigError(f"unknown probe kind {probe!r}")
    trainer = TRAINERS[probe]
    chance = chance_levels(pools)
    report = ProbeReport(probe=probe, view=dataset.view, config=config.to_dict(), chance=chance)
    live_stages = []
    for st in stages:
        if st in dataset.features:
            live_stages.append(st)
        else:
            report.gaps.append({"stage": st, "reason": "no features for stage"})
    needed = {f: ("attribute_type", "target_value") if f in TARGET_FAMILIES else (f,) for f in families}
    live_families = []
    for fam in families:
        if fam not in FAMILIES:
            raise ConfigError(f"unknown probe family {fam!r}")
        if all(k in dataset.labels for k in needed[fam]):
            live_families.append(fam)
        else:
            report.gaps.append({"family": fam, "reason": "labels missing"})
    for seed in config.seeds:
        mapping = split_groups(dataset.group_ids, config.split_ratios, seed)
        splits = np.array([mapping[g] for g in dataset.group_ids])
        for fam in live_families:
            rows, y = dataset.family_rows(fam)
            for st in live_stages:
                X = dataset.features[st][rows]
                sp = splits[rows]
                try:
                    model, val_acc = trainer(X, y[rows], sp, config, seed)
                except ConfigError as exc:
                    report.gaps.append({"stage": st, "family": fam, "seed": seed, "reason": str(exc)})
                    continue
                test = sp == "test"
                report.cells.append({
                    "stage": st,
                    "view": dataset.view,
                    "family": fam,
                    "seed": seed,
                    "test_acc": model.score(X[test], y[rows][test]) if test.any() else None,
                    "val_acc": val_acc,
                    "n_train": int(np.sum(sp == "train")),
                    "n_val": int(np.sum(sp == "val")),
                    "n_test": int(test.sum()),
                })
    return report
