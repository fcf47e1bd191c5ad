"""Per-token decomposition of an edited-slot probe's decision margin.

With mean pooling, phi(pool(H)) = sum_t (1/T) h_t A + offset, so the pooled
margin between the true class and its strongest rival splits exactly into one
term per token plus a token-independent offset (feature-map centering and
probe bias).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .compose import split_groups
from .errors import ConfigError, DegenerateInputError
from .probes import LinearProbe, ProbeConfig, train_linear_probe
from .store import FeatureSet, pool_tokens, select_view, view_groups

ROUTE_CONFIG = ProbeConfig(pca_dim=256)


@dataclass(frozen=True)
class TokenMargins:
    margins: np.ndarray  # (T,)
    bias_offset: float
    true_class: object
    runner_up: object

    @property
    def total(self) -> float:
        return float(self.margins.sum() + self.bias_offset)


def token_margins(probe: LinearProbe, tokens, true_class) -> TokenMargins:
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ValueError("tokens must be a non-empty T x d matrix")
    classes = list(probe.classes)
    if len(classes) < 2:
        raise ConfigError("margin decomposition needs a probe with at least 2 classes")
    c_star = classes.index(true_class)
    scores = probe.decision_function(pool_tokens(tokens)[None, :])[0]
    rival_scores = scores.copy()
    rival_scores[c_star] = -np.inf
    c_hat = int(np.argmax(rival_scores))
    dw = probe.W[c_star] - probe.W[c_hat]
    T = tokens.shape[0]
    psi = tokens @ probe.feature_map.linear / T
    margins = psi @ dw
    offset = float(dw @ probe.feature_map.offset + probe.b[c_star] - probe.b[c_hat])
    return TokenMargins(margins, offset, classes[c_star], classes[c_hat])


def positive_mass(margins) -> np.ndarray | None:
    pos = np.maximum(np.asarray(margins, dtype=np.float64), 0.0)
    total = pos.sum()
    if total <= 0:
        return None
    return pos / total


def positive_entropy(margins, T: int | None = None) -> float | None:
    """Entropy of the positive-margin distribution normalized by ln T; None when no token is positive."""
    m = np.asarray(margins, dtype=np.float64)
    T = len(m) if T is None else T
    if T < 2:
        raise DegenerateInputError("normalized entropy needs T >= 2")
    q = positive_mass(m)
    if q is None:
        return None
    nz = q[q > 0]
    return float(-np.sum(nz * np.log(nz)) / np.log(T))


def route_masses(margins, token_groups: Sequence[str]) -> tuple[float | None, float | None]:
    """(top-1 positive mass, positive mass on query tokens)."""
    m = np.asarray(margins, dtype=np.float64)
    if len(token_groups) != len(m):
        raise ValueError(f"{len(token_groups)} group tags for {len(m)} margins")
    q = positive_mass(m)
    if q is None:
        return None, None
    is_query = np.array([g == "query" for g in token_groups], dtype=bool)
    return float(q.max()), float(q[is_query].sum())


@dataclass
class RouteStats:
    """Per-example margin statistics folded into means."""

    margins: list[float] = field(default_factory=list)
    entropies: list[float] = field(default_factory=list)
    top1: list[float] = field(default_factory=list)
    query: list[float] = field(default_factory=list)
    n_examples: int = 0
    n_undefined: int = 0
    max_completeness_error: float = 0.0

    def add(self, tm: TokenMargins, groups: Sequence[str], pooled_margin: float) -> None:
        self.n_examples += 1
        self.margins.append(tm.total)
        self.max_completeness_error = max(self.max_completeness_error, abs(tm.total - pooled_margin))
        H = positive_entropy(tm.margins) if len(tm.margins) >= 2 else None
        top1, qmass = route_masses(tm.margins, groups)
        if H is None and top1 is None:
            self.n_undefined += 1
            return
        if H is not None:
            self.entropies.append(H)
        self.top1.append(top1)
        self.query.append(qmass)

    def to_dict(self) -> dict:
        def mean(v):
            return float(np.mean(v)) if v else None

        return {
            "n_examples": self.n_examples,
            "n_undefined_positive_mass": self.n_undefined,
            "mean_margin": mean(self.margins),
            "mean_norm_entropy": mean(self.entropies),
            "mean_top1_mass": mean(self.top1),
            "mean_query_mass": mean(self.query),
            "max_completeness_error": self.max_completeness_error,
        }


def _examples_for(fs: FeatureSet, ids: Sequence[str], stage: str):
    return [fs.examples[(stage, i)] for i in ids]


def token_route_suite(
    fs: FeatureSet,
    views: Sequence[str] = ("mixed", "text", "query"),
    config: ProbeConfig = ROUTE_CONFIG,
    family: str = "edited_slot",
    stages: Sequence[str] = ("pre", "post"),
) -> dict:
    """Per-view edited-slot probe accuracy (pre vs post) plus margin statistics on test rows."""
    ids = sorted(set(fs.example_ids("pre")) | set(fs.example_ids("post")))
    out: dict = {"kind": "token_route", "family": family, "config": config.to_dict(),
                 "pooling": "mean", "views": {}, "gaps": []}
    for view in views:
        vres: dict = {}
        for stage in stages:
            if stage not in fs.stages:
                out["gaps"].append({"view": view, "stage": stage, "reason": "no features for stage"})
                continue
            stage_ids = [i for i in ids if (stage, i) in fs.examples]
            exs = _examples_for(fs, stage_ids, stage)
            if not all(ef.view_mask(view).any() for ef in exs):
                out["gaps"].append({"view": view, "stage": stage, "reason": "view missing for some examples"})
                continue
            recs = [fs.record(stage, i) for i in stage_ids]
            y = np.array([r.labels[family] for r in recs])
            groups = np.array([r.split_group_id for r in recs])
            toks = [select_view(ef, view) for ef in exs]
            tgroups = [view_groups(ef, view) for ef in exs]
            X = np.stack([pool_tokens(t) for t in toks]).astype(np.float64)
            per_seed = []
            stats_all, stats_correct = RouteStats(), RouteStats()
            for seed in config.seeds:
                mapping = split_groups(groups, config.split_ratios, seed)
                sp = np.array([mapping[g] for g in groups])
                try:
                    probe, _ = train_linear_probe(X, y, sp, config, seed)
                except ConfigError as exc:
                    out["gaps"].append({"view": view, "stage": stage, "seed": seed, "reason": str(exc)})
                    continue
                test = np.flatnonzero(sp == "test")
                scores = probe.decision_function(X[test])
                pred = probe.classes[np.argmax(scores, axis=1)]
                per_seed.append(float(np.mean(pred == y[test])))
                cls = list(probe.classes)
                for row, j in enumerate(test):
                    tm = token_margins(probe, toks[j], y[j])
                    s = scores[row]
                    pooled = s[cls.index(tm.true_class)] - s[cls.index(tm.runner_up)]
                    stats_all.add(tm, tgroups[j], pooled)
                    if pred[row] == y[j]:
                        stats_correct.add(tm, tgroups[j], pooled)
            if not per_seed:
                continue
            vres[stage] = {
                "test_acc": {"mean": float(np.mean(per_seed)), "std": float(np.std(per_seed)), "per_seed": per_seed},
                "margins_all": stats_all.to_dict(),
                "margins_correct": stats_correct.to_dict(),
            }
        out["views"][view] = vres
    return out
