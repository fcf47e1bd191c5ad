"""Relation-editing benchmark metadata: atomic specs, prompts, grid scenes,
directed relation examples and leakage-free splits.

Nothing here touches pixels or models. Prompts are emitted as text and
verifier replies are ingested as JSON.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CompositionError, ConfigError
from .rng import child_rng

ATTRIBUTE_TYPES = ("color", "material", "action")

SLOTS = ("tl", "tr", "bl", "br")
SLOT_NAMES = {
    "tl": "top-left",
    "tr": "top-right",
    "bl": "bottom-left",
    "br": "bottom-right",
}
SLOT_KEYS = {v: k for k, v in SLOT_NAMES.items()}

DEFAULT_POOLS: dict[str, list[str]] = {
    "objects": [
        "cup", "vase", "chair", "table lamp", "backpack", "box", "bottle", "shoe",
        "watch", "teapot", "sculpture", "toy car", "pen holder", "picture frame",
        "headphones",
    ],
    "color": [
        "deep red", "blue", "dark green", "yellow", "warm orange", "white", "black",
        "silver gray", "teal",
    ],
    "material": [
        "brushed metal", "natural wood", "transparent glass", "leather", "ceramic",
        "canvas", "rubber", "stone", "woven bamboo", "wool",
    ],
    "action": [
        "static", "moving left to right", "moving right to left",
        "falling from top to bottom", "floating upward from bottom to top",
        "moving from upper-left to lower-right", "moving from lower-right to upper-left",
        "moving from lower-left to upper-right", "moving from upper-right to lower-left",
    ],
}

ATOMIC_TEMPLATES = (
    "The center of the frame contains only one {description}; the subject is clear, "
    "the background is simple, and the camera remains stable.",
    "One {description} is located at the center of the frame; the background is clean "
    "and the overall motion is natural and stable.",
    "The video contains only one {description}; the subject is complete and clear, "
    "and the scene is simple and stable.",
)

VERIFIER_TEMPLATE = """Please carefully watch this video and answer each question below. For each item, answer "yes" or "no" and briefly explain the reason. Finally, provide an overall judgment.

1. Does the video contain a unique central subject {object}?
2. Is the {attribute_label} of {object} equal to {value}?

Please strictly output JSON only:
{{"checks": [{{"id": 1, "question": "...", "answer": "yes/no", "reason": "..."}}, ...], "all_pass": true/false}}."""

MATCH_TEMPLATE = (
    "Change the {attribute} of the object at {edited} to match the object at {reference}. "
    "After editing, what is the {attribute} of the object at {edited}?"
)
ACTION_TEMPLATE = (
    "Make the motion trajectory of the object at {edited} consistent with the object at "
    "{reference}. After editing, what is the motion trajectory of the object at {edited}?"
)

VERIFIED_STATES = ("unverified", "pass", "fail")


@dataclass(frozen=True)
class AtomicSpec:
    uid: str
    object: str
    attribute_type: str
    value: str
    prompt: str
    verified: str = "unverified"
    video_path: str | None = None

    def to_record(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class Cell:
    uid: str
    object: str
    value: str


@dataclass(frozen=True)
class GridScene:
    scene_id: str
    cells: tuple[Cell, Cell, Cell, Cell]  # ordered as SLOTS
    attribute_type: str
    edited_slot: str
    reference_slot: str
    split_group_id: str

    def cell(self, slot: str) -> Cell:
        return self.cells[SLOTS.index(slot)]

    def to_record(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "attribute_type": self.attribute_type,
            "slots": {
                SLOT_NAMES[s]: {"atomic_id": c.uid, "object": c.object, "value": c.value}
                for s, c in zip(SLOTS, self.cells)
            },
            "edited_slot": SLOT_NAMES[self.edited_slot],
            "reference_slot": SLOT_NAMES[self.reference_slot],
            "split_group_id": self.split_group_id,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "GridScene":
        cells = tuple(
            Cell(rec["slots"][SLOT_NAMES[s]]["atomic_id"], rec["slots"][SLOT_NAMES[s]]["object"],
                 rec["slots"][SLOT_NAMES[s]]["value"])
            for s in SLOTS
        )
        return cls(
            scene_id=rec["scene_id"],
            cells=cells,
            attribute_type=rec["attribute_type"],
            edited_slot=SLOT_KEYS[rec["edited_slot"]],
            reference_slot=SLOT_KEYS[rec["reference_slot"]],
            split_group_id=rec["split_group_id"],
        )


@dataclass(frozen=True)
class RelationExample:
    example_id: str
    scene_id: str
    attribute_type: str
    edited_slot: str
    reference_slot: str
    source_value: str
    target_value: str
    edited_object_name: str
    reference_object_name: str
    direction_tag: str
    instruction: str
    eval_query_answer: str
    split_group_id: str
    split: str | None = None
    scene_spec: dict | None = field(default=None, compare=False)

    def labels(self) -> dict[str, str]:
        """Probe label families for this example (slots in short form)."""
        return {
            "attribute_type": self.attribute_type,
            "edited_slot": self.edited_slot,
            "target_value": self.target_value,
            "edited_object": self.edited_object_name,
            "reference_object": self.reference_object_name,
        }

    def to_record(self) -> dict:
        rec = dataclasses.asdict(self)
        rec["edited_slot"] = SLOT_NAMES[self.edited_slot]
        rec["reference_slot"] = SLOT_NAMES[self.reference_slot]
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "RelationExample":
        rec = dict(rec)
        rec["edited_slot"] = SLOT_KEYS.get(rec["edited_slot"], rec["edited_slot"])
        rec["reference_slot"] = SLOT_KEYS.get(rec["reference_slot"], rec["reference_slot"])
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in rec.items() if k in names})


@dataclass(frozen=True)
class VerifierVerdict:
    status: str  # pass | fail | excluded
    checks: list
    reason: str | None = None

    @property
    def admitted(self) -> bool:
        return self.status == "pass"


def validate_pools(pools: Mapping[str, Sequence[str]]) -> None:
    if not pools.get("objects"):
        raise ConfigError("object pool is empty or missing")
    for a in ATTRIBUTE_TYPES:
        if not pools.get(a):
            raise ConfigError(f"value pool for attribute type {a!r} is empty or missing")
        if len(set(pools[a])) != len(pools[a]):
            raise ConfigError(f"value pool for {a!r} has duplicates")


def load_pools(path: str | Path) -> dict[str, list[str]]:
    with open(path, encoding="utf-8") as fh:
        pools = json.load(fh)
    validate_pools(pools)
    return {k: list(v) for k, v in pools.items()}


def object_description(obj: str, attribute_type: str, value: str) -> str:
    """'transparent-glass vase' for appearance values, 'toy car moving left to right' for actions."""
    if attribute_type in ("color", "material"):
        return f"{value.replace(' ', '-')} {obj}"
    if attribute_type == "action":
        return f"{obj} {value}"
    raise ConfigError(f"unknown attribute type {attribute_type!r}")


def render_atomic_prompt(spec: AtomicSpec, template_index: int) -> str:
    if not 0 <= template_index < len(ATOMIC_TEMPLATES):
        raise ValueError(f"template_index must be in 0..{len(ATOMIC_TEMPLATES) - 1}, got {template_index}")
    desc = object_description(spec.object, spec.attribute_type, spec.value)
    return ATOMIC_TEMPLATES[template_index].format(description=desc)


def sample_atomics(pools: Mapping[str, Sequence[str]], count: int, seed: int) -> list[AtomicSpec]:
    validate_pools(pools)
    if count < 0:
        raise ConfigError(f"count must be >= 0, got {count}")
    out = []
    for i in range(count):
        rng = child_rng(seed, "atomic", i)
        a = ATTRIBUTE_TYPES[rng.integers(len(ATTRIBUTE_TYPES))]
        v = pools[a][rng.integers(len(pools[a]))]
        o = pools["objects"][rng.integers(len(pools["objects"]))]
        tmpl = int(rng.integers(len(ATOMIC_TEMPLATES)))
        stub = AtomicSpec(f"atom-{i:06d}", o, a, v, prompt="")
        out.append(dataclasses.replace(stub, prompt=render_atomic_prompt(stub, tmpl)))
    return out


def render_verifier_prompt(spec: AtomicSpec) -> str:
    for name in ("object", "attribute_type", "value"):
        if not getattr(spec, name).strip():
            raise ValueError(f"atomic spec {spec.uid!r} has an empty {name}")
    return VERIFIER_TEMPLATE.format(
        object=spec.object, attribute_label=spec.attribute_type, value=spec.value
    )


def parse_verifier_reply(json_text: str) -> VerifierVerdict:
    """Strict parse; anything short of ``"all_pass": true`` keeps the atomic out."""
    try:
        obj = json.loads(json_text)
    except (json.JSONDecodeError, TypeError) as exc:
        return VerifierVerdict("excluded", [], f"parse error: {exc}")
    if not isinstance(obj, dict):
        return VerifierVerdict("excluded", [], "parse error: top-level value is not an object")
    checks = obj.get("checks", [])
    if not isinstance(checks, list):
        checks = []
    all_pass = obj.get("all_pass")
    if all_pass is True:
        return VerifierVerdict("pass", checks)
    if all_pass is False:
        return VerifierVerdict("fail", checks, "all_pass is false")
    return VerifierVerdict("excluded", checks, "missing or non-boolean all_pass")


def admit(atomics: Iterable[AtomicSpec], replies: Mapping[str, str]) -> list[AtomicSpec]:
    """Mark each atomic pass/fail from its verifier reply; missing replies fail closed."""
    out = []
    for spec in atomics:
        reply = replies.get(spec.uid)
        verdict = parse_verifier_reply(reply) if reply is not None else VerifierVerdict("excluded", [], "no reply")
        out.append(dataclasses.replace(spec, verified="pass" if verdict.admitted else "fail"))
    return out


def group_pool(atomics: Iterable[AtomicSpec], require_verified: bool = True) -> dict[tuple[str, str], list[AtomicSpec]]:
    pool: dict[tuple[str, str], list[AtomicSpec]] = defaultdict(list)
    for spec in atomics:
        if require_verified and spec.verified != "pass":
            continue
        pool[(spec.attribute_type, spec.value)].append(spec)
    return dict(pool)


def split_group_id(atomic_ids: Iterable[str]) -> str:
    """Stable id of the unordered atomic-id set (sha256 over the sorted ids)."""
    joined = "\x1f".join(sorted(atomic_ids))
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()[:16]


def _values_by_type(pool: Mapping[tuple[str, str], Sequence[AtomicSpec]]) -> dict[str, list[str]]:
    out: dict[str, list[str]] = defaultdict(list)
    for (a, v), specs in pool.items():
        if specs:
            out[a].append(v)
    return {a: sorted(vs) for a, vs in out.items()}


def compose_grid(
    pool: Mapping[tuple[str, str], Sequence[AtomicSpec]],
    seed: int,
    scene_index: int = 0,
    attribute_type: str | None = None,
) -> GridScene:
    """One 2x2 scene: four distinct values of one attribute type, random slots,
    edited/reference slots drawn uniformly from the 12 ordered pairs."""
    by_type = _values_by_type(pool)
    if attribute_type is not None:
        if len(by_type.get(attribute_type, [])) < 4:
            raise CompositionError(
                f"attribute type {attribute_type!r} has {len(by_type.get(attribute_type, []))} "
                "distinct verified values; need 4"
            )
        eligible = [attribute_type]
    else:
        eligible = [a for a in ATTRIBUTE_TYPES if len(by_type.get(a, [])) >= 4]
        eligible += sorted(a for a in by_type if a not in ATTRIBUTE_TYPES and len(by_type[a]) >= 4)
        if not eligible:
            raise CompositionError(
                "no attribute type has 4 distinct verified values: "
                + ", ".join(f"{a}={len(v)}" for a, v in sorted(by_type.items()))
            )
    rng = child_rng(seed, "scene", scene_index)
    a = eligible[rng.integers(len(eligible))] if len(eligible) > 1 else eligible[0]
    values = rng.choice(by_type[a], size=4, replace=False)
    cells = []
    for v in values:
        candidates = sorted(pool[(a, str(v))], key=lambda s: s.uid)
        pick = candidates[rng.integers(len(candidates))]
        cells.append(Cell(pick.uid, pick.object, pick.value))
    order = rng.permutation(4)
    cells = tuple(cells[i] for i in order)
    pair = rng.integers(12)
    e, r_off = divmod(int(pair), 3)
    r = (e + 1 + r_off) % 4
    return GridScene(
        scene_id=f"scene-{scene_index:06d}",
        cells=cells,
        attribute_type=a,
        edited_slot=SLOTS[e],
        reference_slot=SLOTS[r],
        split_group_id=split_group_id(c.uid for c in cells),
    )


def render_instruction(example: RelationExample) -> str:
    edited = SLOT_NAMES[example.edited_slot]
    reference = SLOT_NAMES[example.reference_slot]
    if example.attribute_type in ("color", "material"):
        return MATCH_TEMPLATE.format(attribute=example.attribute_type, edited=edited, reference=reference)
    if example.attribute_type == "action":
        return ACTION_TEMPLATE.format(edited=edited, reference=reference)
    raise ConfigError(f"unknown attribute type {example.attribute_type!r}")


def _directed(scene: GridScene, edited: str, reference: str, tag: str) -> RelationExample:
    e, r = scene.cell(edited), scene.cell(reference)
    ex = RelationExample(
        example_id=f"{scene.scene_id}-{tag}",
        scene_id=scene.scene_id,
        attribute_type=scene.attribute_type,
        edited_slot=edited,
        reference_slot=reference,
        source_value=e.value,
        target_value=r.value,
        edited_object_name=e.object,
        reference_object_name=r.object,
        direction_tag=tag,
        instruction="",
        eval_query_answer=r.value,
        split_group_id=scene.split_group_id,
        scene_spec=scene.to_record(),
    )
    return dataclasses.replace(ex, instruction=render_instruction(ex))


def derive_relation_pair(scene: GridScene) -> tuple[RelationExample, RelationExample]:
    if scene.edited_slot == scene.reference_slot:
        raise CompositionError(f"{scene.scene_id}: edited and reference slot coincide")
    fwd = _directed(scene, scene.edited_slot, scene.reference_slot, "forward")
    inv = _directed(scene, scene.reference_slot, scene.edited_slot, "inverted")
    return fwd, inv


def split_counts(n_groups: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment; every positive-ratio split gets a group."""
    ratios = np.asarray(ratios, dtype=float)
    if ratios.ndim != 1 or np.any(ratios < 0) or not np.isclose(ratios.sum(), 1.0):
        raise ConfigError(f"split ratios must be non-negative and sum to 1, got {list(ratios)}")
    exact = ratios * n_groups
    counts = np.floor(exact).astype(int)
    remainder = n_groups - counts.sum()
    # ties go to the earlier split
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    for i in range(len(ratios)):
        if ratios[i] > 0 and counts[i] == 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[i] += 1
    return [int(c) for c in counts]


SPLIT_NAMES = ("train", "val", "test")


def split_groups(group_ids: Iterable[str], ratios: Sequence[float] = (0.7, 0.15, 0.15), seed: int = 0) -> dict[str, str]:
    """Map each distinct group id to a split name."""
    groups = sorted(set(group_ids))
    if len(groups) < 3:
        raise ConfigError(f"need at least 3 split groups, got {len(groups)}")
    counts = split_counts(len(groups), ratios)
    perm = child_rng(seed, "splits").permutation(len(groups))
    out = {}
    start = 0
    for name, c in zip(SPLIT_NAMES, counts):
        for j in perm[start:start + c]:
            out[groups[j]] = name
        start += c
    return out


def assign_splits(
    examples: Sequence[RelationExample],
    ratios: Sequence[float] = (0.7, 0.15, 0.15),
    seed: int = 0,
) -> list[RelationExample]:
    for ex in examples:
        if not ex.split_group_id:
            raise ConfigError(f"example {ex.example_id!r} has no split_group_id")
    mapping = split_groups((ex.split_group_id for ex in examples), ratios, seed)
    return [dataclasses.replace(ex, split=mapping[ex.split_group_id]) for ex in examples]


def compose_dataset(
    atomics: Sequence[AtomicSpec],
    n_scenes: int,
    seed: int,
    require_verified: bool = True,
    ratios: Sequence[float] = (0.7, 0.15, 0.15),
) -> tuple[list[GridScene], list[RelationExample]]:
    pool = group_pool(atomics, require_verified=require_verified)
    scenes = [compose_grid(pool, seed, i) for i in range(n_scenes)]
    examples = [ex for s in scenes for ex in derive_relation_pair(s)]
    if examples:
        examples = assign_splits(examples, ratios, seed)
    return scenes, examples


def write_jsonl(records: Iterable[Mapping], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_relations(path: str | Path) -> list[RelationExample]:
    return [RelationExample.from_record(r) for r in read_jsonl(path)]


_SAFE = re.compile(r"[^A-Za-z0-9_.-]+")


def safe_name(text: str) -> str:
    return _SAFE.sub("_", text)
