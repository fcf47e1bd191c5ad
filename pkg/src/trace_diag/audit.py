"""Output-level failure audit driven by a two-stage VLM judge.

Prompts go out as text, verdicts come back as strict JSON. Judge invocation
itself lives outside this package.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .compose import SLOT_NAMES, RelationExample
from .errors import ConfigError, VerdictParseError
from .geometry import round_half_away

ACTIVATION_FAILURES = ("no_visible_change", "partial_or_non_target_change", "object_missing_or_unreadable")
CONFIDENCE = ("high", "medium", "low")
STRUCTURAL_FIELDS = (
    "slot_correct",
    "edited_object_correct",
    "reference_binding_correct",
    "targeted_edit_sufficient",
    "target_correct",
)
LABELS = (
    "pass",
    *ACTIVATION_FAILURES,
    "under_edit",
    "wrong_slot",
    "wrong_object_or_binding",
    "wrong_target_value",
    "undetermined",
)
UNDER_EDIT_FAMILY = frozenset(ACTIVATION_FAILURES) | {"under_edit"}

SLOT_POSITIONS = {
    "tl": "row 1, column 1",
    "tr": "row 1, column 2",
    "bl": "row 2, column 1",
    "br": "row 2, column 2",
}

_TARGET_BLOCK = """Original scene information:
{scene_text}

Target edit information:
- instruction: {instruction}
- layout_type: {layout}
- attribute_type: {attribute_type}
- edited_side: {edited_side} ({edited_position})
- reference_side: {reference_side} ({reference_position})
- edited_object_name: {edited_object_name}
- reference_object_name: {reference_object_name}
- source_value: {source_value}
- target_value: {target_value}"""

STAGE1_TEMPLATE = """You will see two videos in the following fixed order:
- Video 1: the original video before editing.
- Video 2: the edited/generated result.

Compare the two videos and, using the provided original-scene information and target edit request, judge only whether a sufficiently visible edit has occurred.

Task background:
- This is a video-editing result verification task.
- In this stage, judge only whether Video 2 contains an obvious, readable, and edit-related change compared with Video 1.
- Do not require the visible change to be in the correct slot, on the correct object, or with the correct target value.
- If a clear change occurs, even if the slot, object, binding, or target value is wrong, output edit_activation_sufficient = true.
- Output edit_activation_sufficient = false only when the overall change is still insufficient. In that case, choose an activation_failure_type.

""" + _TARGET_BLOCK + """

If edit_activation_sufficient = false, activation_failure_type must be one of:
1. no_visible_change: Video 2 is almost unchanged from Video 1; the target object or target region barely changes.
2. partial_or_non_target_change: some change is visible, but it is mainly weak, local, on a non-target attribute, on a non-target object, or not sufficient to count as real edit activation.
3. object_missing_or_unreadable: after editing, the target region/object disappears, becomes severely blurred, is covered by the background, or cannot be read.

Output rules:
- If edit_activation_sufficient = true, activation_failure_type must be null.
- If edit_activation_sufficient = false, activation_failure_type must be one of the three categories above.
- If the case is genuinely impossible to judge, output null for both fields.

Strictly output JSON only:
{
  "edit_activation_sufficient": true/false/null,
  "activation_failure_type": "no_visible_change/partial_or_non_target_change/object_missing_or_unreadable/null",
  "confidence": "high/medium/low",
  "reason_brief": "one sentence explaining whether Video 2 shows a visible edit relative to Video 1 and, if insufficient, which activation-failure type applies"
}"""

STAGE2_TEMPLATE = """You will see two videos in the following fixed order:
- Video 1: the original video before editing.
- Video 2: the edited/generated result.

Compare the two videos and, using the provided original-scene information and target edit request, judge whether the main edit location is correct and whether the target edit is sufficiently clear to determine the final attribute value.

Task background:
- The previous stage only checked whether Video 2 likely contains a visible edit relative to Video 1.
- This stage checks whether the visible change mainly occurs in the correct slot, on the correct edited object, and under the correct reference binding.
- A video may contain a clear change while still editing the wrong slot or object, using the wrong reference, or changing the target too weakly to read the final attribute value.
- Therefore, also judge targeted_edit_sufficient. Only when the edit on the correct target object is clear, sufficient, and readable should target_correct be judged.
- If targeted_edit_sufficient = false, target_correct must be null.
- If the main problem is slot_correct = false, edited_object_correct = false, or reference_binding_correct = false, then targeted_edit_sufficient and target_correct should preferably be null instead of forced.
- If the evidence is insufficient for a reliable decision, output null.

""" + _TARGET_BLOCK + """

Answer the following five structured questions:
1. slot_correct: relative to Video 1, does the main edit change in Video 2 occur at the correct edited_side?
2. edited_object_correct: is the object that mainly changed the expected edited_object_name?
3. reference_binding_correct: is the reference object and reference relation understood correctly, without confusing the reference object or binding?
4. targeted_edit_sufficient: if the change is in the correct slot and on the target object, is the edit clear, sufficient, and stable enough to reliably judge the final attribute value? If the change is too weak, too local, occluded, or unreadable, output false. If the previous fields already indicate a wrong slot, object, or binding, output null.
5. target_correct: only judge this when targeted_edit_sufficient = true. In that case, has the target object in the correct slot changed to target_value for the requested attribute_type? If targeted_edit_sufficient is not true, output null.

Strictly output JSON only:
{
  "slot_correct": true/false/null,
  "edited_object_correct": true/false/null,
  "reference_binding_correct": true/false/null,
  "targeted_edit_sufficient": true/false/null,
  "target_correct": true/false/null,
  "confidence": "high/medium/low",
  "reason_brief": "one sentence explaining whether the edit is correct or whether it fails on slot/object/binding/target sufficiency/target value"
}"""

PROMPT_VARIABLES = (
    "scene_text", "instruction", "layout", "attribute_type", "edited_side", "edited_position",
    "reference_side", "reference_position", "edited_object_name", "reference_object_name",
    "source_value", "target_value",
)
_PLACEHOLDER = re.compile(r"\{(" + "|".join(PROMPT_VARIABLES) + r")\}")


def _fill(template: str, values: Mapping[str, str]) -> str:
    for name in PROMPT_VARIABLES:
        v = values.get(name)
        if v is None or not str(v).strip():
            raise ConfigError(f"prompt variable {name!r} is missing or empty")
    return _PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), template)


def scene_text(example: RelationExample) -> str:
    spec = example.scene_spec
    if not spec:
        raise ConfigError(f"example {example.example_id!r} carries no scene_spec")
    lines = [f"- layout: 2x2 grid; attribute_type: {spec['attribute_type']}"]
    for key in ("tl", "tr", "bl", "br"):
        cell = spec["slots"][SLOT_NAMES[key]]
        lines.append(f"- {SLOT_NAMES[key]} ({SLOT_POSITIONS[key]}): {cell['object']}, "
                     f"{spec['attribute_type']} = {cell['value']}")
    return "\n".join(lines)


def prompt_variables(example: RelationExample, scene: str | None = None) -> dict[str, str]:
    return {
        "scene_text": scene if scene is not None else scene_text(example),
        "instruction": example.instruction,
        "layout": "2x2 grid",
        "attribute_type": example.attribute_type,
        "edited_side": SLOT_NAMES[example.edited_slot],
        "edited_position": SLOT_POSITIONS[example.edited_slot],
        "reference_side": SLOT_NAMES[example.reference_slot],
        "reference_position": SLOT_POSITIONS[example.reference_slot],
        "edited_object_name": example.edited_object_name,
        "reference_object_name": example.reference_object_name,
        "source_value": example.source_value,
        "target_value": example.target_value,
    }


def render_stage1_prompt(example: RelationExample, scene: str | None = None) -> str:
    return _fill(STAGE1_TEMPLATE, prompt_variables(example, scene))


def render_stage2_prompt(example: RelationExample, scene: str | None = None) -> str:
    return _fill(STAGE2_TEMPLATE, prompt_variables(example, scene))


_BLOCK_LINE = re.compile(r"^- (\w+): (.*)$")


def parse_prompt_metadata(prompt: str) -> dict[str, str]:
    """Recover the target-edit block of a rendered prompt."""
    start = prompt.index("Target edit information:")
    out: dict[str, str] = {}
    for line in prompt[start:].splitlines()[1:]:
        m = _BLOCK_LINE.match(line)
        if not m:
            break
        key, val = m.groups()
        if key in ("edited_side", "reference_side"):
            side, pos = re.match(r"^(.*) \((.*)\)$", val).groups()
            out[key] = side
            out[key.replace("side", "position")] = pos
        else:
            out[key] = val
    return out


@dataclass(frozen=True)
class ActivationVerdict:
    edit_activation_sufficient: bool | None
    activation_failure_type: str | None
    confidence: str | None = None
    reason_brief: str = ""
    warnings: tuple[str, ...] = ()

    @property
    def inconsistent(self) -> bool:
        return self.edit_activation_sufficient is True and self.activation_failure_type is not None


@dataclass(frozen=True)
class StructuralVerdict:
    slot_correct: bool | None = None
    edited_object_correct: bool | None = None
    reference_binding_correct: bool | None = None
    targeted_edit_sufficient: bool | None = None
    target_correct: bool | None = None
    under_edit: bool = False
    confidence: str | None = None
    reason_brief: str = ""
    warnings: tuple[str, ...] = ()

    @property
    def inconsistent(self) -> bool:
        return self.targeted_edit_sufficient is not True and self.target_correct is not None


def _ternary(obj: Mapping, key: str, warnings: list[str]) -> bool | None:
    v = obj.get(key)
    if v is None or isinstance(v, bool):
        return v
    if isinstance(v, str) and v.strip().lower() in ("true", "false", "null"):
        return {"true": True, "false": False, "null": None}[v.strip().lower()]
    warnings.append(f"{key}: unrecognized value {v!r} treated as null")
    return None


def _enum(obj: Mapping, key: str, allowed: Sequence[str], warnings: list[str]) -> str | None:
    v = obj.get(key)
    if v is None or (isinstance(v, str) and v.strip().lower() == "null"):
        return None
    if isinstance(v, str) and v.strip() in allowed:
        return v.strip()
    warnings.append(f"{key}: unrecognized value {v!r} treated as null")
    return None


def _load(text: str, stage: str) -> dict:
    try:
        obj = json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise VerdictParseError(f"{stage}: unparsable judge output ({exc})") from exc
    if not isinstance(obj, dict):
        raise VerdictParseError(f"{stage}: judge output is not a JSON object")
    return obj


def parse_activation(text: str) -> ActivationVerdict:
    obj = _load(text, "stage1")
    w: list[str] = []
    return ActivationVerdict(
        edit_activation_sufficient=_ternary(obj, "edit_activation_sufficient", w),
        activation_failure_type=_enum(obj, "activation_failure_type", ACTIVATION_FAILURES, w),
        confidence=_enum(obj, "confidence", CONFIDENCE, w),
        reason_brief=str(obj.get("reason_brief") or ""),
        warnings=tuple(w),
    )


def parse_structural(text: str) -> StructuralVerdict:
    obj = _load(text, "stage2")
    w: list[str] = []
    vals = {k: _ternary(obj, k, w) for k in STRUCTURAL_FIELDS}
    under = _ternary(obj, "under_edit", w) if "under_edit" in obj else False
    return StructuralVerdict(
        **vals,
        under_edit=under is True,
        confidence=_enum(obj, "confidence", CONFIDENCE, w),
        reason_brief=str(obj.get("reason_brief") or ""),
        warnings=tuple(w),
    )


def parse_verdicts(stage1_json: str, stage2_json: str | None) -> tuple[ActivationVerdict, StructuralVerdict | None]:
    """Raises VerdictParseError when either stage is unparsable; such outputs leave n_eval."""
    a = parse_activation(stage1_json)
    s = parse_structural(stage2_json) if stage2_json is not None else None
    return a, s


def derive_failure_label(a: ActivationVerdict, s: StructuralVerdict | None) -> str:
    if a.edit_activation_sufficient is False:
        return a.activation_failure_type if a.activation_failure_type in ACTIVATION_FAILURES else "under_edit"
    s = s if s is not None else StructuralVerdict()
    if s.slot_correct is False:
        return "wrong_slot"
    if s.edited_object_correct is False or s.reference_binding_correct is False:
        return "wrong_object_or_binding"
    if s.targeted_edit_sufficient is False or s.under_edit is True:
        return "under_edit"
    if s.target_correct is False:
        return "wrong_target_value"
    if a.edit_activation_sufficient is True and all(getattr(s, f) is True for f in STRUCTURAL_FIELDS):
        return "pass"
    return "undetermined"


@dataclass
class AuditReport:
    counts: dict[str, int]
    excluded: list[dict] = field(default_factory=list)
    inconsistent: list[str] = field(default_factory=list)

    @property
    def n_eval(self) -> int:
        return sum(self.counts.values())

    @property
    def n_pass(self) -> int:
        return self.counts.get("pass", 0)

    @property
    def n_slot(self) -> int:
        return self.counts.get("wrong_slot", 0)

    @property
    def n_bind(self) -> int:
        return self.counts.get("wrong_object_or_binding", 0)

    @property
    def n_under(self) -> int:
        return sum(self.counts.get(k, 0) for k in UNDER_EDIT_FAMILY)

    @property
    def n_target(self) -> int:
        return self.counts.get("wrong_target_value", 0)

    @property
    def n_undet(self) -> int:
        return self.counts.get("undetermined", 0)

    @property
    def pass_rate(self) -> float:
        return self.n_pass / self.n_eval

    @property
    def struct_err(self) -> float:
        return (self.n_slot + self.n_bind) / self.n_eval

    @property
    def under_edit(self) -> float:
        return self.n_under / self.n_eval

    def to_dict(self) -> dict:
        return {
            "kind": "audit",
            "n_eval": self.n_eval,
            "rates": {"pass_rate": self.pass_rate, "struct_err": self.struct_err, "under_edit": self.under_edit},
            "display": {
                "pass_rate": f"{round_half_away(100 * self.pass_rate, 1):.1f}%",
                "struct_err": f"{round_half_away(100 * self.struct_err, 1):.1f}%",
                "under_edit": f"{round_half_away(100 * self.under_edit, 1):.1f}%",
            },
            "counts": {
                "pass": self.n_pass,
                "under": self.n_under,
                "wrong_slot": self.n_slot,
                "wrong_binding": self.n_bind,
                "wrong_target": self.n_target,
                "undetermined": self.n_undet,
            },
            "label_counts": {k: self.counts.get(k, 0) for k in LABELS},
            "n_excluded": len(self.excluded),
            "excluded": self.excluded,
            "inconsistent_verdicts": self.inconsistent,
        }


def compute_rates(labels: Iterable[str]) -> AuditReport:
    labels = list(labels)
    if not labels:
        raise ConfigError("cannot compute audit rates over zero evaluated outputs")
    unknown = set(labels) - set(LABELS)
    if unknown:
        raise ConfigError(f"unknown failure labels: {sorted(unknown)}")
    c = Counter(labels)
    return AuditReport(counts={k: c.get(k, 0) for k in LABELS})


def audit_directory(verdict_dir: str | Path) -> AuditReport:
    """Read ``<id>.stage1.json`` (+ optional ``<id>.stage2.json``) files and label each output."""
    d = Path(verdict_dir)
    if not d.is_dir():
        raise ConfigError(f"verdict directory not found: {d}")
    stage1 = sorted(d.glob("*.stage1.json"))
    if not stage1:
        raise ConfigError(f"no *.stage1.json verdicts in {d}")
    labels, excluded, inconsistent = [], [], []
    for p in stage1:
        ex_id = p.name[: -len(".stage1.json")]
        p2 = d / f"{ex_id}.stage2.json"
        try:
            a, s = parse_verdicts(p.read_text(encoding="utf-8"),
                                  p2.read_text(encoding="utf-8") if p2.exists() else None)
        except VerdictParseError as exc:
            excluded.append({"example_id": ex_id, "reason": str(exc)})
            continue
        if a.inconsistent or (s is not None and s.inconsistent):
            inconsistent.append(ex_id)
        labels.append(derive_failure_label(a, s))
    if not labels:
        raise ConfigError(f"every verdict in {d} was excluded")
    report = compute_rates(labels)
    report.excluded = excluded
    report.inconsistent = inconsistent
    return report


def write_prompts(examples: Sequence[RelationExample], out_dir: str | Path) -> int:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    for ex in examples:
        (d / f"{ex.example_id}.stage1.txt").write_text(render_stage1_prompt(ex), encoding="utf-8")
        (d / f"{ex.example_id}.stage2.txt").write_text(render_stage2_prompt(ex), encoding="utf-8")
    return len(examples)


def replay_verdicts(label: str) -> tuple[dict, dict | None]:
    """Canonical (stage1, stage2) judge replies that produce ``label``; used for fixtures."""
    if label in ACTIVATION_FAILURES:
        return ({"edit_activation_sufficient": False, "activation_failure_type": label,
                 "confidence": "high", "reason_brief": "replay"}, None)
    s1 = {"edit_activation_sufficient": True, "activation_failure_type": None,
          "confidence": "high", "reason_brief": "replay"}
    s2 = dict.fromkeys(STRUCTURAL_FIELDS, True)
    s2.update(confidence="high", reason_brief="replay")
    if label == "under_edit":
        s2.update(targeted_edit_sufficient=False, target_correct=None)
    elif label == "wrong_slot":
        s2.update(slot_correct=False, targeted_edit_sufficient=None, target_correct=None)
    elif label == "wrong_object_or_binding":
        s2.update(reference_binding_correct=False, targeted_edit_sufficient=None, target_correct=None)
    elif label == "wrong_target_value":
        s2.update(target_correct=False)
    elif label == "undetermined":
        s2.update(targeted_edit_sufficient=None, target_correct=None)
    elif label != "pass":
        raise ConfigError(f"unknown label {label!r}")
    return s1, s2
