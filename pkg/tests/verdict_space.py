"""Independent reference for the failure-label priority chain plus reference audit counts and rates."""

import itertools

from trace_diag.audit import ActivationVerdict, StructuralVerdict

TERNARY = (True, False, None)
FAILURE_TYPES = ("no_visible_change", "partial_or_non_target_change", "object_missing_or_unreadable", None)

# per-model label counts: pass, under, slot, binding, target, undetermined
AUDIT_COUNTS = {
    "U-Hidden": dict(pass_=30, under=15, slot=38, binding=31, target=3, undet=2),
    "U-Query": dict(pass_=31, under=17, slot=46, binding=40, target=4, undet=1),
    "Kiwi-Edit": dict(pass_=52, under=20, slot=35, binding=21, target=6, undet=3),
    "Wan-Query": dict(pass_=34, under=15, slot=31, binding=46, target=8, undet=1),
}
# (PassRate, StructErr, UnderEdit) in percent
AUDIT_RATES = {
    "U-Hidden": (25.2, 58.0, 12.6),
    "U-Query": (22.3, 61.9, 12.2),
    "Kiwi-Edit": (38.0, 40.9, 14.6),
    "Wan-Query": (25.2, 57.0, 11.1),
}
_COLUMN_LABEL = {"pass_": "pass", "under": "under_edit", "slot": "wrong_slot",
                 "binding": "wrong_object_or_binding", "target": "wrong_target_value", "undet": "undetermined"}


def count_labels(model):
    return [_COLUMN_LABEL[k] for k, n in AUDIT_COUNTS[model].items() for _ in range(n)]


def d3_oracle(a, s):
    """Written directly from the priority list, rule by rule."""
    sufficient = a.edit_activation_sufficient
    rules = []
    rules.append((sufficient is False, a.activation_failure_type or "under_edit"))
    slot = s.slot_correct if s else None
    obj = s.edited_object_correct if s else None
    bind = s.reference_binding_correct if s else None
    enough = s.targeted_edit_sufficient if s else None
    flag = s.under_edit if s else False
    target = s.target_correct if s else None
    rules.append((slot is False, "wrong_slot"))
    rules.append((obj is False or bind is False, "wrong_object_or_binding"))
    rules.append((enough is False or flag is True, "under_edit"))
    rules.append((target is False, "wrong_target_value"))
    rules.append((sufficient is True and slot is True and obj is True and bind is True and enough is True
                  and target is True, "pass"))
    for hit, label in rules:
        if hit:
            return label
    return "undetermined"


def enumerate_verdicts():
    for suff, ftype in itertools.product(TERNARY, FAILURE_TYPES):
        a = ActivationVerdict(suff, ftype)
        yield a, None
        for fields in itertools.product(TERNARY, repeat=5):
            for flag in (False, True):
                yield a, StructuralVerdict(*fields, under_edit=flag)
