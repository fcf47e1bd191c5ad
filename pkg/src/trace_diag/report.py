"""Report envelopes, deterministic serialization and table-shaped CSV views."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import __version__
from .errors import FormatError

TOOL = "trace-diag"
TABLE_FILES = {
    "geometry": "geometry_table.csv",
    "probe": "probe_table.csv",
    "token_route": "token_route_table.csv",
    "audit": "audit_table.csv",
    "attention": "attention_table.csv",
}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def envelope(command: str, config: Mapping, seeds: Sequence[int], result: Mapping) -> dict:
    return {
        "tool": TOOL,
        "version": __version__,
        "command": command,
        "config": dict(config),
        "config_hash": config_hash(config),
        "seeds": [int(s) for s in seeds],
        "result": dict(result),
    }


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj), encoding="utf-8")
    return path


def read_report(path: str | Path) -> dict:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise FormatError(f"report not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(obj, dict) or obj.get("tool") != TOOL or "result" not in obj:
        raise FormatError(f"{path}: not a {TOOL} report")
    return obj


def _fmt3(x) -> str:
    return "" if x is None else f"{x:.3f}"


def geometry_rows(result: Mapping) -> list[dict]:
    v, d = result["values"], result["display"]
    return [
        {"metric": "effective_rank", "pre": v["eff_rank_pre"], "post": v["eff_rank_post"],
         "delta_pct": v["eff_rank_delta_pct"], "pre_display": d["eff_rank_pre"],
         "post_display": d["eff_rank_post"], "delta_display": d["eff_rank_delta"]},
        {"metric": "feature_variance", "pre": v["var_pre"], "post": v["var_post"],
         "delta_pct": v["var_delta_pct"], "pre_display": d["var_pre"],
         "post_display": d["var_post"], "delta_display": d["var_delta"]},
        {"metric": "linear_cka", "pre": "", "post": v["cka"], "delta_pct": "",
         "pre_display": "", "post_display": d["cka"], "delta_display": ""},
    ]


def probe_rows(result: Mapping) -> list[dict]:
    rows = []
    for fam, cell in result["summary"].items():
        pre, post = cell.get("pre") or {}, cell.get("post") or {}
        rows.append({
            "probe": result["probe"],
            "view": result["view"],
            "family": fam,
            "chance": cell.get("chance"),
            "pre_mean": pre.get("mean"),
            "pre_std": pre.get("std"),
            "post_mean": post.get("mean"),
            "post_std": post.get("std"),
            "display": f"{_fmt3(pre.get('mean'))}->{_fmt3(post.get('mean'))}",
        })
    return rows


def token_route_rows(result: Mapping) -> list[dict]:
    rows = []
    for view, stages in result["views"].items():
        for stage, r in stages.items():
            for subset in ("all", "correct"):
                m = r[f"margins_{subset}"]
                rows.append({
                    "view": view,
                    "stage": stage,
                    "subset": subset,
                    "test_acc_mean": r["test_acc"]["mean"],
                    "test_acc_std": r["test_acc"]["std"],
                    "n_examples": m["n_examples"],
                    "mean_margin": m["mean_margin"],
                    "mean_norm_entropy": m["mean_norm_entropy"],
                    "mean_top1_mass": m["mean_top1_mass"],
                    "mean_query_mass": m["mean_query_mass"],
                    "n_undefined_positive_mass": m["n_undefined_positive_mass"],
                    "max_completeness_error": m["max_completeness_error"],
                })
    return rows


def audit_rows(result: Mapping) -> list[dict]:
    row = {"n_eval": result["n_eval"]}
    row.update(result["counts"])
    row.update(result["rates"])
    row.update({f"{k}_display": v for k, v in result["display"].items()})
    row["n_excluded"] = result["n_excluded"]
    return [row]


def attention_rows(result: Mapping) -> list[dict]:
    rows = []
    groups = sorted(result["shares"] or {})
    for g in groups:
        def pick(d):
            return "" if d is None else d.get(g)
        rows.append({
            "row": f"share/{g}",
            "overall": result["shares"][g],
            "early": pick(result["early"]),
            "late": pick(result["late"]),
            "dual": pick(result["layer_class"]["dual"]),
            "single": pick(result["layer_class"]["single"]),
        })
    scalars = [("entropy", result["entropy"]), ("gini", result["gini"])]
    scalars += [(f"top{k}_mass", v) for k, v in sorted(result["topk_mass"].items(), key=lambda kv: int(kv[0]))]
    scalars += [(f"head_jaccard@{k}", v) for k, v in result["head_jaccard"].items()]
    for name, value in scalars:
        rows.append({"row": name, "overall": value, "early": "", "late": "", "dual": "", "single": ""})
    return rows


ROW_BUILDERS = {
    "geometry": geometry_rows,
    "probe": probe_rows,
    "token_route": token_route_rows,
    "audit": audit_rows,
    "attention": attention_rows,
}


def table_rows(kind: str, result: Mapping) -> list[dict]:
    if kind not in ROW_BUILDERS:
        raise FormatError(f"no table layout for report kind {kind!r}")
    return ROW_BUILDERS[kind](result)


def rows_to_csv(rows: Iterable[Mapping]) -> str:
    rows = list(rows)
    buf = io.StringIO()
    if not rows:
        return ""
    fields = list(rows[0])
    for r in rows[1:]:
        fields += [k for k in r if k not in fields]
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", restval="")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if v is None else v) for k, v in r.items()})
    return buf.getvalue()


def join_reports(paths: Sequence[str | Path], out_dir: str | Path) -> list[Path]:
    """Group reports by kind and write one CSV per table, each row tagged with its source file."""
    by_kind: dict[str, list[dict]] = {}
    for p in sorted(Path(x) for x in paths):
        rep = read_report(p)
        kind = rep["result"].get("kind")
        if kind not in ROW_BUILDERS:
            continue
        for row in table_rows(kind, rep["result"]):
            by_kind.setdefault(kind, []).append({"source": p.name, **row})
    if not by_kind:
        raise FormatError("no tabulable reports among the inputs")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for kind in sorted(by_kind):
        path = out_dir / TABLE_FILES[kind]
        path.write_text(rows_to_csv(by_kind[kind]), encoding="utf-8")
        written.append(path)
    return written
