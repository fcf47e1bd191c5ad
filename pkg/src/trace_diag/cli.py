"""Command-line entry point: one subcommand per diagnostic plus synth, report and demo.

Exit codes: 0 success, 1 validation error, 2 computation error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .attention import read_traces, routing_suite
from .audit import audit_directory, write_prompts
from .compose import (
    DEFAULT_POOLS,
    admit,
    compose_dataset,
    load_pools,
    read_relations,
    render_instruction,
    render_verifier_prompt,
    safe_name,
    sample_atomics,
    write_jsonl,
)
from .errors import ConfigError, TraceDiagError
from .geometry import geometry_report
from .probes import FAMILIES, ProbeConfig, dataset_from_feature_set, run_probe_suite
from .report import envelope, join_reports, rows_to_csv, table_rows, write_json
from .store import VIEWS, load_feature_set, read_tensor, validate_feature_dir
from .synth import DEMO_BUNDLE, write_bundle
from .token_route import ROUTE_CONFIG, token_route_suite

OUT_ENV = "TRACE_DIAG_OUT"
DEMO_PROBE_CONFIG = {"pca_dim": 48}
DEMO_ROUTE_CONFIG = {"pca_dim": 64}


def resolve_out(out: str | None, default: str) -> Path:
    """Relative outputs land under $TRACE_DIAG_OUT when it is set."""
    p = Path(out or default)
    base = os.environ.get(OUT_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    return p


def _require(path: str | None, what: str, is_dir: bool = False) -> Path:
    if not path:
        raise ConfigError(f"missing required {what} path")
    p = Path(path)
    ok = p.is_dir() if is_dir else p.is_file()
    if not ok:
        raise ConfigError(f"{what} not found: {p}")
    return p


def _load_json(path: str | None, what: str) -> dict:
    if path is None:
        return {}
    p = _require(path, what)
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{p}: expected a JSON object")
    return obj


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _emit(args, command: str, config: dict, seeds, result: dict, default_name: str) -> Path:
    path = resolve_out(args.out, default_name)
    write_json(path, envelope(command, config, seeds, result))
    if args.format == "csv" and result.get("kind"):
        path.with_suffix(".csv").write_text(rows_to_csv(table_rows(result["kind"], result)), encoding="utf-8")
    print(f"wrote {path}")
    return path


def _probe_config(args, extra: dict | None = None, base: ProbeConfig | None = None) -> ProbeConfig:
    d = (base or ProbeConfig()).to_dict()
    d.update(extra or {})
    if args.seed is not None:
        d["seeds"] = [args.seed]
    return ProbeConfig.from_dict(d)


def cmd_compose(args) -> int:
    pools = load_pools(_require(args.pools, "pools file")) if args.pools else DEFAULT_POOLS
    seed = 0 if args.seed is None else args.seed
    if args.scenes < 1:
        raise ConfigError(f"--scenes must be positive, got {args.scenes}")
    n_atomics = args.atomics or max(240, 2 * args.scenes)
    atomics = sample_atomics(pools, n_atomics, seed)
    if args.verifier_replies:
        rdir = _require(args.verifier_replies, "verifier reply directory", is_dir=True)
        replies = {p.stem: p.read_text(encoding="utf-8") for p in sorted(rdir.glob("*.json"))}
        atomics = admit(atomics, replies)
        require_verified = True
    else:
        require_verified = False
    scenes, examples = compose_dataset(atomics, args.scenes, seed, require_verified=require_verified)
    out = resolve_out(args.out, "compose")
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl((a.to_record() for a in atomics), out / "atomics.jsonl")
    write_jsonl((s.to_record() for s in scenes), out / "scenes.jsonl")
    write_jsonl((e.to_record() for e in examples), out / "relations.jsonl")
    for sub in ("atomic", "verifier", "relation"):
        (out / "prompts" / sub).mkdir(parents=True, exist_ok=True)
    for a in atomics:
        (out / "prompts" / "atomic" / f"{safe_name(a.uid)}.txt").write_text(a.prompt, encoding="utf-8")
        (out / "prompts" / "verifier" / f"{safe_name(a.uid)}.txt").write_text(
            render_verifier_prompt(a), encoding="utf-8")
    for e in examples:
        (out / "prompts" / "relation" / f"{safe_name(e.example_id)}.txt").write_text(
            render_instruction(e), encoding="utf-8")
    splits = {}
    for e in examples:
        splits.setdefault(e.split, set()).add(e.split_group_id)
    result = {
        "kind": "compose",
        "n_atomics": len(atomics),
        "n_admitted": sum(a.verified == "pass" for a in atomics) if require_verified else len(atomics),
        "n_scenes": len(scenes),
        "n_examples": len(examples),
        "directions": {t: sum(e.direction_tag == t for e in examples) for t in ("forward", "inverted")},
        "split_groups": {k: len(v) for k, v in sorted(splits.items())},
        "verification": "verifier replies" if require_verified else "not verified (metadata only)",
    }
    config = {"pools": args.pools or "default", "scenes": args.scenes, "atomics": n_atomics,
              "verifier_replies": args.verifier_replies}
    args.out = str(out / "compose.json")
    _emit(args, "compose", config, [seed], result, "compose.json")
    return 0


def cmd_import(args) -> int:
    manifest = _require(args.manifest, "manifest")
    summary = validate_feature_dir(manifest)
    summary["kind"] = "import"
    _emit(args, "import", {"manifest": args.manifest}, [], summary, "import.json")
    return 0


def cmd_geometry(args) -> int:
    pre_p, post_p = _require(args.pre, "pre-stage tensor"), _require(args.post, "post-stage tensor")
    pre, post = read_tensor(pre_p), read_tensor(post_p)
    for name, m in (("pre", pre), ("post", post)):
        if m.ndim != 2:
            raise ConfigError(f"--{name} must hold an n x d matrix, got rank {m.ndim}")
    result = {"kind": "geometry", "n": int(pre.shape[0]), "d_pre": int(pre.shape[1]),
              "d_post": int(post.shape[1]), **geometry_report(pre, post).to_dict()}
    _emit(args, "geometry", {"pre": args.pre, "post": args.post}, [], result, "geometry.json")
    return 0


def _run_probe(args, extra: dict | None = None) -> dict:
    manifest = _require(args.manifest, "manifest")
    config = _probe_config(args, {**(extra or {}), **_load_json(args.config, "probe config")})
    families = _csv_list(args.families) if args.families else list(FAMILIES)
    fs = load_feature_set(manifest)
    ds = dataset_from_feature_set(fs, view=args.view)
    report = run_probe_suite(ds, config, probe=args.probe, families=families)
    return {"config": config, "result": report.to_dict()}


def cmd_probe(args) -> int:
    out = _run_probe(args)
    config = {"manifest": args.manifest, "probe": args.probe, "view": args.view,
              "families": args.families, "probe_config": out["config"].to_dict()}
    _emit(args, "probe", config, out["config"].seeds, out["result"], "probe.json")
    return 0


def _run_token_route(args, base: ProbeConfig = ROUTE_CONFIG) -> tuple[ProbeConfig, dict]:
    manifest = _require(args.manifest, "manifest")
    views = _csv_list(args.views)
    bad = [v for v in views if v not in VIEWS]
    if bad:
        raise ConfigError(f"unknown views {bad}; choose from {sorted(VIEWS)}")
    config = _probe_config(args, _load_json(args.config, "probe config"), base=base)
    fs = load_feature_set(manifest)
    return config, token_route_suite(fs, views=views, config=config, family=args.family)


def cmd_token_route(args) -> int:
    config, result = _run_token_route(args)
    cfg = {"manifest": args.manifest, "views": args.views, "family": args.family,
           "probe_config": config.to_dict()}
    _emit(args, "token-route", cfg, config.seeds, result, "token_route.json")
    return 0


def _ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in _csv_list(text)]
    except ValueError as exc:
        raise ConfigError(f"--ks must be comma-separated integers, got {text!r}") from exc
    if not ks or min(ks) < 1:
        raise ConfigError(f"--ks must list positive integers, got {text!r}")
    return ks


def cmd_attention(args) -> int:
    traces_dir = _require(args.traces, "trace directory", is_dir=True)
    ks = _ks(args.ks)
    traces = read_traces(traces_dir)
    result = routing_suite(traces, ks=ks, jaccard_k=args.jaccard_k)
    config = {"traces": args.traces, "ks": ks, "jaccard_k": args.jaccard_k}
    _emit(args, "attention", config, [], result, "attention.json")
    return 0


def cmd_audit(args) -> int:
    if args.emit_prompts:
        rel = _require(args.relations, "relations file")
        out = resolve_out(args.out, "audit_prompts")
        n = write_prompts(read_relations(rel), out)
        print(f"wrote {2 * n} prompts to {out}")
        return 0
    vdir = _require(args.verdicts, "verdict directory", is_dir=True)
    result = audit_directory(vdir).to_dict()
    _emit(args, "audit", {"verdicts": args.verdicts}, [], result, "audit.json")
    return 0


def cmd_synth(args) -> int:
    spec = _load_json(args.spec, "synth spec") if args.spec else DEMO_BUNDLE
    out = resolve_out(args.out, "synth")
    truth = write_bundle(spec, out)
    write_json(out / "ground_truth.json", envelope("synth", spec, [], {"kind": "synth", **truth}))
    print(f"wrote synthetic bundle to {out}")
    return 0


def cmd_report(args) -> int:
    paths: list[Path] = []
    for item in args.reports:
        p = Path(item)
        if p.is_dir():
            paths += sorted(p.glob("*.json"))
        elif p.is_file():
            paths.append(p)
        else:
            raise ConfigError(f"report input not found: {p}")
    written = join_reports(paths, resolve_out(args.out, "tables"))
    for w in written:
        print(f"wrote {w}")
    return 0


def cmd_demo(args) -> int:
    """Synth bundle, then geometry, probe, token-route, attention and audit reports plus tables."""
    spec = _load_json(args.spec, "synth spec") if args.spec else DEMO_BUNDLE
    root = resolve_out(args.out, "demo")
    bundle = root / "synth"
    truth = write_bundle(spec, bundle)
    write_json(bundle / "ground_truth.json", envelope("synth", spec, [], {"kind": "synth", **truth}))
    reports = root / "reports"
    manifest = str(bundle / "features" / "manifest.jsonl")

    def sub(**kw):
        return argparse.Namespace(seed=args.seed, format=args.format, config=None, **kw)

    # Report configs carry bundle-relative paths so relocating the demo keeps them byte-identical.
    geo = sub(pre=str(bundle / "pooled" / "pre.trcf"), post=str(bundle / "pooled" / "post.trcf"),
              out=str(reports / "geometry.json"))
    pre, post = read_tensor(geo.pre), read_tensor(geo.post)
    _emit(geo, "geometry", {"pre": "synth/pooled/pre.trcf", "post": "synth/pooled/post.trcf"}, [],
          {"kind": "geometry", "n": int(pre.shape[0]), "d_pre": int(pre.shape[1]),
           "d_post": int(post.shape[1]), **geometry_report(pre, post).to_dict()}, "geometry.json")

    pr = sub(manifest=manifest, probe="linear", view="mixed", families=None, out=str(reports / "probe.json"))
    out = _run_probe(pr, DEMO_PROBE_CONFIG)
    _emit(pr, "probe", {"manifest": "synth/features/manifest.jsonl", "probe": "linear", "view": "mixed",
                        "families": None, "probe_config": out["config"].to_dict()},
          out["config"].seeds, out["result"], "probe.json")

    tr = sub(manifest=manifest, views="mixed,text,query", family="edited_slot",
             out=str(reports / "token_route.json"))
    config, result = _run_token_route(tr, base=ProbeConfig.from_dict({**ROUTE_CONFIG.to_dict(),
                                                                      **DEMO_ROUTE_CONFIG}))
    _emit(tr, "token-route", {"manifest": "synth/features/manifest.jsonl", "views": tr.views,
                              "family": tr.family, "probe_config": config.to_dict()},
          config.seeds, result, "token_route.json")

    at = sub(out=str(reports / "attention.json"))
    _emit(at, "attention", {"traces": "synth/traces", "ks": [16, 32], "jaccard_k": 16}, [],
          routing_suite(read_traces(bundle / "traces")), "attention.json")

    au = sub(out=str(reports / "audit.json"))
    _emit(au, "audit", {"verdicts": "synth/verdicts"}, [], audit_directory(bundle / "verdicts").to_dict(),
          "audit.json")

    for w in join_reports(sorted(reports.glob("*.json")), root / "tables"):
        print(f"wrote {w}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="root seed; for probes it replaces the configured seed list")
    common.add_argument("--out", default=None, help=f"output path (relative paths resolve under ${OUT_ENV})")
    common.add_argument("--format", choices=("json", "csv"), default="json",
                        help="csv also writes the table-shaped CSV next to the JSON report")

    parser = argparse.ArgumentParser(prog="trace-diag", description="Connector diagnostics toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("compose", parents=[common], help="compose grid scenes and relation examples")
    p.add_argument("--pools", help="JSON pools file (defaults to the built-in pools)")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--atomics", type=int, default=None, help="number of atomic specs to sample")
    p.add_argument("--verifier-replies", help="directory of <uid>.json verifier replies")
    p.set_defaults(func=cmd_compose)

    p = subs.add_parser("import", parents=[common], help="validate a feature directory")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_import)

    p = subs.add_parser("geometry", parents=[common], help="effective rank, variance and CKA")
    p.add_argument("--pre", required=True)
    p.add_argument("--post", required=True)
    p.set_defaults(func=cmd_geometry)

    p = subs.add_parser("probe", parents=[common], help="linear or MLP probe suite")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON probe config overrides")
    p.add_argument("--probe", choices=("linear", "mlp"), default="linear")
    p.add_argument("--view", choices=sorted(VIEWS), default="mixed")
    p.add_argument("--families", help="comma-separated subset of probe families")
    p.set_defaults(func=cmd_probe)

    p = subs.add_parser("token-route", parents=[common], help="per-token margin decomposition")
    p.add_argument("--manifest", required=True)
    p.add_argument("--views", default="mixed,text,query")
    p.add_argument("--config", help="JSON probe config overrides")
    p.add_argument("--family", default="edited_slot")
    p.set_defaults(func=cmd_token_route)

    p = subs.add_parser("attention", parents=[common], help="condition-attention routing statistics")
    p.add_argument("--traces", required=True)
    p.add_argument("--ks", default="16,32")
    p.add_argument("--jaccard-k", type=int, default=16)
    p.set_defaults(func=cmd_attention)

    p = subs.add_parser("audit", parents=[common], help="label judge verdicts or emit judge prompts")
    p.add_argument("--verdicts", help="directory of <id>.stage1.json / <id>.stage2.json files")
    p.add_argument("--emit-prompts", action="store_true", help="write stage-1/2 prompts instead")
    p.add_argument("--relations", help="relations.jsonl (with --emit-prompts)")
    p.set_defaults(func=cmd_audit)

    p = subs.add_parser("synth", parents=[common], help="write a synthetic bundle with ground truth")
    p.add_argument("--spec", help="JSON bundle spec (defaults to the demo bundle)")
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("report", parents=[common], help="join report JSON files into table CSVs")
    p.add_argument("reports", nargs="+", help="report files or directories")
    p.set_defaults(func=cmd_report)

    p = subs.add_parser("demo", parents=[common], help="run the whole pipeline on synthetic data")
    p.add_argument("--spec", help="JSON bundle spec (defaults to the demo bundle)")
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TraceDiagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
