import filecmp
import json

import numpy as np
import pytest

from trace_diag.cli import main
from trace_diag.store import write_tensor

REPORTS = ("geometry.json", "probe.json", "token_route.json", "attention.json", "audit.json")


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo") / "run"
    assert main(["demo", "--out", str(out)]) == 0
    return out


def test_demo_writes_all_reports(demo):
    for name in REPORTS:
        rep = json.loads((demo / "reports" / name).read_text())
        assert rep["tool"] == "trace-diag"
        assert rep["version"]
        assert len(rep["config_hash"]) == 64
        assert "seeds" in rep
    tables = sorted(p.name for p in (demo / "tables").iterdir())
    assert tables == ["attention_table.csv", "audit_table.csv", "geometry_table.csv", "probe_table.csv",
                      "token_route_table.csv"]


def test_demo_byte_identical(demo, tmp_path):
    again = tmp_path / "run"
    assert main(["demo", "--out", str(again)]) == 0
    a, b = tree_bytes(demo), tree_bytes(again)
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []


def test_geometry_identity_connector(tmp_path, capsys):
    spec = {"plant": {"n": 200, "d": 80}, "connector": None}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert main(["synth", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "b")]) == 0
    rc = main(["geometry", "--pre", str(tmp_path / "b/pooled/pre.trcf"), "--post", str(tmp_path / "b/pooled/post.trcf"),
               "--out", str(tmp_path / "g.json"), "--format", "csv"])
    assert rc == 0
    res = json.loads((tmp_path / "g.json").read_text())["result"]
    assert abs(res["values"]["eff_rank_delta_pct"]) < 1e-6
    assert abs(res["values"]["var_delta_pct"]) < 1e-6
    assert res["values"]["cka"] == pytest.approx(1.0, abs=1e-6)
    assert (tmp_path / "g.csv").read_text().startswith("metric,")


def test_missing_manifest_exit_1(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "manifest.jsonl"
    assert main(["probe", "--manifest", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_bad_tensor_exit_1(tmp_path, capsys):
    (tmp_path / "bad.trcf").write_bytes(b"TRCF\x01")
    assert main(["geometry", "--pre", str(tmp_path / "bad.trcf"), "--post", str(tmp_path / "bad.trcf")]) == 1
    assert "bad.trcf" in capsys.readouterr().err


def test_degenerate_input_exit_2(tmp_path, capsys):
    write_tensor(tmp_path / "c.trcf", np.ones((10, 4), dtype=np.float32))
    rc = main(["geometry", "--pre", str(tmp_path / "c.trcf"), "--post", str(tmp_path / "c.trcf"),
               "--out", str(tmp_path / "g.json")])
    assert rc == 2
    assert capsys.readouterr().err.startswith("error:")


def test_out_env_override(tmp_path, monkeypatch, demo):
    monkeypatch.setenv("TRACE_DIAG_OUT", str(tmp_path / "envout"))
    assert main(["attention", "--traces", str(demo / "synth" / "traces"), "--out", "att.json"]) == 0
    assert (tmp_path / "envout" / "att.json").is_file()
    assert main(["audit", "--verdicts", str(demo / "synth" / "verdicts")]) == 0
    rep = json.loads((tmp_path / "envout" / "audit.json").read_text())
    assert rep["result"]["display"] == {"pass_rate": "25.2%", "struct_err": "58.0%", "under_edit": "12.6%"}


def test_compose_cli(tmp_path):
    out = tmp_path / "c"
    assert main(["compose", "--scenes", "20", "--seed", "3", "--out", str(out)]) == 0
    rels = (out / "relations.jsonl").read_text().splitlines()
    assert len(rels) == 40
    assert len(list((out / "prompts" / "relation").iterdir())) == 40
    rep = json.loads((out / "compose.json").read_text())
    assert rep["result"]["directions"] == {"forward": 20, "inverted": 20}
    assert rep["seeds"] == [3]
    again = tmp_path / "c2"
    main(["compose", "--scenes", "20", "--seed", "3", "--out", str(again)])
    assert filecmp.cmp(out / "relations.jsonl", again / "relations.jsonl", shallow=False)


def test_compose_with_verifier_replies(tmp_path):
    replies = tmp_path / "replies"
    replies.mkdir()
    for i in range(240):
        (replies / f"atom-{i:06d}.json").write_text('{"all_pass": %s}' % ("true" if i % 4 else "false"))
    out = tmp_path / "c"
    assert main(["compose", "--scenes", "10", "--verifier-replies", str(replies), "--out", str(out)]) == 0
    atoms = {json.loads(l)["uid"]: json.loads(l) for l in (out / "atomics.jsonl").read_text().splitlines()}
    for line in (out / "scenes.jsonl").read_text().splitlines():
        for cell in json.loads(line)["slots"].values():
            assert atoms[cell["atomic_id"]]["verified"] == "pass"


def test_audit_emit_prompts(tmp_path):
    main(["compose", "--scenes", "3", "--out", str(tmp_path / "c")])
    assert main(["audit", "--emit-prompts", "--relations", str(tmp_path / "c" / "relations.jsonl"),
                 "--out", str(tmp_path / "prompts")]) == 0
    assert len(list((tmp_path / "prompts").glob("*.txt"))) == 12


def test_report_join(tmp_path, demo):
    assert main(["report", str(demo / "reports"), "--out", str(tmp_path / "t")]) == 0
    audit = (tmp_path / "t" / "audit_table.csv").read_text().splitlines()
    assert audit[0].startswith("source,n_eval")
    assert ",119," in audit[1]
    assert main(["report", str(tmp_path / "missing.json")]) == 1


def test_import_and_probe_cli(tmp_path, demo):
    manifest = demo / "synth" / "features" / "manifest.jsonl"
    assert main(["import", "--manifest", str(manifest), "--out", str(tmp_path / "i.json")]) == 0
    (tmp_path / "cfg.json").write_text(json.dumps({"pca_dim": 32}))
    assert main(["probe", "--manifest", str(manifest), "--config", str(tmp_path / "cfg.json"), "--probe", "linear",
                 "--families", "edited_slot", "--seed", "1", "--out", str(tmp_path / "p.json")]) == 0
    rep = json.loads((tmp_path / "p.json").read_text())
    assert rep["seeds"] == [1]
    assert [c["seed"] for c in rep["result"]["cells"]] == [1, 1]
    (tmp_path / "bad.json").write_text(json.dumps({"pca": 3}))
    assert main(["probe", "--manifest", str(manifest), "--config", str(tmp_path / "bad.json")]) == 1


def test_token_route_cli_bad_view(demo):
    assert main(["token-route", "--manifest", str(demo / "synth" / "features" / "manifest.jsonl"),
                 "--views", "mixed,audio"]) == 1
