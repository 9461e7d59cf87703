import csv
import json

import pytest

from dlsol.cli import main
from dlsol.dl_geometry import DLVertex, box_at, dl_distance, dl_origin
from dlsol.pipeline import ConfigError, merge_settings, parse_map_spec


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_analyze_identity(tmp_path, capsys):
    out = tmp_path / "r.json"
    code, _, err = run(["analyze", "--space-src", "dl:3,2", "--space-dst", "dl:3,2", "--map", "identity",
                        "--L", "8", "--seed", "7", "--out", str(out)], capsys)
    assert code == 0, err
    rep = json.loads(out.read_text())
    assert set(rep) == {"params", "config", "scale_stats", "good_boxes", "orientation", "drift", "verdict",
                        "provenance"}
    assert rep["verdict"]["result"] == "yes"
    assert rep["provenance"]["wall_clock_s"] is None
    assert rep["params"]["seed"] == 7 and "jobs" not in rep["params"]


def test_analyze_hairpin_exits_one(capsys):
    code, out, err = run(["analyze", "--map", "hairpin", "--L", "8"], capsys)
    assert code == 1
    assert json.loads(out)["verdict"]["result"] == "no"
    assert "FAIL verdict: not height-respecting" in err


def test_flip_refutation_dumps_witness(tmp_path, capsys):
    d = tmp_path / "csv"
    code, out, err = run(["step2", "--map", "flip", "--L", "8", "--csv-dir", str(d)], capsys)
    assert code == 1 and "no-flips refutation" in err
    ref = json.loads(out)["orientation"]["refutations"][0]
    assert ref["result"] == "refuted"
    path = [DLVertex.parse(s) for s in (d / "witness_0.txt").read_text().splitlines()]
    assert [str(v) for v in path] == ref["witness"]
    assert all(dl_distance(a, b) == 1 for a, b in zip(path, path[1:]))


def test_csv_dumps(tmp_path, capsys):
    d = tmp_path / "csv"
    code, _, err = run(["analyze", "--space-src", "dl:2,2", "--map", "scrambled:fraction=0.05,seed=3",
                        "--L", "8", "--csv-dir", str(d), "--out", str(tmp_path / "r.json")], capsys)
    assert code == 0, err
    rows = list(csv.reader((d / "drift.csv").open()))
    assert rows[0] == ["pair_id", "d(x,y)", "drift", "bound"] and len(rows) > 50
    assert all(float(r[2]) <= float(r[3]) for r in rows[1:])
    head = next(csv.reader((d / "scale_stats.csv").open()))
    assert head == ["path_id", "s", "r_s", "delta_s"]
    # edge dump: vertex literals round-trip and every edge has length one
    verts, edges = {}, []
    for line in (d / "box_edges.txt").read_text().splitlines():
        if line.startswith("v "):
            _, k, lit = line.split(" ", 2)
            verts[int(k)] = DLVertex.parse(lit)
        elif line.startswith("e "):
            edges.append(tuple(int(x) for x in line.split()[1:]))
    assert len(verts) == box_at(dl_origin(2, 2), 8).size
    assert all(dl_distance(verts[a], verts[b]) == 1 for a, b in edges)


def test_jobs_do_not_change_reports(tmp_path, capsys):
    texts = []
    for j in (1, 3):
        out = tmp_path / f"r{j}.json"
        code, _, _ = run(["analyze", "--space-src", "dl:3,2", "--map", "standard", "--L", "4",
                          "--jobs", str(j), "--out", str(out)], capsys)
        assert code == 0
        texts.append(out.read_bytes())
    assert texts[0] == texts[1]


def test_config_then_flags(tmp_path, capsys):
    cfgfile = tmp_path / "c.yaml"
    cfgfile.write_text("space_src: dl:2,2\nL: 4\nseed: 3\npipeline:\n  ledger:\n    pairwise_c: 5.0\n")
    code, out, _ = run(["verdict", "--config", str(cfgfile), "--seed", "9", "--ledger", "q_bilip=2"], capsys)
    rep = json.loads(out)
    assert code == 0
    assert rep["params"]["seed"] == 9 and rep["params"]["L"] == 4
    assert rep["params"]["source"] == {"kind": "DL", "m": 2, "n": 2}
    assert rep["config"]["ledger"]["pairwise_c"] == 5.0 and rep["config"]["ledger"]["q_bilip"] == 2.0
    s = merge_settings(str(cfgfile), {"pipeline": {"theta": 0.2}})
    assert s["pipeline"] == {"ledger": {"pairwise_c": 5.0}, "theta": 0.2}


@pytest.mark.parametrize("argv", [
    ["analyze", "--map", "nonsense"],
    ["analyze", "--space-src", "dl:2,3"],
    ["analyze", "--space-src", "sol:2,1"],
    ["analyze", "--L", "3"],                  # no ladder scale divides 3
    ["analyze", "--theta", "1.5"],
    ["analyze", "--ledger", "nope=1"],
    ["analyze", "--bogus"],
])
def test_config_errors_exit_two(argv, capsys):
    code, _, err = run(argv, capsys)
    assert code == 2 and "config error" in err


def test_unknown_config_key(tmp_path, capsys):
    f = tmp_path / "c.yaml"
    f.write_text("colour: red\n")
    assert run(["analyze", "--config", str(f)], capsys)[0] == 2


def test_table_map(tmp_path, capsys):
    box = box_at(dl_origin(2, 2), 4)
    lines = [f"{v} -> {v}  # fixed" for v in box.vertices()]
    f = tmp_path / "map.txt"
    f.write_text("\n".join(lines) + "\n")
    code, out, err = run(["step1", "--space-src", "dl:2,2", "--map", str(f), "--L", "4"], capsys)
    assert code == 0, err
    assert json.loads(out)["params"]["map_description"]["name"] == "table"


def test_simple_subcommands(capsys):
    code, out, _ = run(["space-info", "--space", "dl:3,2", "--L", "4"], capsys)
    info = json.loads(out)["result"]
    assert code == 0 and info["level_sizes"] == [81, 54, 36, 24, 16]
    assert len(set(info["level_mu"])) == 1
    code, out, _ = run(["space-info", "--space", "sol:2,1", "--L", "2"], capsys)
    assert code == 0 and json.loads(out)["result"]["width_x"] > 0
    code, out, _ = run(["distance-selftest", "--space", "dl:2,2", "--L", "4"], capsys)
    assert code == 0 and json.loads(out)["result"]["mismatches"] == 0
    code, out, _ = run(["tile", "--space", "dl:3,2", "--L", "4"], capsys)
    assert code == 0 and json.loads(out)["result"]["exact"]["2"]["tiles"] == 9 + 4
    code, out, _ = run(["tile", "--space", "sol:1,1", "--L", "4"], capsys)
    assert code == 0
    code, out, _ = run(["scales", "--space", "dl:3,2", "--L", "8", "--map", "identity"], capsys)
    assert code == 0 and json.loads(out)["result"]["ladder"] == [2, 4, 8]


def test_step3_too_small(capsys):
    code, _, err = run(["step3", "--space-src", "dl:2,2", "--L", "2"], capsys)
    assert code == 1 and "step3" in err


def test_lemma_suite_small(capsys):
    code, out, err = run(["lemma-suite", "--space", "dl:2,2", "--L", "4", "--jobs", "2"], capsys)
    assert code == 0, err
    res = json.loads(out)["result"]
    assert set(res) == {"distance_oracle", "tiling", "bipartite_table", "quadrilaterals", "trapping"}
    assert res["trapping"]["worst_ratio"] >= 1.0


def test_lemma_suite_dl32(capsys):
    code, out, err = run(["lemma-suite", "--space", "dl:3,2", "--L", "6"], capsys)
    assert code == 0, err
    res = json.loads(out)["result"]
    assert res["trapping"]["instances"] == 1767 and res["trapping"]["worst_ratio"] == 1.0
    assert res["quadrilaterals"]["counts"]["mixed"] == 0


def test_map_spec_parsing():
    assert parse_map_spec("identity") == ("identity", {})
    assert parse_map_spec("scrambled:fraction=0.05,seed=3") == ("scrambled", {"fraction": 0.05, "seed": 3})
    assert parse_map_spec({"kind": "hairpin", "z0": 2}) == ("hairpin", {"z0": 2})
    with pytest.raises(ConfigError):
        parse_map_spec("standard:perm")
