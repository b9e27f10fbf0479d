import json

import pytest

from difftopk.cli import load_config, main
from difftopk.harness import read_csv
from difftopk.selnet import ComparatorNetwork

INI = """\
[data]
n_classes = 6
dims = 4
per_class = 30
confusable_pairs = 1
[loss]
mode = sm+topk
pk = 0.5, 0.5
[operator]
name = diffsortnet
temperature = 0.5
[train]
max_epochs = 2
"""


def run(capsys, *args):
    code = main(list(args))
    out, err = capsys.readouterr()
    return code, [json.loads(line) for line in out.splitlines()], err


def test_gen_net_writes_loadable_network(capsys, tmp_path):
    path = tmp_path / "net.json"
    code, (rec,), _ = run(capsys, "gen-net", "--n", "16", "--k", "5", "--kind", "splitter",
                          "--verify", "--out", str(path))
    assert code == 0
    assert rec["depth"] == 10 and rec["verification"] == "verified (exhaustive)"
    net = ComparatorNetwork.from_json(path.read_text())
    assert net.depth == 10 and net.size == rec["size"]


def test_gen_net_sampled_verification(capsys):
    code, (rec,), _ = run(capsys, "gen-net", "--n", "100", "--k", "3", "--kind", "classic",
                          "--verify", "--trials", "50")
    assert code == 0 and rec["verification"] == "verified (sampled, 50 trials)"


def test_gen_net_sorter_ignores_k(capsys):
    code, (rec,), _ = run(capsys, "gen-net", "--n", "8", "--kind", "bitonic-sort")
    assert code == 0 and rec["k"] is None and rec["depth"] == 6


@pytest.mark.parametrize("args", [["gen-net", "--n", "8", "--kind", "splitter"],
                                  ["gen-net", "--n", "8", "--k", "2", "--kind", "heap"],
                                  ["no-such-command"], []])
def test_usage_errors_exit_2(capsys, args):
    assert main(args) == 2


def test_invalid_network_request_exits_1(capsys):
    code, _, err = run(capsys, "gen-net", "--n", "4", "--k", "9", "--kind", "splitter")
    assert code == 1 and "k" in err


def test_depth_table_check(capsys):
    code, rows, _ = run(capsys, "depth-table", "--n", "16", "--k-max", "3", "--check")
    assert code == 0
    assert rows[-1] == {"cells": 7, "mismatches": 0}
    assert {"n": 16, "k": 3, "construction": "splitter-selection", "depth": 7,
            "reference": 7} in rows


def test_bench_omit_timing_has_no_clock_fields(capsys):
    code, rows, _ = run(capsys, "bench-eq3", "--n", "16", "32", "--omit-timing")
    assert code == 0 and len(rows) == 4
    assert all("median_time" not in r for r in rows)


def test_bench_reports_fit(capsys):
    code, rows, _ = run(capsys, "bench-eq3", "--n", "16", "32")
    assert code == 0 and set(rows[-1]["fit"]) == {"topk-rows", "full-matrix"}


def test_bench_rejects_few_repeats(capsys):
    assert main(["bench-eq3", "--n", "16", "--repeats", "2"]) == 1


def test_gradcheck_pass_and_fail(capsys):
    code, rows, _ = run(capsys, "gradcheck", "--operator", "softsort", "--trials", "3", "--n", "6")
    assert code == 0 and rows[-1]["pass"] and len(rows) == 4
    code, rows, _ = run(capsys, "gradcheck", "--operator", "softsort", "--trials", "3", "--n", "6",
                        "--tol", "1e-15")
    assert code == 1 and not rows[-1]["pass"]


def test_gen_data_roundtrip(capsys, tmp_path):
    path = tmp_path / "d.csv"
    code, (rec,), _ = run(capsys, "gen-data", "--out", str(path), "--n-classes", "4",
                          "--confusable-pairs", "1", "--per-class", "10")
    assert code == 0 and rec["rows"] == 40 and len(rec["sha256"]) == 64
    assert read_csv(path, n_classes=4).features.shape == (40, 10)


def test_train_from_config(capsys, tmp_path):
    cfg = tmp_path / "t.ini"
    cfg.write_text(INI)
    metrics = tmp_path / "m.jsonl"
    code, rows, _ = run(capsys, "train", "--config", str(cfg), "--metrics", str(metrics))
    assert code == 0 and rows[-1]["summary"]["operator"] == "diffsortnet"
    assert len(metrics.read_text().splitlines()) == rows[-1]["summary"]["epochs"]


def test_train_bad_pk_names_field(capsys, tmp_path):
    cfg = tmp_path / "t.ini"
    cfg.write_text(INI.replace("pk = 0.5, 0.5", "pk = 0.5, 0.4"))
    code, _, err = run(capsys, "train", "--config", str(cfg))
    assert code == 1 and "loss.pk" in err


def test_train_bad_per_class_pk_names_class(capsys, tmp_path):
    cfg = tmp_path / "t.ini"
    cfg.write_text(INI + "[pk_per_class]\n3 = 0.2, 0.2\n")
    code, _, err = run(capsys, "train", "--config", str(cfg))
    assert code == 1 and "pk_per_class.3" in err


@pytest.mark.parametrize("text", ["[data]\nbogus = 1\n", "[weird]\nx = 1\n", "no section\n",
                                  INI.replace("max_epochs = 2", "max_epochs = two")])
def test_train_malformed_config_exits_2(capsys, tmp_path, text):
    cfg = tmp_path / "t.ini"
    cfg.write_text(text)
    assert main(["train", "--config", str(cfg)]) == 2


def test_train_missing_config_exits_2(capsys, tmp_path):
    assert main(["train", "--config", str(tmp_path / "absent.ini")]) == 2


def test_config_overrides_and_per_class(tmp_path):
    cfg = tmp_path / "t.ini"
    cfg.write_text(INI + "[pk_per_class]\n2 = 1\n")
    ds, tc = load_config(str(cfg), ["operator.name=softsort", "train.lr=0.01"])
    assert tc.operator.operator == "softsort" and tc.lr == 0.01
    assert tc.pk.for_class(2).weights == (1.0,) and tc.pk.for_class(0).weights == (0.5, 0.5)
    assert ds.n_classes == 6


def test_config_inline_comments(tmp_path):
    cfg = tmp_path / "t.ini"
    cfg.write_text(INI.replace("name = diffsortnet", "name = softsort   ; a comment")
                   + "[pk_per_class]   ; overrides\n1 = 1   # top-1 only\n")
    _, tc = load_config(str(cfg))
    assert tc.operator.operator == "softsort" and tc.pk.for_class(1).weights == (1.0,)
