import json

from smpctd.cli import main


def test_gen_run_oracle_compare(tmp_path, capsys):
    stem = tmp_path / "d.csv"
    assert main(["gen-data", "--rows", "60", "--cols", "3", "--parties", "2", "--seed", "4",
                 "--spectrum", "3,1.5,0.5", "--clip", "8", "--out", str(stem)]) == 0
    parts = [str(tmp_path / f"d.party{i}.csv") for i in range(2)]
    model, ref = tmp_path / "model.json", tmp_path / "ref.json"
    assert main(["run", "--task", "pca", "--parties", "2", "--data", parts[0], "--data", parts[1],
                 "--iters", "40", "--model-out", str(model), "--metrics-out", str(tmp_path / "m.json"),
                 "--reveal-log", str(tmp_path / "log.jsonl")]) == 0
    assert main(["oracle", "--task", "pca", "--data", *parts, "--model-out", str(ref)]) == 0
    assert main(["compare", "--task", "pca", str(model), str(ref)]) == 0
    assert capsys.readouterr().out.strip().endswith("PASS")
    metrics = json.loads((tmp_path / "m.json").read_text())
    assert len(metrics) == 2 and metrics[0]["bytes_sent"] > 0
    labels = [json.loads(line)["subtask_label"] for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert labels == ["cpt_tot_col_avg", "power_iteration"]


def test_compare_fails_with_tight_tolerance(tmp_path, capsys):
    data = tmp_path / "x.csv"
    main(["gen-data", "--rows", "40", "--cols", "3", "--seed", "1", "--out", str(data)])
    ref = tmp_path / "ref.json"
    main(["oracle", "--task", "fa", "--data", str(data), "--model-out", str(ref)])
    obj = json.loads(ref.read_text())
    key = next(k for k in obj if "factors" in k)
    obj[key] = [v * 1.01 for v in obj[key]]
    (tmp_path / "bad.json").write_text(json.dumps(obj))
    capsys.readouterr()
    assert main(["compare", "--task", "fa", str(tmp_path / "bad.json"), str(ref), "--values-rel", "1e-3"]) == 1
    assert "FAIL: principal_factors" in capsys.readouterr().out


def test_plan_and_audit(tmp_path, capsys):
    plan = tmp_path / "plan.json"
    assert main(["plan", "--task", "pca", "--parties", "2", "--dims", "6", "--out", str(plan)]) == 0
    assert main(["audit", str(plan), "--parties", "2", "--params", "6"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_dealer_files(tmp_path):
    assert main(["dealer", "--kind", "matmul", "--shape", "2", "3", "4", "--count", "3", "--parties", "2",
                 "--seed", "1", "--out-dir", str(tmp_path)]) == 0
    assert len(list(tmp_path.iterdir())) == 2


def test_errors_exit_two(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("1,2\n3\n")
    assert main(["run", "--task", "pca", "--parties", "2", "--data", str(bad), "--data", str(bad)]) == 2
    assert "DimensionMismatch" in capsys.readouterr().err
