import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from otgcd.cli import ExperimentConfig, emit_figure_data, main, run_sweep
from otgcd.data import load
from otgcd.errors import ConfigInvalid, MissingRun
from otgcd.sinkhorn import TransportProblem, sinkhorn_plan

TINY_TRAIN = {"epochs": 2, "batch_size": 32, "queue_capacity": 64, "hidden_dim": 16,
              "embed_dim": 8}
TINY_SPEC = {"num_known": 3, "num_unknown": 3, "input_dim": 6, "mean_scale": 3.0,
             "per_known_count": 30, "rho": 2.0}


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def dataset_dir(tmp_path):
    out = tmp_path / "ds"
    assert main(["gen", "--known", "3", "--unknown", "3", "--dim", "6", "--rho", "2",
                 "--per-class", "30", "--seed", "1", "--out", str(out)]) == 0
    return out


def test_gen_flags(dataset_dir):
    ds = load(dataset_dir)
    assert ds.num_classes == 6 and ds.features.shape[1] == 6
    np.testing.assert_array_equal(ds.unlabeled_counts, [30] * 3 + [15] * 3)
    assert ds.spec.seed == 1


def test_train_eval_figure(tmp_path, dataset_dir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY_TRAIN))
    run = tmp_path / "run"
    assert main(["train", "--dataset", str(dataset_dir), "--config", str(cfg),
                 "--out", str(run)]) == 0
    for name in ("metrics.csv", "report.json", "predictions.json", "checkpoint.bin"):
        assert (run / name).exists()

    out = tmp_path / "eval.json"
    assert main(["eval", "--dataset", str(dataset_dir), "--predictions",
                 str(run / "predictions.json"), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    trained = json.loads((run / "report.json").read_text())["final"]
    for key in ("acc_all", "acc_known", "acc_unknown_aware", "acc_unknown_agnostic",
                "predicted_class_counts"):
        assert report[key] == trained[key]

    assert main(["figure", str(run)]) == 0
    rows = read_csv(run / "class_counts.csv")
    preds = np.array(json.loads((run / "predictions.json").read_text()))
    truth = load(dataset_dir).unlabeled_counts
    for row in rows:
        k = int(row["class"])
        assert int(row["predicted_count"]) == int(np.sum(preds == k))
        assert int(row["abs_deviation"]) == abs(int(truth[k]) - int(np.sum(preds == k)))


def test_eval_with_prior(tmp_path, dataset_dir):
    ds = load(dataset_dir)
    truth = ds.labels[ds.unlabeled_index]
    (tmp_path / "p.json").write_text(json.dumps(truth.tolist()))
    (tmp_path / "r.json").write_text(json.dumps([1 / 6] * 6))
    assert main(["eval", "--dataset", str(dataset_dir), "--predictions", str(tmp_path / "p.json"),
                 "--prior", str(tmp_path / "r.json"), "--out", str(tmp_path / "e.json")]) == 0
    report = json.loads((tmp_path / "e.json").read_text())
    assert report["acc_all"] == 1.0
    assert report["prior_l1_error"] == pytest.approx(np.abs(1 / 6 - ds.unlabeled_prior).sum())


def test_eval_length_mismatch(tmp_path, dataset_dir, capsys):
    (tmp_path / "p.json").write_text("[0, 1, 2]")
    code = main(["eval", "--dataset", str(dataset_dir), "--predictions",
                 str(tmp_path / "p.json"), "--out", str(tmp_path / "e.json")])
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_sinkhorn_subcommand(tmp_path):
    P = np.random.default_rng(0).dirichlet(np.ones(3), size=5)
    problem = {"predictions": P.tolist(), "row_marginal": [0.2] * 5,
               "col_marginal": [0.5, 0.3, 0.2], "smoothing": 2.0, "max_iters": 500,
               "tolerance": 1e-10}
    (tmp_path / "prob.json").write_text(json.dumps(problem))
    assert main(["sinkhorn", str(tmp_path / "prob.json"), "--out", str(tmp_path / "plan.json")]) == 0
    got = json.loads((tmp_path / "plan.json").read_text())
    ref = sinkhorn_plan(TransportProblem(P, np.full(5, 0.2), np.array([0.5, 0.3, 0.2]),
                                         2.0, 500, 1e-10))
    np.testing.assert_array_equal(np.array(got["plan"]), ref.plan)
    assert got["iterations_used"] == ref.iterations_used


def test_figure_data_examples(tmp_path):
    run = tmp_path / "run"
    run.mkdir()
    (run / "report.json").write_text(json.dumps({"truth_class_counts": [2, 1, 0, 3]}))
    (run / "predictions.json").write_text(json.dumps([0, 0, 1, 3, 3, 3]))
    rows = read_csv(emit_figure_data(run))
    assert [int(r["abs_deviation"]) for r in rows] == [0, 0, 0, 0]
    assert rows[2]["predicted_count"] == "0"
    (run / "predictions.json").write_text(json.dumps([0, 0, 0, 0, 0, 0]))
    rows = read_csv(emit_figure_data(run, tmp_path / "c.csv"))
    assert [r["predicted_count"] for r in rows] == ["6", "0", "0", "0"]
    with pytest.raises(MissingRun):
        emit_figure_data(tmp_path / "missing")


def sweep_config(tmp_path, **kw):
    base = {"dataset": {"spec": TINY_SPEC}, "train": TINY_TRAIN, "axis": "ablation",
            "axis_values": ["full"], "seeds": [0], "out": str(tmp_path / "sweep")}
    base.update(kw)
    return ExperimentConfig.from_dict(base)


def test_sweep_single_run_matches_report(tmp_path):
    cfg = sweep_config(tmp_path)
    outcome = run_sweep(cfg)
    assert outcome == {"rows": outcome["rows"], "runs": 1, "failed": 0}
    (row,) = read_csv(tmp_path / "sweep" / "summary.csv")
    report = json.loads((tmp_path / "sweep" / "ablation=full" / "seed=0" / "eval.json").read_text())
    for m in ("acc_all", "acc_known", "acc_unknown_aware", "acc_unknown_agnostic",
              "prior_l1_error"):
        assert float(row[f"{m}_mean"]) == report[m]
        assert float(row[f"{m}_std"]) == 0.0


def test_sweep_identical_seeds_have_zero_spread(tmp_path):
    run_sweep(sweep_config(tmp_path, seeds=[3, 3]))
    (row,) = read_csv(tmp_path / "sweep" / "summary.csv")
    assert row["runs_ok"] == "2"
    assert all(float(row[k]) == 0.0 for k in row if k.endswith("_std"))


def test_rho_sweep_on_reference_spec(tmp_path):
    from otgcd.benchmarks import reference_spec
    spec = reference_spec().to_dict()
    cfg = sweep_config(tmp_path, dataset={"spec": spec}, axis="rho", axis_values=[1, 5],
                       train={**TINY_TRAIN, "epochs": 1, "batch_size": 256, "queue_capacity": 512})
    assert run_sweep(cfg)["failed"] == 0
    rows = read_csv(tmp_path / "sweep" / "summary.csv")
    assert [float(r["value"]) for r in rows] == [1.0, 5.0]
    assert all(v != "" for r in rows for v in r.values())
    runs = read_csv(tmp_path / "sweep" / "runs.csv")
    assert [r["status"] for r in runs] == ["ok", "ok"]


def test_sweep_exit_codes(tmp_path):
    spec = {**TINY_SPEC, "profile": "exponential"}
    ok = {"dataset": {"spec": TINY_SPEC}, "train": TINY_TRAIN, "axis": "rho",
          "axis_values": [2.0], "seeds": [0], "out": str(tmp_path / "a")}
    partial = {**ok, "dataset": {"spec": spec}, "axis_values": [2.0, 1000.0],
               "out": str(tmp_path / "b")}
    failed = {**partial, "axis_values": [1000.0], "out": str(tmp_path / "c")}
    codes = []
    for i, body in enumerate((ok, partial, failed)):
        path = tmp_path / f"exp{i}.json"
        path.write_text(json.dumps(body))
        codes.append(main(["sweep", str(path)]))
    assert codes == [0, 1, 2]
    rows = read_csv(tmp_path / "b" / "summary.csv")
    assert rows[1]["runs_failed"] == "1" and rows[1]["acc_all_mean"] == ""
    runs = read_csv(tmp_path / "b" / "runs.csv")
    assert "InfeasibleProfile" in runs[1]["error"]


def test_experiment_config_validation(tmp_path):
    with pytest.raises(ConfigInvalid):
        sweep_config(tmp_path, seeds=[])
    with pytest.raises(ConfigInvalid):
        sweep_config(tmp_path, axis="lr")
    with pytest.raises(ConfigInvalid):
        sweep_config(tmp_path, axis_values=["w/o everything"])
    with pytest.raises(ConfigInvalid):
        sweep_config(tmp_path, dataset={"path": str(tmp_path / "nowhere")})
    with pytest.raises(ConfigInvalid):
        sweep_config(tmp_path, train={"epochs": -1})


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "otgcd", "--help"], capture_output=True,
                         text=True, check=True)
    for cmd in ("gen", "train", "eval", "sinkhorn", "sweep"):
        assert cmd in out.stdout
