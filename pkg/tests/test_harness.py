import csv
import io
import json
import statistics
import warnings

import pytest

import mtml.harness as H
from mtml.cli import main
from mtml.network import load_checkpoint
from mtml.tasks import TASK_IDS
from mtml.trainers import RunReport, TrainConfig

QUICK_TRAIN = dict(max_epochs=3, meta_max_epochs=2, finetune_max_epochs=2, net={"trunk_widths": [8], "d_repr": 6, "head_widths": {t: [4] for t in TASK_IDS}})
QUICK_DATA = H.DataConfig(n_train=48, n_val=32, n_test=16)


def quick_grid(out, seeds=(0, 1)):
    return H.default_grid(out, TrainConfig(**QUICK_TRAIN), QUICK_DATA, seeds)


@pytest.fixture(autouse=True)
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


class TestGrid:
    def test_shape(self):
        specs = H.default_specs()
        assert len(specs) == 26
        assert [s.id for s in specs if s.paradigm == "single"] == ["1.1", "1.2", "1.3", "1.4"]
        families = {s.id.split(".")[0] for s in specs}
        assert families == {str(i) for i in range(1, 8)}

    def test_row_7_1(self):
        spec = {s.id: s for s in H.default_specs()}["7.1"]
        assert spec.paradigm == "mtml_finetune"
        assert spec.trained_tasks == ("T2", "T3", "T4") and spec.added_tasks == ("T1",)

    @pytest.mark.parametrize("family", ["5", "6", "7"])
    def test_leave_one_out_covers_each_task(self, family):
        specs = [s for s in H.default_specs() if s.id.startswith(family + ".")]
        left = [next(t for t in TASK_IDS if t not in s.trained_tasks) for s in specs]
        assert sorted(left) == list(TASK_IDS)
        for s in specs:
            assert len(s.trained_tasks) == 3
            assert s.added_tasks in ((), tuple(t for t in TASK_IDS if t not in s.trained_tasks))

    def test_4_4_has_no_new_task(self):
        spec = {s.id: s for s in H.default_specs()}["4.4"]
        assert spec.paradigm == "mtml" and spec.trained_tasks == TASK_IDS and spec.added_tasks == ()

    def test_duplicate_ids(self, tmp_path):
        s = H.ExperimentSpec("1.1", "single", ("T1",))
        with pytest.raises(ValueError):
            H.GridManifest([s, s], tmp_path)

    @pytest.mark.parametrize(
        "kw",
        [
            dict(paradigm="mtl", trained_tasks=("T1", "T2"), added_tasks=("T3",)),
            dict(paradigm="mtl_finetune", trained_tasks=("T1", "T2")),
            dict(paradigm="single", trained_tasks=("T1", "T2")),
            dict(paradigm="transfer", trained_tasks=("T1",)),
        ],
    )
    def test_spec_validation(self, kw):
        with pytest.raises(ValueError):
            H.ExperimentSpec("9.9", **kw)

    def test_filter(self):
        grid = H.default_grid()
        assert [s.id for s in grid.select("1")] == ["1.1", "1.2", "1.3", "1.4"]
        assert [s.id for s in grid.select("4.3")] == ["4.3"]
        assert [s.id for s in grid.select("[67].1")] == ["6.1", "7.1"]
        assert len(grid.select(None)) == 26
        assert not H.matches("1.1", "11")

    def test_hash_covers_settings(self, tmp_path):
        a = quick_grid(tmp_path)
        b = H.default_grid(tmp_path, TrainConfig(**{**QUICK_TRAIN, "inner_lr": 0.02}), QUICK_DATA)
        c = H.default_grid(tmp_path, TrainConfig(**QUICK_TRAIN), H.DataConfig(world_seed=1, n_train=48, n_val=32, n_test=16))
        assert len({a.config_hash, b.config_hash, c.config_hash}) == 3
        spec = a.specs[0]
        assert a.run_hash(spec, 0) != a.run_hash(spec, 1)


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        summary = H.run(quick_grid(out), "1,2.1,3.2,4.1,4.4")
    return out, summary


class TestRun:
    def test_summary(self, finished):
        _, summary = finished
        assert len(summary.executed) == 16 and not summary.skipped and summary.exit_code == 0

    def test_files(self, finished):
        out, _ = finished
        assert (out / "MANIFEST.json").exists() and (out / "report.md").exists()
        manifest = json.loads((out / "MANIFEST.json").read_text())
        assert manifest["config_hash"] == quick_grid(out).config_hash
        assert len(list((out / "runs").glob("*.json"))) == 16

    def test_csv_rows_reconcile(self, finished):
        out, _ = finished
        rows = list(csv.DictReader(io.StringIO((out / "aggregate.csv").read_text())))
        assert tuple(rows[0]) == H.CSV_COLUMNS
        expected = 0
        for doc in H.load_runs(out).values():
            expected += sum(len(m) for m in doc["report"]["test"].values())
        assert len(rows) == expected

    def test_exactly_one_test_evaluation(self, finished):
        out, _ = finished
        assert all(d["report"]["test_evaluations"] == 1 for d in H.load_runs(out).values())

    def test_finetune_runs_cover_new_tasks(self, finished):
        out, _ = finished
        runs = H.load_runs(out)
        assert set(runs[("3.2", 0)]["report"]["test"]) == {"T1", "T2", "T3", "T4"}
        assert runs[("4.4", 0)]["report"]["pre_finetune_test"] is not None
        assert runs[("1.1", 0)]["report"]["epochs_finetune"] == 0

    def test_checkpoint_loads(self, finished):
        out, _ = finished
        doc = H.load_runs(out)[("3.2", 1)]
        p, _ = load_checkpoint(out / doc["checkpoint"])
        assert p.tasks == TASK_IDS

    def test_rerun_trains_nothing(self, finished, monkeypatch):
        out, _ = finished

        def boom(*a, **k):
            raise AssertionError("training should have been skipped")

        monkeypatch.setattr(H, "execute", boom)
        before = (out / "aggregate.csv").read_bytes()
        summary = H.run(quick_grid(out), "1,2.1,3.2,4.1,4.4")
        assert not summary.executed and len(summary.skipped) == 16
        assert (out / "aggregate.csv").read_bytes() == before

    def test_changed_settings_rerun(self, finished):
        out, _ = finished
        grid = H.default_grid(out, TrainConfig(**{**QUICK_TRAIN, "lr": 2e-3}), QUICK_DATA, (0,))
        assert len(H.run(grid, "1.1").executed) == 1
        # restore for the remaining tests
        H.run(quick_grid(out), "1.1")

    def test_mean_std_recomputed_from_raw(self, finished):
        out, _ = finished
        raw = [json.loads((out / "runs" / f"2.1_s{s}.json").read_text())["report"]["test"]["T2"]["mae"] for s in (0, 1)]
        rows = {(r["exp_id"], r["task"], r["metric"]): r for r in csv.DictReader(io.StringIO((out / "summary.csv").read_text()))}
        row = rows[("2.1", "T2", "mae")]
        assert float(row["mean"]) == pytest.approx(statistics.fmean(raw), abs=1e-15)
        assert float(row["std"]) == pytest.approx(statistics.stdev(raw), abs=1e-15)

    def test_report_blank_cells(self, finished):
        out, _ = finished
        text = (out / "report.md").read_text()
        line = next(l for l in text.splitlines() if l.startswith("| 1.2 |"))
        cells = [c.strip() for c in line.strip("|").split("|")]
        assert cells[2] == "" and cells[3] != "" and all(c == "" for c in cells[4:])
        assert "# Failures" in text and "none" in text.split("# Failures")[1]


def test_failed_run_is_reported_not_aggregated(tmp_path, monkeypatch):
    def broken(task, splits, cfg, seed):
        r = RunReport("single", (task,), seed, "x")
        r.failed, r.error = True, "NumericError: non-finite training loss"
        return r

    monkeypatch.setattr(H, "train_single", broken)
    summary = H.run(quick_grid(tmp_path, seeds=(0,)), "1.1")
    assert summary.exit_code == 1 and summary.failed == [("1.1", 0)]
    assert (tmp_path / "aggregate.csv").read_text().strip() == ",".join(H.CSV_COLUMNS)
    assert "1.1 seed 0: NumericError" in (tmp_path / "report.md").read_text()


def test_parallel_matches_serial(tmp_path):
    H.run(quick_grid(tmp_path / "a"), "2.1,7.4")
    H.run(quick_grid(tmp_path / "b"), "2.1,7.4", jobs=2)
    assert (tmp_path / "a" / "aggregate.csv").read_bytes() == (tmp_path / "b" / "aggregate.csv").read_bytes()


def test_sparkline():
    assert H.sparkline([3, 2, 1]) == "█▅▁"
    assert H.sparkline([1, 1]) == "▁▁"
    assert len(H.sparkline(range(100), width=10)) == 10


class TestCLI:
    def write_config(self, tmp_path):
        cfg = tmp_path / "quick.toml"
        cfg.write_text(
            "seeds = [0]\n[train]\nmax_epochs = 2\nmeta_max_epochs = 2\nfinetune_max_epochs = 2\n"
            "[train.net]\ntrunk_widths = [8]\nd_repr = 6\n[data]\nn_train = 48\nn_val = 32\nn_test = 16\n"
        )
        return cfg

    def test_list(self, capsys):
        assert main(["list", "--filter", "7"]) == 0
        out = capsys.readouterr().out
        assert "7.1  mtml_finetune  T2, T3, T4 (+ T1)" in out and "6.1" not in out

    def test_run_and_report(self, tmp_path, capsys):
        cfg = self.write_config(tmp_path)
        out = tmp_path / "o"
        assert main(["run", "--config", str(cfg), "--filter", "1.2", "--out", str(out), "--inner-lr", "0.02"]) == 0
        assert "executed 1" in capsys.readouterr().out
        assert main(["run", "--config", str(cfg), "--filter", "1.2", "--out", str(out), "--inner-lr", "0.02"]) == 0
        assert "executed 0, skipped 1" in capsys.readouterr().out
        assert main(["run", "--config", str(cfg), "--filter", "1.2", "--out", str(out), "--inner-lr", "0.02", "--force"]) == 0
        assert "executed 1" in capsys.readouterr().out
        manifest = json.loads((out / "MANIFEST.json").read_text())
        assert manifest["settings"]["train"]["inner_lr"] == 0.02
        assert manifest["seeds"] == [0]
        assert main(["report", "--out", str(out)]) == 0
        assert "| 1.2 | T2 |" in capsys.readouterr().out

    def test_seeds_flag(self, tmp_path):
        cfg = self.write_config(tmp_path)
        out = tmp_path / "o"
        assert main(["run", "--config", str(cfg), "--filter", "1.4", "--out", str(out), "--seeds", "3-4"]) == 0
        assert sorted(p.name for p in (out / "runs").iterdir()) == ["1.4_s3.json", "1.4_s4.json"]

    def test_bad_filter(self, tmp_path, capsys):
        assert main(["run", "--filter", "9", "--out", str(tmp_path)]) == 2
        assert "matches no experiment" in capsys.readouterr().err

    def test_unwritable_output(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["run", "--filter", "1.1", "--out", str(blocker / "sub")]) == 2

    def test_bad_config_section(self, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("[optimizer]\nlr = 1\n")
        assert main(["list", "--config", str(cfg)]) == 2

    def test_combos(self, capsys):
        assert main(["combos", "T1", "T2", "T3"]) == 0
        assert len(capsys.readouterr().out.strip().splitlines()) == 5

    def test_report_missing(self, tmp_path, capsys):
        assert main(["report", "--out", str(tmp_path)]) == 2
