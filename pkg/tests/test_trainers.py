import numpy as np
import pytest

from mtml.tasks import TASK_IDS, make_splits
from mtml.trainers import RunReport, StopState, TrainConfig, finetune, meta_train, train_mtl, train_single

from conftest import tiny_net


def fast_cfg(**kw):
    base = dict(net=tiny_net(8), max_epochs=6, meta_max_epochs=3, finetune_max_epochs=4, task_patience=2, global_patience=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small_splits(world):
    return make_splits(world, (96, 32, 32), seed=0)


def scripted(best_epoch, length, best=1.0):
    # strictly worse than the best everywhere except at best_epoch
    return [best if e == best_epoch else best + 1.0 + 0.001 * e for e in range(1, length + 1)]


class TestStopState:
    def test_task_stop_at_best_plus_35(self):
        stop = StopState(["T1"])
        for e, v in enumerate(scripted(3, 100), start=1):
            stop.update(e, {"T1": v})
            if stop.stopped_tasks:
                break
        assert stop.stopped_tasks == {"T1": 38}

    def test_global_stop_at_best_plus_50(self):
        stop = StopState([], global_patience=50)
        for e, v in enumerate(scripted(7, 200), start=1):
            stop.update(e, {}, total=v)
            if stop.done:
                break
        assert stop.global_stop == 57

    def test_improvement_resets(self):
        stop = StopState(["T1"], task_patience=3)
        for e, v in enumerate([5, 4, 4.5, 4.5, 3, 3.5, 3.5, 3.5], start=1):
            stop.update(e, {"T1": v})
        assert stop.stopped_tasks == {"T1": 8}

    def test_newly_stopped_returned_once(self):
        stop = StopState(["T1", "T2"], task_patience=1, global_patience=100)
        assert stop.update(1, {"T1": 1.0, "T2": 1.0}) == []
        assert stop.update(2, {"T1": 2.0, "T2": 0.5}) == ["T1"]
        assert stop.update(3, {"T1": 0.1, "T2": 0.4}) == []
        assert stop.stopped_tasks == {"T1": 2}

    def test_monitor_limits_global_total(self):
        stop = StopState(["T1", "T2"], task_patience=100, global_patience=2, monitor=["T2"])
        for e in range(1, 4):
            # T1 keeps improving but only T2 is watched
            stop.update(e, {"T1": 1.0 / e, "T2": 1.0})
        assert stop.global_stop == 3

    def test_monitored_tasks_stopping_ends_run(self):
        stop = StopState(["T1", "T2"], task_patience=1, global_patience=100, monitor=["T2"])
        stop.update(1, {"T1": 1.0, "T2": 1.0})
        stop.update(2, {"T1": 0.5, "T2": 1.0})
        assert stop.stopped_tasks == {"T2": 2} and stop.done and not stop.all_stopped

    def test_all_stopped_is_done(self):
        stop = StopState(["T1"], task_patience=1, global_patience=100)
        stop.update(1, {"T1": 1.0})
        stop.update(2, {"T1": 1.0})
        assert stop.all_stopped and stop.done


class TestConfig:
    @pytest.mark.parametrize("kw", [{"inner_scope": "x"}, {"finetune_mode": "x"}, {"batch_size": 0}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_dict_round_trip(self):
        cfg = TrainConfig(net=tiny_net(), lr=3e-3)
        again = TrainConfig(**cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()


class TestSingle:
    def test_deterministic(self, small_splits):
        a = train_single("T2", small_splits, fast_cfg(), 0)
        b = train_single("T2", small_splits, fast_cfg(), 0)
        assert a.to_dict() == b.to_dict()
        assert a.params.equals(b.params)

    def test_one_test_evaluation(self, small_splits):
        r = train_single("T1", small_splits, fast_cfg(), 0)
        assert r.test_evaluations == 1
        assert set(r.test) == {"T1"} and "accuracy" in r.test["T1"]
        assert r.epochs_total >= 1 and r.epochs_finetune == 0

    def test_report_round_trip(self, small_splits):
        r = train_single("T4", small_splits, fast_cfg(), 1)
        assert RunReport.from_dict(r.to_dict()).to_dict() == r.to_dict()

    def test_unknown_task(self, small_splits):
        with pytest.raises(KeyError):
            train_single("T9", small_splits, fast_cfg(), 0)

    def test_t2_regression_quality(self, world):
        sp = make_splits(world, (1024, 256, 512), seed=0)
        r = train_single("T2", sp, TrainConfig(), 0)
        assert r.history[-1]["val"]["T2"]["mae"] < 0.1


class TestMTL:
    def test_metrics_for_listed_tasks_only(self, small_splits):
        r = train_mtl(["T1", "T3"], small_splits, fast_cfg(), 0)
        assert set(r.test) == {"T1", "T3"}
        assert all(set(row["val"]) == {"T1", "T3"} for row in r.history)

    def test_needs_two_tasks(self, small_splits):
        with pytest.raises(ValueError):
            train_mtl(["T1"], small_splits, fast_cfg(), 0)

    def test_frozen_after_stop(self, small_splits, monkeypatch):
        # record each head after every epoch and check stopped heads never move
        import mtml.trainers as tr

        snapshots = []
        real = tr._val_row

        def spy(p, *a, **k):
            snapshots.append({t: {n: v.data.copy() for n, v in h.items()} for t, h in p.heads.items()})
            return real(p, *a, **k)

        monkeypatch.setattr(tr, "_val_row", spy)
        r = train_mtl(TASK_IDS, small_splits, fast_cfg(max_epochs=40, lr=0.05, task_patience=1, global_patience=30), 0)
        stops = r.stopping["train"]["task_stop_epoch"]
        assert stops, "no task stopped; the scenario needs at least one"
        for task, e in stops.items():
            ref = snapshots[e - 1][task]
            for snap in snapshots[e:]:
                assert all(np.array_equal(snap[task][n], ref[n]) for n in ref)

    def test_equal_weights_differ_from_uncertainty(self, small_splits):
        a = train_mtl(["T1", "T2"], small_splits, fast_cfg(uncertainty=True), 0)
        b = train_mtl(["T1", "T2"], small_splits, fast_cfg(uncertainty=False), 0)
        assert a.test != b.test
        assert all(float(v.data) == 0.0 for v in b.params.logvars.values())


class TestMeta:
    def test_rejects_two_sources(self, small_splits):
        with pytest.raises(ValueError):
            meta_train(["T1", "T2"], small_splits, fast_cfg(), 0)

    def test_override_warns(self, small_splits):
        with pytest.warns(UserWarning):
            _, r = meta_train(["T1", "T2"], small_splits, fast_cfg(allow_two_sources=True), 0)
        assert r.epochs_total >= 1

    def test_deterministic_and_units(self, small_splits):
        p1, r1 = meta_train(["T1", "T2", "T3"], small_splits, fast_cfg(), 0)
        p2, r2 = meta_train(["T1", "T2", "T3"], small_splits, fast_cfg(), 0)
        assert p1.equals(p2) and r1.to_dict() == r2.to_dict()
        assert r1.epoch_unit == "meta-epoch"
        assert all(np.isfinite(row["meta_val"]) for row in r1.history)


class TestFinetune:
    def test_overlap_rejected(self, small_splits):
        p, _ = meta_train(["T1", "T2", "T3"], small_splits, fast_cfg(), 0)
        with pytest.raises(ValueError):
            finetune(p, ["T1", "T2", "T3"], ["T3"], "all_params", small_splits, fast_cfg(), 0)

    def test_heads_only_keeps_trunk_and_old_heads(self, small_splits):
        p, mr = meta_train(["T1", "T2", "T3"], small_splits, fast_cfg(), 0)
        before = p.copy()
        r = finetune(p, ["T1", "T2", "T3"], ["T4"], "heads_only", small_splits, fast_cfg(), 0, report=mr)
        q = r.params
        for k, v in q.trunk.items():
            assert np.array_equal(v.data, before.trunk[k].data)
        for t in ("T1", "T2", "T3"):
            assert all(np.array_equal(v.data, before.heads[t][k].data) for k, v in q.heads[t].items())
        assert set(r.test) == set(TASK_IDS)
        assert r.epochs_finetune >= 1 and r.test_evaluations == 1
        # input ParamSet is not modified
        assert p.equals(before)

    def test_all_params_moves_trunk(self, small_splits):
        p, _ = meta_train(["T1", "T2", "T3"], small_splits, fast_cfg(), 0)
        r = finetune(p, ["T1", "T2", "T3"], ["T4"], "all_params", small_splits, fast_cfg(), 0)
        assert not np.array_equal(r.params.trunk["W0"].data, p.trunk["W0"].data)
        assert float(r.params.logvars["T4"].data) != 0.0 or r.epochs_finetune == 0

    def test_new_head_seeded(self, small_splits):
        p, _ = meta_train(["T1", "T2", "T3"], small_splits, fast_cfg(), 0)
        a = finetune(p, ["T1", "T2", "T3"], ["T4"], "heads_only", small_splits, fast_cfg(), 5)
        b = finetune(p, ["T1", "T2", "T3"], ["T4"], "heads_only", small_splits, fast_cfg(), 5)
        assert a.params.equals(b.params)
