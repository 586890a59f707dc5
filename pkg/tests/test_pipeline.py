import json

import numpy as np
import pytest

from masksparsity import checkpoint as ckpt
from masksparsity import schemas
from masksparsity.data import synthetic_split
from masksparsity.mask import load_mask
from masksparsity.model import build_plain_cnn
from masksparsity.pipeline import (ConfigKeyError, PlanError, RunSummary, StageError, apply_overrides,
                                   build_plan, compare_runs, format_table, lr_at, model_hash,
                                   run_pipeline, scaled_milestones, template, train_model)
from masksparsity.sparsity import GammaSnapshot

TINY_DATA = {"kind": "synthetic", "n_train": 96, "n_test": 32, "num_classes": 3, "size": 6,
             "noise": 0.5, "shift": 0}


def tiny(name="masksparsity-desk", epochs=2, seed=0, **defaults):
    doc = template(name, seed)
    doc["model"] = {"arch": "plain", "widths": [4, 6]}
    doc["data"] = dict(TINY_DATA)
    doc["defaults"] = {"epochs": epochs, "batch_size": 16, "augment": False, **defaults}
    return doc


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    plan = build_plan(tiny("desk-comparison", epochs=2, seed=3))
    return run_pipeline(plan, out_dir=out, figures=True)


class TestPlans:
    def test_canonical_defaults(self):
        plan = build_plan(template("masksparsity"))
        by = plan.by_id
        assert [s.kind for s in plan.stages] == ["normal_train", "global_sparsity", "gen_mask",
                                                 "mask_sparsity", "prune", "finetune"]
        n = by["normal_train"]
        assert (n.epochs, n.batch_size, n.weight_decay, n.lr, n.milestones, n.lr_divisor) == \
            (200, 128, 5e-4, 0.1, [60, 120, 160], 5.0)
        assert n.nesterov and n.momentum == 0.9
        assert by["finetune"].lr == 0.001 and by["finetune"].epochs == 200
        assert by["global_sparsity"].sparsity.lam == 2e-4
        assert by["mask_sparsity"].sparsity.lam == 5e-4 and by["mask_sparsity"].sparsity.mode == "masked"
        assert by["gen_mask"].theta == 1e-2

    def test_sparsity_stages_restart_from_normal(self):
        by = build_plan(template("masksparsity")).by_id
        assert by["global_sparsity"].source == "normal_train"
        assert by["mask_sparsity"].source == "normal_train"
        assert by["gen_mask"].source == "global_sparsity"
        assert by["prune"].source == "mask_sparsity"

    def test_scaled_milestones(self):
        assert scaled_milestones(30) == [9, 18, 24]
        assert build_plan(template("masksparsity-desk")).stages[0].milestones == [9, 18, 24]

    @pytest.mark.parametrize("epoch,want", [(0, 0.1), (8, 0.1), (9, 0.02), (18, 0.004), (29, 0.0008)])
    def test_lr_schedule(self, epoch, want):
        assert lr_at(epoch, 0.1, [9, 18, 24], 5) == pytest.approx(want)

    @pytest.mark.parametrize("stages,match", [
        ([{"kind": "normal_train"}, {"kind": "mask_sparsity"}], "requires a mask"),
        ([{"kind": "normal_train"}, {"kind": "finetune"}], "requires a pruned model"),
        ([{"kind": "gen_mask"}], "gen_mask requires"),
        ([{"kind": "global_sparsity"}], "normal_train"),
        ([{"kind": "normal_train"}, {"kind": "normal_train"}], "duplicate"),
        ([{"kind": "normal_train"}, {"kind": "gen_mask", "theta": 0.1, "ratio": 0.5}], "exactly one"),
        ([{"kind": "normal_train"}, {"kind": "prune", "mask": "normal_train"}], "not an earlier gen_mask"),
    ])
    def test_invalid_plans(self, stages, match):
        doc = tiny()
        doc["stages"] = stages
        with pytest.raises(PlanError, match=match):
            build_plan(doc)

    def test_unknown_stage_key(self):
        doc = tiny()
        doc["stages"][0]["epochz"] = 3
        with pytest.raises(ConfigKeyError) as err:
            build_plan(doc)
        assert err.value.key == "epochz"

    def test_plan_schema(self):
        from masksparsity.pipeline import plan_to_dict
        schemas.validate("plan", plan_to_dict(build_plan(template("desk-comparison"))))


class TestOverrides:
    def test_nested_and_stage(self):
        doc = apply_overrides(tiny("desk-comparison"), ["defaults.epochs=7", "data.noise=0.25",
                                                        "stages.finetune.lr=0.01", "seed=4"])
        plan = build_plan(doc)
        assert plan.by_id["normal"].epochs == 7 and plan.data["noise"] == 0.25
        assert plan.by_id["finetune"].lr == 0.01 and plan.seed == 4

    @pytest.mark.parametrize("item", ["defaults.epochz=3", "bogus=1", "stages.nope.lr=1",
                                      "stages.normal.speed=2", "data.colour=red", "noequals"])
    def test_unknown_keys(self, item):
        with pytest.raises(ConfigKeyError):
            apply_overrides(tiny("desk-comparison"), [item])

    def test_input_not_mutated(self):
        doc = tiny()
        apply_overrides(doc, ["defaults.epochs=9"])
        assert doc["defaults"]["epochs"] == 2


class TestTraining:
    @pytest.mark.parametrize("seed", range(3))
    def test_loss_trend(self, seed):
        train, test = synthetic_split(512, 64, 3, seed=seed, size=6, noise=1.0)
        plan = build_plan({**tiny(epochs=5), "stages": [{"kind": "normal_train"}]})
        recs = train_model(build_plain_cnn([4, 6], 3, 3, seed=seed), train, test, plan.stages[0])
        losses = [r["train_loss"] for r in recs]
        smooth = np.convolve(losses, np.ones(2) / 2, mode="valid")
        assert (np.diff(smooth) <= 1e-9).all()

    @pytest.mark.parametrize("seed", range(2))
    def test_global_penalty_lowers_median_gamma(self, seed):
        # Same checkpoint continued with and without the penalty. Lambda is raised so the
        # shrinkage outweighs trajectory noise in a ten-channel model over a few hundred steps.
        doc = tiny(epochs=4, seed=seed, batch_size=8, global_lambda=5e-3)
        doc["data"].update(n_train=512, noise=1.0)
        doc["stages"] = [{"id": "normal", "kind": "normal_train"},
                         {"id": "plain", "kind": "global_sparsity", "sparsity": {"lambda": 0.0}},
                         {"id": "l1", "kind": "global_sparsity", "source": "normal"}]
        res = run_pipeline(build_plan(doc))
        assert np.median(res.snapshots["l1"].all_values()) < np.median(res.snapshots["plain"].all_values())

    def test_masked_channels_shrink_faster(self, tmp_path):
        doc = tiny("uniform", epochs=6, global_lambda=2e-4, mask_lambda=5e-2)
        res = run_pipeline(build_plan(doc), out_dir=tmp_path)
        mask = res.masks["gen_mask"]
        before, after = res.snapshots["normal_train"], res.snapshots["mask_sparsity"]
        for name, m in mask.layers.items():
            m = m.astype(bool)
            ratio = after.values[name] / before.values[name]
            assert ratio[m].mean() < ratio[~m].mean()


class TestRunLayout:
    def test_desk_template_writes_five_checkpoints(self, tmp_path):
        res = run_pipeline(build_plan(tiny("masksparsity-desk", epochs=1)), out_dir=tmp_path)
        found = sorted(p.parent.name for p in res.out_dir.glob("*/checkpoint"))
        assert found == ["finetune", "global_sparsity", "mask_sparsity", "normal_train", "prune"]
        assert (res.out_dir / "gen_mask" / "mask.json").exists()
        assert (res.out_dir / "prune" / "report.json").exists()

    def test_stage_isolation(self, desk_run):
        h = desk_run.entry_hashes
        assert h["global"] == h["masksparse"] == h["masksparse_uniform"] == model_hash(desk_run.models["normal"])

    def test_prune_uses_generated_mask(self, desk_run):
        d = desk_run.out_dir
        assert json.loads((d / "prune" / "mask.json").read_text())["layers"] == \
            json.loads((d / "mask" / "mask.json").read_text())["layers"]
        assert desk_run.reports["prune"].flops_after == desk_run.reports["prune_global"].flops_after

    def test_scratch_has_pruned_topology_fresh_weights(self, desk_run):
        pruned, scratch = ckpt.load_model(desk_run.out_dir / "prune" / "checkpoint"), desk_run.models["scratch"]
        assert pruned.topology() == scratch.topology()
        assert desk_run.entry_hashes["scratch"] != desk_run.entry_hashes["finetune"]

    def test_finetune_starts_at_low_lr(self, desk_run):
        assert desk_run.records["finetune"].epochs[0]["lr"] == 0.001

    def test_metrics_are_schema_valid_and_clock_free(self, desk_run):
        text = (desk_run.out_dir / "metrics.jsonl").read_text()
        training_stages = [s for s in desk_run.plan.stages if s.epochs]
        assert schemas.validate_jsonl("metrics", text) == 2 * len(training_stages) == 18
        assert "seconds" not in text and "time" not in text
        assert (desk_run.out_dir / "timing.jsonl").exists()

    def test_snapshot_and_hist_files(self, desk_run):
        d = desk_run.out_dir / "global"
        recs = [json.loads(l) for l in (d / "gammas.jsonl").read_text().splitlines()]
        for r in recs + [json.loads((d / "hist.jsonl").read_text())]:
            schemas.validate("hist", r)
        snap = GammaSnapshot.from_records(recs)
        assert np.allclose(snap.all_values(), desk_run.snapshots["global"].all_values())

    def test_figures_rendered(self, desk_run):
        d = desk_run.out_dir
        assert (d / "curves.png").stat().st_size > 0 and (d / "gamma_stages.png").exists()
        assert (d / "global" / "gamma_hist.png").exists()

    def test_reports_validate(self, desk_run):
        schemas.validate("report", json.loads((desk_run.out_dir / "prune_uniform" / "report.json").read_text()))
        schemas.validate("mask", json.loads((desk_run.out_dir / "mask_uniform" / "mask.json").read_text()))

    def test_byte_identical_reruns(self, tmp_path):
        for sub in ("a", "b"):
            run_pipeline(build_plan(tiny("masksparsity-desk", epochs=1, seed=1)), out_dir=tmp_path / sub)
        a = (tmp_path / "a" / "masksparsity-desk-s1" / "metrics.jsonl").read_bytes()
        b = (tmp_path / "b" / "masksparsity-desk-s1" / "metrics.jsonl").read_bytes()
        assert a == b and len(a) > 0


class TestStages:
    def test_single_stage_loads_prerequisites(self, tmp_path):
        plan = build_plan(tiny(epochs=1))
        run_pipeline(plan, out_dir=tmp_path)
        res = run_pipeline(plan, out_dir=tmp_path, only=["prune"])
        assert set(res.models) >= {"prune", "mask_sparsity"} and "prune" in res.reports

    def test_missing_prerequisite(self, tmp_path):
        with pytest.raises(StageError, match="missing prerequisite"):
            run_pipeline(build_plan(tiny(epochs=1)), out_dir=tmp_path, only=["finetune"])

    def test_unknown_stage_name(self, tmp_path):
        with pytest.raises(PlanError):
            run_pipeline(build_plan(tiny(epochs=1)), out_dir=tmp_path, only=["nope"])

    def test_normal_mask_ordering_flag(self, tmp_path):
        doc = tiny(epochs=1)
        doc["stages"][2]["source"] = "normal_train"
        res = run_pipeline(build_plan(doc), out_dir=tmp_path)
        assert res.plan.by_id["gen_mask"].source == "normal_train"

    def test_imported_mask_stage(self, tmp_path):
        res = run_pipeline(build_plan(tiny("uniform", epochs=1)), out_dir=tmp_path / "a")
        doc = tiny(epochs=1)
        doc["stages"][2] = {"kind": "gen_mask", "mask_path": str(res.out_dir / "gen_mask" / "mask.json")}
        res2 = run_pipeline(build_plan(doc), out_dir=tmp_path / "b")
        assert res2.masks["gen_mask"] == res.masks["gen_mask"]
        assert res2.masks["gen_mask"].provenance == "imported"

    def test_gradient_log(self, tmp_path):
        doc = tiny(epochs=1)
        doc["stages"][1]["grad_log_iters"] = 9
        res = run_pipeline(build_plan(doc), out_dir=tmp_path, figures=True)
        glog = res.grad_logs["global_sparsity"]
        assert len(glog) == 9
        lines = (res.out_dir / "global_sparsity" / "gradnorm.jsonl").read_text().splitlines()
        assert all(len(json.loads(l)["grad_norms"]) == 9 for l in lines)
        assert (res.out_dir / "global_sparsity" / "gradnorm.png").exists()


class TestCompare:
    def summary(self, name, base, pruned, ds="d"):
        return RunSummary(name, base, pruned, 50.0, ds)

    def test_identical_runs(self):
        rows = compare_runs(self.summary("a", 90, 90), self.summary("b", 90, 90))
        assert len(rows) == 2 and all(r["top1_drop"] == "0.00" for r in rows)

    def test_drop_arithmetic(self):
        assert compare_runs(self.summary("a", 94.5, 94.19))[0]["top1_drop"] == "0.31"

    def test_mismatched_datasets(self):
        with pytest.raises(ValueError):
            compare_runs(self.summary("a", 1, 1, "x"), self.summary("b", 1, 1, "y"))

    def test_from_results(self, desk_run):
        rows = compare_runs(RunSummary.from_result("ms", desk_run, "normal", "finetune", "prune"),
                            RunSummary.from_result("gl", desk_run, "normal", "finetune_global", "prune_global"))
        assert rows[0]["flops_reduction"] == rows[1]["flops_reduction"]
        assert "top1_drop" in format_table(rows)
