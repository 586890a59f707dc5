"""Stage orchestration: normal training, sparsity training, mask generation,
surgery, fine-tuning and the comparison baselines.

A plan is a list of named stages. Each stage names the stage whose model it
starts from (``source``) and, where relevant, the ``gen_mask`` stage whose
mask it uses, so baselines such as global-sparsity pruning or training from
scratch can branch off shared checkpoints inside one run directory::

    {run_id}/metrics.jsonl          one record per training epoch (deterministic)
    {run_id}/stages.jsonl           one summary per stage (deterministic)
    {run_id}/timing.jsonl           wall-clock per stage
    {run_id}/{stage}/checkpoint     model container
    {run_id}/{stage}/mask.json      gen_mask and prune stages
    {run_id}/{stage}/report.json    prune stages
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .compute import OptimizerState, sgd_update, softmax_cross_entropy
from .data import Dataset, load_cifar10, synthetic_split
from .mask import ChannelMask, load_mask, save_mask, threshold_mask, uniform_mask
from .model import (ModelGraph, accuracy, backward, build_plain_cnn, build_resnet_cifar, forward,
                    reinitialized)
from .prune import PruneReport, apply_surgery, report
from .sparsity import GammaSnapshot, GradientNormLog, SparsityConfig, gamma_histogram, penalty

log = logging.getLogger(__name__)

STAGE_KINDS = ("normal_train", "global_sparsity", "gen_mask", "mask_sparsity", "prune",
               "finetune", "scratch_train")
TRAINING_KINDS = ("normal_train", "global_sparsity", "mask_sparsity", "finetune", "scratch_train")

CIFAR_DEFAULTS = {
    "epochs": 200,
    "lr": 0.1,
    "finetune_lr": 0.001,
    "milestones": [60, 120, 160],
    "lr_divisor": 5.0,
    "batch_size": 128,
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "nesterov": True,
    "augment": True,
    "global_lambda": 2e-4,
    "mask_lambda": 5e-4,
    "theta": 1e-2,
    "norm": "L1",
    "grad_log_iters": 0,
}

STAGE_FIELDS = ("id", "kind", "source", "mask", "epochs", "lr", "milestones", "lr_divisor",
                "batch_size", "momentum", "weight_decay", "nesterov", "augment", "sparsity",
                "theta", "ratio", "mask_path", "grad_log_iters")


class PlanError(ValueError):
    pass


class ConfigKeyError(PlanError):
    """A plan or override names a key that does not exist."""

    def __init__(self, key: str, message: str | None = None):
        super().__init__(message or f"unknown config key {key!r}")
        self.key = key


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


def scaled_milestones(epochs: int, base_epochs: int = 200, base=(60, 120, 160)) -> list[int]:
    """Milestones rescaled proportionally to a shorter schedule (200 -> 30 gives 9/18/24)."""
    scaled = (int(round(m * epochs / base_epochs)) for m in base)
    return [m for m in scaled if m >= 1]


def lr_at(epoch: int, lr: float, milestones, divisor: float) -> float:
    return lr / divisor ** sum(epoch >= m for m in milestones)


@dataclass
class StageEntry:
    id: str
    kind: str
    source: str | None = None
    mask: str | None = None
    epochs: int = 0
    lr: float = 0.1
    milestones: list[int] = field(default_factory=list)
    lr_divisor: float = 5.0
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    augment: bool = False
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    theta: float | None = None
    ratio: float | None = None
    mask_path: str | None = None
    grad_log_iters: int = 0

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in STAGE_FIELDS}
        d["sparsity"] = self.sparsity.to_dict()
        return d


@dataclass
class StagePlan:
    run_id: str
    seed: int
    model: dict
    data: dict
    stages: list[StageEntry]

    @property
    def by_id(self) -> dict[str, StageEntry]:
        return {s.id: s for s in self.stages}


def _latest(stages: list[StageEntry], kinds) -> str | None:
    for s in reversed(stages):
        if s.kind in kinds:
            return s.id
    return None


def build_plan(doc: dict) -> StagePlan:
    """Resolve defaults, implicit sources and masks, then check the stage invariants."""
    known = {"run_id", "seed", "model", "data", "defaults", "stages", "template"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigKeyError(sorted(unknown)[0], f"unknown plan keys: {sorted(unknown)}")
    bad = set(doc.get("defaults", {})) - set(CIFAR_DEFAULTS)
    if bad:
        raise ConfigKeyError(sorted(bad)[0], f"unknown defaults keys: {sorted(bad)}")
    defaults = {**CIFAR_DEFAULTS, **doc.get("defaults", {})}
    if "milestones" not in doc.get("defaults", {}) and defaults["epochs"] != 200:
        defaults["milestones"] = scaled_milestones(defaults["epochs"])
    stages: list[StageEntry] = []
    seen = set()
    for raw in doc["stages"]:
        raw = dict(raw)
        bad = set(raw) - set(STAGE_FIELDS)
        if bad:
            raise ConfigKeyError(sorted(bad)[0],
                                 f"stage {raw.get('id', raw.get('kind'))}: unknown keys {sorted(bad)}")
        kind = raw.get("kind")
        if kind not in STAGE_KINDS:
            raise PlanError(f"unknown stage kind {kind!r}")
        sid = raw.get("id", kind)
        if sid in seen:
            raise PlanError(f"duplicate stage id {sid!r}")
        seen.add(sid)
        e = StageEntry(id=sid, kind=kind)
        if kind in TRAINING_KINDS:
            e.epochs = int(raw.get("epochs", defaults["epochs"]))
            e.lr = float(raw.get("lr", defaults["finetune_lr"] if kind == "finetune" else defaults["lr"]))
            e.milestones = list(raw.get("milestones", defaults["milestones"]))
            for name in ("lr_divisor", "batch_size", "momentum", "weight_decay", "nesterov",
                         "augment", "grad_log_iters"):
                setattr(e, name, type(defaults[name])(raw.get(name, defaults[name])))
            mode = {"global_sparsity": "global", "mask_sparsity": "masked"}.get(kind, "off")
            lam = {"global": defaults["global_lambda"], "masked": defaults["mask_lambda"]}.get(mode, 0.0)
            sp = {"mode": mode, "norm": defaults["norm"], "lambda": lam, **raw.get("sparsity", {})}
            e.sparsity = SparsityConfig.from_dict(sp)
        e.source = raw.get("source")
        e.mask = raw.get("mask")
        if kind == "gen_mask":
            e.mask_path = raw.get("mask_path")
            e.ratio = raw.get("ratio")
            e.theta = raw.get("theta", None if (e.ratio is not None or e.mask_path) else defaults["theta"])
            if sum(x is not None for x in (e.theta, e.ratio, e.mask_path)) != 1:
                raise PlanError(f"stage {sid}: gen_mask needs exactly one of theta, ratio, mask_path")
        _fill_links(e, stages)
        stages.append(e)
    plan = StagePlan(doc.get("run_id", "run"), int(doc.get("seed", 0)), doc["model"], doc["data"], stages)
    validate_plan(plan)
    return plan


def _fill_links(e: StageEntry, prior: list[StageEntry]) -> None:
    if e.kind in ("global_sparsity", "mask_sparsity") and e.source is None:
        e.source = _latest(prior, ("normal_train",))
    elif e.kind == "gen_mask" and e.source is None:
        e.source = _latest(prior, ("global_sparsity", "mask_sparsity", "normal_train"))
    elif e.kind == "prune" and e.source is None:
        e.source = _latest(prior, ("mask_sparsity", "global_sparsity", "normal_train", "finetune"))
    elif e.kind in ("finetune", "scratch_train") and e.source is None:
        e.source = _latest(prior, ("prune",))
    if e.kind in ("mask_sparsity", "prune") and e.mask is None:
        e.mask = _latest(prior, ("gen_mask",))


def validate_plan(plan: StagePlan) -> None:
    kinds = {}
    for e in plan.stages:
        if e.source is not None and e.source not in kinds:
            raise PlanError(f"stage {e.id}: source {e.source!r} is not an earlier stage")
        if e.mask is not None and kinds.get(e.mask) != "gen_mask":
            raise PlanError(f"stage {e.id}: mask {e.mask!r} is not an earlier gen_mask stage")
        src_kind = kinds.get(e.source)
        if e.kind == "normal_train" and e.source is not None:
            raise PlanError(f"stage {e.id}: normal_train starts from fresh weights")
        if e.kind in ("global_sparsity", "mask_sparsity") and src_kind is None:
            raise PlanError(f"stage {e.id}: needs a preceding normal_train stage")
        if e.kind == "gen_mask" and e.mask_path is None and src_kind is None:
            raise PlanError(f"stage {e.id}: gen_mask requires a preceding sparsity or normal stage")
        if e.kind == "gen_mask" and e.mask_path is not None and src_kind is None:
            e.source = _latest([s for s in plan.stages if s.id in kinds], ("normal_train",))
            if e.source is None:
                raise PlanError(f"stage {e.id}: importing a mask still needs a model to check it against")
        if e.kind in ("mask_sparsity", "prune") and e.mask is None:
            raise PlanError(f"stage {e.id}: {e.kind} requires a mask")
        if e.kind == "prune" and src_kind is None:
            raise PlanError(f"stage {e.id}: prune needs a model")
        if e.kind in ("finetune", "scratch_train") and src_kind not in ("prune", "finetune"):
            raise PlanError(f"stage {e.id}: {e.kind} requires a pruned model")
        if e.kind in TRAINING_KINDS and (e.epochs < 0 or e.batch_size < 1):
            raise PlanError(f"stage {e.id}: bad epochs or batch size")
        kinds[e.id] = e.kind


# -- data and model construction ---------------------------------------------

def load_data(cfg: dict, seed: int) -> tuple[Dataset, Dataset]:
    kind = cfg.get("kind", "synthetic")
    if kind == "synthetic":
        return synthetic_split(
            int(cfg.get("n_train", 2000)), int(cfg.get("n_test", 500)),
            int(cfg.get("num_classes", 10)), int(cfg.get("seed", seed)),
            channels=int(cfg.get("channels", 3)), size=int(cfg.get("size", 16)),
            noise=float(cfg.get("noise", 1.0)), shift=int(cfg.get("shift", 0)),
        )
    if kind == "cifar10":
        train, test = load_cifar10(cfg["path"])
        rng = np.random.default_rng(int(cfg.get("subset_seed", 0)))
        if cfg.get("train_subset"):
            train = train.subset(np.sort(rng.permutation(len(train))[: int(cfg["train_subset"])]))
        if cfg.get("test_subset"):
            test = test.subset(np.sort(rng.permutation(len(test))[: int(cfg["test_subset"])]))
        return train, test
    if kind == "container":
        return ckpt.load_dataset(cfg["train"]), ckpt.load_dataset(cfg["test"])
    raise PlanError(f"unknown data kind {kind!r}")


def build_model(cfg: dict, in_channels: int, num_classes: int, seed: int) -> ModelGraph:
    arch = cfg.get("arch", "resnet")
    if arch == "resnet":
        return build_resnet_cifar(int(cfg.get("n", 1)), num_classes, in_channels,
                                  int(cfg.get("base_width", 16)), seed)
    if arch == "plain":
        return build_plain_cnn(list(cfg.get("widths", [16, 32])), num_classes, in_channels, seed)
    raise PlanError(f"unknown model arch {arch!r}")


def model_hash(graph: ModelGraph) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(graph.parameters().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    for name in graph.bn_names:
        s = graph.bn[name]
        h.update(np.ascontiguousarray(np.concatenate([s.running_mean, s.running_var]), dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def dataset_fingerprint(ds: Dataset) -> str:
    h = hashlib.sha256(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


# -- training -----------------------------------------------------------------

@dataclass
class RunRecord:
    stage: str
    kind: str
    epochs: list[dict] = field(default_factory=list)
    snapshots: list[str] = field(default_factory=list)
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def final_top1(self) -> float | None:
        return self.epochs[-1]["test_top1"] if self.epochs else self.extra.get("test_top1")


def train_model(model: ModelGraph, train: Dataset, test: Dataset | None, entry: StageEntry,
                mask: ChannelMask | None = None, shuffle_seed: int = 0,
                grad_log: GradientNormLog | None = None) -> list[dict]:
    """SGD over ``entry.epochs`` epochs with the stage's sparsity penalty; returns epoch records."""
    opt = OptimizerState(entry.lr, entry.momentum, entry.weight_decay, entry.nesterov)
    params = model.parameters()
    records = []
    for epoch in range(entry.epochs):
        opt.lr = lr_at(epoch, entry.lr, entry.milestones, entry.lr_divisor)
        loss_sum = pen_sum = 0.0
        seen = 0
        for x, y in _batches(train, entry, shuffle_seed, epoch):
            loss, pen = train_step(model, x, y, opt, entry.sparsity, mask, params, grad_log)
            loss_sum += loss * len(y)
            pen_sum += pen * len(y)
            seen += len(y)
        records.append({
            "epoch": epoch,
            "lr": opt.lr,
            "train_loss": round(loss_sum / max(seen, 1), 6),
            "penalty": round(pen_sum / max(seen, 1), 8),
            "test_top1": round(accuracy(model, test.images, test.labels), 2) if test is not None else None,
        })
        log.info("%s epoch %d: %s", entry.id, epoch, records[-1])
    return records


def _batches(train: Dataset, entry: StageEntry, shuffle_seed: int, epoch: int):
    from .data import batches

    for x, y in batches(train, entry.batch_size, shuffle_seed, entry.augment, epoch):
        if len(y) > 1:  # a lone sample has no batch statistics
            yield x, y


def train_step(model: ModelGraph, x, y, opt: OptimizerState, sparsity: SparsityConfig,
               mask: ChannelMask | None = None, params=None,
               grad_log: GradientNormLog | None = None) -> tuple[float, float]:
    logits = forward(model, x, training=True)
    loss, grad_logits = softmax_cross_entropy(logits, y)
    grads = backward(model, grad_logits)
    pen, pen_grads = penalty(model, sparsity, mask)
    for name, g in pen_grads.items():
        grads[name] = grads[name] + g
    if grad_log is not None:
        grad_log.record(grads)
    sgd_update(params if params is not None else model.parameters(), grads, opt)
    return loss, pen


def tracked_channels(model: ModelGraph, per_layer: int = 1) -> list[tuple[str, int]]:
    """The largest- and smallest-|gamma| channels of every BN layer."""
    chosen = []
    for name, gamma in model.gammas().items():
        order = np.argsort(np.abs(gamma), kind="stable")
        picks = list(order[::-1][:per_layer]) + list(order[:per_layer])
        chosen += [(name, int(i)) for i in dict.fromkeys(picks)]
    return chosen


def continue_with_gradient_log(model: ModelGraph, train: Dataset, entry: StageEntry,
                               mask: ChannelMask | None, iterations: int,
                               shuffle_seed: int) -> GradientNormLog:
    """Keep training a copy at the stage's final LR and log |dL_total/d gamma| per iteration."""
    work = model.copy()
    glog = GradientNormLog(work, tracked_channels(work))
    final_lr = lr_at(max(entry.epochs - 1, 0), entry.lr, entry.milestones, entry.lr_divisor)
    opt = OptimizerState(final_lr, entry.momentum, entry.weight_decay, entry.nesterov)
    params = work.parameters()
    epoch = entry.epochs
    while len(glog) < iterations:
        for x, y in _batches(train, entry, shuffle_seed, epoch):
            train_step(work, x, y, opt, entry.sparsity, mask, params, glog)
            if len(glog) >= iterations:
                break
        epoch += 1
    return glog


# -- running ------------------------------------------------------------------

@dataclass
class PipelineResult:
    plan: StagePlan
    out_dir: Path | None
    models: dict[str, ModelGraph] = field(default_factory=dict)
    masks: dict[str, ChannelMask] = field(default_factory=dict)
    reports: dict[str, PruneReport] = field(default_factory=dict)
    records: dict[str, RunRecord] = field(default_factory=dict)
    snapshots: dict[str, GammaSnapshot] = field(default_factory=dict)
    grad_logs: dict[str, GradientNormLog] = field(default_factory=dict)
    entry_hashes: dict[str, str] = field(default_factory=dict)
    dataset_id: str = ""

    @property
    def final_model(self) -> ModelGraph:
        return self.models[self.plan.stages[-1].id] if self.plan.stages[-1].id in self.models else None


def _stage_dir(out_dir: Path | None, sid: str) -> Path | None:
    if out_dir is None:
        return None
    d = out_dir / sid
    d.mkdir(parents=True, exist_ok=True)
    return d


def _append_jsonl(path: Path | None, record: dict) -> None:
    if path is not None:
        with open(path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _need_model(result: PipelineResult, sid: str, out_dir: Path | None, for_stage: str) -> ModelGraph:
    if sid in result.models:
        return result.models[sid]
    path = out_dir / sid / "checkpoint" if out_dir is not None else None
    if path is None or not path.is_file():
        raise StageError(for_stage, f"missing prerequisite checkpoint of stage {sid!r}")
    result.models[sid] = ckpt.load_model(path)
    return result.models[sid]


def _need_mask(result: PipelineResult, sid: str, out_dir: Path | None, for_stage: str,
               model: ModelGraph) -> ChannelMask:
    if sid in result.masks:
        return result.masks[sid]
    path = out_dir / sid / "mask.json" if out_dir is not None else None
    if path is None or not path.is_file():
        raise StageError(for_stage, f"missing prerequisite mask of stage {sid!r}")
    result.masks[sid] = load_mask(path, model)
    return result.masks[sid]


def run_stage(entry: StagePlan | StageEntry, result: PipelineResult, train: Dataset, test: Dataset,
              ordinal: int = 0) -> RunRecord:
    """Execute one stage, store its outputs in ``result`` and under the run directory."""
    plan, out_dir = result.plan, result.out_dir
    sdir = _stage_dir(out_dir, entry.id)
    rec = RunRecord(entry.id, entry.kind)
    t0 = time.perf_counter()
    shuffle_seed = plan.seed * 1000 + ordinal
    model: ModelGraph | None = None
    mask: ChannelMask | None = None

    if entry.kind == "normal_train":
        model = build_model(plan.model, train.images.shape[1], train.num_classes, plan.seed)
    elif entry.kind in ("global_sparsity", "mask_sparsity", "finetune"):
        # Sparsity stages restart from the normally trained weights.
        model = _need_model(result, entry.source, out_dir, entry.id).copy()
    elif entry.kind == "scratch_train":
        src = _need_model(result, entry.source, out_dir, entry.id)
        model = reinitialized(src, plan.seed + 7919)
    if entry.mask is not None:
        base = _need_model(result, entry.source, out_dir, entry.id)
        mask = _need_mask(result, entry.mask, out_dir, entry.id, base)

    if model is not None:
        result.entry_hashes[entry.id] = model_hash(model)

    if entry.kind in TRAINING_KINDS:
        rec.epochs = train_model(model, train, test, entry, mask, shuffle_seed)
        for r in rec.epochs:
            _append_jsonl(out_dir / "metrics.jsonl" if out_dir else None, {"stage": entry.id, **r})
        if entry.grad_log_iters:
            glog = continue_with_gradient_log(model, train, entry, mask, entry.grad_log_iters, shuffle_seed)
            result.grad_logs[entry.id] = glog
            if sdir is not None:
                (sdir / "gradnorm.jsonl").write_text(glog.to_jsonl())
    elif entry.kind == "gen_mask":
        src = _need_model(result, entry.source, out_dir, entry.id)
        if entry.mask_path:
            mask = load_mask(entry.mask_path, src, imported=True)
        elif entry.ratio is not None:
            mask = uniform_mask(src, float(entry.ratio))
        else:
            mask = threshold_mask(src, float(entry.theta))
        result.masks[entry.id] = mask
        rec.extra = {"prune_fraction": round(mask.prune_fraction(), 6),
                     "pruned": mask.pruned_counts(), "warnings": mask.warnings}
        if sdir is not None:
            save_mask(mask, sdir / "mask.json", src)
    elif entry.kind == "prune":
        src = _need_model(result, entry.source, out_dir, entry.id)
        model = apply_surgery(src, mask)
        rep = report(src, model, test.image_hw)
        result.reports[entry.id] = rep
        rec.extra = {"test_top1": round(accuracy(model, test.images, test.labels), 2),
                     "report": rep.to_dict()}
        if sdir is not None:
            save_mask(mask, sdir / "mask.json", src)
            (sdir / "report.json").write_text(json.dumps(rep.to_dict(), indent=1) + "\n")

    if model is not None:
        result.models[entry.id] = model
        snap = GammaSnapshot.take(model, entry.id, len(rec.epochs))
        result.snapshots[entry.id] = snap
        if sdir is not None:
            ckpt.save_model(model, sdir / "checkpoint", {"stage": entry.id, "kind": entry.kind})
            with open(sdir / "gammas.jsonl", "w") as fh:
                for r in snap.records():
                    fh.write(json.dumps(r) + "\n")
            hist = gamma_histogram(snap)
            (sdir / "hist.jsonl").write_text(json.dumps({
                "stage": entry.id, "epoch": snap.epoch, "layer": "*",
                "bins": hist.counts.tolist(), "edges": hist.edges.tolist()}) + "\n")
            rec.snapshots.append(f"{entry.id}/gammas.jsonl")
    rec.wall_clock = time.perf_counter() - t0
    result.records[entry.id] = rec

    summary = {"stage": entry.id, "kind": entry.kind, "source": entry.source, "mask": entry.mask,
               "entry_hash": result.entry_hashes.get(entry.id),
               "final_top1": rec.final_top1, **{k: v for k, v in rec.extra.items() if k != "warnings"}}
    if out_dir is not None:
        _append_jsonl(out_dir / "stages.jsonl", summary)
        _append_jsonl(out_dir / "timing.jsonl", {"stage": entry.id, "seconds": round(rec.wall_clock, 3)})
    return rec


def run_pipeline(plan: StagePlan, data: tuple[Dataset, Dataset] | None = None,
                 out_dir: str | Path | None = None, only: list[str] | None = None,
                 figures: bool = False) -> PipelineResult:
    """Run every stage of ``plan`` (or just ``only``, loading prerequisites from ``out_dir``)."""
    train, test = data if data is not None else load_data(plan.data, plan.seed)
    run_dir = Path(out_dir) / plan.run_id if out_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        selected = plan.stages if only is None else [s for s in plan.stages if s.id in only]
        for name in ("metrics.jsonl", "stages.jsonl", "timing.jsonl"):
            if only is None and (run_dir / name).exists():
                (run_dir / name).unlink()
        (run_dir / "plan.json").write_text(json.dumps(plan_to_dict(plan), indent=1) + "\n")
    result = PipelineResult(plan, run_dir, dataset_id=dataset_fingerprint(test))
    if only is not None:
        missing = set(only) - set(plan.by_id)
        if missing:
            raise PlanError(f"unknown stage(s) {sorted(missing)}")
    for ordinal, entry in enumerate(plan.stages):
        if only is not None and entry.id not in only:
            continue
        log.info("stage %s (%s)", entry.id, entry.kind)
        try:
            run_stage(entry, result, train, test, ordinal)
        except StageError:
            raise
        except Exception as exc:  # keep the stage context on the way out
            raise StageError(entry.id, str(exc)) from exc
    if figures and run_dir is not None:
        from . import plotting

        plotting.render_run(result)
    return result


def plan_to_dict(plan: StagePlan) -> dict:
    return {"run_id": plan.run_id, "seed": plan.seed, "model": plan.model, "data": plan.data,
            "stages": [s.to_dict() for s in plan.stages]}


# -- templates ----------------------------------------------------------------

DESK_DATA = {"kind": "synthetic", "n_train": 8000, "n_test": 1000, "num_classes": 10,
             "size": 8, "noise": 1.5, "shift": 1}
DESK_DEFAULTS = {"epochs": 30, "batch_size": 8, "augment": False}


def _masksparsity_stages():
    return [{"kind": "normal_train"}, {"kind": "global_sparsity"}, {"kind": "gen_mask"},
            {"kind": "mask_sparsity"}, {"kind": "prune"}, {"kind": "finetune"}]


def template(name: str, seed: int = 0) -> dict:
    """Plan document for one of the named templates."""
    cifar_model = {"arch": "resnet", "n": 9}
    cifar_data = {"kind": "cifar10", "path": "cifar-10-batches-bin"}
    desk_model = {"arch": "resnet", "n": 1}
    if name == "masksparsity":
        stages = _masksparsity_stages()
    elif name == "global-only":
        stages = [{"kind": "normal_train"}, {"kind": "global_sparsity"}, {"kind": "gen_mask"},
                  {"kind": "prune"}, {"kind": "finetune"}]
    elif name == "uniform":
        stages = [{"kind": "normal_train"}, {"kind": "gen_mask", "ratio": 0.5},
                  {"kind": "mask_sparsity"}, {"kind": "prune"}, {"kind": "finetune"}]
    elif name == "uniform-direct":
        stages = [{"kind": "normal_train"}, {"kind": "gen_mask", "ratio": 0.5},
                  {"kind": "prune"}, {"kind": "finetune"}]
    elif name == "scratch":
        stages = _masksparsity_stages()[:5] + [{"kind": "scratch_train"}]
    elif name == "masksparsity-desk":
        return {"run_id": f"{name}-s{seed}", "seed": seed, "model": desk_model,
                "data": dict(DESK_DATA), "defaults": dict(DESK_DEFAULTS),
                "stages": _masksparsity_stages()}
    elif name == "desk-comparison":
        return {"run_id": f"{name}-s{seed}", "seed": seed, "model": desk_model,
                "data": dict(DESK_DATA), "defaults": dict(DESK_DEFAULTS),
                "stages": comparison_stages()}
    else:
        raise PlanError(f"unknown template {name!r}; choose from {TEMPLATES}")
    return {"run_id": f"{name}-s{seed}", "seed": seed, "model": cifar_model, "data": cifar_data,
            "defaults": {}, "stages": stages}


def comparison_stages(uniform_ratio: float = 0.5) -> list[dict]:
    """MaskSparsity plus every baseline, branching off one normal_train checkpoint."""
    return [
        {"id": "normal", "kind": "normal_train"},
        {"id": "global", "kind": "global_sparsity", "source": "normal"},
        {"id": "mask", "kind": "gen_mask", "source": "global"},
        {"id": "masksparse", "kind": "mask_sparsity", "source": "normal", "mask": "mask"},
        {"id": "prune", "kind": "prune", "source": "masksparse", "mask": "mask"},
        {"id": "finetune", "kind": "finetune", "source": "prune"},
        {"id": "prune_global", "kind": "prune", "source": "global", "mask": "mask"},
        {"id": "finetune_global", "kind": "finetune", "source": "prune_global"},
        {"id": "scratch", "kind": "scratch_train", "source": "prune"},
        {"id": "mask_uniform", "kind": "gen_mask", "source": "normal", "ratio": uniform_ratio},
        {"id": "prune_uniform_direct", "kind": "prune", "source": "normal", "mask": "mask_uniform"},
        {"id": "finetune_uniform_direct", "kind": "finetune", "source": "prune_uniform_direct"},
        {"id": "masksparse_uniform", "kind": "mask_sparsity", "source": "normal", "mask": "mask_uniform"},
        {"id": "prune_uniform", "kind": "prune", "source": "masksparse_uniform", "mask": "mask_uniform"},
        {"id": "finetune_uniform", "kind": "finetune", "source": "prune_uniform"},
    ]


TEMPLATES = ("masksparsity", "global-only", "uniform", "uniform-direct", "scratch",
             "masksparsity-desk", "desk-comparison")


# -- comparison ---------------------------------------------------------------

@dataclass
class RunSummary:
    name: str
    base_top1: float
    pruned_top1: float
    flops_reduction: float
    dataset_id: str

    @classmethod
    def from_result(cls, name: str, result: PipelineResult, base: str, final: str,
                    prune: str) -> "RunSummary":
        return cls(name, result.records[base].final_top1, result.records[final].final_top1,
                   result.reports[prune].flops_reduction, result.dataset_id)


def compare_runs(*summaries: RunSummary) -> list[dict]:
    """Comparison rows: base, pruned, top-1 drop, FLOPs reduction."""
    if len({s.dataset_id for s in summaries}) > 1:
        raise ValueError("runs were evaluated on different test sets")
    return [
        {
            "run": s.name,
            "base_top1": f"{s.base_top1:.2f}",
            "pruned_top1": f"{s.pruned_top1:.2f}",
            "top1_drop": f"{s.base_top1 - s.pruned_top1:.2f}",
            "flops_reduction": f"{s.flops_reduction:.2f}",
        }
        for s in summaries
    ]


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    widths = [max(len(c), *(len(str(r[c])) for r in rows)) for c in cols]
    line = lambda vals: "  ".join(str(v).rjust(w) for v, w in zip(vals, widths))  # noqa: E731
    return "\n".join([line(cols)] + [line([r[c] for c in cols]) for r in rows])


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply dotted ``key=value`` overrides; every key must already be meaningful in the plan."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigKeyError(item)
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        if parts[0] == "stages":
            if len(parts) < 3:
                raise ConfigKeyError(key)
            match = [s for s in doc["stages"] if s.get("id", s["kind"]) == parts[1]]
            if not match or parts[2] not in STAGE_FIELDS:
                raise ConfigKeyError(key)
            target, parts = match[0], parts[2:]
        elif parts[0] == "defaults":
            if len(parts) != 2 or parts[1] not in CIFAR_DEFAULTS:
                raise ConfigKeyError(key)
            doc.setdefault("defaults", {})[parts[1]] = value
            continue
        else:
            target = doc
        for p in parts[:-1]:
            if not isinstance(target.get(p), dict):
                raise ConfigKeyError(key)
            target = target[p]
        if parts[-1] not in target and target is doc:
            raise ConfigKeyError(key)
        if target is not doc and not (parts[-1] in target or _extensible(doc, target, parts[-1])):
            raise ConfigKeyError(key)
        target[parts[-1]] = value
    return doc


_DATA_KEYS = {"kind", "n_train", "n_test", "num_classes", "channels", "size", "noise", "shift", "seed",
              "path", "train_subset", "test_subset", "subset_seed", "train", "test"}
_MODEL_KEYS = {"arch", "n", "base_width", "widths"}
_SPARSITY_KEYS = {"mode", "norm", "lambda"}


def _extensible(doc: dict, target: dict, key: str) -> bool:
    if target is doc.get("data"):
        return key in _DATA_KEYS
    if target is doc.get("model"):
        return key in _MODEL_KEYS
    if any(target is s for s in doc.get("stages", [])):
        return key in STAGE_FIELDS
    if any(target is s.get("sparsity") for s in doc.get("stages", [])):
        return key in _SPARSITY_KEYS
    return False
