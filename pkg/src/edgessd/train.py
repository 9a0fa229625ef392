"""Deterministic end-to-end training on synthetic scenes, with periodic
validation mAP and checkpoints."""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from edgessd import dataset as ds
from edgessd.loss import FocalParams, image_loss
from edgessd.model import ModelSpec, build_model, detect_batch, forward, load_checkpoint, save_checkpoint
from edgessd.nn.tape import GradientTape, backward
from edgessd.optim import AdamState, LrSchedule, adam_step, lr_at
from edgessd.voc_eval import evaluate_detections

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    scene: ds.SceneSpec = field(default_factory=ds.SceneSpec)
    model: str = "toy_ssd"  # bundled spec name or path to a spec JSON
    train_images: int = 500
    batch_size: int = 8
    iterations: int = 2000
    split: ds.SplitSpec = field(default_factory=ds.SplitSpec)
    loss: str = "focal"  # or "hnm"
    focal_alpha: float = 0.75
    focal_gamma: float = 2.0
    hnm_ratio: float = 3.0
    match_threshold: float = 0.5
    lr: LrSchedule = field(default_factory=lambda: LrSchedule(initial=2e-3, decay=0.8, period=500))
    seed: int = 0
    val_interval: int = 250
    conf_threshold: float = 0.3
    nms_iou: float = 0.45
    top_k: int = 100

    def __post_init__(self):
        if self.loss not in ("focal", "hnm"):
            raise ValueError(f"loss must be 'focal' or 'hnm', got {self.loss!r}")
        if self.batch_size < 1 or self.iterations < 0 or self.val_interval < 1:
            raise ValueError("batch_size and val_interval must be >= 1, iterations >= 0")

    def model_spec(self) -> ModelSpec:
        if Path(self.model).suffix == ".json":
            return ModelSpec.load(self.model)
        return ModelSpec.bundled(self.model)

    def focal(self) -> FocalParams | None:
        return FocalParams(self.focal_alpha, self.focal_gamma) if self.loss == "focal" else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scene"] = self.scene.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "scene" in d:
            sc = dict(d["scene"])
            for key in ("scale_range", "aspect_range"):
                if key in sc:
                    sc[key] = tuple(sc[key])
            d["scene"] = ds.SceneSpec(**sc)
        if "split" in d:
            d["split"] = ds.SplitSpec(**d["split"])
        if "lr" in d:
            d["lr"] = LrSchedule(**d["lr"])
        return cls(**d)


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)  # (t, lr, loss)
    validations: list = field(default_factory=list)  # (t, val_loss, val_map)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "train_log.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "lr", "loss"])
            for t, lr, loss in self.steps:
                w.writerow([t, repr(lr), repr(loss)])
        with open(out / "val_log.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "val_loss", "val_map"])
            for t, vl, vm in self.validations:
                w.writerow([t, repr(vl), repr(vm)])

    @classmethod
    def read(cls, out_dir) -> "TrainLog":
        out = Path(out_dir)
        log_ = cls()
        with open(out / "train_log.csv", newline="") as fh:
            log_.steps = [(int(r["t"]), float(r["lr"]), float(r["loss"])) for r in csv.DictReader(fh)]
        with open(out / "val_log.csv", newline="") as fh:
            log_.validations = [(int(r["t"]), float(r["val_loss"]), float(r["val_map"])) for r in csv.DictReader(fh)]
        return log_


@dataclass
class DataSplits:
    train: list
    val: list
    test: list


def build_splits(config: TrainConfig) -> DataSplits:
    """Generate the synthetic dataset sized so the train split has
    ``config.train_images`` images, then split it per primary class."""
    totals = ds.class_totals_for_train(config.train_images, config.scene.num_classes, config.split)
    primaries = ds.primary_classes_for_totals(totals)
    images = ds.generate_synthetic(config.scene, len(primaries), primaries)
    train, val, test = ds.split_dataset(ds.group_by_primary_class(images), config.split)
    flat = lambda part: [img for c in sorted(part) for img in part[c]]  # noqa: E731
    return DataSplits(flat(train), flat(val), flat(test))


def _stack(items) -> np.ndarray:
    return np.stack([img.raster for img in items])


def batch_loss(model, rasters, gts, config: TrainConfig, tape=None, training=False):
    """Mean per-image total loss and, with a tape, the seed gradient for the head outputs."""
    raw = forward(model, rasters, tape, training)
    c = model.num_classes
    seed = np.zeros_like(raw)
    losses = []
    for k, (boxes, labels) in enumerate(gts):
        rep, g_log, g_off = image_loss(raw[k, :, :c], raw[k, :, c:], model.anchors, boxes, labels,
                                       focal=config.focal(), hnm_ratio=config.hnm_ratio,
                                       threshold=config.match_threshold)
        losses.append(rep.total)
        seed[k, :, :c] = g_log
        seed[k, :, c:] = g_off
    b = len(gts)
    return float(sum(losses) / b), raw, seed / b


def train_step(model, adam: AdamState, rasters, gts, config: TrainConfig, lr: float) -> float:
    tape = GradientTape()
    loss, raw, seed = batch_loss(model, rasters, gts, config, tape, training=True)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss}")
    grads = backward(tape, seed, output=raw)
    adam_step(adam, model.params, grads, lr)
    return loss


def evaluate(model, items, conf_threshold: float = 0.3, nms_iou: float = 0.45, top_k: int = 100):
    """Run detection over ``items`` and score it with 11-point VOC AP."""
    if not items:
        raise ValueError("cannot evaluate on an empty split")
    dets = detect_batch(model, [img.raster for img in items], [img.image_id for img in items],
                        conf_threshold, nms_iou, top_k)
    class_ids = list(range(1, model.num_classes))
    return evaluate_detections(dets, ds.ground_truth_records(items), class_ids, 0.5, model.class_names)


def validation_loss(model, items, config: TrainConfig, batch: int = 32) -> float:
    total = 0.0
    for start in range(0, len(items), batch):
        chunk = items[start : start + batch]
        loss, _, _ = batch_loss(model, _stack(chunk), [img.gt_arrays() for img in chunk], config)
        total += loss * len(chunk)
    return total / len(items)


def train(config: TrainConfig, out_dir=None, splits: DataSplits | None = None, resume_from=None,
          stop_after: int | None = None):
    """Train per ``config``.

    Iteration ``t`` (0-based) uses learning rate ``lr_at(schedule, t)`` and a
    batch drawn by a generator seeded with ``(seed, t)``, so a run resumed
    from a checkpoint continues bit-identically.

    Args:
        out_dir: if given, receives checkpoints, logs and the resolved config.
        splits: pre-built data (otherwise generated from ``config``).
        resume_from: checkpoint path to continue from.
        stop_after: end after this many total iterations (for interrupted runs).

    Returns:
        ``(model, TrainLog, splits)``.
    """
    spec = config.model_spec()
    if splits is None:
        splits = build_splits(config)
    for part in ("train", "val"):
        if not getattr(splits, part):
            raise ValueError(f"the {part} split is empty")
    if resume_from is not None:
        model, adam, extra = load_checkpoint(resume_from, spec)
        start = int(extra["iteration"])
        tlog = TrainLog([tuple(s) for s in extra.get("steps", [])], [tuple(v) for v in extra.get("validations", [])])
    else:
        model = build_model(spec, config.seed, acknowledge=True)
        adam = AdamState()
        start = 0
        tlog = TrainLog()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")

    rasters = _stack(splits.train)
    gts = [img.gt_arrays() for img in splits.train]
    end = config.iterations if stop_after is None else min(stop_after, config.iterations)
    bsz = min(config.batch_size, len(splits.train))

    for t in range(start, end):
        lr = lr_at(config.lr, t)
        rng = np.random.default_rng([config.seed, t])
        idx = np.sort(rng.choice(len(splits.train), size=bsz, replace=False))
        try:
            loss = train_step(model, adam, rasters[idx], [gts[i] for i in idx], config, lr)
        except FloatingPointError as exc:
            if out_dir is not None:
                save_checkpoint(Path(out_dir) / "diverged.ckpt", model, adam, {"iteration": t})
            raise TrainingDiverged(f"iteration {t}: {exc}") from exc
        tlog.steps.append((t, lr, loss))
        done = t + 1
        if done % config.val_interval == 0 or done == config.iterations:
            val_loss = validation_loss(model, splits.val, config)
            val_map = evaluate(model, splits.val, config.conf_threshold, config.nms_iou, config.top_k).mAP
            tlog.validations.append((done, val_loss, val_map))
            log.info("iter %d lr %.3g loss %.4f val_loss %.4f val_mAP %.4f", done, lr, loss, val_loss, val_map)
            if out_dir is not None:
                _checkpoint(out_dir, f"iter{done:06d}.ckpt", model, adam, done, tlog)
    if out_dir is not None:
        _checkpoint(out_dir, "final.ckpt", model, adam, end, tlog)
        tlog.write(out_dir)
    return model, tlog, splits


def _checkpoint(out_dir, name, model, adam, iteration, tlog):
    extra = {"iteration": iteration, "steps": tlog.steps, "validations": tlog.validations}
    save_checkpoint(Path(out_dir) / name, model, adam, extra)
