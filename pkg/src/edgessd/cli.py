"""``edgessd`` command line.

Every subcommand resolves its options as built-in default < ``--config`` JSON
file < command-line flag, writes the resolved values to
``<out>/resolved_config.json``, and reports failures as a single JSON line on
stderr with a nonzero exit status (1 for rejected input, 2 for usage errors).
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from edgessd import __version__
from edgessd import dataset as ds
from edgessd import econ
from edgessd.optim import LrSchedule


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass(frozen=True)
class Opt:
    flag: str
    type: object
    default: object
    help: str
    choices: tuple | None = None

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _scene_opts(defaults: ds.SceneSpec) -> list:
    return [
        Opt("--image-size", int, defaults.image_size, "square image side in pixels"),
        Opt("--num-classes", int, defaults.num_classes, "number of shape classes"),
        Opt("--max-objects", int, defaults.max_objects, "objects per image, drawn from 1..max"),
        Opt("--clutter-density", float, defaults.clutter_density, "mean number of distractor strokes and blobs"),
        Opt("--occlusion-prob", float, defaults.occlusion_prob, "chance an extra object partially overlaps another"),
        Opt("--color-jitter", float, defaults.color_jitter, "per-instance RGB jitter amplitude"),
    ]


def _command_opts() -> dict:
    from edgessd.train import TrainConfig

    tc = TrainConfig()
    scene = _scene_opts(ds.SceneSpec())
    split = ds.SplitSpec()
    detect_opts = [
        Opt("--conf-threshold", float, tc.conf_threshold, "minimum class score kept"),
        Opt("--nms-iou", float, tc.nms_iou, "NMS suppression overlap"),
        Opt("--top-k", int, tc.top_k, "detections kept per image"),
    ]
    return {
        "gen-data": [Opt("--count", int, 100, "number of images")] + scene,
        "split": [
            Opt("--annotations", str, None, "annotation file to split by each image's first object class"),
            Opt("--totals", str, None, "JSON file with per-class totals: a list, or {\"class_totals\": list|dict}"),
            Opt("--test-fraction", float, split.test_fraction, "share of each class held out for test"),
            Opt("--val-fraction", float, split.val_fraction, "share of the remainder used for validation"),
        ],
        "train": [
            Opt("--model", str, tc.model, "bundled spec name or path to a spec JSON"),
            Opt("--train-images", int, tc.train_images, "size of the training split"),
            Opt("--batch-size", int, tc.batch_size, "images per step"),
            Opt("--iterations", int, tc.iterations, "optimizer steps"),
            Opt("--lr", float, tc.lr.initial, "initial learning rate"),
            Opt("--lr-decay", float, tc.lr.decay, "multiplicative decay per period"),
            Opt("--lr-period", int, tc.lr.period, "steps between decays"),
            Opt("--loss", str, tc.loss, "confidence loss", ("focal", "hnm")),
            Opt("--val-interval", int, tc.val_interval, "steps between validations and checkpoints"),
            Opt("--resume", str, None, "checkpoint to continue from"),
            Opt("--save-data", _bool, False, "also write the generated splits (images and annotations)"),
        ] + scene + detect_opts,
        "eval": [
            Opt("--checkpoint", str, None, "model checkpoint (required)"),
            Opt("--annotations", str, None, "ground-truth annotation file"),
            Opt("--images", str, None, "directory holding the annotated images"),
            Opt("--train-config", str, None, "config.json of a training run; regenerates its synthetic split"),
            Opt("--split", str, "test", "split to regenerate with --train-config", ("train", "val", "test")),
            Opt("--fp16", _bool, False, "round weights to binary16 before evaluating"),
        ] + detect_opts,
        "detect": [
            Opt("--checkpoint", str, None, "model checkpoint (required)"),
            Opt("--images", str, None, "comma-separated PPM files, or a directory of them (required)"),
        ] + detect_opts,
        "bench": [
            Opt("--checkpoint", str, None, "model checkpoint; a freshly initialized --model otherwise"),
            Opt("--model", str, "toy_ssd", "bundled spec name or spec JSON used without --checkpoint"),
            Opt("--images", str, None, "comma-separated PPM files or a directory; synthetic frames otherwise"),
            Opt("--frames", int, 16, "synthetic frames when --images is not given"),
            Opt("--warmup", int, 1, "untimed passes"),
            Opt("--repetitions", int, 3, "timed passes"),
        ],
        "econ": [
            Opt("--profiles", str, None, "device profile JSON; the bundled published setups otherwise"),
        ],
        "cost-model": [
            Opt("--model", str, "mobilenet_ssd", "bundled spec name or spec JSON"),
            Opt("--strict", _bool, False, "fail on the first shape conflict instead of resolving it"),
        ],
    }


COMMON = [
    Opt("--seed", int, 0, "seed for every random choice"),
    Opt("--out", str, "edgessd-out", "output directory"),
]

HELP = {
    "gen-data": "render a synthetic dataset with annotations",
    "split": "stratified train/val/test split",
    "train": "train a detector on synthetic scenes",
    "eval": "11-point VOC evaluation of a checkpoint",
    "detect": "write detections for images",
    "bench": "time single-image inference",
    "econ": "rank devices by price- and power-normalized benefit",
    "cost-model": "per-layer parameter and multiply-add table",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="edgessd", description="Edge SSD detection toolkit.")
    parser.add_argument("--version", action="version", version=f"edgessd {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, opts in _command_opts().items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", default=None, help="JSON file of option values (flags override it)")
        for o in opts + COMMON:
            kwargs = dict(type=o.type, default=argparse.SUPPRESS, help=f"{o.help} (default: {o.default})")
            if o.choices:
                kwargs["choices"] = o.choices
            p.add_argument(o.flag, dest=o.dest, **kwargs)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Built-in defaults, then the config file, then explicit flags."""
    opts = {o.dest: o for o in _command_opts()[command] + COMMON}
    values = {d: o.default for d, o in opts.items()}
    if args.config:
        data = json.loads(Path(args.config).read_text())
        if not isinstance(data, dict):
            raise ValueError(f"{args.config}: config must be a JSON object")
        if isinstance(data.get(command), dict):
            data = data[command]
        for key, val in data.items():
            dest = key.replace("-", "_")
            if dest not in opts:
                raise ValueError(f"{args.config}: unknown option {key!r} for {command}")
            o = opts[dest]
            try:
                val = None if val is None else o.type(val)
            except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                raise ValueError(f"{args.config}: bad value for {key!r}: {exc}") from None
            if o.choices and val not in o.choices:
                raise ValueError(f"{args.config}: {key!r} must be one of {list(o.choices)}")
            values[dest] = val
    for dest in opts:
        if hasattr(args, dest):
            values[dest] = getattr(args, dest)
    return values


def _snapshot(out: Path, command: str, values: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    snap = {"command": command, "version": __version__, "options": values}
    (out / "resolved_config.json").write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n")


def _scene(v: dict) -> ds.SceneSpec:
    return ds.SceneSpec(image_size=v["image_size"], num_classes=v["num_classes"], max_objects=v["max_objects"],
                        clutter_density=v["clutter_density"], occlusion_prob=v["occlusion_prob"],
                        color_jitter=v["color_jitter"], seed=v["seed"])


def _ppm_paths(spec: str) -> list:
    p = Path(spec)
    if p.is_dir():
        paths = sorted(p.glob("*.ppm"))
    else:
        paths = [Path(s) for s in spec.split(",") if s]
    if not paths:
        raise ValueError(f"no PPM images found in {spec!r}")
    return paths


def _require(v: dict, key: str) -> str:
    if not v[key]:
        raise ValueError(f"--{key.replace('_', '-')} is required")
    return v[key]


# ---------------------------------------------------------------- commands


def cmd_gen_data(v: dict, out: Path) -> dict:
    images = ds.generate_synthetic(_scene(v), v["count"])
    path = ds.save_dataset(images, out)
    return {"images": len(images), "objects": sum(len(i.objects) for i in images), "annotations": str(path)}


def _read_totals(path) -> tuple:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data.get("class_totals", data)
    if isinstance(data, list):
        return [str(i + 1) for i in range(len(data))], [int(t) for t in data]
    if isinstance(data, dict):
        return list(data), [int(t) for t in data.values()]
    raise ValueError(f"{path}: expected a list or mapping of class totals")


def cmd_split(v: dict, out: Path) -> dict:
    spec = ds.SplitSpec(v["test_fraction"], v["val_fraction"], v["seed"])
    if bool(v["annotations"]) == bool(v["totals"]):
        raise ValueError("give exactly one of --annotations and --totals")
    if v["annotations"]:
        items = ds.read_annotations(v["annotations"])
        tr, va, te = ds.split_dataset(ds.group_by_primary_class(items), spec)
        manifest = ds.write_split(tr, va, te, out)
    else:
        names, totals = _read_totals(v["totals"])
        manifest = {"classes": {}}
        for name, total in zip(names, totals):
            n_tr, n_va, n_te = ds.split_counts(total, spec)
            manifest["classes"][name] = {"total": total, "train": n_tr, "val": n_va, "test": n_te}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    ds.write_split_counts(manifest, out / "split_counts.csv")
    return manifest


def train_config_from(v: dict):
    from edgessd.train import TrainConfig

    return TrainConfig(
        scene=_scene(v), model=v["model"], train_images=v["train_images"], batch_size=v["batch_size"],
        iterations=v["iterations"], split=ds.SplitSpec(seed=v["seed"]), loss=v["loss"],
        lr=LrSchedule(v["lr"], v["lr_decay"], v["lr_period"]), seed=v["seed"], val_interval=v["val_interval"],
        conf_threshold=v["conf_threshold"], nms_iou=v["nms_iou"], top_k=v["top_k"],
    )


def cmd_train(v: dict, out: Path) -> dict:
    from edgessd.train import build_splits, train

    cfg = train_config_from(v)
    splits = build_splits(cfg)
    if v["save_data"]:
        for part in ("train", "val", "test"):
            ds.save_dataset(getattr(splits, part), out / "data", f"{part}.txt")
    _, tlog, _ = train(cfg, out, splits, resume_from=v["resume"])
    summary = {"iterations": len(tlog.steps), "checkpoint": str(out / "final.ckpt")}
    if tlog.steps:
        summary["final_loss"] = tlog.steps[-1][2]
    if tlog.validations:
        summary["val_loss"], summary["val_map"] = tlog.validations[-1][1:]
    return summary


def _eval_items(v: dict) -> list:
    if v["train_config"]:
        from edgessd.train import TrainConfig, build_splits

        cfg = TrainConfig.from_dict(json.loads(Path(v["train_config"]).read_text()))
        return getattr(build_splits(cfg), v["split"])
    items = ds.read_annotations(_require(v, "annotations"))
    root = Path(v["images"]) if v["images"] else Path(v["annotations"]).parent / "images"
    ds.load_rasters(items, root)
    return items


def _load_model(path):
    from edgessd.model import load_checkpoint

    return load_checkpoint(path)[0]


def cmd_eval(v: dict, out: Path) -> dict:
    from edgessd.model import simulate_fp16
    from edgessd.train import evaluate

    model = _load_model(_require(v, "checkpoint"))
    if v["fp16"]:
        model = simulate_fp16(model)
    items = _eval_items(v)
    report = evaluate(model, items, v["conf_threshold"], v["nms_iou"], v["top_k"])
    report.write(out)
    return {"images": len(items), "mAP": report.mAP, "report": str(out / "report.json")}


def cmd_detect(v: dict, out: Path) -> dict:
    from edgessd.model import detect_batch

    model = _load_model(_require(v, "checkpoint"))
    paths = _ppm_paths(_require(v, "images"))
    rasters = [ds.read_ppm(p) for p in paths]
    dets = detect_batch(model, rasters, [p.name for p in paths], v["conf_threshold"], v["nms_iou"], v["top_k"])
    ds.write_detections(dets, out / "detections.txt")
    return {"images": len(paths), "detections": len(dets), "file": str(out / "detections.txt")}


def cmd_bench(v: dict, out: Path) -> dict:
    from edgessd._accel import backend_name
    from edgessd.model import build_model
    from edgessd.train import TrainConfig

    if v["checkpoint"]:
        model = _load_model(v["checkpoint"])
    else:
        model = build_model(TrainConfig(model=v["model"]).model_spec(), v["seed"], acknowledge=True)
    if v["images"]:
        images = [ds.read_ppm(p) for p in _ppm_paths(v["images"])]
    else:
        h, w, _ = model.spec.input_size
        scene = ds.SceneSpec(image_size=h, seed=v["seed"]) if h == w else None
        if scene is None:
            raise ValueError("synthetic frames need a square model input; pass --images")
        images = [img.raster for img in ds.generate_synthetic(scene, v["frames"])]
    m = econ.benchmark_fps(model, images, v["warmup"], v["repetitions"])
    result = {"backend": backend_name(), "model": model.spec.name, **m.to_dict()}
    (out / "fps.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def cmd_econ(v: dict, out: Path) -> dict:
    profiles = econ.load_profiles(v["profiles"]) if v["profiles"] else econ.bundled_profiles()
    report = econ.normalized_benefit(profiles)
    report.write_csv(out / "econ.csv")
    report.write_json(out / "econ.json")
    return {"ranking": report.ranking, "benefit": econ.BENEFIT_FORMULA}


def cmd_cost_model(v: dict, out: Path) -> dict:
    from edgessd.model import infer_shapes, separable_stages, write_cost_csv
    from edgessd.nn.cost import madds_ratio, reduction_factor
    from edgessd.train import TrainConfig

    spec = TrainConfig(model=v["model"]).model_spec()
    report = infer_shapes(spec, acknowledge=not v["strict"])
    total = write_cost_csv(report, out / "cost_model.csv")
    (out / "build_report.txt").write_text("\n".join(report.lines()) + "\n")
    stages = []
    for dw, pw in separable_stages(report):
        k, m, n, f = dw.spec.kernel_size, pw.spec.in_channels, pw.spec.out_channels, pw.out_hw[0]
        ratio = madds_ratio(k, m, n, f)
        stages.append({"depthwise": dw.name, "pointwise": pw.name, "kernel": k, "in_channels": m,
                       "out_channels": n, "feature_size": f, "separable_over_standard": str(ratio),
                       "reduction": reduction_factor(k, n)})
    (out / "separable_stages.json").write_text(json.dumps(stages, indent=2) + "\n")
    return {"layers": len(report.plans), "params": total.params, "madds": total.madds,
            "conflicts": len(report.conflicts)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "detect": cmd_detect,
    "bench": cmd_bench,
    "econ": cmd_econ,
    "cost-model": cmd_cost_model,
}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": msg}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        values = resolve(args.command, args)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except (OSError, ValueError) as exc:
        return _fail("config", exc, 1)
    out = Path(values["out"])
    try:
        _snapshot(out, args.command, values)
        result = COMMANDS[args.command](values, out)
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        return _fail("rejected", exc, 1)
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
