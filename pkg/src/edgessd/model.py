"""MobileNet-SSD assembly from a declarative layer table.

A :class:`ModelSpec` mirrors the three columns of a MobileNet-SSD layer table
(type/stride, filter shape, input size) plus head taps. :func:`infer_shapes`
walks the table and reports rows whose declared input disagrees with the
previous layer's output; :func:`build_model` instantiates parameters.
"""

import copy
import csv
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from edgessd import anchors as geo
from edgessd.dataset import CLASS_NAMES
from edgessd.loss import softmax
from edgessd.nn.cost import CostEstimate, layer_cost
from edgessd.nn.layers import BatchNormParams, ConvSpec, ShapeError, batch_norm, conv2d_forward, relu6, same_padding
from edgessd.nn.tape import GradientTape
from edgessd.voc_eval import Detection

BOXES_PER_CELL = geo.BOXES_PER_CELL
FP16_MAX = 65504.0
CHECKPOINT_MAGIC = b"EDGESSD\x01"


class ModelSpecError(ValueError):
    pass


# -------------------------------------------------------------------- spec


@dataclass
class ModelSpec:
    name: str
    input_size: tuple  # (H, W, C)
    num_classes: int  # including background
    layers: list  # raw row dicts
    s_min: float = 0.2
    s_max: float = 0.9

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            return cls(
                name=d.get("name", "model"),
                input_size=tuple(int(v) for v in d["input_size"]),
                num_classes=int(d["num_classes"]),
                layers=[dict(row) for row in d["layers"]],
                s_min=float(d.get("s_min", 0.2)),
                s_max=float(d.get("s_max", 0.9)),
            )
        except KeyError as exc:
            raise ModelSpecError(f"model spec is missing field {exc}") from None

    @classmethod
    def load(cls, path) -> "ModelSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def bundled(cls, name: str) -> "ModelSpec":
        """``"mobilenet_ssd"`` (the full 300x300 table) or ``"toy_ssd"``."""
        text = resources.files("edgessd.data").joinpath(f"{name}.json").read_text()
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_size": list(self.input_size),
            "num_classes": self.num_classes,
            "s_min": self.s_min,
            "s_max": self.s_max,
            "layers": self.layers,
        }

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class LayerPlan:
    """One concrete convolution after repeats are expanded."""

    name: str
    row: int  # 1-based table row
    spec: ConvSpec
    in_hw: tuple
    out_hw: tuple
    tap: bool = False


@dataclass
class BuildReport:
    plans: list
    conflicts: list = field(default_factory=list)  # (row, message)
    resolutions: list = field(default_factory=list)  # (row, message)
    notes: list = field(default_factory=list)

    @property
    def consistent(self) -> bool:
        return not self.conflicts

    def lines(self) -> list:
        out = [f"layers: {len(self.plans)}"]
        out += [f"note: {n}" for n in self.notes]
        out += [f"conflict row {r}: {m}" for r, m in self.conflicts]
        out += [f"resolved row {r}: {m}" for r, m in self.resolutions]
        return out


def _row_spec(row: dict, rownum: int, in_channels: int, padding=None) -> ConvSpec:
    kind = row.get("type")
    filt = [int(v) for v in row.get("filter", [])]
    stride = int(row.get("stride", 1))
    if kind == "conv_dw":
        if len(filt) != 3 or filt[0] != filt[1]:
            raise ModelSpecError(f"row {rownum}: depthwise filter must be [K, K, M], got {filt}")
        k, m = filt[0], filt[2]
        pad = same_padding(k) if padding is None else padding
        return ConvSpec("depthwise", k, m, m, stride, pad)
    if kind == "conv":
        if len(filt) != 4 or filt[0] != filt[1]:
            raise ModelSpecError(f"row {rownum}: conv filter must be [K, K, M, N], got {filt}")
        k, m, n = filt[0], filt[2], filt[3]
        pad = same_padding(k) if padding is None else padding
        return ConvSpec("pointwise" if k == 1 else "standard", k, m, n, stride, pad)
    raise ModelSpecError(f"row {rownum}: unknown layer type {kind!r}")


def infer_shapes(spec: ModelSpec, acknowledge: bool = False) -> BuildReport:
    """Expand repeats and propagate shapes through the layer table.

    A row whose declared input disagrees with the running shape is a conflict.
    With ``acknowledge`` the one resolution tried is re-running the previous
    layer with zero padding (the valid-padding convention of MobileNet-SSD's
    extra layers); every resolution is listed in the report. Without it, the
    first conflict raises.

    Raises:
        ModelSpecError: on an unacknowledged or unresolvable conflict.
    """
    h, w, c = spec.input_size
    plans: list = []
    report = BuildReport(plans)
    rows = spec.layers
    i = 0
    while i < len(rows):
        row = rows[i]
        span = int(row.get("repeat_span", 1))
        repeat = int(row.get("repeat", 1))
        if repeat > 1:
            report.notes.append(f"rows {i + 1}-{i + span} repeated {repeat} times as a group")
        group = rows[i : i + span]
        for rep in range(repeat):
            for off, r in enumerate(group):
                rownum = i + off + 1
                declared = tuple(int(v) for v in r.get("input", (h, w, c)))
                if declared != (h, w, c):
                    msg = f"declared input {declared[0]}x{declared[1]}x{declared[2]} but previous layer yields {h}x{w}x{c}"
                    fixed = False
                    if acknowledge and plans:
                        prev = plans[-1]
                        alt = ConvSpec(prev.spec.kind, prev.spec.kernel_size, prev.spec.in_channels,
                                       prev.spec.out_channels, prev.spec.stride, 0)
                        ah, aw = alt.output_hw(*prev.in_hw)
                        if (ah, aw, alt.out_channels) == declared:
                            plans[-1] = LayerPlan(prev.name, prev.row, alt, prev.in_hw, (ah, aw), prev.tap)
                            h, w = ah, aw
                            report.conflicts.append((rownum, msg))
                            report.resolutions.append(
                                (prev.row, f"padding set to 0 so row {prev.row} yields {ah}x{aw} as row {rownum} declares")
                            )
                            fixed = True
                    if not fixed:
                        raise ModelSpecError(f"row {rownum} ({r.get('type')} {r.get('filter')}): {msg}")
                conv = _row_spec(r, rownum, c, r.get("padding"))
                if conv.in_channels != c:
                    raise ModelSpecError(f"row {rownum}: filter expects {conv.in_channels} input channels, got {c}")
                oh, ow = conv.output_hw(h, w)
                if oh < 1 or ow < 1:
                    raise ModelSpecError(f"row {rownum}: kernel {conv.kernel_size} does not fit {h}x{w}")
                suffix = f".{rep}" if repeat > 1 else ""
                tap = bool(r.get("tap")) and rep == repeat - 1
                plans.append(LayerPlan(f"l{len(plans):02d}_r{rownum}{suffix}", rownum, conv, (h, w), (oh, ow), tap))
                h, w, c = oh, ow, conv.out_channels
        i += span
    if not any(p.tap for p in plans):
        raise ModelSpecError("model spec has no head taps")
    return report


def cost_table(report: BuildReport) -> list:
    """Per-layer ``(plan, CostEstimate)`` using the output map side as feature size."""
    return [(p, layer_cost(p.spec, p.out_hw[0])) for p in report.plans]


COST_COLUMNS = ["name", "row", "kind", "kernel", "in_channels", "out_channels", "stride", "padding", "feature_size",
                "params", "madds"]


def write_cost_csv(report: BuildReport, path) -> CostEstimate:
    """Per-layer cost rows followed by a ``TOTAL`` row; returns the total."""
    total = CostEstimate(0, 0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COST_COLUMNS)
        for plan, cost in cost_table(report):
            s = plan.spec
            w.writerow([plan.name, plan.row, s.kind, s.kernel_size, s.in_channels, s.out_channels, s.stride,
                        s.padding, plan.out_hw[0], cost.params, cost.madds])
            total = total + cost
        w.writerow(["TOTAL"] + [""] * 8 + [total.params, total.madds])
    return total


def read_cost_csv(path) -> tuple:
    """``(rows, total)``: layer rows as dicts with int fields, and the ``TOTAL`` CostEstimate."""
    rows, total = [], None
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            if rec["name"] == "TOTAL":
                total = CostEstimate(int(rec["params"]), int(rec["madds"]))
                continue
            rows.append({k: (v if k in ("name", "kind") else int(v)) for k, v in rec.items()})
    if total is None:
        raise ValueError(f"{path}: no TOTAL row")
    return rows, total


def separable_stages(report: BuildReport) -> list:
    """``(depthwise plan, pointwise plan)`` pairs in order."""
    out = []
    plans = report.plans
    for a, b in zip(plans, plans[1:]):
        if a.spec.kind == "depthwise" and b.spec.kind == "pointwise":
            out.append((a, b))
    return out


# ------------------------------------------------------------------- model


@dataclass
class Head:
    name: str
    spec: ConvSpec
    hw: tuple


@dataclass
class Model:
    spec: ModelSpec
    report: BuildReport
    params: dict  # name -> array (trainable)
    bn: dict  # layer name -> BatchNormParams (gamma/beta shared with params)
    heads: list
    anchors: geo.AnchorSet
    class_names: dict
    precision_notes: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def plans(self) -> list:
        return self.report.plans

    def trunk_weight_count(self) -> int:
        return sum(self.params[p.name + ".weight"].size for p in self.plans)

    def parameter_count(self) -> int:
        return sum(a.size for a in self.params.values())

    def state_arrays(self) -> dict:
        out = {f"param/{k}": v for k, v in self.params.items()}
        for name, bn in self.bn.items():
            out[f"bn/{name}.running_mean"] = bn.running_mean
            out[f"bn/{name}.running_var"] = bn.running_var
        return out


def build_model(spec: ModelSpec, init_seed: int = 0, acknowledge: bool = False) -> Model:
    """Instantiate a model: seeded normal weights with std ``1/sqrt(fan_in)``,
    identity batch norm, one 3x3 head per tap with ``6 (c + 4)`` outputs."""
    report = infer_shapes(spec, acknowledge)
    rng = np.random.default_rng(init_seed)
    params: dict = {}
    bn: dict = {}
    for p in report.plans:
        s = p.spec
        fan_in = s.kernel_size**2 * (1 if s.kind == "depthwise" else s.in_channels)
        params[p.name + ".weight"] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), s.weight_shape)
        norm = BatchNormParams.identity(s.out_channels)
        params[p.name + ".gamma"] = norm.gamma
        params[p.name + ".beta"] = norm.beta
        bn[p.name] = norm
    heads = []
    per_box = spec.num_classes + 4
    for k, p in enumerate(pl for pl in report.plans if pl.tap):
        hs = ConvSpec("standard", 3, p.spec.out_channels, BOXES_PER_CELL * per_box, 1, 1)
        name = f"head{k}"
        params[name + ".weight"] = rng.normal(0.0, 1.0 / math.sqrt(9 * hs.in_channels), hs.weight_shape)
        params[name + ".bias"] = np.zeros(hs.out_channels)
        heads.append(Head(name, hs, p.out_hw))
    maps = [h.hw[0] for h in heads]
    if any(h.hw[0] != h.hw[1] for h in heads):
        raise ModelSpecError("head taps must be square feature maps")
    if len(maps) < 2:
        raise ModelSpecError(f"need at least two head taps for the scale rule, got {len(maps)}")
    anchor_set = geo.gen_default_boxes(maps, spec.s_min, spec.s_max)
    names = {c: CLASS_NAMES.get(c, str(c)) for c in range(spec.num_classes)}
    return Model(spec, report, params, bn, heads, anchor_set, names)


# ----------------------------------------------------------------- forward


def _as_batch(images, spec: ModelSpec) -> np.ndarray:
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    h, w, c = spec.input_size
    if x.ndim != 4:
        raise ShapeError(f"expected image batch, got shape {x.shape}")
    if x.shape[1:] == (h, w, c):  # NHWC raster(s)
        x = x.transpose(0, 3, 1, 2)
    if x.shape[1:] != (c, h, w):
        raise ShapeError(f"image shape {x.shape[1:]} does not match model input {(c, h, w)}")
    if x.dtype == np.uint8:
        return x.astype(np.float64) / 127.5 - 1.0
    return np.ascontiguousarray(x, dtype=np.float64)


def forward(model: Model, images, tape: GradientTape | None = None, training: bool = False) -> np.ndarray:
    """Raw head outputs ``(B, A, c + 4)`` in anchor order (class logits, then offsets)."""
    x = _as_batch(images, model.spec)
    if tape is not None:
        for name, arr in model.params.items():
            tape.watch(arr, name)
    outs = []
    head_iter = iter(model.heads)
    for p in model.plans:
        x = conv2d_forward(x, model.params[p.name + ".weight"], p.spec, tape)
        x = batch_norm(x, model.bn[p.name], training, tape)
        x = relu6(x, tape)
        if p.tap:
            head = next(head_iter)
            outs.append(conv2d_forward(x, model.params[head.name + ".weight"], head.spec, tape, model.params[head.name + ".bias"]))
    return _assemble(outs, model.num_classes + 4, tape)


def _assemble(outs, per_box: int, tape):
    b = outs[0].shape[0]
    shapes = [o.shape for o in outs]
    flat = [o.transpose(0, 2, 3, 1).reshape(b, -1, per_box) for o in outs]
    y = np.concatenate(flat, axis=1)
    if tape is not None:
        sizes = [f.shape[1] for f in flat]

        def grad_fn(gy):
            grads, start = [], 0
            for (bb, ch, hh, ww), n in zip(shapes, sizes):
                g = gy[:, start : start + n].reshape(bb, hh, ww, ch).transpose(0, 3, 1, 2)
                grads.append(np.ascontiguousarray(g))
                start += n
            return grads

        tape.record("assemble_heads", y, tuple(outs), grad_fn)
    return y


@dataclass
class RawPrediction:
    logits: np.ndarray  # (B, A, c)
    offsets: np.ndarray  # (B, A, 4)
    map_sizes: list

    @property
    def size(self) -> int:
        return self.logits.size + self.offsets.size

    def per_map(self) -> list:
        """``(logits, offsets)`` slices for each feature map."""
        out, start = [], 0
        for m in self.map_sizes:
            n = m * m * BOXES_PER_CELL
            out.append((self.logits[:, start : start + n], self.offsets[:, start : start + n]))
            start += n
        return out


def predict_raw(model: Model, images) -> RawPrediction:
    y = forward(model, images)
    c = model.num_classes
    return RawPrediction(y[..., :c], y[..., c:], [h.hw[0] for h in model.heads])


def detect(model: Model, image, conf_threshold: float = 0.3, nms_iou: float = 0.45, top_k: int = 100,
           image_id: str = "") -> list:
    """Detections for one image: softmax, drop background, keep scores above
    ``conf_threshold``, decode, per-class NMS, best ``top_k`` overall."""
    raw = predict_raw(model, image)
    return _detections_from_raw(model, raw.logits[0], raw.offsets[0], conf_threshold, nms_iou, top_k, image_id)


def detect_batch(model: Model, images, image_ids, conf_threshold=0.3, nms_iou=0.45, top_k=100, batch_size=32) -> list:
    out = []
    for start in range(0, len(images), batch_size):
        chunk = np.stack([np.asarray(im) for im in images[start : start + batch_size]])
        raw = predict_raw(model, chunk)
        for k in range(len(chunk)):
            out.extend(_detections_from_raw(model, raw.logits[k], raw.offsets[k], conf_threshold, nms_iou,
                                            top_k, image_ids[start + k]))
    return out


def _detections_from_raw(model, logits, offsets, conf_threshold, nms_iou, top_k, image_id):
    prob = softmax(logits)[:, 1:]
    a_idx, c_idx = np.nonzero(prob > conf_threshold)
    if len(a_idx) == 0:
        return []
    scores = prob[a_idx, c_idx]
    offs = offsets[a_idx].copy()
    offs[:, 2:] = np.clip(offs[:, 2:], -8.0, 8.0)
    boxes = geo.decode_boxes(offs, model.anchors.boxes[a_idx])
    corners = np.clip(geo.to_corners(boxes), 0.0, 1.0)
    ok = (corners[:, 2] > corners[:, 0]) & (corners[:, 3] > corners[:, 1])
    corners, scores, classes = corners[ok], scores[ok], c_idx[ok] + 1
    keep = geo.nms(corners, scores, classes, nms_iou, top_k)
    keep = keep[np.argsort(-scores[keep], kind="stable")][:top_k]
    return [Detection(image_id, int(classes[i]), geo.Box.from_corners(*corners[i]), float(scores[i])) for i in keep]


# ------------------------------------------------------------------- fp16


def simulate_fp16(model: Model) -> Model:
    """Copy of ``model`` with every stored weight and BN statistic rounded to
    the nearest binary16 value and kept at float64. Magnitudes beyond 65504
    saturate; their count is in ``precision_notes["fp16_saturated"]``."""
    out = copy.deepcopy(model)
    saturated = 0
    for arr in _all_weight_arrays(out):
        over = np.abs(arr) > FP16_MAX
        saturated += int(np.count_nonzero(over))
        clipped = np.clip(arr, -FP16_MAX, FP16_MAX)
        arr[...] = clipped.astype(np.float16).astype(np.float64)
    out.precision_notes = {"fp16": True, "fp16_saturated": saturated}
    return out


def _all_weight_arrays(model: Model):
    yield from model.params.values()
    for bn in model.bn.values():
        yield bn.running_mean
        yield bn.running_var


# -------------------------------------------------------------- checkpoint


def save_checkpoint(path, model: Model, adam=None, extra: dict | None = None) -> None:
    """Binary checkpoint: magic, JSON header length, JSON header, raw float64 arrays.

    The layout has no timestamps, so identical states give identical bytes.
    """
    arrays = dict(model.state_arrays())
    header = {"version": 1, "spec_hash": model.spec.hash(), "spec": model.spec.to_dict(), "extra": extra or {}}
    if adam is not None:
        arrays.update(adam.to_arrays())
        header["adam"] = adam.meta()
    entries, offset = [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header["arrays"] = entries
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in sorted(arrays):
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple:
    data = Path(path).read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an edgessd checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<Q", data[pos : pos + 8])
    pos += 8
    header = json.loads(data[pos : pos + n])
    base = pos + n
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = np.frombuffer(data, "<f8", count, base + e["offset"]).reshape(e["shape"]).astype(np.float64)
    return header, arrays


def load_checkpoint(path, spec: ModelSpec | None = None, acknowledge: bool = True):
    """Rebuild the model (and Adam state, if stored) from a checkpoint.

    When ``spec`` is given its hash must match the stored one.

    Returns:
        ``(model, adam_state_or_None, extra)``.
    """
    from edgessd.optim import AdamState

    header, arrays = read_checkpoint(path)
    stored = ModelSpec.from_dict(header["spec"])
    if stored.hash() != header["spec_hash"]:
        raise ValueError(f"{path}: spec hash mismatch inside checkpoint")
    if spec is not None and spec.hash() != header["spec_hash"]:
        raise ValueError(f"{path}: checkpoint was written for a different model spec")
    model = build_model(stored, 0, acknowledge)
    for key, arr in arrays.items():
        kind, _, name = key.partition("/")
        if kind == "param":
            model.params[name][...] = arr
        elif kind == "bn":
            layer, _, stat = name.rpartition(".")
            getattr(model.bn[layer], stat)[...] = arr
    adam = AdamState.from_arrays(header["adam"], arrays) if "adam" in header else None
    return model, adam, header.get("extra", {})
