"""Annotation model and files, the stratified split rule, and a deterministic
synthetic scene generator with six parametric shape classes."""

import csv
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from edgessd.anchors import Box, jaccard_matrix

CLASS_NAMES = {
    0: "background",
    1: "rectangle",
    2: "ellipse",
    3: "triangle",
    4: "cross",
    5: "ring",
    6: "diamond",
}

# base RGB per shape class; jitter is added per instance
_CLASS_COLORS = np.array(
    [
        [210, 60, 50],
        [60, 190, 70],
        [60, 90, 220],
        [225, 200, 40],
        [200, 60, 200],
        [50, 200, 210],
    ],
    dtype=np.float64,
)


class AnnotationError(ValueError):
    pass


@dataclass
class LabeledImage:
    image_id: str
    objects: list  # [(class_id, Box)]
    raster: np.ndarray | None = None  # (H, W, 3) uint8

    @property
    def primary_class(self) -> int:
        return self.objects[0][0]

    def gt_arrays(self) -> tuple:
        boxes = np.array([b.as_array() for _, b in self.objects], dtype=np.float64).reshape(-1, 4)
        labels = np.array([c for c, _ in self.objects], dtype=np.int64)
        return boxes, labels


# ------------------------------------------------------------------ splits


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.2
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for f in (self.test_fraction, self.val_fraction):
            if not 0 < f < 1:
                raise ValueError(f"split fractions must lie in (0, 1), got {f}")


def _nearest(x: Fraction) -> int:
    # halves round up
    return math.floor(x + Fraction(1, 2))


def split_counts(total: int, spec: SplitSpec = SplitSpec()) -> tuple:
    """``(train, val, test)`` sizes for one class of ``total`` items."""
    if total < 3:
        raise ValueError(f"a class needs at least 3 items to fill three splits, got {total}")
    test = _nearest(Fraction(str(spec.test_fraction)) * total)
    val = _nearest(Fraction(str(spec.val_fraction)) * (total - test))
    return total - test - val, val, test


def split_dataset(per_class_items: dict, spec: SplitSpec = SplitSpec()) -> tuple:
    """Split each class independently by :func:`split_counts`.

    Membership comes from a shuffle seeded by ``(spec.seed, class_id)`` so it
    depends only on the seed and each class's item order.

    Returns:
        ``(train, val, test)`` dicts keyed like ``per_class_items``.
    """
    train, val, test = {}, {}, {}
    for cls in sorted(per_class_items):
        items = list(per_class_items[cls])
        n_train, n_val, _ = split_counts(len(items), spec)
        rng = np.random.default_rng([spec.seed, int(cls)])
        perm = rng.permutation(len(items))
        shuffled = [items[i] for i in perm]
        train[cls] = shuffled[:n_train]
        val[cls] = shuffled[n_train : n_train + n_val]
        test[cls] = shuffled[n_train + n_val :]
    return train, val, test


def group_by_primary_class(images) -> dict:
    groups: dict = {}
    for img in images:
        groups.setdefault(img.primary_class, []).append(img)
    return groups


def class_totals_for_train(train_count: int, num_classes: int = 6, spec: SplitSpec = SplitSpec()) -> list:
    """Smallest per-class totals whose train splits sum to ``train_count``."""
    targets = [train_count // num_classes + (c < train_count % num_classes) for c in range(num_classes)]
    totals = []
    for want in targets:
        t = max(want, 3)
        while split_counts(t, spec)[0] < want:
            t += 1
        if split_counts(t, spec)[0] != want:
            raise ValueError(f"no class total yields exactly {want} training items")
        totals.append(t)
    return totals


# ------------------------------------------------------------- annotations


def _fmt(v: float) -> str:
    return repr(float(v))


def write_annotations(items, path, scores: dict | None = None) -> None:
    """One line per object: ``image_path class_id xmin ymin xmax ymax``."""
    lines = ["# image_path class_id xmin ymin xmax ymax"]
    for img in items:
        for cls, box in img.objects:
            lines.append(" ".join([img.image_id, str(int(cls))] + [_fmt(v) for v in box.corners]))
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_record(line: str, lineno: int, n_fields: int):
    parts = line.split()
    if len(parts) != n_fields:
        raise AnnotationError(f"line {lineno}: expected {n_fields} fields, got {len(parts)}")
    try:
        cls = int(parts[1])
        nums = [float(v) for v in parts[2:]]
    except ValueError as exc:
        raise AnnotationError(f"line {lineno}: {exc}") from None
    xmin, ymin, xmax, ymax = nums[:4]
    if not all(math.isfinite(v) for v in nums):
        raise AnnotationError(f"line {lineno}: non-finite coordinate")
    if xmax <= xmin or ymax <= ymin:
        raise AnnotationError(f"line {lineno}: degenerate box (xmax <= xmin or ymax <= ymin)")
    if cls < 0:
        raise AnnotationError(f"line {lineno}: negative class id {cls}")
    return parts[0], cls, Box.from_corners(xmin, ymin, xmax, ymax), nums[4:]


def _records(path):
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def read_annotations(path) -> list:
    images: dict = {}
    for lineno, line in _records(path):
        image_id, cls, box, _ = _parse_record(line, lineno, 6)
        images.setdefault(image_id, LabeledImage(image_id, [])).objects.append((cls, box))
    return list(images.values())


def write_detections(detections, path) -> None:
    lines = ["# image_path class_id xmin ymin xmax ymax score"]
    for d in detections:
        lines.append(" ".join([d.image_id, str(int(d.class_id))] + [_fmt(v) for v in d.box.corners] + [_fmt(d.score)]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_detections(path) -> list:
    from edgessd.voc_eval import Detection

    out = []
    for lineno, line in _records(path):
        image_id, cls, box, rest = _parse_record(line, lineno, 7)
        out.append(Detection(image_id, cls, box, rest[0]))
    return out


def ground_truth_records(items) -> list:
    return [(img.image_id, cls, box) for img in items for cls, box in img.objects]


# ------------------------------------------------------------------ raster


def write_ppm(path, raster: np.ndarray) -> None:
    raster = np.asarray(raster, dtype=np.uint8)
    h, w, _ = raster.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(raster.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3).copy()


def load_rasters(items, root) -> None:
    """Fill ``raster`` of every item from ``root / image_id``."""
    root = Path(root)
    for img in items:
        if img.raster is None:
            img.raster = read_ppm(root / img.image_id)


# --------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 96
    num_classes: int = 6
    max_objects: int = 3
    clutter_density: float = 2.0
    occlusion_prob: float = 0.1
    scale_range: tuple = (0.22, 0.5)
    aspect_range: tuple = (0.7, 1.45)
    color_jitter: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(_CLASS_COLORS):
            raise ValueError(f"num_classes must be in 1..{len(_CLASS_COLORS)}")
        if self.max_objects < 1 or self.image_size < 16:
            raise ValueError("need max_objects >= 1 and image_size >= 16")
        if not 0 <= self.occlusion_prob <= 1 or self.clutter_density < 0:
            raise ValueError("occlusion_prob must be in [0, 1] and clutter_density >= 0")
        lo, hi = self.scale_range
        if not 0 < lo <= hi < 1:
            raise ValueError(f"bad scale_range {self.scale_range}")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def _shape_mask(cls: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership of local coordinates ``u, v`` in [-1, 1] for shape class ``cls``."""
    inside = (np.abs(u) <= 1) & (np.abs(v) <= 1)
    if cls == 1:
        return inside
    if cls == 2:
        return u * u + v * v <= 1
    if cls == 3:
        # apex at top, base at bottom
        return inside & (np.abs(u) <= (v + 1) / 2)
    if cls == 4:
        return inside & ((np.abs(u) <= 0.34) | (np.abs(v) <= 0.34))
    if cls == 5:
        r2 = u * u + v * v
        return (r2 <= 1) & (r2 >= 0.3)
    if cls == 6:
        return np.abs(u) + np.abs(v) <= 1
    raise ValueError(f"unknown shape class {cls}")


def _render_object(rng, spec: SceneSpec, cls: int, cx: float, cy: float, w: float, h: float):
    n = spec.image_size
    centers = (np.arange(n) + 0.5) / n
    u = (centers[None, :] - cx) / (w / 2)
    v = (centers[:, None] - cy) / (h / 2)
    mask = _shape_mask(cls, u, v)
    color = _CLASS_COLORS[cls - 1] * rng.uniform(0.75, 1.0) + rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
    return mask, np.clip(color, 0, 255)


def _mask_box(mask: np.ndarray, n: int) -> Box | None:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if len(rows) == 0:
        return None
    return Box.from_corners(cols[0] / n, rows[0] / n, (cols[-1] + 1) / n, (rows[-1] + 1) / n)


def _background(rng, n: int) -> np.ndarray:
    base = rng.uniform(70, 150, 3)
    grad = rng.uniform(-40, 40, 3)
    t = np.linspace(0, 1, n)
    direction = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(direction) * t[None, :] + np.sin(direction) * t[:, None]
    img = base[None, None, :] + ramp[..., None] * grad[None, None, :]
    return img + rng.normal(0, 6, (n, n, 3))


def _draw_clutter(rng, img: np.ndarray, spec: SceneSpec) -> None:
    n = spec.image_size
    for _ in range(rng.poisson(spec.clutter_density)):
        gray = rng.uniform(40, 200)
        color = gray + rng.uniform(-15, 15, 3)
        if rng.uniform() < 0.5:
            # thin line segment
            x0, y0 = rng.uniform(0, n, 2)
            ang = rng.uniform(0, np.pi)
            length = rng.uniform(0.05, 0.25) * n
            ts = np.linspace(0, length, int(length * 2) + 2)
            xs = np.clip((x0 + ts * np.cos(ang)).astype(int), 0, n - 1)
            ys = np.clip((y0 + ts * np.sin(ang)).astype(int), 0, n - 1)
            img[ys, xs] = color
        else:
            # small blob
            r = rng.uniform(0.01, 0.035) * n
            cx, cy = rng.uniform(0, n, 2)
            yy, xx = np.mgrid[0:n, 0:n]
            img[(xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r] = color


def _corners_overlap(a, others) -> float:
    if not others:
        return 0.0
    return float(jaccard_matrix([a], others).max())


def _intersects(a, others) -> bool:
    for b in others:
        if a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]:
            return True
    return False


def generate_image(spec: SceneSpec, index: int, primary_class: int | None = None, return_masks: bool = False):
    """Render image ``index`` of the dataset defined by ``spec``.

    The per-image generator is seeded by ``(spec.seed, index)`` so images can
    be produced independently and in any order.
    """
    rng = np.random.default_rng([spec.seed, index])
    n = spec.image_size
    img = _background(rng, n)
    _draw_clutter(rng, img, spec)

    count = int(rng.integers(1, spec.max_objects + 1))
    classes = [int(rng.integers(1, spec.num_classes + 1)) for _ in range(count)]
    if primary_class is not None:
        classes[0] = primary_class

    placed, objects, masks = [], [], []
    for k, cls in enumerate(classes):
        occlude = k > 0 and rng.uniform() < spec.occlusion_prob
        for _attempt in range(50):
            s = rng.uniform(*spec.scale_range)
            a = rng.uniform(*spec.aspect_range)
            w, h = s * math.sqrt(a), s / math.sqrt(a)
            w, h = min(w, 0.95), min(h, 0.95)
            if occlude:
                tx0, ty0, tx1, ty1 = placed[int(rng.integers(len(placed)))]
                cx = rng.uniform(tx0, tx1)
                cy = rng.uniform(ty0, ty1)
                cx = min(max(cx, w / 2), 1 - w / 2)
                cy = min(max(cy, h / 2), 1 - h / 2)
            else:
                cx = rng.uniform(w / 2, 1 - w / 2)
                cy = rng.uniform(h / 2, 1 - h / 2)
            corners = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
            if occlude:
                # visible but not buried: keep the overlap partial
                if 0 < _corners_overlap(corners, placed) <= 0.5:
                    break
            elif not _intersects(corners, placed):
                break
        else:
            continue
        mask, color = _render_object(rng, spec, cls, cx, cy, w, h)
        box = _mask_box(mask, n)
        if box is None:
            continue
        shade = 1.0 + rng.normal(0, 0.04, (n, n, 1))
        img = np.where(mask[..., None], color[None, None, :] * shade, img)
        placed.append(box.corners)
        objects.append((cls, box))
        masks.append(mask)

    raster = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    out = LabeledImage(f"img_{index:06d}.ppm", objects, raster)
    if return_masks:
        return out, masks
    return out


def generate_synthetic(spec: SceneSpec, count: int, primary_classes=None) -> list:
    """``count`` images; image ``i`` leads with class ``primary_classes[i]``
    (default: round-robin over the classes, which balances the split strata)."""
    if count < 0:
        raise ValueError("count must be >= 0")
    if primary_classes is None:
        primary_classes = [i % spec.num_classes + 1 for i in range(count)]
    return [generate_image(spec, i, int(primary_classes[i])) for i in range(count)]


def primary_classes_for_totals(totals) -> list:
    """Interleaved primary-class sequence containing ``totals[c]`` of class ``c + 1``."""
    remaining = list(totals)
    seq = []
    while any(remaining):
        for c, r in enumerate(remaining):
            if r:
                seq.append(c + 1)
                remaining[c] -= 1
    return seq


def save_dataset(items, out_dir, name: str = "annotations.txt") -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for img in items:
        write_ppm(out / "images" / img.image_id, img.raster)
    path = out / name
    write_annotations(items, path)
    return path


def write_split(train, val, test, out_dir) -> dict:
    """Write three annotation files plus ``manifest.json`` with per-class counts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"classes": {}}
    for name, part in (("train", train), ("val", val), ("test", test)):
        write_annotations([img for cls in sorted(part) for img in part[cls]], out / f"{name}.txt")
    for cls in sorted(train):
        manifest["classes"][str(cls)] = {
            "total": len(train[cls]) + len(val[cls]) + len(test[cls]),
            "train": len(train[cls]),
            "val": len(val[cls]),
            "test": len(test[cls]),
        }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def write_split_counts(manifest: dict, path) -> None:
    """Per-class ``class,total,train,val,test`` rows from a split manifest."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "total", "train", "val", "test"])
        for name, c in manifest["classes"].items():
            w.writerow([name, c["total"], c["train"], c["val"], c["test"]])


def read_split_counts(path) -> dict:
    with open(path, newline="") as fh:
        return {r["class"]: tuple(int(r[k]) for k in ("total", "train", "val", "test")) for r in csv.DictReader(fh)}
