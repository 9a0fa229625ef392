"""Deployment economics: wall-clock FPS, FPS per Watt, and a price- and
power-normalized benefit used to rank edge devices."""

import csv
import json
import math
import time
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np

BENEFIT_FORMULA = "fps / (watts * price)"


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    fps: float
    watts: float
    price: float
    map: float | None = None  # percent

    def __post_init__(self):
        for field_name in ("fps", "watts", "price"):
            v = getattr(self, field_name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"{self.name}: {field_name} must be a positive number, got {v!r}")


@dataclass(frozen=True)
class DeviceEcon:
    profile: DeviceProfile
    efficiency: float  # FPS per Watt
    raw_benefit: float
    normalized_benefit: float
    rank: int  # 1 = best


@dataclass
class EconReport:
    rows: list  # DeviceEcon in ranking order

    @property
    def ranking(self) -> list:
        return [r.profile.name for r in self.rows]

    def by_name(self, name: str) -> DeviceEcon:
        for r in self.rows:
            if r.profile.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "benefit_formula": BENEFIT_FORMULA,
            "normalization": "raw benefit / max raw benefit",
            "devices": [
                {
                    "rank": r.rank,
                    "name": r.profile.name,
                    "fps": r.profile.fps,
                    "watts": r.profile.watts,
                    "price": r.profile.price,
                    "map": r.profile.map,
                    "efficiency_fps_per_watt": r.efficiency,
                    "raw_benefit": r.raw_benefit,
                    "normalized_benefit": r.normalized_benefit,
                }
                for r in self.rows
            ],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        cols = ["rank", "name", "fps", "watts", "price", "map", "efficiency_fps_per_watt", "raw_benefit",
                "normalized_benefit"]
        with open(path, "w", newline="") as fh:
            fh.write(f"# benefit = {BENEFIT_FORMULA}, normalized by the maximum\n")
            w = csv.writer(fh)
            w.writerow(cols)
            for d in self.to_dict()["devices"]:
                w.writerow(["" if d[c] is None else repr(d[c]) if isinstance(d[c], float) else d[c] for c in cols])


def read_econ_csv(path) -> list:
    """Rows of a report written by :meth:`EconReport.write_csv` as dicts with typed values."""
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    out = []
    for row in csv.DictReader(lines):
        rec = {"rank": int(row["rank"]), "name": row["name"]}
        for k, v in row.items():
            if k not in rec:
                rec[k] = float(v) if v != "" else None
        out.append(rec)
    return out


def efficiency(p: DeviceProfile) -> float:
    return p.fps / p.watts


def raw_benefit(p: DeviceProfile) -> float:
    return p.fps / (p.watts * p.price)


def normalized_benefit(profiles) -> EconReport:
    """Score every profile and rank by normalized benefit; ties keep input order."""
    profiles = list(profiles)
    if not profiles:
        raise ValueError("need at least one device profile")
    raws = [raw_benefit(p) for p in profiles]
    best = max(raws)
    order = sorted(range(len(profiles)), key=lambda i: -raws[i])  # stable: ties keep input order
    rows = [
        DeviceEcon(profiles[i], efficiency(profiles[i]), raws[i], raws[i] / best, rank)
        for rank, i in enumerate(order, start=1)
    ]
    return EconReport(rows)


def speedup(fast_fps: float, slow_fps: float) -> float:
    if fast_fps <= 0 or slow_fps <= 0:
        raise ValueError("frame rates must be positive")
    return fast_fps / slow_fps


def load_profiles(path) -> list:
    """Read ``{"devices": [{name, fps, watts, price, map?}, ...]}``."""
    return _profiles_from(json.loads(Path(path).read_text()))


def bundled_profiles() -> list:
    """The four published device setups (speeds, power and prices are inputs, not measurements)."""
    text = resources.files("edgessd.data").joinpath("published_devices.json").read_text()
    return _profiles_from(json.loads(text))


def _profiles_from(data: dict) -> list:
    try:
        return [DeviceProfile(d["name"], float(d["fps"]), float(d["watts"]), float(d["price"]), d.get("map"))
                for d in data["devices"]]
    except KeyError as exc:
        raise ValueError(f"device profile is missing field {exc}") from None


def write_profiles(profiles, path) -> None:
    Path(path).write_text(json.dumps({"devices": [asdict(p) for p in profiles]}, indent=2) + "\n")


# ------------------------------------------------------------------ timing


@dataclass(frozen=True)
class FpsMeasurement:
    fps: float  # total frames / total timed seconds
    fps_min: float  # slowest repetition
    fps_max: float  # fastest repetition
    frames: int
    seconds: float
    repetitions: int
    warmup: int

    def to_dict(self) -> dict:
        return asdict(self)


def benchmark_fps(model, images, warmup: int = 1, repetitions: int = 3, *, infer=None,
                  clock=time.perf_counter) -> FpsMeasurement:
    """Time single-image inference over ``images``.

    ``warmup`` full passes run first and are not timed. Each of the
    ``repetitions`` timed passes is measured separately with the monotonic
    ``clock``.

    Args:
        infer: ``infer(image)`` to time; defaults to :func:`edgessd.model.detect`.
    """
    images = list(images)
    if not images:
        raise ValueError("benchmark needs at least one image")
    if repetitions < 1 or warmup < 0:
        raise ValueError("repetitions must be >= 1 and warmup >= 0")
    if infer is None:
        from edgessd.model import detect

        def infer(img):
            return detect(model, img)

    for _ in range(warmup):
        for img in images:
            infer(img)
    durations = []
    for _ in range(repetitions):
        start = clock()
        for img in images:
            infer(img)
        durations.append(clock() - start)
    durations = np.array(durations)
    if np.any(durations <= 0):
        raise ValueError("clock did not advance during a timed pass")
    n = len(images)
    per_rep = n / durations
    total = float(durations.sum())
    return FpsMeasurement(n * repetitions / total, float(per_rep.min()), float(per_rep.max()), n * repetitions, total,
                          repetitions, warmup)
