"""Synthetic datasets from a bird's-eye map and a camera-parameter grid.

A :class:`GridSpec` describes a cartesian grid over pan, tilt, focal length
and (optionally) camera position. :func:`sample_grid` draws a seeded pool
from it; :func:`generate_dataset` walks a seeded permutation of that pool,
renders each camera's view of the bird's-eye map and fills the train, test
and dictionary splits in turn. Views whose homography is degenerate, or that
show too little of the scene, are skipped and logged; the next pool sample
takes their place.

Dataset layout::

    out/manifest.json
    out/birdseye.png (+ .json sidecar)
    out/maps/<split>/<id>.png

The manifest stores paths relative to its own directory and no timestamps,
so the same seed yields a byte-identical file wherever it is written.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .errors import DegenerateHomographyError, InvalidParameterError, InvalidSpecError
from .geometry import CameraParams, GroundFrame, Homography, check_invertible, homography_from_params, normalize
from .matching import Dictionary, DictionaryEntry
from .raster import BACKGROUND, SemanticMap, load_map, save_map, warp_labels

log = logging.getLogger(__name__)

SPLITS = ("train", "test", "dictionary")
AXES = ("pan", "tilt", "focal", "x", "y", "z")
MANIFEST_FORMAT = "topocal-dataset/1"


@dataclass(frozen=True)
class AxisRange:
    """Inclusive range ``min, min + step, ...`` up to ``max``."""

    min: float
    max: float
    step: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.min, self.max, self.step)):
            raise InvalidSpecError(f"non-finite axis range {self}")
        if self.step <= 0:
            raise InvalidSpecError(f"step must be positive, got {self.step}")
        if self.min > self.max:
            raise InvalidSpecError(f"empty range: min {self.min} > max {self.max}")

    def __len__(self) -> int:
        # tolerance keeps e.g. (0, 0.3, 0.1) at four values despite float error
        return int(math.floor((self.max - self.min) / self.step + 1e-9)) + 1

    def value(self, i: int) -> float:
        return float(self.min + i * self.step)

    def values(self) -> np.ndarray:
        return self.min + self.step * np.arange(len(self), dtype=float)

    def to_list(self) -> list:
        return [self.min, self.max, self.step]

    @classmethod
    def parse(cls, v) -> "AxisRange":
        if isinstance(v, AxisRange):
            return v
        if isinstance(v, dict):
            return cls(float(v["min"]), float(v["max"]), float(v["step"]))
        try:
            lo, hi, st = v
        except (TypeError, ValueError):
            raise InvalidSpecError(f"axis range must be [min, max, step], got {v!r}") from None
        return cls(float(lo), float(hi), float(st))


@dataclass(frozen=True)
class GridSpec:
    """Camera-parameter grid. Axes ``x``, ``y``, ``z`` may be omitted, in which
    case the camera sits at ``position``.

    ``sample_count`` is the pool size drawn by :func:`sample_grid`
    (``"all"`` for the whole grid).
    """

    pan: AxisRange
    tilt: AxisRange
    focal: AxisRange
    x: AxisRange | None = None
    y: AxisRange | None = None
    z: AxisRange | None = None
    position: tuple = (0.0, 0.0, 1.0)
    sample_count: int | str = "all"
    rng_seed: int = 0

    def __post_init__(self):
        for name in AXES:
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, AxisRange.parse(v))
            elif name in ("pan", "tilt", "focal"):
                raise InvalidSpecError(f"axis {name!r} is required")
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        if len(self.position) != 3:
            raise InvalidSpecError("position must have three coordinates")
        sc = self.sample_count
        if sc != "all":
            if isinstance(sc, bool) or not isinstance(sc, (int, np.integer)) or sc < 1:
                raise InvalidSpecError(f"sample_count must be a positive integer or 'all', got {sc!r}")
            if sc > grid_cardinality(self):
                raise InvalidSpecError(f"sample_count {sc} exceeds grid cardinality {grid_cardinality(self)}")
        # every grid point must be a valid camera
        for name, lo, hi in (("tilt", -90.0, 0.0), ("pan", -180.0, 180.0)):
            r = getattr(self, name)
            if r.min < lo or r.value(len(r) - 1) > hi:
                raise InvalidSpecError(f"{name} range {r.to_list()} leaves [{lo}, {hi}]")
        if self.focal.min <= 0:
            raise InvalidSpecError("focal range must be positive")
        zmin = self.z.min if self.z is not None else self.position[2]
        if zmin <= 0:
            raise InvalidSpecError("camera height must be positive")

    def axes(self):
        """``(name, AxisRange)`` for every varying axis, in enumeration order."""
        return [(n, getattr(self, n)) for n in AXES if getattr(self, n) is not None]

    @property
    def pool_size(self) -> int:
        return grid_cardinality(self) if self.sample_count == "all" else int(self.sample_count)

    def to_dict(self) -> dict:
        d = {n: r.to_list() for n, r in self.axes()}
        d["position"] = list(self.position)
        d["sample_count"] = self.sample_count if self.sample_count == "all" else int(self.sample_count)
        d["rng_seed"] = int(self.rng_seed)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        d = dict(d)
        unknown = set(d) - set(AXES) - {"position", "sample_count", "rng_seed"}
        if unknown:
            raise InvalidSpecError(f"unknown grid keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidSpecError(str(exc)) from None


def grid_cardinality(spec: GridSpec) -> int:
    return math.prod(len(r) for _, r in spec.axes())


# Soccer grid: camera on a long side of the pitch (see scenes.PITCH_CAMERA)
TABLE_I = GridSpec(pan=(-25, 25, 1), tilt=(-15, 0, 1), focal=(500, 800, 50),
                   position=(60.0, 625.0, 120.0), sample_count=4500)
# Intersection grid
TABLE_II = GridSpec(pan=(-180, 180, 15), tilt=(-20, 0, 5), focal=(50, 500, 50),
                    x=(600, 700, 10), y=(900, 1000, 10), z=(50, 100, 10), sample_count=200_000)


class GridEnumeration(Sequence):
    """Lazy cartesian product; index 0 varies the last axis fastest."""

    def __init__(self, spec: GridSpec):
        self.spec = spec
        self._axes = spec.axes()
        self._sizes = [len(r) for _, r in self._axes]
        self._len = math.prod(self._sizes)

    def __len__(self):
        return self._len

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(self._len))]
        i = int(i)
        if i < 0:
            i += self._len
        if not 0 <= i < self._len:
            raise IndexError(i)
        vals = dict(zip("xyz", self.spec.position))
        for (name, r), n in zip(reversed(self._axes), reversed(self._sizes)):
            i, k = divmod(i, n)
            vals[name] = r.value(k)
        return CameraParams(**{n: vals[n] for n in AXES})


class GridSample(Sequence):
    """Subset of a grid enumeration, in enumeration order."""

    def __init__(self, grid: GridEnumeration, indices: np.ndarray):
        self.grid = grid
        self.indices = indices

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self.grid[int(j)] for j in self.indices[i]]
        return self.grid[int(self.indices[i])]


def enumerate_grid(spec: GridSpec) -> GridEnumeration:
    return GridEnumeration(spec)


def sample_grid(spec: GridSpec) -> GridSample:
    """Seeded uniform sample of ``spec.sample_count`` grid points without replacement."""
    grid = GridEnumeration(spec)
    n = spec.pool_size
    if n > len(grid):
        raise InvalidSpecError(f"cannot draw {n} samples from {len(grid)} grid points")
    if n == len(grid):
        idx = np.arange(n, dtype=np.int64)
    else:
        rng = np.random.default_rng(spec.rng_seed)
        idx = np.sort(rng.choice(len(grid), size=n, replace=False)).astype(np.int64)
    return GridSample(grid, idx)


# -- rendering ------------------------------------------------------------------


@dataclass(frozen=True)
class CameraModel:
    """Sensor geometry shared by every view of a dataset.

    Homographies are built for a ``sensor_size`` image with the principal
    point at its center, then scaled to ``out_size``. Equal sizes mean no
    scaling.
    """

    out_size: tuple = (64, 64)
    sensor_size: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "out_size", tuple(int(v) for v in self.out_size))
        sensor = self.out_size if self.sensor_size is None else self.sensor_size
        object.__setattr__(self, "sensor_size", tuple(int(v) for v in sensor))
        if min(self.out_size) < 1 or min(self.sensor_size) < 1:
            raise InvalidParameterError("image sizes must be positive")

    @property
    def principal_point(self):
        return self.sensor_size[0] / 2.0, self.sensor_size[1] / 2.0

    def homography(self, p: CameraParams, frame: GroundFrame) -> Homography:
        h = homography_from_params(p, frame, self.principal_point)
        sx = self.out_size[0] / self.sensor_size[0]
        sy = self.out_size[1] / self.sensor_size[1]
        if sx == 1.0 and sy == 1.0:
            return h
        return normalize(np.diag([sx, sy, 1.0]) @ h.matrix)

    def to_dict(self) -> dict:
        return {"out_size": list(self.out_size), "sensor_size": list(self.sensor_size)}


@dataclass(frozen=True)
class ViewFilter:
    """Minimum content for a rendered view to be kept.

    ``min_foreground``: fraction of non-background pixels.
    ``min_classes``: number of distinct non-background classes.
    """

    min_foreground: float = 0.3
    min_classes: int = 2

    def reason(self, m: SemanticMap) -> str | None:
        if m.foreground_fraction() < self.min_foreground:
            return "foreground"
        present = np.unique(m.labels)
        if np.count_nonzero(present != BACKGROUND) < self.min_classes:
            return "classes"
        return None

    def to_dict(self) -> dict:
        return {"min_foreground": self.min_foreground, "min_classes": self.min_classes}


ACCEPT_ALL = ViewFilter(0.0, 0)


def render_view(birdseye: SemanticMap, frame: GroundFrame, p: CameraParams, camera: CameraModel):
    """``(homography, view)`` for one camera; raises on a degenerate homography."""
    h = camera.homography(p, frame)
    return h, warp_labels(birdseye, h, camera.out_size)


# -- manifests --------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    id: int
    split: str
    homography: Homography
    map_path: Path  # absolute
    params: CameraParams | None = None
    source: str = ""

    def load(self) -> SemanticMap:
        return load_map(self.map_path)


@dataclass
class DatasetManifest:
    source: str
    birdseye_path: Path  # absolute
    frame: GroundFrame
    camera: CameraModel
    entries: list
    seed: int = 0
    grid: dict | None = None
    split_counts: dict = field(default_factory=dict)
    view_filter: dict | None = None
    skipped: list = field(default_factory=list)
    donors: list | None = None  # set for mixed dictionaries
    generator_version: str = __version__

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise InvalidSpecError("manifest entry ids must be unique")
        for e in self.entries:
            if e.split not in SPLITS:
                raise InvalidSpecError(f"unknown split {e.split!r} for entry {e.id}")
            try:
                check_invertible(e.homography.matrix)
            except DegenerateHomographyError:
                raise InvalidSpecError(f"entry {e.id} has a degenerate homography") from None
        if self.split_counts:
            got = {s: len(self.split(s)) for s in SPLITS}
            want = {s: int(self.split_counts.get(s, 0)) for s in SPLITS}
            if got != want:
                raise InvalidSpecError(f"split sizes {got} differ from the recorded counts {want}")

    @property
    def mixed(self) -> bool:
        return self.donors is not None

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def birdseye(self) -> SemanticMap:
        return load_map(self.birdseye_path)

    def dictionary(self) -> Dictionary:
        return Dictionary([DictionaryEntry(e.id, e.load(), e.homography, e.source)
                           for e in self.split("dictionary")])

    def to_dict(self, root) -> dict:
        root = Path(root)

        def rel(p):
            return Path(os.path.relpath(Path(p).resolve(), root.resolve())).as_posix()

        entries = []
        for e in self.entries:
            d = {"id": e.id, "split": e.split, "homography": e.homography.to_dict(), "map": rel(e.map_path)}
            if e.params is not None:
                d["params"] = e.params.to_dict()
            if e.source:
                d["source"] = e.source
            entries.append(d)
        out = {
            "format": MANIFEST_FORMAT,
            "generator_version": self.generator_version,
            "source": self.source,
            "birdseye": rel(self.birdseye_path),
            "frame": {"units_per_pixel": self.frame.scale, "height": self.frame.height},
            "camera": self.camera.to_dict(),
            "seed": self.seed,
            "grid": self.grid,
            "split_counts": {s: int(self.split_counts.get(s, 0)) for s in SPLITS},
            "view_filter": self.view_filter,
            "skipped": self.skipped,
            "entries": entries,
        }
        if self.donors is not None:
            out["donors"] = list(self.donors)
        return out

    def dumps(self, root) -> str:
        return json.dumps(self.to_dict(root), indent=1, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps(path.parent))
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InvalidSpecError(f"{path}: not valid JSON ({exc})") from None
        if d.get("format") != MANIFEST_FORMAT:
            raise InvalidSpecError(f"{path}: not a dataset manifest (format {d.get('format')!r})")
        root = path.parent
        try:
            entries = [
                ManifestEntry(
                    id=int(e["id"]),
                    split=e["split"],
                    homography=Homography.from_dict(e["homography"]),
                    map_path=(root / e["map"]).resolve(),
                    params=CameraParams.from_dict(e["params"]) if "params" in e else None,
                    source=e.get("source", ""),
                )
                for e in d["entries"]
            ]
            fr = d["frame"]
            return cls(
                source=d["source"],
                birdseye_path=(root / d["birdseye"]).resolve(),
                frame=GroundFrame(scale=float(fr["units_per_pixel"]), height=int(fr["height"])),
                camera=CameraModel(**d["camera"]),
                entries=entries,
                seed=int(d["seed"]),
                grid=d.get("grid"),
                split_counts=d["split_counts"],
                view_filter=d.get("view_filter"),
                skipped=d.get("skipped", []),
                donors=d.get("donors"),
                generator_version=d.get("generator_version", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidSpecError):
                raise
            raise InvalidSpecError(f"{path}: malformed manifest ({exc})") from None


def _parse_splits(splits) -> dict:
    if isinstance(splits, dict):
        counts = {s: int(splits.get(s, 0)) for s in SPLITS}
        unknown = set(splits) - set(SPLITS)
        if unknown:
            raise InvalidSpecError(f"unknown splits {sorted(unknown)}")
    else:
        counts = dict(zip(SPLITS, (int(v) for v in splits)))
    if any(v < 0 for v in counts.values()):
        raise InvalidSpecError("split counts must be non-negative")
    return counts


def generate_dataset(
    birdseye: SemanticMap,
    spec: GridSpec,
    splits,
    out_dir,
    *,
    frame: GroundFrame | None = None,
    camera: CameraModel = CameraModel(),
    seed: int = 0,
    view_filter: ViewFilter = ViewFilter(),
    source: str = "birdseye",
    workers: int = 1,
) -> DatasetManifest:
    """Render the train/test/dictionary splits and write the dataset to ``out_dir``.

    ``splits`` is a ``{"train", "test", "dictionary"}`` mapping or a
    ``(train, test, dictionary)`` triple. ``frame`` places the map on the
    ground (default: one world unit per pixel).
    """
    counts = _parse_splits(splits)
    need = sum(counts.values())
    pool = sample_grid(spec)
    if need > len(pool):
        raise InvalidSpecError(f"splits need {need} samples but the pool holds {len(pool)}")
    frame = frame or GroundFrame(scale=1.0, height=birdseye.height)
    out_dir = Path(out_dir)
    try:
        (out_dir / "maps").mkdir(parents=True, exist_ok=True)
        for s in SPLITS:
            (out_dir / "maps" / s).mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc

    order = np.random.default_rng(seed).permutation(len(pool))
    plan = [s for s in SPLITS for _ in range(counts[s])]
    accepted, skipped = [], []

    def work(pos):
        p = pool[int(order[pos])]
        try:
            h, view = render_view(birdseye, frame, p, camera)
        except DegenerateHomographyError:
            return p, None, None, "degenerate"
        return p, h, view, view_filter.reason(view)

    pos = 0
    with ThreadPoolExecutor(max_workers=max(1, int(workers))) as ex:
        while len(accepted) < need and pos < len(pool):
            chunk = range(pos, min(len(pool), pos + max(2 * (need - len(accepted)), 8)))
            for k, (p, h, view, why) in zip(chunk, ex.map(work, chunk)):
                if len(accepted) == need:
                    break
                if why is not None:
                    idx = int(pool.indices[int(order[k])])
                    log.info("skipping grid sample %d (%s): %s", idx, why, p)
                    skipped.append({"grid_index": idx, "reason": why})
                    continue
                accepted.append((p, h, view))
            pos = chunk.stop
    if len(accepted) < need:
        raise InvalidSpecError(f"only {len(accepted)} usable views in a pool of {len(pool)}; {need} requested")

    bpath = save_map(birdseye, out_dir / "birdseye.png", scale=frame.scale, name=source)
    entries = []
    for i, (split, (p, h, view)) in enumerate(zip(plan, accepted)):
        mpath = out_dir / "maps" / split / f"{i:06d}.png"
        save_map(view, mpath, sidecar=False)
        entries.append(ManifestEntry(i, split, h, mpath.resolve(), p, source))
    manifest = DatasetManifest(
        source=source,
        birdseye_path=bpath.resolve(),
        frame=frame,
        camera=camera,
        entries=entries,
        seed=int(seed),
        grid=spec.to_dict(),
        split_counts=counts,
        view_filter=view_filter.to_dict(),
        skipped=skipped,
    )
    manifest.save(out_dir / "manifest.json")
    return manifest


def mix_dictionaries(base: DatasetManifest, donors: Sequence[DatasetManifest], count: int, seed: int = 0) -> DatasetManifest:
    """Keep ``base``'s train/test splits; draw a new dictionary from the donors' dictionaries."""
    donors = list(donors)
    if not donors:
        raise InvalidSpecError("at least one donor manifest is required")
    pool = []
    for d in donors:
        if tuple(d.camera.out_size) != tuple(base.camera.out_size):
            raise InvalidSpecError(f"donor {d.source!r} renders {d.camera.out_size}, base renders {base.camera.out_size}")
        pool.extend((d.source, e) for e in d.split("dictionary"))
    if count < 1 or count > len(pool):
        raise InvalidSpecError(f"cannot draw {count} templates from {len(pool)} donor dictionary entries")
    picks = np.sort(np.random.default_rng(seed).choice(len(pool), size=count, replace=False))
    kept = [e for e in base.entries if e.split != "dictionary"]
    next_id = max((e.id for e in kept), default=-1) + 1
    new = [
        replace(e, id=next_id + k, source=f"{src}:{e.id}")
        for k, (src, e) in enumerate(pool[int(i)] for i in picks)
    ]
    counts = dict(base.split_counts)
    counts["dictionary"] = count
    return replace(
        base,
        entries=kept + new,
        split_counts=counts,
        donors=[d.source for d in donors],
        skipped=list(base.skipped),
    )
