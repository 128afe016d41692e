"""Experiment protocol: match, refine and score query views.

Randomness
----------
Everything derives from one root seed:

* run_experiment picks the query subset of manifest ``i`` with
  ``default_rng([seed, i])``;
* run_mixed draws the mixed dictionary for manifest ``i`` with
  ``default_rng([seed, i, 1])``;
* run_protocol spawns one child seed per cycle
  (``SeedSequence(seed).spawn(cycles)``), and each child yields the grid
  seed, the split seed and the experiment seed of that cycle, in that order.

Queries run concurrently on a thread pool; records come back in query order,
so results do not depend on the worker count.

Report files
------------
``<name>.json`` holds the full report (see ``data/report.schema.json``).
``<name>.csv`` holds one row per query with columns ``CSV_COLUMNS``
(schema version ``CSV_SCHEMA_VERSION``). Floats use Python's shortest
round-trip repr, booleans ``true``/``false``, missing values are empty.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from . import __version__
from .datagen import CameraModel, DatasetManifest, GridSpec, ViewFilter, generate_dataset, mix_dictionaries
from .errors import InvalidSpecError
from .loss import LOSS_NAMES, loss_config
from .matching import METRICS, match_topk
from .raster import CLASS_NAMES, PALETTE, SemanticMap, colorize, warp_labels
from .refine import RefineConfig, evaluate_estimate, refine_multistart

log = logging.getLogger(__name__)

CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = (
    "dataset",
    "query_id",
    "match_id",
    "match_score",
    "start_id",
    "pre_iou",
    "post_iou",
    "pre_iou_all",
    "post_iou_all",
    "initial_loss",
    "final_loss",
    "iterations",
    "converged",
    "error",
)
OVERLAY_ALPHA = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    manifests: tuple
    metric: str = "topmse"
    loss: str = "topmse"
    refine: RefineConfig = RefineConfig()
    query_count: int = 100
    seed: int = 0
    multistart: int = 1  # refine from the top-k matches
    multistart_keep: int | None = None  # screen the k starts down to this many
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "manifests", tuple(str(m) for m in self.manifests))
        if isinstance(self.refine, dict):
            object.__setattr__(self, "refine", RefineConfig.from_dict(self.refine))
        if not self.manifests:
            raise InvalidSpecError("at least one dataset manifest is required")
        if self.metric not in METRICS:
            raise InvalidSpecError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.loss not in LOSS_NAMES:
            raise InvalidSpecError(f"loss must be one of {LOSS_NAMES}, got {self.loss!r}")
        if self.query_count < 1 or self.multistart < 1 or self.workers < 1:
            raise InvalidSpecError("query_count, multistart and workers must be >= 1")
        if self.multistart_keep is not None and self.multistart_keep < 1:
            raise InvalidSpecError("multistart_keep must be >= 1")

    @property
    def refine_config(self) -> RefineConfig:
        return replace(self.refine, loss=loss_config(self.loss))

    def to_dict(self) -> dict:
        return {
            "manifests": list(self.manifests),
            "metric": self.metric,
            "loss": self.loss,
            "refine": self.refine_config.to_dict(),
            "query_count": self.query_count,
            "seed": self.seed,
            "multistart": self.multistart,
            "multistart_keep": self.multistart_keep,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise InvalidSpecError(f"unknown config keys: {sorted(unknown)}")
        if "manifests" not in d:
            raise InvalidSpecError("config needs 'manifests'")
        if isinstance(d["manifests"], str):
            d["manifests"] = [d["manifests"]]
        if base_dir is not None:
            d["manifests"] = [str(Path(base_dir) / m) for m in d["manifests"]]
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, InvalidSpecError):
                raise
            raise InvalidSpecError(f"invalid experiment config: {exc}") from None


@dataclass(frozen=True)
class QueryRecord:
    dataset: str
    query_id: int
    match_id: int | None = None
    match_score: float | None = None
    start_id: int | None = None  # dictionary entry the kept refinement started from
    pre_iou: float | None = None
    post_iou: float | None = None
    pre_iou_all: float | None = None
    post_iou_all: float | None = None
    initial_loss: float | None = None
    final_loss: float | None = None
    iterations: int | None = None
    converged: bool | None = None
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


def _scored(records):
    return [r for r in records if r.ok and math.isfinite(r.pre_iou) and math.isfinite(r.post_iou)]


def compute_aggregates(records: Sequence[QueryRecord]) -> dict:
    """Summary statistics over error-free records with finite IoUs."""
    good = _scored(records)
    pre = [r.pre_iou for r in good]
    post = [r.post_iou for r in good]
    n = len(good)
    return {
        "queries": len(records),
        "scored": n,
        "errors": sum(1 for r in records if not r.ok),
        "mean_pre_iou": statistics.fmean(pre) if n else None,
        "mean_post_iou": statistics.fmean(post) if n else None,
        "median_pre_iou": statistics.median(pre) if n else None,
        "median_post_iou": statistics.median(post) if n else None,
        "improvement_rate": sum(1 for a, b in zip(pre, post) if b > a) / n if n else None,
    }


@dataclass
class ExperimentReport:
    records: list
    aggregates: dict
    config: dict
    wall_clock_s: float = 0.0
    mixed: bool = False
    donors: list | None = None
    generator_version: str = __version__

    def to_dict(self) -> dict:
        return {
            "generator_version": self.generator_version,
            "csv_schema_version": CSV_SCHEMA_VERSION,
            "config": self.config,
            "mixed": self.mixed,
            "donors": self.donors,
            "wall_clock_s": self.wall_clock_s,
            "aggregates": self.aggregates,
            "records": [_json_record(r) for r in self.records],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records:
            w.writerow([_csv_value(getattr(r, c)) for c in CSV_COLUMNS])
        return buf.getvalue()

    def save(self, out_dir, name: str = "report"):
        """Write ``<name>.json`` and ``<name>.csv``; returns both paths."""
        out_dir = Path(out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            jp, cp = out_dir / f"{name}.json", out_dir / f"{name}.csv"
            jp.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
            cp.write_text(self.to_csv())
        except OSError as exc:
            raise OSError(f"cannot write report to {out_dir}: {exc}") from exc
        return jp, cp


def _json_record(r: QueryRecord) -> dict:
    d = asdict(r)
    # NaN is not valid JSON
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


def _csv_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_schema() -> dict:
    return json.loads((resources.files("topocal") / "data" / "report.schema.json").read_text())


# -- running --------------------------------------------------------------------


def _load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    return DatasetManifest.load(path)


def select_queries(manifest: DatasetManifest, count: int, seed: int, index: int = 0) -> list:
    tests = manifest.split("test")
    if count > len(tests):
        raise InvalidSpecError(f"{manifest.source}: {count} queries requested, test split holds {len(tests)}")
    picks = np.sort(np.random.default_rng([seed, index]).choice(len(tests), size=count, replace=False))
    return [tests[int(i)] for i in picks]


def _run_query(entry, dictionary, birdseye: SemanticMap, cfg: ExperimentConfig, dataset: str) -> QueryRecord:
    rec = QueryRecord(dataset=dataset, query_id=entry.id)
    try:
        query = entry.load()
        top = match_topk(query, dictionary, cfg.metric, cfg.multistart)
        best = dictionary.get(top[0].entry_id)
        rec = replace(rec, match_id=best.id, match_score=float(top[0].score))
        pre = evaluate_estimate(best.homography, birdseye, query)
        cands = [(dictionary.get(t.entry_id).template, dictionary.get(t.entry_id).homography) for t in top]
        i, res = refine_multistart(query, birdseye, cands, cfg.refine_config, keep=cfg.multistart_keep)
        post = evaluate_estimate(res, birdseye, query)
        return replace(
            rec,
            start_id=top[i].entry_id,
            pre_iou=pre.mean,
            post_iou=post.mean,
            pre_iou_all=pre.mean_all,
            post_iou_all=post.mean_all,
            initial_loss=float(res.initial_loss),
            final_loss=float(res.final_loss),
            iterations=int(res.iterations),
            converged=bool(res.converged),
        )
    except Exception as exc:  # a failing query is recorded, never fatal
        log.warning("query %s/%s failed: %s", dataset, entry.id, exc)
        return replace(rec, error=f"{type(exc).__name__}: {exc}")


def _run(manifests: Sequence[DatasetManifest], cfg: ExperimentConfig, mixed=False, donors=None) -> ExperimentReport:
    t0 = time.perf_counter()
    records = []
    with ThreadPoolExecutor(max_workers=cfg.workers) as ex:
        for i, man in enumerate(manifests):
            queries = select_queries(man, cfg.query_count, cfg.seed, i)
            dictionary = man.dictionary()
            birdseye = man.birdseye()
            records.extend(ex.map(lambda e: _run_query(e, dictionary, birdseye, cfg, man.source), queries))
    return ExperimentReport(
        records=records,
        aggregates=compute_aggregates(records),
        config=cfg.to_dict(),
        wall_clock_s=time.perf_counter() - t0,
        mixed=mixed,
        donors=donors,
    )


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Match, refine and score ``cfg.query_count`` test queries of every manifest."""
    return _run([_load_manifest(p) for p in cfg.manifests], cfg)


def run_mixed(cfg: ExperimentConfig, donors: Sequence) -> ExperimentReport:
    """As :func:`run_experiment`, with every dictionary replaced by a draw from ``donors``.

    ``donors`` are manifest paths or loaded manifests. The mixed dictionary
    has as many entries as the one it replaces.
    """
    donors = [d if isinstance(d, DatasetManifest) else _load_manifest(d) for d in donors]
    if not donors:
        raise InvalidSpecError("run_mixed needs at least one donor manifest")
    mixed = []
    for i, p in enumerate(cfg.manifests):
        base = _load_manifest(p)
        count = len(base.split("dictionary"))
        seed = int(np.random.default_rng([cfg.seed, i, 1]).integers(2**63))
        mixed.append(mix_dictionaries(base, donors, count, seed))
    return _run(mixed, cfg, mixed=True, donors=[d.source for d in donors])


def sweep_losses(cfg: ExperimentConfig, losses: Sequence[str] = LOSS_NAMES) -> dict:
    """One report per loss; queries and matches are identical across runs."""
    return {name: run_experiment(replace(cfg, loss=name)) for name in losses}


# -- multi-cycle protocol -----------------------------------------------------------


@dataclass(frozen=True)
class ProtocolConfig:
    """Generate datasets and evaluate them, ``cycles`` times from one root seed."""

    scenes: tuple  # (name, SemanticMap, GroundFrame) triples
    grid: GridSpec
    splits: dict
    camera: CameraModel = CameraModel()
    view_filter: ViewFilter = ViewFilter()
    experiment: dict = field(default_factory=dict)  # ExperimentConfig fields except manifests/seed
    cycles: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.cycles < 1:
            raise InvalidSpecError("cycles must be >= 1")


@dataclass
class ProtocolReport:
    cycles: list  # ExperimentReport per cycle
    mean_aggregates: dict


def cycle_seeds(seed: int, cycles: int) -> list:
    """``(grid_seed, split_seed, experiment_seed)`` for every cycle."""
    return [tuple(int(v) for v in ss.generate_state(3)) for ss in np.random.SeedSequence(seed).spawn(cycles)]


def run_protocol(pc: ProtocolConfig, work_dir) -> ProtocolReport:
    work_dir = Path(work_dir)
    reports = []
    for c, (grid_seed, split_seed, exp_seed) in enumerate(cycle_seeds(pc.seed, pc.cycles)):
        grid = replace(pc.grid, rng_seed=grid_seed)
        paths = []
        for name, m, frame in pc.scenes:
            out = work_dir / f"cycle{c}" / name
            generate_dataset(m, grid, pc.splits, out, frame=frame, camera=pc.camera, seed=split_seed,
                             view_filter=pc.view_filter, source=name)
            paths.append(out / "manifest.json")
        cfg = ExperimentConfig(manifests=tuple(paths), seed=exp_seed, **pc.experiment)
        reports.append(run_experiment(cfg))
    keys = ("mean_pre_iou", "mean_post_iou", "median_pre_iou", "median_post_iou", "improvement_rate")
    mean = {}
    for k in keys:
        vals = [r.aggregates[k] for r in reports if r.aggregates[k] is not None]
        mean[k] = statistics.fmean(vals) if vals else None
    return ProtocolReport(cycles=reports, mean_aggregates=mean)


# -- overlays -------------------------------------------------------------------------


def _legend(width: int, class_count: int) -> Image.Image:
    row = 14
    img = Image.new("RGB", (width, row * class_count + 4), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    font = ImageFont.load_default()
    for k in range(class_count):
        y = 2 + k * row
        draw.rectangle([4, y + 1, 14, y + row - 3], fill=PALETTE[k], outline=(0, 0, 0))
        draw.text((20, y), CLASS_NAMES[k], fill=(0, 0, 0), font=font)
    return img


def render_overlay(birdseye: SemanticMap, h, query: SemanticMap, out, scale: int | None = None) -> Path:
    """PNG of the warped bird's-eye classes blended over the query, with a legend strip.

    ``scale`` enlarges pixels by an integer factor (default: enough for a
    width of at least 256 px).
    """
    out = Path(out)
    warped = warp_labels(birdseye, h, query.size)
    a = colorize(query).astype(np.uint16)
    b = colorize(warped).astype(np.uint16)
    wa = int(round(OVERLAY_ALPHA * 256))
    blend = ((a * (256 - wa) + b * wa + 128) >> 8).astype(np.uint8)
    k = scale or max(1, -(-256 // query.width))
    if k > 1:
        blend = np.repeat(np.repeat(blend, k, axis=0), k, axis=1)
    top = Image.fromarray(blend, mode="RGB")
    legend = _legend(top.width, query.class_count)
    img = Image.new("RGB", (top.width, top.height + legend.height), (255, 255, 255))
    img.paste(top, (0, 0))
    img.paste(legend, (0, top.height))
    try:
        img.save(out, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write overlay to {out}: {exc}") from exc
    return out
