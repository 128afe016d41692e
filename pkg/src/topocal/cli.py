"""Command-line entry point: ``topocal <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .datagen import CameraModel, DatasetManifest, GridSpec, ViewFilter, generate_dataset
from .errors import TopocalError
from .geometry import GroundFrame, Homography
from .harness import ExperimentConfig, render_overlay, run_experiment, run_mixed
from .loss import LOSS_NAMES
from .matching import METRICS, match_topk
from .raster import load_map, load_sidecar
from .refine import RefineConfig, refine_multistart

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3


class ConfigError(Exception):
    pass


def _read_json(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _write(path, text):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _load_map(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"map not found: {path}")
    return load_map(path)


def _manifest(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    return DatasetManifest.load(path)


def _size(text):
    try:
        parts = [int(v) for v in text.lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}")
    return tuple(parts)


def cmd_generate(args):
    birdseye = _load_map(args.map)
    grid = GridSpec.from_dict(_read_json(args.grid))
    scale = args.scale if args.scale is not None else float(load_sidecar(args.map).get("units_per_pixel", 1.0))
    man = generate_dataset(
        birdseye,
        grid,
        {"train": args.train, "test": args.test, "dictionary": args.dict},
        args.out,
        frame=GroundFrame(scale=scale, height=birdseye.height),
        camera=CameraModel(args.size, args.sensor),
        seed=args.seed,
        view_filter=ViewFilter(args.min_foreground, args.min_classes),
        source=args.name or Path(args.map).stem,
        workers=args.workers,
    )
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.json"), "entries": len(man.entries),
                      "skipped": len(man.skipped)}))


def cmd_match(args):
    query = _load_map(args.query)
    dictionary = _manifest(args.dict).dictionary()
    results = match_topk(query, dictionary, args.metric, args.topk)
    out = [r.to_dict() for r in results]
    print(json.dumps(out[0] if args.topk == 1 else out, indent=1))


def _refine_config(args):
    d = _read_json(args.refine_config) if args.refine_config else {}
    d["loss"] = args.loss
    if args.max_iters is not None:
        d["max_iters"] = args.max_iters
    return RefineConfig.from_dict(d)


def cmd_refine(args):
    query = _load_map(args.query)
    birdseye = _load_map(args.birdseye)
    dictionary = _manifest(args.dict).dictionary()
    cfg = _refine_config(args)
    top = match_topk(query, dictionary, args.metric, args.topk)
    cands = [(dictionary.get(t.entry_id).template, dictionary.get(t.entry_id).homography) for t in top]
    i, res = refine_multistart(query, birdseye, cands, cfg)
    payload = {"match": top[0].to_dict(), "start": top[i].to_dict(), "result": res.to_dict(), "config": cfg.to_dict()}
    text = json.dumps(payload, indent=1, sort_keys=True) + "\n"
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)


def _experiment_config(args):
    raw = _read_json(args.config)
    if not isinstance(raw, dict):
        raise ConfigError(f"{args.config}: expected a JSON object")
    raw = dict(raw)
    out_dir = raw.pop("out_dir", None)
    if args.workers is not None:
        raw["workers"] = args.workers
    cfg = ExperimentConfig.from_dict(raw, base_dir=Path(args.config).parent)
    out = args.out or (Path(args.config).parent / out_dir if out_dir else None)
    if out is None:
        raise ConfigError("no output directory: pass --out or set out_dir in the config")
    return cfg, Path(out)


def _report(report, out, name):
    jp, cp = report.save(out, name)
    agg = dict(report.aggregates)
    agg.update(json=str(jp), csv=str(cp))
    print(json.dumps(agg, indent=1))


def cmd_evaluate(args):
    cfg, out = _experiment_config(args)
    for p in cfg.manifests:
        _manifest(p)  # fail early on missing or malformed manifests
    _report(run_experiment(cfg), out, args.name)


def cmd_evaluate_mixed(args):
    cfg, out = _experiment_config(args)
    donors = [_manifest(p) for p in args.donors]
    _report(run_mixed(cfg, donors), out, args.name)


def cmd_render(args):
    birdseye = _load_map(args.birdseye)
    query = _load_map(args.query)
    raw = _read_json(args.h)
    try:
        if "h" in raw and isinstance(raw["h"], dict):
            raw = raw["h"]  # a refine output's result block
        elif "result" in raw:
            raw = raw["result"]["h"]
        h = Homography.from_dict(raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{args.h}: not a homography ({exc})") from None
    render_overlay(birdseye, h, query, args.out)
    print(json.dumps({"overlay": str(args.out)}))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="topocal", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a dataset from a bird's-eye map")
    g.add_argument("--map", required=True, help="bird's-eye indexed PNG")
    g.add_argument("--grid", required=True, help="grid spec JSON")
    g.add_argument("--train", type=int, default=3000)
    g.add_argument("--test", type=int, default=500)
    g.add_argument("--dict", type=int, default=1000)
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=_size, default=(64, 64), help="rendered view size WxH")
    g.add_argument("--sensor", type=_size, default=None, help="sensor size WxH the focal lengths refer to")
    g.add_argument("--scale", type=float, default=None, help="world units per map pixel (default: sidecar)")
    g.add_argument("--min-foreground", type=float, default=0.3)
    g.add_argument("--min-classes", type=int, default=2)
    g.add_argument("--name", default=None, help="source name recorded in the manifest")
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_generate)

    m = sub.add_parser("match", help="nearest dictionary templates for a query map")
    m.add_argument("--query", required=True)
    m.add_argument("--dict", required=True, help="dataset manifest")
    m.add_argument("--metric", choices=METRICS, default="topmse")
    m.add_argument("--topk", type=int, default=1)
    m.set_defaults(func=cmd_match)

    r = sub.add_parser("refine", help="match then refine a query homography")
    r.add_argument("--query", required=True)
    r.add_argument("--birdseye", required=True)
    r.add_argument("--dict", required=True, help="dataset manifest")
    r.add_argument("--metric", choices=METRICS, default="topmse")
    r.add_argument("--loss", choices=LOSS_NAMES, default="topmse")
    r.add_argument("--topk", type=int, default=1, help="refine from the k best matches")
    r.add_argument("--max-iters", type=int, default=None)
    r.add_argument("--refine-config", default=None, help="RefineConfig JSON")
    r.add_argument("--out", default=None, help="output JSON (default: stdout)")
    r.set_defaults(func=cmd_refine)

    for name, func, helptext in (("evaluate", cmd_evaluate, "run an experiment"),
                                 ("evaluate-mixed", cmd_evaluate_mixed, "run with donor dictionaries")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--config", required=True, help="experiment config JSON")
        if name == "evaluate-mixed":
            e.add_argument("--donors", nargs="+", required=True, help="donor dataset manifests")
        e.add_argument("--out", default=None, help="report directory")
        e.add_argument("--name", default="report", help="report file stem")
        e.add_argument("--workers", type=int, default=None)
        e.set_defaults(func=func)

    o = sub.add_parser("render", help="overlay a warped bird's-eye map on a query")
    o.add_argument("--birdseye", required=True)
    o.add_argument("--h", required=True, help="homography JSON (or a refine output)")
    o.add_argument("--query", required=True)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, TopocalError, KeyError) as exc:
        print(f"topocal: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"topocal: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
