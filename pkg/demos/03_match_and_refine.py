"""End to end on one scene: dataset, matching, refinement, overlay.

Generates a small dictionary of rendered views with known homographies,
picks a held-out query, finds the closest template, then refines the
template's homography by descending the patch loss through a bilinear
warp. Prints IoU before and after and writes an overlay PNG.

    python3 demos/03_match_and_refine.py
"""

import tempfile
from dataclasses import replace
from pathlib import Path

from topocal.datagen import TABLE_II, CameraModel, generate_dataset
from topocal.harness import render_overlay
from topocal.matching import match_topk
from topocal.refine import RefineConfig, evaluate_estimate, refine_multistart
from topocal.scenes import load_scene

OUT = Path(__file__).parent / "out"


def main():
    OUT.mkdir(exist_ok=True)
    birdseye, frame = load_scene("intersection2")
    grid = replace(TABLE_II, sample_count=20_000, rng_seed=1)
    with tempfile.TemporaryDirectory() as tmp:
        man = generate_dataset(birdseye, grid, (0, 5, 100), tmp, frame=frame,
                               camera=CameraModel((64, 64), (128, 128)), seed=3, source="intersection2")
        dictionary = man.dictionary()
        for entry in man.split("test"):
            query = entry.load()
            top = match_topk(query, dictionary, "topmse", 3)
            starts = [(dictionary.get(t.entry_id).template, dictionary.get(t.entry_id).homography) for t in top]
            _, res = refine_multistart(query, birdseye, starts, RefineConfig(max_iters=60))
            pre = evaluate_estimate(starts[0][1], birdseye, query).mean
            post = evaluate_estimate(res, birdseye, query).mean
            print(f"query {entry.id:4d}: template {top[0].entry_id:4d}  IoU {pre:.3f} -> {post:.3f}")
        path = render_overlay(birdseye, res.h, query, OUT / "overlay.png")
        print("overlay of the last query:", path)


if __name__ == "__main__":
    main()
