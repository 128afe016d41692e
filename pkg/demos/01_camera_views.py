"""Render a few PTZ views of a toy intersection and save them as PNGs.

A bird's-eye semantic map is the ground plane. Each camera (pan, tilt,
focal length, position) gives a ground-to-image homography; warping the
map through it yields what that camera sees.

    python3 demos/01_camera_views.py
"""

from pathlib import Path

from topocal.datagen import CameraModel, render_view
from topocal.geometry import CameraParams
from topocal.raster import save_map
from topocal.scenes import load_scene

OUT = Path(__file__).parent / "out"


def main():
    OUT.mkdir(exist_ok=True)
    birdseye, frame = load_scene("intersection1")
    camera = CameraModel((128, 128))
    for pan in (-30, 0, 30):
        p = CameraParams(pan=pan, tilt=-15, focal=200, x=650, y=950, z=70)
        h, view = render_view(birdseye, frame, p, camera)
        path = save_map(view, OUT / f"view_pan{pan:+d}.png")
        print(f"pan {pan:+3d}: foreground {view.foreground_fraction():.0%}, saved {path.name}")
        print("  H =", h.matrix.round(4).tolist())


if __name__ == "__main__":
    main()
