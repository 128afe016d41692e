"""Hand-drawn bird's-eye semantic maps shipped with the package.

Five road intersections and one football pitch, drawn from simple shapes in
world units and rasterized at a chosen scale. Intersections span
1300 x 1900 units with the junction near (650, 950), matching the camera
positions of the intersection sampling grid.

Regenerate the shipped PNGs with ``python -m topocal.scenes``.
"""

from __future__ import annotations

import math
from importlib import resources
from pathlib import Path

import numpy as np

from .geometry import GroundFrame
from .raster import SemanticMap, load_map, load_sidecar, save_map

ROAD, TERRAIN, BIKE = 1, 2, 3
INTERSECTION_EXTENT = (1300.0, 1900.0)
DEFAULT_SCALE = 4.0

INTERSECTIONS = ("intersection1", "intersection2", "intersection3", "intersection4", "intersection5")
SCENES = INTERSECTIONS + ("pitch",)


class _Canvas:
    def __init__(self, extent, scale):
        self.scale = scale
        self.width = int(round(extent[0] / scale))
        self.height = int(round(extent[1] / scale))
        cols = (np.arange(self.width) + 0.5) * scale
        rows = (self.height - (np.arange(self.height) + 0.5)) * scale
        self.x, self.y = np.meshgrid(cols, rows)
        self.labels = np.zeros((self.height, self.width), dtype=np.uint8)

    def fill(self, cls):
        self.labels[:] = cls

    def band(self, p0, p1, width, cls):
        """Thick segment from p0 to p1 (world units)."""
        (x0, y0), (x1, y1) = p0, p1
        dx, dy = x1 - x0, y1 - y0
        t = ((self.x - x0) * dx + (self.y - y0) * dy) / (dx * dx + dy * dy)
        t = np.clip(t, 0.0, 1.0)
        d = np.hypot(self.x - (x0 + t * dx), self.y - (y0 + t * dy))
        self.labels[d <= width / 2] = cls

    def ring(self, center, r_in, r_out, cls):
        d = np.hypot(self.x - center[0], self.y - center[1])
        self.labels[(d >= r_in) & (d <= r_out)] = cls

    def disk(self, center, r, cls):
        self.ring(center, 0.0, r, cls)

    def rect(self, x0, y0, x1, y1, cls):
        self.labels[(self.x >= x0) & (self.x <= x1) & (self.y >= y0) & (self.y <= y1)] = cls

    def road_with_paths(self, p0, p1, road_w=100.0, path_w=24.0, gap=18.0, sides=(1, -1)):
        (x0, y0), (x1, y1) = p0, p1
        n = np.array([-(y1 - y0), x1 - x0]) / math.hypot(x1 - x0, y1 - y0)
        off = road_w / 2 + gap + path_w / 2
        for side in sides:
            o = side * off * n
            self.band((x0 + o[0], y0 + o[1]), (x1 + o[0], y1 + o[1]), path_w, BIKE)
        self.band(p0, p1, road_w, ROAD)


def _ray(center, angle_deg, length=3000.0):
    a = math.radians(angle_deg)
    return center, (center[0] + length * math.cos(a), center[1] + length * math.sin(a))


def _intersection1(cv):
    c = (650.0, 950.0)
    cv.fill(TERRAIN)
    for ang in (0, 90, 180, 270):
        cv.road_with_paths(*_ray(c, ang))
    cv.disk(c, 70.0, ROAD)


def _intersection2(cv):
    c = (640.0, 960.0)
    cv.fill(TERRAIN)
    for ang in (8, 98, 188, 278):
        cv.road_with_paths(*_ray(c, ang), road_w=110.0, sides=(1,) if ang in (8, 188) else (1, -1))
    cv.disk(c, 75.0, ROAD)


def _intersection3(cv):
    c = (660.0, 940.0)
    cv.fill(TERRAIN)
    cv.road_with_paths(*_ray(c, 0), road_w=120.0)
    cv.road_with_paths(*_ray(c, 180), road_w=120.0)
    cv.road_with_paths(*_ray(c, 240), road_w=90.0, sides=(-1,))
    cv.band(*_ray((660.0, 1300.0), 35.0), 26.0, BIKE)
    cv.disk(c, 80.0, ROAD)


def _intersection4(cv):
    c = (650.0, 950.0)
    cv.fill(TERRAIN)
    for ang in (45, 135, 225, 315):
        cv.road_with_paths(*_ray(c, ang), road_w=90.0, sides=(1,))
    cv.ring(c, 180.0, 205.0, BIKE)
    cv.ring(c, 80.0, 160.0, ROAD)
    cv.disk(c, 80.0, TERRAIN)


def _intersection5(cv):
    c = (650.0, 950.0)
    cv.fill(TERRAIN)
    for y in (700.0, 1200.0):
        cv.road_with_paths((-100.0, y), (1400.0, y), road_w=80.0)
    cv.road_with_paths((650.0, -100.0), (650.0, 2000.0), road_w=130.0)
    cv.band((650.0, -100.0), (650.0, 2000.0), 16.0, TERRAIN)
    cv.road_with_paths(*_ray(c, 60), road_w=70.0, sides=(-1,))
    cv.road_with_paths(*_ray(c, 210), road_w=70.0, sides=(1,))
    cv.band((200.0, 200.0), (1100.0, 1700.0), 24.0, BIKE)
    cv.ring((300.0, 1550.0), 90.0, 115.0, BIKE)
    cv.disk((1000.0, 400.0), 120.0, ROAD)
    cv.disk(c, 60.0, ROAD)


def _pitch(cv):
    # field along y, stands around it; lines are ROAD, grass TERRAIN, stands BIKE
    cv.fill(BIKE)
    x0, y0, x1, y1 = 160.0, 100.0, 840.0, 1150.0
    cv.rect(x0, y0, x1, y1, TERRAIN)
    lw = 8.0
    for a, b in (((x0, y0), (x1, y0)), ((x1, y0), (x1, y1)), ((x1, y1), (x0, y1)), ((x0, y1), (x0, y0))):
        cv.band(a, b, lw, ROAD)
    cy = (y0 + y1) / 2
    cx = (x0 + x1) / 2
    cv.band((x0, cy), (x1, cy), lw, ROAD)
    cv.ring((cx, cy), 91.5 - lw / 2, 91.5 + lw / 2, ROAD)
    for yy, sgn in ((y0, 1), (y1, -1)):
        bx0, bx1 = cx - 201.5, cx + 201.5
        by = yy + sgn * 165.0
        cv.band((bx0, yy), (bx0, by), lw, ROAD)
        cv.band((bx1, yy), (bx1, by), lw, ROAD)
        cv.band((bx0, by), (bx1, by), lw, ROAD)


_DRAW = {
    "intersection1": (_intersection1, INTERSECTION_EXTENT),
    "intersection2": (_intersection2, INTERSECTION_EXTENT),
    "intersection3": (_intersection3, INTERSECTION_EXTENT),
    "intersection4": (_intersection4, INTERSECTION_EXTENT),
    "intersection5": (_intersection5, INTERSECTION_EXTENT),
    "pitch": (_pitch, (1000.0, 1250.0)),
}

PITCH_CAMERA = (60.0, 625.0, 120.0)  # west touchline side, looks east at pan 0


def draw_scene(name: str, scale: float = DEFAULT_SCALE) -> SemanticMap:
    """Rasterize a named scene at ``scale`` world units per pixel."""
    try:
        draw, extent = _DRAW[name]
    except KeyError:
        raise KeyError(f"unknown scene {name!r}; choose from {SCENES}") from None
    cv = _Canvas(extent, scale)
    draw(cv)
    return SemanticMap(cv.labels)


def ground_frame(m: SemanticMap, scale: float = DEFAULT_SCALE) -> GroundFrame:
    return GroundFrame(scale=scale, height=m.height)


def _data_dir():
    return resources.files("topocal") / "data" / "scenes"


def scene_path(name: str) -> Path:
    return Path(str(_data_dir() / f"{name}.png"))


def load_scene(name: str):
    """Shipped scene map and its ground frame."""
    path = scene_path(name)
    m = load_map(path)
    scale = float(load_sidecar(path).get("units_per_pixel", DEFAULT_SCALE))
    return m, GroundFrame(scale=scale, height=m.height)


def write_scenes(out_dir=None, scale: float = DEFAULT_SCALE):
    out_dir = Path(out_dir) if out_dir else Path(str(_data_dir()))
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in SCENES:
        save_map(draw_scene(name, scale), out_dir / f"{name}.png", scale=scale, name=name)
    return out_dir


if __name__ == "__main__":
    print(write_scenes())
