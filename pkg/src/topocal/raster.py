"""Semantic label maps, homography warps and IoU.

Pixel ``(x, y)`` covers ``[x, x+1) x [y, y+1)``; warps sample the source at
the destination pixel center ``(x + 0.5, y + 0.5)`` mapped through the
inverse homography. Anything that lands outside the source raster, or on
ground behind the camera, is background. "Behind" follows the sign of
``det(H) * w``, so a mirror-image map (negative determinant) reads as a view
of the plane from its back side and warps to pure background.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidInputError
from .geometry import check_invertible
from .loss import TopoLossConfig, topo_loss_grad

BACKGROUND = 0
CLASS_NAMES = ("background", "road", "terrain", "bicycle_path")
PALETTE = ((0, 0, 0), (128, 128, 128), (0, 160, 0), (220, 0, 0))


class SemanticMap:
    """Row-major ``(height, width)`` raster of class ids."""

    __slots__ = ("labels", "class_count")

    def __init__(self, labels, class_count: int = 4):
        arr = np.array(labels)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise InvalidInputError(f"labels must be a non-empty 2-D array, got shape {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() >= class_count):
            raise InvalidInputError(f"labels must lie in [0, {class_count})")
        arr = arr.astype(np.uint8)
        arr.setflags(write=False)
        self.labels = arr
        self.class_count = int(class_count)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def size(self):
        return self.width, self.height

    def __eq__(self, other):
        if not isinstance(other, SemanticMap):
            return NotImplemented
        return self.class_count == other.class_count and np.array_equal(self.labels, other.labels)

    def __repr__(self):
        return f"SemanticMap({self.width}x{self.height}, classes={self.class_count})"

    def foreground_fraction(self) -> float:
        return float(np.mean(self.labels != BACKGROUND))


class OneHotMap:
    """Per-pixel class weights, stored as ``(class_count, height, width)``."""

    __slots__ = ("weights",)

    def __init__(self, weights):
        w = np.asarray(weights, dtype=float)
        if w.ndim != 3:
            raise InvalidInputError(f"weights must be (C, H, W), got shape {w.shape}")
        self.weights = w

    @property
    def class_count(self) -> int:
        return self.weights.shape[0]

    @property
    def height(self) -> int:
        return self.weights.shape[1]

    @property
    def width(self) -> int:
        return self.weights.shape[2]

    @property
    def size(self):
        return self.width, self.height


@dataclass(frozen=True)
class WarpGradient:
    value: float
    grad: np.ndarray  # d loss / d param8 of the homography


@dataclass(frozen=True)
class IoUResult:
    per_class: np.ndarray  # nan where a class is absent from both maps
    mean: float  # mean over the requested class set
    mean_foreground: float
    mean_all: float


def to_onehot(m: SemanticMap) -> OneHotMap:
    eye = np.eye(m.class_count)
    return OneHotMap(np.moveaxis(eye[m.labels], -1, 0))


def from_onehot(o: OneHotMap) -> SemanticMap:
    # argmax returns the first maximum, i.e. the lowest class id on ties
    return SemanticMap(np.argmax(o.weights, axis=0), class_count=o.class_count)


# -- sampling -----------------------------------------------------------------


def _out_size(out_size):
    w, h = int(out_size[0]), int(out_size[1])
    if w <= 0 or h <= 0:
        raise InvalidInputError(f"output size must be positive, got {out_size}")
    return w, h


@functools.lru_cache(maxsize=16)
def _pixel_centers(w, hgt):
    ys, xs = np.mgrid[0:hgt, 0:w]
    q = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5, np.ones(w * hgt)])
    q.flags.writeable = False
    return q


def _pixel_rays(h, out_size):
    """Homogeneous source points for every destination pixel center.

    Returns ``(inv, s, visible)`` with ``s`` of shape (3, P) in row-major
    destination order.
    """
    m = np.asarray(h, dtype=float)
    check_invertible(m)
    w, hgt = out_size
    inv = np.linalg.inv(m)
    sign = np.sign(np.linalg.det(m))
    s = inv @ _pixel_centers(w, hgt)
    visible = sign * s[2] > 0
    return inv, s, visible


def _source_coords(s, visible):
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(visible, s[0] / s[2], -1e9)
        v = np.where(visible, s[1] / s[2], -1e9)
    return u, v


def warp_labels(src: SemanticMap, h, out_size) -> SemanticMap:
    """Nearest-neighbor inverse warp of a label map."""
    w, hgt = _out_size(out_size)
    _, s, visible = _pixel_rays(h, (w, hgt))
    u, v = _source_coords(s, visible)
    with np.errstate(invalid="ignore"):
        iu = np.floor(u)
        iv = np.floor(v)
    inside = visible & (iu >= 0) & (iu < src.width) & (iv >= 0) & (iv < src.height)
    out = np.zeros(w * hgt, dtype=np.uint8)
    out[inside] = src.labels[iv[inside].astype(np.intp), iu[inside].astype(np.intp)]
    return SemanticMap(out.reshape(hgt, w), class_count=src.class_count)


class BilinearSampler:
    """Bilinear sampler over a one-hot source padded with background.

    Built once per source so repeated warps (refinement) skip the padding.
    """

    def __init__(self, src: OneHotMap):
        c, h, w = src.weights.shape
        pad = np.zeros((c, h + 2, w + 2))
        pad[BACKGROUND] = 1.0
        pad[:, 1:-1, 1:-1] = src.weights
        self.pad = pad
        self._flat = pad.reshape(c, -1)
        self.class_count, self.height, self.width = c, h, w

    def sample(self, u, v, visible, with_grad=False):
        c, w, h = self.class_count, self.width, self.height
        x = u - 0.5
        y = v - 0.5
        with np.errstate(invalid="ignore"):
            x0 = np.floor(x)
            y0 = np.floor(y)
        inside = visible & (x0 >= -1) & (x0 <= w - 1) & (y0 >= -1) & (y0 <= h - 1)
        stride = w + 2
        base = np.where(inside, (y0 + 1) * stride + (x0 + 1), 0).astype(np.intp)
        fx = np.where(inside, x - x0, 0.0)
        fy = np.where(inside, y - y0, 0.0)
        p = self._flat
        i00 = p.take(base, axis=1)
        i01 = p.take(base + 1, axis=1)
        i10 = p.take(base + stride, axis=1)
        i11 = p.take(base + stride + 1, axis=1)
        d0 = i01 - i00
        d1 = i11 - i10
        top = i00 + fx * d0
        bot = i10 + fx * d1
        out = top + fy * (bot - top)
        outside = ~inside
        out[:, outside] = 0.0
        out[BACKGROUND, outside] = 1.0
        if not with_grad:
            return out
        du = d0 + fy * (d1 - d0)
        dv = bot - top
        du[:, outside] = 0.0
        dv[:, outside] = 0.0
        return out, du, dv


def warp_onehot(src: OneHotMap, h, out_size, sampler: BilinearSampler | None = None) -> OneHotMap:
    """Bilinear inverse warp of every class channel."""
    w, hgt = _out_size(out_size)
    _, s, visible = _pixel_rays(h, (w, hgt))
    u, v = _source_coords(s, visible)
    sampler = sampler or BilinearSampler(src)
    out = sampler.sample(u, v, visible)
    return OneHotMap(out.reshape(src.class_count, hgt, w))


def loss_and_matrix_grad(src: OneHotMap, target: OneHotMap, h, cfg: TopoLossConfig,
                         sampler: BilinearSampler | None = None, blur=None):
    """Loss of ``warp_onehot(src, h)`` against ``target`` and d loss / d h.

    The gradient is with respect to all nine entries of the matrix exactly as
    passed in (no renormalization).
    """
    if src.class_count != target.class_count:
        raise InvalidInputError("source and target class counts differ")
    m = np.asarray(h, dtype=float)
    w, hgt = target.width, target.height
    inv, s, visible = _pixel_rays(m, (w, hgt))
    u, v = _source_coords(s, visible)
    sampler = sampler or BilinearSampler(src)
    warped, du, dv = sampler.sample(u, v, visible, with_grad=True)
    c = src.class_count
    warped = warped.reshape(c, hgt, w)
    if blur is None:
        value, gpred = topo_loss_grad(warped, target.weights, cfg)
    else:
        # blur must be a self-adjoint linear filter
        value, gpred = topo_loss_grad(blur(warped), target.weights, cfg)
        gpred = blur(gpred)
    gpred = gpred.reshape(c, -1)
    gu = np.sum(gpred * du, axis=0)
    gv = np.sum(gpred * dv, axis=0)
    nz = visible & ((gu != 0) | (gv != 0))
    if not np.any(nz):
        return value, np.zeros((3, 3))
    sz = s[:, nz]
    gu, gv = gu[nz], gv[nz]
    uu, vv = u[nz], v[nz]
    inv_w = 1.0 / sz[2]
    # d loss / d (homogeneous source point)
    a = np.stack([gu * inv_w, gv * inv_w, -(gu * uu + gv * vv) * inv_w])
    # s = inv @ q, d inv = -inv dH inv  =>  dL/dH = -inv^T (a s^T)
    gmat = -inv.T @ (a @ sz.T)
    return value, gmat


def loss_gradient(src: OneHotMap, target: OneHotMap, h, loss: TopoLossConfig) -> WarpGradient:
    """Loss value and its derivative w.r.t. the 8 free entries of normalized ``h``."""
    m = np.asarray(h, dtype=float)
    check_invertible(m)
    hn = m / m[2, 2] if m[2, 2] != 0 else m
    value, gmat = loss_and_matrix_grad(src, target, hn, loss)
    grad = gmat.ravel()[:8].copy()
    return WarpGradient(value=float(value), grad=grad)


# -- evaluation ---------------------------------------------------------------


def iou(pred: SemanticMap, gt: SemanticMap, include_background: bool = False) -> IoUResult:
    if pred.labels.shape != gt.labels.shape or pred.class_count != gt.class_count:
        raise InvalidInputError(
            f"cannot compare {pred.width}x{pred.height} ({pred.class_count} classes) "
            f"with {gt.width}x{gt.height} ({gt.class_count} classes)"
        )
    c = pred.class_count
    per = np.full(c, np.nan)
    for k in range(c):
        p = pred.labels == k
        g = gt.labels == k
        union = np.count_nonzero(p | g)
        if union:
            per[k] = np.count_nonzero(p & g) / union

    def _mean(vals):
        vals = vals[~np.isnan(vals)]
        return float(np.mean(vals)) if vals.size else float("nan")

    fg = _mean(per[1:])
    al = _mean(per)
    return IoUResult(per_class=per, mean=al if include_background else fg, mean_foreground=fg, mean_all=al)


# -- persistence --------------------------------------------------------------


def _palette_bytes():
    flat = [v for rgb in PALETTE for v in rgb]
    return flat + [0] * (768 - len(flat))


def save_map(m: SemanticMap, path, scale: float | None = None, name: str | None = None,
             sidecar: bool = True) -> Path:
    """Write an indexed PNG, plus (by default) a JSON sidecar with class names and scale."""
    path = Path(path)
    img = Image.fromarray(m.labels, mode="P")
    img.putpalette(_palette_bytes())
    img.save(path, format="PNG", optimize=False)
    if not sidecar:
        return path
    side = {"class_names": list(CLASS_NAMES[: m.class_count]), "class_count": m.class_count}
    if scale is not None:
        side["units_per_pixel"] = float(scale)
    if name is not None:
        side["name"] = name
    sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return path


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".json")


def load_map(path) -> SemanticMap:
    path = Path(path)
    with Image.open(path) as img:
        if img.mode != "P":
            raise InvalidInputError(f"{path}: expected an indexed-palette PNG, got mode {img.mode}")
        labels = np.array(img)
    class_count = len(PALETTE)
    side = sidecar_path(path)
    if side.exists():
        class_count = int(json.loads(side.read_text()).get("class_count", class_count))
    return SemanticMap(labels, class_count=class_count)


def load_sidecar(path) -> dict:
    side = sidecar_path(path)
    return json.loads(side.read_text()) if side.exists() else {}


def colorize(m: SemanticMap) -> np.ndarray:
    """RGB ``(H, W, 3)`` rendering with the fixed palette."""
    return np.asarray(PALETTE, dtype=np.uint8)[m.labels]
