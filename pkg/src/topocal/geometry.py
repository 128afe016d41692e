"""Virtual PTZ camera geometry and planar homographies.

Conventions
-----------
World frame is right-handed with the scene on the ground plane ``Z = 0`` and
``Z`` pointing up. A world point ``X`` maps to the camera as
``K @ R @ (X - C)`` with ``R = Q @ S``:

* ``S`` is a fixed -90 degree rotation about the world y-axis, turning the
  optical axis from vertical to horizontal (along world +X).
* ``Q = R_tilt @ R_pan``. Pan turns the camera about the world up-axis
  (positive pan is clockwise seen from above). Tilt turns it about the
  camera's lateral axis, which under ``S`` is the camera y-axis; negative
  tilt looks down.

A bird's-eye raster is placed on the ground by :class:`GroundFrame`: pixel
``(u, v)`` sits at world ``(scale * u, scale * (height - v))`` so raster rows
grow southward. With this placement every camera above the plane produces an
unnormalized homography with positive determinant. Rescaling by ``h33`` may
flip that sign, so the warps test ``sign(det H) * w`` rather than ``w`` alone
to tell ground in front of the camera from ground behind it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateHomographyError, InvalidParameterError

DET_EPS = 1e-12


@dataclass(frozen=True)
class CameraParams:
    """One virtual camera sample: angles in degrees, focal in pixels."""

    pan: float
    tilt: float
    focal: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        vals = (self.pan, self.tilt, self.focal, self.x, self.y, self.z)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidParameterError(f"non-finite camera parameter in {self}")
        if self.focal <= 0:
            raise InvalidParameterError(f"focal must be positive, got {self.focal}")
        if self.z <= 0:
            raise InvalidParameterError(f"camera height z must be positive, got {self.z}")
        if not -180.0 <= self.pan <= 180.0:
            raise InvalidParameterError(f"pan {self.pan} outside [-180, 180]")
        if not -90.0 <= self.tilt <= 0.0:
            raise InvalidParameterError(f"tilt {self.tilt} outside [-90, 0]")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    def to_dict(self) -> dict:
        return {
            "pan_deg": self.pan,
            "tilt_deg": self.tilt,
            "focal_px": self.focal,
            "x_units": self.x,
            "y_units": self.y,
            "z_units": self.z,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraParams":
        return cls(
            pan=float(d["pan_deg"]),
            tilt=float(d["tilt_deg"]),
            focal=float(d["focal_px"]),
            x=float(d["x_units"]),
            y=float(d["y_units"]),
            z=float(d["z_units"]),
        )


@dataclass(frozen=True)
class GroundFrame:
    """Placement of a bird's-eye raster on the ground plane.

    ``scale`` is world units per raster pixel; ``height`` is the raster row
    count (world y is measured up from the bottom edge).
    """

    scale: float = 1.0
    height: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise InvalidParameterError(f"ground scale must be positive, got {self.scale}")

    def to_world(self) -> np.ndarray:
        s = self.scale
        return np.array([[s, 0.0, 0.0], [0.0, -s, s * self.height], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class RotationDecomposition:
    q: np.ndarray  # pan-tilt rotation
    s: np.ndarray  # fixed base orientation

    @property
    def r(self) -> np.ndarray:
        return self.q @ self.s


class Homography:
    """A 3x3 projective transform with an optional normalization flag."""

    __slots__ = ("matrix", "normalized")

    def __init__(self, matrix, normalized: bool = False):
        m = np.array(matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got shape {m.shape}")
        m.setflags(write=False)
        self.matrix = m
        self.normalized = bool(normalized)

    def __array__(self, dtype=None, copy=None):
        return self.matrix if dtype is None else self.matrix.astype(dtype)

    def __repr__(self):
        rows = np.array2string(self.matrix, precision=6, suppress_small=True)
        return f"Homography({rows}, normalized={self.normalized})"

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3), normalized=True)

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.matrix))

    def apply(self, points) -> np.ndarray:
        """Map (n, 2) points; returns (n, 2)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ph = np.hstack([pts, np.ones((len(pts), 1))]) @ self.matrix.T
        return ph[:, :2] / ph[:, 2:3]

    def to_dict(self) -> dict:
        return {"matrix": [float(v) for v in self.matrix.ravel()], "normalized": self.normalized}

    @classmethod
    def from_dict(cls, d: dict) -> "Homography":
        vals = d["matrix"]
        if len(vals) != 9:
            raise ValueError("serialized homography needs 9 values")
        return cls(np.reshape(vals, (3, 3)), normalized=bool(d.get("normalized", False)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Homography":
        return cls.from_dict(json.loads(text))


def relative_det(m: np.ndarray) -> float:
    """Determinant of ``m`` scaled to unit Frobenius norm (scale invariant)."""
    m = np.asarray(m, dtype=float)
    nrm = np.linalg.norm(m)
    if nrm == 0:
        return 0.0
    return float(np.linalg.det(m / nrm))


def check_invertible(m: np.ndarray) -> None:
    if abs(relative_det(m)) < DET_EPS:
        raise DegenerateHomographyError("homography is singular (|det| < 1e-12 at unit norm)")


def intrinsics(focal: float, principal_point: Sequence[float] = (0.0, 0.0)) -> np.ndarray:
    """Pinhole intrinsic matrix with square pixels and zero skew."""
    if not focal > 0:
        raise InvalidParameterError(f"focal must be positive, got {focal}")
    cx, cy = principal_point
    return np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


BASE_ROTATION = _rot_y(math.radians(-90.0))
# rounding keeps S exactly orthonormal instead of carrying cos(pi/2) noise
BASE_ROTATION = np.round(BASE_ROTATION)


def rotation_from_pan_tilt(pan: float, tilt: float) -> RotationDecomposition:
    s = BASE_ROTATION
    # pan about world up, expressed in the frame after S
    pan_rot = s @ _rot_z(math.radians(pan)) @ s.T
    q = _rot_y(math.radians(tilt)) @ pan_rot
    return RotationDecomposition(q=q, s=s.copy())


def projection(k: np.ndarray, rot: RotationDecomposition, c: Sequence[float]) -> np.ndarray:
    """3x4 camera matrix ``K R [I | -C]``."""
    c = np.asarray(c, dtype=float).reshape(3)
    return np.asarray(k, dtype=float) @ rot.r @ np.hstack([np.eye(3), -c[:, None]])


def homography_from_params(
    p: CameraParams,
    frame: GroundFrame = GroundFrame(),
    principal_point: Sequence[float] = (0.0, 0.0),
) -> Homography:
    """Homography from bird's-eye raster pixels to camera pixels.

    Restricts the camera matrix to the ground plane (drops the Z column) and
    composes it with the raster placement.
    """
    k = intrinsics(p.focal, principal_point)
    cam = projection(k, rotation_from_pan_tilt(p.pan, p.tilt), p.center)
    m = cam[:, [0, 1, 3]] @ frame.to_world()
    check_invertible(m)
    return normalize(Homography(m))


def normalize(h) -> Homography:
    m = np.asarray(h, dtype=float)
    h33 = m[2, 2]
    if not abs(h33) > DET_EPS * np.linalg.norm(m):
        raise DegenerateHomographyError("cannot normalize: bottom-right entry vanishes")
    return Homography(m / h33, normalized=True)


def compose(a, b) -> Homography:
    """Normalized product ``a @ b`` (apply ``b`` first)."""
    return normalize(np.asarray(a, dtype=float) @ np.asarray(b, dtype=float))


def invert(h) -> Homography:
    m = np.asarray(h, dtype=float)
    check_invertible(m)
    return normalize(np.linalg.inv(m))


def to_param8(h) -> np.ndarray:
    return normalize(h).matrix.ravel()[:8].copy()


def from_param8(v) -> Homography:
    v = np.asarray(v, dtype=float).ravel()
    if v.shape != (8,):
        raise ValueError(f"expected 8 parameters, got {v.shape}")
    m = np.append(v, 1.0).reshape(3, 3)
    check_invertible(m)
    return Homography(m, normalized=True)


def translation(tx: float, ty: float) -> Homography:
    return Homography([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]], normalized=True)
