"""Homography refinement from a matched template.

The estimate is ``H = H_k @ Hbar`` where ``H_k`` is the matched template's
homography and ``Hbar`` starts at the identity. ``Hbar`` is optimized by a
backtracking line search on the configured loss between the warped bird's-eye
map and the query, along BFGS-scaled gradient directions (or plain normalized
gradients). Only steps that strictly lower the loss are accepted.

Internally the search runs over an equivalent correction ``Hc`` applied in
the query frame (``H = Hc @ H_k``, so ``Hbar = inv(H_k) @ Hc @ H_k``), with
``Hc`` expressed in coordinates centered on the image and scaled by its
diagonal. That keeps translation-, shear- and perspective-like parameters on
comparable scales.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DegenerateHomographyError, InvalidParameterError
from .geometry import Homography, check_invertible, compose, normalize
from .loss import TopoLossConfig, loss_config, topo_loss
from .raster import (
    BilinearSampler,
    IoUResult,
    OneHotMap,
    SemanticMap,
    _pixel_rays,
    _source_coords,
    iou,
    loss_and_matrix_grad,
    to_onehot,
    warp_labels,
)

log = logging.getLogger(__name__)

DIRECTIONS = ("bfgs", "gradient")
_IDENTITY8 = np.array([1.0, 0, 0, 0, 1.0, 0, 0, 0])


@dataclass(frozen=True)
class RefineConfig:
    loss: TopoLossConfig = field(default_factory=lambda: loss_config("topmse"))
    max_iters: int = 200
    initial_step: float = 1e-2
    step_shrink: float = 0.5
    grad_tolerance: float = 1e-7
    loss_tolerance: float = 1e-9
    max_backtracks: int = 20
    free_params: tuple | None = None  # indices into the 8-vector; None frees all
    # Gaussian blur widths (fractions of the image diagonal) for the coarse stages
    smoothing: tuple = (0.04, 0.01)
    direction: str = "bfgs"  # or "gradient"

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidParameterError("max_iters must be >= 1")
        if not 0.0 < self.step_shrink < 1.0:
            raise InvalidParameterError("step_shrink must lie in (0, 1)")
        if self.grad_tolerance <= 0 or self.loss_tolerance <= 0 or self.initial_step <= 0:
            raise InvalidParameterError("tolerances and initial_step must be positive")
        if self.direction not in DIRECTIONS:
            raise InvalidParameterError(f"direction must be one of {DIRECTIONS}")
        if isinstance(self.loss, str):
            object.__setattr__(self, "loss", loss_config(self.loss))
        elif isinstance(self.loss, dict):
            object.__setattr__(self, "loss", TopoLossConfig.from_dict(self.loss))

    def to_dict(self) -> dict:
        return {
            "loss": self.loss.to_dict(),
            "max_iters": self.max_iters,
            "initial_step": self.initial_step,
            "step_shrink": self.step_shrink,
            "grad_tolerance": self.grad_tolerance,
            "loss_tolerance": self.loss_tolerance,
            "max_backtracks": self.max_backtracks,
            "free_params": list(self.free_params) if self.free_params is not None else None,
            "smoothing": list(self.smoothing),
            "direction": self.direction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RefineConfig":
        d = dict(d)
        if d.get("free_params") is not None:
            d["free_params"] = tuple(d["free_params"])
        if "smoothing" in d:
            d["smoothing"] = tuple(d["smoothing"])
        return cls(**d)


@dataclass(frozen=True)
class RefineResult:
    h: Homography
    h_rel: Homography
    losses: list
    iterations: int
    converged: bool

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def to_dict(self) -> dict:
        return {
            "h": self.h.to_dict(),
            "h_rel": self.h_rel.to_dict(),
            "losses": list(self.losses),
            "iterations": self.iterations,
            "converged": self.converged,
        }


def frame_normalizer(size) -> np.ndarray:
    """Map pixel coordinates to image-centered units of the image diagonal."""
    w, h = size
    d = float(np.hypot(w, h))
    return np.array([[1.0 / d, 0.0, -w / (2 * d)], [0.0, 1.0 / d, -h / (2 * d)], [0.0, 0.0, 1.0]])


class WarpObjective:
    """Loss of the warped bird's-eye map against a query, as a function of a
    correction 8-vector ``c`` (``c = 0`` is the matched template itself).

    ``sigma`` (pixels of the evaluation grid) blurs both sides; ``shrink``
    evaluates on a grid ``shrink`` times coarser than the query, with the
    query block-averaged to match. ``c`` means the same correction at every
    ``shrink`` because it lives in diagonal-normalized coordinates.
    """

    def __init__(self, birdseye: SemanticMap | OneHotMap, query: SemanticMap | OneHotMap,
                 h_k, loss: TopoLossConfig, sigma: float = 0.0, shrink: int = 1):
        self.src = birdseye if isinstance(birdseye, OneHotMap) else to_onehot(birdseye)
        target = query if isinstance(query, OneHotMap) else to_onehot(query)
        full = target.size
        tw = target.weights
        if shrink > 1:
            c, h, w = tw.shape
            if h % shrink or w % shrink:
                raise InvalidParameterError(f"shrink {shrink} does not divide {w}x{h}")
            tw = tw.reshape(c, h // shrink, shrink, w // shrink, shrink).mean(axis=(2, 4))
        self.sigma = float(sigma)
        self.target = OneHotMap(self._blur(tw))
        self.size = self.target.size
        self.h_k = np.asarray(h_k, dtype=float)
        self.loss = loss
        self.sampler = BilinearSampler(self.src)
        # corrections are defined on the full query frame; warps run on the evaluation grid
        self.norm = frame_normalizer(full)
        self.norm_inv = np.linalg.inv(self.norm)
        self.down = np.diag([1.0 / shrink, 1.0 / shrink, 1.0])
        self.evaluations = 0

    def _blur(self, w):
        if self.sigma <= 0:
            return w
        # zero padding keeps the filter self-adjoint, which the gradient relies on
        return gaussian_filter(w, sigma=(0, self.sigma, self.sigma), mode="constant", truncate=3.0)

    def correction(self, c) -> np.ndarray:
        """Full-frame correction ``Hc`` for parameters ``c``."""
        return self.norm_inv @ np.append(_IDENTITY8 + c, 1.0).reshape(3, 3) @ self.norm

    def homography(self, c) -> np.ndarray:
        """Homography used for warping on the evaluation grid."""
        return self.down @ self.correction(c) @ self.h_k

    def value(self, c) -> float:
        m = self.homography(c)
        self.evaluations += 1
        w, h = self.size
        _, s, visible = _pixel_rays(m, (w, h))
        u, v = _source_coords(s, visible)
        warped = self.sampler.sample(u, v, visible).reshape(self.src.class_count, h, w)
        return topo_loss(self._blur(warped), self.target.weights, self.loss)

    def gradient(self, c) -> np.ndarray:
        m = self.homography(c)
        _, gmat = loss_and_matrix_grad(self.src, self.target, m, self.loss, sampler=self.sampler,
                                       blur=self._blur if self.sigma > 0 else None)
        # H = D N^-1 Chat N H_k  =>  dL/dChat = (D N^-1)^T dL/dH (N H_k)^T
        gc = (self.down @ self.norm_inv).T @ gmat @ (self.norm @ self.h_k).T
        return gc.ravel()[:8]


def _descend(obj: WarpObjective, c, f, free, cfg: RefineConfig):
    """Backtracking descent from ``c`` (loss ``f``).

    With ``direction="bfgs"`` the search direction is the gradient scaled by a
    BFGS inverse-Hessian estimate built from past gradients; when that
    estimate fails to produce a decrease it is dropped and the step falls back
    to a normalized gradient step. Returns ``(c, losses, iterations,
    converged)``; ``losses`` holds the value after every accepted step.
    """
    losses = []
    step = cfg.initial_step
    mask = free.astype(float)
    g = obj.gradient(c) * mask
    inv_h = None
    iters = 0
    for _ in range(cfg.max_iters):
        gn = float(np.linalg.norm(g))
        if gn < cfg.grad_tolerance:
            return c, losses, iters, True
        iters += 1
        direction = None
        if inv_h is not None:
            direction = -(inv_h @ g)
            if direction @ g >= 0:
                direction = inv_h = None
        if direction is None:
            direction = -g / gn
            t = min(cfg.initial_step, 2.0 * step)
        else:
            t = 1.0
        f_new = None
        for _ in range(cfg.max_backtracks):
            trial = c + t * direction
            try:
                val = obj.value(trial)
            except DegenerateHomographyError:
                val = None
            if val is not None and val < f:
                f_new = val
                break
            t *= cfg.step_shrink
        if f_new is None:
            if inv_h is not None:
                inv_h = None
                continue
            # no decrease down to the smallest gradient step
            return c, losses, iters, True
        s = trial - c
        step = float(np.linalg.norm(s))
        improvement = f - f_new
        c, f = trial, f_new
        losses.append(f)
        if improvement < cfg.loss_tolerance:
            return c, losses, iters, True
        g_new = obj.gradient(c) * mask
        if cfg.direction == "bfgs":
            inv_h = _bfgs_update(inv_h, s, g_new - g, mask)
        g = g_new
    return c, losses, iters, False


def _bfgs_update(inv_h, s, y, mask):
    sy = float(s @ y)
    if sy <= 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
        return inv_h  # curvature condition fails; keep the old estimate
    if inv_h is None:
        inv_h = np.diag(mask) * (sy / float(y @ y))
    rho = 1.0 / sy
    a = np.eye(len(s)) - rho * np.outer(s, y)
    return a @ inv_h @ a.T + rho * np.outer(s, s)


class _Run:
    """One refinement in progress: correction, exact loss and trajectory."""

    def __init__(self, birdseye, query, h_k, cfg: RefineConfig, src=None):
        self.h_k = np.asarray(h_k, dtype=float)
        check_invertible(self.h_k)
        self.query = query
        self.cfg = cfg
        self.exact = WarpObjective(src if src is not None else birdseye, query, self.h_k, cfg.loss)
        self.free = np.zeros(8, dtype=bool)
        self.free[list(range(8)) if cfg.free_params is None else list(cfg.free_params)] = True
        self.c = np.zeros(8)
        self.f = self.exact.value(self.c)
        self.losses = [self.f]
        self.iterations = 0
        self.converged = False
        self.stage = 0
        # a start whose label warp reproduces the query cannot be improved in IoU;
        # the bilinear objective's optimum may still sit a fraction of a pixel away
        self.exact_hit = isinstance(query, SemanticMap) and isinstance(birdseye, SemanticMap) and (
            warp_labels(birdseye, self.h_k, query.size) == query)

    def smoothed_stage(self, frac):
        """Descend a blurred surrogate; keep the result only if the exact loss drops."""
        ex = self.exact
        diag = float(np.hypot(*ex.size))
        k = _shrink_for(ex.size, frac * diag, self.cfg.loss.side)
        obj = WarpObjective(ex.src, self.query, self.h_k, self.cfg.loss, sigma=frac * diag / k, shrink=k)
        obj.sampler = ex.sampler
        c_s, _, n, _ = _descend(obj, self.c, obj.value(self.c), self.free, self.cfg)
        self.iterations += n
        f_s = ex.value(c_s)
        if f_s < self.f:
            self.c, self.f = c_s, f_s
            self.losses.append(f_s)
        self.stage += 1

    def finish(self) -> RefineResult:
        if self.exact_hit:
            return RefineResult(h=normalize(self.h_k), h_rel=Homography.identity(), losses=self.losses,
                                iterations=0, converged=True)
        for frac in self.cfg.smoothing[self.stage:]:
            self.smoothed_stage(frac)
        self.c, tail, n, self.converged = _descend(self.exact, self.c, self.f, self.free, self.cfg)
        self.iterations += n
        self.losses.extend(tail)
        self.f = self.losses[-1]
        h_rel, h = _final(self.h_k, self.exact.correction(self.c))
        log.debug("refine: %d iterations, loss %.6g -> %.6g", self.iterations, self.losses[0], self.losses[-1])
        return RefineResult(h=h, h_rel=h_rel, losses=self.losses, iterations=self.iterations,
                            converged=self.converged)


def refine(query: SemanticMap, birdseye: SemanticMap, matched, cfg: RefineConfig = RefineConfig()) -> RefineResult:
    """Refine the matched template homography against ``query``.

    ``matched`` is a ``(template, H_k)`` pair; only ``H_k`` drives the search.
    Smoothed stages (``cfg.smoothing``) run first; a stage's result is kept
    only if it lowers the exact objective. A start whose nearest-neighbor warp
    already equals ``query`` is returned unchanged. The returned trajectory holds exact
    objective values, is strictly decreasing, and starts at the template's
    own loss.
    """
    _, h_k = matched
    return _Run(birdseye, query, h_k, cfg).finish()


def _shrink_for(size, sigma, side, min_cells=8):
    """Coarsest power-of-two grid that still resolves a blur of ``sigma`` px.

    The blur must stay at least one coarse pixel wide and every patch at
    least ``min_cells`` pixels across.
    """
    w, h = size
    k = 1
    while (sigma / (2 * k) >= 1.0 and w % (2 * k) == 0 and h % (2 * k) == 0
           and min(w, h) // (2 * k) >= side * min_cells):
        k *= 2
    return k


def refine_multistart(query: SemanticMap, birdseye: SemanticMap, candidates,
                      cfg: RefineConfig = RefineConfig(), keep: int | None = None):
    """Refine from several matched ``(template, H_k)`` pairs; keep the lowest final loss.

    With ``keep`` set, every candidate first runs only the coarsest smoothed
    stage, and just the ``keep`` candidates with the lowest exact loss after
    it are refined to completion. A candidate that reproduces the query
    exactly wins outright. Returns ``(index, result)``; ties go to the
    earlier candidate.
    """
    candidates = list(candidates)
    if not candidates:
        raise InvalidParameterError("multi-start needs at least one candidate")
    if keep is not None and keep < 1:
        raise InvalidParameterError("keep must be >= 1")
    src = to_onehot(birdseye) if isinstance(birdseye, SemanticMap) else birdseye
    runs = [_Run(birdseye, query, h_k, cfg, src=src) for _, h_k in candidates]
    for i, r in enumerate(runs):
        if r.exact_hit:
            return i, r.finish()
    order = list(range(len(runs)))
    if keep is not None and keep < len(runs) and cfg.smoothing:
        for r in runs:
            r.smoothed_stage(cfg.smoothing[0])
        order = sorted(order, key=lambda i: (runs[i].f, i))[:keep]
    best = None
    for i in sorted(order):
        res = runs[i].finish()
        if best is None or res.final_loss < best[1].final_loss:
            best = (i, res)
    return best


def _final(h_k, corr):
    if np.allclose(corr, np.eye(3), rtol=0, atol=0):
        h_rel = Homography.identity()
    else:
        h_rel = normalize(np.linalg.inv(h_k) @ corr @ h_k)
    return h_rel, compose(h_k, h_rel)


def evaluate_estimate(result_or_h, birdseye: SemanticMap, query_gt: SemanticMap,
                      include_background: bool = False) -> IoUResult:
    """IoU between the bird's-eye map warped by the estimate and the query ground truth."""
    h = result_or_h.h if isinstance(result_or_h, RefineResult) else result_or_h
    pred = warp_labels(birdseye, h, query_gt.size)
    return iou(pred, query_gt, include_background=include_background)
