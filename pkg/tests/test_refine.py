import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from topocal.datagen import CameraModel
from topocal.errors import DegenerateHomographyError, InvalidParameterError
from topocal.geometry import CameraParams, Homography, compose, normalize, translation
from topocal.loss import loss_config
from topocal.raster import SemanticMap, iou, to_onehot, warp_labels, warp_onehot
from topocal.refine import RefineConfig, WarpObjective, evaluate_estimate, refine, refine_multistart
from topocal.scenes import load_scene

SCENE, FRAME = load_scene("intersection1")
CAMERA = CameraModel((64, 64), (128, 128))
BASE = CameraParams(pan=0, tilt=-20, focal=200, x=650, y=950, z=60)
# blocky texture: structure along every direction, so the warp is pinned down geometrically
TEXTURE = SemanticMap(np.kron(np.random.default_rng(0).integers(0, 4, (40, 28)),
                              np.ones((12, 12), dtype=int))[:475, :325])
# probe points below the horizon band, where ground distances stay moderate
PROBES = np.stack(np.meshgrid(np.linspace(4, 60, 8), np.linspace(16, 60, 8)), -1).reshape(-1, 2)


def view_h(p):
    return CAMERA.homography(p, FRAME).matrix


def probe_error(h_a, h_b):
    """Mean displacement of the probe points between two bird's-eye-to-query maps, in query pixels."""
    pa = Homography(np.linalg.inv(h_a)).apply(PROBES)
    return float(np.mean(np.linalg.norm(Homography(h_b).apply(pa) - PROBES, axis=1)))


def test_config_validation_and_json():
    cfg = RefineConfig()
    assert (cfg.max_iters, cfg.initial_step, cfg.step_shrink) == (200, 1e-2, 0.5)
    assert (cfg.grad_tolerance, cfg.loss_tolerance) == (1e-7, 1e-9)
    assert RefineConfig.from_dict(cfg.to_dict()) == cfg
    assert RefineConfig(loss="topdice").loss == loss_config("topdice")
    for bad in (dict(max_iters=0), dict(step_shrink=1.0), dict(grad_tolerance=0), dict(direction="newton")):
        with pytest.raises(InvalidParameterError):
            RefineConfig(**bad)


def test_exact_start_is_fixed_point():
    h_k = view_h(BASE)
    query = warp_onehot(to_onehot(SCENE), h_k, (64, 64))
    res = refine(query, SCENE, (None, h_k))
    assert res.final_loss == 0.0
    assert np.max(np.abs(res.h_rel.matrix - np.eye(3))) < 1e-6
    assert np.array_equal(res.h.matrix, normalize(h_k).matrix)
    assert res.converged and len(res.losses) == 1


def test_label_query_stays_at_the_start():
    # nearest-neighbor rendering differs from the bilinear warp only on class boundaries
    h_k = view_h(BASE)
    query = warp_labels(TEXTURE, h_k, (64, 64))
    res = refine(query, TEXTURE, (None, h_k))
    assert res.final_loss <= res.initial_loss
    assert probe_error(res.h.matrix, h_k) < 0.5
    # on the real scene, long straight roads leave directions the labels cannot pin down
    query = warp_labels(SCENE, h_k, (64, 64))
    res = refine(query, SCENE, (None, h_k))
    assert evaluate_estimate(res, SCENE, query).mean > 0.98


def test_all_background_view_is_flat():
    # a camera looking away from every painted region: query and start are both empty
    birdseye = SemanticMap(np.pad(np.ones((20, 20), dtype=int), ((0, 300), (0, 300))))
    frame = FRAME.__class__(scale=1.0, height=birdseye.height)
    h_k = CAMERA.homography(CameraParams(0, -60, 100, 250, 60, 40), frame).matrix
    assert not warp_labels(birdseye, h_k, (64, 64)).labels.any()
    query = SemanticMap(np.zeros((64, 64), dtype=int))
    obj = WarpObjective(birdseye, query, h_k, loss_config("topmse"))
    assert np.all(obj.gradient(np.zeros(8)) == 0)
    res = refine(query, birdseye, (None, h_k))
    assert np.array_equal(res.h_rel.matrix, np.eye(3))
    assert res.converged and len(res.losses) == 1


def test_degenerate_start_rejected():
    with pytest.raises(DegenerateHomographyError):
        refine(SemanticMap(np.zeros((64, 64), dtype=int)), SCENE, (None, np.zeros((3, 3))))


def test_pan_offset_matches_grid_search_oracle():
    truth = CameraParams(pan=2, tilt=BASE.tilt, focal=BASE.focal, x=BASE.x, y=BASE.y, z=BASE.z)
    query = warp_labels(SCENE, view_h(truth), (64, 64))
    h_k = view_h(BASE)
    res = refine(query, SCENE, (None, h_k))
    pre = evaluate_estimate(h_k, SCENE, query).mean
    post = evaluate_estimate(res, SCENE, query).mean
    assert post > pre

    offsets = np.round(np.arange(-5.0, 5.0001, 0.1), 1)
    cams = [CameraParams(pan=d, tilt=BASE.tilt, focal=BASE.focal, x=BASE.x, y=BASE.y, z=BASE.z) for d in offsets]
    # oracle: 1-D grid search of the refinement objective over pan
    obj = WarpObjective(SCENE, query, np.eye(3), loss_config("topmse"))
    losses = []
    for c in cams:
        obj.h_k = view_h(c)
        losses.append(obj.value(np.zeros(8)))
    oracle = offsets[int(np.argmin(losses))]
    # the refined homography's pan: the grid camera closest to it
    recovered = offsets[int(np.argmin([probe_error(res.h.matrix, view_h(c)) for c in cams]))]
    assert abs(oracle - 2.0) <= 0.2
    assert abs(recovered - oracle) <= 0.2


@pytest.mark.parametrize("shift", [(3.0, 0.0), (-2.0, 2.5), (0.0, -3.5)])
def test_translation_recovered_within_half_pixel(shift):
    h_true = view_h(BASE)
    query = warp_labels(TEXTURE, h_true, (64, 64))
    h_start = translation(*shift).matrix @ h_true
    res = refine(query, TEXTURE, (None, h_start))
    assert probe_error(res.h.matrix, h_true) < 0.5
    assert iou(warp_labels(TEXTURE, res.h, (64, 64)), query).mean > 0.95


@settings(max_examples=12)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["topmse", "mse", "topdice", "dice"]))
def test_trajectory_monotone_and_composition(seed, loss):
    rng = np.random.default_rng(seed)
    truth = CameraParams(pan=float(rng.uniform(-30, 30)), tilt=float(rng.uniform(-20, -8)), focal=150,
                         x=float(rng.uniform(620, 680)), y=float(rng.uniform(920, 980)), z=60)
    start = CameraParams(pan=truth.pan + float(rng.uniform(-4, 4)), tilt=truth.tilt, focal=truth.focal,
                         x=truth.x, y=truth.y, z=truth.z)
    query = warp_labels(SCENE, view_h(truth), (64, 64))
    h_k = view_h(start)
    res = refine(query, SCENE, (None, h_k), RefineConfig(loss=loss, max_iters=25))
    assert all(b < a for a, b in zip(res.losses, res.losses[1:]))
    assert res.final_loss <= res.initial_loss
    assert res.h.matrix[2, 2] == 1.0
    assert np.allclose(res.h.matrix, compose(h_k, res.h_rel).matrix, rtol=1e-12, atol=1e-12)
    obj = WarpObjective(SCENE, query, res.h.matrix, res_loss := loss_config(loss))
    assert obj.value(np.zeros(8)) == pytest.approx(res.final_loss, rel=1e-9)
    assert res_loss.patch_count in (1, 16)


def test_gradient_direction_option_also_descends():
    truth = CameraParams(pan=3, tilt=-12, focal=150, x=640, y=960, z=60)
    query = warp_labels(SCENE, view_h(truth), (64, 64))
    res = refine(query, SCENE, (None, view_h(BASE)), RefineConfig(direction="gradient", max_iters=40, smoothing=()))
    assert res.final_loss < res.initial_loss
    assert all(b < a for a, b in zip(res.losses, res.losses[1:]))


def test_multistart_keeps_lowest_final_loss():
    truth = CameraParams(pan=4, tilt=-12, focal=150, x=640, y=960, z=60)
    query = warp_labels(SCENE, view_h(truth), (64, 64))
    starts = [CameraParams(pan=p, tilt=-12, focal=150, x=640, y=960, z=60) for p in (-25, 0, 6)]
    cands = [(None, view_h(s)) for s in starts]
    cfg = RefineConfig(max_iters=30)
    i, best = refine_multistart(query, SCENE, cands, cfg)
    singles = [refine(query, SCENE, c, cfg) for c in cands]
    assert best.final_loss == min(r.final_loss for r in singles)
    assert singles[i].final_loss == best.final_loss
    j, screened = refine_multistart(query, SCENE, cands, cfg, keep=1)
    assert screened.final_loss <= screened.initial_loss
    with pytest.raises(InvalidParameterError):
        refine_multistart(query, SCENE, [], cfg)


def test_evaluate_estimate_definitions():
    h_k = view_h(BASE)
    gt = warp_labels(SCENE, h_k, (64, 64))
    assert evaluate_estimate(h_k, SCENE, gt).mean == 1.0
    other = view_h(CameraParams(pan=5, tilt=-15, focal=150, x=650, y=950, z=60))
    assert evaluate_estimate(other, SCENE, gt).mean == iou(warp_labels(SCENE, other, (64, 64)), gt).mean


def test_translation_subproblem_reaches_analytic_optimum():
    ys, xs = np.mgrid[0:96, 0:96]
    r = np.hypot(xs + 0.5 - 48, ys + 0.5 - 48)
    blob = SemanticMap(np.where(r < 14, 2, np.where(r < 24, 1, 0)))
    shift = (3.0, -2.0)
    query = warp_labels(blob, translation(*shift), (96, 96))
    res = refine(query, blob, (None, np.eye(3)), RefineConfig(free_params=(2, 5)))
    m = res.h.matrix
    assert np.allclose(m[[0, 0, 1, 1, 2, 2], [0, 1, 0, 1, 0, 1]], [1, 0, 0, 1, 0, 0], atol=1e-12)
    assert np.hypot(m[0, 2] - shift[0], m[1, 2] - shift[1]) < 0.5
