import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from oracles import camera_matrix, dlt_homography, lookat_rotation, projective_distance, raster_to_world
from topocal.errors import DegenerateHomographyError, InvalidParameterError
from topocal.geometry import (
    BASE_ROTATION,
    CameraParams,
    GroundFrame,
    Homography,
    compose,
    from_param8,
    homography_from_params,
    intrinsics,
    invert,
    normalize,
    projection,
    rotation_from_pan_tilt,
    to_param8,
)

pans = st.sampled_from(np.arange(-180, 181, 15).tolist())
tilts = st.sampled_from([-20, -15, -10, -5, 0])
focals = st.sampled_from(list(range(50, 501, 50)))
table2 = st.builds(
    CameraParams,
    pan=pans,
    tilt=tilts,
    focal=focals,
    x=st.sampled_from(list(range(600, 701, 10))),
    y=st.sampled_from(list(range(900, 1001, 10))),
    z=st.sampled_from(list(range(50, 101, 10))),
)
FRAME = GroundFrame(scale=4.0, height=475)
PP = (64.0, 64.0)


def test_intrinsics_examples():
    assert np.array_equal(intrinsics(1.0), np.eye(3))
    k = intrinsics(500.0, (128.0, 128.0))
    assert np.array_equal(k, [[500, 0, 128], [0, 500, 128], [0, 0, 1]])
    with pytest.raises(InvalidParameterError):
        intrinsics(-10.0)


def test_camera_params_validation_and_json():
    p = CameraParams(pan=15, tilt=-5, focal=100, x=650, y=950, z=75)
    assert CameraParams.from_dict(json.loads(json.dumps(p.to_dict()))) == p
    assert set(p.to_dict()) == {"pan_deg", "tilt_deg", "focal_px", "x_units", "y_units", "z_units"}
    for bad in (dict(focal=0), dict(z=-1), dict(pan=181), dict(tilt=5), dict(tilt=-91), dict(x=math.nan)):
        kw = dict(pan=0, tilt=0, focal=1, x=0, y=0, z=1)
        kw.update(bad)
        with pytest.raises(InvalidParameterError):
            CameraParams(**kw)


def test_base_rotation_is_minus_90_about_y():
    oracle = Rotation.from_rotvec([0, -math.pi / 2, 0]).as_matrix()
    assert np.allclose(BASE_ROTATION, oracle, atol=1e-15)
    assert np.array_equal(BASE_ROTATION.T @ BASE_ROTATION, np.eye(3))


def test_rotation_examples():
    assert np.allclose(rotation_from_pan_tilt(0, 0).q, np.eye(3), atol=0)
    assert np.allclose(rotation_from_pan_tilt(360, 0).q, np.eye(3), atol=1e-12)
    # pan about world up conjugated into the post-S frame, then tilt about camera y
    r = rotation_from_pan_tilt(90, -45)
    s = BASE_ROTATION
    pan = s @ Rotation.from_rotvec([0, 0, math.pi / 2]).as_matrix() @ s.T
    tilt = Rotation.from_rotvec([0, -math.pi / 4, 0]).as_matrix()
    assert np.allclose(r.q, tilt @ pan, atol=1e-12)


@given(st.floats(-180, 180), st.floats(-90, 0))
def test_rotation_matches_lookat_oracle(pan, tilt):
    r = rotation_from_pan_tilt(pan, tilt)
    for m in (r.q, r.s, r.r):
        assert np.allclose(m.T @ m, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(m) - 1.0) < 1e-12
    if tilt > -89.999:  # the look-at frame is undefined when looking straight down
        assert np.allclose(r.r, lookat_rotation(pan, tilt), atol=1e-12)


def test_projection_examples():
    rot_id = type(rotation_from_pan_tilt(0, 0))(q=np.eye(3), s=np.eye(3))
    assert np.array_equal(projection(np.eye(3), rot_id, (0, 0, 0)), np.hstack([np.eye(3), np.zeros((3, 1))]))
    p = projection(np.eye(3), rot_id, (1, 2, 3))
    assert np.array_equal(p[:, 3], [-1, -2, -3])


def test_projection_center_sample_against_point_oracle():
    cam = CameraParams(pan=0, tilt=-20, focal=250, x=650, y=950, z=75)
    k = intrinsics(cam.focal, PP)
    p = projection(k, rotation_from_pan_tilt(cam.pan, cam.tilt), cam.center)
    oracle = camera_matrix(cam.pan, cam.tilt, cam.focal, cam.center, PP)
    for g in ([700, 950, 0], [900, 800, 0], [1000, 1100, 0], [660, 960, 0]):
        a = p @ np.append(g, 1.0)
        b = oracle @ np.append(g, 1.0)
        assert np.allclose(a[:2] / a[2], b[:2] / b[2], rtol=1e-9, atol=1e-9)


def _dlt_for(cam, frame=FRAME, pp=PP):
    p = camera_matrix(cam.pan, cam.tilt, cam.focal, cam.center, pp)
    src, dst = [], []
    for uv in [(0, 0), (325, 0), (325, 475), (0, 475), (160, 240), (80, 400), (250, 90), (40, 150)]:
        g = raster_to_world(uv, frame.scale, frame.height)
        x = p @ np.append(g, 1.0)
        if abs(x[2]) > 1e-3 * np.linalg.norm(g - cam.center):  # skip points on the camera's principal plane
            src.append(uv)
            dst.append(x[:2] / x[2])
    assert len(src) >= 5
    return dlt_homography(src, dst)


@settings(max_examples=200)
@given(table2)
def test_homography_matches_dlt_oracle(cam):
    h = homography_from_params(cam, FRAME, PP)
    assert projective_distance(h.matrix, _dlt_for(cam)) < 1e-8
    assert h.normalized and h.matrix[2, 2] == 1.0
    # before rescaling, the ground-to-image map has positive determinant
    p = camera_matrix(cam.pan, cam.tilt, cam.focal, cam.center, PP)
    f = np.array([[FRAME.scale, 0, 0], [0, -FRAME.scale, FRAME.scale * FRAME.height], [0, 0, 1]])
    assert np.linalg.det(p[:, [0, 1, 3]] @ f) > 0


def test_table1_sample_matches_dlt():
    cam = CameraParams(pan=-12, tilt=-7, focal=650, x=60, y=625, z=120)
    frame = GroundFrame(scale=4.0, height=313)
    h = homography_from_params(cam, frame, PP)
    assert projective_distance(h.matrix, _dlt_for(cam, frame)) < 1e-8


def test_overhead_camera_gives_similarity():
    h = homography_from_params(CameraParams(pan=0, tilt=-90, focal=1, x=0, y=0, z=1)).matrix
    a = h[:2, :2]
    assert np.allclose(h[2, :2], 0, atol=1e-15)
    assert np.allclose(a @ a.T, abs(np.linalg.det(a)) * np.eye(2), atol=1e-12)


def test_camera_on_plane_is_degenerate():
    with pytest.raises(DegenerateHomographyError):
        homography_from_params(CameraParams(pan=0, tilt=-90, focal=1, x=0, y=0, z=1e-15))


def test_param8_and_normalize_examples():
    assert np.array_equal(to_param8(Homography.identity()), [1, 0, 0, 0, 1, 0, 0, 0])
    assert np.array_equal(normalize(2 * np.eye(3)).matrix, np.eye(3))
    with pytest.raises(DegenerateHomographyError):
        invert(np.zeros((3, 3)))
    with pytest.raises(DegenerateHomographyError):
        from_param8([1, 0, 0, 0, 0, 0, 0, 0])


@settings(max_examples=100)
@given(table2)
def test_invert_and_roundtrips(cam):
    h = homography_from_params(cam, FRAME, PP)
    assert np.allclose(h.matrix @ invert(h).matrix / (h.matrix @ invert(h).matrix)[2, 2], np.eye(3), atol=1e-10)
    assert np.allclose(invert(invert(h)).matrix, h.matrix, rtol=1e-10, atol=1e-12)
    assert np.array_equal(from_param8(to_param8(h)).matrix, normalize(h).matrix)
    assert np.allclose(compose(h, Homography.identity()).matrix, h.matrix, rtol=1e-15)
    assert np.allclose(compose(h, invert(h)).matrix, np.eye(3), atol=1e-10)


@settings(max_examples=50)
@given(table2, table2, table2)
def test_compose_matches_product_and_is_associative(a, b, c):
    ha, hb, hc = (homography_from_params(x, FRAME, PP) for x in (a, b, c))
    # hand-written product oracle
    ma, mb = ha.matrix, hb.matrix
    prod = [[sum(ma[i, k] * mb[k, j] for k in range(3)) for j in range(3)] for i in range(3)]
    prod = np.array(prod) / prod[2][2]
    assert np.allclose(compose(ha, hb).matrix, prod, rtol=1e-12, atol=1e-12)
    left = compose(compose(ha, hb), hc).matrix
    right = compose(ha, compose(hb, hc)).matrix
    assert np.allclose(left, right, rtol=1e-10, atol=1e-10 * np.abs(left).max())


@given(table2, st.floats(-1e3, 1e3).filter(lambda v: abs(v) > 1e-3))
def test_normalize_idempotent_and_scale_free(cam, lam):
    h = homography_from_params(cam, FRAME, PP)
    assert np.array_equal(normalize(normalize(h)).matrix, normalize(h).matrix)
    assert np.allclose(normalize(lam * h.matrix).matrix, normalize(h).matrix, rtol=1e-12, atol=1e-15)


def test_homography_json_roundtrip():
    h = homography_from_params(CameraParams(15, -5, 200, 650, 950, 60), FRAME, PP)
    d = json.loads(h.to_json())
    assert len(d["matrix"]) == 9 and d["normalized"] is True
    back = Homography.from_json(h.to_json())
    assert np.array_equal(back.matrix, h.matrix)
    with pytest.raises(Exception):
        h.matrix[0, 0] = 3.0
