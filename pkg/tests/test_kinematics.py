import numpy as np
import pytest

from pptac import autodiff as ad
from pptac import kinematics as kin
from pptac.autodiff import Tensor
from pptac.terrain import Terrain


@pytest.fixture(scope="module")
def model():
    return kin.HandModel.load()


def identity_frame(wrist_z=0.0):
    q = np.zeros((1, 16))
    rot6 = kin.IDENTITY_ROT6[None, :].copy()
    wz = np.array([wrist_z])
    return q, rot6, wz


def test_reference_positions_at_zero_pose(model):
    q, rot6, wz = identity_frame()
    p, tips = kin.fk_arrays(model, kin.Gamma(q, rot6, wz))
    palm = model.palm_offset
    assert np.allclose(p[0, 0], palm)
    # chains hang straight down: every joint sits below its finger base
    idx = 1
    for finger in model.fingers:
        base = palm + finger.base_position
        drop = 0.0
        for joint in finger.joints:
            drop += joint.offset[2]
            assert np.allclose(p[0, idx], base + [0.0, 0.0, drop], atol=1e-12)
            idx += 1
    assert p.shape == (1, 17, 3)
    assert tips.shape == (1, 4, 3)


def test_wrist_height_is_rigid_translation(model):
    rng = np.random.default_rng(0)
    q = rng.uniform(-0.2, 0.8, size=(1, 16))
    rot6 = kin.IDENTITY_ROT6[None, :] + 0.1 * rng.normal(size=(1, 6))
    p0, t0 = kin.fk_arrays(model, kin.Gamma(q, rot6, np.array([0.0])))
    p1, t1 = kin.fk_arrays(model, kin.Gamma(q, rot6, np.array([0.05])))
    assert np.allclose(p1 - p0, [0.0, 0.0, 0.05], atol=1e-12)
    assert np.allclose(t1 - t0, [0.0, 0.0, 0.05], atol=1e-12)


def two_link_hand(l1=0.07, l2=0.05):
    """All four fingers are plain 2-link flexion chains in the y-z plane."""
    finger = {
        "base_position": [0.0, 0.0, 0.0],
        "base_yaw": 0.0,
        "joints": [
            {"name": "j1", "axis": [1, 0, 0], "offset": [0, 0, 0], "limits": [-3, 3]},
            {"name": "j2", "axis": [1, 0, 0], "offset": [0, 0, -l1], "limits": [-3, 3]},
            {"name": "j3", "axis": [1, 0, 0], "offset": [0, 0, 0], "limits": [-3, 3]},
            {"name": "j4", "axis": [1, 0, 0], "offset": [0, 0, 0], "limits": [-3, 3]},
        ],
        "tip_offset": [0, 0, -l2],
    }
    spec = {
        "sensor_radius": 0.01,
        "palm_offset": [0, 0, 0],
        "finger_order": ["thumb", "index", "middle", "ring"],
        "fingers": {name: finger for name in ["thumb", "index", "middle", "ring"]},
    }
    return kin.HandModel(spec)


def test_two_link_planar_closed_form():
    l1, l2 = 0.07, 0.05
    hand = two_link_hand(l1, l2)
    q = np.zeros((1, 16))
    q[0, 4] = np.pi / 2  # index j1; index j2 stays 0
    _, tips = kin.fk_arrays(hand, kin.Gamma(q, kin.IDENTITY_ROT6[None, :], np.zeros(1)))
    # flexion by pi/2 about +x maps the downward link onto +y
    assert np.allclose(tips[0, 1], [0.0, l1 + l2, 0.0], atol=1e-12)
    # and at q=(pi/2, pi/2): second link folds onto +z
    q[0, 5] = np.pi / 2
    _, tips = kin.fk_arrays(hand, kin.Gamma(q, kin.IDENTITY_ROT6[None, :], np.zeros(1)))
    assert np.allclose(tips[0, 1], [0.0, l1, l2], atol=1e-12)


def test_rot6_orthonormal():
    rng = np.random.default_rng(1)
    rot6 = rng.normal(size=(50, 6))
    r = kin.rot6_to_matrix(Tensor(rot6)).data
    eye = np.eye(3)
    for m in r:
        assert np.abs(m.T @ m - eye).max() < 1e-10
        assert np.linalg.det(m) > 0.999999


def test_rot6_degenerate_rows_rejected():
    collinear = np.array([[1.0, 0, 0, 2.0, 0, 0]])
    with pytest.raises(kin.DegenerateRotationError):
        kin.rot6_to_matrix(Tensor(collinear))


def random_gamma_frame(rng, model):
    q = rng.uniform(model.joint_limits[:, 0] * 0.5, model.joint_limits[:, 1] * 0.5)
    rot6 = kin.IDENTITY_ROT6 + 0.3 * rng.normal(size=6)
    wz = rng.uniform(0.1, 0.3)
    return np.concatenate([q, rot6, [wz]])


def test_jacobian_matches_finite_differences(model):
    rng = np.random.default_rng(2)
    for _ in range(10):
        err = kin.jacobian_check(model, random_gamma_frame(rng, model))
        assert err < 1e-4


def test_jacobian_repeatable(model):
    rng = np.random.default_rng(3)
    frame = random_gamma_frame(rng, model)
    assert kin.jacobian_check(model, frame) == kin.jacobian_check(model, frame)


def test_wrist_height_column_is_unit_z(model):
    rng = np.random.default_rng(4)
    frame = random_gamma_frame(rng, model)
    g = ad.parameter(frame[None, :])
    p, _ = kin.fk_gamma(model, g)
    ad.backward(p[:, :, 2].sum())
    # d z_k / d wrist_z = 1 for all 17 positions; x,y do not depend on it
    assert np.allclose(g.grad[0, kin._WZ], 17.0)
    g2 = ad.parameter(frame[None, :])
    p2, _ = kin.fk_gamma(model, g2)
    ad.backward(p2[:, :, 0].sum() + p2[:, :, 1].sum())
    assert g2.grad[0, kin._WZ] == 0.0


def test_fk_differentiable_batched(model):
    rng = np.random.default_rng(5)
    frames = np.stack([random_gamma_frame(rng, model) for _ in range(7)])
    g = ad.parameter(frames)
    p, tips = kin.fk_gamma(model, g)
    loss = (p ** 2).sum() + (tips ** 2).sum()
    ad.backward(loss)
    assert g.grad.shape == frames.shape
    assert np.isfinite(g.grad).all()


# -- collision filter -----------------------------------------------------------


def hover_gamma(model, clearance=0.10, n=3):
    q, rot6, _ = identity_frame()
    p, _ = kin.fk_arrays(model, kin.Gamma(q, rot6, np.zeros(1)))
    lowest = p[0, :, 2].min() - model.palm_collision_radius
    wz = -lowest + clearance
    return kin.Gamma(np.tile(q, (n, 1)), np.tile(rot6, (n, 1)), np.full(n, wz))


def test_collision_filter_accepts_hovering(model):
    ok, reason = kin.collision_filter(model, hover_gamma(model), Terrain.flat())
    assert ok, reason


def test_collision_filter_rejects_buried_palm(model):
    gamma = hover_gamma(model)
    gamma.wrist_z[:] = -0.2  # palm centre far below the surface
    ok, reason = kin.collision_filter(model, gamma, Terrain.flat())
    assert not ok
    assert "penetrates" in reason


def test_collision_filter_boundary_penetration(model):
    q, rot6, _ = identity_frame()
    p, _ = kin.fk_arrays(model, kin.Gamma(q, rot6, np.zeros(1)))
    lowest = p[0, 1:, 2].min()  # deepest joint sphere at wrist_z = 0
    r = model.joint_collision_radius
    # just inside the 1 mm allowance -> accept (strict inequality)
    wz = -(lowest - r + 1e-3) + 1e-9
    ok, _ = kin.collision_filter(model, kin.Gamma(q, rot6, np.array([wz])), Terrain.flat())
    assert ok
    # 0.1 mm past the allowance -> reject
    ok, _ = kin.collision_filter(model, kin.Gamma(q, rot6, np.array([wz - 1e-4])), Terrain.flat())
    assert not ok


def test_collision_filter_rejects_fingertip_overlap():
    hand = two_link_hand()
    # flex index and middle toward each other until the tip spheres overlap
    q = np.zeros((1, 16))
    gamma = kin.Gamma(q, kin.IDENTITY_ROT6[None, :], np.array([0.5]))
    ok, reason = kin.collision_filter(hand, gamma, Terrain.flat())
    assert not ok
    assert "interpenetrate" in reason


def test_gamma_round_trip():
    rng = np.random.default_rng(6)
    flat = rng.normal(size=(5, kin.GAMMA_DIM))
    gamma = kin.Gamma.from_flat(flat)
    assert np.array_equal(gamma.to_flat(), flat)
