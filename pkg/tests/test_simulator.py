import numpy as np
import pytest

from pptac import kinematics as kin
from pptac import simulator as sim
from pptac import state
from pptac import synthesis as sy
from pptac.sensor import MAX_DEPTH
from pptac.terrain import Terrain


@pytest.fixture(scope="module")
def hand():
    return kin.HandModel.load()


@pytest.fixture(scope="module")
def pressed_pose(hand):
    """Claw pose pressed 1 mm into a flat plane, as frames."""
    terrain = Terrain.preset_field("plane")
    claw = sy.grasp_reference_pose(hand)
    sheet = sim.SheetModel()
    wz = float(claw.wrist_z[0]) + terrain.params["height"] - 0.001
    frame = sim._frame_from_pose(hand, claw.q[0], claw.rot6[0], wz, (0.0, 0.0),
                                 terrain, sheet)
    return frame, terrain, sheet


def make_sim(span=0.08):
    return sim.SimState(span=span, initial_span=span)


# -- sheet model ---------------------------------------------------------------


def test_sheet_critical_force_monotone_in_layers():
    spans = [0.08, 0.05]
    forces = [sim.SheetModel(layers=n).critical_force(0.08) for n in (1, 3, 5, 7)]
    assert all(b > a for a, b in zip(forces, forces[1:]))
    one = sim.SheetModel(layers=1)
    assert one.critical_force(0.04) > one.critical_force(0.08)


def test_sheet_rejects_bad_parameters():
    with pytest.raises(ValueError):
        sim.SheetModel(layers=0)
    with pytest.raises(ValueError):
        sim.SheetModel(friction_finger=-0.1)


# -- buckle geometry -------------------------------------------------------------


def test_buckle_flat_when_unshrunk():
    height, theta = sim.buckle_arc(0.08, 0.08)
    assert height == 0.0 and theta == 0.0


def test_buckle_arc_length_conserved():
    rng = np.random.default_rng(0)
    for _ in range(50):
        s0 = rng.uniform(0.04, 0.12)
        chord = s0 * rng.uniform(0.3, 0.999)
        height, theta = sim.buckle_arc(chord, s0)
        assert height > 0
        assert abs(sim.arc_length_of(chord, theta) - s0) < 1e-6


def test_buckle_height_grows_with_closure():
    s0 = 0.08
    heights = [sim.buckle_arc(c, s0)[0] for c in (0.078, 0.07, 0.06, 0.05)]
    assert all(b > a for a, b in zip(heights, heights[1:]))


def test_buckle_numeric_oracle():
    # independent polyline check of the arc length for one case
    chord, s0 = 0.06, 0.08
    height, theta = sim.buckle_arc(chord, s0)
    radius = chord / (2 * np.sin(theta))
    phi = np.linspace(-theta, theta, 20001)
    pts = np.stack([radius * np.sin(phi), radius * np.cos(phi)], axis=1)
    length = np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()
    assert abs(length - s0) < 1e-6


# -- step branches ----------------------------------------------------------------


def closing_command(hand, frame, closure=1e-3):
    """A commanded frame whose fingertips move inward by ~closure metres."""
    commanded = frame.copy()
    sl = state.SLICES["joint_angles"]
    q = commanded[sl].copy()
    # curl the proximal flexion joints a little: tips sweep inward
    for f in range(4):
        q[4 * f] += closure * 12   # rad per metre heuristic for this geometry
    commanded[sl] = q
    return commanded


def test_step_stick_branch_moves_sheet(hand, pressed_pose):
    frame, terrain, sheet = pressed_pose
    soft = sim.SheetModel(buckling_coeff=sheet.buckling_coeff * 1e-3)
    sim0 = make_sim()
    commanded = closing_command(hand, frame)
    sim1, slips = sim.step(hand, sim0, soft, terrain, commanded, frame, 150.0)
    assert not slips
    assert sim1.span < sim0.span
    assert sim1.buckle_height > 0
    assert sim1.arc_defect < 1e-6


def test_step_slip_branch_freezes_sheet(hand, pressed_pose):
    frame, terrain, sheet = pressed_pose
    stiff = sim.SheetModel(buckling_coeff=50.0, layers=7)
    sim0 = make_sim()
    commanded = closing_command(hand, frame)
    sim1, slips = sim.step(hand, sim0, stiff, terrain, commanded, frame, 150.0)
    assert len(slips) > 0
    assert sim1.span == sim0.span
    assert sim1.buckle_height == 0.0


def test_step_exactly_one_branch_per_finger(hand, pressed_pose):
    frame, terrain, _ = pressed_pose
    sim0 = make_sim()
    commanded = closing_command(hand, frame)
    for coeff in (1e-4, 0.3, 5.0, 50.0):
        sheet = sim.SheetModel(buckling_coeff=coeff)
        sim1, slips = sim.step(hand, sim0, sheet, terrain, commanded, frame, 150.0)
        moving = sim1.tangential_demand > 0
        for f in range(4):
            if moving[f]:
                stuck = sim1.span < sim0.span or f not in range(4)
                assert (f in slips) != (not sim1.slipping[f])


def test_step_no_motion_no_slip(hand, pressed_pose):
    frame, terrain, sheet = pressed_pose
    sim0 = make_sim()
    sim1, slips = sim.step(hand, sim0, sheet, terrain, frame, frame, 150.0)
    assert slips == []
    assert sim1.span == sim0.span


def test_step_rejects_nan(hand, pressed_pose):
    frame, terrain, sheet = pressed_pose
    bad = frame.copy()
    bad[0] = np.nan
    with pytest.raises(sim.SimulationError):
        sim.step(hand, make_sim(), sheet, terrain, bad, frame, 150.0)


def test_zero_buckling_membrane_buckles_immediately(hand, pressed_pose):
    frame, terrain, _ = pressed_pose
    membrane = sim.SheetModel(buckling_coeff=1e-9, friction_terrain=1e-6,
                              weight=1e-6)
    commanded = closing_command(hand, frame)
    sim1, slips = sim.step(hand, make_sim(), membrane, terrain, commanded, frame, 150.0)
    assert sim1.buckle_height > 0 and not slips


# -- force controller ----------------------------------------------------------------


def test_controller_no_slip_no_change():
    target = np.full(4, 8e-4)
    out = sim.force_controller(target, [], 1e-4)
    assert np.array_equal(out, target)


def test_controller_single_increment():
    target = np.full(4, 8e-4)
    out = sim.force_controller(target, [2], 1e-4)
    assert out[2] == pytest.approx(9e-4)
    assert np.array_equal(np.delete(out, 2), np.delete(target, 2))


def test_controller_caps_at_max_depth():
    target = np.full(4, MAX_DEPTH - 0.5e-4)
    for _ in range(5):
        target = sim.force_controller(target, [0, 1, 2, 3], 1e-4)
    assert np.allclose(target, MAX_DEPTH)
    assert target.max() <= MAX_DEPTH


def test_controller_monotone_non_decreasing():
    rng = np.random.default_rng(1)
    target = np.full(4, 5e-4)
    for _ in range(200):
        slips = list(np.nonzero(rng.uniform(size=4) < 0.3)[0])
        new = sim.force_controller(target, slips, 1e-4)
        assert (new >= target - 1e-15).all()
        target = new
    assert target.max() <= MAX_DEPTH + 1e-15


# -- episode plumbing -------------------------------------------------------------------


class StaticPolicy:
    """Stands in for a trained model: repeats the last prefix frame."""

    class _Cfg:
        n_prefix = 5
        n_pred = 5
        inference_steps = 10

    config = _Cfg()

    def __init__(self):
        self.eval_count = 0


def test_run_episode_zero_budget(hand, monkeypatch):
    from pptac import policy as pol

    def fake_infer(policy, prefix, phase, depth, rng):
        return np.tile(prefix[-1], (5, 1))

    monkeypatch.setattr(pol, "infer", fake_infer)
    result = sim.run_episode(hand, StaticPolicy(), Terrain.preset_field("plane"),
                             sim.SheetModel(), sim.SimConfig(frame_budget=0), seed=0)
    assert not result.success
    assert result.failure == "budget"
    assert result.frames == 0


def test_run_episode_static_policy_times_out(hand, monkeypatch):
    from pptac import policy as pol

    def fake_infer(policy, prefix, phase, depth, rng):
        return np.tile(prefix[-1], (5, 1))

    monkeypatch.setattr(pol, "infer", fake_infer)
    result = sim.run_episode(hand, StaticPolicy(), Terrain.preset_field("plane"),
                             sim.SheetModel(), sim.SimConfig(frame_budget=30), seed=0)
    assert not result.success
    assert result.failure in ("budget", "lost contact")
