import numpy as np
import pytest

from pptac import kinematics as kin
from pptac import state
from pptac import synthesis as sy
from pptac.terrain import Terrain


@pytest.fixture(scope="module")
def model():
    return kin.HandModel.load()


@pytest.fixture(scope="module")
def reference(model):
    return sy.grasp_reference_pose(model)


# -- state layout ---------------------------------------------------------------


def test_state_layout_sums_to_152():
    state.assert_layout()
    assert state.STATE_DIM == 152
    assert sum(n for _, n in state.FIELDS) == 152


def test_backward_difference_relation():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 3))
    v = state.backward_difference(x, fps=10.0)
    assert np.array_equal(v[0], np.zeros(3))
    assert np.allclose(v[1:], (x[1:] - x[:-1]) * 10.0, rtol=0, atol=0)


def test_frames_from_gamma_layout_and_velocities(model, reference):
    n = 25
    gamma = kin.Gamma(np.tile(reference.q, (n, 1)),
                      np.tile(reference.rot6, (n, 1)),
                      np.linspace(0.1, 0.15, n))
    frames = state.frames_from_gamma(model, gamma, Terrain.flat(), fps=10.0)
    assert frames.shape == (n, 152)
    state.validate_frames(frames)
    p = frames[:, state.SLICES["joint_positions"]]
    v = frames[:, state.SLICES["joint_velocities"]]
    fd = np.zeros_like(p)
    fd[1:] = (p[1:] - p[:-1]) * 10.0
    assert np.abs(fd - v).max() < 1e-12


def test_validate_frames_rejects_bad_depth():
    frames = np.zeros((3, 152))
    frames[:, state.SLICES["wrist_rotation6d"]] = kin.IDENTITY_ROT6
    frames[1, state.SLICES["tactile_depths"]] = 0.005
    with pytest.raises(state.StateLayoutError):
        state.validate_frames(frames)


def test_validate_frames_rejects_bad_width():
    with pytest.raises(state.StateLayoutError):
        state.validate_frames(np.zeros((3, 150)))


def test_gamma_from_frames_round_trip(model, reference):
    gamma = kin.Gamma(np.tile(reference.q, (4, 1)),
                      np.tile(reference.rot6, (4, 1)),
                      np.full(4, 0.12))
    frames = state.frames_from_gamma(model, gamma, Terrain.flat())
    back = state.gamma_from_frames(frames)
    assert np.allclose(back.q, gamma.q)
    assert np.allclose(back.rot6, gamma.rot6)
    assert np.allclose(back.wrist_z, gamma.wrist_z)


# -- targets ---------------------------------------------------------------------


def test_targets_tangency_on_flat(model, reference):
    template = sy.pinch_template_xy(model, reference)
    targets = sy.make_targets(template, Terrain.flat(), 0.0, model)
    assert np.allclose(targets.positions[:, :, 2], model.sensor_radius)


def test_targets_depth_lowering(model, reference):
    template = sy.pinch_template_xy(model, reference)
    targets = sy.make_targets(template, Terrain.flat(), 0.001, model)
    assert np.allclose(targets.positions[:, :, 2], model.sensor_radius - 0.001)


def test_targets_follow_linear_ramp(model, reference):
    heights = np.linspace(0.0, 0.02, 5)
    terrain = Terrain("per_finger", control_heights=heights)
    template = sy.pinch_template_xy(model, reference)
    targets = sy.make_targets(template, terrain, 0.0, model)
    s = np.linspace(0, 100, sy.N_FRAMES)
    expected = np.interp(s, [0, 100], [0.0, 0.02]) + model.sensor_radius
    for f in range(4):
        assert np.abs(targets.positions[:, f, 2] - expected).max() < 1e-6


def test_targets_reject_out_of_range_depth(model, reference):
    template = sy.pinch_template_xy(model, reference)
    with pytest.raises(ValueError):
        sy.make_targets(template, Terrain.flat(), 0.01, model)


def test_template_preserves_finger_spacing(model, reference):
    xy = sy.pinch_template_xy(model, reference)
    d_start = np.linalg.norm(xy[0, 1] - xy[0, 2])
    d_end = np.linalg.norm(xy[-1, 1] - xy[-1, 2])
    assert np.isclose(d_start, d_end, atol=1e-12)
    # thumb approaches the finger group
    gap0 = np.linalg.norm(xy[0, 0] - xy[0, 1:].mean(axis=0))
    gap1 = np.linalg.norm(xy[-1, 0] - xy[-1, 1:].mean(axis=0))
    assert gap1 < gap0


# -- optimization -------------------------------------------------------------------


def test_optimize_fixed_point(model, reference):
    n = 10
    gamma_ref = kin.Gamma(np.tile(reference.q, (n, 1)),
                          np.tile(reference.rot6, (n, 1)),
                          np.full(n, reference.wrist_z[0]))
    _, tips = kin.fk_arrays(model, gamma_ref)
    targets = sy.FingertipTargets(tips.copy(), np.zeros((n, 4)))
    problem = sy.OptimizationProblem(reference=gamma_ref, iterations=50,
                                     learning_rate=1e-2, optimizer="adam")
    sample = sy.optimize(problem, targets, model)
    assert sample.losses["total"] < 1e-10
    assert np.allclose(sample.gamma.to_flat(), gamma_ref.to_flat(), atol=1e-8)


def test_optimize_tracks_targets_on_flat(model, reference):
    rng = np.random.default_rng(1)
    template = sy.pinch_template_xy(model, reference, rng)
    targets = sy.make_targets(template, Terrain.flat(), 0.001, model)
    problem = sy.OptimizationProblem(reference=reference, iterations=150,
                                     learning_rate=3e-2, optimizer="adam")
    sample = sy.optimize(problem, targets, model)
    assert sample.rms_tip_error < 0.002


def test_optimize_regularizer_dominance_pins_reference(model, reference):
    template = sy.pinch_template_xy(model, reference)
    targets = sy.make_targets(template, Terrain.flat(), 0.001, model)
    problem = sy.OptimizationProblem(reference=reference,
                                     weight_targets=1e-12, weight_reference=1e6,
                                     weight_wrist=1e-6,
                                     iterations=60, learning_rate=1e-2,
                                     optimizer="adam")
    sample = sy.optimize(problem, targets, model)
    ref_flat = np.tile(reference.to_flat()[0], (sy.N_FRAMES, 1))
    assert np.abs(sample.gamma.to_flat() - ref_flat).max() < 1e-4


def test_optimize_loss_never_exceeds_initial(model, reference):
    rng = np.random.default_rng(2)
    template = sy.pinch_template_xy(model, reference, rng)
    targets = sy.make_targets(template, Terrain.generate(3), 0.0008, model)
    problem = sy.OptimizationProblem(reference=reference, iterations=40,
                                     learning_rate=3e-2, optimizer="adam")
    sample = sy.optimize(problem, targets, model)

    n = sy.N_FRAMES
    gamma0 = kin.Gamma(np.tile(reference.q, (n, 1)), np.tile(reference.rot6, (n, 1)),
                       np.full(n, reference.wrist_z[0]))
    _, tips0 = kin.fk_arrays(model, gamma0)
    init_tip_term = np.mean((tips0 - targets.positions) ** 2)
    assert sample.losses["total"] <= init_tip_term + 1e-12


def test_optimize_rejects_bad_weights(reference):
    with pytest.raises(ValueError):
        sy.OptimizationProblem(reference=reference, weight_targets=0.0)


def test_batched_matches_single(model, reference):
    rng = np.random.default_rng(3)
    problems, targets_list = [], []
    for _ in range(3):
        template = sy.pinch_template_xy(model, reference, rng)
        targets = sy.make_targets(template, Terrain.flat(), 0.001, model)
        problems.append(sy.OptimizationProblem(reference=reference, iterations=30,
                                               learning_rate=1e-2, optimizer="adam"))
        targets_list.append(targets)
    batched = sy.optimize_batch(problems, targets_list, model)
    singles = [sy.optimize(p, t, model) for p, t in zip(problems, targets_list)]
    for b, s in zip(batched, singles):
        assert abs(b.rms_tip_error - s.rms_tip_error) < 1e-6


# -- dataset ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("ds") / "small.ndjson"
    config = sy.SynthesisConfig(n_samples=4, seed=11, batch_size=4,
                                min_attempts_for_abort=40)
    stats = sy.synthesize_dataset(config, path)
    return path, config, stats


def test_synthesize_deterministic(small_dataset, tmp_path):
    path, config, stats = small_dataset
    other = tmp_path / "again.ndjson"
    sy.synthesize_dataset(config, other)
    assert sy.file_digest(path) == sy.file_digest(other)


def test_synthesize_bookkeeping(small_dataset):
    _, _, stats = small_dataset
    assert stats["accepted"] + stats["rejected"] == stats["attempted"]
    assert stats["accepted"] == 4


def test_dataset_schema(small_dataset):
    path, _, _ = small_dataset
    frames, depths, meta = sy.load_dataset(path)
    assert frames.shape[1:] == (100, 152)
    assert depths.shape == (frames.shape[0], 4)
    assert meta["frame_dim"] == 152
    state.validate_frames(frames)


def test_binary_variant_matches(small_dataset, tmp_path):
    path, config, _ = small_dataset
    bin_path = tmp_path / "small.bin"
    sy.synthesize_dataset(config, bin_path, binary=True)
    fa, da, _ = sy.load_dataset(path)
    fb, db, _ = sy.load_dataset(bin_path)
    assert np.allclose(fa, fb, atol=1e-6)
    assert np.array_equal(da, db)


def test_acceptance_collapse_aborts(model, tmp_path):
    config = sy.SynthesisConfig(n_samples=4, seed=1, accept_rms=1e-9,
                                iterations=5, batch_size=4,
                                min_attempts_for_abort=8)
    with pytest.raises(sy.SynthesisError):
        sy.synthesize_dataset(config, tmp_path / "never.ndjson")
