"""Per-timestep robot state layout shared across the pipeline.

One frame is 152 floats, concatenated in this fixed order:

    joint_positions      17 x 3 = 51   world positions of tracked frames
    joint_velocities             51    backward differences of the above
    joint_angles                 16    controllable joint angles
    joint_angle_rates            16
    wrist_rotation6d              6    first two rows of the wrist rotation
    wrist_rotation_rate           6    backward differences of the 6d rows
    wrist_height                  1
    wrist_height_rate             1
    tactile_depths                4    per-finger deformation depth (m)

Velocities are backward finite differences at the episode frame rate with
the first frame's rate set to zero, so positions and rates stay exactly
consistent.
"""

from __future__ import annotations

import numpy as np

from . import kinematics as kin
from .sensor import MAX_DEPTH

FIELDS = (
    ("joint_positions", 51),
    ("joint_velocities", 51),
    ("joint_angles", 16),
    ("joint_angle_rates", 16),
    ("wrist_rotation6d", 6),
    ("wrist_rotation_rate", 6),
    ("wrist_height", 1),
    ("wrist_height_rate", 1),
    ("tactile_depths", 4),
)

STATE_DIM = sum(n for _, n in FIELDS)

SLICES = {}
_offset = 0
for _name, _n in FIELDS:
    SLICES[_name] = slice(_offset, _offset + _n)
    _offset += _n

DEFAULT_FPS = 10.0


class StateLayoutError(ValueError):
    """Frame array violates the 152-dim layout or its bounds."""


def assert_layout():
    """Layout self-check run at load/train/inference boundaries."""
    if STATE_DIM != 152:
        raise StateLayoutError(f"state layout sums to {STATE_DIM}, expected 152")
    if SLICES["tactile_depths"].stop != STATE_DIM:
        raise StateLayoutError("tactile depths must be the final field")


def backward_difference(values: np.ndarray, fps: float) -> np.ndarray:
    """Rate = (x[i] - x[i-1]) * fps with the first rate zeroed."""
    rates = np.zeros_like(values)
    rates[1:] = (values[1:] - values[:-1]) * fps
    return rates


def tactile_depths_from_tips(tips: np.ndarray, heights: np.ndarray,
                             sensor_radius: float) -> np.ndarray:
    """Deformation depth per finger from fingertip centers vs support height.

    depth = clamp(radius - (tip_z - support), 0, cap): zero at tangency,
    growing as the commanded center drops below one radius of clearance.
    """
    depth = sensor_radius - (tips[..., 2] - heights)
    return np.clip(depth, 0.0, MAX_DEPTH)


def frames_from_gamma(model: kin.HandModel, gamma: kin.Gamma, terrain,
                      fps: float = DEFAULT_FPS, wrist_xy=(0.0, 0.0)) -> np.ndarray:
    """Assemble the (N, 152) frame array for a motion clip over a terrain."""
    positions, tips = kin.fk_arrays(model, gamma, wrist_xy)
    n = len(gamma)
    s_values = np.linspace(0.0, 100.0, n) if n > 1 else np.zeros(1)

    heights = np.empty((n, 4))
    for f in range(4):
        heights[:, f] = terrain.project(f, s_values, tips[:, f, 0], tips[:, f, 1])
    depths = tactile_depths_from_tips(tips, heights, model.sensor_radius)

    p_flat = positions.reshape(n, 51)
    frames = np.concatenate([
        p_flat,
        backward_difference(p_flat, fps),
        gamma.q,
        backward_difference(gamma.q, fps),
        gamma.rot6,
        backward_difference(gamma.rot6, fps),
        gamma.wrist_z[:, None],
        backward_difference(gamma.wrist_z[:, None], fps),
        depths,
    ], axis=1)
    if frames.shape[1] != STATE_DIM:
        raise StateLayoutError(f"assembled {frames.shape[1]} dims, expected {STATE_DIM}")
    return frames


def validate_frames(frames: np.ndarray, context: str = "frames"):
    """Boundary check: shape, tactile bounds, and non-degenerate rotations."""
    frames = np.asarray(frames)
    if frames.ndim < 2 or frames.shape[-1] != STATE_DIM:
        raise StateLayoutError(f"{context}: last dim is {frames.shape[-1]}, expected {STATE_DIM}")
    depths = frames[..., SLICES["tactile_depths"]]
    if depths.min() < -1e-12 or depths.max() > MAX_DEPTH + 1e-12:
        raise StateLayoutError(f"{context}: tactile depths outside [0, {MAX_DEPTH}] m")
    rot = frames[..., SLICES["wrist_rotation6d"]].reshape(-1, 6)
    a1, a2 = rot[:, :3], rot[:, 3:]
    n1 = np.linalg.norm(a1, axis=1)
    cross = np.linalg.norm(np.cross(a1, a2), axis=1)
    if (n1 < 1e-8).any() or (cross < 1e-10).any():
        raise StateLayoutError(f"{context}: degenerate wrist rotation rows")


def gamma_from_frames(frames: np.ndarray) -> kin.Gamma:
    """Extract the kinematic command portion of a frame array."""
    frames = np.atleast_2d(frames)
    return kin.Gamma(
        frames[:, SLICES["joint_angles"]],
        frames[:, SLICES["wrist_rotation6d"]],
        frames[:, SLICES["wrist_height"]][:, 0],
    )
