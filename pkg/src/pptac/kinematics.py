"""Hand kinematics: 16 finger joints plus a wrist pose.

Forward kinematics runs on autodiff tensors so trajectory optimization
and policy-training losses can differentiate through it. Geometry (link
offsets, axes, limits) is data, loaded from a JSON model file; nothing
below depends on specific dimensions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

N_JOINTS = 16
N_TRACKED = 17  # palm origin + 16 joint origins
IDENTITY_ROT6 = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])

# gamma layout per frame: 16 joint angles, 6d wrist rotation, wrist height
GAMMA_DIM = 23
_Q = slice(0, 16)
_R6 = slice(16, 22)
_WZ = 22


class DegenerateRotationError(ValueError):
    """The two 6d rotation rows are (nearly) collinear."""


@dataclass
class Joint:
    name: str
    axis: np.ndarray
    offset: np.ndarray
    limits: tuple[float, float]


@dataclass
class Finger:
    name: str
    base_position: np.ndarray
    base_yaw: float
    joints: list[Joint]
    tip_offset: np.ndarray

    def base_rotation(self) -> np.ndarray:
        c, s = np.cos(self.base_yaw), np.sin(self.base_yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class HandModel:
    """Immutable kinematic description shared by all pipeline stages."""

    def __init__(self, spec: dict):
        self.name = spec.get("name", "hand")
        self.sensor_radius = float(spec["sensor_radius"])
        if self.sensor_radius <= 0:
            raise ValueError("sensor radius must be positive")
        self.palm_offset = np.asarray(spec["palm_offset"], dtype=float)
        self.palm_collision_radius = float(spec.get("palm_collision_radius", 0.03))
        self.joint_collision_radius = float(spec.get("joint_collision_radius", 0.009))
        self.finger_order = list(spec["finger_order"])
        self.fingers = []
        for fname in self.finger_order:
            f = spec["fingers"][fname]
            joints = [
                Joint(
                    name=j["name"],
                    axis=np.asarray(j["axis"], dtype=float) / np.linalg.norm(j["axis"]),
                    offset=np.asarray(j["offset"], dtype=float),
                    limits=(float(j["limits"][0]), float(j["limits"][1])),
                )
                for j in f["joints"]
            ]
            self.fingers.append(
                Finger(
                    name=fname,
                    base_position=np.asarray(f["base_position"], dtype=float),
                    base_yaw=float(f["base_yaw"]),
                    joints=joints,
                    tip_offset=np.asarray(f["tip_offset"], dtype=float),
                )
            )
        n = sum(len(f.joints) for f in self.fingers)
        if n != N_JOINTS:
            raise ValueError(f"hand model must have {N_JOINTS} joints, found {n}")

    @classmethod
    def load(cls, path=None) -> "HandModel":
        if path is None:
            text = resources.files("pptac").joinpath("data/hand_default.json").read_text()
        else:
            text = Path(path).read_text()
        return cls(json.loads(text))

    @property
    def joint_limits(self) -> np.ndarray:
        return np.array([j.limits for f in self.fingers for j in f.joints])

    def clip_to_limits(self, q: np.ndarray) -> np.ndarray:
        lim = self.joint_limits
        return np.clip(q, lim[:, 0], lim[:, 1])


@dataclass
class Gamma:
    """A motion clip: per-frame joint angles, wrist 6d rotation, wrist height."""

    q: np.ndarray        # (N, 16)
    rot6: np.ndarray     # (N, 6)
    wrist_z: np.ndarray  # (N,)

    def __post_init__(self):
        self.q = np.atleast_2d(np.asarray(self.q, dtype=float))
        self.rot6 = np.atleast_2d(np.asarray(self.rot6, dtype=float))
        self.wrist_z = np.atleast_1d(np.asarray(self.wrist_z, dtype=float))
        if self.q.shape[1] != N_JOINTS or self.rot6.shape[1] != 6:
            raise ValueError("gamma frame layout must be (16 angles, 6d rotation, height)")

    def __len__(self):
        return self.q.shape[0]

    def to_flat(self) -> np.ndarray:
        return np.concatenate([self.q, self.rot6, self.wrist_z[:, None]], axis=1)

    @classmethod
    def from_flat(cls, flat: np.ndarray) -> "Gamma":
        flat = np.atleast_2d(flat)
        if flat.shape[1] != GAMMA_DIM:
            raise ValueError(f"expected {GAMMA_DIM} values per frame, got {flat.shape[1]}")
        return cls(flat[:, _Q], flat[:, _R6], flat[:, _WZ])


# -- rotations --------------------------------------------------------------


def rot6_to_matrix(rot6: Tensor) -> Tensor:
    """Gram-Schmidt the two stored rows, third row by cross product.

    Input (N, 6) -> (N, 3, 3) with orthonormal rows and det +1.
    """

    def _norm(v: Tensor) -> Tensor:
        return ad.sqrt((v * v).sum(axis=-1, keepdims=True))

    def _cross(u: Tensor, v: Tensor) -> Tensor:
        return ad.stack(
            [
                u[:, 1] * v[:, 2] - u[:, 2] * v[:, 1],
                u[:, 2] * v[:, 0] - u[:, 0] * v[:, 2],
                u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0],
            ],
            axis=1,
        )

    a1 = rot6[:, 0:3]
    a2 = rot6[:, 3:6]
    n1 = _norm(a1)
    if (n1.data < 1e-8).any():
        raise DegenerateRotationError("first 6d rotation row has near-zero norm")
    b1 = a1 / n1
    proj = (a2 * b1).sum(axis=-1, keepdims=True)
    residual = a2 - proj * b1
    n2 = _norm(residual)
    if (n2.data < 1e-8).any():
        raise DegenerateRotationError("6d rotation rows are collinear")
    b2 = residual / n2
    b3 = _cross(b1, b2)
    return ad.stack([b1, b2, b3], axis=1)


def axis_angle_matrix(axis: np.ndarray, angle: Tensor) -> Tensor:
    """Rotation matrices (N, 3, 3) about a fixed unit axis for batched angles."""
    ax = np.asarray(axis, dtype=float)
    skew = np.array([
        [0.0, -ax[2], ax[1]],
        [ax[2], 0.0, -ax[0]],
        [-ax[1], ax[0], 0.0],
    ])
    skew2 = skew @ skew
    n = angle.shape[0]
    s = ad.sin(angle).reshape(n, 1, 1)
    c = ad.cos(angle).reshape(n, 1, 1)
    eye = Tensor(np.broadcast_to(np.eye(3), (n, 3, 3)).copy())
    return eye + s * Tensor(skew) + (1.0 - c) * Tensor(skew2)


# -- forward kinematics -------------------------------------------------------


def fk(model: HandModel, q: Tensor, rot6: Tensor, wrist_z: Tensor,
       wrist_xy=(0.0, 0.0)) -> tuple[Tensor, Tensor]:
    """World positions of the 17 tracked frames and the 4 fingertip centers.

    All inputs are batched over frames: q (N,16), rot6 (N,6), wrist_z (N,).
    Returns (positions (N,17,3), fingertips (N,4,3)), differentiable in all
    three inputs.
    """
    n = q.shape[0]
    wrist_r = rot6_to_matrix(rot6)
    xy = Tensor(np.broadcast_to(np.asarray(wrist_xy, dtype=float), (n, 2)).copy())
    wrist_p = ad.concat([xy, wrist_z.reshape(n, 1)], axis=1)
    palm_p = wrist_p + ad.matmul(wrist_r, Tensor(model.palm_offset))

    positions = [palm_p]
    tips = []
    qi = 0
    for finger in model.fingers:
        frame_r = ad.matmul(wrist_r, Tensor(finger.base_rotation()))
        frame_p = palm_p + ad.matmul(wrist_r, Tensor(finger.base_position))
        for joint in finger.joints:
            if np.any(joint.offset):
                frame_p = frame_p + ad.matmul(frame_r, Tensor(joint.offset))
            positions.append(frame_p)
            frame_r = ad.matmul(frame_r, axis_angle_matrix(joint.axis, q[:, qi]))
            qi += 1
        tips.append(frame_p + ad.matmul(frame_r, Tensor(finger.tip_offset)))

    return ad.stack(positions, axis=1), ad.stack(tips, axis=1)


def fk_gamma(model: HandModel, gamma: Tensor, wrist_xy=(0.0, 0.0)) -> tuple[Tensor, Tensor]:
    """fk on a flat (N, 23) gamma tensor; keeps the graph in one piece."""
    return fk(model, gamma[:, _Q], gamma[:, _R6], gamma[:, _WZ], wrist_xy)


def fk_arrays(model: HandModel, gamma: Gamma, wrist_xy=(0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Plain-array fk for callers that do not need gradients."""
    p, tips = fk(model, Tensor(gamma.q), Tensor(gamma.rot6), Tensor(gamma.wrist_z), wrist_xy)
    return p.data, tips.data


def _axis_matrix_np(axis: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    x, y, z = axis
    skew = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + s * skew + (1 - c) * (skew @ skew)


def fk_pose(model: HandModel, q: np.ndarray, wrist_rot: np.ndarray,
            wrist_pos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Single-pose fk for an arbitrary wrist SE(3); plain numpy, no tape.

    Used by the contact procedure and the simulator where the wrist moves
    with full six degrees of freedom.
    """
    q = np.asarray(q, dtype=float).reshape(N_JOINTS)
    wrist_rot = np.asarray(wrist_rot, dtype=float)
    wrist_pos = np.asarray(wrist_pos, dtype=float).reshape(3)
    palm_p = wrist_pos + wrist_rot @ model.palm_offset

    positions = np.empty((N_TRACKED, 3))
    tips = np.empty((4, 3))
    positions[0] = palm_p
    idx = 1
    qi = 0
    for f, finger in enumerate(model.fingers):
        frame_r = wrist_rot @ finger.base_rotation()
        frame_p = palm_p + wrist_rot @ finger.base_position
        for joint in finger.joints:
            if np.any(joint.offset):
                frame_p = frame_p + frame_r @ joint.offset
            positions[idx] = frame_p
            idx += 1
            frame_r = frame_r @ _axis_matrix_np(joint.axis, q[qi])
            qi += 1
        tips[f] = frame_p + frame_r @ finger.tip_offset
    return positions, tips


# -- verification ------------------------------------------------------------


def jacobian_check(model: HandModel, gamma_frame: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between the autodiff Jacobian of the 51 tracked
    coordinates w.r.t. the 23 gamma entries and central finite differences."""
    gamma_frame = np.asarray(gamma_frame, dtype=float).reshape(GAMMA_DIM)
    n_out = N_TRACKED * 3

    # One batched graph: row k of the batch contributes output k, so the
    # gradient of sum_k P[k, k] w.r.t. row k is row k of the Jacobian.
    g = ad.parameter(np.tile(gamma_frame, (n_out, 1)))
    p, _ = fk_gamma(model, g)
    flat = p.reshape(n_out, n_out)
    ad.backward((flat * Tensor(np.eye(n_out))).sum())
    jac_ad = g.grad

    jac_fd = np.zeros((n_out, GAMMA_DIM))
    for j in range(GAMMA_DIM):
        hi = gamma_frame.copy()
        lo = gamma_frame.copy()
        hi[j] += eps
        lo[j] -= eps
        p_hi, _ = fk_gamma(model, Tensor(hi[None, :]))
        p_lo, _ = fk_gamma(model, Tensor(lo[None, :]))
        jac_fd[:, j] = (p_hi.data - p_lo.data).reshape(-1) / (2 * eps)

    scale = max(np.abs(jac_fd).max(), 1e-9)
    return float(np.abs(jac_ad - jac_fd).max() / scale)


# -- collision filtering -------------------------------------------------------


def collision_filter(model: HandModel, gamma: Gamma, terrain,
                     wrist_xy=(0.0, 0.0), tolerance: float = 1e-3) -> tuple[bool, str | None]:
    """Accept a trajectory unless a non-fingertip sphere penetrates the
    terrain by more than ``tolerance`` or two fingertip spheres
    interpenetrate by more than ``tolerance`` (strict inequalities).

    Returns (accepted, reason).
    """
    positions, tips = fk_arrays(model, gamma, wrist_xy)
    n = len(gamma)
    s_values = np.linspace(0.0, 100.0, n) if n > 1 else np.array([0.0])

    radii = np.full(N_TRACKED, model.joint_collision_radius)
    radii[0] = model.palm_collision_radius
    # sphere 0 is the palm (no finger context); spheres 1..16 belong to fingers
    sphere_finger = [None] + [k // 4 for k in range(16)]

    for i in range(n):
        ground = np.array([
            terrain.support_height(s_values[i], positions[i, k, 0], positions[i, k, 1],
                                   finger=sphere_finger[k])
            for k in range(N_TRACKED)
        ])
        penetration = ground + radii - positions[i, :, 2]
        worst = penetration.max()
        if worst > tolerance:
            k = int(penetration.argmax())
            return False, f"frame {i}: sphere {k} penetrates terrain by {worst * 1e3:.2f} mm"
        for a in range(4):
            for b in range(a + 1, 4):
                gap = np.linalg.norm(tips[i, a] - tips[i, b])
                overlap = 2 * model.sensor_radius - gap
                if overlap > tolerance:
                    return False, (f"frame {i}: fingertips {a}/{b} interpenetrate "
                                   f"by {overlap * 1e3:.2f} mm")
    return True, None
