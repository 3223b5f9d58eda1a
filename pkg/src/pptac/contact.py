"""Contact establishment: descend, then pivot until three fingertips touch.

The hand descends until one fingertip meets the surface, rotates about
that contact point until a second touches, then rotates about the line
through both contacts until a third lands. Rotations are applied as
rigid transforms that keep the existing contact points exactly fixed;
the finger joints hold still and only the wrist moves.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kinematics as kin

FINGERS = ("thumb", "index", "middle", "ring")
FINGER_LETTER = {"thumb": "t", "index": "i", "middle": "m", "ring": "r"}
TIE_ORDER = sorted(range(4), key=lambda f: FINGER_LETTER[FINGERS[f]])

CONTACT_TOLERANCE = 1e-4        # max penetration during the procedure (m)
THETA_STEP = np.deg2rad(0.25)   # scan increment
ROTATION_LIMIT = np.deg2rad(45.0)
DESCENT_LIMIT = 0.10            # m


class ContactError(RuntimeError):
    """The procedure could not reach the required contacts within limits."""


def rodrigues(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation matrix about ``axis`` by ``angle`` (axis normalized here)."""
    axis = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        raise ValueError("rotation axis must be non-zero")
    return kin._axis_matrix_np(axis / norm, angle)


def rotation_about_point(point: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    """Homogeneous transform rotating space about a line through ``point``."""
    rot = rodrigues(axis, angle)
    t = np.eye(4)
    t[:3, :3] = rot
    t[:3, 3] = point - rot @ point
    return t


@dataclass
class ContactState:
    q: np.ndarray                      # fixed joint angles during the procedure
    wrist: np.ndarray                  # 4x4 world transform of the wrist
    in_contact: list = field(default_factory=list)    # finger indices, contact order
    contact_points: dict = field(default_factory=dict)
    events: list = field(default_factory=list)

    @property
    def free(self) -> list:
        return [f for f in range(4) if f not in self.in_contact]

    def tips(self, model: kin.HandModel) -> np.ndarray:
        _, tips = kin.fk_pose(model, self.q, self.wrist[:3, :3], self.wrist[:3, 3])
        return tips

    def log(self, step: str, finger: int | None, angle: float):
        self.events.append({
            "step": step,
            "finger": FINGERS[finger] if finger is not None else "",
            "theta_deg": float(np.degrees(angle)),
            "wrist": self.wrist[:3, :].reshape(-1).tolist(),
        })


def _gaps(model: kin.HandModel, terrain, state: ContactState) -> np.ndarray:
    """Signed clearance per fingertip: tip-centre height above terrain minus
    the sensor radius. Zero means touching; negative means penetration."""
    tips = state.tips(model)
    ground = np.array([float(terrain.support_height(0.0, tips[f, 0], tips[f, 1],
                                                    finger=f)) for f in range(4)])
    return tips[:, 2] - model.sensor_radius - ground


def _touch_point(model: kin.HandModel, terrain, state: ContactState, finger: int) -> np.ndarray:
    tip = state.tips(model)[finger]
    ground = float(terrain.support_height(0.0, tip[0], tip[1], finger=finger))
    return np.array([tip[0], tip[1], ground])


def first_contact(model: kin.HandModel, terrain, state: ContactState) -> ContactState:
    """Lower the wrist until exactly one fingertip touches the surface."""
    if state.in_contact:
        raise ContactError("first_contact requires all fingers hovering")
    gaps = _gaps(model, terrain, state)
    drop = gaps.min()
    if drop > DESCENT_LIMIT:
        raise ContactError(f"no contact within descent limit ({drop:.3f} m needed)")
    if drop < -CONTACT_TOLERANCE:
        raise ContactError("a fingertip already penetrates the surface")
    state.wrist[2, 3] -= drop
    gaps = gaps - drop

    touching = np.nonzero(gaps <= CONTACT_TOLERANCE * 0.999)[0]
    tied = np.nonzero(np.abs(gaps - gaps.min()) < 1e-12)[0]
    if len(tied) > 1:
        winner = next(f for f in TIE_ORDER if f in tied)
        state.log("first_contact_tie", winner, 0.0)
    else:
        winner = int(touching[np.argmin(gaps[touching])])
    state.in_contact.append(winner)
    state.contact_points[winner] = _touch_point(model, terrain, state, winner)
    state.log("first_contact", winner, 0.0)
    return state


def _scan_rotation(model: kin.HandModel, terrain, state: ContactState,
                   pivot: np.ndarray, axis: np.ndarray, step_name: str) -> ContactState:
    """Increase the rotation angle until a free fingertip lands, bisecting the
    final step so penetration stays within tolerance."""
    free = state.free
    if not free:
        raise ContactError("no free fingers left to land")

    def gaps_at(theta: float) -> np.ndarray:
        trial = ContactState(state.q, rotation_about_point(pivot, axis, theta) @ state.wrist)
        return _gaps(model, terrain, trial)[free]

    theta = 0.0
    while theta < ROTATION_LIMIT:
        theta_next = min(theta + THETA_STEP, ROTATION_LIMIT)
        if gaps_at(theta_next).min() <= 0.0:
            lo, hi = theta, theta_next
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                g = gaps_at(mid).min()
                if g <= 0.0:
                    hi = mid
                else:
                    lo = mid
                if 0.0 >= g >= -CONTACT_TOLERANCE * 0.5:
                    break
            theta = hi
            break
        theta = theta_next
        if theta >= ROTATION_LIMIT and gaps_at(theta).min() > 0.0:
            raise ContactError(f"{step_name}: no contact within rotation limit")

    transform = rotation_about_point(pivot, axis, theta)
    state.wrist = transform @ state.wrist
    gaps = _gaps(model, terrain, state)
    lander = free[int(np.argmin(gaps[free]))]
    state.in_contact.append(lander)
    state.contact_points[lander] = _touch_point(model, terrain, state, lander)
    state.log(step_name, lander, theta)

    # pivoting about a point on the sphere surface can sink the pivot sphere
    # slightly; settle vertically when it exceeds tolerance
    worst = _gaps(model, terrain, state).min()
    if worst < -CONTACT_TOLERANCE:
        state.wrist[2, 3] -= worst + 0.5 * CONTACT_TOLERANCE
        for f in state.in_contact:
            state.contact_points[f] = _touch_point(model, terrain, state, f)
        state.log(f"{step_name}_settle", None, 0.0)
    return state


def _descending_axis(axis: np.ndarray, pivot: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Orient the axis so positive rotation lowers ``target``."""
    velocity = np.cross(axis, target - pivot)
    return axis if velocity[2] < 0 else -axis


def second_contact(model: kin.HandModel, terrain, state: ContactState) -> ContactState:
    """Rotate about the first contact point until a second fingertip lands.

    The axis is the horizontal 90-degree rotation of the line from the
    contact centroid to the free-finger centroid.
    """
    if len(state.in_contact) != 1:
        raise ContactError("second_contact requires exactly one finger in contact")
    tips = state.tips(model)
    contact_centroid = state.contact_points[state.in_contact[0]]
    free_centroid = tips[state.free].mean(axis=0)
    rz90 = rodrigues(np.array([0.0, 0.0, 1.0]), np.pi / 2)
    axis = rz90 @ (free_centroid - contact_centroid)
    axis = _descending_axis(axis / np.linalg.norm(axis), contact_centroid, free_centroid)
    return _scan_rotation(model, terrain, state, contact_centroid, axis, "second_contact")


def third_contact(model: kin.HandModel, terrain, state: ContactState) -> ContactState:
    """Rotate about the line through both contact points until a third lands.

    Skipped when a third fingertip is already touching.
    """
    if len(state.in_contact) < 2:
        raise ContactError("third_contact requires two fingers in contact")
    if len(state.in_contact) >= 3:
        return state
    gaps = _gaps(model, terrain, state)
    already = [f for f in state.free if gaps[f] <= CONTACT_TOLERANCE]
    if already:
        for f in already:
            state.in_contact.append(f)
            state.contact_points[f] = _touch_point(model, terrain, state, f)
        state.log("third_contact_pre_existing", already[0], 0.0)
        return state

    tips = state.tips(model)
    c1 = state.contact_points[state.in_contact[0]]
    c2 = state.contact_points[state.in_contact[1]]
    axis = c2 - c1
    free_centroid = tips[state.free].mean(axis=0)
    axis = _descending_axis(axis / np.linalg.norm(axis), c1, free_centroid)
    return _scan_rotation(model, terrain, state, c1, axis, "third_contact")


def establish_contact(model: kin.HandModel, terrain, q: np.ndarray,
                      wrist: np.ndarray) -> ContactState:
    """Full procedure: descend, pivot twice, return with three-plus contacts."""
    state = ContactState(np.asarray(q, dtype=float), np.asarray(wrist, dtype=float).copy())
    state = first_contact(model, terrain, state)
    state = second_contact(model, terrain, state)
    state = third_contact(model, terrain, state)
    if len(state.in_contact) < 3:
        raise ContactError("procedure finished with fewer than three contacts")
    return state


def write_event_log(path, state: ContactState):
    """CSV trace of the procedure: step, finger, theta, wrist transform."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "finger", "theta_deg"]
                        + [f"wrist_{i}" for i in range(12)])
        for event in state.events:
            writer.writerow([event["step"], event["finger"],
                             f"{event['theta_deg']:.6f}"]
                            + [f"{v:.9f}" for v in event["wrist"]])


def hover_start(model: kin.HandModel, terrain, q: np.ndarray,
                rng: np.random.Generator | None = None,
                clearance: float = 0.02) -> np.ndarray:
    """A feasible start pose: small random tilt, hovering above the terrain."""
    rot = np.eye(3)
    if rng is not None:
        tilt_axis = np.array([np.cos(a := rng.uniform(0, 2 * np.pi)), np.sin(a), 0.0])
        rot = rodrigues(tilt_axis, rng.uniform(0.0, np.deg2rad(2.0)))
    wrist = np.eye(4)
    wrist[:3, :3] = rot
    _, tips = kin.fk_pose(model, q, rot, np.zeros(3))
    ground = max(float(terrain.support_height(0.0, t[0], t[1], finger=f))
                 for f, t in enumerate(tips))
    lowest = tips[:, 2].min() - model.sensor_radius
    wrist[2, 3] = ground - lowest + clearance
    if rng is not None:
        wrist[2, 3] += rng.uniform(0.0, 0.01)
    return wrist
