"""Quasi-static closed-loop grasp simulator for thin sheets.

The sheet is reduced to an inextensible 1-d strip between the thumb-side
contact and the opposing finger-group contact. Each executed frame, every
contacting finger that is commanded to move inward either sticks (its
available friction covers the critical buckling resistance plus terrain
drag, so its side of the sheet moves with it) or slips (a slip event
fires and the sheet holds still). Material gathered by span reduction
buckles into a circular arc whose length is conserved, and the episode
succeeds once the arc is tall enough to pinch with the fingers closed
onto it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import contact as ct
from . import kinematics as kin
from . import policy as pol
from . import state
from . import synthesis as sy
from .sensor import MAX_DEPTH, contact_force, slip_oracle
from .terrain import Terrain


class SimulationError(RuntimeError):
    """Episode violated a precondition (missing contacts, NaN commands)."""


@dataclass
class SheetModel:
    """Thin-sheet parameters; buckling resistance scales with layer count."""
    bending_stiffness: float = 1e-3     # per-layer (N*m)
    buckling_coeff: float = 0.30        # c in f_crit = c * B * layers / span^2
    friction_finger: float = 0.9
    friction_terrain: float = 0.25
    layers: int = 1
    weight: float = 0.05                # total sheet weight (N)
    thickness: float = 1e-4             # per layer (m)

    def __post_init__(self):
        values = [self.bending_stiffness, self.buckling_coeff, self.friction_finger,
                  self.friction_terrain, self.weight, self.thickness]
        if min(values) <= 0 or self.layers < 1:
            raise ValueError("sheet parameters must be positive")

    def critical_force(self, span: float) -> float:
        """Tangential force needed to start buckling the strip of length span."""
        span = max(span, 1e-3)
        return self.buckling_coeff * self.bending_stiffness * self.layers / span**2

    @property
    def total_thickness(self) -> float:
        return self.layers * self.thickness


@dataclass
class SimConfig:
    elastomer_stiffness: float = 150.0   # N per m of sensor deformation
    initial_target_depth: float = 8e-4   # starting commanded depth (m)
    depth_increment: float = 1e-4        # controller bump per slip event (m)
    frame_budget: int = 100
    fps: float = state.DEFAULT_FPS
    min_closure: float = 5e-5            # commanded inward motion that counts (m)
    pinch_height: float = 3e-3           # min buckle height beyond thickness rule (m)
    pinch_gap_fraction: float = 0.7      # fingers must close to this span fraction
    lost_contact_steps: int = 8
    # actuator rate limits per frame: policy outputs are tracked, not teleported
    max_joint_step: float = 0.02         # rad
    max_rotation_step: float = 0.02      # per 6d component
    max_height_step: float = 0.002       # m
    seed: int = 0


@dataclass
class SimState:
    span: float
    initial_span: float
    buckle_height: float = 0.0
    arc_defect: float = 0.0              # |arc length - initial span| diagnostic
    tactile: np.ndarray = field(default_factory=lambda: np.zeros(4))
    normal_force: np.ndarray = field(default_factory=lambda: np.zeros(4))
    tangential_demand: np.ndarray = field(default_factory=lambda: np.zeros(4))
    slipping: np.ndarray = field(default_factory=lambda: np.zeros(4, dtype=bool))
    slip_probability: np.ndarray = field(default_factory=lambda: np.zeros(4))
    clock: int = 0
    wrist_xy: tuple = (0.0, 0.0)


@dataclass
class EpisodeResult:
    success: bool
    slip_count: int
    frames: int
    failure: str | None = None
    target_depth_trace: list = field(default_factory=list)
    slip_events: int = 0


# -- buckle geometry ------------------------------------------------------------


def buckle_arc(chord: float, arc_length: float) -> tuple[float, float]:
    """Height and subtended half-angle of a circular arc with the given chord
    and conserved arc length. Flat (0, 0) when the chord has not shrunk."""
    if chord >= arc_length - 1e-12:
        return 0.0, 0.0
    ratio = chord / arc_length

    # solve sin(theta)/theta = ratio for theta in (0, pi)
    lo, hi = 1e-9, np.pi - 1e-9
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if np.sin(mid) / mid > ratio:
            lo = mid
        else:
            hi = mid
    theta = 0.5 * (lo + hi)
    radius = arc_length / (2.0 * theta)
    height = radius * (1.0 - np.cos(theta))
    return float(height), float(theta)


def arc_length_of(chord: float, theta: float) -> float:
    """Inverse check used by tests: arc length from chord and half-angle."""
    if theta <= 0:
        return chord
    radius = chord / (2.0 * np.sin(theta))
    return 2.0 * radius * theta


# -- single-frame physics ----------------------------------------------------------


def _tip_depths(model: kin.HandModel, tips: np.ndarray, terrain: Terrain,
                sheet: SheetModel) -> np.ndarray:
    surface = np.array([
        float(terrain.support_height(0.0, tips[f, 0], tips[f, 1], finger=f))
        for f in range(4)
    ]) + sheet.total_thickness
    return state.tactile_depths_from_tips(tips, surface, model.sensor_radius)


def _terrain_drag(sheet: SheetModel, terrain: Terrain, a: np.ndarray,
                  b: np.ndarray) -> float:
    """Sheet-terrain drag per side: weight share times friction, adjusted for
    local slope and relieved when the span straddles a flagged edge."""
    share = 0.25 * sheet.weight
    mid = 0.5 * (a + b)
    if terrain.mode == "field":
        eps = 1e-4
        hx = (terrain.field_height(mid[0] + eps, mid[1])
              - terrain.field_height(mid[0] - eps, mid[1])) / (2 * eps)
        hy = (terrain.field_height(mid[0], mid[1] + eps)
              - terrain.field_height(mid[0], mid[1] - eps)) / (2 * eps)
        slope = float(np.hypot(hx, hy))
        drag = sheet.friction_terrain * share * (1.0 + slope) + share * slope
        if terrain.edge_x is not None and (a[0] - terrain.edge_x) * (b[0] - terrain.edge_x) < 0:
            drag *= 0.5   # partial void under the sheet at the edge
        return drag
    return sheet.friction_terrain * share


def step(model: kin.HandModel, sim: SimState, sheet: SheetModel, terrain: Terrain,
         commanded: np.ndarray, previous: np.ndarray,
         elastomer_stiffness: float, min_closure: float = 5e-5):
    """Advance the quasi-static sheet state by one commanded frame.

    Returns (new_state, slip_fingers): per contacting finger commanded to
    move inward, exactly one of {the sheet side moves, a slip event fires}.
    """
    if not np.isfinite(commanded).all():
        raise SimulationError("commanded frame contains NaN")
    gamma_now = state.gamma_from_frames(commanded)
    gamma_prev = state.gamma_from_frames(previous)
    wrist_xy = sim.wrist_xy
    _, tips_now = kin.fk_arrays(model, gamma_now, wrist_xy)
    _, tips_prev = kin.fk_arrays(model, gamma_prev, wrist_xy)
    tips_now = tips_now[0]
    tips_prev = tips_prev[0]

    depths = _tip_depths(model, tips_now, terrain, sheet)
    forces = contact_force(depths, elastomer_stiffness)

    # opposition axis: thumb versus the centroid of the other three
    group_now = tips_now[1:].mean(axis=0)
    axis = group_now[:2] - tips_now[0, :2]
    span_direction = axis / max(np.linalg.norm(axis), 1e-9)

    inward = np.zeros(4)
    motion = (tips_now - tips_prev)[:, :2]
    inward[0] = float(motion[0] @ span_direction)
    for f in (1, 2, 3):
        inward[f] = float(motion[f] @ -span_direction)

    demand = sheet.critical_force(sim.span) + _terrain_drag(
        sheet, terrain, tips_now[0], group_now)

    slip_fingers = []
    sticking = np.zeros(4, dtype=bool)
    probs = np.zeros(4)
    for f in range(4):
        moving = inward[f] > min_closure and depths[f] > 1e-6
        if not moving:
            continue
        slipped, prob = slip_oracle(demand, forces[f], sheet.friction_finger)
        probs[f] = prob
        if slipped:
            slip_fingers.append(f)
        else:
            sticking[f] = True

    reduction = 0.0
    if sticking[0]:
        reduction += inward[0]
    group_stick = [f for f in (1, 2, 3) if sticking[f]]
    if group_stick:
        reduction += float(np.mean([inward[f] for f in group_stick]))

    new_span = max(sim.span - reduction, 2.0 * model.sensor_radius)
    height, theta = buckle_arc(new_span, sim.initial_span)
    defect = abs(arc_length_of(new_span, theta) - sim.initial_span) if theta > 0 else 0.0

    slipping = np.zeros(4, dtype=bool)
    slipping[slip_fingers] = True
    new_state = SimState(
        span=new_span,
        initial_span=sim.initial_span,
        buckle_height=height,
        arc_defect=defect,
        tactile=depths,
        normal_force=forces,
        tangential_demand=np.where(depths > 1e-6, demand, 0.0),
        slipping=slipping,
        slip_probability=probs,
        clock=sim.clock + 1,
        wrist_xy=wrist_xy,
    )
    return new_state, slip_fingers


def force_controller(target_depth: np.ndarray, slip_fingers,
                     increment: float) -> np.ndarray:
    """Raise the commanded deformation depth of each slipping finger by one
    increment, capped at the perception-layer maximum."""
    out = np.asarray(target_depth, dtype=float).copy()
    for f in slip_fingers:
        out[f] = min(out[f] + increment, MAX_DEPTH)
    return out


# -- closed-loop episode -------------------------------------------------------------


def _frame_from_pose(model: kin.HandModel, q, rot6, wrist_z, wrist_xy,
                     terrain: Terrain, sheet: SheetModel) -> np.ndarray:
    gamma = kin.Gamma(np.asarray(q)[None, :], np.asarray(rot6)[None, :],
                      np.atleast_1d(wrist_z))
    positions, tips = kin.fk_arrays(model, gamma, wrist_xy)
    frame = np.zeros(state.STATE_DIM)
    frame[state.SLICES["joint_positions"]] = positions[0].reshape(-1)
    frame[state.SLICES["joint_angles"]] = np.asarray(q)
    frame[state.SLICES["wrist_rotation6d"]] = np.asarray(rot6)
    frame[state.SLICES["wrist_height"]] = wrist_z
    frame[state.SLICES["tactile_depths"]] = _tip_depths(model, tips[0], terrain, sheet)
    return frame


def run_episode(model: kin.HandModel, policy: pol.DiffusionModel, terrain: Terrain,
                sheet: SheetModel, config: SimConfig,
                seed: int = 0) -> EpisodeResult:
    """Contact establishment, then the policy loop with slip-triggered force
    control, until pinch success or the frame budget runs out."""
    rng = np.random.default_rng(seed)
    claw = sy.grasp_reference_pose(model)
    try:
        start_wrist = ct.hover_start(model, terrain, claw.q[0], rng)
        contact_state = ct.establish_contact(model, terrain, claw.q[0], start_wrist)
    except ct.ContactError as exc:
        return EpisodeResult(False, 0, 0, failure=f"contact: {exc}")

    wrist = contact_state.wrist
    wrist_xy = (float(wrist[0, 3]), float(wrist[1, 3]))
    rot6 = np.concatenate([wrist[0, :3], wrist[1, :3]])   # first two rows
    # press from bare touch to the initial commanded deformation depth
    wrist_z = float(wrist[2, 3]) - config.initial_target_depth
    q = claw.q[0].copy()

    frame = _frame_from_pose(model, q, rot6, wrist_z, wrist_xy, terrain, sheet)
    prefix = np.tile(frame, (policy.config.n_prefix, 1))

    _, tips = kin.fk_arrays(model, kin.Gamma(q[None, :], rot6[None, :],
                                             np.array([wrist_z])), wrist_xy)
    span0 = float(np.linalg.norm(tips[0, 1:, :2].mean(axis=0) - tips[0, 0, :2]))
    sim = SimState(span=span0, initial_span=span0,
                   tactile=frame[state.SLICES["tactile_depths"]], wrist_xy=wrist_xy)

    target_depth = np.full(4, config.initial_target_depth)
    lim = model.joint_limits
    slip_total = 0
    executed = 0
    no_contact_run = 0
    depth_trace = [target_depth.copy()]
    previous = frame

    while executed < config.frame_budget:
        phase = executed / max(config.frame_budget, 1)
        plan = pol.infer(policy, prefix, phase, target_depth, rng)
        for k in range(plan.shape[0]):
            if executed >= config.frame_budget:
                break
            commanded = plan[k].astype(np.float64).copy()
            if not np.isfinite(commanded).all():
                return EpisodeResult(False, slip_total, executed, failure="policy NaN")
            # rate-limit toward the previous executed pose, clip to limits
            for name, rate in (("joint_angles", config.max_joint_step),
                               ("wrist_rotation6d", config.max_rotation_step),
                               ("wrist_height", config.max_height_step)):
                sl = state.SLICES[name]
                delta = np.clip(commanded[sl] - previous[sl], -rate, rate)
                commanded[sl] = previous[sl] + delta
            sl_q = state.SLICES["joint_angles"]
            commanded[sl_q] = np.clip(commanded[sl_q], lim[:, 0], lim[:, 1])
            gamma_cmd = state.gamma_from_frames(commanded)
            p_cmd, _ = kin.fk_arrays(model, gamma_cmd, wrist_xy)
            commanded[state.SLICES["joint_positions"]] = p_cmd[0].reshape(-1)

            sim, slips = step(model, sim, sheet, terrain, commanded, previous,
                              config.elastomer_stiffness, config.min_closure)
            slip_total += len(slips)
            if slips:
                target_depth = force_controller(target_depth, slips,
                                                config.depth_increment)
                depth_trace.append(target_depth.copy())
            executed += 1

            # executed state: commanded kinematics with simulated tactile
            # depths; rate fields rebuilt from executed positions
            actual = commanded.copy()
            actual[state.SLICES["tactile_depths"]] = sim.tactile
            actual[state.SLICES["joint_velocities"]] = (
                (actual[state.SLICES["joint_positions"]]
                 - previous[state.SLICES["joint_positions"]]) * config.fps)
            actual[state.SLICES["joint_angle_rates"]] = (
                (actual[state.SLICES["joint_angles"]]
                 - previous[state.SLICES["joint_angles"]]) * config.fps)
            actual[state.SLICES["wrist_rotation_rate"]] = (
                (actual[state.SLICES["wrist_rotation6d"]]
                 - previous[state.SLICES["wrist_rotation6d"]]) * config.fps)
            actual[state.SLICES["wrist_height_rate"]] = (
                (actual[state.SLICES["wrist_height"]]
                 - previous[state.SLICES["wrist_height"]]) * config.fps)
            prefix = np.concatenate([prefix[1:], actual[None, :]])
            previous = actual

            thumb_off = sim.tactile[0] <= 1e-9
            group_off = (sim.tactile[1:] <= 1e-9).all()
            no_contact_run = no_contact_run + 1 if (thumb_off or group_off) else 0
            if no_contact_run >= config.lost_contact_steps:
                return EpisodeResult(False, slip_total, executed,
                                     failure="lost contact",
                                     target_depth_trace=depth_trace,
                                     slip_events=slip_total)

            tall_enough = sim.buckle_height >= max(1.5 * sheet.total_thickness,
                                                   config.pinch_height)
            closed_enough = sim.span <= config.pinch_gap_fraction * sim.initial_span
            if tall_enough and closed_enough:
                return EpisodeResult(True, slip_total, executed,
                                     target_depth_trace=depth_trace,
                                     slip_events=slip_total)

    return EpisodeResult(False, slip_total, executed, failure="budget",
                         target_depth_trace=depth_trace, slip_events=slip_total)


# -- experiments -----------------------------------------------------------------------


def stiffness_sweep(model: kin.HandModel, policy: pol.DiffusionModel,
                    config: SimConfig, layers=(1, 3, 5, 7), seeds=20,
                    terrain_name: str = "plane",
                    sheet_base: SheetModel | None = None) -> list[dict]:
    """Success rate and mean slip count per layer multiplier."""
    base = sheet_base or SheetModel()
    rows = []
    for n_layers in layers:
        sheet = SheetModel(**{**asdict(base), "layers": n_layers})
        results = []
        for s in range(seeds):
            terrain = Terrain.preset_field(terrain_name, seed=s)
            results.append(run_episode(model, policy, terrain, sheet, config,
                                       seed=1000 * n_layers + s))
        rows.append({
            "layers": n_layers,
            "success_rate": float(np.mean([r.success for r in results])),
            "mean_slips": float(np.mean([r.slip_count for r in results])),
            "episodes": len(results),
        })
    return rows


def calibrate_buckling(model: kin.HandModel, policy: pol.DiffusionModel,
                       config: SimConfig, seeds: int = 10,
                       candidates=(1.2, 0.9, 0.6, 0.45, 0.3, 0.2, 0.1),
                       target_rate: float = 0.9,
                       sheet_base: SheetModel | None = None) -> dict:
    """Pick the largest buckling coefficient whose 1-layer flat-terrain
    success rate meets the target; returns the value plus the sweep log."""
    base = sheet_base or SheetModel()
    log = []
    chosen = None
    for c in sorted(candidates, reverse=True):
        sheet = SheetModel(**{**asdict(base), "buckling_coeff": c, "layers": 1})
        wins = 0
        for s in range(seeds):
            terrain = Terrain.preset_field("plane", seed=s)
            result = run_episode(model, policy, terrain, sheet, config, seed=s)
            wins += int(result.success)
        rate = wins / seeds
        log.append({"coefficient": c, "success_rate": rate})
        if chosen is None and rate >= target_rate:
            chosen = c
            break
    if chosen is None:
        chosen = min(candidates)
    return {"buckling_coeff": chosen, "target_rate": target_rate, "sweep": log}


def evaluate(model: kin.HandModel, policy: pol.DiffusionModel, config: SimConfig,
             terrains=("plane", "slope", "book", "random"),
             sheets: dict | None = None, seeds: int = 20) -> list[dict]:
    """Full experiment matrix: per (terrain, sheet, seed) episode rows."""
    if sheets is None:
        sheets = {"1-layer": SheetModel(layers=1), "3-layer": SheetModel(layers=3)}
    rows = []
    for terrain_name in terrains:
        for sheet_name, sheet in sheets.items():
            for s in range(seeds):
                terrain = Terrain.preset_field(terrain_name, seed=s)
                result = run_episode(model, policy, terrain, sheet, config,
                                     seed=777 + s)
                rows.append({
                    "terrain": terrain_name,
                    "sheet": sheet_name,
                    "seed": s,
                    "success": int(result.success),
                    "slip_count": result.slip_count,
                    "frames": result.frames,
                })
    return rows
