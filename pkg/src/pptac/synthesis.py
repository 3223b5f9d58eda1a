"""Grasp-motion dataset synthesis.

Fingertip target trajectories come from a parametric pinch template (four
planar paths converging toward the palm-projected centroid) projected
onto the terrain, with a per-episode target deformation depth lowering
the waypoints below tangency. A joint trajectory optimization over all
frames then solves for hand joint angles plus wrist rotation/height, and
accepted episodes are serialized as 152-dim state frames.
"""

from __future__ import annotations

import hashlib
import json
import multiprocessing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from . import kinematics as kin
from . import state
from .autodiff import Tensor
from .sensor import MAX_DEPTH
from .terrain import Terrain

N_FRAMES = 100


class SynthesisError(RuntimeError):
    """Dataset synthesis aborted (divergence or acceptance collapse)."""


# -- reference pose and template ----------------------------------------------


# flexion per chain, thumb first: shallow enough that the fingertips stay
# on their own side of the palm (a deep curl would swing them across the
# centre and inverts the pinch axis) and the distal joints clear the terrain
REFERENCE_CURL = {
    "thumb": (0.13, 0.13, 0.09),
    "default": (0.10, 0.10, 0.07),
}


def grasp_reference_pose(model: kin.HandModel) -> kin.Gamma:
    """Lightly-curled claw with every fingertip resting on the z = 0 plane."""
    q = np.zeros(16)
    for f, finger in enumerate(model.fingers):
        curl = REFERENCE_CURL.get(finger.name, REFERENCE_CURL["default"])
        flexion_rank = 0
        for j, joint in enumerate(finger.joints):
            if abs(joint.axis[2]) > 0.5:      # abduction joint stays neutral
                continue
            q[4 * f + j] = curl[min(flexion_rank, 2)]
            flexion_rank += 1
    q = model.clip_to_limits(q)
    gamma = kin.Gamma(q[None, :], kin.IDENTITY_ROT6[None, :], np.zeros(1))
    _, tips = kin.fk_arrays(model, gamma)
    wrist_z = model.sensor_radius - tips[0, :, 2].min()
    return kin.Gamma(q[None, :], kin.IDENTITY_ROT6[None, :], np.array([wrist_z]))


def _smooth_ramp(n: int, start: float, stop: float) -> np.ndarray:
    t = np.clip((np.arange(n) - start) / max(stop - start, 1.0), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


@dataclass
class FingertipTargets:
    positions: np.ndarray      # (N, 4, 3) world targets for the sensor centers
    target_depths: np.ndarray  # (N, 4) commanded deformation depth (m)


def pinch_template_xy(model: kin.HandModel, reference: kin.Gamma,
                      rng: np.random.Generator | None = None,
                      closure_fraction: float = 0.42) -> np.ndarray:
    """Planar (x, y) paths of the four fingertips: hold briefly, then slide
    along the opposition axis, thumb and finger group closing on each other.

    The non-thumb fingers translate as a group so their mutual spacing is
    preserved (converging on a single point would clash the tip spheres).
    Per-finger scale and phase jitter (plus/minus 20 percent) diversifies
    the dataset.
    """
    _, tips = kin.fk_arrays(model, reference)
    start = tips[0, :, :2]
    opposition = start[1:].mean(axis=0) - start[0]   # thumb -> finger-group centroid

    if rng is None:
        scales = np.full(4, closure_fraction)
        phases = np.zeros(4)
    else:
        scales = closure_fraction * rng.uniform(0.8, 1.2, size=4)
        phases = rng.uniform(-10.0, 10.0, size=4)

    xy = np.empty((N_FRAMES, 4, 2))
    for f in range(4):
        ramp = _smooth_ramp(N_FRAMES, 15.0 + phases[f], 85.0 + phases[f])
        stroke = 0.5 * scales[f] * ramp
        direction = opposition if f == 0 else -opposition
        xy[:, f, :] = start[f] + stroke[:, None] * direction
    return xy


def make_targets(template_xy: np.ndarray, terrain: Terrain,
                 target_depths: np.ndarray, model: kin.HandModel) -> FingertipTargets:
    """Project the planar template onto the terrain: the sensor-center height
    is support + radius - target depth, so depth 0 means bare tangency."""
    n = template_xy.shape[0]
    target_depths = np.broadcast_to(np.asarray(target_depths, dtype=float), (n, 4)).copy()
    if target_depths.min() < 0 or target_depths.max() > MAX_DEPTH:
        raise ValueError("target deformation depths must lie in [0, 2 mm]")
    s_values = np.linspace(0.0, 100.0, n)
    positions = np.empty((n, 4, 3))
    for f in range(4):
        x, y = template_xy[:, f, 0], template_xy[:, f, 1]
        support = terrain.project(f, s_values, x, y)
        positions[:, f, 0] = x
        positions[:, f, 1] = y
        positions[:, f, 2] = support + model.sensor_radius - target_depths[:, f]
    return FingertipTargets(positions, target_depths)


# -- trajectory optimization ------------------------------------------------------


# Characteristic length (m) that converts angle-like deviations (rad, 6d rows)
# into end-effector meters, keeping the three loss terms commensurate. Without
# it the pose regularizer (rad^2) swamps the mm^2-scale target term.
ANGLE_TO_METERS = 0.05

_GAMMA_SCALE = np.concatenate([
    np.full(16, ANGLE_TO_METERS),   # joint angles
    np.full(6, ANGLE_TO_METERS),    # wrist 6d rotation rows
    np.ones(1),                     # wrist height, already meters
])


@dataclass
class OptimizationProblem:
    reference: kin.Gamma                  # gamma-bar: pose regularization target
    weight_targets: float = 1.0
    weight_reference: float = 0.01
    weight_wrist: float = 0.1
    iterations: int = 300
    learning_rate: float = 1.0
    optimizer: str = "sgd"
    tolerance: float = 1e-10

    def __post_init__(self):
        if min(self.weight_targets, self.weight_reference, self.weight_wrist) <= 0:
            raise ValueError("loss weights must be positive")


@dataclass
class TrajectorySample:
    gamma: kin.Gamma
    terrain_id: str
    target_depths: np.ndarray
    losses: dict
    rms_tip_error: float
    accepted: bool = False
    reject_reason: str | None = None
    terrain: object = None


def optimize(problem: OptimizationProblem, targets: FingertipTargets,
             model: kin.HandModel) -> TrajectorySample:
    """Jointly optimize all frames of gamma against the fingertip targets.

    Gradient descent on target + pose-regularization + wrist-motion terms;
    returns the best-loss iterate. Joint angles are clipped to their limits
    after every step.
    """
    return optimize_batch([problem], [targets], model)[0]


def optimize_batch(problems: list[OptimizationProblem], targets_list: list[FingertipTargets],
                   model: kin.HandModel) -> list[TrajectorySample]:
    """Optimize several independent episodes through one stacked graph.

    The loss separates per episode, so gradients match per-episode runs;
    stacking only amortizes graph overhead. Shared iteration budget and
    optimizer settings come from the first problem; best-loss iterates are
    tracked per episode.
    """
    first = problems[0]
    n_eps = len(problems)
    n = targets_list[0].positions.shape[0]
    gamma0 = np.concatenate([
        np.tile(p.reference.to_flat()[0], (n, 1)) if len(p.reference) == 1
        else p.reference.to_flat()
        for p in problems
    ])
    params = ad.parameter(gamma0.copy())
    scale = Tensor(_GAMMA_SCALE)
    ref = Tensor(gamma0 * _GAMMA_SCALE)
    wrist_ref = Tensor(gamma0[:, 16:23] * _GAMMA_SCALE[16:23])
    wanted_np = np.concatenate([t.positions for t in targets_list])
    wanted = Tensor(wanted_np)
    weights = np.array([[p.weight_targets, p.weight_reference, p.weight_wrist]
                        for p in problems])
    if not np.allclose(weights, weights[0]):
        raise ValueError("batched episodes must share loss weights")
    w_tip, w_ref, w_wrist = weights[0]

    if first.optimizer == "sgd":
        opt = ad.SGD([params], lr=first.learning_rate)
    elif first.optimizer == "adam":
        opt = ad.Adam([params], lr=first.learning_rate)
    else:
        raise ValueError(f"unknown optimizer '{first.optimizer}'")

    lim = model.joint_limits
    best_loss = np.full(n_eps, np.inf)
    best = gamma0.copy()
    best_terms = [{} for _ in range(n_eps)]
    trace = []
    for it in range(first.iterations):
        _, tips = kin.fk_gamma(model, params)
        scaled = params * scale
        # factor n_eps turns the stacked means into a sum of per-episode
        # losses, so gradients match unbatched runs for SGD as well
        loss = float(n_eps) * (w_tip * ad.mse(tips, wanted)
                               + w_ref * ad.mse(scaled, ref)
                               + w_wrist * ad.mse(scaled[:, 16:23], wrist_ref))
        value = loss.item()
        if not np.isfinite(value):
            raise SynthesisError(f"optimization diverged at iteration {it}; "
                                 f"last losses {trace[-5:]}")
        trace.append(value)

        # per-episode bookkeeping on forward values only
        tip_term = w_tip * ((tips.data - wanted_np) ** 2).reshape(n_eps, -1).mean(axis=1)
        ref_term = w_ref * ((params.data * _GAMMA_SCALE - ref.data) ** 2).reshape(n_eps, -1).mean(axis=1)
        wr_term = w_wrist * ((params.data[:, 16:23] * _GAMMA_SCALE[16:23]
                              - wrist_ref.data) ** 2).reshape(n_eps, -1).mean(axis=1)
        totals = tip_term + ref_term + wr_term
        improved = totals < best_loss
        if improved.any():
            best_loss = np.where(improved, totals, best_loss)
            view = best.reshape(n_eps, n, kin.GAMMA_DIM)
            cur = params.data.reshape(n_eps, n, kin.GAMMA_DIM)
            view[improved] = cur[improved]
            for b in np.nonzero(improved)[0]:
                best_terms[b] = {
                    "targets": float(tip_term[b]),
                    "reference": float(ref_term[b]),
                    "wrist": float(wr_term[b]),
                    "total": float(totals[b]),
                }
        if (best_loss < first.tolerance).all():
            break
        ad.backward(loss)
        opt.step()
        params.data[:, :16] = np.clip(params.data[:, :16], lim[:, 0], lim[:, 1])

    samples = []
    for b in range(n_eps):
        gamma = kin.Gamma.from_flat(best.reshape(n_eps, n, kin.GAMMA_DIM)[b])
        _, tips = kin.fk_arrays(model, gamma)
        rms = float(np.sqrt(np.mean(np.sum((tips - targets_list[b].positions) ** 2, axis=-1))))
        samples.append(TrajectorySample(
            gamma=gamma, terrain_id="", target_depths=targets_list[b].target_depths,
            losses=best_terms[b], rms_tip_error=rms))
    return samples


# -- dataset synthesis -------------------------------------------------------------


@dataclass
class SynthesisConfig:
    n_samples: int = 10
    seed: int = 0
    fps: float = state.DEFAULT_FPS
    depth_range: tuple = (0.0002, 0.0015)   # per-episode target depth draw (m)
    accept_rms: float = 0.002               # tip tracking acceptance bound (m)
    iterations: int = 150
    learning_rate: float = 3e-2
    optimizer: str = "adam"
    threads: int = 1
    batch_size: int = 10                    # episodes stacked per graph
    min_attempts_for_abort: int = 20
    hand_model_path: str | None = None

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in self.__dict__.items()}


def _prepare_episode(config: SynthesisConfig, model: kin.HandModel, seed_entropy):
    """All random draws for one attempt: terrain, depths, jittered template."""
    rng = np.random.default_rng(seed_entropy)
    terrain = Terrain.generate(int(rng.integers(0, 2**31 - 1)))
    # constant over the episode, drawn independently per finger so the
    # policy sees mixed target-depth vectors like the force controller emits
    depth = rng.uniform(*config.depth_range, size=4)

    reference = grasp_reference_pose(model)
    # hover the reference claw near the terrain's typical height, biased
    # slightly upward so the regularizer favours joint clearance
    reference.wrist_z[:] += float(np.mean(terrain.control_heights)) + 0.002
    template = pinch_template_xy(model, reference, rng)
    targets = make_targets(template, terrain, depth, model)
    problem = OptimizationProblem(
        reference=reference,
        iterations=config.iterations,
        learning_rate=config.learning_rate,
        optimizer=config.optimizer,
    )
    return problem, targets, terrain


def _filter_sample(config: SynthesisConfig, model: kin.HandModel,
                   sample: TrajectorySample, terrain: Terrain) -> TrajectorySample:
    sample.terrain_id = terrain.terrain_id
    sample.terrain = terrain
    ok, reason = kin.collision_filter(model, sample.gamma, terrain)
    if not ok:
        sample.reject_reason = f"collision: {reason}"
    elif sample.rms_tip_error > config.accept_rms:
        sample.reject_reason = f"tracking rms {sample.rms_tip_error * 1e3:.2f} mm"
    else:
        sample.accepted = True
    return sample


def synthesize_episode(config: SynthesisConfig, seed_entropy) -> TrajectorySample:
    """One terrain draw -> template -> optimize -> collision filter."""
    model = kin.HandModel.load(config.hand_model_path)
    problem, targets, terrain = _prepare_episode(config, model, seed_entropy)
    sample = optimize(problem, targets, model)
    return _filter_sample(config, model, sample, terrain)


def _batch_worker(args):
    config, start_index, entropies = args
    model = kin.HandModel.load(config.hand_model_path)
    prepared = [_prepare_episode(config, model, e) for e in entropies]
    samples = optimize_batch([p for p, _, _ in prepared],
                             [t for _, t, _ in prepared], model)
    out = []
    for i, (sample, (_, _, terrain)) in enumerate(zip(samples, prepared)):
        out.append((start_index + i, _filter_sample(config, model, sample, terrain)))
    return out


def synthesize_dataset(config: SynthesisConfig, out_path, binary: bool = False,
                       config_hash: str | None = None) -> dict:
    """Generate episodes until ``n_samples`` are accepted; write the dataset.

    Deterministic for a fixed config: attempts draw from pre-spawned seed
    streams and are consumed in attempt order regardless of worker count.
    Aborts when the running acceptance rate collapses below 10 percent.
    """
    state.assert_layout()
    model = kin.HandModel.load(config.hand_model_path)
    accepted, attempts, rejects = [], 0, []
    seed_seq = np.random.SeedSequence(config.seed)

    pool = None
    if config.threads > 1:
        pool = multiprocessing.Pool(config.threads)
    try:
        while len(accepted) < config.n_samples:
            remaining = config.n_samples - len(accepted)
            n_batches = max(1, -(-remaining // config.batch_size))
            if pool is not None:
                n_batches = max(n_batches, config.threads)
            jobs = []
            for _ in range(n_batches):
                entropies = seed_seq.spawn(config.batch_size)
                jobs.append((config, attempts + len(jobs) * config.batch_size, entropies))
            if pool is not None:
                chunks = pool.map(_batch_worker, jobs)
            else:
                chunks = [_batch_worker(j) for j in jobs]
            results = sorted((item for chunk in chunks for item in chunk),
                             key=lambda kv: kv[0])
            for _, sample in results:
                attempts += 1
                if sample.accepted and len(accepted) < config.n_samples:
                    accepted.append(sample)
                elif not sample.accepted:
                    rejects.append(sample.reject_reason)
            rate = len(accepted) / attempts
            if attempts >= config.min_attempts_for_abort and rate < 0.10:
                raise SynthesisError(
                    f"acceptance rate {rate:.1%} after {attempts} attempts; "
                    f"recent rejections: {rejects[-5:]}")
    finally:
        if pool is not None:
            pool.close()
            pool.join()

    episodes = []
    for sample in accepted:
        frames = state.frames_from_gamma(model, sample.gamma, sample.terrain,
                                         fps=config.fps)
        state.validate_frames(frames, "synthesized episode")
        episodes.append({
            "terrain_id": sample.terrain_id,
            "target_depths": sample.target_depths[0].tolist(),
            "rms_tip_error": sample.rms_tip_error,
            "frames": frames,
        })

    stats = {
        "attempted": attempts,
        "accepted": len(accepted),
        "rejected": attempts - len(accepted),
        "config_hash": config_hash or "",
        "seed": config.seed,
    }
    if binary:
        write_dataset_binary(out_path, episodes, stats)
    else:
        write_dataset_ndjson(out_path, episodes, stats)
    return stats


# -- dataset files ------------------------------------------------------------------


def write_dataset_ndjson(path, episodes: list, stats: dict):
    """Newline-delimited records: one header record, then one per episode."""
    with open(path, "w") as fh:
        header = {
            "kind": "header",
            "frame_dim": state.STATE_DIM,
            "fields": [[name, n] for name, n in state.FIELDS],
            **stats,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i, ep in enumerate(episodes):
            record = {
                "kind": "episode",
                "index": i,
                "terrain_id": ep["terrain_id"],
                "target_depths": ep["target_depths"],
                "rms_tip_error": ep["rms_tip_error"],
                "frames": np.asarray(ep["frames"], dtype=np.float32).tolist(),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def write_dataset_binary(path, episodes: list, stats: dict):
    """Packed variant using the checkpoint container."""
    frames = np.stack([ep["frames"] for ep in episodes]).astype(np.float32)
    depths = np.stack([ep["target_depths"] for ep in episodes]).astype(np.float32)
    meta = dict(stats)
    meta["terrain_ids"] = [ep["terrain_id"] for ep in episodes]
    meta["frame_dim"] = state.STATE_DIM
    checkpoint.save(path, {"frames": frames, "target_depths": depths}, meta=meta)


def load_dataset(path) -> tuple[np.ndarray, np.ndarray, dict]:
    """Read either dataset flavour -> (frames (E,N,152), depths (E,4), meta)."""
    path = Path(path)
    head = path.open("rb").read(4)
    if head == checkpoint.MAGIC:
        arrays, meta = checkpoint.load(path)
        frames, depths = arrays["frames"], arrays["target_depths"]
    else:
        episodes, depths_list, meta = [], [], {}
        with open(path) as fh:
            for line in fh:
                record = json.loads(line)
                if record["kind"] == "header":
                    meta = record
                else:
                    episodes.append(np.asarray(record["frames"], dtype=np.float32))
                    depths_list.append(record["target_depths"])
        frames = np.stack(episodes)
        depths = np.asarray(depths_list, dtype=np.float32)
    state.validate_frames(frames, "dataset")
    return frames, depths, meta


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
