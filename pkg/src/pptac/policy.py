"""Diffusion policy over 152-dim state frames.

An encoder-only transformer consumes one conditioning token (diffusion
step, episode phase, target tactile depth, each through its own 3-layer
MLP) plus the prefix frames plus the noised future frames, and predicts
the clean future frames directly. Training draws a uniform diffusion
step per sample; the loss is reconstruction plus a kinematic-consistency
term that runs the predicted joint angles through forward kinematics and
compares against the predicted joint positions.

Inference starts from pure noise and alternates predict / re-noise down
a fixed ladder of diffusion levels, ten model evaluations per call.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from . import kinematics as kin
from . import state
from .autodiff import Tensor
from .sensor import MAX_DEPTH


class PolicyError(RuntimeError):
    """Training or inference violated a contract (shapes, NaN loss)."""


@dataclass
class DiffusionConfig:
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    n_prefix: int = 5
    n_pred: int = 5
    inference_steps: int = 10
    consistency_weight: float = 1.0
    width: int = 128
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    dtype: str = "float32"
    # training
    batch_size: int = 32
    learning_rate: float = 1e-3
    train_steps: int = 2000
    checkpoint_every: int = 1000
    holdout_fraction: float = 0.1
    seed: int = 0
    # prefix disturbance augmentation (mutually exclusive draw per sample);
    # noise is specified in physical units so coverage does not collapse on
    # low-variance state dimensions
    disturb_noise_prob: float = 0.3
    disturb_ramp_prob: float = 0.3
    disturb_freeze_prob: float = 0.3
    disturb_angle_std: float = 0.02     # rad, joint angles and 6d rotation rows
    disturb_height_std: float = 0.002   # m, wrist height
    disturb_ramp_gain: float = 3.0      # growing-noise branch peaks at gain x std

    def __post_init__(self):
        if self.n_prefix < 1 or self.n_pred < 1:
            raise ValueError("prefix and prediction horizons must be >= 1")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("beta schedule must be strictly increasing in (0, 1)")

    @classmethod
    def desk(cls, **overrides) -> "DiffusionConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "DiffusionConfig":
        values = dict(width=512, depth=4, heads=4, train_steps=600_000)
        values.update(overrides)
        return cls(**values)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def tokens(self) -> int:
        return 1 + self.n_prefix + self.n_pred


class NoiseSchedule:
    """Linear-beta DDPM schedule with alpha_bar[0] = 1."""

    def __init__(self, config: DiffusionConfig):
        betas = np.linspace(config.beta_start, config.beta_end, config.diffusion_steps)
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        self.max_t = config.diffusion_steps
        if not (np.diff(self.alpha_bar) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")

    def mix(self, t) -> tuple[np.ndarray, np.ndarray]:
        t = np.asarray(t)
        if (t < 0).any() or (t > self.max_t).any():
            raise PolicyError(f"diffusion step outside [0, {self.max_t}]")
        ab = self.alpha_bar[t]
        return np.sqrt(ab), np.sqrt(1.0 - ab)


def forward_diffuse(x0: np.ndarray, t, rng: np.random.Generator,
                    schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps with eps ~ N(0, I)."""
    signal, noise = schedule.mix(t)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    shape = (-1,) + (1,) * (x0.ndim - 1)
    return (np.asarray(signal).reshape(shape) * x0
            + np.asarray(noise).reshape(shape) * eps).astype(x0.dtype)


# -- model ---------------------------------------------------------------------


def _linear_init(rng, n_in, n_out, dtype):
    scale = np.sqrt(2.0 / (n_in + n_out))
    return (rng.standard_normal((n_in, n_out)) * scale).astype(dtype)


def init_parameters(config: DiffusionConfig, rng: np.random.Generator) -> dict:
    d = state.STATE_DIM
    w = config.width
    dt = config.np_dtype
    params = {}

    def linear(name, n_in, n_out):
        params[f"{name}.w"] = ad.Tensor(_linear_init(rng, n_in, n_out, dt), requires_grad=True)
        params[f"{name}.b"] = ad.Tensor(np.zeros(n_out, dtype=dt), requires_grad=True)

    for name, n_in in (("cond_t", 1), ("cond_phase", 1), ("cond_depth", 4)):
        linear(f"{name}.l0", n_in, w)
        linear(f"{name}.l1", w, w)
        linear(f"{name}.l2", w, d)

    linear("proj_in", d, w)
    params["pos"] = ad.Tensor((rng.standard_normal((config.tokens, w)) * 0.02).astype(dt),
                              requires_grad=True)
    for layer in range(config.depth):
        p = f"layer{layer}"
        for ln in ("ln1", "ln2"):
            params[f"{p}.{ln}.g"] = ad.Tensor(np.ones(w, dtype=dt), requires_grad=True)
            params[f"{p}.{ln}.b"] = ad.Tensor(np.zeros(w, dtype=dt), requires_grad=True)
        linear(f"{p}.qkv", w, 3 * w)
        linear(f"{p}.attn_out", w, w)
        linear(f"{p}.mlp0", w, config.mlp_ratio * w)
        linear(f"{p}.mlp1", config.mlp_ratio * w, w)
    params["ln_f.g"] = ad.Tensor(np.ones(w, dtype=dt), requires_grad=True)
    params["ln_f.b"] = ad.Tensor(np.zeros(w, dtype=dt), requires_grad=True)
    linear("proj_out", w, d)
    return params


@dataclass
class DiffusionModel:
    config: DiffusionConfig
    params: dict
    norm_mean: np.ndarray
    norm_std: np.ndarray
    schedule: NoiseSchedule = field(init=False)
    eval_count: int = field(default=0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.schedule = NoiseSchedule(self.config)
        state.assert_layout()

    # normalization -------------------------------------------------------

    def normalize(self, frames: np.ndarray) -> np.ndarray:
        return ((frames - self.norm_mean) / self.norm_std).astype(self.config.np_dtype)

    def unnormalize(self, frames: np.ndarray) -> np.ndarray:
        return frames.astype(np.float64) * self.norm_std + self.norm_mean

    def save(self, path, extra_meta: dict | None = None):
        arrays = {k: v.data for k, v in self.params.items()}
        arrays["norm.mean"] = self.norm_mean
        arrays["norm.std"] = self.norm_std
        meta = {"config": asdict(self.config), **self.meta, **(extra_meta or {})}
        checkpoint.save(path, arrays, meta=meta)

    @classmethod
    def load(cls, path) -> "DiffusionModel":
        arrays, meta = checkpoint.load(path)
        config = DiffusionConfig(**meta.pop("config"))
        mean = arrays.pop("norm.mean")
        std = arrays.pop("norm.std")
        params = {k: ad.Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return cls(config=config, params=params, norm_mean=mean, norm_std=std, meta=meta)


def _mlp3(params: dict, name: str, x: Tensor) -> Tensor:
    h = ad.tanh(ad.matmul(x, params[f"{name}.l0.w"]) + params[f"{name}.l0.b"])
    h = ad.tanh(ad.matmul(h, params[f"{name}.l1.w"]) + params[f"{name}.l1.b"])
    return ad.matmul(h, params[f"{name}.l2.w"]) + params[f"{name}.l2.b"]


def _attention(params: dict, prefix: str, h: Tensor, config: DiffusionConfig) -> Tensor:
    b, n, w = h.shape
    heads = config.heads
    hd = w // heads
    qkv = ad.matmul(h, params[f"{prefix}.qkv.w"]) + params[f"{prefix}.qkv.b"]
    qkv = qkv.reshape(b, n, 3, heads, hd).swapaxes(1, 3)    # (b, heads, 3, n, hd)
    q = qkv[:, :, 0]
    k = qkv[:, :, 1]
    v = qkv[:, :, 2]
    scores = ad.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(hd))
    attn = ad.softmax(scores, axis=-1)
    mixed = ad.matmul(attn, v)                              # (b, heads, n, hd)
    mixed = mixed.swapaxes(1, 2).reshape(b, n, w)
    return ad.matmul(mixed, params[f"{prefix}.attn_out.w"]) + params[f"{prefix}.attn_out.b"]


def predict_x0(model: DiffusionModel, x_prefix, x_t, t, phase, target_depth) -> Tensor:
    """Clean-future prediction (normalized space).

    x_prefix (B, n_prefix, 152), x_t (B, n_pred, 152), t (B,) diffusion
    steps, phase (B,) episode-progress in [0, 1], target_depth (B, 4).
    Deterministic for fixed inputs.
    """
    config = model.config
    params = model.params
    dt = config.np_dtype

    x_prefix = x_prefix if isinstance(x_prefix, Tensor) else Tensor(np.asarray(x_prefix, dtype=dt))
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=dt))
    b = x_prefix.shape[0]
    if x_prefix.shape[1:] != (config.n_prefix, state.STATE_DIM):
        raise PolicyError(f"prefix shape {x_prefix.shape} does not match config")
    if x_t.shape != (b, config.n_pred, state.STATE_DIM):
        raise PolicyError(f"diffused future shape {x_t.shape} does not match config")

    t_norm = Tensor((np.asarray(t, dtype=dt) / config.diffusion_steps).reshape(b, 1))
    phase = Tensor(np.asarray(phase, dtype=dt).reshape(b, 1))
    depth_scaled = Tensor((np.asarray(target_depth, dtype=dt) / MAX_DEPTH).reshape(b, 4))

    cond = (_mlp3(params, "cond_t", t_norm)
            + _mlp3(params, "cond_phase", phase)
            + _mlp3(params, "cond_depth", depth_scaled))
    seq = ad.concat([cond.reshape(b, 1, state.STATE_DIM), x_prefix, x_t], axis=1)

    h = ad.matmul(seq, params["proj_in.w"]) + params["proj_in.b"]
    h = h + params["pos"]
    for layer in range(config.depth):
        p = f"layer{layer}"
        normed = ad.layer_norm(h, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        h = h + _attention(params, p, normed, config)
        normed = ad.layer_norm(h, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        inner = ad.tanh(ad.matmul(normed, params[f"{p}.mlp0.w"]) + params[f"{p}.mlp0.b"])
        h = h + ad.matmul(inner, params[f"{p}.mlp1.w"]) + params[f"{p}.mlp1.b"]
    h = ad.layer_norm(h, params["ln_f.g"], params["ln_f.b"])
    out = ad.matmul(h[:, 1 + config.n_prefix:, :], params["proj_out.w"]) + params["proj_out.b"]
    model.eval_count += 1
    return out


# -- losses -----------------------------------------------------------------------


def training_loss(model: DiffusionModel, hand: kin.HandModel,
                  predicted: Tensor, target: np.ndarray) -> tuple[Tensor, dict]:
    """Reconstruction MSE plus kinematic consistency, both as means.

    Consistency runs the predicted joint angles and wrist pose (physical
    units) through fk and compares with the predicted joint positions.
    """
    config = model.config
    target_t = Tensor(np.asarray(target, dtype=config.np_dtype))
    recon = ad.mse(predicted, target_t)

    if config.consistency_weight == 0.0:
        return recon, {"reconstruction": recon.item(), "consistency": 0.0}

    b, n_pred, _ = predicted.shape
    flat = predicted.reshape(b * n_pred, state.STATE_DIM)
    std = Tensor(model.norm_std.astype(config.np_dtype))
    mean = Tensor(model.norm_mean.astype(config.np_dtype))
    physical = flat * std + mean

    sl_q = state.SLICES["joint_angles"]
    sl_r = state.SLICES["wrist_rotation6d"]
    sl_wz = state.SLICES["wrist_height"]
    sl_p = state.SLICES["joint_positions"]
    positions, _ = kin.fk(hand, physical[:, sl_q], physical[:, sl_r],
                          physical[:, sl_wz].reshape(b * n_pred))
    consist = ad.mse(positions.reshape(b * n_pred, 51), physical[:, sl_p])
    total = recon + config.consistency_weight * consist
    return total, {"reconstruction": recon.item(), "consistency": consist.item()}


def consistency_of_frames(model: DiffusionModel, hand: kin.HandModel,
                          frames: np.ndarray) -> float:
    """Mean-square fk-vs-positions defect of physical frames (diagnostic)."""
    frames = frames.reshape(-1, state.STATE_DIM).astype(np.float64)
    gamma = state.gamma_from_frames(frames)
    positions, _ = kin.fk_arrays(hand, gamma)
    defect = positions.reshape(-1, 51) - frames[:, state.SLICES["joint_positions"]]
    return float(np.mean(defect ** 2))


# -- disturbances ---------------------------------------------------------------------


_COMMAND_SLICES = ("joint_angles", "wrist_rotation6d", "wrist_height")


def _command_noise(config: DiffusionConfig, rng: np.random.Generator) -> np.ndarray:
    """One physical-unit noise draw over (angles, 6d rows, height)."""
    return np.concatenate([
        rng.standard_normal(16) * config.disturb_angle_std,
        rng.standard_normal(6) * config.disturb_angle_std,
        rng.standard_normal(1) * config.disturb_height_std,
    ])


def _rebuild_disturbed(model: DiffusionModel, hand: kin.HandModel,
                       phys: np.ndarray, command_offsets: np.ndarray) -> np.ndarray:
    """Apply per-frame command offsets to physical prefixes and rebuild the
    dependent fields so each frame stays self-consistent: positions through
    fk, rates by re-differencing, tactile depths shifted by each fingertip's
    actual height change (the terrain itself is unknown here).

    ``phys`` is (samples, n_prefix, 152); offsets match over the 23 command
    dims. fk runs once over all frames of all samples.
    """
    out = phys.copy()
    n_samples, n_prefix, _ = out.shape
    sl_q, sl_r, sl_wz = (state.SLICES[s] for s in _COMMAND_SLICES)
    flat = out.reshape(-1, state.STATE_DIM)
    offs = command_offsets.reshape(-1, 23)
    flat[:, sl_q] = hand.clip_to_limits(flat[:, sl_q] + offs[:, 0:16])
    flat[:, sl_r] += offs[:, 16:22]
    flat[:, sl_wz] += offs[:, 22:23]

    old_flat = phys.reshape(-1, state.STATE_DIM)
    positions, tips = kin.fk_arrays(hand, state.gamma_from_frames(flat))
    _, old_tips = kin.fk_arrays(hand, state.gamma_from_frames(old_flat))
    flat[:, state.SLICES["joint_positions"]] = positions.reshape(-1, 51)

    dz = (tips[:, :, 2] - old_tips[:, :, 2])
    sl_tac = state.SLICES["tactile_depths"]
    flat[:, sl_tac] = np.clip(flat[:, sl_tac] - dz, 0.0, MAX_DEPTH)

    fps = state.DEFAULT_FPS
    for pos_name, rate_name in (("joint_positions", "joint_velocities"),
                                ("joint_angles", "joint_angle_rates"),
                                ("wrist_rotation6d", "wrist_rotation_rate"),
                                ("wrist_height", "wrist_height_rate")):
        p_sl, r_sl = state.SLICES[pos_name], state.SLICES[rate_name]
        rates = out[..., r_sl].copy()         # frame 0 keeps the original rate
        rates[:, 1:] = (out[:, 1:, p_sl] - out[:, :-1, p_sl]) * fps
        out[..., r_sl] = rates
    return out


def apply_disturbances(model: DiffusionModel, x_prefix: np.ndarray,
                       rng: np.random.Generator,
                       hand: kin.HandModel | None = None) -> np.ndarray:
    """Training-time prefix corruption, one mutually-exclusive branch per
    sample: i.i.d. command noise, a single noise draw amplified linearly
    across the prefix (a rising or descending terrain), or a frozen run
    with tactile depths pinned at the cap. The noised branches rebuild
    positions, rates, and tactile depths so the corrupted prefix stays
    physically coherent; the paired target future remains the clean
    continuation, which is what teaches the policy to recover.
    """
    config = model.config
    hand = hand or _default_hand()
    out = x_prefix.copy()
    b = out.shape[0]
    depth_slice = state.SLICES["tactile_depths"]
    depth_max_norm = ((MAX_DEPTH - model.norm_mean[depth_slice])
                      / model.norm_std[depth_slice]).astype(out.dtype)

    choices = rng.uniform(size=b)
    p1 = config.disturb_noise_prob
    p2 = p1 + config.disturb_ramp_prob
    p3 = p2 + config.disturb_freeze_prob
    noised, offsets = [], []
    for s in range(b):
        draw = choices[s]
        if draw < p1:
            noised.append(s)
            offsets.append(np.stack([_command_noise(config, rng)
                                     for _ in range(config.n_prefix)]))
        elif draw < p2:
            grow = ((np.arange(config.n_prefix) + 1.0) / config.n_prefix
                    * config.disturb_ramp_gain)
            noised.append(s)
            offsets.append(grow[:, None] * _command_noise(config, rng)[None, :])
        elif draw < p3:
            run = int(rng.integers(2, config.n_prefix + 1))
            start = int(rng.integers(0, config.n_prefix - run + 1))
            out[s][start:start + run] = out[s][start]
            out[s][start:start + run, depth_slice] = depth_max_norm
    if noised:
        stacked = np.stack(offsets)
        if np.any(stacked):                    # zero noise stds stay identity
            phys = model.unnormalize(out[noised])
            rebuilt = _rebuild_disturbed(model, hand, phys, stacked)
            out[noised] = model.normalize(rebuilt)
    return out


_HAND_CACHE: dict = {}


def _default_hand() -> kin.HandModel:
    if "hand" not in _HAND_CACHE:
        _HAND_CACHE["hand"] = kin.HandModel.load()
    return _HAND_CACHE["hand"]


# -- training --------------------------------------------------------------------------


def split_windows(frames: np.ndarray, depths: np.ndarray,
                  config: DiffusionConfig) -> dict:
    """Non-overlapping windows of length n_prefix + n_pred per episode."""
    n_eps, ep_len, dim = frames.shape
    horizon = config.n_prefix + config.n_pred
    starts = np.arange(0, ep_len - horizon + 1, horizon)
    prefix, future, phase, depth = [], [], [], []
    for e in range(n_eps):
        for s in starts:
            prefix.append(frames[e, s:s + config.n_prefix])
            future.append(frames[e, s + config.n_prefix:s + horizon])
            phase.append((s + config.n_prefix) / ep_len)
            depth.append(depths[e])
    return {
        "prefix": np.stack(prefix),
        "future": np.stack(future),
        "phase": np.asarray(phase),
        "depth": np.stack(depth),
    }


# per-field floors keep barely-varying dims from exploding under
# normalization (and from reading 20 sigma out of distribution at test time)
_STD_FLOORS = {
    "joint_positions": 1e-3,
    "joint_velocities": 1e-2,
    "joint_angles": 1e-2,
    "joint_angle_rates": 1e-2,
    "wrist_rotation6d": 1e-2,
    "wrist_rotation_rate": 1e-2,
    "wrist_height": 1e-3,
    "wrist_height_rate": 1e-2,
    "tactile_depths": 1e-4,
}


def normalization_stats(frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = frames.reshape(-1, state.STATE_DIM).astype(np.float64)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    for name, floor in _STD_FLOORS.items():
        sl = state.SLICES[name]
        std[sl] = np.maximum(std[sl], floor)
    return mean, std


def constant_mean_baseline(model: DiffusionModel, future: np.ndarray) -> float:
    """Loss of always predicting the dataset mean (zero in normalized space)."""
    normed = model.normalize(future)
    return float(np.mean(normed.astype(np.float64) ** 2))


def train(frames: np.ndarray, depths: np.ndarray, config: DiffusionConfig,
          hand: kin.HandModel | None = None, out_dir=None,
          dataset_hash: str = "", config_hash: str = "",
          log_every: int = 50) -> tuple[DiffusionModel, dict]:
    """Train a policy on synthesized episodes; returns (model, history).

    Windows are split per episode, a holdout fraction is reserved for the
    baseline comparison, and a loss-curve CSV plus checkpoints are written
    when ``out_dir`` is given. NaN loss aborts after writing a final
    checkpoint.
    """
    state.validate_frames(frames, "training dataset")
    hand = hand or kin.HandModel.load()
    rng = np.random.default_rng(config.seed)

    mean, std = normalization_stats(frames)
    model = DiffusionModel(config=config, params=init_parameters(config, rng),
                           norm_mean=mean, norm_std=std,
                           meta={"dataset_hash": dataset_hash, "config_hash": config_hash})

    windows = split_windows(frames, depths, config)
    n_windows = len(windows["prefix"])
    n_hold = int(round(config.holdout_fraction * n_windows))
    order = rng.permutation(n_windows)
    hold, train_idx = order[:n_hold], order[n_hold:]
    if len(train_idx) == 0:
        raise PolicyError("no training windows left after holdout split")

    prefix_n = model.normalize(windows["prefix"])
    future_n = model.normalize(windows["future"])

    opt = ad.Adam(list(model.params.values()), lr=config.learning_rate)
    history = {"step": [], "loss": [], "reconstruction": [], "consistency": []}
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    started = time.time()
    for step in range(config.train_steps):
        batch = rng.choice(train_idx, size=min(config.batch_size, len(train_idx)),
                           replace=False)
        t = rng.integers(0, config.diffusion_steps + 1, size=len(batch))
        x_prefix = apply_disturbances(model, prefix_n[batch], rng, hand)
        x_t = forward_diffuse(future_n[batch], t, rng, model.schedule)
        predicted = predict_x0(model, x_prefix, x_t, t,
                               windows["phase"][batch], windows["depth"][batch])
        loss, terms = training_loss(model, hand, predicted, future_n[batch])
        value = loss.item()
        if not np.isfinite(value):
            if out_dir is not None:
                model.save(out_dir / "model.aborted.ptck", {"aborted_at_step": step})
            raise PolicyError(f"NaN loss at step {step}")
        if step % log_every == 0 or step == config.train_steps - 1:
            history["step"].append(step)
            history["loss"].append(value)
            history["reconstruction"].append(terms["reconstruction"])
            history["consistency"].append(terms["consistency"])
        ad.backward(loss)
        opt.step()
        if out_dir is not None and config.checkpoint_every > 0 \
                and (step + 1) % config.checkpoint_every == 0:
            model.save(out_dir / f"model.step{step + 1:06d}.ptck", {"step": step + 1})

    history["wall_seconds"] = time.time() - started
    history["holdout"] = hold.tolist()
    if out_dir is not None:
        model.save(out_dir / "model.ptck", {"step": config.train_steps})
        with open(out_dir / "training_curve.csv", "w") as fh:
            fh.write("step,loss,reconstruction,consistency\n")
            for i, s in enumerate(history["step"]):
                fh.write(f"{s},{history['loss'][i]:.8e},"
                         f"{history['reconstruction'][i]:.8e},"
                         f"{history['consistency'][i]:.8e}\n")
    return model, history


def evaluate_loss(model: DiffusionModel, hand: kin.HandModel, frames: np.ndarray,
                  depths: np.ndarray, indices=None, seed: int = 1234) -> float:
    """Mean training-style loss over the given windows (no disturbances)."""
    windows = split_windows(frames, depths, model.config)
    idx = np.arange(len(windows["prefix"])) if indices is None else np.asarray(indices)
    rng = np.random.default_rng(seed)
    prefix_n = model.normalize(windows["prefix"][idx])
    future_n = model.normalize(windows["future"][idx])
    total = 0.0
    bs = model.config.batch_size
    for lo in range(0, len(idx), bs):
        sel = slice(lo, min(lo + bs, len(idx)))
        t = rng.integers(0, model.config.diffusion_steps + 1, size=sel.stop - sel.start)
        x_t = forward_diffuse(future_n[sel], t, rng, model.schedule)
        predicted = predict_x0(model, prefix_n[sel], x_t, t,
                               windows["phase"][idx][sel], windows["depth"][idx][sel])
        loss, _ = training_loss(model, hand, predicted, future_n[sel])
        total += loss.item() * (sel.stop - sel.start)
    return total / len(idx)


# -- inference ---------------------------------------------------------------------------


def infer(model: DiffusionModel, x_prefix: np.ndarray, phase: float,
          target_depth: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Generate the next n_pred physical frames from a physical prefix.

    Starts at the top diffusion level from pure noise; each of the
    ``inference_steps`` rounds predicts the clean future then re-noises it
    to the next lower level, except the last round which returns the
    prediction directly. Exactly ``inference_steps`` model evaluations.
    """
    config = model.config
    state.validate_frames(x_prefix, "inference prefix")
    prefix_n = model.normalize(np.asarray(x_prefix))[None, :, :]
    depth = np.asarray(target_depth, dtype=float).reshape(1, 4)

    top = config.diffusion_steps
    x = rng.standard_normal((1, config.n_pred, state.STATE_DIM)).astype(config.np_dtype)
    t = top
    step_down = top // config.inference_steps
    x0_hat = None
    for n_i in range(1, config.inference_steps + 1):
        x0_hat = predict_x0(model, prefix_n, x, np.array([t]), np.array([phase]), depth)
        if n_i == config.inference_steps:
            break
        t = top - step_down * n_i
        signal, noise = model.schedule.mix(t)
        eps = rng.standard_normal(x0_hat.shape).astype(config.np_dtype)
        x = Tensor(signal * x0_hat.data + noise * eps)

    frames = model.unnormalize(x0_hat.data[0])
    sl = state.SLICES["tactile_depths"]
    frames[:, sl] = np.clip(frames[:, sl], 0.0, MAX_DEPTH)
    return frames
