"""Procedural support terrain.

Two query modes share the same spline machinery:

* per-finger: one natural cubic spline per finger over the trajectory arc
  parameter s in [0, 100], 5 control points at {0, 25, 50, 75, 100};
* field: a global height(x, y) used by the simulator, either composed
  from two splines or one of the named presets (plane, slope, book edge,
  random).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

N_FINGERS = 4
CONTROL_S = np.array([0.0, 25.0, 50.0, 75.0, 100.0])
MAX_CONTROL_HEIGHT = 0.03  # m
FIELD_EXTENT = 0.15        # field splines are laid out over [-extent, extent]

PRESET_NAMES = ("plane", "slope", "book", "random")


class TerrainRangeError(ValueError):
    """Arc parameter outside [0, 100]."""


def _natural_spline(heights: np.ndarray) -> CubicSpline:
    return CubicSpline(CONTROL_S, heights, bc_type="natural")


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


class Terrain:
    """Immutable after construction; queries are pure functions."""

    def __init__(self, mode: str, control_heights: np.ndarray | None = None,
                 preset: str | None = None, seed: int | None = None,
                 params: dict | None = None):
        self.mode = mode
        self.preset = preset
        self.seed = seed
        self.params = dict(params or {})
        self.edge_x = self.params.get("edge_x")
        if control_heights is not None:
            control_heights = np.asarray(control_heights, dtype=float)
            if control_heights.ndim == 1:
                control_heights = np.tile(control_heights, (N_FINGERS, 1))
            if control_heights.shape != (N_FINGERS, len(CONTROL_S)):
                raise ValueError(f"control heights must be ({N_FINGERS}, {len(CONTROL_S)})")
            if control_heights.min() < 0 or control_heights.max() > MAX_CONTROL_HEIGHT:
                raise ValueError("control heights must lie in [0, 0.03] m")
        self.control_heights = control_heights
        self._splines = None
        if control_heights is not None:
            self._splines = [_natural_spline(h) for h in control_heights]
        self.max_height, self.overshoot_bound = self._height_bounds()

    # -- construction -----------------------------------------------------

    @classmethod
    def generate(cls, seed: int) -> "Terrain":
        """Random per-finger terrain; control heights i.i.d. uniform on [0, 3] cm."""
        rng = np.random.default_rng(seed)
        heights = rng.uniform(0.0, MAX_CONTROL_HEIGHT, size=(N_FINGERS, len(CONTROL_S)))
        return cls("per_finger", control_heights=heights, seed=seed)

    @classmethod
    def flat(cls) -> "Terrain":
        return cls("per_finger", control_heights=np.zeros((N_FINGERS, len(CONTROL_S))))

    @classmethod
    def preset_field(cls, name: str, seed: int = 0) -> "Terrain":
        """Named field-mode terrains mirroring the evaluation matrix."""
        if name == "plane":
            # mid-range table height: the absolute z origin is arbitrary and
            # synthesized motions live around the centre of [0, 3] cm
            return cls("field", preset="plane", seed=seed, params={"height": 0.015})
        if name == "slope":
            return cls("field", preset="slope", seed=seed,
                       params={"angle_deg": 10.0, "x0": -0.075})
        if name == "book":
            # 2 cm step smoothed over 5 mm; C2 except at the flagged edge
            return cls("field", preset="book", seed=seed,
                       params={"step": 0.02, "width": 0.005, "edge_x": 0.0, "base": 0.005})
        if name == "random":
            rng = np.random.default_rng(seed)
            heights = rng.uniform(0.0, MAX_CONTROL_HEIGHT, size=(2, len(CONTROL_S)))
            t = cls("field", preset="random", seed=seed)
            t._field_splines = [_natural_spline(h) for h in heights]
            t.params["control_heights"] = heights.tolist()
            t.max_height, t.overshoot_bound = t._height_bounds()
            return t
        raise ValueError(f"unknown preset '{name}', expected one of {PRESET_NAMES}")

    # -- queries ------------------------------------------------------------

    def heights_at(self, s) -> np.ndarray:
        """Per-finger heights at arc parameter s (per-finger mode only)."""
        if self._splines is None:
            raise ValueError("heights_at requires per-finger mode")
        s = np.asarray(s, dtype=float)
        if (s < 0).any() or (s > 100).any():
            raise TerrainRangeError("arc parameter must lie in [0, 100]")
        return np.stack([sp(s) for sp in self._splines])

    def field_height(self, x, y) -> np.ndarray:
        """height(x, y) in field mode."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.mode != "field":
            raise ValueError("field_height requires field mode")
        if self.preset == "plane":
            return np.full(np.broadcast(x, y).shape, self.params.get("height", 0.0))
        if self.preset == "slope":
            slope = np.tan(np.deg2rad(self.params["angle_deg"]))
            h = slope * (x - self.params["x0"])
            return np.clip(h, 0.0, MAX_CONTROL_HEIGHT)
        if self.preset == "book":
            t = (self.params["edge_x"] - x) / self.params["width"]
            return self.params.get("base", 0.0) + self.params["step"] * _smoothstep(t)
        if self.preset == "random":
            u = np.clip((x + FIELD_EXTENT) / (2 * FIELD_EXTENT), 0.0, 1.0) * 100.0
            v = np.clip((y + FIELD_EXTENT) / (2 * FIELD_EXTENT), 0.0, 1.0) * 100.0
            return 0.5 * (self._field_splines[0](u) + self._field_splines[1](v))
        raise ValueError(f"unknown preset '{self.preset}'")

    def project(self, finger: int, s, x, y):
        """Support height under one finger, whichever mode is active."""
        if self.mode == "per_finger":
            return self.heights_at(s)[finger]
        return self.field_height(x, y)

    def support_height(self, s, x, y, finger: int | None = None):
        """Conservative support height for collision queries.

        Field mode samples height(x, y); per-finger mode uses the finger's
        spline, or the max over fingers when no finger applies (palm).
        """
        if self.mode == "field":
            return self.field_height(x, y)
        hs = self.heights_at(s)
        h = hs[finger] if finger is not None else hs.max()
        return np.broadcast_to(h, np.asarray(x).shape).copy() if np.ndim(x) else h

    # -- bookkeeping -----------------------------------------------------------

    def _height_bounds(self) -> tuple[float, float]:
        dense = np.linspace(0.0, 100.0, 2001)
        if self.mode == "per_finger" and self._splines is not None:
            peak = max(float(sp(dense).max()) for sp in self._splines)
        elif self.mode == "field":
            if self.preset == "random" and not hasattr(self, "_field_splines"):
                return MAX_CONTROL_HEIGHT, 0.0  # finalized after splines attach
            grid = np.linspace(-FIELD_EXTENT, FIELD_EXTENT, 201)
            gx, gy = np.meshgrid(grid, grid)
            peak = float(self.field_height(gx, gy).max())
        else:
            peak = 0.0
        return peak, max(0.0, peak - MAX_CONTROL_HEIGHT)

    @property
    def terrain_id(self) -> str:
        if self.mode == "per_finger":
            return f"spline-seed{self.seed}" if self.seed is not None else "spline-custom"
        return f"{self.preset}-seed{self.seed}"

    # -- serialization -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "preset": self.preset,
            "seed": self.seed,
            "control_heights": None if self.control_heights is None else self.control_heights.tolist(),
            "params": self.params,
        }

    def save(self, path, config_hash: str | None = None):
        payload = self.to_dict()
        if config_hash:
            payload["config_hash"] = config_hash
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))

    @classmethod
    def from_dict(cls, payload: dict) -> "Terrain":
        if payload["mode"] == "field":
            t = cls.preset_field(payload["preset"], seed=payload.get("seed") or 0)
            return t
        heights = payload.get("control_heights")
        return cls("per_finger",
                   control_heights=None if heights is None else np.asarray(heights),
                   seed=payload.get("seed"), params=payload.get("params"))

    @classmethod
    def load(cls, path) -> "Terrain":
        return cls.from_dict(json.loads(Path(path).read_text()))


def height_at(terrain: Terrain, s, finger: int = 0):
    """Spline height at arc parameter s; exact at control points."""
    return float(terrain.heights_at(s)[finger]) if np.ndim(s) == 0 else terrain.heights_at(s)[finger]
