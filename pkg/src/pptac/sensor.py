"""Hemispherical tactile sensor: geometry, calibration, reconstruction.

The sensing model is a pinhole camera viewing a hemispherical elastomer
dome of radius ``r``. ``D(u, v)`` stores the camera-frame depth of each
pixel ray's near intersection with the undeformed dome (so an axial view
of the dome apex at distance d reads d - r). Contact displaces the
surface toward the camera along each ray by the deformation depth, and
the intensity of a monochrome image rises monotonically with that depth,
which is what the single-image depth mapping calibrates.

A built-in renderer implements the same model with a fixed intensity law
and serves as the ground-truth oracle for calibration and
reconstruction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_WIDTH = 640
IMAGE_HEIGHT = 480
MAX_DEPTH = 0.002          # perception layer thickness: depth readings cap here (m)
DEFAULT_RADIUS = 0.010     # hemisphere radius (m)

# renderer intensity law: counts(delta) = LIN * (d/cap) + QUAD * (d/cap)^2
LAW_LINEAR = 120.0
LAW_QUADRATIC = 60.0
REF_BASE = 40.0
REF_VIGNETTE = 25.0


class CalibrationError(RuntimeError):
    """Calibration input insufficient (contrast, geometry, rank)."""


class NotCalibratedError(RuntimeError):
    """Operation requires a calibrated camera model / depth mapping."""


# -- camera model ----------------------------------------------------------


@dataclass
class CameraModel:
    intrinsics: np.ndarray                  # 3x3, upper triangular, +diag
    rotation: np.ndarray                    # 3x3 sensor->camera
    translation: np.ndarray                 # 3-vector (m)
    radius: float = DEFAULT_RADIUS
    image_size: tuple = (IMAGE_WIDTH, IMAGE_HEIGHT)
    depth_mapping: "DepthMapping | None" = None

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=float)
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        k = self.intrinsics
        if not (np.allclose(k, np.triu(k)) and (np.diag(k) > 0).all()):
            raise ValueError("intrinsics must be upper triangular with positive diagonal")
        rtr = self.rotation.T @ self.rotation
        if np.abs(rtr - np.eye(3)).max() > 1e-6 or np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation must be orthonormal with det +1")

    @classmethod
    def default(cls, radius: float = DEFAULT_RADIUS, standoff: float = 0.035) -> "CameraModel":
        """Axial view: camera on the dome axis looking at the apex."""
        k = np.array([[600.0, 0.0, (IMAGE_WIDTH - 1) / 2.0],
                      [0.0, 600.0, (IMAGE_HEIGHT - 1) / 2.0],
                      [0.0, 0.0, 1.0]])
        rot = np.diag([1.0, -1.0, -1.0])     # camera +z looks along sensor -z
        trans = np.array([0.0, 0.0, standoff])
        return cls(k, rot, trans, radius=radius)

    def camera_center(self) -> np.ndarray:
        """Camera position in the sensor frame."""
        return -self.rotation.T @ self.translation

    def project(self, points: np.ndarray) -> np.ndarray:
        """Sensor-frame points (n,3) -> pixel coordinates (n,2)."""
        cam = points @ self.rotation.T + self.translation
        if (cam[:, 2] <= 0).any():
            raise ValueError("point behind the camera")
        homo = cam @ self.intrinsics.T
        return homo[:, :2] / homo[:, 2:3]

    def save(self, path, config_hash: str | None = None):
        payload = {
            "K": self.intrinsics.tolist(),
            "A": self.rotation.tolist(),
            "b": self.translation.tolist(),
            "r": self.radius,
            "image_size": list(self.image_size),
            "M_table": None if self.depth_mapping is None else self.depth_mapping.table.tolist(),
        }
        if config_hash:
            payload["config_hash"] = config_hash
        Path(path).write_text(json.dumps(payload, indent=2))

    @classmethod
    def load(cls, path) -> "CameraModel":
        payload = json.loads(Path(path).read_text())
        model = cls(np.asarray(payload["K"]), np.asarray(payload["A"]),
                    np.asarray(payload["b"]), radius=float(payload["r"]),
                    image_size=tuple(payload.get("image_size", (IMAGE_WIDTH, IMAGE_HEIGHT))))
        if payload.get("M_table") is not None:
            model.depth_mapping = DepthMapping(np.asarray(payload["M_table"], dtype=float))
        return model


def _pixel_rays(model: CameraModel, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Camera-frame ray directions with unit z for pixel coordinates."""
    k_inv = np.linalg.inv(model.intrinsics)
    ones = np.ones_like(np.asarray(u, dtype=float))
    pix = np.stack([np.asarray(u, dtype=float), np.asarray(v, dtype=float), ones], axis=-1)
    return pix @ k_inv.T


def _sphere_depths(model: CameraModel, rays: np.ndarray, center_sensor: np.ndarray,
                   radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Near/far camera depths of ray-sphere intersections (NaN when missed)."""
    center_cam = model.rotation @ center_sensor + model.translation
    a = (rays * rays).sum(axis=-1)
    bq = -2.0 * (rays * center_cam).sum(axis=-1)
    c = center_cam @ center_cam - radius**2
    disc = bq * bq - 4 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    near = np.where(hit, (-bq - sq) / (2 * a), np.nan)
    far = np.where(hit, (-bq + sq) / (2 * a), np.nan)
    return near, far


# -- reference projection -----------------------------------------------------


@dataclass
class ReferenceProjection:
    depth: np.ndarray   # (H, W) camera-frame depth of the undeformed dome, NaN off-mask
    mask: np.ndarray    # (H, W) bool


def reference_depth_at(model: CameraModel, u, v):
    """Closed-form D(u, v) for continuous pixel coordinates (near root)."""
    rays = _pixel_rays(model, np.asarray(u), np.asarray(v))
    near, _ = _sphere_depths(model, rays, np.zeros(3), model.radius)
    return near


def build_reference_projection(model: CameraModel) -> ReferenceProjection:
    """Depth of the undeformed dome per pixel; rays that miss the dome or
    hit the lower half are excluded from the mask."""
    w, h = model.image_size
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    rays = _pixel_rays(model, uu, vv)
    near, _ = _sphere_depths(model, rays, np.zeros(3), model.radius)
    valid = np.isfinite(near) & (near > 0)
    points = _backproject(model, near, rays)
    valid &= points[..., 2] >= 0            # dome half faces the camera
    depth = np.where(valid, near, np.nan)
    if not valid.any():
        raise CalibrationError("hemisphere not visible from this pose")
    return ReferenceProjection(depth=depth, mask=valid)


def _backproject(model: CameraModel, depth: np.ndarray, rays: np.ndarray) -> np.ndarray:
    cam = rays * depth[..., None]
    return (cam - model.translation) @ model.rotation


# -- synthetic tactile renderer ---------------------------------------------


@dataclass
class PressSpec:
    """A rigid spherical indenter pressed into the dome along ``direction``
    (unit vector from the dome centre outward) to depth ``press_depth``."""
    direction: np.ndarray
    press_depth: float
    indenter_radius: float

    def center(self, dome_radius: float) -> np.ndarray:
        d = np.asarray(self.direction, dtype=float)
        d = d / np.linalg.norm(d)
        return (dome_radius - self.indenter_radius + self.press_depth) * d


def intensity_law(delta: np.ndarray) -> np.ndarray:
    """Monotone deformation-depth -> intensity-delta law used by the renderer."""
    x = np.clip(np.asarray(delta, dtype=float), 0.0, MAX_DEPTH) / MAX_DEPTH
    return LAW_LINEAR * x + LAW_QUADRATIC * x * x


def intensity_law_inverse(counts: np.ndarray) -> np.ndarray:
    """Exact inverse of the renderer law, for oracle comparisons."""
    c = np.asarray(counts, dtype=float)
    x = (-LAW_LINEAR + np.sqrt(LAW_LINEAR**2 + 4 * LAW_QUADRATIC * c)) / (2 * LAW_QUADRATIC)
    return np.clip(x, 0.0, 1.0) * MAX_DEPTH


def reference_image(model: CameraModel) -> np.ndarray:
    """Deterministic no-contact capture: flat base plus a mild radial vignette."""
    w, h = model.image_size
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    cx, cy = model.intrinsics[0, 2], model.intrinsics[1, 2]
    rho = np.hypot(uu - cx, vv - cy)
    img = REF_BASE + REF_VIGNETTE * (1.0 - np.clip(rho / 400.0, 0.0, 1.0))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_deformation(model: CameraModel, projection: ReferenceProjection,
                       presses: list[PressSpec]) -> np.ndarray:
    """Ground-truth per-pixel deformation depth for a set of presses."""
    w, h = model.image_size
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    rays = _pixel_rays(model, uu, vv)
    delta = np.zeros((h, w))
    for press in presses:
        near, _ = _sphere_depths(model, rays, press.center(model.radius),
                                 press.indenter_radius)
        lift = projection.depth - near
        lift = np.where(np.isfinite(lift) & projection.mask, lift, 0.0)
        delta = np.maximum(delta, np.clip(lift, 0.0, MAX_DEPTH))
    return delta


def render_tactile(model: CameraModel, projection: ReferenceProjection,
                   presses: list[PressSpec],
                   return_truth: bool = False):
    """8-bit capture of the pressed sensor (and optionally the true depths)."""
    delta = render_deformation(model, projection, presses)
    img = reference_image(model).astype(np.float64) + intensity_law(delta)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return (img, delta) if return_truth else img


# -- extrinsic calibration ---------------------------------------------------


@dataclass
class CalibrationDataset:
    """2D-3D correspondences from indentation trials plus one ball capture."""
    pixels: np.ndarray                       # (n, 2)
    points: np.ndarray                       # (n, 3) sensor frame
    ball_image: np.ndarray | None = None
    ball_radius: float | None = None
    n_captures: int = 30                     # 28 pin trials + reference + ball

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.pixels) != len(self.points):
            raise ValueError("pixel/point counts differ")


def _check_not_coplanar(points: np.ndarray):
    centered = points - points.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if len(points) < 6 or svals[-1] < 1e-9 * max(svals[0], 1e-12):
        raise CalibrationError("need >= 6 non-coplanar correspondences (rank deficient)")


def solve_extrinsics(calib: CalibrationDataset, intrinsics: np.ndarray,
                     radius: float = DEFAULT_RADIUS) -> CameraModel:
    """Pose from 2D-3D correspondences: direct linear transform followed by
    Gauss-Newton reprojection refinement. Correspondences are sorted
    canonically first, so the result is invariant to input ordering."""
    order = np.lexsort((calib.pixels[:, 1], calib.pixels[:, 0]))
    pixels = calib.pixels[order]
    points = calib.points[order]
    _check_not_coplanar(points)

    k_inv = np.linalg.inv(np.asarray(intrinsics, dtype=float))
    ones = np.ones((len(pixels), 1))
    rays = np.concatenate([pixels, ones], axis=1) @ k_inv.T   # (n, 3)

    # DLT on cross(ray, A P + b) = 0; unknowns are the 12 entries of [A | b]
    n = len(points)
    p_h = np.concatenate([points, ones], axis=1)              # (n, 4)
    rows = []
    for i in range(n):
        x, y, z = rays[i]
        rows.append(np.concatenate([np.zeros(4), -z * p_h[i], y * p_h[i]]))
        rows.append(np.concatenate([z * p_h[i], np.zeros(4), -x * p_h[i]]))
    m = np.asarray(rows)
    _, svals, vt = np.linalg.svd(m)
    if svals[-2] < 1e-10 * svals[0]:
        raise CalibrationError("degenerate configuration: DLT system is rank deficient")
    theta = vt[-1].reshape(3, 4)

    # the DLT solution carries an arbitrary sign; resolve it by cheirality
    best = None
    for sign in (1.0, -1.0):
        a0, b0 = sign * theta[:, :3], sign * theta[:, 3]
        u, s, v = np.linalg.svd(a0)
        det = np.linalg.det(u @ v)
        rot = u @ np.diag([1.0, 1.0, det]) @ v
        trans = b0 / s.mean()
        cam = points @ rot.T + trans
        if (cam[:, 2] <= 0).any():
            continue
        proj = cam[:, :2] / cam[:, 2:3]
        err = np.abs(proj - rays[:, :2]).sum()
        if best is None or err < best[0]:
            best = (err, rot, trans)
    if best is None:
        raise CalibrationError("no pose places all points in front of the camera")

    rot, trans = _refine_pose(best[1], best[2], points, rays)
    return CameraModel(np.asarray(intrinsics, dtype=float), rot, trans, radius=radius)


def _refine_pose(rot: np.ndarray, trans: np.ndarray, points: np.ndarray,
                 rays: np.ndarray, iters: int = 30) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Newton on normalized reprojection residuals over (so3, t)."""
    def residuals(r, t):
        cam = points @ r.T + t
        proj = cam[:, :2] / cam[:, 2:3]
        return (proj - rays[:, :2]).ravel(), cam

    for _ in range(iters):
        res, cam = residuals(rot, trans)
        n = len(points)
        jac = np.zeros((2 * n, 6))
        x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
        inv_z = 1.0 / z
        # d(proj)/d(cam)
        du = np.stack([inv_z, np.zeros(n), -x * inv_z**2], axis=1)
        dv = np.stack([np.zeros(n), inv_z, -y * inv_z**2], axis=1)
        for i in range(n):
            dcam_dw = -_skew(cam[i] - trans)  # left perturbation acts on R P only
            jac[2 * i, :3] = du[i] @ dcam_dw
            jac[2 * i, 3:] = du[i]
            jac[2 * i + 1, :3] = dv[i] @ dcam_dw
            jac[2 * i + 1, 3:] = dv[i]
        step, *_ = np.linalg.lstsq(jac, -res, rcond=None)
        rot = _expm_so3(step[:3]) @ rot
        trans = trans + step[3:]
        if np.linalg.norm(step) < 1e-14:
            break
    return rot, trans


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _expm_so3(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3) + _skew(w)
    k = _skew(w / theta)
    return np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * (k @ k)


def reprojection_error(model: CameraModel, calib: CalibrationDataset) -> float:
    proj = model.project(calib.points)
    return float(np.linalg.norm(proj - calib.pixels, axis=1).mean())


# -- depth mapping -----------------------------------------------------------


@dataclass
class DepthMapping:
    """Monotone lookup from intensity delta (counts) to deformation depth (m).

    256 bins with linear interpolation; inputs beyond the calibrated range
    clamp to the perception-layer cap.
    """
    table: np.ndarray            # (256,) depths, index = intensity count
    calibrated_max_count: int = field(default=255)

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=float).reshape(256)
        if self.table[0] != 0.0:
            raise ValueError("depth mapping must satisfy M(0) = 0")
        if (np.diff(self.table) < -1e-12).any():
            raise ValueError("depth mapping must be monotone non-decreasing")

    def __call__(self, counts) -> np.ndarray:
        c = np.asarray(counts, dtype=float)
        out = np.interp(np.clip(c, 0.0, 255.0), np.arange(256), self.table)
        return np.where(c > self.calibrated_max_count, MAX_DEPTH, out)


def calibrate_depth_mapping(ball_image: np.ndarray, ball_radius: float,
                            model: CameraModel, projection: ReferenceProjection,
                            ref_image: np.ndarray | None = None,
                            press_direction=(0.0, 0.0, 1.0)) -> DepthMapping:
    """Build the intensity->depth lookup from a single capture of a ball of
    known radius pressed onto the sensor.

    The press depth is not given: it is recovered by matching the observed
    contact area against the geometric prediction (monotone in depth), then
    every contact pixel contributes an (intensity, geometric depth) pair.
    """
    if ref_image is None:
        ref_image = reference_image(model)
    diff = ball_image.astype(np.int64) - ref_image.astype(np.int64)
    contact = diff > 0
    observed = int(contact.sum())
    if observed < 50:
        raise CalibrationError("insufficient intensity contrast in ball capture")

    direction = np.asarray(press_direction, dtype=float)

    def area(depth: float) -> tuple[int, np.ndarray]:
        press = PressSpec(direction, depth, ball_radius)
        delta = render_geometry_depth(model, projection, press)
        return int((delta > 0).sum()), delta

    lo, hi = 1e-6, MAX_DEPTH
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        count, _ = area(mid)
        if count < observed:
            lo = mid
        else:
            hi = mid
    press_depth = 0.5 * (lo + hi)
    _, delta_geo = area(press_depth)

    counts = diff[contact]
    depths = delta_geo[contact]
    table = np.zeros(256)
    top = int(counts.max())
    for c in range(1, top + 1):
        sel = counts == c
        if sel.any():
            table[c] = depths[sel].mean()
    # fill gaps by interpolation over observed counts, then enforce monotone
    observed_counts = np.flatnonzero(table > 0)
    if len(observed_counts) < 2:
        raise CalibrationError("ball capture spans too few intensity levels")
    grid = np.arange(1, top + 1)
    table[1:top + 1] = np.interp(grid, observed_counts, table[observed_counts])
    table[top + 1:] = table[top]
    table = np.maximum.accumulate(table)
    return DepthMapping(table, calibrated_max_count=top)


def render_geometry_depth(model: CameraModel, projection: ReferenceProjection,
                          press: PressSpec) -> np.ndarray:
    """Geometric deformation depth of one press (no intensity model)."""
    return render_deformation(model, projection, [press])


# -- reconstruction ------------------------------------------------------------


@dataclass
class DepthMap:
    delta: np.ndarray      # (H, W) deformation depth (m), 0 outside contact
    points: np.ndarray     # (H, W, 3) sensor-frame surface points, NaN off-mask
    normals: np.ndarray    # (H, W, 3) unit normals, NaN off-mask
    mask: np.ndarray       # (H, W) valid-pixel mask


def reconstruct(image: np.ndarray, ref_image: np.ndarray, model: CameraModel,
                projection: ReferenceProjection,
                mapping: DepthMapping | None = None) -> DepthMap:
    """Intensity capture -> deformation depths and sensor-frame geometry.

    Per pixel: depth along the ray is D(u,v) - M(I_delta), and the surface
    point is A^-1(depth * K^-1 [u v 1]^T - b).
    """
    if mapping is None:
        mapping = model.depth_mapping
    if mapping is None:
        raise NotCalibratedError("no depth mapping: calibrate before reconstructing")
    if image.shape != ref_image.shape:
        raise ValueError("capture and reference image sizes differ")

    diff = np.clip(image.astype(np.int64) - ref_image.astype(np.int64), 0, None)
    delta = np.where(projection.mask, mapping(diff), 0.0)
    depth = projection.depth - delta

    h, w = image.shape
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    rays = _pixel_rays(model, uu, vv)
    points = _backproject(model, depth, rays)
    points[~projection.mask] = np.nan

    normals = _normals_from_points(points, projection.mask)
    return DepthMap(delta=delta, points=points, normals=normals, mask=projection.mask)


def _normals_from_points(points: np.ndarray, mask: np.ndarray) -> np.ndarray:
    du = np.gradient(points, axis=1)
    dv = np.gradient(points, axis=0)
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / np.where(norm > 0, norm, np.nan)
    n[~mask] = np.nan
    return n


# -- contact force and slip -----------------------------------------------------


def contact_force(deformation_depth, stiffness: float):
    """Linear force model: F = stiffness * depth, depth in [0, 2 mm]."""
    if stiffness <= 0:
        raise ValueError("stiffness must be positive")
    return stiffness * np.asarray(deformation_depth, dtype=float)


SLIP_THRESHOLD = 0.75
_LOGIT_THRESHOLD = np.log(SLIP_THRESHOLD / (1.0 - SLIP_THRESHOLD))


def slip_oracle(tangential_force: float, normal_force: float,
                friction_coeff: float) -> tuple[bool, float]:
    """Coulomb slip decision plus a smooth probability.

    Slips iff tangential force exceeds friction_coeff * normal_force. The
    probability is a logistic in the normalized force excess, placed so the
    decision boundary maps exactly to the 0.75 detection threshold.
    """
    if normal_force < 0:
        raise ValueError("normal force must be non-negative")
    limit = friction_coeff * normal_force
    slips = bool(tangential_force > limit)
    margin = (tangential_force - limit) / (0.1 * limit + 1e-9)
    prob = float(1.0 / (1.0 + np.exp(-(margin + _LOGIT_THRESHOLD))))
    return slips, prob


# -- image / depth-map files -----------------------------------------------------


def write_pgm(path, image: np.ndarray):
    """8-bit binary PGM (P5)."""
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise ValueError("PGM writer expects a 2-d uint8 array")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError("only binary (P5) PGM is supported")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()


DEPTH_MAGIC = b"DPT1"


def write_depth_map(path, delta: np.ndarray):
    """32-bit float depth map with a 16-byte header (magic, w, h, reserved)."""
    delta = np.asarray(delta, dtype=np.float32)
    h, w = delta.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<III", w, h, 0))
        fh.write(delta.astype("<f4").tobytes())


def read_depth_map(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DEPTH_MAGIC:
        raise ValueError("bad depth map magic")
    w, h, _ = struct.unpack_from("<III", raw, 4)
    return np.frombuffer(raw, dtype="<f4", count=w * h, offset=16).reshape(h, w).copy()


# -- synthetic calibration fixture ------------------------------------------------


def fixture_pin_directions(n_trials: int = 28) -> np.ndarray:
    """Press directions spread over the visible dome (deterministic spiral).

    Polar angles stay below 40 degrees: steeper presses are seen edge-on
    and their image blobs localize poorly.
    """
    idx = np.arange(n_trials, dtype=float)
    polar = np.deg2rad(6.0 + 32.0 * idx / (n_trials - 1))
    azimuth = idx * np.pi * (3.0 - np.sqrt(5.0))      # golden-angle spacing
    return np.stack([
        np.sin(polar) * np.cos(azimuth),
        np.sin(polar) * np.sin(azimuth),
        np.cos(polar),
    ], axis=1)


def detect_contact_pixel(image: np.ndarray, ref_image: np.ndarray) -> np.ndarray:
    """Contact location in pixels: intensity peak with subpixel parabola fit.

    The peak tracks the protrusion apex; a blob centroid would be biased by
    the asymmetric intensity falloff on the curved dome.
    """
    diff = np.clip(image.astype(np.int64) - ref_image.astype(np.int64), 0, None)
    if diff.sum() == 0:
        raise CalibrationError("no contact visible")
    v0, u0 = np.unravel_index(np.argmax(diff), diff.shape)

    def subpixel(lo, mid, hi):
        denom = 2.0 * (2.0 * mid - lo - hi)
        return 0.0 if abs(denom) < 1e-12 else np.clip((hi - lo) / denom, -0.5, 0.5)

    du = dv = 0.0
    if 0 < u0 < diff.shape[1] - 1:
        du = subpixel(diff[v0, u0 - 1], diff[v0, u0], diff[v0, u0 + 1])
    if 0 < v0 < diff.shape[0] - 1:
        dv = subpixel(diff[v0 - 1, u0], diff[v0, u0], diff[v0 + 1, u0])
    return np.array([u0 + du, v0 + dv])


def synthesize_calibration_captures(model: CameraModel, n_trials: int = 28,
                                    pin_diameter: float = 0.0015,
                                    pin_depth: float = 0.0010,
                                    ball_radius: float = 0.004,
                                    ball_depth: float = 0.0015):
    """Render the full 30-capture calibration set: ``n_trials`` pin presses,
    one reference frame, one ball press. Returns (dataset, images)."""
    projection = build_reference_projection(model)
    ref = reference_image(model)
    directions = fixture_pin_directions(n_trials)
    images, pixels, points = [], [], []
    for d in directions:
        press = PressSpec(d, pin_depth, pin_diameter / 2.0)
        img = render_tactile(model, projection, [press])
        images.append(img)
        pixels.append(detect_contact_pixel(img, ref))
        points.append((model.radius + pin_depth) * d)   # pin tip in sensor frame
    ball_img = render_tactile(model, projection,
                              [PressSpec((0.0, 0.0, 1.0), ball_depth, ball_radius)])
    dataset = CalibrationDataset(np.asarray(pixels), np.asarray(points),
                                 ball_image=ball_img, ball_radius=ball_radius,
                                 n_captures=n_trials + 2)
    return dataset, {"reference": ref, "pins": images, "ball": ball_img}
