"""Synthetic planar-target datasets with a known ground-truth camera.

Frames draw a board pose uniformly from configurable ranges (Euler
rotations applied about the board center, translation placing the
center), project all corners with the truth camera, keep those landing
on the sensor, and add i.i.d. Gaussian pixel noise. Everything is
deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .calibration import Dataset, Frame, TargetGeometry
from .cameras import CameraModel, monotone_radius, project
from .errors import CannotPlaceTargetError, ValidationError
from .geometry import Pose, rotation_matrix, rotation_vector, transform

#: default ground-truth camera: moderate barrel distortion, two radial terms
DEFAULT_TRUTH = CameraModel("pinhole_k2", (1000.0, 1000.0, 640.0, 480.0, -0.25, 0.03))

#: narrow-field camera for board-flatness studies
LONG_FOCAL_TRUTH = CameraModel("pinhole_k2", (2500.0, 2500.0, 640.0, 480.0, -0.05, 0.002))

DEFAULT_TARGET = TargetGeometry(rows=6, cols=8, spacing=0.06)


@dataclass(frozen=True)
class SimConfig:
    """Simulation protocol settings; defaults follow the evaluation setup
    (rotations within +-pi/4, t_z in 0.5..2.5 m, lateral +-0.5 m, 0.05 px
    detector noise)."""

    truth: CameraModel = DEFAULT_TRUTH
    target: TargetGeometry = DEFAULT_TARGET
    n_frames: int = 25
    noise_sigma: float = 0.05
    rot_range: tuple[float, float] = (-np.pi / 4, np.pi / 4)
    tz_range: tuple[float, float] = (0.5, 2.5)
    tx_range: tuple[float, float] = (-0.5, 0.5)
    ty_range: tuple[float, float] = (-0.5, 0.5)
    image_size: tuple[int, int] = (1280, 960)
    seed: int = 0
    min_corners: int = 4

    def bounds(self) -> tuple[float, float, float, float]:
        return (0.0, 0.0, float(self.image_size[0]), float(self.image_size[1]))


def euler_pose(phi: np.ndarray, translation: np.ndarray, pivot: np.ndarray) -> Pose:
    """Pose rotating about ``pivot`` (z-y-x Euler order), center at ``translation``."""
    R = (
        rotation_matrix([0.0, 0.0, phi[2]])
        @ rotation_matrix([0.0, phi[1], 0.0])
        @ rotation_matrix([phi[0], 0.0, 0.0])
    )
    t = np.asarray(translation, dtype=float)
    return Pose(rotation_vector(R), t - R @ np.asarray(pivot, dtype=float))


def draw_pose(cfg: SimConfig, rng: np.random.Generator, pivot: np.ndarray) -> Pose:
    phi = rng.uniform(cfg.rot_range[0], cfg.rot_range[1], size=3)
    t = np.array([
        rng.uniform(*cfg.tx_range),
        rng.uniform(*cfg.ty_range),
        rng.uniform(*cfg.tz_range),
    ])
    return euler_pose(phi, t, pivot)


def _visible_projection(
    cam: CameraModel, points: np.ndarray, image_size, r_limit: float
) -> tuple[np.ndarray, np.ndarray]:
    """Pixels of the points that land on the sensor within the monotone
    distortion region; returns (indices, pixels)."""
    z = points[:, 2]
    ok = z > 1e-6
    if not np.any(ok):
        return np.zeros(0, dtype=int), np.zeros((0, 2))
    radius = np.hypot(points[:, 0], points[:, 1]) / np.where(ok, z, 1.0)
    ok &= radius < r_limit
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return idx, np.zeros((0, 2))
    uv = project(cam, points[idx])
    w, h = image_size
    inside = (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    return idx[inside], uv[inside]


def _non_collinear(board_xy: np.ndarray, spacing: float) -> bool:
    """True when the corners span two board dimensions well enough for a
    homography (pose estimation needs >= 4 non-collinear corners)."""
    centered = board_xy - board_xy.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return s[-1] / np.sqrt(board_xy.shape[0]) > 0.35 * spacing


def simulate(cfg: SimConfig) -> tuple[Dataset, tuple]:
    """Generate a dataset plus the ground-truth poses actually used.

    Frames with fewer than ``min_corners`` visible corners, or with a
    near-collinear visible corner layout, are redrawn; a rejection rate
    above 99% raises CannotPlaceTargetError.
    """
    rng = np.random.default_rng(cfg.seed)
    world = cfg.target.corner_positions()
    pivot = world.mean(axis=0)
    r_limit = min(monotone_radius(cfg.truth), 1e6)
    frames = []
    poses = []
    attempts = 0
    while len(frames) < cfg.n_frames:
        attempts += 1
        if attempts > 100 * cfg.n_frames and len(frames) < 0.01 * attempts:
            raise CannotPlaceTargetError(
                f"rejected {attempts - len(frames)} of {attempts} candidate poses"
            )
        pose = draw_pose(cfg, rng, pivot)
        pts = transform(pose, world)
        idx, uv = _visible_projection(cfg.truth, pts, cfg.image_size, r_limit)
        if idx.size < cfg.min_corners:
            continue
        if not _non_collinear(world[idx, :2], cfg.target.spacing):
            continue
        if cfg.noise_sigma > 0:
            uv = uv + rng.normal(0.0, cfg.noise_sigma, size=uv.shape)
        frames.append(Frame(len(frames), idx, uv))
        poses.append(pose)
    return Dataset(cfg.target, tuple(frames)), tuple(poses)


def warped_target(
    base: TargetGeometry, amplitude: float, seed: int = 0
) -> TargetGeometry:
    """Per-corner out-of-plane offsets, uniform in +-amplitude (meters)."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(-amplitude, amplitude, size=base.n_corners)
    return TargetGeometry(base.rows, base.cols, base.spacing, z)


def inject_outliers(
    dataset: Dataset, fraction: float, magnitude_px: float, seed: int = 0
) -> Dataset:
    """Displace a random fraction of observations by ``magnitude_px`` in a
    random direction (gross-outlier model for robustness checks)."""
    if not 0 <= fraction <= 1:
        raise ValidationError("fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    frames = []
    for frame in dataset.frames:
        px = frame.pixels.copy()
        hit = rng.random(px.shape[0]) < fraction
        n_hit = int(hit.sum())
        if n_hit:
            angles = rng.uniform(0.0, 2 * np.pi, n_hit)
            px[hit] += magnitude_px * np.column_stack([np.cos(angles), np.sin(angles)])
        frames.append(Frame(frame.id, frame.corner_ids, px))
    return Dataset(dataset.target, tuple(frames))
