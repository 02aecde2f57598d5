"""Uncertainty audit: resampled covariances and image-space metrics.

Covariance estimators: the classical backpropagation (see
``calibration.standard_covariance``), a frame bootstrap that reruns the
full calibration per resample, and its cheap approximation that only
replays the last Gauss-Newton step on recomposed Jacobian rows.

Image-space metrics: the mapping error K between two cameras over a
pixel grid (optionally minimized over a compensating ray rotation), the
model matrix H of its quadratic approximation, the expected mapping
error trace(Sigma^1/2 H Sigma^1/2), the chi-square mixture distribution
of K, and the Monte-Carlo baseline maxERE.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import geometry
from .calibration import (
    CalibrationResult,
    CovarianceEstimate,
    Dataset,
    calibrate,
)
from .cameras import CameraModel, project_jacobians, unproject, _project_ab
from .errors import (
    DimensionMismatchError,
    GridTooSmallError,
    NotPSDError,
    RankDeficientError,
    ReplicateFailureError,
    SolverError,
    ValidationError,
)
from .geometry import Pose
from .solver import LeastSquaresProblem, SolveOptions, gauss_newton_step, solve


@dataclass(frozen=True)
class BootstrapConfig:
    """Shared settings of the resampling estimators.

    The same (n_samples, seed) pair makes the full and the approximated
    bootstrap consume identical frame draws.
    """

    n_samples: int = 200
    seed: int = 0
    mode: str = "full"  # "full" | "approximated"
    max_failure_fraction: float = 0.10

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValidationError("bootstrap needs n_samples >= 2")
        if self.mode not in ("full", "approximated"):
            raise ValidationError(f"unknown bootstrap mode {self.mode!r}")


def bootstrap_counts(n_frames: int, cfg: BootstrapConfig) -> np.ndarray:
    """Frame multiplicities of every bootstrap sample, (n_samples, n_frames)."""
    rng = np.random.default_rng(cfg.seed)
    draws = rng.integers(0, n_frames, size=(cfg.n_samples, n_frames))
    counts = np.zeros((cfg.n_samples, n_frames), dtype=int)
    for i in range(cfg.n_samples):
        counts[i] = np.bincount(draws[i], minlength=n_frames)
    return counts


def _covariance_from_samples(thetas: list[np.ndarray], method: str) -> CovarianceEstimate:
    T = np.asarray(thetas)
    mean = T.mean(axis=0)
    dev = T - mean
    sigma = dev.T @ dev / (T.shape[0] - 1)
    return CovarianceEstimate(sigma=sigma, method=method, n_samples=T.shape[0])


def bootstrap_covariance(
    dataset: Dataset,
    family: str,
    result: CalibrationResult,
    cfg: BootstrapConfig,
    options: Optional[SolveOptions] = None,
) -> CovarianceEstimate:
    """Full bootstrap: recalibrate on every frame resample.

    Each sample draws N_F frames with replacement; repeated frames share
    a single pose block and contribute duplicated residual rows. Every
    replicate starts at the full-data optimum. Replicates that fail to
    converge are dropped; more than ``max_failure_fraction`` failures is
    an error.
    """
    if dataset.n_frames < 5:
        raise ValidationError("bootstrap needs at least 5 frames")
    counts = bootstrap_counts(dataset.n_frames, cfg)
    thetas = []
    failures = 0
    for sample in counts:
        poses0 = [p for p, c in zip(result.poses, sample) if c > 0]
        try:
            rep = calibrate(
                dataset,
                family,
                init=(result.cam, poses0),
                multiplicities=sample,
                options=options,
            )
            thetas.append(rep.cam.theta)
        except SolverError:
            failures += 1
    if failures > cfg.max_failure_fraction * cfg.n_samples:
        raise ReplicateFailureError(
            f"{failures}/{cfg.n_samples} bootstrap replicates failed"
        )
    return _covariance_from_samples(thetas, "bs")


def recompose_rows(result: CalibrationResult, sample: np.ndarray) -> np.ndarray:
    """Row indices stacking each frame's rows ``sample[i]`` times."""
    idx = []
    for (fid, start, stop), count in zip(result.frame_rows, sample):
        for _ in range(int(count)):
            idx.append(np.arange(start, stop))
    if not idx:
        return np.zeros(0, dtype=int)
    return np.concatenate(idx)


def approx_bootstrap_covariance(
    result: CalibrationResult,
    cfg: BootstrapConfig,
    intrinsics_only_step: bool = False,
) -> CovarianceEstimate:
    """Approximated bootstrap: one plain Gauss-Newton step per resample.

    The final Jacobian and residuals are recomposed per sample (rows of
    drawn frames, with multiplicity); one undamped normal-equation step
    from the optimum yields the replicate's intrinsics. Pose blocks of
    drawn frames take part in the step unless ``intrinsics_only_step``.
    """
    J = result.jacobian
    r = result.residuals
    k = result.cam.n_params
    counts = bootstrap_counts(len(result.frame_rows), cfg)
    thetas = []
    failures = 0
    for sample in counts:
        rows = recompose_rows(result, sample)
        if intrinsics_only_step:
            cols = np.arange(k)
        else:
            present = [i for i, c in enumerate(sample) if c > 0]
            cols = np.concatenate(
                [np.arange(k)] + [k + 6 * i + np.arange(6) for i in present]
            )
        try:
            delta = gauss_newton_step(J[np.ix_(rows, cols)], r[rows])
            thetas.append(result.cam.theta + delta[:k])
        except SolverError:
            failures += 1
    if failures > cfg.max_failure_fraction * cfg.n_samples:
        raise ReplicateFailureError(
            f"{failures}/{cfg.n_samples} aBS replicates were rank deficient"
        )
    return _covariance_from_samples(thetas, "abs")


# -- image-space metrics -------------------------------------------------------

def pixel_grid(
    bounds: tuple[float, float, float, float], nx: int = 10, ny: int = 10
) -> np.ndarray:
    """Uniform pixel lattice with half-cell margins, shape (nx * ny, 2)."""
    u0, v0, u1, v1 = bounds
    us = u0 + (np.arange(nx) + 0.5) * (u1 - u0) / nx
    vs = v0 + (np.arange(ny) + 0.5) * (v1 - v0) / ny
    U, V = np.meshgrid(us, vs, indexing="xy")
    return np.column_stack([U.ravel(), V.ravel()])


def _safe_residual(cam: CameraModel, grid: np.ndarray, points: np.ndarray) -> np.ndarray:
    """grid - project(points), with inf rows where z <= 0."""
    z = points[:, 2]
    if np.any(z <= 0):
        return np.full(2 * points.shape[0], np.inf)
    pred = _project_ab(cam, points[:, 0] / z, points[:, 1] / z)
    return (grid - pred).reshape(-1)


def mapping_error(
    cam_hat: CameraModel,
    cam_bar: CameraModel,
    grid: np.ndarray,
    compensation: str = "rotation",
    return_rotation: bool = False,
):
    """Mean squared pixel difference between two camera mappings.

    Grid pixels are unprojected under ``cam_bar`` and reprojected under
    ``cam_hat``; the average squared coordinate difference (normalization
    1 / (2 N_G)) is returned in px^2. With ``compensation="rotation"``
    the viewing rays are first rotated by the error-minimizing rotation
    (axis-angle, Levenberg-Marquardt, identity start).
    """
    grid = np.asarray(grid, dtype=float).reshape(-1, 2)
    rays = unproject(cam_bar, grid)
    n_g = grid.shape[0]
    if compensation == "none":
        r = _safe_residual(cam_hat, grid, rays)
        if not np.all(np.isfinite(r)):
            raise ValidationError("rays not projectable under cam_hat")
        value = float(r @ r) / (2 * n_g)
        return (value, np.zeros(3)) if return_rotation else value
    if compensation != "rotation":
        raise ValidationError(f"unknown compensation {compensation!r}")

    def residual(rho):
        return _safe_residual(cam_hat, grid, rays @ geometry.rotation_matrix(rho).T)

    def jacobian(rho):
        pose = Pose(rho, np.zeros(3))
        pts = rays @ pose.matrix.T
        _, _, J_pt = project_jacobians(cam_hat, pts)
        J_rot, _ = geometry.transform_jacobians(pose, rays)
        return np.einsum("nij,njk->nik", J_pt, J_rot).reshape(-1, 3)

    problem = LeastSquaresProblem(residual=residual, jacobian=jacobian, n_params=3)
    report = solve(problem, np.zeros(3))
    value = float(report.cost) / (2 * n_g)
    return (value, report.xi) if return_rotation else value


@dataclass(frozen=True)
class ModelMatrix:
    """Quadratic form of the second-order mapping-error approximation."""

    H: np.ndarray
    grid: np.ndarray
    compensation: str

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        H = 0.5 * (H + H.T)
        H.flags.writeable = False
        object.__setattr__(self, "H", H)


def model_matrix(
    cam_hat: CameraModel,
    grid: np.ndarray,
    compensation: str = "rotation",
    rel_step: float = 1e-5,
    abs_floor: float = 1e-8,
) -> ModelMatrix:
    """Model matrix H = J_res^T J_res / (2 N_G) by central differences.

    Mapping residuals are differentiated at zero parameter error and
    identity compensation; with rotation compensation the span of the
    rotation Jacobian is projected out before forming H, which
    linearizes the inner minimization of the mapping error.
    """
    if compensation not in ("rotation", "none"):
        raise ValidationError(f"unknown compensation {compensation!r}")
    grid = np.asarray(grid, dtype=float).reshape(-1, 2)
    n_g = grid.shape[0]
    k = cam_hat.n_params
    if 2 * n_g < k + 3:
        raise GridTooSmallError("grid too small for the requested model matrix")

    theta = cam_hat.theta
    J_theta = np.empty((2 * n_g, k))
    for i in range(k):
        h = max(rel_step * abs(theta[i]), abs_floor)
        step = np.zeros(k)
        step[i] = h
        rp = grid - _project_ab_points(cam_hat, unproject(cam_hat.with_theta(theta + step), grid))
        rm = grid - _project_ab_points(cam_hat, unproject(cam_hat.with_theta(theta - step), grid))
        J_theta[:, i] = (rp - rm).reshape(-1) / (2 * h)

    if compensation == "none":
        J_res = J_theta
    else:
        rays = unproject(cam_hat, grid)
        J_R = np.empty((2 * n_g, 3))
        for i in range(3):
            h = abs_floor
            rho = np.zeros(3)
            rho[i] = h
            rp = grid - _project_ab_points(cam_hat, rays @ geometry.rotation_matrix(rho).T)
            rho[i] = -h
            rm = grid - _project_ab_points(cam_hat, rays @ geometry.rotation_matrix(rho).T)
            J_R[:, i] = (rp - rm).reshape(-1) / (2 * h)
        G = J_R.T @ J_R
        try:
            J_res = J_theta - J_R @ np.linalg.solve(G, J_R.T @ J_theta)
        except np.linalg.LinAlgError:
            raise RankDeficientError("rotation Jacobian is rank deficient on this grid")
    H = J_res.T @ J_res / (2 * n_g)
    return ModelMatrix(H=H, grid=grid, compensation=compensation)


def _project_ab_points(cam: CameraModel, points: np.ndarray) -> np.ndarray:
    z = points[:, 2]
    return _project_ab(cam, points[:, 0] / z, points[:, 1] / z)


@dataclass(frozen=True)
class EmeReport:
    """Expected mapping error and the spectrum behind its K distribution."""

    eme: float
    eigenvalues: np.ndarray  # descending, of Sigma^1/2 H Sigma^1/2
    method: str

    def __post_init__(self):
        ev = np.asarray(self.eigenvalues, dtype=float)
        ev.flags.writeable = False
        object.__setattr__(self, "eigenvalues", ev)

    @property
    def sqrt_eme(self) -> float:
        return float(np.sqrt(max(self.eme, 0.0)))


def _psd_sqrt(M: np.ndarray, name: str) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    tr = max(float(np.sum(w)), 0.0)
    if w.min() < -1e-8 * max(tr, 1e-30):
        raise NotPSDError(f"{name} has negative eigenvalue {w.min():.3e}")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def eme(sigma, H, method: Optional[str] = None) -> EmeReport:
    """Expected mapping error trace(Sigma^1/2 H Sigma^1/2) in px^2.

    Accepts CovarianceEstimate/ModelMatrix wrappers or plain arrays;
    returns the eigenvalues of the symmetrized product, whose sum equals
    trace(Sigma H).
    """
    if isinstance(sigma, CovarianceEstimate):
        method = method or sigma.method
        sigma = sigma.sigma
    if isinstance(H, ModelMatrix):
        H = H.H
    sigma = np.asarray(sigma, dtype=float)
    H = np.asarray(H, dtype=float)
    if sigma.shape != H.shape or sigma.shape[0] != sigma.shape[1]:
        raise DimensionMismatchError(
            f"covariance {sigma.shape} vs model matrix {H.shape}"
        )
    S = _psd_sqrt(sigma, "covariance")
    _psd_sqrt(H, "model matrix")  # PSD check only
    M = S @ H @ S
    ev = np.linalg.eigh(0.5 * (M + M.T))[0][::-1]
    return EmeReport(eme=float(ev.sum()), eigenvalues=ev, method=method or "unknown")


def k_distribution(
    report: EmeReport, n_draws: int = 10000, seed: int = 0
) -> tuple[np.ndarray, dict]:
    """Sample the chi-square mixture sum(lambda_n Q_n), Q_n ~ chi2(1).

    Monte-Carlo stand-in for the closed-form CDF of the quadratic form;
    returns (samples, quantile summary).
    """
    rng = np.random.default_rng(seed)
    lam = np.clip(report.eigenvalues, 0.0, None)
    q = rng.chisquare(1, size=(n_draws, lam.size))
    samples = q @ lam
    qs = np.quantile(samples, [0.05, 0.25, 0.5, 0.75, 0.95])
    summary = {
        "mean": float(samples.mean()),
        "q05": float(qs[0]),
        "q25": float(qs[1]),
        "median": float(qs[2]),
        "q75": float(qs[3]),
        "q95": float(qs[4]),
    }
    return samples, summary


def max_ere(
    cam_hat: CameraModel,
    sigma,
    bounds: tuple[float, float, float, float],
    n_mc: int = 1000,
    seed: int = 0,
    grid_shape: tuple[int, int] = (5, 5),
) -> float:
    """Monte-Carlo baseline: largest per-point reprojection scatter (px).

    3D points are the unprojections of a pixel lattice at unit depth;
    intrinsics are sampled from N(theta_hat, Sigma) and each point's
    scatter is the RMS distance from its mean reprojection. Draws that
    leave the model's valid region are rejected (error above 50%).
    """
    if isinstance(sigma, CovarianceEstimate):
        sigma = sigma.sigma
    sigma = np.asarray(sigma, dtype=float)
    S = _psd_sqrt(sigma, "covariance")
    grid = pixel_grid(bounds, *grid_shape)
    rays = unproject(cam_hat, grid)
    points = rays / rays[:, 2:3]
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_mc, cam_hat.n_params))
    samples = cam_hat.theta + z @ S.T
    uvs = []
    rejected = 0
    for th in samples:
        try:
            cam = cam_hat.with_theta(th)
            uvs.append(_project_ab_points(cam, points))
        except (ValidationError, FloatingPointError):
            rejected += 1
    if rejected > 0.5 * n_mc:
        raise ReplicateFailureError(
            f"{rejected}/{n_mc} intrinsic draws left the model's valid region"
        )
    U = np.asarray(uvs)  # (n_ok, n_points, 2)
    dev = U - U.mean(axis=0, keepdims=True)
    scatter = np.sqrt(np.mean(np.sum(dev * dev, axis=2), axis=0))
    return float(scatter.max())


def build_uncertainty_report(
    cov: CovarianceEstimate,
    eme_report: EmeReport,
    max_ere_px: float,
    grid_shape: tuple[int, int],
) -> dict:
    """Assemble the uncertainty JSON payload (module interface schema)."""
    return {
        "method": cov.method,
        "n_samples": cov.n_samples,
        "sigma_theta": [[float(v) for v in row] for row in cov.sigma],
        "eme_px2": float(eme_report.eme),
        "sqrt_eme_px": eme_report.sqrt_eme,
        "eigenvalues": [float(v) for v in eme_report.eigenvalues],
        "trace_sigma": float(np.trace(cov.sigma)),
        "max_ere_px": float(max_ere_px),
        "grid": {"nx": int(grid_shape[0]), "ny": int(grid_shape[1])},
    }
