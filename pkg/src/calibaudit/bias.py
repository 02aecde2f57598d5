"""Systematic-error audit: virtual targets, detector noise, bias ratio.

The idea: re-fitting the pose of tiny 4-corner sub-targets with fixed
intrinsics compensates nearly all systematic error, so their pooled
refit residuals estimate the raw detector noise. Comparing that with the
full calibration's residual level separates bias from noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import norm

from .calibration import CalibrationResult, Dataset, TargetGeometry, pose_only_refit, robust_sigma
from .errors import SolverError, TargetTooSmallError, TooFewResidualsError, ValidationError


@dataclass(frozen=True)
class BiasReport:
    """Noise/bias decomposition of a calibration's residual level."""

    sigma_d_sq: float  # detector variance estimate from virtual targets, px^2
    s_d_sq: float  # dof-corrected robust MSE of the calibration, px^2
    bias_sq: float  # systematic contribution, px^2
    bias_ratio: float
    n_virtual_targets: int  # refits pooled (over frames and quads)
    n_failed_refits: int
    pool_size: int  # residual components entering the MAD

    @property
    def sigma_d(self) -> float:
        return float(np.sqrt(self.sigma_d_sq))

    @property
    def bias(self) -> float:
        return float(np.sqrt(self.bias_sq))

    @property
    def sqrt_bias_ratio(self) -> float:
        return float(np.sqrt(self.bias_ratio))

    def to_dict(self) -> dict:
        return {
            "sigma_d_px": self.sigma_d,
            "s_d_px": float(np.sqrt(self.s_d_sq)),
            "bias_px": self.bias,
            "bias_ratio": self.bias_ratio,
            "sqrt_bias_ratio": self.sqrt_bias_ratio,
            "n_virtual_targets": self.n_virtual_targets,
        }


def decompose_virtual_targets(target: TargetGeometry) -> list[np.ndarray]:
    """Disjoint 2x2 corner blocks tiling the grid, row-major order.

    Trailing rows/columns that do not fill a block are dropped.
    """
    if target.rows < 2 or target.cols < 2:
        raise TargetTooSmallError("need at least a 2x2 corner grid")
    quads = []
    for r in range(0, target.rows - 1, 2):
        for c in range(0, target.cols - 1, 2):
            base = r * target.cols + c
            quads.append(
                np.array([base, base + 1, base + target.cols, base + target.cols + 1])
            )
    return quads


def estimate_detector_noise(
    result: CalibrationResult, dataset: Dataset
) -> tuple[float, dict]:
    """Detector variance sigma_d^2 from virtual-target pose refits.

    Every fully observed 2x2 block in every frame is refit with the
    calibrated intrinsics held fixed, starting at the frame's calibrated
    pose. All refit residual components are pooled; the squared robust
    sigma (1.4826 * MAD) times the redundancy correction 4 = 1/(1 - 6/8)
    gives sigma_d^2. Returns (sigma_d_sq, info dict with refit counts).
    """
    quads = decompose_virtual_targets(dataset.target)
    world = dataset.target.corner_positions()
    pool = []
    n_refits = 0
    n_failed = 0
    for frame, pose in zip(dataset.frames, result.poses):
        present = np.isin(quads, frame.corner_ids)
        idx_of = {cid: k for k, cid in enumerate(frame.corner_ids)}
        for quad, ok in zip(quads, present.all(axis=1)):
            if not ok:
                continue
            rows = [idx_of[c] for c in quad]
            try:
                _, res = pose_only_refit(result.cam, world[quad], frame.pixels[rows], pose)
            except SolverError:
                n_failed += 1
                continue
            n_refits += 1
            pool.append(res)
    if not pool:
        raise TooFewResidualsError("no virtual target could be refit")
    pooled = np.sort(np.concatenate(pool), kind="stable")  # order-normalized
    sigma = robust_sigma(pooled)
    sigma_d_sq = 4.0 * sigma * sigma
    info = {
        "n_virtual_targets": n_refits,
        "n_failed_refits": n_failed,
        "pool_size": pooled.size,
    }
    return sigma_d_sq, info


def bias_ratio(
    result: CalibrationResult, sigma_d_sq: float, info: Optional[dict] = None
) -> BiasReport:
    """Bias decomposition of the calibration residual level.

    s_d^2 is the dof-corrected robust MSE; the systematic part is
    max(s_d^2 - sigma_d^2, 0), and the bias ratio is its fraction of the
    residual level, clamped to [0, 1] by construction.
    """
    if sigma_d_sq < 0:
        raise ValidationError("sigma_d_sq must be non-negative")
    s_d_sq = result.robust_s_d_sq
    bias_sq = max(s_d_sq - sigma_d_sq, 0.0)
    dof = result.dof_factor
    br = bias_sq * dof / result.robust_mse if result.robust_mse > 0 else 0.0
    br = min(max(br, 0.0), 1.0)
    info = info or {}
    return BiasReport(
        sigma_d_sq=float(sigma_d_sq),
        s_d_sq=float(s_d_sq),
        bias_sq=float(bias_sq),
        bias_ratio=float(br),
        n_virtual_targets=int(info.get("n_virtual_targets", 0)),
        n_failed_refits=int(info.get("n_failed_refits", 0)),
        pool_size=int(info.get("pool_size", 0)),
    )


def audit_bias(result: CalibrationResult, dataset: Dataset) -> BiasReport:
    """Convenience: noise estimate plus bias ratio in one call."""
    sigma_d_sq, info = estimate_detector_noise(result, dataset)
    return bias_ratio(result, sigma_d_sq, info)


def kld_bias_metric(
    result: CalibrationResult,
    dataset: Dataset,
    grid: tuple[int, int] = (4, 4),
    min_count: int = 30,
    bins: int = 8,
) -> float:
    """Median KL divergence between residual vectors and fitted Gaussians.

    The image is split into ``grid`` cells by observation position; in
    each cell with at least ``min_count`` residual 2-vectors a Gaussian
    is fitted and a discrete KLD (empirical || fitted) is computed on a
    bins x bins histogram over +-3 fitted standard deviations (whitened
    coordinates, exact Gaussian bin masses, Laplace smoothing
    1/(bins * n) on both sides). Comparison baseline, not a contract.
    """
    u0, v0, u1, v1 = dataset.pixel_bounds()
    nx, ny = grid
    pix = np.vstack([f.pixels for f in dataset.frames])
    res = result.residuals.reshape(-1, 2)
    ix = np.clip(((pix[:, 0] - u0) / max(u1 - u0, 1e-9) * nx).astype(int), 0, nx - 1)
    iy = np.clip(((pix[:, 1] - v0) / max(v1 - v0, 1e-9) * ny).astype(int), 0, ny - 1)
    cell = iy * nx + ix
    klds = []
    edges = np.linspace(-3.0, 3.0, bins + 1)
    cdf = norm.cdf(edges)
    mass_1d = np.diff(cdf)
    q = np.outer(mass_1d, mass_1d)
    q = q / q.sum()
    for c in range(nx * ny):
        sel = cell == c
        n = int(sel.sum())
        if n < min_count:
            continue
        r = res[sel]
        mu = r.mean(axis=0)
        cov = np.cov(r.T, ddof=1)
        try:
            L = np.linalg.cholesky(cov + 1e-18 * np.eye(2))
        except np.linalg.LinAlgError:
            continue
        z = np.linalg.solve(L, (r - mu).T).T
        inside = np.all(np.abs(z) < 3.0, axis=1)
        z = z[inside]
        if z.shape[0] < min_count:
            continue
        hist, _, _ = np.histogram2d(z[:, 0], z[:, 1], bins=[edges, edges])
        m = z.shape[0]
        alpha = 1.0 / (bins * bins * m)
        p = (hist / m + alpha).ravel()
        p /= p.sum()
        qs = (q + alpha).ravel()
        qs /= qs.sum()
        klds.append(float(np.sum(p * np.log(p / qs))))
    if not klds:
        raise TooFewResidualsError("every image cell is below the residual threshold")
    return float(np.median(klds))
