"""Target-based calibration: dataset model, init, bundle adjustment.

The parameter vector of a calibration is ``xi = [theta | pose_0 | ...]``
with one 6-dof pose block per distinct frame, in dataset order. Residual
rows are frame-major, corner-major (ascending corner id), u before v;
that ordering is part of the public contract because the bootstrap
machinery recomposes rows by frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import geometry
from .cameras import FAMILY_SIZES, CameraModel, canonical_family, project_jacobians
from .errors import (
    DegenerateConfigurationError,
    InsufficientObservationsError,
    RankDeficientError,
    TooFewCornersError,
    ValidationError,
)
from .geometry import Pose
from .solver import (
    CauchyKernel,
    LeastSquaresProblem,
    ParameterBlock,
    SolveOptions,
    SolveReport,
    solve,
    solve_normal_equations,
)

#: tan-expansion distortion that makes the equidistant model mimic a pinhole
_FISHEYE_PINHOLE_KS = (1.0 / 3.0, 2.0 / 15.0, 17.0 / 315.0, 62.0 / 2835.0)


def robust_sigma(values: np.ndarray) -> float:
    """1.4826 * median absolute deviation about zero."""
    return 1.4826 * float(np.median(np.abs(np.asarray(values, dtype=float))))


@dataclass(frozen=True)
class TargetGeometry:
    """Planar corner grid; ids are row-major (id = row * cols + col)."""

    rows: int
    cols: int
    spacing: float
    z_offsets: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.spacing <= 0:
            raise ValidationError("target needs positive grid counts and spacing")
        if self.z_offsets is not None:
            z = np.asarray(self.z_offsets, dtype=float).reshape(-1).copy()
            if z.size != self.rows * self.cols:
                raise ValidationError("z_offsets length must equal rows * cols")
            z.flags.writeable = False
            object.__setattr__(self, "z_offsets", z)

    @property
    def n_corners(self) -> int:
        return self.rows * self.cols

    def corner_positions(self) -> np.ndarray:
        """World coordinates of all corners, shape (n_corners, 3)."""
        r, c = np.divmod(np.arange(self.n_corners), self.cols)
        z = self.z_offsets if self.z_offsets is not None else np.zeros(self.n_corners)
        return np.column_stack([c * self.spacing, r * self.spacing, z])

    def planar(self) -> "TargetGeometry":
        return TargetGeometry(self.rows, self.cols, self.spacing, None)


@dataclass(frozen=True)
class Frame:
    """Observed corners of one image: ids plus pixel coordinates."""

    id: int
    corner_ids: np.ndarray
    pixels: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.corner_ids, dtype=int).reshape(-1)
        px = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        if ids.size != px.shape[0]:
            raise ValidationError("corner ids and pixels disagree in length")
        if np.unique(ids).size != ids.size:
            raise ValidationError(f"frame {self.id}: duplicate corner observation")
        order = np.argsort(ids, kind="stable")
        ids = ids[order].copy()
        px = px[order].copy()
        ids.flags.writeable = False
        px.flags.writeable = False
        object.__setattr__(self, "corner_ids", ids)
        object.__setattr__(self, "pixels", px)

    @property
    def n_corners(self) -> int:
        return self.corner_ids.size


@dataclass(frozen=True)
class Dataset:
    """A target plus per-frame corner observations."""

    target: TargetGeometry
    frames: tuple

    def __post_init__(self):
        frames = tuple(self.frames)
        seen = set()
        for f in frames:
            if f.id in seen:
                raise ValidationError(f"duplicate frame id {f.id}")
            seen.add(f.id)
            if f.corner_ids.size and (
                f.corner_ids.min() < 0 or f.corner_ids.max() >= self.target.n_corners
            ):
                raise ValidationError(f"frame {f.id}: corner id out of range")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def n_observations(self) -> int:
        """Scalar observation count N (two per observed corner)."""
        return 2 * sum(f.n_corners for f in self.frames)

    def with_target(self, target: TargetGeometry) -> "Dataset":
        return Dataset(target, self.frames)

    def pixel_bounds(self) -> tuple[float, float, float, float]:
        """(u_min, v_min, u_max, v_max) over all observations."""
        px = np.vstack([f.pixels for f in self.frames if f.n_corners])
        return (
            float(px[:, 0].min()),
            float(px[:, 1].min()),
            float(px[:, 0].max()),
            float(px[:, 1].max()),
        )


@dataclass(frozen=True)
class CovarianceEstimate:
    """Intrinsic-parameter covariance with its estimation method tag."""

    sigma: np.ndarray
    method: str  # "std" | "bs" | "abs"
    n_samples: Optional[int] = None

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=float)
        s = 0.5 * (s + s.T)
        s.flags.writeable = False
        object.__setattr__(self, "sigma", s)


@dataclass
class CalibrationResult:
    """Optimized camera, poses and residual statistics of one calibration."""

    cam: CameraModel
    poses: tuple
    residuals: np.ndarray
    jacobian: np.ndarray
    mse: float
    rmse: float
    robust_mse: float
    n_obs: int
    n_params: int
    frame_rows: tuple  # (frame_id, start, stop) per frame, residual row ranges
    iterations: int
    converged: bool
    gradient_inf_norm: float

    @property
    def dof_factor(self) -> float:
        """(1 - N_P / N), the degrees-of-freedom correction."""
        return 1.0 - self.n_params / self.n_obs

    @property
    def s_d_sq(self) -> float:
        """Estimated detector variance from the plain MSE (accuracy estimate)."""
        return self.mse / self.dof_factor

    @property
    def robust_s_d_sq(self) -> float:
        """Same correction applied to the robust (MAD-based) MSE."""
        return self.robust_mse / self.dof_factor


def _frame_residual(cam: CameraModel, pose: Pose, world: np.ndarray, pixels: np.ndarray):
    """Residual rows (obs - pred) for one frame; inf rows for z <= 0."""
    pts = world @ pose.matrix.T + pose.translation
    z = pts[:, 2]
    if np.any(z <= 0):
        bad = np.full(2 * world.shape[0], np.inf)
        return bad
    a = pts[:, 0] / z
    b = pts[:, 1] / z
    from .cameras import _project_ab  # shared forward math

    pred = _project_ab(cam, a, b)
    return (pixels - pred).reshape(-1)


def calibration_residuals(
    dataset: Dataset, cam: CameraModel, poses: Sequence[Pose]
) -> np.ndarray:
    """Residual vector in the contractual ordering for (theta, poses)."""
    world = dataset.target.corner_positions()
    parts = []
    for frame, pose in zip(dataset.frames, poses):
        parts.append(_frame_residual(cam, pose, world[frame.corner_ids], frame.pixels))
    return np.concatenate(parts) if parts else np.zeros(0)


class CalibrationProblem:
    """Bundle-adjustment problem over intrinsics and per-frame poses.

    ``multiplicities`` repeats a frame's residual rows (bootstrap
    recomposition); frames with multiplicity zero are dropped together
    with their pose block.
    """

    def __init__(
        self,
        dataset: Dataset,
        family: str,
        multiplicities: Optional[np.ndarray] = None,
        kernel: Optional[CauchyKernel] = None,
    ):
        self.dataset = dataset
        self.family = canonical_family(family)
        self.n_theta = FAMILY_SIZES[self.family]
        world = dataset.target.corner_positions()
        if multiplicities is None:
            multiplicities = np.ones(dataset.n_frames, dtype=int)
        multiplicities = np.asarray(multiplicities, dtype=int)
        if multiplicities.size != dataset.n_frames:
            raise ValidationError("one multiplicity per frame required")
        self.entries = []  # (frame, world_subset, mult)
        for frame, mult in zip(dataset.frames, multiplicities):
            if mult > 0:
                self.entries.append((frame, world[frame.corner_ids], int(mult)))
        if not self.entries:
            raise ValidationError("no frames with positive multiplicity")
        self.kernel = kernel

        self.n_rows = sum(2 * f.n_corners * m for f, _, m in self.entries)
        self.n_params = self.n_theta + 6 * len(self.entries)
        rows, frame_rows, row_ids = [], [], []
        start = 0
        for frame, _, mult in self.entries:
            stop = start + 2 * frame.n_corners * mult
            frame_rows.append((frame.id, start, stop))
            row_ids.append(np.full(stop - start, frame.id))
            start = stop
        self.frame_rows = tuple(frame_rows)
        self.row_frame_ids = np.concatenate(row_ids)
        self.blocks = [ParameterBlock("intrinsics", 0, self.n_theta)] + [
            ParameterBlock("pose", self.n_theta + 6 * i, 6, frame_id=f.id)
            for i, (f, _, _) in enumerate(self.entries)
        ]

    # -- packing ------------------------------------------------------------

    def pack(self, cam: CameraModel, poses: Sequence[Pose]) -> np.ndarray:
        if len(poses) != len(self.entries):
            raise ValidationError("one pose per active frame required")
        return np.concatenate([cam.theta] + [p.as_vector() for p in poses])

    def unpack(self, xi: np.ndarray):
        cam = CameraModel(self.family, xi[: self.n_theta])
        poses = tuple(
            Pose.from_vector(xi[self.n_theta + 6 * i : self.n_theta + 6 * (i + 1)])
            for i in range(len(self.entries))
        )
        return cam, poses

    # -- residual / jacobian --------------------------------------------------

    def residual(self, xi: np.ndarray) -> np.ndarray:
        cam, poses = self.unpack(xi)
        parts = []
        for (frame, world, mult), pose in zip(self.entries, poses):
            r = _frame_residual(cam, pose, world, frame.pixels)
            parts.append(r if mult == 1 else np.tile(r, mult))
        return np.concatenate(parts)

    def jacobian(self, xi: np.ndarray) -> np.ndarray:
        cam, poses = self.unpack(xi)
        J = np.zeros((self.n_rows, self.n_params))
        for i, ((frame, world, mult), pose) in enumerate(zip(self.entries, poses)):
            pts = world @ pose.matrix.T + pose.translation
            _, J_theta, J_pt = project_jacobians(cam, pts)
            J_rot, _ = geometry.transform_jacobians(pose, world)
            n = world.shape[0]
            block = np.empty((n, 2, 6))
            block[:, :, :3] = np.einsum("nij,njk->nik", J_pt, J_rot)
            block[:, :, 3:] = J_pt
            jt = J_theta.reshape(2 * n, self.n_theta)
            jp = block.reshape(2 * n, 6)
            _, start, stop = self.frame_rows[i]
            col = self.n_theta + 6 * i
            step = 2 * n
            for m in range(mult):
                sl = slice(start + m * step, start + (m + 1) * step)
                J[sl, : self.n_theta] = jt
                J[sl, col : col + 6] = jp
        return J

    def as_least_squares(self) -> LeastSquaresProblem:
        return LeastSquaresProblem(
            residual=self.residual,
            jacobian=self.jacobian,
            n_params=self.n_params,
            blocks=self.blocks,
            row_frame_ids=self.row_frame_ids,
            kernel=self.kernel,
        )


# -- initialization ----------------------------------------------------------

def _normalizing_similarity(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    scale = np.sqrt(2.0) / max(np.mean(np.linalg.norm(pts - centroid, axis=1)), 1e-12)
    return np.array([
        [scale, 0.0, -scale * centroid[0]],
        [0.0, scale, -scale * centroid[1]],
        [0.0, 0.0, 1.0],
    ])


def _homography(board_xy: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Normalized DLT homography mapping board plane coords to pixels."""
    if board_xy.shape[0] < 4:
        raise DegenerateConfigurationError("homography needs at least 4 corners")
    Tb = _normalizing_similarity(board_xy)
    Tp = _normalizing_similarity(pixels)
    ones = np.ones((board_xy.shape[0], 1))
    b = (np.hstack([board_xy, ones]) @ Tb.T)[:, :2]
    p = (np.hstack([pixels, ones]) @ Tp.T)[:, :2]
    n = b.shape[0]
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = b
    A[0::2, 2] = 1.0
    A[0::2, 6:8] = -p[:, [0]] * b
    A[0::2, 8] = -p[:, 0]
    A[1::2, 3:5] = b
    A[1::2, 5] = 1.0
    A[1::2, 6:8] = -p[:, [1]] * b
    A[1::2, 8] = -p[:, 1]
    _, s, Vt = np.linalg.svd(A)
    if s[-2] < 1e-10 * s[0]:
        raise DegenerateConfigurationError("degenerate corner configuration")
    H = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Tp) @ H @ Tb
    return H / H[2, 2]


def _zhang_intrinsics(homographies: list[np.ndarray]) -> tuple[float, float, float, float]:
    """Closed-form zero-skew intrinsics from >= 3 homographies."""

    def v(H, i, j):
        return np.array([
            H[0, i] * H[0, j],
            H[1, i] * H[1, j],
            H[2, i] * H[0, j] + H[0, i] * H[2, j],
            H[2, i] * H[1, j] + H[1, i] * H[2, j],
            H[2, i] * H[2, j],
        ])

    rows = []
    for H in homographies:
        rows.append(v(H, 0, 1))
        rows.append(v(H, 0, 0) - v(H, 1, 1))
    V = np.array(rows)
    _, _, Vt = np.linalg.svd(V)
    b = Vt[-1]
    if b[0] < 0:
        b = -b
    b1, b2, b3, b4, b5 = b
    if b1 <= 0 or b2 <= 0:
        raise DegenerateConfigurationError("conic estimate not positive definite")
    u0 = -b3 / b1
    v0 = -b4 / b2
    lam = b5 - b3 * b3 / b1 - b4 * b4 / b2
    if lam <= 0:
        raise DegenerateConfigurationError("negative scale in intrinsic extraction")
    return float(np.sqrt(lam / b1)), float(np.sqrt(lam / b2)), float(u0), float(v0)


def _focals_known_pp(
    homographies: list[np.ndarray], pp: tuple[float, float]
) -> tuple[float, float]:
    """fx, fy from orthogonality constraints with a fixed principal point."""
    T = np.array([[1.0, 0.0, -pp[0]], [0.0, 1.0, -pp[1]], [0.0, 0.0, 1.0]])
    M, d = [], []
    for H in homographies:
        Hc = T @ H
        h1, h2 = Hc[:, 0], Hc[:, 1]
        M.append([h1[0] * h2[0], h1[1] * h2[1]])
        d.append(-h1[2] * h2[2])
        M.append([h1[0] ** 2 - h2[0] ** 2, h1[1] ** 2 - h2[1] ** 2])
        d.append(-(h1[2] ** 2 - h2[2] ** 2))
    w, *_ = np.linalg.lstsq(np.array(M), np.array(d), rcond=None)
    if w[0] <= 0 or w[1] <= 0:
        raise DegenerateConfigurationError("focal estimate not positive")
    return float(1.0 / np.sqrt(w[0])), float(1.0 / np.sqrt(w[1]))


def _pose_from_homography(H: np.ndarray, K: np.ndarray) -> Pose:
    M = np.linalg.solve(K, H)
    lam = 1.0 / np.linalg.norm(M[:, 0])
    if M[2, 2] * lam < 0:
        lam = -lam
    r1 = lam * M[:, 0]
    r2 = lam * M[:, 1]
    t = lam * M[:, 2]
    R0 = np.column_stack([r1, r2, np.cross(r1, r2)])
    U, _, Vt = np.linalg.svd(R0)
    R = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt
    return Pose.from_matrix(R, t)


def initialize(
    dataset: Dataset,
    family: str,
    assume_principal_point: Optional[tuple[float, float]] = None,
) -> tuple[CameraModel, tuple]:
    """Homography-based closed-form starting point (Zhang-style).

    Needs >= 3 frames with >= 4 non-collinear corners each. With
    ``assume_principal_point`` set, a reduced two-unknown variant runs
    from 2 frames (used when growing a dataset frame by frame).
    """
    family = canonical_family(family)
    min_frames = 2 if assume_principal_point is not None else 3
    if dataset.n_frames < min_frames:
        raise DegenerateConfigurationError(
            f"initialization needs at least {min_frames} frames, got {dataset.n_frames}"
        )
    world = dataset.target.corner_positions()
    homographies = []
    usable = []
    for frame in dataset.frames:
        if frame.n_corners < 4:
            continue
        try:
            homographies.append(_homography(world[frame.corner_ids, :2], frame.pixels))
            usable.append(frame)
        except DegenerateConfigurationError:
            continue
    if len(homographies) < min_frames or len(usable) != dataset.n_frames:
        raise DegenerateConfigurationError("not enough usable frames for initialization")

    all_px = np.vstack([f.pixels for f in usable])
    centroid = all_px.mean(axis=0)
    span = float(np.linalg.norm(all_px.max(axis=0) - all_px.min(axis=0)))
    if assume_principal_point is not None:
        cx, cy = assume_principal_point
        fx, fy = _focals_known_pp(homographies, (cx, cy))
    else:
        # unmodeled distortion can push either closed form indefinite, so
        # fall back: full Zhang, then pinned principal point, then a
        # focal heuristic from the observation spread; the bundle
        # adjustment is the actual estimator and only needs the basin
        estimates = []
        try:
            estimates.append(_zhang_intrinsics(homographies))
        except DegenerateConfigurationError:
            pass
        try:
            f2 = _focals_known_pp(homographies, (float(centroid[0]), float(centroid[1])))
            estimates.append((f2[0], f2[1], float(centroid[0]), float(centroid[1])))
        except DegenerateConfigurationError:
            pass
        estimates.append((0.7 * span, 0.7 * span, float(centroid[0]), float(centroid[1])))
        for fx, fy, cx, cy in estimates:
            if 0.15 * span < fx < 4.0 * span and 0.15 * span < fy < 4.0 * span:
                break
        else:
            raise DegenerateConfigurationError("no plausible intrinsic starting point")

    if family == "pinhole3":
        theta = np.array([0.5 * (fx + fy), cx, cy])
    else:
        n_k = FAMILY_SIZES[family] - 4
        ks = _FISHEYE_PINHOLE_KS[:n_k] if family == "fisheye4" else (0.0,) * n_k
        theta = np.array([fx, fy, cx, cy, *ks])
    cam = CameraModel(family, theta)
    K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    poses = tuple(_pose_from_homography(H, K) for H in homographies)
    return cam, poses


# -- calibration --------------------------------------------------------------

def calibrate(
    dataset: Dataset,
    family: str,
    kernel: Optional[CauchyKernel] = None,
    init: Optional[tuple[CameraModel, Sequence[Pose]]] = None,
    multiplicities: Optional[np.ndarray] = None,
    options: Optional[SolveOptions] = None,
    initializer: Optional[Callable] = None,
) -> CalibrationResult:
    """Joint bundle adjustment of intrinsics and all frame poses.

    ``init`` may carry a (camera, poses) starting point (poses
    positionally matched to active frames); otherwise ``initializer``
    (defaulting to Zhang-style closed form) provides one.
    """
    problem = CalibrationProblem(dataset, family, multiplicities, kernel)
    if problem.n_rows <= problem.n_params:
        raise InsufficientObservationsError(
            f"N = {problem.n_rows} observations for N_P = {problem.n_params} parameters"
        )
    if init is not None:
        cam0, poses0 = init
        if cam0.family != problem.family:
            raise ValidationError("init camera family does not match requested family")
    else:
        maker = initializer or initialize
        if multiplicities is not None:
            active = Dataset(dataset.target, tuple(f for f, _, _ in problem.entries))
            cam0, poses0 = maker(active, family)
        else:
            cam0, poses0 = maker(dataset, family)
    report = solve(problem.as_least_squares(), problem.pack(cam0, list(poses0)), options)
    result = _result_from_report(problem, report)
    # planar poses have a two-fold ambiguity; a frame initialized in the
    # wrong branch survives the joint optimization as a gross outlier.
    # Re-seed such frames from an undistorted-coordinate homography and
    # re-run warm-started.
    for _ in range(2):
        healed = _reseed_outlier_poses(problem, result)
        if healed is None:
            break
        report = solve(problem.as_least_squares(), problem.pack(result.cam, healed), options)
        result = _result_from_report(problem, report)
    return result


def _reseed_outlier_poses(
    problem: CalibrationProblem, result: CalibrationResult
) -> Optional[list[Pose]]:
    from .cameras import unproject  # deferred: cameras imports nothing from here
    from .errors import CalibAuditError

    rms = []
    for _, start, stop in result.frame_rows:
        r = result.residuals[start:stop]
        rms.append(float(np.sqrt(np.mean(r * r))))
    rms = np.asarray(rms)
    threshold = max(5.0 * float(np.median(rms)), 0.5)
    bad = np.flatnonzero(rms > threshold)
    if bad.size == 0:
        return None
    poses = list(result.poses)
    changed = False
    eye = np.eye(3)
    for i in bad:
        frame, world, _ = problem.entries[i]
        if frame.n_corners < 4:
            continue
        try:
            dirs = unproject(result.cam, frame.pixels)
            ab = dirs[:, :2] / dirs[:, 2:3]
            H = _homography(world[:, :2], ab)
            pose0 = _pose_from_homography(H, eye)
            pose, res = pose_only_refit(result.cam, world, frame.pixels, pose0)
        except CalibAuditError:
            continue
        if np.sqrt(np.mean(res * res)) < rms[i]:
            poses[i] = pose
            changed = True
    return poses if changed else None


def _result_from_report(problem: CalibrationProblem, report: SolveReport) -> CalibrationResult:
    cam, poses = problem.unpack(report.xi)
    r = report.residuals
    mse = float(r @ r) / r.size
    sigma = robust_sigma(r)
    return CalibrationResult(
        cam=cam,
        poses=poses,
        residuals=r,
        jacobian=report.jacobian,
        mse=mse,
        rmse=float(np.sqrt(mse)),
        robust_mse=sigma * sigma,
        n_obs=r.size,
        n_params=problem.n_params,
        frame_rows=problem.frame_rows,
        iterations=report.iterations,
        converged=report.converged,
        gradient_inf_norm=report.gradient_inf_norm,
    )


def intrinsic_information(result: CalibrationResult) -> np.ndarray:
    """Schur complement of the pose blocks in J^T J (intrinsics only).

    This is the inverse of the unscaled intrinsic covariance; computing
    it directly avoids inverting the full parameter space.
    """
    J = result.jacobian
    k = result.cam.n_params
    JI = J[:, :k]
    S = JI.T @ JI
    for i, (fid, start, stop) in enumerate(result.frame_rows):
        rows = slice(start, stop)
        col = k + 6 * i
        Jp = J[rows, col : col + 6]
        B = JI[rows].T @ Jp
        D = Jp.T @ Jp
        try:
            S = S - B @ np.linalg.solve(D, B.T)
        except np.linalg.LinAlgError:
            raise RankDeficientError("singular pose block in information matrix")
    return 0.5 * (S + S.T)


def standard_covariance(result: CalibrationResult) -> CovarianceEstimate:
    """Backpropagated detector-noise covariance of the intrinsics.

    Scaled by the accuracy estimate s_d^2 = MSE / (1 - N_P/N); raises
    RankDeficientError when the information matrix is singular.
    """
    S = intrinsic_information(result)
    k = S.shape[0]
    try:
        sigma = result.s_d_sq * np.linalg.solve(S, np.eye(k))
    except np.linalg.LinAlgError:
        raise RankDeficientError("intrinsic information matrix is singular")
    if not np.all(np.isfinite(sigma)):
        raise RankDeficientError("non-finite covariance")
    return CovarianceEstimate(sigma=sigma, method="std")


def pose_only_refit(
    cam: CameraModel,
    world: np.ndarray,
    pixels: np.ndarray,
    pose0: Pose,
    options: Optional[SolveOptions] = None,
) -> tuple[Pose, np.ndarray]:
    """Re-estimate one pose with intrinsics held fixed.

    Needs >= 4 observed corners (8 scalar observations against 6 pose
    parameters). Returns the refit pose and its residual vector.
    """
    world = np.asarray(world, dtype=float).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if world.shape[0] < 4:
        raise TooFewCornersError("pose refit needs at least 4 corners")

    def residual(xi):
        return _frame_residual(cam, Pose.from_vector(xi), world, pixels)

    def jacobian(xi):
        pose = Pose.from_vector(xi)
        pts = world @ pose.matrix.T + pose.translation
        _, _, J_pt = project_jacobians(cam, pts)
        J_rot, _ = geometry.transform_jacobians(pose, world)
        n = world.shape[0]
        block = np.empty((n, 2, 6))
        block[:, :, :3] = np.einsum("nij,njk->nik", J_pt, J_rot)
        block[:, :, 3:] = J_pt
        return block.reshape(2 * n, 6)

    problem = LeastSquaresProblem(residual=residual, jacobian=jacobian, n_params=6)
    report = solve(problem, pose0.as_vector(), options)
    return Pose.from_vector(report.xi), report.residuals
