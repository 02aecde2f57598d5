"""Damped nonlinear least squares (Levenberg-Marquardt / Gauss-Newton).

Sign convention, used consistently across the toolkit: residuals are
``observation - prediction`` and the Jacobian handed to the solver is the
Jacobian of the *prediction*, i.e. ``-d residual / d xi``. With that
convention the normal-equation step ``(J^T J) delta = J^T r`` applied as
``xi + delta`` reduces the linearized cost.

Problems may declare a block structure (one shared block plus one 6-dof
block per frame, rows grouped by frame). The solver then assembles the
normal equations block-wise and can eliminate the per-frame blocks via
the Schur complement; both paths agree to well below 1e-9.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import (
    MaxIterationsError,
    NonFiniteResidualError,
    RankDeficientError,
    ValidationError,
)

_TINY = 1e-300


@dataclass(frozen=True)
class CauchyKernel:
    """Cauchy robust loss rho(s) = c^2 log(1 + s / c^2) on squared residuals.

    With ``scale=None`` the scale is set once per solve to 2 * sigma_hat,
    where sigma_hat = 1.4826 * median(|r|) at the starting point.
    """

    scale: Optional[float] = None

    def resolved(self, residuals: np.ndarray) -> "CauchyKernel":
        if self.scale is not None:
            return self
        sigma = 1.4826 * float(np.median(np.abs(residuals)))
        return CauchyKernel(scale=max(2.0 * sigma, 1e-12))

    def cost(self, residuals: np.ndarray) -> float:
        c2 = self.scale * self.scale
        return float(c2 * np.sum(np.log1p(residuals * residuals / c2)))

    def weights(self, residuals: np.ndarray) -> np.ndarray:
        c2 = self.scale * self.scale
        return 1.0 / (1.0 + residuals * residuals / c2)


@dataclass(frozen=True)
class ParameterBlock:
    """Label for a contiguous slice of the parameter vector."""

    label: str  # "intrinsics" or "pose"
    start: int
    size: int
    frame_id: Optional[int] = None


@dataclass
class LeastSquaresProblem:
    """Residual/Jacobian pair plus optional frame structure.

    ``residual(xi)`` returns observation-minus-prediction of length N;
    ``jacobian(xi)`` returns the N x n_params prediction Jacobian.
    ``row_frame_ids`` assigns each residual row to one frame, which is
    required for bootstrap recomposition and Schur elimination.
    """

    residual: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    n_params: int
    blocks: Optional[Sequence[ParameterBlock]] = None
    row_frame_ids: Optional[np.ndarray] = None
    kernel: Optional[CauchyKernel] = None


@dataclass
class SolveOptions:
    max_iterations: int = 1000
    cost_tol: float = 1e-12  # relative cost decrease
    step_tol: float = 1e-12  # parameter step norm
    lambda0_scale: float = 1e-3  # lambda0 = scale * mean(diag(J^T J))
    lambda_factor: float = 10.0
    schur: Optional[bool] = None  # None: auto, pose blocks > 50


@dataclass
class SolveReport:
    xi: np.ndarray
    residuals: np.ndarray
    jacobian: np.ndarray
    iterations: int
    converged: bool
    cost: float
    gradient_inf_norm: float


def solve_normal_equations(A: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Solve A x = g for symmetric A: Cholesky with a QR fallback."""
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(A, lower=True), g)
    except scipy.linalg.LinAlgError:
        pass
    Q, R = np.linalg.qr(A)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag.min() <= 1e-13 * max(diag.max(), 1.0):
        raise RankDeficientError("normal equations are singular")
    return scipy.linalg.solve_triangular(R, Q.T @ g)


def gauss_newton_step(J: np.ndarray, r: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Undamped normal-equation step: solve (J^T J) delta = J^T r.

    ``xi + delta`` reduces the linearized cost under the module's sign
    convention (J is the prediction Jacobian, r = observed - predicted).
    """
    J = np.asarray(J, dtype=float)
    r = np.asarray(r, dtype=float)
    if weights is not None:
        Jw = J * weights[:, None]
    else:
        Jw = J
    return solve_normal_equations(Jw.T @ J, Jw.T @ r)


class _NormalEquations:
    """Block-wise assembly of J^T W J and J^T W r.

    When the problem declares an intrinsics block plus per-frame pose
    blocks with frame-grouped rows, assembly skips the known-zero
    pose-pose cross terms; otherwise it falls back to dense products.
    """

    def __init__(self, problem: LeastSquaresProblem):
        self.n = problem.n_params
        blocks = list(problem.blocks) if problem.blocks else []
        pose_blocks = [b for b in blocks if b.label == "pose"]
        shared = [b for b in blocks if b.label != "pose"]
        self.structured = (
            len(shared) == 1
            and shared[0].start == 0
            and len(pose_blocks) > 0
            and problem.row_frame_ids is not None
        )
        if self.structured:
            self.k = shared[0].size
            self.pose_blocks = sorted(pose_blocks, key=lambda b: b.start)
            ids = np.asarray(problem.row_frame_ids)
            self.frame_rows = {
                b.frame_id: np.flatnonzero(ids == b.frame_id) for b in self.pose_blocks
            }

    def assemble(self, J, r, w):
        """Return (A, g) as the full dense system."""
        Jw = J if w is None else J * w[:, None]
        if not self.structured:
            return Jw.T @ J, Jw.T @ r
        n, k = self.n, self.k
        A = np.zeros((n, n))
        g = np.empty(n)
        JI = J[:, :k]
        JIw = Jw[:, :k]
        A[:k, :k] = JIw.T @ JI
        g[:k] = JIw.T @ r
        for b in self.pose_blocks:
            rows = self.frame_rows[b.frame_id]
            sl = slice(b.start, b.start + b.size)
            Jp = J[rows, sl]
            Jpw = Jw[rows, sl]
            A[sl, sl] = Jpw.T @ Jp
            A[:k, sl] = JIw[rows].T @ Jp
            A[sl, :k] = A[:k, sl].T
            g[sl] = Jpw.T @ r[rows]
        return A, g

    def solve_damped(self, A, g, lam, use_schur):
        if lam < 0:
            raise ValidationError("negative damping")
        if not (use_schur and self.structured):
            M = A.copy()
            M[np.diag_indices_from(M)] += lam
            return solve_normal_equations(M, g)
        k = self.k
        S = A[:k, :k].copy()
        S[np.diag_indices_from(S)] += lam
        rhs = g[:k].copy()
        corrections = []
        for b in self.pose_blocks:
            sl = slice(b.start, b.start + b.size)
            D = A[sl, sl].copy()
            D[np.diag_indices_from(D)] += lam
            B = A[:k, sl]
            try:
                Dinv_Bt = scipy.linalg.cho_solve(scipy.linalg.cho_factor(D, lower=True), np.column_stack([B.T, g[sl]]))
            except scipy.linalg.LinAlgError:
                raise RankDeficientError("singular pose block in Schur elimination")
            S -= B @ Dinv_Bt[:, :-1]
            rhs -= B @ Dinv_Bt[:, -1]
            corrections.append((sl, D, B))
        delta = np.empty(self.n)
        delta[:k] = solve_normal_equations(S, rhs)
        for sl, D, B in corrections:
            delta[sl] = scipy.linalg.cho_solve(
                scipy.linalg.cho_factor(D, lower=True), g[sl] - B.T @ delta[:k]
            )
        return delta


def solve(
    problem: LeastSquaresProblem,
    xi0: np.ndarray,
    options: Optional[SolveOptions] = None,
) -> SolveReport:
    """Levenberg-Marquardt with a multiplicative damping schedule.

    Raises NonFiniteResidualError, RankDeficientError or
    MaxIterationsError; the report's ``converged`` flag is True whenever
    the relative cost decrease or the step norm fell below tolerance.
    """
    opts = options or SolveOptions()
    xi = np.asarray(xi0, dtype=float).copy()
    if xi.size != problem.n_params:
        raise ValidationError(f"xi0 has size {xi.size}, expected {problem.n_params}")
    if not np.all(np.isfinite(xi)):
        raise NonFiniteResidualError("non-finite starting point")

    r = np.asarray(problem.residual(xi), dtype=float)
    if not np.all(np.isfinite(r)):
        raise NonFiniteResidualError("non-finite residual at starting point")

    kernel = problem.kernel.resolved(r) if problem.kernel is not None else None

    def cost_of(res):
        return kernel.cost(res) if kernel else float(res @ res)

    def weights_of(res):
        return kernel.weights(res) if kernel else None

    normal = _NormalEquations(problem)
    n_pose = len(normal.pose_blocks) if normal.structured else 0
    use_schur = opts.schur if opts.schur is not None else n_pose > 50

    J = np.asarray(problem.jacobian(xi), dtype=float)
    cost = cost_of(r)
    lam = None
    converged = False
    iterations = 0

    A, g = normal.assemble(J, r, weights_of(r))
    while iterations < opts.max_iterations:
        iterations += 1
        if lam is None:
            lam = opts.lambda0_scale * float(np.mean(np.diag(A)))
            if lam <= 0 or not np.isfinite(lam):
                lam = opts.lambda0_scale
        delta = normal.solve_damped(A, g, lam, use_schur)
        step_norm = float(np.linalg.norm(delta))
        trial = xi + delta
        r_trial = np.asarray(problem.residual(trial), dtype=float)
        finite = np.all(np.isfinite(r_trial))
        trial_cost = cost_of(r_trial) if finite else np.inf
        if finite and trial_cost <= cost:
            decrease = cost - trial_cost
            xi = trial
            r = r_trial
            accepted_cost = cost
            cost = trial_cost
            lam = max(lam / opts.lambda_factor, 1e-18)
            J = np.asarray(problem.jacobian(xi), dtype=float)
            A, g = normal.assemble(J, r, weights_of(r))
            if decrease <= opts.cost_tol * max(accepted_cost, _TINY) or step_norm < opts.step_tol:
                converged = True
                break
        else:
            lam *= opts.lambda_factor
            if step_norm < opts.step_tol:
                converged = True
                break
            if not np.isfinite(lam):
                raise NonFiniteResidualError("damping overflow: no finite step accepted")
    if not converged:
        raise MaxIterationsError(
            f"no convergence within {opts.max_iterations} iterations"
        )
    w = weights_of(r)
    grad = J.T @ (r if w is None else w * r)
    return SolveReport(
        xi=xi,
        residuals=r,
        jacobian=J,
        iterations=iterations,
        converged=converged,
        cost=cost,
        gradient_inf_norm=float(np.max(np.abs(grad))) if grad.size else 0.0,
    )
