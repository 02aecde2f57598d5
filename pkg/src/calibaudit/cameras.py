"""Parametric camera projection models and their inverses.

Five families of increasing complexity are supported, all central:

======================  ===========================================  ====
family                  intrinsics theta                             size
======================  ===========================================  ====
``pinhole3``  (C3)      f, cx, cy                                    3
``pinhole_k1`` (C5)     fx, fy, cx, cy, k1                           5
``pinhole_k2`` (C6)     fx, fy, cx, cy, k1, k2                       6
``pinhole_k3`` (C7)     fx, fy, cx, cy, k1, k2, k3                   7
``fisheye4``  (C8)      fx, fy, cx, cy, k1, k2, k3, k4               8
======================  ===========================================  ====

The pinhole families apply a polynomial radial gain in the normalized
image plane; ``fisheye4`` is the equidistant model with a polynomial in
the incidence angle (OpenCV fisheye convention). Distortion inversion is
a damped scalar fixed point on the radius with a Newton fallback.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    NoConvergenceError,
    NonPositiveDepthError,
    OutsideInvertibleRegionError,
    ValidationError,
)

FAMILY_SIZES = {
    "pinhole3": 3,
    "pinhole_k1": 5,
    "pinhole_k2": 6,
    "pinhole_k3": 7,
    "fisheye4": 8,
}

_LADDER_ALIASES = {
    "c3": "pinhole3",
    "c5": "pinhole_k1",
    "c6": "pinhole_k2",
    "c7": "pinhole_k3",
    "c8": "fisheye4",
}

#: default model ladder, ordered by complexity
LADDER = ("pinhole3", "pinhole_k1", "pinhole_k2", "pinhole_k3", "fisheye4")

_RADIUS_TOL = 1e-12
_MAX_FIXED_POINT = 50
_MAX_NEWTON = 50


def canonical_family(name: str) -> str:
    """Resolve 'C6'/'c6'-style aliases to canonical family names."""
    key = name.strip().lower().replace("(", "").replace(")", "")
    key = _LADDER_ALIASES.get(key, key)
    if key not in FAMILY_SIZES:
        raise ValidationError(f"unknown camera family: {name!r}")
    return key


@dataclass(frozen=True)
class CameraModel:
    """Immutable camera: a family tag plus its intrinsic vector."""

    family: str
    theta: np.ndarray

    def __post_init__(self):
        family = canonical_family(self.family)
        theta = np.asarray(self.theta, dtype=float).reshape(-1).copy()
        if theta.size != FAMILY_SIZES[family]:
            raise ValidationError(
                f"{family} expects {FAMILY_SIZES[family]} parameters, got {theta.size}"
            )
        if np.any(theta[self._focal_slice(family)] <= 0):
            raise ValidationError("focal lengths must be positive")
        if not np.all(np.isfinite(theta)):
            raise ValidationError("intrinsics must be finite")
        theta.flags.writeable = False
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "theta", theta)

    @staticmethod
    def _focal_slice(family: str) -> slice:
        return slice(0, 1) if family == "pinhole3" else slice(0, 2)

    @property
    def n_params(self) -> int:
        return self.theta.size

    @property
    def fx(self) -> float:
        return float(self.theta[0])

    @property
    def fy(self) -> float:
        return float(self.theta[0] if self.family == "pinhole3" else self.theta[1])

    @property
    def cx(self) -> float:
        return float(self.theta[1] if self.family == "pinhole3" else self.theta[2])

    @property
    def cy(self) -> float:
        return float(self.theta[2] if self.family == "pinhole3" else self.theta[3])

    @property
    def distortion(self) -> np.ndarray:
        return self.theta[3:] if self.family != "pinhole3" else self.theta[3:3]

    def focal_indices(self) -> list[int]:
        """Indices of the focal-length entries inside theta."""
        return [0] if self.family == "pinhole3" else [0, 1]

    def with_theta(self, theta: np.ndarray) -> "CameraModel":
        return CameraModel(self.family, theta)

    def to_dict(self) -> dict:
        return {"family": self.family, "theta": [float(v) for v in self.theta]}

    @staticmethod
    def from_dict(d: dict) -> "CameraModel":
        try:
            return CameraModel(d["family"], np.asarray(d["theta"], dtype=float))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"bad camera JSON: {exc}") from exc


@dataclass(frozen=True)
class Ray:
    """Unit viewing direction in camera coordinates (z > 0)."""

    direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float).reshape(3).copy()
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise ValidationError("ray direction must be a unit vector")
        d.flags.writeable = False
        object.__setattr__(self, "direction", d)


# -- radial polynomial helpers -----------------------------------------------

def _radial_gain(r2: np.ndarray, ks: np.ndarray) -> np.ndarray:
    """1 + k1 r^2 + k2 r^4 + ... evaluated at squared radius r2."""
    out = np.ones_like(r2)
    p = np.ones_like(r2)
    for k in ks:
        p = p * r2
        out = out + k * p
    return out


def _radial_gain_deriv(r2: np.ndarray, ks: np.ndarray) -> np.ndarray:
    """Derivative of the gain with respect to r^2."""
    out = np.zeros_like(r2)
    p = np.ones_like(r2)
    for i, k in enumerate(ks):
        out = out + (i + 1) * k * p
        p = p * r2
    return out


def _fisheye_theta_d(t: np.ndarray, ks: np.ndarray) -> np.ndarray:
    t2 = t * t
    return t * _radial_gain(t2, ks)


def _fisheye_theta_d_deriv(t: np.ndarray, ks: np.ndarray) -> np.ndarray:
    # d/dt of t * (1 + k1 t^2 + ...) = 1 + 3 k1 t^2 + 5 k2 t^4 + ...
    t2 = t * t
    out = np.ones_like(t)
    p = np.ones_like(t)
    for i, k in enumerate(ks):
        p = p * t2
        out = out + (2 * i + 3) * k * p
    return out


def monotone_radius(cam: CameraModel) -> float:
    """Largest undistorted normalized radius with monotone distortion.

    Returns inf when the distorted radius grows monotonically everywhere.
    For ``fisheye4`` the bound is expressed as tan(theta_limit), capped by
    the z > 0 hemisphere.
    """
    ks = cam.distortion
    if cam.family == "pinhole3" or not ks.size:
        return np.inf
    if cam.family == "fisheye4":
        # roots of d theta_d / d theta, a polynomial in theta^2
        coeffs = [(2 * i + 3) * k for i, k in enumerate(ks)]
        poly = np.array([1.0] + coeffs)  # ascending in t^2
        roots = np.roots(poly[::-1])
        real = [np.sqrt(r.real) for r in roots if abs(r.imag) < 1e-12 and r.real > 0]
        t_lim = min(real) if real else np.inf
        if t_lim >= np.pi / 2:
            return np.inf
        return float(np.tan(t_lim))
    # pinhole radial: d(r * gain(r^2))/dr = 1 + 3 k1 x + 5 k2 x^2 + 7 k3 x^3, x = r^2
    coeffs = [(2 * i + 3) * k for i, k in enumerate(ks)]
    poly = np.array([1.0] + coeffs)
    roots = np.roots(poly[::-1])
    real = [r.real for r in roots if abs(r.imag) < 1e-12 and r.real > 0]
    return float(np.sqrt(min(real))) if real else np.inf


# -- projection ----------------------------------------------------------------

def _normalized(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    z = pts[:, 2]
    if np.any(z <= 0):
        raise NonPositiveDepthError("points must have z > 0 in camera coordinates")
    a = pts[:, 0] / z
    b = pts[:, 1] / z
    return a, b, z


def project(cam: CameraModel, points: np.ndarray) -> np.ndarray:
    """Project camera-frame points (..., 3) to pixels (..., 2)."""
    points = np.asarray(points, dtype=float)
    scalar = points.ndim == 1
    a, b, _ = _normalized(points)
    uv = _project_ab(cam, a, b)
    return uv[0] if scalar else uv.reshape(points.shape[:-1] + (2,))


def _project_ab(cam: CameraModel, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    th = cam.theta
    if cam.family == "pinhole3":
        f, cx, cy = th
        return np.stack([f * a + cx, f * b + cy], axis=-1)
    fx, fy, cx, cy = th[:4]
    ks = th[4:]
    if cam.family == "fisheye4":
        r = np.hypot(a, b)
        t = np.arctan(r)
        td = _fisheye_theta_d(t, ks)
        s = np.where(r > 1e-12, td / np.where(r > 1e-12, r, 1.0), 1.0)
    else:
        r2 = a * a + b * b
        s = _radial_gain(r2, ks)
    return np.stack([fx * s * a + cx, fy * s * b + cy], axis=-1)


def project_jacobians(
    cam: CameraModel, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Projection with analytic derivatives for a stack of points (n, 3).

    Returns (uv, J_theta, J_point) with shapes (n, 2), (n, 2, n_params)
    and (n, 2, 3). Used by the bundle-adjustment Jacobian and by the
    compensating-rotation optimizer.
    """
    a, b, z = _normalized(points)
    n = a.size
    th = cam.theta
    # d(a, b)/d(x, y, z)
    J_ab = np.zeros((n, 2, 3))
    inv_z = 1.0 / z
    J_ab[:, 0, 0] = inv_z
    J_ab[:, 0, 2] = -a * inv_z
    J_ab[:, 1, 1] = inv_z
    J_ab[:, 1, 2] = -b * inv_z

    if cam.family == "pinhole3":
        f = th[0]
        uv = np.stack([f * a + th[1], f * b + th[2]], axis=-1)
        J_theta = np.zeros((n, 2, 3))
        J_theta[:, 0, 0] = a
        J_theta[:, 1, 0] = b
        J_theta[:, 0, 1] = 1.0
        J_theta[:, 1, 2] = 1.0
        J_uv_ab = np.zeros((n, 2, 2))
        J_uv_ab[:, 0, 0] = f
        J_uv_ab[:, 1, 1] = f
        return uv, J_theta, np.einsum("nij,njk->nik", J_uv_ab, J_ab)

    fx, fy = th[0], th[1]
    ks = th[4:]
    n_k = ks.size
    J_theta = np.zeros((n, 2, cam.n_params))
    J_uv_ab = np.zeros((n, 2, 2))

    if cam.family == "fisheye4":
        r = np.hypot(a, b)
        safe_r = np.where(r > 1e-12, r, 1.0)
        t = np.arctan(r)
        td = _fisheye_theta_d(t, ks)
        td_p = _fisheye_theta_d_deriv(t, ks)
        s = np.where(r > 1e-12, td / safe_r, 1.0)
        ds_dr = np.where(
            r > 1e-12, td_p / (safe_r * (1.0 + r * r)) - td / (safe_r * safe_r), 0.0
        )
        # d theta_d / d k_i = theta^(2i+3)
        tk = t * t * t
        for i in range(n_k):
            dk = np.where(r > 1e-12, tk / safe_r, 0.0)
            J_theta[:, 0, 4 + i] = fx * a * dk
            J_theta[:, 1, 4 + i] = fy * b * dk
            tk = tk * t * t
    else:
        r2 = a * a + b * b
        s = _radial_gain(r2, ks)
        d2 = _radial_gain_deriv(r2, ks)
        ds_dr = None  # radial uses d/d(r^2) form below
        p = r2.copy()
        for i in range(n_k):
            J_theta[:, 0, 4 + i] = fx * a * p
            J_theta[:, 1, 4 + i] = fy * b * p
            p = p * r2

    uv = np.stack([fx * s * a + th[2], fy * s * b + th[3]], axis=-1)
    J_theta[:, 0, 0] = s * a
    J_theta[:, 1, 1] = s * b
    J_theta[:, 0, 2] = 1.0
    J_theta[:, 1, 3] = 1.0

    if cam.family == "fisheye4":
        ra = np.where(r > 1e-12, a / safe_r, 0.0)
        rb = np.where(r > 1e-12, b / safe_r, 0.0)
        J_uv_ab[:, 0, 0] = fx * (s + a * ra * ds_dr)
        J_uv_ab[:, 0, 1] = fx * a * rb * ds_dr
        J_uv_ab[:, 1, 0] = fy * b * ra * ds_dr
        J_uv_ab[:, 1, 1] = fy * (s + b * rb * ds_dr)
    else:
        J_uv_ab[:, 0, 0] = fx * (s + 2.0 * a * a * d2)
        J_uv_ab[:, 0, 1] = fx * 2.0 * a * b * d2
        J_uv_ab[:, 1, 0] = fy * 2.0 * a * b * d2
        J_uv_ab[:, 1, 1] = fy * (s + 2.0 * b * b * d2)

    return uv, J_theta, np.einsum("nij,njk->nik", J_uv_ab, J_ab)


# -- unprojection --------------------------------------------------------------

def _invert_radius(target: np.ndarray, gain, gain_total_deriv) -> np.ndarray:
    """Solve rho * gain(rho) = target for rho >= 0, elementwise.

    ``gain(rho)`` multiplies the radius; ``gain_total_deriv(rho)`` is
    d(rho * gain)/d rho. Fixed point first, Newton fallback; tolerance
    1e-12 on the radius.
    """
    rho = target.copy()
    for _ in range(_MAX_FIXED_POINT):
        new = target / gain(rho)
        delta = np.abs(new - rho)
        rho = new
        if np.all(delta < _RADIUS_TOL):
            return rho
    # Newton fallback on g(rho) = rho * gain(rho) - target
    for _ in range(_MAX_NEWTON):
        g = rho * gain(rho) - target
        gp = gain_total_deriv(rho)
        if np.any(gp <= 0):
            raise OutsideInvertibleRegionError(
                "distortion is non-monotonic at the requested radius"
            )
        step = g / gp
        rho = rho - step
        if np.all(np.abs(step) < _RADIUS_TOL):
            return rho
    raise NoConvergenceError("distortion inversion exceeded its iteration budget")


def unproject(cam: CameraModel, pixels: np.ndarray) -> np.ndarray:
    """Invert the projection: pixels (..., 2) -> unit directions (..., 3).

    The result satisfies project(cam, s * dir) == pixel for any s > 0 to
    high accuracy; raises OutsideInvertibleRegionError for pixels beyond
    the monotone distortion region.
    """
    pixels = np.asarray(pixels, dtype=float)
    scalar = pixels.ndim == 1
    px = pixels.reshape(-1, 2)
    th = cam.theta
    if cam.family == "pinhole3":
        f, cx, cy = th
        ab = (px - (cx, cy)) / f
    else:
        fx, fy, cx, cy = th[:4]
        ks = th[4:]
        m = (px - (cx, cy)) / (fx, fy)
        rd = np.hypot(m[:, 0], m[:, 1])
        r_lim = monotone_radius(cam)
        if cam.family == "fisheye4":
            t_lim = np.arctan(r_lim) if np.isfinite(r_lim) else np.pi / 2
            rd_max = _fisheye_theta_d(np.asarray(t_lim - 1e-9), ks)
            if np.any(rd > rd_max):
                raise OutsideInvertibleRegionError("pixel beyond invertible fisheye angle")
            t = _invert_radius(
                rd,
                lambda x: _radial_gain(x * x, ks),
                lambda x: _fisheye_theta_d_deriv(x, ks),
            )
            scale = np.where(rd > 1e-12, np.tan(t) / np.where(rd > 1e-12, rd, 1.0), 1.0)
            ab = m * scale[:, None]
        else:
            if np.isfinite(r_lim):
                rd_max = r_lim * _radial_gain(np.asarray(r_lim**2), ks)
                if np.any(rd > rd_max):
                    raise OutsideInvertibleRegionError(
                        "pixel beyond the monotone distortion radius"
                    )
            ru = _invert_radius(
                rd,
                lambda x: _radial_gain(x * x, ks),
                lambda x: _radial_gain(x * x, ks) + 2.0 * x * x * _radial_gain_deriv(x * x, ks),
            )
            gain = _radial_gain(ru * ru, ks)
            ab = m / gain[:, None]
    dirs = np.concatenate([ab, np.ones((ab.shape[0], 1))], axis=1)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs[0] if scalar else dirs.reshape(pixels.shape[:-1] + (3,))


def unproject_ray(cam: CameraModel, pixel: np.ndarray) -> Ray:
    """Single-pixel unprojection wrapped in the Ray invariant type."""
    return Ray(unproject(cam, np.asarray(pixel, dtype=float).reshape(2)))
