"""Pinhole cameras with residual parameterisation and Cholesky whitening.

Each camera carries a 10-vector of optimisable parameters

    [w_x, w_y, w_z, t_x, t_y, t_z, f_x, f_y, c_x, c_y]

where ``w`` is an axis-angle rotation applied on the left of the initial
rotation ``R0``.  The initial vector ``phi0`` has ``w = 0``.  Training never
touches ``phi`` directly; it moves a residual ``delta_phi`` and the effective
parameters are ``phi0 + M @ delta_phi`` with ``M`` a fixed whitening matrix
computed once from the projection Jacobian of a proxy point set.

Camera frame convention: ``x_cam = R^T (p - t)``, camera looks down +z, image
rows grow with +y.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .errors import ProjectionError, RankDeficiencyError, ValidationError

K_PARAMS = 10
ROT = slice(0, 3)
TRANS = slice(3, 6)
FOCAL = slice(6, 8)
PRINCIPAL = slice(8, 10)
PARAM_NAMES = ("w_x", "w_y", "w_z", "t_x", "t_y", "t_z", "f_x", "f_y", "c_x", "c_y")


@dataclass
class CameraParams:
    """Initial camera estimate plus residual state.

    ``rotation``/``translation``/``focal``/``principal`` hold the initial
    estimate in image-pixel units.  ``delta_phi`` and ``precond`` define the
    current offset from it.
    """

    rotation: np.ndarray
    translation: np.ndarray
    focal: np.ndarray
    principal: np.ndarray
    distortion: np.ndarray = field(default_factory=lambda: np.zeros(2))
    delta_phi: np.ndarray = field(default_factory=lambda: np.zeros(K_PARAMS))
    precond: np.ndarray = field(default_factory=lambda: np.eye(K_PARAMS))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.focal = np.asarray(self.focal, dtype=np.float64).reshape(2)
        self.principal = np.asarray(self.principal, dtype=np.float64).reshape(2)
        self.distortion = np.asarray(self.distortion, dtype=np.float64).reshape(2)
        self.delta_phi = np.asarray(self.delta_phi, dtype=np.float64).reshape(K_PARAMS)
        self.precond = np.asarray(self.precond, dtype=np.float64).reshape(K_PARAMS, K_PARAMS)
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-8:
            raise ValidationError(f"rotation is not orthonormal (max error {err:.2e})")
        if np.any(self.focal <= 0):
            raise ValidationError("focal lengths must be positive")

    @property
    def phi0(self) -> np.ndarray:
        return np.concatenate([np.zeros(3), self.translation, self.focal, self.principal])

    def with_residual(self, delta_phi) -> "CameraParams":
        return replace(self, delta_phi=np.asarray(delta_phi, dtype=np.float64).copy())

    def to_json(self) -> dict:
        return {
            "rotation": [float(x) for x in self.rotation.reshape(-1)],
            "translation": [float(x) for x in self.translation],
            "focal": [float(x) for x in self.focal],
            "principal": [float(x) for x in self.principal],
            "distortion": [float(x) for x in self.distortion],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CameraParams":
        try:
            return cls(
                rotation=np.array(obj["rotation"], dtype=np.float64).reshape(3, 3),
                translation=obj["translation"],
                focal=obj["focal"],
                principal=obj["principal"],
                distortion=obj.get("distortion", [0.0, 0.0]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"bad camera record: {exc}") from exc


@dataclass
class PreconditionReport:
    sigma: np.ndarray
    chol: np.ndarray
    whitened_gram: np.ndarray


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation whose +z axis points from ``eye`` to ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


# ---------------------------------------------------------------------------
# differentiable core (torch, any float dtype)
# ---------------------------------------------------------------------------


def _skew(w):
    zero = torch.zeros_like(w[..., 0])
    return torch.stack(
        [
            torch.stack([zero, -w[..., 2], w[..., 1]], -1),
            torch.stack([w[..., 2], zero, -w[..., 0]], -1),
            torch.stack([-w[..., 1], w[..., 0], zero], -1),
        ],
        -2,
    )


def so3_exp(w: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula, smooth through w = 0."""
    theta2 = (w * w).sum(-1)
    small = theta2 < 1e-8
    theta = torch.sqrt(torch.clamp(theta2, min=1e-8))
    a = torch.where(small, 1 - theta2 / 6 + theta2 ** 2 / 120, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24 + theta2 ** 2 / 720, (1 - torch.cos(theta)) / theta ** 2)
    k = _skew(w)
    eye = torch.eye(3, dtype=w.dtype, device=w.device).expand(k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def rotation_from_phi(phi: torch.Tensor, r0: torch.Tensor) -> torch.Tensor:
    return so3_exp(phi[..., ROT]) @ r0


def project_torch(phi: torch.Tensor, r0: torch.Tensor, distortion: torch.Tensor, points: torch.Tensor):
    """Project (m, 3) world points; returns (m, 2) pixel coords and camera depths."""
    rot = rotation_from_phi(phi, r0)
    x_cam = (points - phi[TRANS]) @ rot
    depth = x_cam[:, 2]
    xn = x_cam[:, :2] / depth[:, None]
    r2 = (xn * xn).sum(-1, keepdim=True)
    radial = 1 + distortion[0] * r2 + distortion[1] * r2 * r2
    uv = phi[FOCAL] * xn * radial + phi[PRINCIPAL]
    return uv, depth


def _undistort(xd: torch.Tensor, distortion: torch.Tensor, iters: int = 8) -> torch.Tensor:
    if not bool(torch.any(distortion != 0)):
        return xd
    xn = xd
    for _ in range(iters):
        r2 = (xn * xn).sum(-1, keepdim=True)
        xn = xd / (1 + distortion[0] * r2 + distortion[1] * r2 * r2)
    return xn


def rays_torch(phi, r0, distortion, rows, cols, downscale: int = 1):
    """Ray origins/directions through latent pixel centres.

    Intrinsics in ``phi`` are image-pixel units; they are divided by
    ``downscale`` to address the latent grid.
    """
    f = phi[FOCAL] / downscale
    c = phi[PRINCIPAL] / downscale
    u = cols.to(phi.dtype) + 0.5
    v = rows.to(phi.dtype) + 0.5
    xd = torch.stack([(u - c[0]) / f[0], (v - c[1]) / f[1]], -1)
    xn = _undistort(xd, distortion.to(phi.dtype))
    d_cam = torch.cat([xn, torch.ones_like(xn[:, :1])], -1)
    d_cam = d_cam / d_cam.norm(dim=-1, keepdim=True)
    rot = rotation_from_phi(phi, r0)
    dirs = d_cam @ rot.T
    origins = phi[TRANS].expand_as(dirs)
    return origins, dirs


# ---------------------------------------------------------------------------
# numpy-facing API
# ---------------------------------------------------------------------------


def apply_residual(camera: CameraParams) -> np.ndarray:
    """Effective parameter vector ``phi0 + M @ delta_phi``."""
    return camera.phi0 + camera.precond @ camera.delta_phi


def effective_rotation(camera: CameraParams) -> np.ndarray:
    phi = torch.as_tensor(apply_residual(camera))
    return rotation_from_phi(phi, torch.as_tensor(camera.rotation)).numpy()


def _check_depth(depth: torch.Tensor):
    bad = torch.nonzero(depth <= 0)
    if len(bad):
        idx = int(bad[0, 0])
        raise ProjectionError(f"point {idx} has non-positive depth {float(depth[idx]):.4g}", index=idx)


def project_points(camera: CameraParams, points) -> np.ndarray:
    """Stacked ``(u_0, v_0, u_1, v_1, ...)`` pixel coordinates."""
    pts = torch.as_tensor(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    phi = torch.as_tensor(apply_residual(camera))
    uv, depth = project_torch(phi, torch.as_tensor(camera.rotation), torch.as_tensor(camera.distortion), pts)
    _check_depth(depth)
    return uv.reshape(-1).numpy()


def projection_jacobian(camera: CameraParams, points) -> np.ndarray:
    """d(project_points)/d(phi) at the effective parameters, shape (2m, 10)."""
    pts = torch.as_tensor(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    phi = torch.as_tensor(apply_residual(camera))
    r0 = torch.as_tensor(camera.rotation)
    dist = torch.as_tensor(camera.distortion)
    _check_depth(project_torch(phi, r0, dist, pts)[1])

    def fn(p):
        return project_torch(p, r0, dist, pts)[0].reshape(-1)

    return torch.autograd.functional.jacobian(fn, phi).numpy()


def default_damping(sigma: np.ndarray) -> float:
    return 1e-10 * float(np.trace(sigma)) / sigma.shape[0]


def precondition_matrix(jacobian, damping: float = 0.0):
    """Whitening transform for a projection Jacobian.

    With ``Sigma = J^T J + damping * I = L L^T`` the returned ``M = L^{-T}``
    satisfies ``(J M)^T (J M) = I`` whenever damping is zero and ``Sigma`` is
    full rank.  ``M`` is upper triangular.
    """
    j = np.asarray(jacobian, dtype=np.float64)
    if damping < 0:
        raise ValidationError("damping must be non-negative")
    k = j.shape[1]
    sigma = j.T @ j + damping * np.eye(k)
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        chol = None
    scale = max(float(np.max(np.diag(sigma))), np.finfo(float).tiny)
    if chol is None or np.min(np.diag(chol)) ** 2 < 1e-14 * scale:
        evals, evecs = np.linalg.eigh(sigma)
        raise RankDeficiencyError(
            f"projection Gram matrix is rank deficient (smallest eigenvalue {evals[0]:.3e})",
            null_direction=evecs[:, 0],
        )
    m = np.linalg.inv(chol).T
    jm = j @ m
    return m, PreconditionReport(sigma=sigma, chol=chol, whitened_gram=jm.T @ jm)


def proxy_points(bounds_min, bounds_max, m: int = 32, seed: int = 0) -> np.ndarray:
    """Uniform points inside an axis-aligned box, used to build the preconditioner."""
    rng = np.random.default_rng(seed)
    lo = np.asarray(bounds_min, dtype=np.float64)
    hi = np.asarray(bounds_max, dtype=np.float64)
    return lo + (hi - lo) * rng.random((m, 3))


def init_preconditioner(camera: CameraParams, points, damping: float | None = None) -> CameraParams:
    """Return a copy of ``camera`` with ``precond`` computed at ``phi0`` and zero residual."""
    base = replace(camera, delta_phi=np.zeros(K_PARAMS), precond=np.eye(K_PARAMS))
    jac = projection_jacobian(base, points)
    if damping is None:
        damping = default_damping(jac.T @ jac)
    m, _ = precondition_matrix(jac, damping)
    return replace(base, precond=m)


def loss_camera_reg(cameras) -> float:
    """Sum of squared deviations of effective parameters from their initial values."""
    total = 0.0
    for cam in cameras:
        diff = apply_residual(cam) - cam.phi0
        total += float(diff @ diff)
    return total
