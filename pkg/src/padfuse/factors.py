"""Residual blocks and robust kernels for the pose-estimation objective.

Three residual kinds over the object pose:

* ``vis``  -- 6-vector twist of the relative pose between estimate and the
  visual measurement.
* ``tac``  -- per pad, distance of the pad's contact point to the object
  surface, active only while the pad reports contact and the point is
  outside the object.
* ``pen``  -- per pad, penetration depth of the contact point, active only
  inside the object.

The tac/pen clamps are complementary: at most one is active for any state.
Jacobians are taken with respect to the right-perturbation twist of the
object pose; the cached contact point is treated as fixed (re-association
happens between solver iterations, not inside the derivative).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .liegroup import (Pose, _skew, compose, inverse, log,
                       se3_left_jacobian_inverse, transform_point)
from .sdf import SdfField, eval_sdf, grad_sdf


def welsch(e: float, theta: float):
    """Welsch loss value and derivative at squared-error e >= 0."""
    if theta <= 0:
        raise ValueError("theta must be positive")
    if e < 0:
        raise ValueError("squared error must be nonnegative")
    s = math.exp(-e / theta)
    return theta * (1.0 - s), s


@dataclass(frozen=True)
class Welsch:
    theta: float

    def __post_init__(self):
        if self.theta <= 0:
            raise ValueError("theta must be positive")

    def evaluate(self, e: float):
        return welsch(e, self.theta)


@dataclass(frozen=True)
class Quadratic:
    def evaluate(self, e: float):
        return e, 1.0


@dataclass(frozen=True)
class FactorWeights:
    """Isotropic precision weights per factor kind."""

    w_vis: float = 1.0
    w_tac: float = 1.0
    w_pen: float = 1.0

    def __post_init__(self):
        if min(self.w_vis, self.w_tac, self.w_pen) <= 0:
            raise ValueError("weights must be positive")


def residual_vis(xi: Pose, zeta: Pose) -> np.ndarray:
    """Twist of the relative pose xi^-1 zeta; zero iff xi == zeta."""
    return log(compose(inverse(xi), zeta))


def residual_tac(xi: Pose, y_k: bool, p_ck: np.ndarray, f: SdfField) -> float:
    if not y_k:
        return 0.0
    return max(0.0, eval_sdf(f, transform_point(inverse(xi), p_ck)))


def residual_pen(xi: Pose, p_ck: np.ndarray, f: SdfField) -> float:
    return min(0.0, eval_sdf(f, transform_point(inverse(xi), p_ck)))


def _point_jacobian(local: np.ndarray) -> np.ndarray:
    """d/d(delta) of exp(-delta) applied to a fixed object-frame point."""
    out = np.empty((3, 6))
    out[:, :3] = _skew(local)
    out[:, 3:] = -np.eye(3)
    return out


@dataclass
class ResidualBlock:
    """One factor: kind, weight, kernel, and its cached measurement.

    For tac/pen blocks ``point`` is the world-frame contact point, mutated
    by re-association as the pose estimate moves.
    """

    kind: str                  # "vis" | "tac" | "pen"
    weight: float
    kernel: object             # Welsch or Quadratic
    zeta: Pose | None = None   # vis
    contact: bool = False      # tac
    point: np.ndarray | None = None  # tac / pen, world frame
    sdf: SdfField | None = None

    @property
    def dim(self) -> int:
        return 6 if self.kind == "vis" else 1

    def residual(self, xi: Pose) -> np.ndarray:
        if self.kind == "vis":
            return residual_vis(xi, self.zeta)
        if self.kind == "tac":
            return np.array([residual_tac(xi, self.contact, self.point, self.sdf)])
        if self.kind == "pen":
            return np.array([residual_pen(xi, self.point, self.sdf)])
        raise ValueError(f"unknown factor kind {self.kind!r}")

    def jacobian(self, xi: Pose) -> np.ndarray:
        return jacobians(self, xi)


def jacobians(block: ResidualBlock, xi: Pose) -> np.ndarray:
    """(dim x 6) derivative w.r.t. the right-perturbation twist at xi."""
    if block.kind == "vis":
        r = residual_vis(xi, block.zeta)
        return -se3_left_jacobian_inverse(r)
    local = transform_point(inverse(xi), block.point)
    phi = eval_sdf(block.sdf, local)
    if block.kind == "tac":
        active = block.contact and phi > 0.0
    elif block.kind == "pen":
        active = phi < 0.0
    else:
        raise ValueError(f"unknown factor kind {block.kind!r}")
    if not active:
        return np.zeros((1, 6))
    g = grad_sdf(block.sdf, local)
    return (g @ _point_jacobian(local)).reshape(1, 6)
