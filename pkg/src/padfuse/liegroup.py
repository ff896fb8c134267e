"""SO(3)/SE(3) group operations on unit quaternions.

Twists are plain numpy 6-vectors ordered (wx, wy, wz, vx, vy, vz): angular
part in radians first, linear part in meters second.  The retraction (and
every Jacobian built on top of it) uses the right-perturbation convention
``retract(p, d) = p * exp(d)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

# Below this rotation angle the closed-form exp/log coefficients degenerate
# to 0/0 and their truncated series are used instead.
SMALL_ANGLE = 1e-6


class AngleNearPiWarning(RuntimeWarning):
    """Rotation angle within 1e-6 of pi: the log axis is ill-conditioned.

    The result is still returned; callers that cannot tolerate the sign
    ambiguity of the axis may reject it.
    """


def _skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class Rotation:
    """Unit quaternion (w, x, y, z), canonicalized to w >= 0."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4).copy()
        n = math.sqrt(q @ q)
        if n < 1e-12:
            raise ValueError("quaternion norm too small to normalize")
        q /= n
        if q[0] < 0.0:
            q = -q
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @staticmethod
    def identity() -> "Rotation":
        return Rotation()

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Rotation":
        m = np.asarray(m, dtype=float)
        # Shepperd's method: pick the largest of the four quaternion terms.
        t = np.trace(m)
        if t > 0.0:
            s = math.sqrt(t + 1.0) * 2.0
            q = np.array([0.25 * s,
                          (m[2, 1] - m[1, 2]) / s,
                          (m[0, 2] - m[2, 0]) / s,
                          (m[1, 0] - m[0, 1]) / s])
        elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            q = np.array([(m[2, 1] - m[1, 2]) / s,
                          0.25 * s,
                          (m[0, 1] + m[1, 0]) / s,
                          (m[0, 2] + m[2, 0]) / s])
        elif m[1, 1] >= m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            q = np.array([(m[0, 2] - m[2, 0]) / s,
                          (m[0, 1] + m[1, 0]) / s,
                          0.25 * s,
                          (m[1, 2] + m[2, 1]) / s])
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            q = np.array([(m[1, 0] - m[0, 1]) / s,
                          (m[0, 2] + m[2, 0]) / s,
                          (m[1, 2] + m[2, 1]) / s,
                          0.25 * s])
        return Rotation(q)

    def as_matrix(self) -> np.ndarray:
        w, x, y, z = self.q
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def multiply(self, other: "Rotation") -> "Rotation":
        w1, x1, y1, z1 = self.q
        w2, x2, y2, z2 = other.q
        return Rotation(np.array([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]))

    def inverse(self) -> "Rotation":
        w, x, y, z = self.q
        return Rotation(np.array([w, -x, -y, -z]))

    def rotate(self, v: np.ndarray) -> np.ndarray:
        """Rotate one 3-vector or an (N, 3) batch."""
        v = np.asarray(v, dtype=float)
        return v @ self.as_matrix().T

    def angle(self) -> float:
        """Rotation angle in [0, pi]."""
        s = np.linalg.norm(self.q[1:])
        return 2.0 * math.atan2(s, self.q[0])

    def allclose(self, other: "Rotation", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.q, other.q, atol=atol)
                    or np.allclose(self.q, -other.q, atol=atol))


@dataclass(frozen=True)
class Pose:
    """Rigid transform: x_world = R x + t."""

    rotation: Rotation = field(default_factory=Rotation)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return Pose(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.as_matrix()
        m[:3, 3] = self.translation
        return m

    def to_json(self) -> dict:
        return {"q": [float(v) for v in self.rotation.q],
                "t": [float(v) for v in self.translation]}

    @staticmethod
    def from_json(obj: dict) -> "Pose":
        return Pose(Rotation(np.array(obj["q"], dtype=float)),
                    np.array(obj["t"], dtype=float))


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation.multiply(b.rotation),
                a.rotation.rotate(b.translation) + a.translation)


def inverse(p: Pose) -> Pose:
    rinv = p.rotation.inverse()
    return Pose(rinv, -rinv.rotate(p.translation))


def transform_point(p: Pose, x: np.ndarray) -> np.ndarray:
    return p.rotation.rotate(x) + p.translation


def transform_points(p: Pose, xs: np.ndarray) -> np.ndarray:
    """Apply the transform to an (N, 3) batch."""
    return np.asarray(xs, dtype=float) @ p.rotation.as_matrix().T + p.translation


def so3_exp(w: np.ndarray) -> Rotation:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    if theta < SMALL_ANGLE:
        # sin(t/2)/t = 1/2 - t^2/48 + O(t^4)
        k = 0.5 - theta * theta / 48.0
    else:
        k = math.sin(0.5 * theta) / theta
    return Rotation(np.concatenate([[math.cos(0.5 * theta)], k * w]))


def so3_log(r: Rotation) -> np.ndarray:
    w, qv = r.q[0], r.q[1:]
    s = np.linalg.norm(qv)
    angle = 2.0 * math.atan2(s, w)
    if math.pi - angle < SMALL_ANGLE:
        warnings.warn("rotation angle within 1e-6 of pi", AngleNearPiWarning,
                      stacklevel=2)
    if s < SMALL_ANGLE:
        # angle/sin(angle/2) -> 2 for small angle; qv = sin(angle/2)*axis
        return qv * (2.0 / w if w > 0 else 2.0)
    return qv * (angle / s)


def _v_matrix(w: np.ndarray) -> np.ndarray:
    """SO(3) left Jacobian: translation mixer of the SE(3) exponential."""
    theta = np.linalg.norm(w)
    S = _skew(w)
    # theta - sin(theta) cancels catastrophically below ~1e-3; 1 - cos(theta)
    # is rewritten as 2 sin^2(theta/2) which does not.
    if theta < 1e-3:
        a = 0.5 - theta * theta / 24.0
        b = 1.0 / 6.0 - theta * theta / 120.0
    else:
        half_sin = math.sin(0.5 * theta)
        a = 2.0 * half_sin * half_sin / (theta * theta)
        b = (theta - math.sin(theta)) / (theta ** 3)
    return np.eye(3) + a * S + b * (S @ S)


def _v_inverse(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    S = _skew(w)
    if theta < 1e-3:
        c = 1.0 / 12.0 + theta * theta / 720.0
    else:
        # 1 - (theta/2) cot(theta/2), with 1 - cos as 2 sin^2(theta/2)
        half = 0.5 * theta
        c = (1.0 - half * math.cos(half) / math.sin(half)) / (theta * theta)
    return np.eye(3) - 0.5 * S + c * (S @ S)


def exp(twist: np.ndarray) -> Pose:
    """SE(3) exponential of a (wx, wy, wz, vx, vy, vz) twist."""
    twist = np.asarray(twist, dtype=float).reshape(6)
    w, v = twist[:3], twist[3:]
    return Pose(so3_exp(w), _v_matrix(w) @ v)


def log(p: Pose) -> np.ndarray:
    """SE(3) logarithm; warns with AngleNearPiWarning close to the cut."""
    w = so3_log(p.rotation)
    v = _v_inverse(w) @ p.translation
    return np.concatenate([w, v])


def retract(p: Pose, delta: np.ndarray) -> Pose:
    """Right-perturbation manifold update."""
    return compose(p, exp(delta))


def local_coords(p: Pose, q: Pose) -> np.ndarray:
    """Inverse of retract: the twist d with retract(p, d) = q."""
    return log(compose(inverse(p), q))


def so3_left_jacobian_inverse(w: np.ndarray) -> np.ndarray:
    return _v_inverse(w)


def _q_block(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Translation-rotation coupling block of the SE(3) left Jacobian."""
    theta = np.linalg.norm(w)
    P = _skew(v)
    W = _skew(w)
    WP = W @ P
    PW = P @ W
    WPW = WP @ W
    if theta < 1e-2:
        c1 = 1.0 / 6.0 - theta * theta / 120.0
        c2 = 1.0 / 24.0 - theta * theta / 720.0
        c3 = 1.0 / 120.0 - theta * theta / 2520.0
    else:
        t2 = theta * theta
        half_sin = math.sin(0.5 * theta)
        c1 = (theta - math.sin(theta)) / (t2 * theta)
        # (theta^2 + 2 cos - 2) / (2 theta^4), with 2 - 2cos = 4 sin^2(theta/2)
        c2 = (t2 - 4.0 * half_sin * half_sin) / (2.0 * t2 * t2)
        c3 = (2.0 * theta - 3.0 * math.sin(theta) + theta * math.cos(theta)) / (2.0 * t2 * t2 * theta)
    return (0.5 * P
            + c1 * (WP + PW + W @ PW)
            + c2 * (W @ WP + PW @ W - 3.0 * WPW)
            + c3 * (WPW @ W + W @ WPW))


def se3_left_jacobian_inverse(twist: np.ndarray) -> np.ndarray:
    """Inverse left Jacobian of SE(3) in (w, v) twist ordering.

    Satisfies log(exp(tau) * exp(xi)) ~= xi + Jl_inv(xi) @ tau for small tau.
    """
    twist = np.asarray(twist, dtype=float).reshape(6)
    w, v = twist[:3], twist[3:]
    jinv = _v_inverse(w)
    out = np.zeros((6, 6))
    out[:3, :3] = jinv
    out[3:, 3:] = jinv
    out[3:, :3] = -jinv @ _q_block(v, w) @ jinv
    return out
