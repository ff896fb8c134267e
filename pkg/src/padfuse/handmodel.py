"""Kinematic hand with binary-contact sensor pads.

Serial chains of revolute joints carry rectangular sensor pads on their
links; extra pads mount directly on the palm.  Each pad owns a planar grid
of candidate contact points (spacing s, rounded edges of radius r_e
excluded) used to localize contacts against an object SDF.

Frame conventions: a chain accumulates ``base * Rot(axis_0, q_0) *
offset_0 * Rot(axis_1, q_1) * ...``; the pad of joint j mounts in the frame
right after ``Rot(axis_j, q_j)`` (the link frame), before ``offset_j``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources

import numpy as np

from .liegroup import Pose, Rotation, inverse, transform_points
from .sdf import SdfField, eval_sdf


class DofMismatch(ValueError):
    """Joint vector length does not match the hand's degree count."""


@dataclass(frozen=True)
class SensorPad:
    """Rectangular binary-contact pad; the sensing face is its local z=0 plane."""

    mount: Pose
    half_extents: tuple  # (a, b) meters along pad x and y
    edge_radius: float = 0.002
    spacing: float = 0.001

    @cached_property
    def grid(self) -> np.ndarray:
        """(M, 3) candidate contact points in the pad frame, z = 0."""
        a, b = self.half_extents
        pts_x = _grid_axis(a, self.edge_radius, self.spacing)
        pts_y = _grid_axis(b, self.edge_radius, self.spacing)
        gx, gy = np.meshgrid(pts_x, pts_y, indexing="xy")
        out = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
        out.setflags(write=False)
        return out

    def to_json(self) -> dict:
        return {"mount": self.mount.to_json(),
                "half_extents": list(map(float, self.half_extents)),
                "edge_radius": self.edge_radius, "spacing": self.spacing}

    @staticmethod
    def from_json(obj: dict) -> "SensorPad":
        return SensorPad(mount=Pose.from_json(obj["mount"]),
                         half_extents=tuple(obj["half_extents"]),
                         edge_radius=obj.get("edge_radius", 0.002),
                         spacing=obj.get("spacing", 0.001))


def _grid_axis(half_extent: float, edge_radius: float, spacing: float) -> np.ndarray:
    usable = 2.0 * (half_extent - edge_radius)
    if usable < 0:
        raise ValueError("edge radius exceeds pad half extent")
    count = int(np.floor(usable / spacing + 1.0 + 1e-9))
    span = (count - 1) * spacing
    return -0.5 * span + spacing * np.arange(count)


@dataclass(frozen=True)
class Joint:
    axis: np.ndarray  # unit rotation axis in the parent frame
    offset: Pose      # link transform applied after the joint rotation
    close_angle: float = 1.0
    pad: SensorPad | None = None

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        axis = axis / np.linalg.norm(axis)
        axis.setflags(write=False)
        object.__setattr__(self, "axis", axis)


@dataclass(frozen=True)
class Chain:
    base: Pose
    joints: tuple
    probe: np.ndarray | None = None  # kinematic stop point in the tip frame

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))
        if self.probe is not None:
            p = np.asarray(self.probe, dtype=float).reshape(3)
            p.setflags(write=False)
            object.__setattr__(self, "probe", p)


@dataclass(frozen=True)
class HandModel:
    palm_pads: tuple
    chains: tuple

    def __post_init__(self):
        object.__setattr__(self, "palm_pads", tuple(self.palm_pads))
        object.__setattr__(self, "chains", tuple(self.chains))

    @property
    def dof(self) -> int:
        return sum(len(c.joints) for c in self.chains)

    @cached_property
    def pads(self) -> tuple:
        """All K pads: palm pads first, then chain pads in kinematic order."""
        out = list(self.palm_pads)
        for chain in self.chains:
            out.extend(j.pad for j in chain.joints if j.pad is not None)
        return tuple(out)

    @property
    def num_pads(self) -> int:
        return len(self.pads)

    def to_json(self) -> dict:
        return {
            "palm_pads": [p.to_json() for p in self.palm_pads],
            "chains": [{
                "base": c.base.to_json(),
                "probe": list(map(float, c.probe)) if c.probe is not None else None,
                "joints": [{
                    "axis": list(map(float, j.axis)),
                    "offset": j.offset.to_json(),
                    "close_angle": j.close_angle,
                    "pad": j.pad.to_json() if j.pad is not None else None,
                } for j in c.joints],
            } for c in self.chains],
        }

    @staticmethod
    def from_json(obj: dict) -> "HandModel":
        chains = []
        for c in obj["chains"]:
            joints = tuple(Joint(
                axis=np.array(j["axis"], dtype=float),
                offset=Pose.from_json(j["offset"]),
                close_angle=j.get("close_angle", 1.0),
                pad=SensorPad.from_json(j["pad"]) if j.get("pad") else None,
            ) for j in c["joints"])
            probe = c.get("probe")
            chains.append(Chain(base=Pose.from_json(c["base"]), joints=joints,
                                probe=np.array(probe) if probe else None))
        pads = tuple(SensorPad.from_json(p) for p in obj["palm_pads"])
        return HandModel(palm_pads=pads, chains=tuple(chains))


def load_hand(ref: str = "default") -> HandModel:
    """Load a hand description: 'default' or a path to a JSON file."""
    if ref == "default":
        text = resources.files("padfuse").joinpath("data/default_hand.json").read_text()
    else:
        with open(ref) as fh:
            text = fh.read()
    return HandModel.from_json(json.loads(text))


def _axis_rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    x, y, z = axis
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def pad_frames(hand: HandModel, q: np.ndarray, base: Pose = Pose()):
    """Pad frames as stacked arrays: rotations (K, 3, 3), origins (K, 3).

    Matrix-accumulation fast path behind forward_kinematics; also returns
    the chain tip frames for the kinematic stop probes.
    """
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape[0] != hand.dof:
        raise DofMismatch(f"expected {hand.dof} joint angles, got {q.shape[0]}")
    Rs, ts = [], []
    Rb = base.rotation.as_matrix()
    tb = base.translation
    for pad in hand.palm_pads:
        Rs.append(Rb @ pad.mount.rotation.as_matrix())
        ts.append(Rb @ pad.mount.translation + tb)
    tips = []
    i = 0
    for chain in hand.chains:
        R = Rb @ chain.base.rotation.as_matrix()
        t = Rb @ chain.base.translation + tb
        for joint in chain.joints:
            R = R @ _axis_rotation_matrix(joint.axis, q[i])
            if joint.pad is not None:
                Rs.append(R @ joint.pad.mount.rotation.as_matrix())
                ts.append(R @ joint.pad.mount.translation + t)
            t = R @ joint.offset.translation + t
            R = R @ joint.offset.rotation.as_matrix()
            i += 1
        tips.append((R, t))
    return np.array(Rs), np.array(ts), tips


def forward_kinematics(hand: HandModel, q: np.ndarray,
                       base: Pose = Pose()) -> list:
    """World poses of all K pads for joint configuration q."""
    Rs, ts, _ = pad_frames(hand, q, base)
    return [Pose(Rotation.from_matrix(R), t) for R, t in zip(Rs, ts)]


def chain_tips(hand: HandModel, q: np.ndarray, base: Pose = Pose()) -> list:
    """Tip frame of each chain (used for kinematic stop probes)."""
    _, _, tips = pad_frames(hand, q, base)
    return [Pose(Rotation.from_matrix(R), t) for R, t in tips]


def contact_point(pad: SensorPad, pad_pose: Pose, object_pose: Pose,
                  f: SdfField):
    """Grid point with minimal SDF in the object frame.

    Returns (world point, sdf value, grid index); ties break toward the
    lowest grid index.
    """
    world = transform_points(pad_pose, pad.grid)
    local = transform_points(inverse(object_pose), world)
    values = eval_sdf(f, local)
    idx = int(np.argmin(values))
    return world[idx], float(values[idx]), idx


def pad_world_points(hand: HandModel, q: np.ndarray,
                     base: Pose = Pose()):
    """All pad grid points in world frame, concatenated, plus segment offsets."""
    Rs, ts, _ = pad_frames(hand, q, base)
    chunks = [pad.grid @ R.T + t for pad, R, t in zip(hand.pads, Rs, ts)]
    sizes = np.array([c.shape[0] for c in chunks])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return np.concatenate(chunks, axis=0), offsets


def pad_min_sdf(hand: HandModel, q: np.ndarray, object_pose: Pose,
                f: SdfField, base: Pose = Pose()) -> np.ndarray:
    """Minimum SDF value over each pad's grid, length K."""
    world, offsets = pad_world_points(hand, q, base)
    local = transform_points(inverse(object_pose), world)
    values = eval_sdf(f, local)
    return np.minimum.reduceat(values, offsets[:-1])


def synthesize_contacts(hand: HandModel, q: np.ndarray, object_pose: Pose,
                        f: SdfField, threshold: float = 0.0,
                        base: Pose = Pose()) -> np.ndarray:
    """Binary contact vector: pad k touches iff its min SDF <= threshold."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    return pad_min_sdf(hand, q, object_pose, f, base) <= threshold
