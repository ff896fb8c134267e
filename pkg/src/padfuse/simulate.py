"""Synthetic grasp scenarios: kinematic closing, contacts, noisy vision.

The world is kinematic: the object rests statically in the palm while the
fingers close; each joint freezes the moment a pad it moves first touches
the object (found by bisection along the joint sweep, landing the pad a
fixed overshoot below the contact threshold), so grasps are stable and
exactly reproducible.  After the grasp, the whole hand+object assembly
rotates rigidly to emulate the occlusion-increasing wrist rotation; vision
noise and outlier probability scale with an occlusion multiplier that ramps
during the rotation.

The vision oracle perturbs the ground-truth pose with an object-frame
Gaussian twist, replaced by an outlier draw with (occlusion-scaled)
probability, and optionally shifted by a constant world-frame bias twist.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .handmodel import (HandModel, _axis_rotation_matrix, load_hand, pad_frames,
                        pad_min_sdf, pad_world_points)
from .liegroup import Pose, Rotation, compose, exp, inverse, transform_points
from .sdf import (ObjectModel, SdfField, bake, bounds, eval_sdf, sample_surface,
                  shape_from_json, shape_to_json, support)

# RealSense-style depth noise polynomial coefficients (meters vs. meters)
DEPTH_NOISE_COEFFS = (0.001063, 0.0007278, 0.003949)


class RejectionExhausted(RuntimeError):
    """Could not sample a penetration-free initial pose in 1000 tries."""


def depth_noise_sigma(d_pix: float) -> float:
    """Depth noise std (m) as a quadratic in measured depth (m)."""
    if d_pix < 0:
        raise ValueError("depth must be nonnegative")
    c0, c1, c2 = DEPTH_NOISE_COEFFS
    return c0 + c1 * d_pix + c2 * d_pix * d_pix


@dataclass(frozen=True)
class ScenarioConfig:
    object_shape: dict = field(default_factory=lambda: {"shape": "sphere", "radius": 0.03})
    hand: str = "default"
    # timing (s)
    duration: float = 6.0
    settle_duration: float = 0.5
    close_duration: float = 2.0
    rotate_start: float = 3.0
    rotate_duration: float = 1.5
    rotate_angle_deg: float = 45.0
    thumb_delay_frac: float = 0.4
    # rates (Hz)
    vision_hz: float = 30.0
    tactile_hz: float = 100.0
    # vision noise
    rot_sigma: float = 0.02
    trans_sigma: float = 0.005
    noise_scale: float = 1.0
    outlier_prob: float = 0.05
    outlier_rot_sigma: float = 0.5
    outlier_trans_sigma: float = 0.1
    occlusion_max: float = 3.0
    camera_distance: float | None = None
    vision_bias: tuple = (0.0,) * 6  # world-frame twist, left-composed
    # contacts
    contact_threshold: float = 0.0
    touch_overshoot: float = 1e-4
    # placement
    placement: str = "vary"  # "vary" | "occ"
    rest_xy: tuple = (0.0, 0.018)
    occ_yaw_deg: float = 5.0
    # object SDF
    sdf_mode: str = "grid"  # "grid" | "analytic"
    sdf_resolution: int = 128
    sdf_padding: float = 0.02
    surface_samples: int = 512
    seed: int = 0

    def __post_init__(self):
        if min(self.vision_hz, self.tactile_hz) <= 0:
            raise ValueError("rates must be positive")
        if min(self.duration, self.settle_duration, self.close_duration,
               self.rotate_duration) <= 0:
            raise ValueError("durations must be positive")
        if not 0.0 <= self.outlier_prob <= 1.0:
            raise ValueError("outlier probability must be in [0, 1]")
        if self.rotate_start < self.settle_duration + self.close_duration:
            raise ValueError("rotation must start after the grasp completes")
        if self.placement not in ("vary", "occ"):
            raise ValueError(f"unknown placement {self.placement!r}")
        if self.contact_threshold < 0:
            raise ValueError("contact threshold must be >= 0")

    @property
    def trans_sigma_effective(self) -> float:
        if self.camera_distance is not None:
            return depth_noise_sigma(self.camera_distance)
        return self.trans_sigma

    def to_json(self) -> dict:
        out = dict(self.__dict__)
        out["vision_bias"] = list(self.vision_bias)
        out["rest_xy"] = list(self.rest_xy)
        return out

    @staticmethod
    def from_json(obj: dict) -> "ScenarioConfig":
        kw = dict(obj)
        if "vision_bias" in kw:
            kw["vision_bias"] = tuple(kw["vision_bias"])
        if "rest_xy" in kw:
            kw["rest_xy"] = tuple(kw["rest_xy"])
        return ScenarioConfig(**kw)


def build_field(cfg: ScenarioConfig) -> SdfField:
    shape = shape_from_json(cfg.object_shape)
    if cfg.sdf_mode == "grid":
        return bake(shape, cfg.sdf_resolution, cfg.sdf_padding)
    return shape


def build_object_model(cfg: ScenarioConfig) -> ObjectModel:
    shape = shape_from_json(cfg.object_shape)
    points = sample_surface(shape, cfg.surface_samples, seed=cfg.seed)
    return ObjectModel(sdf=build_field(cfg), surface_points=points)


@dataclass(frozen=True)
class Record:
    t: float
    gt: Pose
    q: np.ndarray
    contacts: np.ndarray
    occlusion: float
    hand_base: Pose
    zeta: Pose | None = None

    def to_json(self) -> dict:
        return {"t": self.t, "gt": self.gt.to_json(),
                "q": [float(v) for v in self.q],
                "y": [int(v) for v in self.contacts],
                "occ": self.occlusion,
                "base": self.hand_base.to_json(),
                "zeta": self.zeta.to_json() if self.zeta is not None else None}

    @staticmethod
    def from_json(obj: dict) -> "Record":
        return Record(t=obj["t"], gt=Pose.from_json(obj["gt"]),
                      q=np.array(obj["q"], dtype=float),
                      contacts=np.array(obj["y"], dtype=bool),
                      occlusion=obj["occ"],
                      hand_base=Pose.from_json(obj["base"]),
                      zeta=Pose.from_json(obj["zeta"]) if obj["zeta"] else None)


@dataclass
class SequenceData:
    config: ScenarioConfig
    records: list

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"type": "scenario", "config": self.config.to_json()}))
            fh.write("\n")
            for rec in self.records:
                fh.write(json.dumps(rec.to_json()))
                fh.write("\n")

    @staticmethod
    def load(path) -> "SequenceData":
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header.get("type") != "scenario":
                raise ValueError("not a scenario sequence file")
            cfg = ScenarioConfig.from_json(header["config"])
            records = [Record.from_json(json.loads(line)) for line in fh if line.strip()]
        return SequenceData(config=cfg, records=records)

    def vision_records(self):
        return [r for r in self.records if r.zeta is not None]


def occlusion_factor(cfg: ScenarioConfig, t: float) -> float:
    """1 before the rotation, ramping linearly to occlusion_max during it."""
    ramp = np.clip((t - cfg.rotate_start) / cfg.rotate_duration, 0.0, 1.0)
    return 1.0 + (cfg.occlusion_max - 1.0) * float(ramp)


def draw_vision_noise(cfg: ScenarioConfig, occ: float, rng: np.random.Generator):
    """Object-frame perturbation twist for one vision frame.

    The random stream is consumed identically for any noise settings so that
    a fixed seed yields the same outlier pattern across noise sweeps.
    """
    u = rng.random()
    eps = rng.normal(size=6)
    if u < min(1.0, cfg.outlier_prob * occ):
        scale = np.array([cfg.outlier_rot_sigma] * 3 + [cfg.outlier_trans_sigma] * 3)
        return eps * scale, True
    s_rot = cfg.rot_sigma * cfg.noise_scale * occ
    s_trans = cfg.trans_sigma_effective * cfg.noise_scale * occ
    return eps * np.array([s_rot] * 3 + [s_trans] * 3), False


def _observe(cfg: ScenarioConfig, gt: Pose, occ: float,
             rng: np.random.Generator) -> Pose:
    twist, _ = draw_vision_noise(cfg, occ, rng)
    bias = np.asarray(cfg.vision_bias, dtype=float)
    if not twist.any() and not bias.any():
        return gt
    out = compose(gt, exp(twist))
    if bias.any():
        out = compose(exp(bias), out)
    return out


def _sample_initial_pose(cfg: ScenarioConfig, hand: HandModel,
                         shape, field_: SdfField,
                         rng: np.random.Generator) -> Pose:
    q0 = np.zeros(hand.dof)
    down = np.array([0.0, 0.0, -1.0])
    for _ in range(1000):
        if cfg.placement == "vary":
            rot = Rotation(rng.normal(size=4))
            dz = rng.uniform(0.0, float(np.min(bounds(shape))))
        else:
            yaw = math.radians(rng.uniform(-cfg.occ_yaw_deg, cfg.occ_yaw_deg))
            rot = Rotation(np.array([math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)]))
            dz = 0.0
        drop = support(shape, rot.as_matrix().T @ down)
        pose = Pose(rot, np.array([cfg.rest_xy[0], cfg.rest_xy[1], drop + dz]))
        if pad_min_sdf(hand, q0, pose, field_).min() > -1e-6 \
                and _probe_min_sdf(hand, q0, pose, field_) > -1e-6:
            return pose
    raise RejectionExhausted("no penetration-free initial pose in 1000 samples")


def _probe_min_sdf(hand: HandModel, q, object_pose: Pose, field_: SdfField,
                   base: Pose = Pose()) -> float:
    """Min SDF over the chains' kinematic stop probes (inf if none)."""
    _, _, tips = pad_frames(hand, q, base)
    inv = inverse(object_pose)
    best = math.inf
    for chain, (R, t) in zip(hand.chains, tips):
        if chain.probe is None:
            continue
        world = R @ chain.probe + t
        best = min(best, float(eval_sdf(field_, inv.rotation.rotate(world)
                                        + inv.translation)))
    return best


class _ClosingPlan:
    """Slot schedule: per chain, joints close sequentially; thumbs delayed.

    A chain whose joints carry no pads counts as a thumb.  Joint j of a
    chain freezes permanently as soon as any pad (or the stop probe) on a
    link at or beyond j touches the object, because every such contact
    would otherwise be dragged by joint j.
    """

    def __init__(self, cfg: ScenarioConfig, hand: HandModel):
        self.cfg = cfg
        self.hand = hand
        self.start = cfg.settle_duration
        self.slots = []   # per chain: (start_time, slot_duration)
        self.joint_index = []  # per chain: global q indices
        self.pad_links = []    # per chain: list of (link_idx, global pad idx)
        gi = 0
        pad_idx = len(hand.palm_pads)
        finger_span = (1.0 - cfg.thumb_delay_frac) * cfg.close_duration
        for chain in hand.chains:
            is_thumb = all(j.pad is None for j in chain.joints)
            t0 = self.start + (cfg.thumb_delay_frac * cfg.close_duration if is_thumb else 0.0)
            span = min(finger_span, cfg.close_duration * (1.0 - (cfg.thumb_delay_frac if is_thumb else 0.0)))
            self.slots.append((t0, span / max(1, len(chain.joints))))
            self.joint_index.append(list(range(gi, gi + len(chain.joints))))
            gi += len(chain.joints)
            links = []
            for l, joint in enumerate(chain.joints):
                if joint.pad is not None:
                    links.append((l, pad_idx))
                    pad_idx += 1
            self.pad_links.append(links)
        self.frozen = [np.zeros(len(c.joints), dtype=bool) for c in hand.chains]

    def _chain_pad_sdf(self, q, inv_obj: Pose, field_, chain_idx):
        """Per-pad (and probe) min SDF for one chain: {link or 'probe': value}."""
        chain = self.hand.chains[chain_idx]
        R = chain.base.rotation.as_matrix()
        t = chain.base.translation
        keys, chunks = [], []
        pad_of_link = {l: gi for l, gi in self.pad_links[chain_idx]}
        for l, (joint, qi) in enumerate(zip(chain.joints, self.joint_index[chain_idx])):
            R = R @ _axis_rotation_matrix(joint.axis, q[qi])
            if l in pad_of_link:
                pad = self.hand.pads[pad_of_link[l]]
                mount_R = pad.mount.rotation.as_matrix()
                keys.append(l)
                chunks.append(pad.grid @ (R @ mount_R).T
                              + (R @ pad.mount.translation + t))
            t = R @ joint.offset.translation + t
            R = R @ joint.offset.rotation.as_matrix()
        if chain.probe is not None:
            keys.append("probe")
            chunks.append((R @ chain.probe + t).reshape(1, 3))
        values = eval_sdf(field_, transform_points(inv_obj, np.concatenate(chunks)))
        offsets = np.concatenate([[0], np.cumsum([c.shape[0] for c in chunks])])
        minima = np.minimum.reduceat(values, offsets[:-1])
        return dict(zip(keys, minima.tolist()))

    def _candidate_min(self, q, inv_obj, field_, chain_idx, from_link):
        """(min sdf, deepest link idx) over pads/probe on links >= from_link."""
        values = self._chain_pad_sdf(q, inv_obj, field_, chain_idx)
        n_joints = len(self.hand.chains[chain_idx].joints)
        best, best_link = math.inf, None
        for key, v in values.items():
            link = n_joints - 1 if key == "probe" else key
            if link < from_link:
                continue
            if v < best:
                best, best_link = v, link
        return best, best_link

    def advance(self, q: np.ndarray, t: float, dt: float,
                object_pose: Pose, field_: SdfField,
                pad_min: np.ndarray) -> bool:
        """Move the scheduled joints over [t, t+dt); returns True if q changed.

        pad_min holds the per-pad minimum SDF and is updated in place for
        pads of any chain that moved.
        """
        cfg = self.cfg
        target = cfg.contact_threshold - cfg.touch_overshoot
        inv_obj = inverse(object_pose)
        changed = False
        for ci, chain in enumerate(self.hand.chains):
            t0, slot = self.slots[ci]
            j = int((t - t0) / slot) if t >= t0 else -1
            if j < 0 or j >= len(chain.joints) or self.frozen[ci][j]:
                continue
            gi = self.joint_index[ci][j]
            joint = chain.joints[j]
            rate = joint.close_angle / slot
            dq = min(rate * dt, joint.close_angle - q[gi])
            if dq <= 0:
                continue
            q_old = q[gi]
            q[gi] = q_old + dq
            changed = True
            m, link = self._candidate_min(q, inv_obj, field_, ci, j)
            if m <= cfg.contact_threshold:
                if m <= target:
                    # bisect the sweep so the deepest pad lands at the target depth
                    lo, hi = 0.0, 1.0
                    for _ in range(40):
                        mid = 0.5 * (lo + hi)
                        q[gi] = q_old + mid * dq
                        m, link = self._candidate_min(q, inv_obj, field_, ci, j)
                        if m > target:
                            lo = mid
                        else:
                            hi = mid
                    q[gi] = q_old + hi * dq
                    m, link = self._candidate_min(q, inv_obj, field_, ci, j)
                self.frozen[ci][:link + 1] = True
            values = self._chain_pad_sdf(q, inv_obj, field_, ci)
            for l, pad_gi in self.pad_links[ci]:
                pad_min[pad_gi] = values[l]
        return changed


def generate(cfg: ScenarioConfig) -> SequenceData:
    """Simulate one grasp sequence at the tactile rate."""
    rng = np.random.default_rng(cfg.seed)
    hand = load_hand(cfg.hand)
    shape = shape_from_json(cfg.object_shape)
    field_ = build_field(cfg)
    rest_pose = _sample_initial_pose(cfg, hand, shape, field_, rng)
    plan = _ClosingPlan(cfg, hand)

    dt = 1.0 / cfg.tactile_hz
    n_steps = int(round(cfg.duration * cfg.tactile_hz)) + 1
    rot_axis = np.array([1.0, 0.0, 0.0])
    rot_total = math.radians(cfg.rotate_angle_deg)

    q = np.zeros(hand.dof)
    # contacts depend only on the hand-object relative configuration, so the
    # per-pad minima are tracked in the unrotated frame and updated only for
    # chains that moved
    pad_min = pad_min_sdf(hand, q, rest_pose, field_)
    records = []
    next_vis = 0.0
    for i in range(n_steps):
        t = i * dt
        if t < cfg.rotate_start:
            plan.advance(q, t, dt, rest_pose, field_, pad_min)
        ramp = np.clip((t - cfg.rotate_start) / cfg.rotate_duration, 0.0, 1.0)
        angle = rot_total * float(ramp)
        world = Pose(Rotation(np.concatenate([[math.cos(angle / 2)],
                                              math.sin(angle / 2) * rot_axis])))
        gt = compose(world, rest_pose)
        y = pad_min <= cfg.contact_threshold
        occ = occlusion_factor(cfg, t)
        zeta = None
        if t >= next_vis - 1e-9:
            next_vis += 1.0 / cfg.vision_hz
            zeta = _observe(cfg, gt, occ, rng)
        records.append(Record(t=t, gt=gt, q=q.copy(), contacts=y.copy(),
                              occlusion=occ, hand_base=world, zeta=zeta))
    return SequenceData(config=cfg, records=records)


def rescale_vision(seq: SequenceData, noise_scale: float,
                   seed: int | None = None) -> SequenceData:
    """Same grasp, fresh vision stream with a different noise scale.

    Re-draws every visual measurement from the stored ground truth and
    occlusion factors, leaving the (expensive) kinematic closing untouched;
    this is how noise-sweep experiments reuse one set of grasps.
    """
    cfg = replace(seq.config, noise_scale=noise_scale)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    records = []
    for rec in seq.records:
        zeta = None
        if rec.zeta is not None:
            zeta = _observe(cfg, rec.gt, rec.occlusion, rng)
        records.append(replace(rec, zeta=zeta))
    return SequenceData(config=cfg, records=records)


def max_pad_penetration(seq: SequenceData, hand: HandModel | None = None,
                        field_: SdfField | None = None) -> float:
    """Deepest pad-grid-point penetration into the ground-truth object (m)."""
    hand = hand or load_hand(seq.config.hand)
    field_ = field_ or build_field(seq.config)
    worst = 0.0
    seen = set()
    for rec in seq.records:
        key = rec.q.tobytes()
        if key in seen:
            continue
        seen.add(key)
        world, _ = pad_world_points(hand, rec.q)
        # relative configuration: gt in the unrotated frame is the rest pose
        rel = compose(inverse(rec.hand_base), rec.gt)
        local = transform_points(inverse(rel), world)
        worst = min(worst, float(eval_sdf(field_, local).min()))
    return -worst
