"""Per-timestep tracking loop.

Each step assembles the factor problem from the current measurements (one
visual block when a vision frame is present, K tactile and K penetration
blocks from the pad contact points), warm-starts from the previous
estimate, and runs the robust LM solver.  Contact points are re-associated
to the minimum-SDF pad grid point at the start of every solver iteration.

The hand base pose rides along in the measurements (the wrist is assumed
measured, like the joints), so whole-hand motion is visible to the tactile
and penetration factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .factors import FactorWeights, Quadratic, ResidualBlock, Welsch
from .handmodel import HandModel, pad_world_points
from .liegroup import Pose, inverse, transform_points
from .sdf import ObjectModel, eval_sdf
from .solver import SolveReport, SolverConfig, solve


class NotInitialized(RuntimeError):
    """First tracked frame arrived without a visual pose."""


def _pose_gap(a: Pose, b: Pose, lever: float = 0.2) -> float:
    """Upper bound on how far a point within `lever` of the origin moves."""
    dq = min(np.abs(a.rotation.q - b.rotation.q).max(),
             np.abs(a.rotation.q + b.rotation.q).max())
    dt = np.abs(a.translation - b.translation).max()
    # quaternion chord bounds the rotation angle: |angle| <= 4 |dq|
    return 4.0 * dq * lever + dt


@dataclass(frozen=True)
class ModeFlags:
    use_vis: bool = True
    use_tac: bool = True
    use_pen: bool = True
    passthrough: bool = False  # vision baseline: no optimization at all


def configure_ablation(mode: str) -> ModeFlags:
    """Mode presets: 'vis' (baseline passthrough), 'vis+pen', 'vis+tac+pen'."""
    if mode == "vis":
        return ModeFlags(use_vis=True, use_tac=False, use_pen=False, passthrough=True)
    if mode == "vis+pen":
        return ModeFlags(use_vis=True, use_tac=False, use_pen=True)
    if mode == "vis+tac+pen":
        return ModeFlags(use_vis=True, use_tac=True, use_pen=True)
    raise ValueError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class Measurements:
    timestamp: float
    contacts: np.ndarray          # K booleans
    joints: np.ndarray            # hand DoF angles
    visual_pose: Pose | None = None
    hand_base: Pose = field(default_factory=Pose)

    def __post_init__(self):
        object.__setattr__(self, "contacts", np.asarray(self.contacts, dtype=bool))
        object.__setattr__(self, "joints", np.asarray(self.joints, dtype=float))


@dataclass(frozen=True)
class EstimatorConfig:
    mode: str = "vis+tac+pen"
    weights: FactorWeights = field(default_factory=FactorWeights)
    log_theta_vis: float = -6.5   # natural log, per-run hyperparameter
    log_theta_tac: float = 0.0
    solver: SolverConfig = field(default_factory=SolverConfig)

    @property
    def theta_vis(self) -> float:
        return math.exp(self.log_theta_vis)

    @property
    def theta_tac(self) -> float:
        return math.exp(self.log_theta_tac)

    def to_json(self) -> dict:
        return {"mode": self.mode,
                "weights": {"w_vis": self.weights.w_vis,
                            "w_tac": self.weights.w_tac,
                            "w_pen": self.weights.w_pen},
                "log_theta_vis": self.log_theta_vis,
                "log_theta_tac": self.log_theta_tac,
                "solver": self.solver.to_json()}

    @staticmethod
    def from_json(obj: dict) -> "EstimatorConfig":
        w = obj.get("weights", {})
        return EstimatorConfig(
            mode=obj.get("mode", "vis+tac+pen"),
            weights=FactorWeights(w_vis=w.get("w_vis", 1.0),
                                  w_tac=w.get("w_tac", 1.0),
                                  w_pen=w.get("w_pen", 1.0)),
            log_theta_vis=obj.get("log_theta_vis", -6.5),
            log_theta_tac=obj.get("log_theta_tac", 0.0),
            solver=SolverConfig.from_json(obj.get("solver", {})))


class Tracker:
    """Single-object tracker; one instance per measurement sequence."""

    def __init__(self, hand: HandModel, model: ObjectModel,
                 cfg: EstimatorConfig | None = None):
        self.hand = hand
        self.model = model
        self.cfg = cfg or EstimatorConfig()
        self.flags = configure_ablation(self.cfg.mode)
        self.estimate: Pose | None = None

    @property
    def initialized(self) -> bool:
        return self.estimate is not None

    def step(self, m: Measurements):
        """Consume one measurement set; returns (estimate, SolveReport | None)."""
        if not self.initialized:
            if m.visual_pose is None:
                raise NotInitialized("first frame must carry a visual pose")
            self.estimate = m.visual_pose
            if self.flags.passthrough:
                return self.estimate, None
        if self.flags.passthrough:
            if m.visual_pose is not None:
                self.estimate = m.visual_pose
            return self.estimate, None

        blocks, reassociate = self.build_problem(m)
        if not blocks:
            return self.estimate, None
        report = solve(blocks, self.estimate, self.cfg.solver, reassociate=reassociate)
        self.estimate = report.final_pose
        return self.estimate, report

    def build_problem(self, m: Measurements):
        """Residual blocks for this frame plus the re-association callback."""
        cfg = self.cfg
        blocks = []
        if cfg.mode != "vis" and m.visual_pose is not None:
            blocks.append(ResidualBlock(kind="vis", weight=cfg.weights.w_vis,
                                        kernel=Welsch(cfg.theta_vis),
                                        zeta=m.visual_pose))
        tac_blocks, pen_blocks = [], []
        field_ = self.model.sdf
        if self.flags.use_tac:
            for k in range(self.hand.num_pads):
                tac_blocks.append(ResidualBlock(
                    kind="tac", weight=cfg.weights.w_tac,
                    kernel=Welsch(cfg.theta_tac),
                    contact=bool(m.contacts[k]), sdf=field_))
        if self.flags.use_pen:
            for k in range(self.hand.num_pads):
                pen_blocks.append(ResidualBlock(
                    kind="pen", weight=cfg.weights.w_pen,
                    kernel=Quadratic(), sdf=field_))
        blocks.extend(tac_blocks)
        blocks.extend(pen_blocks)

        reassociate = None
        if tac_blocks or pen_blocks:
            reassociate = self._make_reassociate(m, tac_blocks, pen_blocks)
        return blocks, reassociate

    # Pads whose closest grid point is farther than this stay associated to
    # their step-start point between iterations; their residuals are clamped
    # inactive either way, so the problem is unchanged.
    REASSOCIATE_MARGIN = 0.02

    def _make_reassociate(self, m: Measurements, tac_blocks, pen_blocks):
        field_ = self.model.sdf
        K = self.hand.num_pads
        world_all, offsets = pad_world_points(self.hand, m.joints, m.hand_base)
        state = {"ref": None, "near": None}

        def assign(k, idx):
            point = world_all[idx]
            if tac_blocks:
                tac_blocks[k].point = point
            if pen_blocks:
                pen_blocks[k].point = point

        def full(xi: Pose):
            local = transform_points(inverse(xi), world_all)
            values = eval_sdf(field_, local)
            minima = np.empty(K)
            for k in range(K):
                seg = values[offsets[k]:offsets[k + 1]]
                j = int(np.argmin(seg))
                minima[k] = seg[j]
                assign(k, offsets[k] + j)
            state["ref"] = xi
            state["near"] = np.nonzero(minima < self.REASSOCIATE_MARGIN)[0]

        def reassociate(xi: Pose):
            ref = state["ref"]
            if ref is not None:
                d = _pose_gap(ref, xi)
                if d < 0.45 * self.REASSOCIATE_MARGIN:
                    near = state["near"]
                    if near.size:
                        idx = np.concatenate([np.arange(offsets[k], offsets[k + 1])
                                              for k in near])
                        local = transform_points(inverse(xi), world_all[idx])
                        values = eval_sdf(field_, local)
                        splits = np.cumsum([offsets[k + 1] - offsets[k]
                                            for k in near])[:-1]
                        for k, seg, seg_idx in zip(near, np.split(values, splits),
                                                   np.split(idx, splits)):
                            assign(k, seg_idx[int(np.argmin(seg))])
                    return
            full(xi)

        return reassociate
