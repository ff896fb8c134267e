"""Robust Levenberg-Marquardt on SE(3).

Minimizes 0.5 * sum_j rho_j(w_j ||r_j(xi)||^2) over the object pose by
iteratively reweighted Gauss-Newton steps with fixed additive damping:
(J^T W J + lambda I) delta = -J^T W r, xi <- xi * exp(delta), where
W applies rho'(w_j ||r_j||^2) * w_j per block.

Tactile/penetration blocks that share an SDF are evaluated in one batch
internally; the per-factor robust weighting is unchanged by the grouping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .factors import Quadratic, ResidualBlock, Welsch
from .liegroup import Pose, inverse, retract, transform_points
from .sdf import eval_sdf, grad_sdf


class DegenerateNormalEquations(RuntimeError):
    """The damped normal equations are numerically singular."""


@dataclass
class SolverConfig:
    max_iterations: int = 5
    damping: float = 0.02
    step_tolerance: float = 1e-8

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")

    def to_json(self) -> dict:
        return {"max_iterations": self.max_iterations, "damping": self.damping,
                "step_tolerance": self.step_tolerance}

    @staticmethod
    def from_json(obj: dict) -> "SolverConfig":
        return SolverConfig(max_iterations=obj.get("max_iterations", 5),
                            damping=obj.get("damping", 0.02),
                            step_tolerance=obj.get("step_tolerance", 1e-8))


@dataclass
class SolveReport:
    final_pose: Pose
    costs: list = field(default_factory=list)  # at init, then after each iteration
    iterations: int = 0
    reason: str = "max-iter"  # "max-iter" | "converged" | "degenerate"
    non_descent: bool = False

    def to_json(self) -> dict:
        return {"final_pose": self.final_pose.to_json(),
                "costs": [float(c) for c in self.costs],
                "iterations": self.iterations,
                "reason": self.reason,
                "non_descent": self.non_descent}


def robust_cost(blocks, xi: Pose) -> float:
    total = 0.0
    for b in blocks:
        r = b.residual(xi)
        e = b.weight * float(r @ r)
        total += b.kernel.evaluate(e)[0]
    return 0.5 * total


def robust_weights(blocks, xi: Pose) -> np.ndarray:
    """Per-block IRLS weight rho'(w_j ||r_j||^2) * w_j."""
    out = np.empty(len(blocks))
    for j, b in enumerate(blocks):
        r = b.residual(xi)
        e = b.weight * float(r @ r)
        out[j] = b.kernel.evaluate(e)[1] * b.weight
    return out


class _Single:
    """Fallback wrapper evaluating one block at a time."""

    def __init__(self, block):
        self.block = block

    def linearize(self, xi):
        b = self.block
        r = b.residual(xi)
        J = b.jacobian(xi)
        e = b.weight * float(r @ r)
        value, deriv = b.kernel.evaluate(e)
        w = deriv * b.weight
        return value, w * (J.T @ J), w * (J.T @ r)

    def cost(self, xi):
        b = self.block
        r = b.residual(xi)
        return b.kernel.evaluate(b.weight * float(r @ r))[0]


class _PadGroup:
    """Batched tac and/or pen blocks over one SDF; math identical to _Single.

    Blocks are stacked into one SDF evaluation per call; tac and pen blocks
    that share a contact point also share its gradient.
    """

    def __init__(self, blocks):
        self.blocks = blocks
        self.sdf = blocks[0].sdf
        self.is_tac = np.array([b.kind == "tac" for b in blocks])
        self.weights = np.array([b.weight for b in blocks])
        self.quadratic = np.array([isinstance(b.kernel, Quadratic) for b in blocks])
        self.thetas = np.array([b.kernel.theta if isinstance(b.kernel, Welsch)
                                else 1.0 for b in blocks])
        self.contacts = np.array([getattr(b, "contact", False) for b in blocks])

    def _phi(self, xi):
        pts = np.stack([b.point for b in self.blocks])
        local = transform_points(inverse(xi), pts)
        return local, eval_sdf(self.sdf, local)

    def _residual_active(self, phi):
        r = np.where(self.is_tac,
                     np.where(self.contacts, np.maximum(phi, 0.0), 0.0),
                     np.minimum(phi, 0.0))
        active = np.where(self.is_tac, self.contacts & (phi > 0.0), phi < 0.0)
        return r, active

    def _kernel(self, e):
        # thetas hold a dummy 1.0 for quadratic entries; where() discards them
        s = np.exp(-e / self.thetas)
        values = np.where(self.quadratic, e, self.thetas * (1.0 - s))
        derivs = np.where(self.quadratic, 1.0, s)
        return values, derivs

    def linearize(self, xi):
        local, phi = self._phi(xi)
        r, active = self._residual_active(phi)
        J = np.zeros((len(self.blocks), 6))
        if np.any(active):
            g = grad_sdf(self.sdf, local[active])
            J[active, :3] = np.cross(g, local[active])
            J[active, 3:] = -g
        e = self.weights * r * r
        values, derivs = self._kernel(e)
        w = derivs * self.weights
        H = J.T @ (J * w[:, None])
        gvec = J.T @ (w * r)
        return float(values.sum()), H, gvec

    def cost(self, xi):
        _, phi = self._phi(xi)
        r, _ = self._residual_active(phi)
        values, _ = self._kernel(self.weights * r * r)
        return float(values.sum())


def _prepare(blocks):
    """Group batchable tac/pen blocks; preserve per-factor semantics."""
    groups = []
    buckets = {}
    for b in blocks:
        if isinstance(b, ResidualBlock) and b.kind in ("tac", "pen") \
                and isinstance(b.kernel, (Welsch, Quadratic)):
            buckets.setdefault(id(b.sdf), []).append(b)
        else:
            groups.append(_Single(b))
    for bucket in buckets.values():
        if len(bucket) > 1:
            groups.append(_PadGroup(bucket))
        else:
            groups.append(_Single(bucket[0]))
    return groups


def _solve_damped(H: np.ndarray, g: np.ndarray, damping: float) -> np.ndarray:
    A = H + damping * np.eye(6)
    try:
        c, low = scipy.linalg.cho_factor(A)
        return scipy.linalg.cho_solve((c, low), -g)
    except scipy.linalg.LinAlgError:
        pass
    lu, d, perm = scipy.linalg.ldl(A)
    diag = np.diag(d)
    if np.any(np.abs(diag) <= 1e-14 * max(1.0, np.abs(diag).max())):
        raise DegenerateNormalEquations(
            "normal equations singular (zero damping with rank-deficient Jacobian)")
    L = lu[perm, :]
    y = scipy.linalg.solve_triangular(L, -g[perm], lower=True, unit_diagonal=True)
    z = np.linalg.solve(d, y)
    x = scipy.linalg.solve_triangular(L.T, z, lower=False, unit_diagonal=True)
    out = np.empty(6)
    out[perm] = x
    return out


def solve(blocks, init: Pose, cfg: SolverConfig | None = None,
          reassociate=None) -> SolveReport:
    """Run robust LM from init; re-association runs at each iteration start.

    reassociate(xi), when given, may mutate the cached contact points of
    tac/pen blocks before residuals are evaluated.
    """
    if len(blocks) == 0:
        raise ValueError("need at least one residual block")
    cfg = cfg or SolverConfig()
    groups = _prepare(blocks)
    xi = init
    costs = []
    iterations = 0
    reason = "max-iter"
    step_norm = np.inf
    for _ in range(cfg.max_iterations):
        # a sub-micron pose change cannot move any contact association
        if reassociate is not None and step_norm > 1e-6:
            reassociate(xi)
        H = np.zeros((6, 6))
        g = np.zeros(6)
        cost = 0.0
        for grp in groups:
            value, Hg, gg = grp.linearize(xi)
            cost += value
            H += Hg
            g += gg
        costs.append(0.5 * cost)
        try:
            delta = _solve_damped(H, g, cfg.damping)
        except DegenerateNormalEquations:
            reason = "degenerate"
            break
        xi = retract(xi, delta)
        iterations += 1
        step_norm = float(np.linalg.norm(delta))
        if step_norm < cfg.step_tolerance:
            reason = "converged"
            break
    if reason == "converged" and costs:
        # final pose sits within step_tolerance of the last evaluated one
        costs.append(costs[-1])
    else:
        if reassociate is not None:
            reassociate(xi)
        costs.append(0.5 * sum(grp.cost(xi) for grp in groups))
    non_descent = costs[-1] > costs[0] + 1e-15
    return SolveReport(final_pose=xi, costs=costs, iterations=iterations,
                       reason=reason, non_descent=non_descent)
