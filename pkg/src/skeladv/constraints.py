"""Hinge-clamped constraint residuals and their gradients.

Three families are measured between an original sequence ``x`` and a
candidate ``x'``:

* bone: ``max(|B' - B| / B - eps_bone, 0)`` per valid frame and bone,
* joint: ``max(J' - eps_joint, 0)`` per valid frame and angle triple,
* speed: ``max(|S' - S| / max(S, speed_floor) - eps_speed, 0)`` per valid
  frame pair and joint.

Residual arrays are flattened in (frame, element) row-major order over the
valid frames only, so their lengths do not depend on ``x'``.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, ContractError, GeometryError
from .skeleton import (
    SkeletonSequence,
    SkeletonTopology,
    _angle_bound_raw,
    _bone_lengths_raw,
    _check_same_shape,
    _check_topology_fit,
)

FAMILIES = ("bone", "joint", "speed")


@dataclass(frozen=True)
class ConstraintConfig:
    eps_bone: float = 0.03
    eps_joint: float = 0.2
    eps_speed: float = 0.1
    speed_floor: float = 1e-3

    def __post_init__(self):
        for name in ("eps_bone", "eps_joint", "eps_speed"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be a nonnegative real, got {v}")
        if not self.speed_floor > 0:
            raise ConfigError(f"speed_floor must be positive, got {self.speed_floor}")


@dataclass
class ViolationVectors:
    """Flattened residuals with (frame, element) index maps for each family."""

    bone: np.ndarray
    joint: np.ndarray
    speed: np.ndarray
    bone_index: np.ndarray
    joint_index: np.ndarray
    speed_index: np.ndarray

    def family(self, name):
        return getattr(self, name)

    def max_residuals(self):
        return {f: float(getattr(self, f).max(initial=0.0)) for f in FAMILIES}

    @property
    def max_residual(self):
        return max(self.max_residuals().values())


@dataclass
class DualState:
    """Lagrange multipliers conforming to a :class:`ViolationVectors` layout."""

    lam: np.ndarray
    nu: np.ndarray
    omega: np.ndarray
    beta: float = 0.0

    @classmethod
    def zeros_like(cls, viol: ViolationVectors, beta: float = 0.0) -> "DualState":
        return cls(np.zeros_like(viol.bone), np.zeros_like(viol.joint),
                   np.zeros_like(viol.speed), float(beta))

    def arrays(self):
        return self.lam, self.nu, self.omega

    def copy(self) -> "DualState":
        return DualState(self.lam.copy(), self.nu.copy(), self.omega.copy(), self.beta)


class ConstraintGeometry:
    """Original-sequence quantities reused across many evaluations of ``x'``.

    An attack evaluates residuals and gradients hundreds of times against the
    same original; this caches its bone lengths, speeds and index maps.
    """

    def __init__(self, orig: SkeletonSequence, topo: SkeletonTopology,
                 cfg: ConstraintConfig):
        _check_topology_fit(orig, topo)
        self.orig = orig
        self.topo = topo
        self.cfg = cfg
        coords = orig.coords
        self.frame_mask = orig.frame_mask
        self.pair_mask = orig.pair_mask
        self.bones = _bone_lengths_raw(coords, topo)
        if np.any(self.bones[self.frame_mask] <= 0):
            raise GeometryError("zero original bone length on a valid frame")
        vel = coords[1:] - coords[:-1]
        self.speeds = np.sqrt(np.sum(vel * vel, axis=-1))
        self.speed_den = np.maximum(self.speeds, cfg.speed_floor)
        tri = topo.angle_triples
        # Original lengths of the two bones of each triple, per frame.
        safe = np.where(self.frame_mask[:, None], self.bones, 1.0)
        self.safe_bones = safe
        self.b_ab = safe[:, topo.bone_of_joint[tri[:, 1]]] if len(tri) else np.ones((len(coords), 0))
        self.b_bc = safe[:, topo.bone_of_joint[tri[:, 2]]] if len(tri) else np.ones((len(coords), 0))
        # Joint-by-triple incidence, weighting a joint's displacement in J'.
        K, I = len(tri), topo.num_joints
        self.tri_a = np.zeros((K, I))
        self.tri_b = np.zeros((K, I))
        self.tri_c = np.zeros((K, I))
        if K:
            rows = np.arange(K)
            self.tri_a[rows, tri[:, 0]] = 1.0
            self.tri_b[rows, tri[:, 1]] = 1.0
            self.tri_c[rows, tri[:, 2]] = 1.0
        self.bone_index = _index_map(self.frame_mask, topo.num_bones)
        self.joint_index = _index_map(self.frame_mask, K)
        self.speed_index = _index_map(self.pair_mask, I)
        self.perturbable = orig.perturbable.astype(np.float64)

    def _check_adv(self, adv_coords):
        if adv_coords.shape != self.orig.coords.shape:
            raise ContractError(
                f"shape mismatch: {self.orig.coords.shape} vs {adv_coords.shape}")

    # Signed, un-clamped hinge arguments on full (frame, element) grids.
    def _bone_terms(self, adv):
        diff = adv[:, self.topo.bone_child] - adv[:, self.topo.bone_parent]
        length = np.sqrt(np.sum(diff * diff, axis=-1))
        ratio = (length - self.bones) / self.safe_bones
        return diff, length, ratio

    def _joint_terms(self, adv):
        d = adv - self.orig.coords
        disp = np.sqrt(np.sum(d * d, axis=-1))
        jp = _angle_bound_raw(self.orig.coords, adv, self.topo, self.safe_bones) \
            if self.topo.num_triples else np.zeros((len(adv), 0))
        return d, disp, jp

    def _speed_terms(self, adv):
        vel = adv[1:] - adv[:-1]
        spd = np.sqrt(np.sum(vel * vel, axis=-1))
        ratio = (spd - self.speeds) / self.speed_den
        return vel, spd, ratio

    def kink_distance(self, adv_coords):
        """Smallest distance of any hinge argument from its kink (for FD tests)."""
        _, _, rb = self._bone_terms(adv_coords)
        _, disp, jp = self._joint_terms(adv_coords)
        _, spd, rs = self._speed_terms(adv_coords)
        c = self.cfg
        parts = [np.abs(np.abs(rb[self.frame_mask]) - c.eps_bone).ravel(),
                 np.abs(jp[self.frame_mask] - c.eps_joint).ravel(),
                 np.abs(np.abs(rs[self.pair_mask]) - c.eps_speed).ravel(),
                 disp[self.orig.perturbable].ravel(),
                 spd[self.pair_mask].ravel()]
        return float(min(p.min(initial=np.inf) for p in parts))

    def violations(self, adv_coords) -> ViolationVectors:
        adv_coords = np.asarray(adv_coords, dtype=np.float64)
        self._check_adv(adv_coords)
        c = self.cfg
        _, _, rb = self._bone_terms(adv_coords)
        _, _, jp = self._joint_terms(adv_coords)
        _, _, rs = self._speed_terms(adv_coords)
        bone = np.maximum(np.abs(rb) - c.eps_bone, 0.0)[self.frame_mask].ravel()
        joint = np.maximum(jp - c.eps_joint, 0.0)[self.frame_mask].ravel()
        speed = np.maximum(np.abs(rs) - c.eps_speed, 0.0)[self.pair_mask].ravel()
        return ViolationVectors(bone, joint, speed, self.bone_index,
                                self.joint_index, self.speed_index)

    def zero_dual(self, beta: float = 0.0) -> DualState:
        return DualState(np.zeros(len(self.bone_index)), np.zeros(len(self.joint_index)),
                         np.zeros(len(self.speed_index)), float(beta))

    def penalty(self, adv_coords, dual: DualState):
        """Value, gradient and violations of the multiplier + quadratic terms.

        Returns
        -------
        terms : dict
            ``bone``, ``joint``, ``speed`` inner products with the
            multipliers and ``penalty`` = beta/2 times the squared norms.
        grad : ndarray, shape (T, I, 3)
        viol : ViolationVectors
        """
        adv = np.asarray(adv_coords, dtype=np.float64)
        self._check_adv(adv)
        c = self.cfg
        T = adv.shape[0]
        _check_dual(dual, self)
        beta = dual.beta
        grad = np.zeros_like(adv)

        # bone family
        diff, length, rb = self._bone_terms(adv)
        hinge_b = np.abs(rb) - c.eps_bone
        r_b = np.maximum(hinge_b, 0.0)
        r_b[~self.frame_mask] = 0.0
        lam = _scatter(dual.lam, self.frame_mask, r_b.shape)
        w = np.where(r_b > 0, lam + beta * r_b, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(w != 0, w * np.sign(rb) / self.safe_bones / length, 0.0)
        g_diff = coef[..., None] * diff
        grad += np.einsum("bi,tbk->tik", self.topo.bone_incidence, g_diff)

        # joint family
        d, disp, jp = self._joint_terms(adv)
        r_j = np.maximum(jp - c.eps_joint, 0.0)
        r_j[~self.frame_mask] = 0.0
        nu = _scatter(dual.nu, self.frame_mask, r_j.shape)
        w = np.where(r_j > 0, nu + beta * r_j, 0.0)
        if w.size:
            wab, wbc = w / self.b_ab, w / self.b_bc
            per_joint = wab @ (self.tri_a + self.tri_b) + wbc @ (self.tri_b + self.tri_c)
            with np.errstate(divide="ignore", invalid="ignore"):
                coef = np.where((per_joint != 0) & (disp > 0), per_joint / disp, 0.0)
            grad += coef[..., None] * d

        # speed family
        if T >= 2:
            vel, spd, rs = self._speed_terms(adv)
            r_s = np.maximum(np.abs(rs) - c.eps_speed, 0.0)
            r_s[~self.pair_mask] = 0.0
            om = _scatter(dual.omega, self.pair_mask, r_s.shape)
            w = np.where(r_s > 0, om + beta * r_s, 0.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                coef = np.where((w != 0) & (spd > 0), w * np.sign(rs) / self.speed_den / spd, 0.0)
            g_vel = coef[..., None] * vel
            grad[1:] += g_vel
            grad[:-1] -= g_vel
            speed = r_s[self.pair_mask].ravel()
        else:
            speed = np.zeros(0)

        bone = r_b[self.frame_mask].ravel()
        joint = r_j[self.frame_mask].ravel()
        viol = ViolationVectors(bone, joint, speed, self.bone_index,
                                self.joint_index, self.speed_index)
        terms = {
            "bone": float(dual.lam @ bone),
            "joint": float(dual.nu @ joint),
            "speed": float(dual.omega @ speed),
            "penalty": 0.5 * beta * float(bone @ bone + joint @ joint + speed @ speed),
        }
        grad *= self.perturbable[..., None]
        return terms, grad, viol


def _index_map(mask, n_elem):
    frames = np.flatnonzero(mask)
    f = np.repeat(frames, n_elem)
    e = np.tile(np.arange(n_elem), frames.size)
    return np.stack([f, e], axis=1) if f.size else np.zeros((0, 2), dtype=np.int64)


def _scatter(flat, mask, shape):
    full = np.zeros(shape)
    full[mask] = np.asarray(flat, dtype=np.float64).reshape(-1, shape[1])
    return full


def _check_dual(dual, geom):
    sizes = (geom.bone_index.shape[0], geom.joint_index.shape[0], geom.speed_index.shape[0])
    for name, arr, n in zip(("lam", "nu", "omega"), dual.arrays(), sizes):
        if np.shape(arr) != (n,):
            raise ContractError(f"dual.{name} has shape {np.shape(arr)}, expected ({n},)")


def bone_violations(orig: SkeletonSequence, adv: SkeletonSequence,
                    topo: SkeletonTopology, cfg: ConstraintConfig) -> np.ndarray:
    _check_same_shape(orig, adv)
    return ConstraintGeometry(orig, topo, cfg).violations(adv.coords).bone


def joint_violations(orig: SkeletonSequence, adv: SkeletonSequence,
                     topo: SkeletonTopology, cfg: ConstraintConfig) -> np.ndarray:
    _check_same_shape(orig, adv)
    return ConstraintGeometry(orig, topo, cfg).violations(adv.coords).joint


def speed_violations(orig: SkeletonSequence, adv: SkeletonSequence,
                     cfg: ConstraintConfig) -> np.ndarray:
    """Speed residuals; needs no topology, bones are not consulted."""
    _check_same_shape(orig, adv)
    c = cfg
    pm = orig.pair_mask
    v0 = orig.coords[1:] - orig.coords[:-1]
    v1 = adv.coords[1:] - adv.coords[:-1]
    s0 = np.sqrt(np.sum(v0 * v0, axis=-1))
    s1 = np.sqrt(np.sum(v1 * v1, axis=-1))
    r = np.abs(s1 - s0) / np.maximum(s0, c.speed_floor) - c.eps_speed
    return np.maximum(r, 0.0)[pm].ravel()


def compute_violations(orig, adv, topo, cfg) -> ViolationVectors:
    _check_same_shape(orig, adv)
    return ConstraintGeometry(orig, topo, cfg).violations(adv.coords)


def constraint_grad(orig: SkeletonSequence, adv: SkeletonSequence,
                    topo: SkeletonTopology, cfg: ConstraintConfig,
                    dual: DualState) -> np.ndarray:
    """Gradient of the multiplier terms plus ``beta/2`` squared residual norms.

    The hinge subgradient is 0 wherever a residual is 0, kink included, and
    frozen joints or padding frames receive zero gradient.
    """
    _check_same_shape(orig, adv)
    _, grad, _ = ConstraintGeometry(orig, topo, cfg).penalty(adv.coords, dual)
    return grad


def constraint_value(orig, adv, topo, cfg, dual) -> float:
    terms, _, _ = ConstraintGeometry(orig, topo, cfg).penalty(adv.coords, dual)
    return terms["bone"] + terms["joint"] + terms["speed"] + terms["penalty"]
