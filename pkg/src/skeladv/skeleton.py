"""Skeleton topology, sequences and the geometric quantities built on them.

Joint indices are 0-based throughout the Python API; ``ROOT`` (-1) marks a
joint without a preceding joint. Use :meth:`SkeletonTopology.from_parents`
with ``one_based=True`` to load dataset-style 1-based parent lists where 0
marks the root.
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .exceptions import (
    ContractError,
    DegenerateSequenceError,
    GeometryError,
    TopologyError,
)

ROOT = -1

# Preceding joint of joints 2..25 of the 25-joint Kinect v2 layout (1-based).
NTU25_PARENTS = (1, 21, 3, 21, 5, 6, 7, 21, 9, 10, 11, 1,
                 13, 14, 15, 1, 17, 18, 19, 2, 8, 8, 12, 12)


@dataclass(frozen=True, eq=False)
class SkeletonTopology:
    """Bone graph given by a parent array.

    Parameters
    ----------
    parent : array of int, shape (num_joints,)
        ``parent[j]`` is the 0-based preceding joint of ``j`` or ``ROOT``.
    name : str
        Free-form identifier, serialized with datasets.
    """

    parent: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        parent = np.asarray(self.parent)
        if parent.ndim != 1 or parent.size == 0:
            raise TopologyError("parent must be a non-empty 1-D array")
        if not np.issubdtype(parent.dtype, np.integer):
            if not np.all(np.equal(np.mod(parent, 1), 0)):
                raise TopologyError("parent indices must be integers")
        parent = parent.astype(np.int64)
        n = parent.size
        bad = (parent != ROOT) & ((parent < 0) | (parent >= n))
        if bad.any():
            j = int(np.flatnonzero(bad)[0])
            raise TopologyError(f"joint {j} has out-of-range parent {parent[j]}")
        if np.any(parent == np.arange(n)):
            raise TopologyError("a joint cannot be its own parent")
        # Every chain must reach a root within n steps.
        for j in range(n):
            k, steps = j, 0
            while parent[k] != ROOT:
                k = parent[k]
                steps += 1
                if steps > n:
                    raise TopologyError(f"cycle in parent array through joint {j}")
        parent.setflags(write=False)
        object.__setattr__(self, "parent", parent)

    @classmethod
    def from_parents(cls, parents: Sequence[int], one_based: bool = False,
                     name: str = "custom") -> "SkeletonTopology":
        """Build from a full-length parent list.

        With ``one_based=True`` indices start at 1 and 0 is the root sentinel.
        """
        arr = np.asarray(parents, dtype=np.int64)
        if one_based:
            arr = np.where(arr == 0, ROOT, arr - 1)
        return cls(arr, name=name)

    @property
    def num_joints(self) -> int:
        return int(self.parent.size)

    @cached_property
    def bone_child(self) -> np.ndarray:
        """Joint at the far end of each bone; bone ``i`` ends at ``bone_child[i]``."""
        return np.flatnonzero(self.parent != ROOT)

    @cached_property
    def bone_parent(self) -> np.ndarray:
        return self.parent[self.bone_child]

    @property
    def num_bones(self) -> int:
        return int(self.bone_child.size)

    @cached_property
    def bone_of_joint(self) -> np.ndarray:
        """Index of the bone ending at each joint, -1 for roots."""
        out = np.full(self.num_joints, -1, dtype=np.int64)
        out[self.bone_child] = np.arange(self.num_bones)
        return out

    @cached_property
    def angle_triples(self) -> np.ndarray:
        return np.array(derive_angle_triples(self), dtype=np.int64).reshape(-1, 3)

    @property
    def num_triples(self) -> int:
        return int(self.angle_triples.shape[0])

    @cached_property
    def bone_incidence(self) -> np.ndarray:
        """(num_bones, num_joints) matrix, +1 at the child and -1 at the parent."""
        inc = np.zeros((self.num_bones, self.num_joints))
        rows = np.arange(self.num_bones)
        inc[rows, self.bone_child] = 1.0
        inc[rows, self.bone_parent] = -1.0
        return inc

    @cached_property
    def topological_order(self) -> np.ndarray:
        """Joints ordered so that every parent precedes its children."""
        depth = np.zeros(self.num_joints, dtype=np.int64)
        for j in range(self.num_joints):
            k = j
            while self.parent[k] != ROOT:
                k = self.parent[k]
                depth[j] += 1
        return np.argsort(depth, kind="stable")

    def __eq__(self, other):
        if not isinstance(other, SkeletonTopology):
            return NotImplemented
        return self.name == other.name and np.array_equal(self.parent, other.parent)

    def __hash__(self):
        return hash((self.name, self.parent.tobytes()))


def ntu25() -> SkeletonTopology:
    """25-joint topology of the NTU RGB+D skeletons."""
    return SkeletonTopology.from_parents((0,) + NTU25_PARENTS, one_based=True,
                                         name="ntu25")


def chain(num_joints: int = 5) -> SkeletonTopology:
    """A single kinematic chain 0 -> 1 -> ... -> num_joints-1."""
    return SkeletonTopology(np.arange(-1, num_joints - 1), name=f"chain{num_joints}")


def topology_by_name(name: str) -> SkeletonTopology:
    if name == "ntu25":
        return ntu25()
    if name.startswith("chain") and name[5:].isdigit() and int(name[5:]) >= 1:
        return chain(int(name[5:]))
    raise ContractError(f"unknown topology {name!r}")


def derive_angle_triples(topo: SkeletonTopology) -> List[Tuple[int, int, int]]:
    """All (grandparent, parent, child) triples, ordered by child index."""
    parent = topo.parent
    triples = []
    for c in range(topo.num_joints):
        b = parent[c]
        if b == ROOT:
            continue
        a = parent[b]
        if a == ROOT:
            continue
        triples.append((int(a), int(b), int(c)))
    return triples


@dataclass(eq=False)
class SkeletonSequence:
    """A ``T x I x 3`` joint trajectory with its frame mask and label.

    Frames with ``frame_mask`` false are zero padding and are excluded from
    every geometric quantity. ``actor_mask`` selects the joints an attack may
    move (all joints when ``None``).
    """

    coords: np.ndarray
    frame_mask: Optional[np.ndarray] = None
    label: int = 0
    actor_mask: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 3 or coords.shape[2] != 3:
            raise ContractError(f"coords must have shape (T, I, 3), got {coords.shape}")
        if coords.shape[0] < 1 or coords.shape[1] < 1:
            raise ContractError("coords must have at least one frame and one joint")
        self.coords = coords
        T, I, _ = coords.shape
        if self.frame_mask is None:
            self.frame_mask = np.ones(T, dtype=bool)
        else:
            self.frame_mask = np.asarray(self.frame_mask, dtype=bool)
            if self.frame_mask.shape != (T,):
                raise ContractError(f"frame_mask must have shape ({T},)")
        if self.actor_mask is not None:
            self.actor_mask = np.asarray(self.actor_mask, dtype=bool)
            if self.actor_mask.shape != (I,):
                raise ContractError(f"actor_mask must have shape ({I},)")
        self.label = int(self.label)

    @property
    def num_frames(self) -> int:
        return int(self.coords.shape[0])

    @property
    def num_joints(self) -> int:
        return int(self.coords.shape[1])

    @property
    def perturbable(self) -> np.ndarray:
        """(T, I) boolean array of coordinates an attack may change."""
        joints = (np.ones(self.num_joints, dtype=bool) if self.actor_mask is None
                  else self.actor_mask)
        return self.frame_mask[:, None] & joints[None, :]

    @property
    def pair_mask(self) -> np.ndarray:
        """Consecutive frame pairs where both frames are real."""
        return self.frame_mask[:-1] & self.frame_mask[1:]

    def with_coords(self, coords) -> "SkeletonSequence":
        """Copy carrying new coordinates and the same masks and label."""
        return SkeletonSequence(np.array(coords, dtype=np.float64), self.frame_mask.copy(),
                                self.label,
                                None if self.actor_mask is None else self.actor_mask.copy(),
                                dict(self.metadata))

    def copy(self) -> "SkeletonSequence":
        return self.with_coords(self.coords)

    def __eq__(self, other):
        if not isinstance(other, SkeletonSequence):
            return NotImplemented
        am = self.actor_mask, other.actor_mask
        if (am[0] is None) != (am[1] is None):
            return False
        return (self.label == other.label
                and np.array_equal(self.coords, other.coords)
                and np.array_equal(self.frame_mask, other.frame_mask)
                and (am[0] is None or np.array_equal(*am))
                and self.metadata == other.metadata)


def _bone_lengths_raw(coords, topo):
    diff = coords[..., topo.bone_child, :] - coords[..., topo.bone_parent, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _speeds_raw(coords):
    diff = coords[..., 1:, :, :] - coords[..., :-1, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _check_topology_fit(seq, topo):
    if seq.num_joints != topo.num_joints:
        raise ContractError(
            f"sequence has {seq.num_joints} joints, topology has {topo.num_joints}")


def _check_same_shape(orig, adv):
    if orig.coords.shape != adv.coords.shape:
        raise ContractError(
            f"shape mismatch: {orig.coords.shape} vs {adv.coords.shape}")


def bone_lengths(seq: SkeletonSequence, topo: SkeletonTopology) -> np.ndarray:
    """Per-frame bone lengths, shape ``(T, num_bones)``; padding rows are NaN."""
    _check_topology_fit(seq, topo)
    out = _bone_lengths_raw(seq.coords, topo)
    out[~seq.frame_mask] = np.nan
    return out


def speeds(seq: SkeletonSequence) -> np.ndarray:
    """Inter-frame joint displacement magnitudes, shape ``(T-1, I)``.

    Pairs touching a padding frame are NaN.
    """
    if seq.num_frames < 2:
        raise DegenerateSequenceError("speeds need at least two frames")
    out = _speeds_raw(seq.coords)
    out[~seq.pair_mask] = np.nan
    return out


def _angle_bound_raw(orig_coords, adv_coords, topo, orig_bones=None):
    """J' for every frame and triple, without masking."""
    if orig_bones is None:
        orig_bones = _bone_lengths_raw(orig_coords, topo)
    tri = topo.angle_triples
    d = adv_coords - orig_coords
    disp = np.sqrt(np.sum(d * d, axis=-1))
    b_ab = orig_bones[..., topo.bone_of_joint[tri[:, 1]]]
    b_bc = orig_bones[..., topo.bone_of_joint[tri[:, 2]]]
    da, db, dc = disp[..., tri[:, 0]], disp[..., tri[:, 1]], disp[..., tri[:, 2]]
    return (da + db) / b_ab + (db + dc) / b_bc


def joint_angle_change_bound(orig: SkeletonSequence, adv: SkeletonSequence,
                             topo: SkeletonTopology) -> np.ndarray:
    """Upper bound on the angle change of every bone pair, shape ``(T, num_triples)``.

    For a triple ``(a, b, c)`` the bound is
    ``(|da| + |db|) / B_ab + (|db| + |dc|) / B_bc`` with ``dj`` the
    displacement of joint ``j`` and ``B`` the original bone lengths of the
    same frame. Valid in the small-angle regime; padding rows are NaN.
    """
    _check_topology_fit(orig, topo)
    _check_same_shape(orig, adv)
    bones = _bone_lengths_raw(orig.coords, topo)
    if np.any(bones[orig.frame_mask] <= 0):
        raise GeometryError("zero original bone length on a valid frame")
    if topo.num_triples == 0:
        return np.zeros((orig.num_frames, 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _angle_bound_raw(orig.coords, adv.coords, topo, bones)
    out[~orig.frame_mask] = np.nan
    return out


def kinetic_energy(seq: SkeletonSequence) -> float:
    """Sum of squared speeds over valid frame pairs and joints.

    Unit mass per joint and unit frame time, so this is twice the physical
    kinetic energy summed over the sequence.
    """
    if seq.num_frames < 2:
        raise DegenerateSequenceError("kinetic energy needs at least two frames")
    diff = seq.coords[1:] - seq.coords[:-1]
    sq = np.sum(diff * diff, axis=-1)
    return float(np.sum(sq[seq.pair_mask]))


class Finding(NamedTuple):
    kind: str
    message: str


def validate(seq: SkeletonSequence, topo: SkeletonTopology) -> List[Finding]:
    """List every violated sequence invariant. Never raises on bad content."""
    findings = []
    if seq.num_joints != topo.num_joints:
        findings.append(Finding(
            "shape mismatch",
            f"sequence has {seq.num_joints} joints, topology has {topo.num_joints}"))
        return findings
    finite = np.isfinite(seq.coords)
    if not finite.all():
        frames = np.flatnonzero(~finite.all(axis=(1, 2)))
        findings.append(Finding("non-finite", f"NaN/Inf coordinates in frames {frames.tolist()}"))
    pad = ~seq.frame_mask
    if np.any(seq.coords[pad] != 0):
        frames = np.flatnonzero(pad & np.any(seq.coords != 0, axis=(1, 2)))
        findings.append(Finding("padding not zero",
                                f"masked frames with nonzero coordinates: {frames.tolist()}"))
    if not seq.frame_mask.any():
        findings.append(Finding("mask inconsistency", "no valid frames"))
    with np.errstate(invalid="ignore"):
        bones = _bone_lengths_raw(seq.coords, topo)
    zero = (bones <= 0) & seq.frame_mask[:, None]
    if zero.any():
        t, b = np.argwhere(zero)[0]
        findings.append(Finding(
            "zero bone length",
            f"{int(zero.sum())} zero-length bones on valid frames, first at frame {t} "
            f"joint {int(topo.bone_child[b])}"))
    if not (0 <= seq.label):
        findings.append(Finding("label", f"negative label {seq.label}"))
    return findings


def check_sequence(seq: SkeletonSequence, topo: SkeletonTopology):
    """Raise :class:`ContractError` or :class:`GeometryError` on the first finding."""
    findings = validate(seq, topo)
    for f in findings:
        if f.kind == "zero bone length":
            raise GeometryError(f.message)
        raise ContractError(f"{f.kind}: {f.message}")
