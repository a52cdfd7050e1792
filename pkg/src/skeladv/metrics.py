"""Perturbation metrics comparing an adversarial sequence with its original."""

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .skeleton import (SkeletonSequence, SkeletonTopology, _angle_bound_raw, _bone_lengths_raw,
                       _check_same_shape, _check_topology_fit, kinetic_energy)

KINETIC_FLOOR = 1e-12


@dataclass(frozen=True)
class AttackMetrics:
    """Mean relative bone-length change, mean J', relative kinetic-energy
    change and the l2 norm of the perturbation."""

    delta_bone_rel: float
    delta_joint: float
    delta_kinetic_rel: float
    l2: float
    success: Optional[bool] = None

    def to_dict(self):
        return asdict(self)


def attack_metrics(orig: SkeletonSequence, adv: SkeletonSequence, topo: SkeletonTopology,
                   success: Optional[bool] = None) -> AttackMetrics:
    """Metrics of ``adv`` against ``orig``; means skip padding frames.

    ``l2`` is taken over perturbable coordinates only. The kinetic-energy
    denominator is floored at ``1e-12`` so static originals stay finite.
    """
    _check_topology_fit(orig, topo)
    _check_same_shape(orig, adv)
    mask = orig.frame_mask
    b0 = _bone_lengths_raw(orig.coords, topo)[mask]
    b1 = _bone_lengths_raw(adv.coords, topo)[mask]
    bone = float(np.mean(np.abs(b1 - b0) / b0)) if b0.size else 0.0
    if topo.num_triples and mask.any():
        jp = _angle_bound_raw(orig.coords[mask], adv.coords[mask], topo, b0.reshape(-1, topo.num_bones))
        joint = float(np.mean(jp))
    else:
        joint = 0.0
    k0 = kinetic_energy(orig) if orig.num_frames >= 2 else 0.0
    k1 = kinetic_energy(orig.with_coords(adv.coords)) if orig.num_frames >= 2 else 0.0
    kin = abs(k1 - k0) / max(k0, KINETIC_FLOOR)
    d = (adv.coords - orig.coords)[orig.perturbable]
    l2 = float(np.sqrt(np.sum(d * d)))
    return AttackMetrics(bone, joint, float(kin), l2, None if success is None else bool(success))
