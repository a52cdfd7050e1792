import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skeladv.constraints import (ConstraintConfig, ConstraintGeometry, DualState,
                                 bone_violations, compute_violations, constraint_grad,
                                 constraint_value, joint_violations, speed_violations)
from skeladv.exceptions import ConfigError, ContractError
from skeladv.model import central_difference
from skeladv.skeleton import SkeletonSequence, chain

from conftest import random_pose_sequence, rel_error


def stretch_bone(coords, topo, t, joint, factor):
    """Scale the bone ending at ``joint`` and carry its subtree along."""
    out = coords.copy()
    p = topo.parent[joint]
    shift = (factor - 1.0) * (coords[t, joint] - coords[t, p])
    sub = {joint}
    for j in topo.topological_order:
        if topo.parent[j] in sub:
            sub.add(int(j))
    for j in sub:
        out[t, j] += shift
    return out


class TestExamples:
    def test_identity_zero(self, chain_seq, chain5):
        v = compute_violations(chain_seq, chain_seq, chain5, ConstraintConfig())
        for fam in (v.bone, v.joint, v.speed):
            assert fam.size and np.all(fam == 0)

    @pytest.mark.parametrize("factor,expected", [(1.05, 0.02), (1.02, 0.0)])
    def test_bone_stretch(self, chain_seq, chain5, factor, expected):
        adv = chain_seq.with_coords(stretch_bone(chain_seq.coords, chain5, 1, 3, factor))
        r = bone_violations(chain_seq, adv, chain5, ConstraintConfig(eps_bone=0.03))
        r = r.reshape(chain_seq.num_frames, chain5.num_bones)
        b = chain5.bone_of_joint[3]
        assert r[1, b] == pytest.approx(expected, abs=1e-12)
        others = np.ones_like(r, dtype=bool)
        others[1, b] = False
        assert np.all(r[others] <= 1e-12)

    def test_joint_displacement(self, chain_seq, chain5):
        c = chain_seq.coords
        t = 2
        b_ab = np.linalg.norm(c[t, 0] - c[t, 1])
        adv = c.copy()
        adv[t, 0] += 0.15 * b_ab * np.array([0.0, 0.6, 0.8])
        r = joint_violations(chain_seq, chain_seq.with_coords(adv), chain5,
                             ConstraintConfig(eps_joint=0.1))
        r = r.reshape(chain_seq.num_frames, chain5.num_triples)
        assert r[t, 0] == pytest.approx(0.05, abs=1e-12)
        r[t, 0] = 0
        assert np.all(r == 0)

    def test_joint_below_tolerance(self, chain_seq, chain5, rng):
        c = chain_seq.coords
        bones = np.linalg.norm(c[:, 1:] - c[:, :-1], axis=-1).min()
        d = rng.normal(size=c.shape)
        d *= 0.02 * bones / np.linalg.norm(d, axis=-1, keepdims=True)
        r = joint_violations(chain_seq, chain_seq.with_coords(c + d), chain5, ConstraintConfig())
        assert np.all(r == 0)

    def test_speed_relative_change(self):
        orig = np.zeros((2, 2, 3))
        orig[:, 1] = [[0, 0, 0], [0.10, 0, 0]]
        adv = orig.copy()
        adv[1, 1] = [0.12, 0, 0]
        r = speed_violations(SkeletonSequence(orig), SkeletonSequence(adv),
                             ConstraintConfig(eps_speed=0.1))
        assert r[1] == pytest.approx(0.10, abs=1e-12)
        assert r[0] == 0

    def test_speed_floor(self):
        orig = np.zeros((3, 1, 3))
        adv = orig.copy()
        adv[1, 0, 0] = 1e-4
        adv[2, 0, 0] = 2e-4
        r = speed_violations(SkeletonSequence(orig), SkeletonSequence(adv),
                             ConstraintConfig(eps_speed=0.1, speed_floor=1e-3))
        assert np.all(r <= 1e-12)

    def test_speed_matches_geometry(self, chain_seq, chain5, rng):
        adv = chain_seq.with_coords(chain_seq.coords + 0.01 * rng.normal(size=chain_seq.coords.shape))
        cfg = ConstraintConfig()
        a = speed_violations(chain_seq, adv, cfg)
        b = compute_violations(chain_seq, adv, chain5, cfg).speed
        assert np.allclose(a, b, rtol=0, atol=1e-15)

    def test_zero_gradient_at_original(self, chain_seq, chain5, rng):
        geom = ConstraintGeometry(chain_seq, chain5, ConstraintConfig())
        dual = geom.zero_dual(beta=1.0)
        for arr in dual.arrays():
            arr[:] = rng.uniform(0, 3, size=arr.shape)
        g = constraint_grad(chain_seq, chain_seq, chain5, ConstraintConfig(), dual)
        assert np.all(g == 0)

    def test_single_active_bone_fd(self, chain_seq, chain5):
        cfg = ConstraintConfig()
        adv = stretch_bone(chain_seq.coords, chain5, 1, 2, 1.06)
        geom = ConstraintGeometry(chain_seq, chain5, cfg)
        v = geom.violations(adv)
        assert np.count_nonzero(v.bone) == 1
        dual = geom.zero_dual(beta=0.0)
        dual.lam[np.flatnonzero(v.bone)] = 1.0
        _, g, _ = geom.penalty(adv, dual)

        def f(x):
            t, _, _ = geom.penalty(x, dual)
            return t["bone"] + t["joint"] + t["speed"] + t["penalty"]

        # the only weighted hinge sits 0.03 past its kink; unmoved joints carry no weight
        assert v.bone.max() == pytest.approx(0.03, abs=1e-12)
        assert rel_error(g, central_difference(f, adv)) < 1e-6


class TestLayoutAndMasks:
    def test_lengths_fixed_by_original(self, rng, chain5):
        c = random_pose_sequence(rng, chain5, T=5)
        c[4] = 0
        orig = SkeletonSequence(c, np.array([1, 1, 1, 1, 0], bool))
        geom = ConstraintGeometry(orig, chain5, ConstraintConfig())
        v = geom.violations(c + rng.normal(size=c.shape))
        assert v.bone.shape == (4 * chain5.num_bones,)
        assert v.joint.shape == (4 * chain5.num_triples,)
        assert v.speed.shape == (3 * chain5.num_joints,)
        assert v.bone_index[:, 0].max() == 3

    def test_frozen_and_padding_get_no_gradient(self, rng, chain5):
        c = random_pose_sequence(rng, chain5, T=5)
        c[4] = 0
        actor = np.array([1, 1, 0, 1, 1], bool)
        orig = SkeletonSequence(c, np.array([1, 1, 1, 1, 0], bool), actor_mask=actor)
        geom = ConstraintGeometry(orig, chain5, ConstraintConfig())
        adv = c + 0.05 * rng.normal(size=c.shape)
        dual = geom.zero_dual(beta=1.0)
        _, g, viol = geom.penalty(adv, dual)
        assert viol.max_residual > 0
        assert np.all(g[:, 2] == 0)
        assert np.all(g[4] == 0)
        assert np.any(g != 0)

    def test_dual_shape_checked(self, chain_seq, chain5):
        geom = ConstraintGeometry(chain_seq, chain5, ConstraintConfig())
        bad = DualState(np.zeros(1), np.zeros(1), np.zeros(1), 1.0)
        with pytest.raises(ContractError, match="dual.lam"):
            geom.penalty(chain_seq.coords, bad)

    def test_shape_mismatch(self, chain_seq, chain5):
        other = SkeletonSequence(np.zeros((2, 5, 3)))
        with pytest.raises(ContractError):
            compute_violations(chain_seq, other, chain5, ConstraintConfig())

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            ConstraintConfig(eps_bone=-0.1)
        with pytest.raises(ConfigError):
            ConstraintConfig(speed_floor=0.0)


class TestProperties:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
    def test_residuals_nonnegative_and_monotone_in_eps(self, seed, extra):
        rng = np.random.default_rng(seed)
        topo = chain(5)
        c = random_pose_sequence(rng, topo, T=4)
        orig = SkeletonSequence(c)
        adv = orig.with_coords(c + 0.03 * rng.normal(size=c.shape))
        tight = compute_violations(orig, adv, topo, ConstraintConfig())
        loose = compute_violations(orig, adv, topo, ConstraintConfig(
            eps_bone=0.03 + extra, eps_joint=0.2 + extra, eps_speed=0.1 + extra))
        for f in ("bone", "joint", "speed"):
            assert np.all(tight.family(f) >= 0)
            assert np.all(loose.family(f) <= tight.family(f))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_penalty_value_matches_residuals(self, seed):
        rng = np.random.default_rng(seed)
        topo = chain(5)
        c = random_pose_sequence(rng, topo, T=4)
        orig = SkeletonSequence(c)
        adv = orig.with_coords(c + 0.03 * rng.normal(size=c.shape))
        cfg = ConstraintConfig()
        v = compute_violations(orig, adv, topo, cfg)
        dual = DualState(rng.uniform(0, 2, v.bone.size), rng.uniform(0, 2, v.joint.size),
                         rng.uniform(0, 2, v.speed.size), float(rng.uniform(0, 3)))
        expect = (dual.lam @ v.bone + dual.nu @ v.joint + dual.omega @ v.speed
                  + dual.beta / 2 * (v.bone @ v.bone + v.joint @ v.joint + v.speed @ v.speed))
        assert constraint_value(orig, adv, topo, cfg, dual) == pytest.approx(expect, rel=1e-12, abs=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_gradient_matches_fd(self, seed):
        rng = np.random.default_rng(seed)
        topo = chain(5)
        c = random_pose_sequence(rng, topo, T=4)
        orig = SkeletonSequence(c)
        cfg = ConstraintConfig()
        geom = ConstraintGeometry(orig, topo, cfg)
        adv = c + 0.03 * rng.normal(size=c.shape)
        if geom.kink_distance(adv) <= 1e-4:
            return
        dual = geom.zero_dual(beta=1.0)
        for arr in dual.arrays():
            arr[:] = rng.uniform(0, 2, size=arr.shape)
        _, g, _ = geom.penalty(adv, dual)
        fd = central_difference(lambda x: constraint_value(orig, orig.with_coords(x), topo, cfg, dual), adv)
        assert rel_error(g, fd) < 1e-5
