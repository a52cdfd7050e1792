import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skeladv.attack import (ADMMAttack, AdamConfig, AttackConfig, CWAttack, admm_attack,
                            augmented_lagrangian, cw_attack, dual_update, run_attacks)
from skeladv.constraints import ConstraintGeometry, DualState, ViolationVectors
from skeladv.exceptions import ConfigError, ContractError, DivergedError
from skeladv.model import LinearClassifier, central_difference, forward, loss_and_input_grad
from skeladv.skeleton import SkeletonSequence

from conftest import rel_error

CHAIN = AttackConfig(topology="chain5", outer_iters=10, inner_steps=10, adam=AdamConfig(lr=1e-3))


def viol(bone, joint=(), speed=()):
    z = np.zeros((0, 2), dtype=np.int64)
    return ViolationVectors(np.array(bone, float), np.array(joint, float),
                            np.array(speed, float), z, z, z)


class NaNGradient(LinearClassifier):
    def input_gradient_batch(self, coords, frame_mask, cotangent):
        return np.full(coords.shape, np.nan)


def correctly_classified(model, data):
    return [s for s in data if int(np.argmax(forward(model, s))) == s.label]


class TestDualUpdate:
    def test_zero_violations(self):
        d = DualState(np.array([0.3]), np.array([1.0, 2.0]), np.zeros(0), 1.0)
        out = dual_update(d, viol([0.0], [0.0, 0.0]), 2.0)
        assert out.lam.tolist() == [0.3] and out.nu.tolist() == [1.0, 2.0]

    def test_arithmetic(self):
        d = DualState(np.array([0.0]), np.zeros(0), np.zeros(0))
        assert dual_update(d, viol([0.5]), 2.0).lam.tolist() == [1.0]

    def test_repeated_linear(self):
        d = DualState(np.zeros(3), np.zeros(0), np.zeros(0))
        r = viol([0.25, 0.5, 0.125])
        for _ in range(8):
            d = dual_update(d, r, 0.5)
        assert np.array_equal(d.lam, 8 * 0.5 * r.bone)

    def test_shape_mismatch(self):
        d = DualState(np.zeros(2), np.zeros(0), np.zeros(0))
        with pytest.raises(ContractError):
            dual_update(d, viol([0.1]), 1.0)

    def test_beta_positive(self):
        d = DualState(np.zeros(1), np.zeros(0), np.zeros(0))
        with pytest.raises(ConfigError):
            dual_update(d, viol([0.1]), 0.0)


class TestAugmentedLagrangian:
    def test_identity_reduces_to_loss(self, chain_model, chain_dataset):
        orig = chain_dataset.test[0]
        cfg = CHAIN.replace(conf=30.0)
        geom = ConstraintGeometry(orig, cfg.topo, cfg.constraints)
        value, grad = augmented_lagrangian(chain_model, orig, orig, geom.zero_dual(1.0), cfg)
        loss, g = loss_and_input_grad(chain_model, orig, cfg.loss_for(orig))
        assert value == loss
        assert np.array_equal(grad, g)

    def test_zero_dual_zero_beta_is_bare_loss(self, chain_model, chain_dataset, rng):
        orig = chain_dataset.test[1]
        cfg = CHAIN.replace(conf=30.0)
        adv = orig.with_coords(orig.coords + 0.05 * rng.normal(size=orig.coords.shape))
        geom = ConstraintGeometry(orig, cfg.topo, cfg.constraints)
        value, grad = augmented_lagrangian(chain_model, orig, adv, geom.zero_dual(0.0), cfg)
        loss, g = loss_and_input_grad(chain_model, adv, cfg.loss_for(orig))
        assert value == loss
        assert np.array_equal(grad, g)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_gradient_fd(self, chain_model, chain_dataset, seed):
        rng = np.random.default_rng(seed)
        orig = chain_dataset.test[int(rng.integers(len(chain_dataset.test)))]
        cfg = CHAIN.replace(conf=30.0)
        geom = ConstraintGeometry(orig, cfg.topo, cfg.constraints)
        x = orig.coords + 0.01 * rng.normal(size=orig.coords.shape)
        if geom.kink_distance(x) <= 1e-4:
            return
        dual = geom.zero_dual(float(rng.uniform(0.1, 2.0)))
        for a in dual.arrays():
            a[:] = rng.uniform(0, 2, a.shape)
        _, grad = augmented_lagrangian(chain_model, orig, orig.with_coords(x), dual, cfg,
                                       geometry=geom)
        fd = central_difference(
            lambda c: augmented_lagrangian(chain_model, orig, orig.with_coords(c), dual, cfg,
                                           geometry=geom)[0], x)
        assert rel_error(grad, fd) < 1e-5

    def test_shape_mismatch(self, chain_model, chain_dataset):
        orig = chain_dataset.test[0]
        geom = ConstraintGeometry(orig, CHAIN.topo, CHAIN.constraints)
        with pytest.raises(ContractError):
            augmented_lagrangian(chain_model, orig, SkeletonSequence(np.zeros((2, 5, 3))),
                                 geom.zero_dual(), CHAIN)


class TestAdmmAttack:
    def test_constant_model_fails_and_stays_feasible(self, chain_dataset):
        model = LinearClassifier.constant([4.0, 0.0], 6, 5)
        orig = next(s for s in chain_dataset.test if s.label == 0)
        res = admm_attack(model, orig, CHAIN)
        assert not res.success
        assert res.iterations == CHAIN.outer_iters * CHAIN.inner_steps
        assert res.max_residual <= CHAIN.feasibility_tol
        assert res.adversarial == orig

    def test_already_misclassified(self, chain_dataset):
        model = LinearClassifier.constant([0.0, 4.0], 6, 5)
        orig = next(s for s in chain_dataset.test if s.label == 0)
        res = admm_attack(model, orig, CHAIN)
        assert res.success and res.iterations == 0
        assert res.adversarial == orig
        m = res.metrics
        assert m.delta_bone_rel == m.delta_joint == m.delta_kinetic_rel == m.l2 == 0

    def test_attacks_reference_model(self, chain_model, chain_dataset):
        seqs = correctly_classified(chain_model, chain_dataset.test)[:6]
        results = [admm_attack(chain_model, s, AttackConfig(topology="chain5")) for s in seqs]
        assert np.mean([r.success for r in results]) >= 0.5
        for r in results:
            if r.success:
                assert r.max_residual <= CHAIN.feasibility_tol
                assert r.predicted != r.adversarial.label

    def test_deterministic(self, chain_model, chain_dataset):
        orig = correctly_classified(chain_model, chain_dataset.test)[0]
        a = admm_attack(chain_model, orig, CHAIN)
        b = admm_attack(chain_model, orig, CHAIN)
        assert np.array_equal(a.adversarial.coords, b.adversarial.coords)
        assert a.trace.to_dict() == b.trace.to_dict()

    def test_duals_nondecreasing(self, chain_model, chain_dataset):
        orig = correctly_classified(chain_model, chain_dataset.test)[1]
        res = admm_attack(chain_model, orig, CHAIN.replace(record_duals=True))
        duals = res.trace.duals
        assert len(duals) >= 2
        for prev, nxt in zip(duals, duals[1:]):
            for p, n in zip(prev.arrays(), nxt.arrays()):
                assert np.all(n >= p)

    def test_frozen_joints_and_padding_untouched(self, chain_model, chain_dataset):
        base = correctly_classified(chain_model, chain_dataset.test)[0]
        c = base.coords.copy()
        orig = SkeletonSequence(c, base.frame_mask.copy(), base.label,
                                actor_mask=np.array([1, 1, 0, 1, 1], bool))
        res = admm_attack(chain_model, orig, CHAIN)
        assert np.array_equal(res.adversarial.coords[:, 2], c[:, 2])

    def test_targeted(self, small_model, small_dataset):
        seqs = correctly_classified(small_model, small_dataset.test)[:3]
        cfg = AttackConfig(mode="targeted_margin", outer_iters=10, inner_steps=10)
        for s in seqs:
            t = (s.label + 1) % 3
            res = admm_attack(small_model, s, cfg.replace(target_label=t))
            assert res.target_label == t
            assert res.success == (res.predicted == t)

    def test_targeted_needs_label(self, chain_model, chain_dataset):
        with pytest.raises(ContractError):
            admm_attack(chain_model, chain_dataset.test[0], CHAIN.replace(mode="targeted_margin"))

    def test_wrong_shape(self, chain_model):
        with pytest.raises(ContractError):
            admm_attack(chain_model, SkeletonSequence(np.random.default_rng(0).normal(size=(4, 5, 3))),
                        CHAIN)

    def test_diverged(self, chain_dataset):
        model = NaNGradient.constant([2.0, 0.0], 6, 5)
        orig = next(s for s in chain_dataset.test if s.label == 0)
        with pytest.raises(DivergedError) as info:
            admm_attack(model, orig, CHAIN)
        assert len(info.value.trace) == 1

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            AttackConfig(beta=0.0)
        with pytest.raises(ConfigError):
            AttackConfig(topology="octopus")
        with pytest.raises(ConfigError):
            AttackConfig(mode="nope")
        with pytest.raises(ConfigError):
            AdamConfig(decay=1.5)


class TestCW:
    def test_zero_c_is_identity(self, chain_model, chain_dataset):
        orig = correctly_classified(chain_model, chain_dataset.test)[0]
        res = cw_attack(chain_model, orig, CHAIN.replace(cw_c=0.0))
        assert not res.success
        assert np.array_equal(res.adversarial.coords, orig.coords)

    def test_already_misclassified(self, chain_dataset):
        model = LinearClassifier.constant([0.0, 1.0], 6, 5)
        orig = next(s for s in chain_dataset.test if s.label == 0)
        res = cw_attack(model, orig, CHAIN)
        assert res.success and res.metrics.l2 == 0

    def test_progress(self, chain_model, chain_dataset):
        seqs = correctly_classified(chain_model, chain_dataset.test)[:4]
        res = [cw_attack(chain_model, s, CHAIN.replace(cw_c=5.0)) for s in seqs]
        assert any(r.success for r in res)
        assert all(r.metrics.l2 > 0 for r in res if r.success)


class TestBatchAndEstimators:
    def test_jobs_do_not_change_results(self, chain_model, chain_dataset):
        seqs = chain_dataset.test[:4]
        a = run_attacks(chain_model, seqs, CHAIN, jobs=1)
        b = run_attacks(chain_model, seqs, CHAIN, jobs=2)
        for x, y in zip(a, b):
            assert np.array_equal(x.adversarial.coords, y.adversarial.coords)
            assert x.summary() == y.summary()

    def test_estimator_wrappers(self, chain_model, chain_dataset):
        X = chain_dataset.test[:2]
        est = ADMMAttack(chain_model, outer_iters=3, inner_steps=3, lr=1e-3, topology="chain5")
        out = est.fit().transform(X)
        assert len(out) == 2 and out[0].coords.shape == X[0].coords.shape
        assert est.get_params()["beta"] == 1.0
        cw = CWAttack(chain_model, outer_iters=3, inner_steps=3, topology="chain5").fit()
        assert all(r.method == "cw" for r in cw.attack(X))

    def test_estimator_requires_model(self):
        with pytest.raises(ConfigError):
            ADMMAttack().fit()
