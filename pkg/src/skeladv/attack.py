"""Constrained adversarial attacks on skeleton classifiers.

``admm_attack`` minimizes the augmented Lagrangian

    G = loss + <lam, B'> + <nu, J'> + <omega, S'> + beta/2 (|B'|^2 + |J'|^2 + |S'|^2)

over the adversarial coordinates with a few Adam steps, then raises the
multipliers by ``beta`` times the current residuals, and repeats. ``cw_attack``
is the unconstrained baseline: squared l2 distance plus ``c`` times the same
margin loss.
"""

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .constraints import FAMILIES, ConstraintConfig, ConstraintGeometry, DualState, ViolationVectors
from .exceptions import ConfigError, ContractError, DivergedError
from .metrics import AttackMetrics, attack_metrics
from .model import LOSS_MODES, LossSpec, forward, loss_from_logits
from .skeleton import SkeletonSequence, SkeletonTopology, topology_by_name
from .validation import check_positive, check_sequences

TRACE_FIELDS = ("loss", "bone", "joint", "speed", "penalty",
                "max_bone", "max_joint", "max_speed")


@dataclass(frozen=True)
class AdamConfig:
    """Adam hyperparameters; ``decay`` multiplies the step size after every
    outer iteration of the constrained attack."""

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 1.0

    def __post_init__(self):
        check_positive(self.lr, "lr")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError("decay must lie in (0, 1]")
        check_positive(self.eps, "eps")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")

    def replace_fields(self, **changes) -> "AdamConfig":
        """Copy with the non-``None`` entries of ``changes`` applied."""
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})


# Step size that keeps iterates near the feasible set: coordinates are in
# meters and a bone may only stretch by a few millimeters.
ADMM_ADAM = AdamConfig(lr=7e-4, decay=0.9)


class Adam:
    """Adam on a single array; the state survives across outer iterations."""

    def __init__(self, cfg: AdamConfig, shape):
        self.cfg = cfg
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.lr = cfg.lr

    def step(self, x, grad):
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * grad * grad
        mhat = self.m / (1.0 - c.beta1 ** self.t)
        vhat = self.v / (1.0 - c.beta2 ** self.t)
        return x - self.lr * mhat / (np.sqrt(vhat) + c.eps)


@dataclass(frozen=True)
class AttackConfig:
    """Settings shared by :func:`admm_attack` and :func:`cw_attack`.

    The loss is built per sequence from ``mode``, ``conf`` and
    ``target_label`` with the sequence's own label as the true class.
    ``restarts`` extra runs start from ``orig`` plus Gaussian noise of scale
    ``restart_scale`` (seeded by ``seed``) and are used only while no run has
    succeeded. ``adam`` drives the constrained attack and ``cw_adam`` the
    unconstrained baseline.
    """

    beta: float = 1.0
    outer_iters: int = 25
    inner_steps: int = 20
    adam: AdamConfig = ADMM_ADAM
    mode: str = "untargeted_margin"
    conf: float = 1.0
    target_label: Optional[int] = None
    constraints: ConstraintConfig = ConstraintConfig()
    topology: Union[str, SkeletonTopology] = "ntu25"
    seed: int = 0
    restarts: int = 0
    restart_scale: float = 1e-3
    early_stop_tol: float = 1e-4
    feasibility_tol: float = 1e-3
    cw_c: float = 1.0
    cw_steps: Optional[int] = None
    cw_adam: AdamConfig = AdamConfig()
    record_duals: bool = False

    def __post_init__(self):
        check_positive(self.beta, "beta")
        check_positive(self.outer_iters, "outer_iters", integer=True)
        check_positive(self.inner_steps, "inner_steps", integer=True)
        check_positive(self.restarts, "restarts", integer=True, allow_zero=True)
        check_positive(self.cw_c, "cw_c", allow_zero=True)
        check_positive(self.early_stop_tol, "early_stop_tol", allow_zero=True)
        check_positive(self.feasibility_tol, "feasibility_tol", allow_zero=True)
        if self.cw_steps is not None:
            check_positive(self.cw_steps, "cw_steps", integer=True)
        if isinstance(self.topology, str):
            try:
                topology_by_name(self.topology)
            except ContractError as exc:
                raise ConfigError(str(exc)) from exc
        if self.mode not in LOSS_MODES:
            raise ConfigError(f"unknown loss mode {self.mode!r}; choose from {LOSS_MODES}")
        check_positive(self.conf, "conf", allow_zero=True)

    @property
    def topo(self) -> SkeletonTopology:
        if isinstance(self.topology, SkeletonTopology):
            return self.topology
        return topology_by_name(self.topology)

    def loss_for(self, orig: SkeletonSequence) -> LossSpec:
        return LossSpec(self.mode, int(orig.label), self.target_label, self.conf)

    def replace(self, **changes) -> "AttackConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        if isinstance(self.topology, SkeletonTopology):
            d["topology"] = {"name": self.topology.name, "parent": self.topology.parent.tolist()}
        return d


@dataclass
class AttackTrace:
    """One record per internal iteration, taken before that iteration's step.

    Attributes are equal-length lists named after :data:`TRACE_FIELDS`.
    ``duals`` holds the multipliers before each outer iteration when
    requested through ``AttackConfig.record_duals``.
    """

    loss: List[float] = field(default_factory=list)
    bone: List[float] = field(default_factory=list)
    joint: List[float] = field(default_factory=list)
    speed: List[float] = field(default_factory=list)
    penalty: List[float] = field(default_factory=list)
    max_bone: List[float] = field(default_factory=list)
    max_joint: List[float] = field(default_factory=list)
    max_speed: List[float] = field(default_factory=list)
    duals: List[DualState] = field(default_factory=list)

    def __len__(self):
        return len(self.loss)

    def append(self, loss, terms, viol: ViolationVectors):
        mx = viol.max_residuals()
        self.loss.append(float(loss))
        for k in ("bone", "joint", "speed", "penalty"):
            getattr(self, k).append(float(terms[k]))
        for f in FAMILIES:
            getattr(self, f"max_{f}").append(mx[f])

    def max_residual(self) -> np.ndarray:
        """Largest residual over all families, per record."""
        if not len(self):
            return np.zeros(0)
        return np.max([self.max_bone, self.max_joint, self.max_speed], axis=0)

    def to_dict(self):
        return {k: list(getattr(self, k)) for k in TRACE_FIELDS}


@dataclass
class AttackResult:
    adversarial: SkeletonSequence
    success: bool
    predicted: int
    metrics: AttackMetrics
    trace: AttackTrace
    iterations: int
    loss: float
    max_residuals: Dict[str, float]
    method: str = "admm"
    original: Optional[SkeletonSequence] = None
    target_label: Optional[int] = None
    dual: Optional[DualState] = None

    @property
    def max_residual(self):
        return max(self.max_residuals.values())

    def summary(self):
        """Flat dictionary of the scalar fields, for reports."""
        d = {
            "method": self.method,
            "true_label": int(self.adversarial.label),
            "target_label": self.target_label,
            "predicted": int(self.predicted),
            "success": bool(self.success),
            "iterations": int(self.iterations),
            "loss": float(self.loss),
        }
        d.update({f"max_{k}": float(v) for k, v in self.max_residuals.items()})
        m = self.metrics.to_dict()
        m.pop("success")
        d.update(m)
        return d


# ---------------------------------------------------------------------------
# Building blocks


def _as_topology(cfg, topo):
    topo = topo if topo is not None else cfg.topo
    return topo


def augmented_lagrangian(model, orig: SkeletonSequence, adv: SkeletonSequence,
                         dual: DualState, cfg: AttackConfig, topo=None, geometry=None):
    """Value and coordinate gradient of the augmented Lagrangian.

    The quadratic weight is ``dual.beta``; with zero multipliers and
    ``beta = 0`` this is exactly the attack loss. Gradient entries of
    padding frames and frozen joints are zero.
    """
    geom = geometry or ConstraintGeometry(orig, _as_topology(cfg, topo), cfg.constraints)
    if adv.coords.shape != orig.coords.shape:
        raise ContractError(f"shape mismatch: {orig.coords.shape} vs {adv.coords.shape}")
    value, grad, *_ = _objective(model, geom, cfg.loss_for(orig), adv.coords,
                                 orig.frame_mask, dual)
    return value, grad


def _objective(model, geom, spec, x, mask, dual):
    z = model.forward_batch(x[None], mask[None])[0]
    loss, dz = loss_from_logits(z, spec)
    if np.any(dz):
        g_loss = model.input_gradient_batch(x[None], mask[None], dz[None])[0]
    else:
        g_loss = np.zeros_like(x)
    terms, g_con, viol = geom.penalty(x, dual)
    value = loss + terms["bone"] + terms["joint"] + terms["speed"] + terms["penalty"]
    grad = g_loss * geom.perturbable[..., None] + g_con
    return value, grad, loss, terms, viol, int(np.argmax(z))


def dual_update(dual: DualState, violations: ViolationVectors, beta: float) -> DualState:
    """One ascent step ``mult + beta * residual`` for every family."""
    check_positive(beta, "beta")
    new = []
    for mult, res in zip(dual.arrays(), (violations.bone, violations.joint, violations.speed)):
        if mult.shape != res.shape:
            raise ContractError(f"multiplier shape {mult.shape} does not match residuals {res.shape}")
        new.append(mult + beta * res)
    return DualState(*new, beta=dual.beta)


def _check_inputs(model, orig, spec):
    if not np.all(np.isfinite(orig.coords)):
        raise ContractError("original sequence has non-finite coordinates")
    if orig.coords.shape[:2] != (model.n_frames_, model.n_joints_):
        raise ContractError(
            f"model expects {model.n_frames_} frames x {model.n_joints_} joints, "
            f"got {orig.coords.shape[:2]}")
    spec.check(model.n_classes_)


def _untouched_result(model, orig, geom, spec, method, cfg, pred, loss):
    adv = orig.copy()
    viol = geom.violations(adv.coords)
    return AttackResult(adv, True, pred, attack_metrics(orig, adv, geom.topo, True), AttackTrace(),
                        0, loss, viol.max_residuals(), method, orig, cfg.target_label)


def _finalize(model, orig, geom, spec, x, method, cfg, trace, dual=None):
    adv = orig.with_coords(x)
    z = forward(model, adv)
    loss = loss_from_logits(z, spec)[0]
    pred = int(np.argmax(z))
    success = spec.goal_reached(pred)
    viol = geom.violations(x)
    return AttackResult(adv, success, pred, attack_metrics(orig, adv, geom.topo, success), trace,
                        len(trace), loss, viol.max_residuals(), method, orig, cfg.target_label,
                        dual)


def _start_points(orig, cfg):
    yield orig.coords.copy()
    for r in range(cfg.restarts):
        rng = np.random.default_rng([int(cfg.seed), r])
        noise = rng.normal(0.0, cfg.restart_scale, size=orig.coords.shape)
        yield orig.coords + noise * orig.perturbable[..., None]


def _better(a, b):
    """Whether result ``a`` beats ``b``: success first, then lower loss."""
    if b is None:
        return True
    return (not b.success and a.success) or (a.success == b.success and a.loss < b.loss)


# ---------------------------------------------------------------------------
# Attacks


def admm_attack(model, orig: SkeletonSequence, cfg: AttackConfig = None,
                topo: SkeletonTopology = None) -> AttackResult:
    """Constrained attack by alternating Adam steps and dual ascent.

    Runs ``outer_iters`` rounds of ``inner_steps`` Adam steps on the
    augmented Lagrangian, each followed by one multiplier update. Stops early
    once the loss is zero and every residual is below ``early_stop_tol``.
    Returns the iterate with the lowest loss among those whose residuals are
    all within ``feasibility_tol``, or the last iterate if none is.

    Raises
    ------
    DivergedError
        A non-finite value appeared; the partial trace is attached.
    """
    cfg = cfg or AttackConfig()
    geom = ConstraintGeometry(orig, _as_topology(cfg, topo), cfg.constraints)
    spec = cfg.loss_for(orig)
    _check_inputs(model, orig, spec)
    z0 = forward(model, orig)
    pred0 = int(np.argmax(z0))
    if spec.goal_reached(pred0):
        return _untouched_result(model, orig, geom, spec, "admm", cfg, pred0,
                                 loss_from_logits(z0, spec)[0])
    best = None
    total = 0
    for x0 in _start_points(orig, cfg):
        res = _admm_run(model, orig, geom, spec, cfg, x0)
        total += res.iterations
        if _better(res, best):
            best = res
        if best.success:
            break
    best.iterations = total
    return best


def _admm_run(model, orig, geom, spec, cfg, x):
    mask = orig.frame_mask
    dual = geom.zero_dual(cfg.beta)
    opt = Adam(cfg.adam, x.shape)
    trace = AttackTrace()
    best_x, best_key = None, None
    stopped = False

    def consider(x, loss, viol):
        nonlocal best_x, best_key
        if viol.max_residual <= cfg.feasibility_tol:
            key = (loss, viol.max_residual)
            if best_key is None or key < best_key:
                best_x, best_key = x.copy(), key

    for _ in range(cfg.outer_iters):
        if cfg.record_duals:
            trace.duals.append(dual.copy())
        for _ in range(cfg.inner_steps):
            value, grad, loss, terms, viol, _ = _objective(model, geom, spec, x, mask, dual)
            trace.append(loss, terms, viol)
            if not (np.isfinite(value) and np.all(np.isfinite(grad))):
                raise DivergedError("attack objective became non-finite", trace)
            consider(x, loss, viol)
            if loss == 0.0 and viol.max_residual < cfg.early_stop_tol:
                stopped = True
                break
            x = opt.step(x, grad)
        if stopped:
            break
        dual = dual_update(dual, geom.violations(x), cfg.beta)
        opt.lr *= cfg.adam.decay
    if cfg.record_duals:
        trace.duals.append(dual.copy())
    if not np.all(np.isfinite(x)):
        raise DivergedError("attack iterate became non-finite", trace)
    if not stopped:
        z = forward(model, orig.with_coords(x))
        consider(x, loss_from_logits(z, spec)[0], geom.violations(x))
    chosen = best_x if best_x is not None else x
    return _finalize(model, orig, geom, spec, chosen, "admm", cfg, trace, dual)


def cw_attack(model, orig: SkeletonSequence, cfg: AttackConfig = None,
              topo: SkeletonTopology = None) -> AttackResult:
    """Unconstrained baseline: Adam on ``|x' - x|^2 + c * loss(x')``.

    Runs ``cw_steps`` steps (default ``outer_iters * inner_steps``). Returns
    the closest iterate with zero loss, else the closest one that reaches the
    goal, else the last one. Constraint residuals are traced for comparison
    but never penalized.
    """
    cfg = cfg or AttackConfig()
    geom = ConstraintGeometry(orig, _as_topology(cfg, topo), cfg.constraints)
    spec = cfg.loss_for(orig)
    _check_inputs(model, orig, spec)
    z0 = forward(model, orig)
    pred0 = int(np.argmax(z0))
    if spec.goal_reached(pred0):
        return _untouched_result(model, orig, geom, spec, "cw", cfg, pred0,
                                 loss_from_logits(z0, spec)[0])
    steps = cfg.cw_steps or cfg.outer_iters * cfg.inner_steps
    mask = orig.frame_mask
    x = orig.coords.copy()
    opt = Adam(cfg.cw_adam, x.shape)
    trace = AttackTrace()
    best_x, best_key = None, None
    for k in range(steps + 1):
        _, loss, _, g_loss, pred = _loss_grad(model, spec, x, mask)
        viol = geom.violations(x)
        d = (x - orig.coords) * geom.perturbable[..., None]
        dist = float(np.sum(d * d))
        if k < steps:
            trace.append(loss, _NO_TERMS, viol)
        tier = 0 if loss == 0.0 else (1 if spec.goal_reached(pred) else 2)
        key = (tier, dist)
        if tier < 2 and (best_key is None or key < best_key):
            best_x, best_key = x.copy(), key
        if k == steps:
            break
        grad = (2.0 * d + cfg.cw_c * g_loss) * geom.perturbable[..., None]
        if not np.all(np.isfinite(grad)):
            raise DivergedError("attack objective became non-finite", trace)
        x = opt.step(x, grad)
    chosen = best_x if best_x is not None else x
    return _finalize(model, orig, geom, spec, chosen, "cw", cfg, trace)


_NO_TERMS = {"bone": 0.0, "joint": 0.0, "speed": 0.0, "penalty": 0.0}


def _loss_grad(model, spec, x, mask):
    z = model.forward_batch(x[None], mask[None])[0]
    loss, dz = loss_from_logits(z, spec)
    g = model.input_gradient_batch(x[None], mask[None], dz[None])[0] if np.any(dz) \
        else np.zeros_like(x)
    return z, loss, dz, g, int(np.argmax(z))


ATTACKS = {"admm": admm_attack, "cw": cw_attack}


def run_attacks(model, sequences, cfg: AttackConfig, method="admm", targets=None, jobs=1):
    """Attack every sequence; results come back in input order.

    ``targets`` optionally gives one target label per sequence. With
    ``jobs > 1`` sequences are split across worker processes; each attack
    is deterministic, so the output does not depend on ``jobs``.
    """
    attack = ATTACKS[method]
    cfgs = [cfg if targets is None else cfg.replace(target_label=int(t)) for t in
            (targets if targets is not None else [None] * len(sequences))]
    if jobs <= 1 or len(sequences) <= 1:
        return [attack(model, s, c) for s, c in zip(sequences, cfgs)]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=int(jobs)) as pool:
        futures = [pool.submit(attack, model, s, c) for s, c in zip(sequences, cfgs)]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# Estimator wrappers


class _AttackTransformer(TransformerMixin, BaseEstimator):
    _method = "admm"

    def __init__(self, estimator=None, beta=1.0, outer_iters=25, inner_steps=20, lr=None,
                 mode="untargeted_margin", conf=1.0, eps_bone=0.03, eps_joint=0.2,
                 eps_speed=0.1, c=1.0, topology="ntu25", seed=0):
        self.estimator = estimator
        self.beta = beta
        self.outer_iters = outer_iters
        self.inner_steps = inner_steps
        self.lr = lr
        self.mode = mode
        self.conf = conf
        self.eps_bone = eps_bone
        self.eps_joint = eps_joint
        self.eps_speed = eps_speed
        self.c = c
        self.topology = topology
        self.seed = seed

    def config(self) -> AttackConfig:
        steps = {}
        if self.lr is not None:
            if self._method == "cw":
                steps["cw_adam"] = AdamConfig(lr=self.lr)
            else:
                steps["adam"] = ADMM_ADAM.replace_fields(lr=self.lr)
        return AttackConfig(beta=self.beta, outer_iters=self.outer_iters,
                            inner_steps=self.inner_steps, **steps,
                            mode=self.mode, conf=self.conf,
                            constraints=ConstraintConfig(self.eps_bone, self.eps_joint,
                                                         self.eps_speed),
                            topology=self.topology, seed=self.seed, cw_c=self.c)

    def fit(self, X=None, y=None):
        if self.estimator is None:
            raise ConfigError("an estimator to attack is required")
        self.config_ = self.config()
        return self

    def attack(self, X, targets=None):
        """Attack results for every sequence of ``X``.

        ``targets`` gives per-sequence target labels in targeted modes.
        """
        if not hasattr(self, "config_"):
            self.fit()
        seqs = _as_sequences(X)
        self.results_ = run_attacks(self.estimator, seqs, self.config_, self._method, targets)
        return self.results_

    def transform(self, X, targets=None):
        """Adversarial versions of the sequences in ``X``."""
        return [r.adversarial for r in self.attack(X, targets)]


class ADMMAttack(_AttackTransformer):
    """Estimator wrapper of :func:`admm_attack`; ``c`` is unused."""

    _method = "admm"


class CWAttack(_AttackTransformer):
    """Estimator wrapper of :func:`cw_attack`; ``beta`` only sets the outer
    loop length used for the default step count."""

    _method = "cw"


def _as_sequences(X):
    if isinstance(X, SkeletonSequence):
        return [X]
    if isinstance(X, np.ndarray):
        coords, mask, labels = check_sequences(X)
        return [SkeletonSequence(c, m, int(l)) for c, m, l in zip(coords, mask, labels)]
    return list(X)
