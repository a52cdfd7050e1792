"""Differentiable classifiers, attack losses and the reference trainer.

Every classifier exposes the same small protocol used by the attacks and
the defense:

``forward_batch(coords, frame_mask) -> logits``
    ``coords`` has shape ``(n, T, I, 3)``, the result ``(n, L)``.
``input_gradient_batch(coords, frame_mask, cotangent) -> grad``
    Vector-Jacobian product of ``forward_batch`` w.r.t. ``coords``.
``n_classes_``, ``n_frames_``, ``n_joints_``
    Expected output and input sizes.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .exceptions import ContractError, TrainingError
from .skeleton import SkeletonSequence
from .validation import check_is_fitted, check_label, check_positive, check_sequences

LOSS_MODES = ("untargeted_margin", "targeted_margin", "targeted_cross_entropy")


def _argmax(a, axis=-1):
    # np.argmax returns the first maximal index, i.e. lowest index wins ties.
    return np.argmax(a, axis=axis)


class _ClassifierProtocol:
    """Shared helpers for classes implementing the batch protocol."""

    def _check_input(self, coords, mask):
        if coords.ndim != 4 or coords.shape[1:] != (self.n_frames_, self.n_joints_, 3):
            raise ContractError(
                f"expected input of shape (n, {self.n_frames_}, {self.n_joints_}, 3), "
                f"got {coords.shape}")
        if mask.shape != coords.shape[:2]:
            raise ContractError("frame mask does not match coordinates")

    def decision_function(self, X):
        """Logits of every sequence in ``X``, shape ``(n, L)``."""
        coords, mask, _ = check_sequences(X)
        return self.forward_batch(coords, mask)

    def predict(self, X):
        return _argmax(self.decision_function(X), axis=1)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


class LinearClassifier(_ClassifierProtocol, BaseEstimator, ClassifierMixin):
    """``logits = W @ vec(x) + b``; padding frames contribute nothing.

    Mostly a test fixture: with ``weights`` all zero it is the constant
    classifier that ignores its input.
    """

    def __init__(self, weights=None, bias=None, input_shape=None):
        self.weights = weights
        self.bias = bias
        self.input_shape = input_shape

    @classmethod
    def constant(cls, logits, n_frames, n_joints):
        logits = np.asarray(logits, dtype=np.float64)
        return cls(np.zeros((logits.size, n_frames * n_joints * 3)), logits,
                   (n_frames, n_joints))

    @property
    def n_classes_(self):
        return np.asarray(self.bias).size

    @property
    def classes_(self):
        return np.arange(self.n_classes_)

    @property
    def n_frames_(self):
        return self.input_shape[0]

    @property
    def n_joints_(self):
        return self.input_shape[1]

    def fit(self, X=None, y=None):
        return self

    def forward_batch(self, coords, frame_mask):
        coords = np.asarray(coords, dtype=np.float64)
        self._check_input(coords, frame_mask)
        x = coords * frame_mask[..., None, None]
        return x.reshape(len(coords), -1) @ np.asarray(self.weights).T + np.asarray(self.bias)

    def input_gradient_batch(self, coords, frame_mask, cotangent):
        coords = np.asarray(coords, dtype=np.float64)
        self._check_input(coords, frame_mask)
        g = np.asarray(cotangent) @ np.asarray(self.weights)
        return g.reshape(coords.shape) * frame_mask[..., None, None]


class ReferenceClassifier(_ClassifierProtocol, BaseEstimator, ClassifierMixin):
    """Small sequence classifier with exact, hand-derived gradients.

    Each frame's normalized coordinates go through a tanh embedding, the
    embeddings are mean-pooled over real frames, and two tanh layers map the
    pooled vector to logits. With ``use_motion=True`` each frame feature also
    carries the normalized displacement to the next frame, and pooling runs
    over consecutive pairs of real frames.

    Parameters
    ----------
    embed_dim, hidden_dim : int
        Widths of the frame embedding and of the two hidden layers.
    n_classes : int, optional
        Number of classes; inferred as ``max(y) + 1`` when ``None``.
    epochs, lr, batch_size : training schedule of mini-batch Adam on
        cross-entropy.
    noise_sigma : float
        Optional Gaussian noise added to real frames during training,
        followed by temporal filtering with ``noise_kernel_size``.
    random_state : int
        Seeds initialization and shuffling.
    """

    def __init__(self, embed_dim=64, hidden_dim=64, n_classes=None, epochs=30, lr=1e-3,
                 batch_size=32, use_motion=True, noise_sigma=0.0, noise_kernel_size=1,
                 weight_decay=0.0, random_state=0):
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.n_classes = n_classes
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.use_motion = use_motion
        self.noise_sigma = noise_sigma
        self.noise_kernel_size = noise_kernel_size
        self.weight_decay = weight_decay
        self.random_state = random_state

    PARAM_NAMES = ("W0", "b0", "W1", "b1", "W2", "b2", "W3", "b3")

    @property
    def classes_(self):
        return np.arange(self.n_classes_)

    # -- construction --------------------------------------------------
    def _init_params(self, rng, d_in, n_classes):
        E, H = self.embed_dim, self.hidden_dim

        def glorot(n_out, n_in):
            return rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), size=(n_out, n_in))

        return {
            "W0": glorot(E, d_in), "b0": np.zeros(E),
            "W1": glorot(H, E), "b1": np.zeros(H),
            "W2": glorot(H, H), "b2": np.zeros(H),
            "W3": glorot(n_classes, H), "b3": np.zeros(n_classes),
        }

    def _fit_normalization(self, coords, mask):
        I = coords.shape[2]
        flat = coords.reshape(coords.shape[0], coords.shape[1], I * 3)
        frames = flat[mask]
        self.mean_ = frames.mean(axis=0)
        self.scale_ = np.maximum(frames.std(axis=0), 1e-3)
        if self.use_motion:
            pm = mask[:, :-1] & mask[:, 1:]
            vel = (flat[:, 1:] - flat[:, :-1])[pm]
            self.motion_scale_ = np.maximum(vel.std(axis=0), 1e-4) if len(vel) else np.ones(I * 3)
        else:
            self.motion_scale_ = None

    # -- forward / backward --------------------------------------------
    def _features(self, coords, mask):
        n, T, I, _ = coords.shape
        flat = coords.reshape(n, T, I * 3)
        pos = (flat - self.mean_) / self.scale_
        if not self.use_motion:
            return pos, mask.astype(np.float64)
        mot = (flat[:, 1:] - flat[:, :-1]) / self.motion_scale_
        feats = np.concatenate([pos[:, :-1], mot], axis=2)
        return feats, (mask[:, :-1] & mask[:, 1:]).astype(np.float64)

    def _forward(self, coords, mask):
        p = self.params_
        feats, w = self._features(coords, mask)
        count = w.sum(axis=1, keepdims=True)
        if np.any(count == 0):
            raise ContractError("sequence has no real frames to pool over")
        w = w / count
        emb = np.tanh(feats @ p["W0"].T + p["b0"])
        pooled = np.einsum("nt,nte->ne", w, emb)
        h1 = np.tanh(pooled @ p["W1"].T + p["b1"])
        h2 = np.tanh(h1 @ p["W2"].T + p["b2"])
        logits = h2 @ p["W3"].T + p["b3"]
        cache = (feats, w, emb, pooled, h1, h2)
        return logits, cache

    def _backward(self, cache, dlogits, want_params=True, want_input=False, shape=None):
        p = self.params_
        feats, w, emb, pooled, h1, h2 = cache
        grads = {}
        da2 = (dlogits @ p["W3"]) * (1.0 - h2 * h2)
        da1 = (da2 @ p["W2"]) * (1.0 - h1 * h1)
        dpooled = da1 @ p["W1"]
        demb = w[..., None] * dpooled[:, None, :]
        dpre = demb * (1.0 - emb * emb)
        if want_params:
            grads["W3"] = dlogits.T @ h2
            grads["b3"] = dlogits.sum(axis=0)
            grads["W2"] = da2.T @ h1
            grads["b2"] = da2.sum(axis=0)
            grads["W1"] = da1.T @ pooled
            grads["b1"] = da1.sum(axis=0)
            grads["W0"] = np.einsum("nte,ntd->ed", dpre, feats)
            grads["b0"] = dpre.sum(axis=(0, 1))
        dx = None
        if want_input:
            n, T, I, _ = shape
            dfeat = dpre @ p["W0"]
            D = I * 3
            dflat = np.zeros((n, T, D))
            if self.use_motion:
                dflat[:, :-1] += dfeat[..., :D] / self.scale_
                dmot = dfeat[..., D:] / self.motion_scale_
                dflat[:, 1:] += dmot
                dflat[:, :-1] -= dmot
            else:
                dflat += dfeat / self.scale_
            dx = dflat.reshape(shape)
        return grads, dx

    def forward_batch(self, coords, frame_mask):
        check_is_fitted(self)
        coords = np.asarray(coords, dtype=np.float64)
        frame_mask = np.asarray(frame_mask, dtype=bool)
        self._check_input(coords, frame_mask)
        return self._forward(coords, frame_mask)[0]

    def input_gradient_batch(self, coords, frame_mask, cotangent):
        check_is_fitted(self)
        coords = np.asarray(coords, dtype=np.float64)
        frame_mask = np.asarray(frame_mask, dtype=bool)
        self._check_input(coords, frame_mask)
        _, cache = self._forward(coords, frame_mask)
        cot = np.asarray(cotangent, dtype=np.float64).reshape(len(coords), self.n_classes_)
        _, dx = self._backward(cache, cot, want_params=False, want_input=True,
                               shape=coords.shape)
        return dx

    # -- training --------------------------------------------------------
    def fit(self, X, y=None):
        """Mini-batch Adam on softmax cross-entropy.

        Raises
        ------
        TrainingError
            Empty data, labels out of range or a non-finite loss.
        """
        try:
            coords, mask, labels = check_sequences(X, y)
        except ContractError as exc:
            raise TrainingError(str(exc)) from exc
        if np.any(labels < 0):
            raise TrainingError("labels must be nonnegative")
        n_classes = int(labels.max()) + 1 if self.n_classes is None else int(self.n_classes)
        if np.any(labels >= n_classes):
            raise TrainingError(f"labels must lie in [0, {n_classes - 1}]")
        check_positive(self.epochs, "epochs", integer=True, allow_zero=True)
        check_positive(self.batch_size, "batch_size", integer=True)
        rng = np.random.default_rng(self.random_state)
        self.n_classes_ = n_classes
        self.n_frames_, self.n_joints_ = coords.shape[1], coords.shape[2]
        self._fit_normalization(coords, mask)
        d_in = self.n_joints_ * 3 * (2 if self.use_motion else 1)
        self.params_ = self._init_params(rng, d_in, n_classes)
        self.loss_curve_ = []

        adam = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in self.params_.items()}
        b1, b2, eps = 0.9, 0.999, 1e-8
        step = 0
        n = len(coords)
        noise_rng = np.random.default_rng([int(self.random_state), 1])
        for _ in range(self.epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                xb, mb, yb = coords[idx], mask[idx], labels[idx]
                if self.noise_sigma > 0:
                    xb = self._augment(xb, mb, noise_rng)
                logits, cache = self._forward(xb, mb)
                loss, dlogits = _cross_entropy_batch(logits, yb)
                if not np.isfinite(loss):
                    raise TrainingError("non-finite training loss")
                total += loss * len(idx)
                grads, _ = self._backward(cache, dlogits / len(idx))
                step += 1
                for k, g in grads.items():
                    if self.weight_decay and k.startswith("W"):
                        g = g + self.weight_decay * self.params_[k]
                    m, v = adam[k]
                    m *= b1
                    m += (1 - b1) * g
                    v *= b2
                    v += (1 - b2) * g * g
                    mhat = m / (1 - b1 ** step)
                    vhat = v / (1 - b2 ** step)
                    self.params_[k] -= self.lr * mhat / (np.sqrt(vhat) + eps)
            self.loss_curve_.append(total / n)
        return self

    def _augment(self, xb, mb, rng):
        from .smoothing import filter_batch
        noisy = xb + rng.normal(0.0, self.noise_sigma, size=xb.shape) * mb[..., None, None]
        return filter_batch(noisy, mb, self.noise_kernel_size)


def _cross_entropy_batch(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d


# ---------------------------------------------------------------------------
# Single-sequence helpers


def forward(model, seq: SkeletonSequence) -> np.ndarray:
    """Logit vector of one sequence."""
    return model.forward_batch(seq.coords[None], seq.frame_mask[None])[0]


def input_gradient(model, seq: SkeletonSequence, cotangent) -> np.ndarray:
    cot = np.asarray(cotangent, dtype=np.float64)[None]
    return model.input_gradient_batch(seq.coords[None], seq.frame_mask[None], cot)[0]


@dataclass(frozen=True)
class LossSpec:
    """Attack objective. ``conf`` is the required logit margin."""

    mode: str = "untargeted_margin"
    true_label: int = 0
    target_label: Optional[int] = None
    conf: float = 1.0

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise ContractError(f"unknown loss mode {self.mode!r}; choose from {LOSS_MODES}")
        if not self.conf >= 0:
            raise ContractError(f"conf must be nonnegative, got {self.conf}")
        if self.targeted:
            if self.target_label is None:
                raise ContractError(f"{self.mode} requires a target label")
            if self.target_label == self.true_label:
                raise ContractError("target label must differ from the true label")

    @property
    def targeted(self):
        return self.mode != "untargeted_margin"

    def check(self, n_classes):
        check_label(self.true_label, n_classes, "true_label")
        if self.targeted:
            check_label(self.target_label, n_classes, "target_label")

    def goal_reached(self, predicted) -> bool:
        """Whether a predicted label satisfies the adversary's goal."""
        if self.targeted:
            return int(predicted) == self.target_label
        return int(predicted) != self.true_label


def loss_from_logits(logits, spec: LossSpec):
    """Attack loss and its gradient with respect to the logits."""
    z = np.asarray(logits, dtype=np.float64)
    L = z.size
    spec.check(L)
    d = np.zeros(L)
    if spec.mode == "targeted_cross_entropy":
        s = z - z.max()
        logp = s - np.log(np.exp(s).sum())
        d[:] = np.exp(logp)
        d[spec.target_label] -= 1.0
        return float(-logp[spec.target_label]), d
    if L < 2:
        raise ContractError("margin losses need at least two classes")
    keep = spec.target_label if spec.targeted else spec.true_label
    others = z.copy()
    others[keep] = -np.inf
    k = int(_argmax(others))
    if spec.targeted:
        value = z[k] - z[keep] + spec.conf
        sign = 1.0
    else:
        value = z[keep] - z[k] + spec.conf
        sign = -1.0
    if value <= 0:
        return 0.0, d
    d[k] += sign
    d[keep] -= sign
    return float(value), d


def loss_and_input_grad(model, seq: SkeletonSequence, spec: LossSpec):
    """Attack loss of ``seq`` and its exact gradient w.r.t. the coordinates."""
    z = forward(model, seq)
    value, dz = loss_from_logits(z, spec)
    if not np.any(dz):
        return value, np.zeros_like(seq.coords)
    return value, input_gradient(model, seq, dz)


def loss_value(model, seq, spec) -> float:
    return loss_from_logits(forward(model, seq), spec)[0]


def fd_gradient(model, seq: SkeletonSequence, spec: LossSpec, step: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of the attack loss (test oracle)."""
    return central_difference(lambda c: loss_value(model, seq.with_coords(c), spec),
                              seq.coords, step)


def central_difference(fun, x, step=1e-6):
    if not step > 0:
        raise ContractError("step must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = fun(x)
        flat[i] = old - step
        fm = fun(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return g


def accuracy(model, seqs) -> float:
    coords, mask, labels = check_sequences(seqs)
    pred = _argmax(model.forward_batch(coords, mask), axis=1)
    return float(np.mean(pred == labels))


def train_reference_model(dataset, **hyperparams) -> ReferenceClassifier:
    """Fit a :class:`ReferenceClassifier` on ``dataset.train``.

    The held-out accuracy on ``dataset.test`` is stored on the returned model
    as ``held_out_accuracy_`` (``None`` if the test split is empty).
    """
    if not dataset.train:
        raise TrainingError("empty training set")
    hyperparams.setdefault("n_classes", dataset.num_classes)
    model = ReferenceClassifier(**hyperparams).fit(dataset.train)
    model.held_out_accuracy_ = accuracy(model, dataset.test) if dataset.test else None
    return model
