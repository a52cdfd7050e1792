"""Input validation helpers for the estimator API.

Estimators accept either a list of :class:`SkeletonSequence` or a dense
array of shape ``(n, T, I, 3)``. For dense arrays the frame mask is inferred:
all-zero frames are padding, which is exactly the padding invariant.
"""

import numbers

import numpy as np
from sklearn.exceptions import NotFittedError

from .exceptions import ConfigError, ContractError
from .skeleton import SkeletonSequence


def infer_frame_mask(coords):
    return np.any(coords != 0, axis=(-1, -2))


def check_sequences(X, y=None, *, allow_empty=False):
    """Normalize ``X`` to ``(coords, frame_mask, labels)``.

    Returns
    -------
    coords : ndarray, shape (n, T, I, 3)
    frame_mask : ndarray of bool, shape (n, T)
    labels : ndarray of int, shape (n,)
        Taken from ``y`` when given, otherwise from the sequences (zeros for
        dense arrays).
    """
    if isinstance(X, SkeletonSequence):
        X = [X]
    if isinstance(X, np.ndarray):
        coords = np.asarray(X, dtype=np.float64)
        if coords.ndim == 3:
            coords = coords[None]
        if coords.ndim != 4 or coords.shape[-1] != 3:
            raise ContractError(f"expected array of shape (n, T, I, 3), got {X.shape}")
        mask = infer_frame_mask(coords)
        labels = np.zeros(len(coords), dtype=np.int64)
    else:
        seqs = list(X)
        if not seqs:
            if not allow_empty:
                raise ContractError("no sequences given")
            return np.zeros((0, 0, 0, 3)), np.zeros((0, 0), dtype=bool), np.zeros(0, dtype=np.int64)
        shapes = {s.coords.shape for s in seqs}
        if len(shapes) != 1:
            raise ContractError(f"sequences differ in shape: {sorted(shapes)}")
        coords = np.stack([s.coords for s in seqs])
        mask = np.stack([s.frame_mask for s in seqs])
        labels = np.array([s.label for s in seqs], dtype=np.int64)
    if not np.all(np.isfinite(coords)):
        raise ContractError("coordinates contain NaN or Inf")
    if y is not None:
        labels = np.asarray(y, dtype=np.int64).ravel()
        if labels.shape[0] != coords.shape[0]:
            raise ContractError(f"{coords.shape[0]} sequences but {labels.shape[0]} labels")
    if len(coords) == 0 and not allow_empty:
        raise ContractError("no sequences given")
    return coords, mask, labels


def check_label(label, n_classes, name="label"):
    if not isinstance(label, (numbers.Integral, np.integer)) or not 0 <= label < n_classes:
        raise ContractError(f"{name} {label!r} outside [0, {n_classes - 1}]")
    return int(label)


def check_positive(value, name, integer=False, allow_zero=False):
    ok = value >= 0 if allow_zero else value > 0
    if integer and not isinstance(value, (numbers.Integral, np.integer)):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if not (np.isfinite(value) and ok):
        raise ConfigError(f"{name} must be {'nonnegative' if allow_zero else 'positive'}, got {value!r}")
    return value


def check_is_fitted(estimator, attribute="params_"):
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(f"{type(estimator).__name__} is not fitted yet")
