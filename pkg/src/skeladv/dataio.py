"""Synthetic skeleton datasets, frame-count normalization and file formats.

All documents are JSON with ``format_version`` 1. Reals are written with
Python's shortest round-trip ``repr``, so ``read(write(x)) == x`` bit for bit.

Sequence document::

    {"format_version": 1, "kind": "sequence", "num_frames": T, "num_joints": I,
     "coords": [[[x, y, z], ...], ...], "frame_mask": [true, ...],
     "label": 0, "actor_mask": null, "metadata": {}}

Manifest document (``manifest.json`` in a dataset directory)::

    {"format_version": 1, "kind": "manifest", "topology": {...},
     "num_classes": L, "class_names": [...], "num_frames": T,
     "files": [{"path": "sequences/000000.json", "split": "train", "label": 0}, ...]}
"""

import json
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .exceptions import ConfigError, ContractError, FormatError, ParseError, SchemaValidationError
from .skeleton import ROOT, SkeletonSequence, SkeletonTopology, topology_by_name

FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Synthetic data by forward kinematics

# Rest-pose bone vectors (child minus parent, meters) for the 25-joint layout,
# keyed by 1-based joint id. +x is the actor's left, +y up, +z forward.
_NTU25_OFFSETS = {
    2: (0.0, 0.25, 0.0), 21: (0.0, 0.25, 0.0), 3: (0.0, 0.08, 0.0), 4: (0.0, 0.15, 0.0),
    5: (0.17, -0.03, 0.0), 6: (0.0, -0.28, 0.0), 7: (0.0, -0.25, 0.0), 8: (0.0, -0.08, 0.0),
    22: (0.0, -0.07, 0.0), 23: (0.03, -0.03, 0.02),
    9: (-0.17, -0.03, 0.0), 10: (0.0, -0.28, 0.0), 11: (0.0, -0.25, 0.0), 12: (0.0, -0.08, 0.0),
    24: (0.0, -0.07, 0.0), 25: (-0.03, -0.03, 0.02),
    13: (0.09, -0.05, 0.0), 14: (0.0, -0.42, 0.0), 15: (0.0, -0.40, 0.0), 16: (0.0, -0.05, 0.12),
    17: (-0.09, -0.05, 0.0), 18: (0.0, -0.42, 0.0), 19: (0.0, -0.40, 0.0), 20: (0.0, -0.05, 0.12),
}

# Bones (by 1-based child joint) that class motions may drive.
_NTU25_ACTUATED = (6, 7, 10, 11, 14, 15, 18, 19, 2, 21, 4)


def default_bone_offsets(topo: SkeletonTopology) -> np.ndarray:
    """Rest-pose bone vectors, shape ``(I, 3)``; rows of root joints are zero."""
    I = topo.num_joints
    out = np.zeros((I, 3))
    if topo.name == "ntu25":
        for j1, v in _NTU25_OFFSETS.items():
            out[j1 - 1] = v
        return out
    out[topo.parent != ROOT] = (0.25, 0.0, 0.0)
    return out


def _actuated(topo):
    if topo.name == "ntu25":
        return np.array(_NTU25_ACTUATED) - 1
    return topo.bone_child


@dataclass
class GeneratorConfig:
    """Parameters of the synthetic action generator.

    Each class drives a few bones with sinusoidal rotations about the x
    (flexion) and z (abduction) axes at its own frequency,
    ``base_frequency + frequency_step * c`` cycles per sequence. The bones,
    axes, amplitudes, phases and posture offsets of every class are drawn
    once from ``class_seed``; ``seed`` controls per-sequence variation (timing,
    amplitude and body-size jitter, global yaw, angle noise). ``root_jitter``
    adds white per-frame noise to the root position, like sensor jitter;
    it moves whole poses rigidly, so bone lengths stay exact.
    """

    num_classes: int = 4
    sequences_per_class: int = 600
    num_frames: int = 48
    topology: str = "ntu25"
    bone_lengths: Optional[List[float]] = None
    class_params: Optional[List[dict]] = None
    angle_noise: float = 0.04
    posture_noise: float = 0.08
    amplitude_jitter: float = 0.25
    scale_jitter: float = 0.08
    yaw_range: float = 0.4
    root_jitter: float = 0.003
    active_per_class: int = 3
    amplitude_range: Tuple[float, float] = (0.2, 0.5)
    offset_range: float = 0.3
    base_frequency: float = 1.0
    frequency_step: float = 0.5
    test_fraction: float = 0.2
    class_seed: int = 1234
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "sequences_per_class", "num_frames", "active_per_class"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive count")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must be in [0, 1)")
        if self.bone_lengths is not None and np.any(np.asarray(self.bone_lengths) <= 0):
            raise ConfigError("bone lengths must be positive")
        topology_by_name_checked(self.topology)

    def to_dict(self):
        d = asdict(self)
        d["amplitude_range"] = list(self.amplitude_range)
        return d


def topology_by_name_checked(name):
    try:
        return topology_by_name(name)
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class Dataset:
    topology: SkeletonTopology
    train: List[SkeletonSequence]
    test: List[SkeletonSequence]
    class_names: List[str]
    generator: Optional[dict] = None

    @property
    def num_classes(self):
        return len(self.class_names)


def _class_trajectories(cfg, topo):
    """Per-class list of (bone, axis, amplitude, frequency, phase, offset)."""
    if cfg.class_params is not None:
        return [[(int(m["bone"]), int(m["axis"]), float(m["amplitude"]), float(m["frequency"]),
                  float(m["phase"]), float(m.get("offset", 0.0))) for m in c["motions"]]
                for c in cfg.class_params]
    candidates = _actuated(topo)
    out = []
    for c in range(cfg.num_classes):
        rng = np.random.default_rng([cfg.class_seed, c])
        k = min(cfg.active_per_class, len(candidates))
        bones = rng.choice(candidates, size=k, replace=False)
        # cycles per sequence, distinct for every class
        freq = cfg.base_frequency + cfg.frequency_step * c
        motions = []
        for b in sorted(bones.tolist()):
            axis = int(rng.integers(0, 2))
            lo, hi = cfg.amplitude_range
            motions.append((int(b), axis, float(rng.uniform(lo, hi)), freq,
                            float(rng.uniform(0, 2 * np.pi)),
                            float(rng.uniform(-cfg.offset_range, cfg.offset_range))))
        out.append(motions)
    return out


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1),
                     np.stack([z, s, c], -1)], -2)


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1),
                     np.stack([-s, z, c], -1)], -2)


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1),
                     np.stack([z, z, o], -1)], -2)


def forward_kinematics(topo, offsets, angles, root_pos, yaw):
    """Joint positions from per-bone rotations.

    Parameters
    ----------
    offsets : (I, 3) rest bone vectors.
    angles : (T, I, 2) rotation of each bone about x then z, in its parent frame.
    root_pos : (T, 3) root joint positions.
    yaw : float, global rotation about the vertical axis.

    Every bone keeps its rest length exactly since only rotations act on it.
    """
    T, I = angles.shape[:2]
    world = np.zeros((T, I, 3, 3))
    pos = np.zeros((T, I, 3))
    base = _rot_y(np.full(T, float(yaw)))
    for j in topo.topological_order:
        p = topo.parent[j]
        if p == ROOT:
            world[:, j] = base
            pos[:, j] = root_pos
            continue
        local = _rot_z(angles[:, j, 1]) @ _rot_x(angles[:, j, 0])
        world[:, j] = world[:, p] @ local
        pos[:, j] = pos[:, p] + world[:, j] @ offsets[j]
    return pos


def _smooth_noise(rng, shape, scale, width=4.0):
    """Temporally correlated Gaussian noise along axis 0."""
    from .smoothing import _filter_shared_mask, gaussian_kernel
    k = int(2 * round(2 * width) + 1)
    raw = rng.standard_normal(shape)
    mask = np.ones(shape[0], dtype=bool)
    sm = _filter_shared_mask(raw[None], mask, gaussian_kernel(k, width))[0]
    return scale * sm / np.sqrt(np.sum(gaussian_kernel(k, width) ** 2))


def generate_synthetic_dataset(cfg: GeneratorConfig = None) -> Dataset:
    """Balanced synthetic dataset; the first ``test_fraction`` of every class is held out
    (80/20 by default).

    Both splits interleave the classes round-robin, so any prefix of
    ``test`` is class-balanced.
    """
    cfg = cfg or GeneratorConfig()
    topo = topology_by_name_checked(cfg.topology)
    offsets = default_bone_offsets(topo)
    if cfg.bone_lengths is not None:
        lengths = np.asarray(cfg.bone_lengths, dtype=np.float64)
        if lengths.shape != (topo.num_bones,):
            raise ConfigError(f"bone_lengths needs {topo.num_bones} entries")
        child = topo.bone_child
        offsets[child] *= (lengths / np.linalg.norm(offsets[child], axis=1))[:, None]
    classes = _class_trajectories(cfg, topo)
    if len(classes) != cfg.num_classes:
        raise ConfigError("class_params must define num_classes classes")
    T = cfg.num_frames
    t = np.arange(T) / T
    rng = np.random.default_rng(cfg.seed)
    per_class = []
    n_test = int(round(cfg.sequences_per_class * cfg.test_fraction))
    for c, motions in enumerate(classes):
        seqs = []
        for k in range(cfg.sequences_per_class):
            angles = cfg.posture_noise * rng.standard_normal((1, topo.num_joints, 2)) \
                * np.ones((T, 1, 1))
            angles = angles + _smooth_noise(rng, (T, topo.num_joints, 2), cfg.angle_noise)
            shift = rng.uniform(0, 1)
            for bone, axis, amp, freq, phase, off in motions:
                a = amp * (1.0 + cfg.amplitude_jitter * rng.uniform(-1, 1))
                f = freq * (1.0 + 0.1 * rng.uniform(-1, 1))
                angles[:, bone, axis] += off + a * np.sin(2 * np.pi * (f * t + shift) + phase)
            scale = 1.0 + cfg.scale_jitter * rng.uniform(-1, 1)
            root = np.array([0.0, 0.95, 3.0]) + rng.uniform(-0.1, 0.1, size=3)
            root_pos = root + _smooth_noise(rng, (T, 3), 0.01)
            if cfg.root_jitter > 0:
                root_pos = root_pos + cfg.root_jitter * rng.standard_normal((T, 3))
            yaw = rng.uniform(-cfg.yaw_range, cfg.yaw_range)
            coords = forward_kinematics(topo, scale * offsets, angles, root_pos, yaw)
            seqs.append(SkeletonSequence(coords, label=c, metadata={"class": c, "index": k}))
        per_class.append(seqs)
    test = [s[k] for k in range(n_test) for s in per_class]
    train = [s[k] for k in range(n_test, cfg.sequences_per_class) for s in per_class]
    names = [f"action{c}" for c in range(cfg.num_classes)]
    return Dataset(topo, train, test, names, cfg.to_dict())


# ---------------------------------------------------------------------------
# Frame-count normalization


def subsample_indices(num_frames: int, target: int) -> np.ndarray:
    """Uniform frame indices ``round(i * T / target)`` for ``T > target``."""
    i = np.arange(target)
    return np.floor(i * num_frames / target + 0.5).astype(np.int64)


def subsample_or_pad(seq: SkeletonSequence, target: int) -> SkeletonSequence:
    """Bring ``seq`` to exactly ``target`` frames.

    Longer sequences are uniformly subsampled; shorter ones get trailing
    all-zero padding frames whose mask is false.
    """
    if int(target) < 1:
        raise ContractError("target frame count must be at least 1")
    T = seq.num_frames
    if T == target:
        return seq.copy()
    if T > target:
        idx = subsample_indices(T, target)
        coords, mask = seq.coords[idx], seq.frame_mask[idx]
    else:
        coords = np.zeros((target, seq.num_joints, 3))
        coords[:T] = seq.coords
        mask = np.zeros(target, dtype=bool)
        mask[:T] = seq.frame_mask
    return SkeletonSequence(coords.copy(), mask.copy(), seq.label,
                            None if seq.actor_mask is None else seq.actor_mask.copy(),
                            dict(seq.metadata))


# ---------------------------------------------------------------------------
# Documents


def atomic_write_text(path, text: str):
    """Write ``text`` to ``path`` through a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(doc) -> str:
    return json.dumps(doc, allow_nan=False, separators=(",", ":")) + "\n"


def loads(text: str, what="document"):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed {what}: {exc.msg} at line {exc.lineno} column {exc.colno}") from exc
    if not isinstance(doc, dict):
        raise SchemaValidationError(f"{what} must be a JSON object")
    return doc


def _require(doc, key, types, where=""):
    name = f"{where}{key}"
    if key not in doc:
        raise SchemaValidationError("missing field", name)
    val = doc[key]
    if types is not None:
        if isinstance(val, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
            raise SchemaValidationError(f"expected {types}, got bool", name)
        if not isinstance(val, types):
            raise SchemaValidationError(f"expected {types}, got {type(val).__name__}", name)
    return val


def _check_version(doc, kind):
    v = _require(doc, "format_version", int)
    if v != FORMAT_VERSION:
        raise SchemaValidationError(f"unsupported version {v}", "format_version")
    k = doc.get("kind", kind)
    if k != kind:
        raise SchemaValidationError(f"expected kind {kind!r}, got {k!r}", "kind")


def _bool_list(val, n, name):
    if not isinstance(val, list) or len(val) != n or not all(isinstance(b, bool) for b in val):
        raise SchemaValidationError(f"expected {n} booleans", name)
    return np.array(val, dtype=bool)


def sequence_to_doc(seq: SkeletonSequence) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "sequence",
        "num_frames": seq.num_frames,
        "num_joints": seq.num_joints,
        "coords": seq.coords.tolist(),
        "frame_mask": seq.frame_mask.tolist(),
        "label": int(seq.label),
        "actor_mask": None if seq.actor_mask is None else seq.actor_mask.tolist(),
        "metadata": seq.metadata,
    }


def sequence_from_doc(doc) -> SkeletonSequence:
    _check_version(doc, "sequence")
    T = _require(doc, "num_frames", int)
    I = _require(doc, "num_joints", int)
    if T < 1 or I < 1:
        raise SchemaValidationError("must be positive", "num_frames" if T < 1 else "num_joints")
    coords = _require(doc, "coords", list)
    if len(coords) != T:
        raise SchemaValidationError(f"has {len(coords)} frames, num_frames is {T}", "coords")
    for t, frame in enumerate(coords):
        if not isinstance(frame, list) or len(frame) != I:
            raise SchemaValidationError(f"frame must list {I} joints", f"coords[{t}]")
        for i, joint in enumerate(frame):
            if (not isinstance(joint, list) or len(joint) != 3
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                               for v in joint)):
                raise SchemaValidationError("joint must be [x, y, z] numbers",
                                            f"coords[{t}][{i}]")
    arr = np.array(coords, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise SchemaValidationError("non-finite coordinate", "coords")
    mask = _bool_list(_require(doc, "frame_mask", list), T, "frame_mask")
    label = _require(doc, "label", int)
    actor = doc.get("actor_mask")
    actor = None if actor is None else _bool_list(actor, I, "actor_mask")
    meta = doc.get("metadata", {})
    if not isinstance(meta, dict):
        raise SchemaValidationError("expected object", "metadata")
    return SkeletonSequence(arr, mask, label, actor, meta)


def write_sequence(seq: SkeletonSequence, path):
    atomic_write_text(path, dumps(sequence_to_doc(seq)))


def read_sequence(path) -> SkeletonSequence:
    text = Path(path).read_text(encoding="utf-8")
    return sequence_from_doc(loads(text, "sequence"))


def topology_to_doc(topo):
    return {"name": topo.name, "parent": topo.parent.tolist()}


def topology_from_doc(doc, where="topology"):
    if not isinstance(doc, dict):
        raise SchemaValidationError("expected object", where)
    parent = _require(doc, "parent", list, where + ".")
    name = doc.get("name", "custom")
    try:
        return SkeletonTopology(np.array(parent, dtype=np.int64), name=name)
    except (ContractError, ValueError, TypeError) as exc:
        raise SchemaValidationError(str(exc), where + ".parent") from exc


def save_dataset(dataset: Dataset, directory):
    """Write one file per sequence plus ``manifest.json``."""
    directory = Path(directory)
    files = []
    k = 0
    for split, seqs in (("train", dataset.train), ("test", dataset.test)):
        for seq in seqs:
            rel = f"sequences/{k:06d}.json"
            write_sequence(seq, directory / rel)
            files.append({"path": rel, "split": split, "label": int(seq.label)})
            k += 1
    num_frames = (dataset.train or dataset.test)[0].num_frames if files else 0
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "manifest",
        "topology": topology_to_doc(dataset.topology),
        "num_classes": dataset.num_classes,
        "class_names": list(dataset.class_names),
        "num_frames": num_frames,
        "generator": dataset.generator,
        "files": files,
    }
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=1) + "\n")


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    path = directory / "manifest.json"
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise FormatError(f"no manifest.json in {directory}") from exc
    doc = loads(text, "manifest")
    _check_version(doc, "manifest")
    topo = topology_from_doc(_require(doc, "topology", dict))
    names = _require(doc, "class_names", list)
    files = _require(doc, "files", list)
    train, test = [], []
    for n, entry in enumerate(files):
        where = f"files[{n}]."
        if not isinstance(entry, dict):
            raise SchemaValidationError("expected object", f"files[{n}]")
        rel = _require(entry, "path", str, where)
        split = _require(entry, "split", str, where)
        if split not in ("train", "test"):
            raise SchemaValidationError(f"unknown split {split!r}", where + "split")
        seq = read_sequence(directory / rel)
        (train if split == "train" else test).append(seq)
    return Dataset(topo, train, test, [str(x) for x in names], doc.get("generator"))


# ---------------------------------------------------------------------------
# Model files


def _array_doc(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _array_from_doc(doc, name):
    if not isinstance(doc, dict):
        raise SchemaValidationError("expected {shape, data}", name)
    shape = _require(doc, "shape", list, name + ".")
    data = _require(doc, "data", list, name + ".")
    if int(np.prod(shape)) != len(data):
        raise SchemaValidationError(f"{len(data)} values do not fill shape {shape}", name)
    return np.array(data, dtype=np.float64).reshape(shape)


def model_to_doc(model) -> dict:
    from .model import LinearClassifier, ReferenceClassifier
    if isinstance(model, LinearClassifier):
        return {"format_version": FORMAT_VERSION, "kind": "linear_classifier",
                "input_shape": list(model.input_shape),
                "weights": _array_doc(model.weights), "bias": _array_doc(model.bias)}
    if not isinstance(model, ReferenceClassifier):
        raise ContractError(f"cannot serialize {type(model).__name__}")
    model_params = model.get_params()
    return {
        "format_version": FORMAT_VERSION,
        "kind": "reference_classifier",
        "activation": "tanh",
        "hyperparams": model_params,
        "n_classes": int(model.n_classes_),
        "n_frames": int(model.n_frames_),
        "n_joints": int(model.n_joints_),
        "layer_dims": [int(model.params_["W0"].shape[1])] +
                      [int(model.params_[f"W{i}"].shape[0]) for i in range(4)],
        "normalization": {
            "mean": _array_doc(model.mean_),
            "scale": _array_doc(model.scale_),
            "motion_scale": None if model.motion_scale_ is None else _array_doc(model.motion_scale_),
        },
        "layers": {k: _array_doc(model.params_[k]) for k in model.PARAM_NAMES},
        "held_out_accuracy": getattr(model, "held_out_accuracy_", None),
    }


def model_from_doc(doc):
    from .model import LinearClassifier, ReferenceClassifier
    kind = _require(doc, "kind", str)
    if kind == "linear_classifier":
        _check_version(doc, kind)
        return LinearClassifier(_array_from_doc(doc["weights"], "weights"),
                                _array_from_doc(doc["bias"], "bias"),
                                tuple(_require(doc, "input_shape", list)))
    _check_version(doc, "reference_classifier")
    if _require(doc, "activation", str) != "tanh":
        raise SchemaValidationError("only tanh is supported", "activation")
    hp = _require(doc, "hyperparams", dict)
    try:
        model = ReferenceClassifier(**hp)
    except TypeError as exc:
        raise SchemaValidationError(str(exc), "hyperparams") from exc
    model.n_classes_ = _require(doc, "n_classes", int)
    model.n_frames_ = _require(doc, "n_frames", int)
    model.n_joints_ = _require(doc, "n_joints", int)
    norm = _require(doc, "normalization", dict)
    model.mean_ = _array_from_doc(norm.get("mean"), "normalization.mean")
    model.scale_ = _array_from_doc(norm.get("scale"), "normalization.scale")
    ms = norm.get("motion_scale")
    model.motion_scale_ = None if ms is None else _array_from_doc(ms, "normalization.motion_scale")
    layers = _require(doc, "layers", dict)
    params = {}
    for k in ReferenceClassifier.PARAM_NAMES:
        if k not in layers:
            raise SchemaValidationError("missing layer", f"layers.{k}")
        params[k] = _array_from_doc(layers[k], f"layers.{k}")
    D = model.n_joints_ * 3 * (2 if model.use_motion else 1)
    expect = {"W0": (model.embed_dim, D), "W1": (model.hidden_dim, model.embed_dim),
              "W2": (model.hidden_dim, model.hidden_dim),
              "W3": (model.n_classes_, model.hidden_dim)}
    for k, shape in expect.items():
        if params[k].shape != shape:
            raise SchemaValidationError(f"shape {params[k].shape}, expected {shape}", f"layers.{k}")
    model.params_ = params
    model.held_out_accuracy_ = doc.get("held_out_accuracy")
    return model


def save_model(model, path):
    atomic_write_text(path, dumps(model_to_doc(model)))


def load_model(path):
    text = Path(path).read_text(encoding="utf-8")
    return model_from_doc(loads(text, "model"))
