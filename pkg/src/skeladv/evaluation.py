"""Batch evaluation of attacks and defenses, reports and SVG stills."""

import json
import math
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .attack import AttackConfig, AttackResult, run_attacks
from .dataio import FORMAT_VERSION, _check_version, _require, atomic_write_text, loads
from .exceptions import ContractError, FormatError
from .model import forward
from .skeleton import SkeletonSequence, SkeletonTopology
from .smoothing import SmoothingConfig, certify, smoothed_predict

AGGREGATE_KEYS = ("success_rate", "delta_bone_rel_mean", "delta_joint_mean",
                  "delta_kinetic_rel_mean", "l2_mean")
_ROW_COLUMNS = {"delta_bone_rel_mean": "delta_bone_rel", "delta_joint_mean": "delta_joint",
                "delta_kinetic_rel_mean": "delta_kinetic_rel", "l2_mean": "l2"}


def environment_stamp(seed=None) -> dict:
    import sklearn

    from . import __version__
    return {"seed": seed, "python": platform.python_version(), "numpy": np.__version__,
            "scikit-learn": sklearn.__version__, "skeladv": __version__}


def _mean(values):
    return float(math.fsum(values) / len(values))


def aggregate(rows: Sequence[dict]) -> dict:
    """Success rate, metric means and mean max-residuals of report rows.

    Every value is ``None`` for an empty row list.
    """
    keys = AGGREGATE_KEYS + ("max_bone_mean", "max_joint_mean", "max_speed_mean")
    if not rows:
        return {k: None for k in keys} | {"count": 0}
    out = {"count": len(rows), "success_rate": _mean([1.0 if r["success"] else 0.0 for r in rows])}
    for k, col in _ROW_COLUMNS.items():
        out[k] = _mean([r[col] for r in rows])
    for f in ("bone", "joint", "speed"):
        out[f"max_{f}_mean"] = _mean([r[f"max_{f}"] for r in rows])
    return out


@dataclass
class EvaluationReport:
    """Per-sequence rows, their aggregates, the configuration and an
    environment stamp. ``extra`` holds optional sections such as defense or
    certification summaries."""

    rows: List[dict]
    aggregates: dict
    config: dict
    environment: dict
    kind: str = "attack"
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {"format_version": FORMAT_VERSION, "kind": "report", "report_kind": self.kind,
                "config": self.config, "environment": self.environment,
                "aggregates": self.aggregates, "rows": self.rows, "extra": self.extra}

    @classmethod
    def from_dict(cls, doc):
        _check_version(doc, "report")
        rows = _require(doc, "rows", list)
        return cls(rows, _require(doc, "aggregates", dict), _require(doc, "config", dict),
                   _require(doc, "environment", dict), doc.get("report_kind", "attack"),
                   doc.get("extra", {}))

    def table(self) -> str:
        return format_table(self)


def save_report(report: EvaluationReport, path):
    atomic_write_text(path, json.dumps(report.to_dict(), indent=1, allow_nan=False) + "\n")


def load_report(path) -> EvaluationReport:
    return EvaluationReport.from_dict(loads(Path(path).read_text(encoding="utf-8"), "report"))


def format_table(report: EvaluationReport) -> str:
    """Human-readable rendering: one line per row, then the aggregates."""
    cols = ("success", "predicted", "delta_bone_rel", "delta_joint", "delta_kinetic_rel", "l2",
            "iterations")
    lines = ["  #  " + "  ".join(f"{c:>17s}" for c in cols)]
    for i, r in enumerate(report.rows):
        cells = []
        for c in cols:
            v = r.get(c)
            cells.append(f"{v!s:>17s}" if isinstance(v, (bool, int)) or v is None else f"{v:17.6f}")
        lines.append(f"{i:3d}  " + "  ".join(cells))
    lines.append("")
    for k, v in report.aggregates.items():
        lines.append(f"{k:>24s}: {'undefined' if v is None else format(v, '.6g')}")
    for section, values in report.extra.items():
        if isinstance(values, dict):
            lines.append(f"[{section}]")
            for k, v in values.items():
                if not isinstance(v, (list, dict)):
                    lines.append(f"{k:>24s}: {v}")
    return "\n".join(lines) + "\n"


def _sequences(data, split="test"):
    if hasattr(data, split):
        return list(getattr(data, split))
    return list(data)


def evaluate_attack(model, data, cfg: AttackConfig = None, method="admm", targets=None,
                    limit=None, jobs=1):
    """Attack every test sequence of ``data`` and aggregate the metrics.

    ``data`` is a dataset (its ``test`` split is used) or a list of
    sequences. Returns ``(report, results)``.
    """
    cfg = cfg or AttackConfig()
    seqs = _sequences(data)
    if limit is not None:
        seqs = seqs[:int(limit)]
        targets = None if targets is None else list(targets)[:int(limit)]
    results = run_attacks(model, seqs, cfg, method, targets, jobs) if seqs else []
    rows = [r.summary() for r in results]
    report = EvaluationReport(rows, aggregate(rows), {"method": method, **cfg.to_dict()},
                              environment_stamp(cfg.seed))
    return report, results


def _goal_reached(result: AttackResult, model):
    z = forward(model, result.adversarial)
    pred = int(np.argmax(z))
    if result.target_label is not None:
        return pred == result.target_label
    return pred != result.adversarial.label


def evaluate_transfer(source_results: Sequence[AttackResult], target_model) -> Optional[float]:
    """Fraction of adversarial sequences that also fool ``target_model``.

    Each result keeps its own goal: a different label when untargeted, its
    target label when targeted. ``None`` for an empty list.
    """
    if not source_results:
        return None
    n_cls = target_model.n_classes_
    for r in source_results:
        shape = r.adversarial.coords.shape[:2]
        if shape != (target_model.n_frames_, target_model.n_joints_):
            raise ContractError(f"target model expects {target_model.n_frames_} x "
                                f"{target_model.n_joints_}, got {shape}")
        labels = [r.adversarial.label] + ([] if r.target_label is None else [r.target_label])
        if max(labels) >= n_cls:
            raise ContractError(f"label {max(labels)} outside the target model's {n_cls} classes")
    return _mean([1.0 if _goal_reached(r, target_model) else 0.0 for r in source_results])


def evaluate_defense(model, results: Sequence[AttackResult], cfg: SmoothingConfig = None,
                     clean: Sequence[SkeletonSequence] = None) -> dict:
    """Undefended and smoothed accuracy on adversarial (and clean) sequences.

    Adversarial sequence ``i`` draws noise from substream ``(0, i)`` and
    clean sequence ``i`` from ``(1, i)``.
    """
    cfg = cfg or SmoothingConfig()
    out = {"count": len(results)}

    def acc(seqs, part):
        if not seqs:
            return None, None
        plain = _mean([1.0 if int(np.argmax(forward(model, s))) == s.label else 0.0 for s in seqs])
        smooth = _mean([1.0 if smoothed_predict(model, s, cfg, key=(part, i))[0] == s.label
                        else 0.0 for i, s in enumerate(seqs)])
        return plain, smooth

    out["adversarial_accuracy"], out["adversarial_smoothed_accuracy"] = \
        acc([r.adversarial for r in results], 0)
    if clean is not None:
        out["clean_count"] = len(clean)
        out["clean_accuracy"], out["clean_smoothed_accuracy"] = acc(list(clean), 1)
    out["config"] = dict(sigma=cfg.sigma, num_samples=cfg.num_samples,
                         kernel_size=cfg.kernel_size, kernel_sigma=cfg.kernel_sigma,
                         seed=cfg.seed)
    return out


def certified_curve(radii_out: Sequence[float], grid: Sequence[float]) -> List[float]:
    """Fraction of certificates with radius at least ``r`` for each ``r``.

    Abstentions and wrong predictions carry radius ``-1`` and never count.
    """
    radii_out = np.asarray(radii_out, dtype=np.float64)
    if radii_out.size == 0:
        return [None for _ in grid]
    return [float(np.mean(radii_out >= r)) for r in grid]


def evaluate_certified(model, data, sigmas=(0.01, 0.02), radii=None, num_samples=1000,
                       alpha=0.05, kernel_size=5, kernel_sigma=1.0, seed=0, limit=None):
    """Certified-accuracy curves, one per noise level.

    Returns a dictionary ``{"radii": [...], "curves": {sigma: [...]},
    "certificates": {sigma: [cert dicts]}}``. Keys of ``curves`` are the
    ``repr`` of each sigma.
    """
    seqs = _sequences(data)
    if limit is not None:
        seqs = seqs[:int(limit)]
    if radii is None:
        radii = [round(0.005 * k, 3) for k in range(21)]
    radii = [float(r) for r in radii]
    if any(b < a for a, b in zip(radii, radii[1:])):
        raise ContractError("radius grid must be nondecreasing")
    out = {"radii": radii, "num_samples": int(num_samples), "alpha": alpha,
           "kernel_size": kernel_size, "curves": {}, "certificates": {}}
    for sigma in sigmas:
        cfg = SmoothingConfig(float(sigma), int(num_samples), kernel_size, kernel_sigma, alpha,
                              seed)
        certs = [certify(model, s, cfg, s.label, key=(i,)) for i, s in enumerate(seqs)]
        out["curves"][repr(float(sigma))] = certified_curve([c.radius for c in certs], radii)
        out["certificates"][repr(float(sigma))] = [c.to_dict() for c in certs]
    return out


# ---------------------------------------------------------------------------
# Rendering


def _project(coords, view):
    axes = {"xy": (0, 1), "zy": (2, 1), "xz": (0, 2)}
    if view not in axes:
        raise ContractError(f"unknown view {view!r}; choose from {sorted(axes)}")
    h, v = axes[view]
    return coords[..., h], coords[..., v]


def render_frames(seq: SkeletonSequence, topo: SkeletonTopology, frames, path=None, adv=None,
                  view="xy", size=240) -> str:
    """Orthographic SVG stills of the chosen frames, side by side.

    The original is drawn in black and the adversarial overlay in red dashes.
    Returns the SVG text and writes it to ``path`` when given. Output depends
    only on the inputs.
    """
    frames = [int(f) for f in frames]
    T = seq.num_frames
    for f in frames:
        if not 0 <= f < T:
            raise ContractError(f"frame index {f} out of range [0, {T})")
    if adv is not None and adv.coords.shape != seq.coords.shape:
        raise ContractError("adversarial sequence shape differs from the original")
    layers = [seq.coords] + ([] if adv is None else [adv.coords])
    hs, vs = zip(*(_project(c[frames], view) for c in layers))
    hmin = min(h.min() for h in hs)
    hmax = max(h.max() for h in hs)
    vmin = min(v.min() for v in vs)
    vmax = max(v.max() for v in vs)
    span = max(hmax - hmin, vmax - vmin, 1e-9)
    pad = 10.0
    scale = (size - 2 * pad) / span
    width = size * len(frames)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{size}" '
             f'viewBox="0 0 {width} {size}">',
             f'<rect width="{width}" height="{size}" fill="white"/>']
    styles = ['stroke="black" stroke-width="2"',
              'stroke="red" stroke-width="1.5" stroke-dasharray="4 2"']
    for k, f in enumerate(frames):
        ox = k * size
        parts.append(f'<g id="frame-{f}">')
        parts.append(f'<text x="{ox + 4}" y="14" font-size="12">t={f}</text>')
        for li, (h, v) in enumerate(zip(hs, vs)):
            px = ox + pad + (h[k] - hmin) * scale
            py = size - pad - (v[k] - vmin) * scale
            for c, p in zip(topo.bone_child, topo.bone_parent):
                parts.append(f'<line x1="{px[p]:.3f}" y1="{py[p]:.3f}" x2="{px[c]:.3f}" '
                             f'y2="{py[c]:.3f}" {styles[li]}/>')
        parts.append("</g>")
    parts.append("</svg>")
    svg = "\n".join(parts) + "\n"
    if path is not None:
        try:
            atomic_write_text(path, svg)
        except OSError as exc:
            raise FormatError(f"cannot write {path}: {exc}") from exc
    return svg
