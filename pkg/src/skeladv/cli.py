"""Command-line interface: ``skeladv <subcommand> [flags]``.

Exit status is 0 on success, 1 on domain errors (bad data, failed
training, diverged attack) and 2 on usage errors. Every output file is
written through a temporary file and renamed, so failures leave no partial
files. Identical arguments and seed give byte-identical outputs for any
``--jobs``.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .attack import ADMM_ADAM, AdamConfig, AttackConfig
from .constraints import ConstraintConfig
from .dataio import (Dataset, GeneratorConfig, atomic_write_text, generate_synthetic_dataset,
                     load_dataset, load_model, read_sequence, save_dataset, save_model)
from .evaluation import (environment_stamp, evaluate_attack, evaluate_certified, evaluate_defense,
                         evaluate_transfer, format_table, render_frames, save_report)
from .exceptions import SkeladvError, TrainingError
from .model import ReferenceClassifier, accuracy
from .smoothing import SmoothingConfig

SEED_ENV = "SKELADV_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _float_list(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _common(p):
    p.add_argument("--config", help="JSON file whose keys set flag defaults")
    p.add_argument("--seed", type=int, default=None,
                   help=f"random seed (falls back to ${SEED_ENV}, then 0)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _jobs(p):
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                   help="worker processes for batch attacks")


def _smoothing_flags(p, samples, sigma_list=False):
    if sigma_list:
        p.add_argument("--sigma", type=_float_list, default=[0.02],
                       help="noise level(s), comma separated")
    else:
        p.add_argument("--sigma", type=float, default=0.02)
    p.add_argument("--samples", type=int, default=samples)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--kernel", type=int, default=5, help="temporal filter length (odd)")
    p.add_argument("--kernel-sigma", type=float, default=1.0)


def build_parser():
    parser = _Parser(prog="skeladv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=600)
    p.add_argument("--frames", type=int, default=48)
    p.add_argument("--topology", default="ntu25")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the reference classifier")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--no-motion", action="store_true", help="drop frame-difference features")
    p.add_argument("--noise-sigma", type=float, default=0.0,
                   help="train on noisy, filtered copies")
    p.add_argument("--noise-kernel", type=int, default=1)

    p = sub.add_parser("attack", help="attack the test split of a dataset")
    _common(p)
    _jobs(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=("admm", "cw"), default="admm")
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--eps-bone", type=float, default=0.03)
    p.add_argument("--eps-joint", type=float, default=0.2)
    p.add_argument("--eps-speed", type=float, default=0.1)
    p.add_argument("--conf", type=float, default=1.0)
    p.add_argument("--c", type=float, default=1.0, help="loss weight of the C&W baseline")
    p.add_argument("--outer-iters", type=int, default=25)
    p.add_argument("--inner-steps", type=int, default=20)
    p.add_argument("--lr", type=float, default=None,
                   help=f"Adam step size (default {ADMM_ADAM.lr} for admm, {AdamConfig.lr} for cw)")
    p.add_argument("--lr-decay", type=float, default=None,
                   help=f"step-size factor per outer iteration of admm (default {ADMM_ADAM.decay})")
    p.add_argument("--targeted", action="store_true")
    p.add_argument("--target", default=None,
                   help="target label, or 'random' for a seeded random target per sequence")
    p.add_argument("--loss", choices=("margin", "cross_entropy"), default="margin",
                   help="targeted objective")
    p.add_argument("--limit", type=int, default=None, help="attack only the first N sequences")

    p = sub.add_parser("defend", help="smoothed inference on adversarial sequences")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="output directory of 'attack'")
    p.add_argument("--clean", default=None, help="dataset whose test split is also scored")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=None)
    _smoothing_flags(p, 50)

    p = sub.add_parser("certify", help="certified-accuracy curves")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--radii", type=_float_list, default=None)
    p.add_argument("--limit", type=int, default=None)
    _smoothing_flags(p, 1000, sigma_list=True)

    p = sub.add_parser("evaluate", help="accuracy, optional smoothing and transfer")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--adversarial", default=None,
                   help="output directory of 'attack' to measure transfer onto --model")
    p.add_argument("--smoothed", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=None)
    _smoothing_flags(p, 50)

    p = sub.add_parser("render", help="SVG stills of a sequence")
    _common(p)
    p.add_argument("--data", required=True, help="sequence file or dataset directory")
    p.add_argument("--index", type=int, default=0, help="test-split index for a dataset")
    p.add_argument("--adv", default=None, help="adversarial sequence file or attack directory")
    p.add_argument("--frames", type=_int_list, default=[0])
    p.add_argument("--view", choices=("xy", "zy", "xz"), default="xy")
    p.add_argument("--out", required=True)
    return parser


def _apply_config(parser, argv):
    """Parse twice: flags from ``--config`` become defaults, argv overrides."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    defaults = {}
    for key, value in doc.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            raise UsageError(f"unknown option in config file: {key}")
        defaults[dest] = value
    sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    for a in sub._actions:
        if a.dest in defaults and a.type is not None and isinstance(getattr(args, a.dest), str):
            setattr(args, a.dest, a.type(getattr(args, a.dest)))
    return args


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from exc


def _log(args, msg):
    if args.verbose:
        print(msg, file=sys.stderr)


def _write_json(path, doc):
    atomic_write_text(path, json.dumps(doc, indent=1, allow_nan=False) + "\n")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(args, seed):
    cfg = GeneratorConfig(num_classes=args.classes, sequences_per_class=args.per_class,
                          num_frames=args.frames, topology=args.topology, seed=seed)
    ds = generate_synthetic_dataset(cfg)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.train)} train and {len(ds.test)} test sequences to {args.out}")


def cmd_train(args, seed):
    ds = load_dataset(args.data)
    if not ds.train:
        raise TrainingError("dataset has no training sequences")
    model = ReferenceClassifier(embed_dim=args.embed_dim, hidden_dim=args.hidden_dim,
                                n_classes=ds.num_classes, epochs=args.epochs, lr=args.lr,
                                batch_size=args.batch_size, use_motion=not args.no_motion,
                                noise_sigma=args.noise_sigma,
                                noise_kernel_size=args.noise_kernel, random_state=seed)
    model.fit(ds.train)
    model.held_out_accuracy_ = accuracy(model, ds.test) if ds.test else None
    save_model(model, args.out)
    acc = model.held_out_accuracy_
    print(f"held-out accuracy: {'n/a' if acc is None else format(acc, '.4f')}")


def _attack_config(args, seed, topo):
    if args.targeted and args.target is None:
        raise UsageError("--targeted requires --target (a label or 'random')")
    if args.target is not None and not args.targeted:
        raise UsageError("--target requires --targeted")
    if args.targeted and args.method == "cw" and args.loss == "cross_entropy":
        raise UsageError("the C&W baseline uses the margin loss")
    mode = "untargeted_margin"
    if args.targeted:
        mode = "targeted_cross_entropy" if args.loss == "cross_entropy" else "targeted_margin"
    if args.method == "cw" and args.lr_decay is not None:
        raise UsageError("--lr-decay applies to the admm method only")
    adam = ADMM_ADAM.replace_fields(lr=args.lr, decay=args.lr_decay)
    cw_adam = AdamConfig().replace_fields(lr=args.lr)
    return AttackConfig(beta=args.beta, outer_iters=args.outer_iters, inner_steps=args.inner_steps,
                        adam=adam, cw_adam=cw_adam, mode=mode,
                        conf=args.conf,
                        constraints=ConstraintConfig(args.eps_bone, args.eps_joint, args.eps_speed),
                        topology=topo, seed=seed, cw_c=args.c)


def _targets(args, seqs, n_classes, seed):
    if not args.targeted:
        return None
    if args.target == "random":
        rng = np.random.default_rng([seed, 7])
        return [int((s.label + rng.integers(1, n_classes)) % n_classes) for s in seqs]
    try:
        t = int(args.target)
    except ValueError as exc:
        raise UsageError(f"--target must be an integer or 'random', got {args.target!r}") from exc
    if not 0 <= t < n_classes:
        raise UsageError(f"--target {t} outside [0, {n_classes - 1}]")
    return [t] * len(seqs)


def cmd_attack(args, seed):
    model = load_model(args.model)
    ds = load_dataset(args.data)
    seqs = ds.test if args.limit is None else ds.test[:args.limit]
    targets = _targets(args, seqs, ds.num_classes, seed)
    cfg = _attack_config(args, seed, ds.topology)
    if targets is not None:
        keep = [i for i, (s, t) in enumerate(zip(seqs, targets)) if s.label != t]
        seqs, targets = [seqs[i] for i in keep], [targets[i] for i in keep]
    report, results = evaluate_attack(model, seqs, cfg, args.method, targets, jobs=args.jobs)
    report.environment = environment_stamp(seed)
    out = Path(args.out)
    adv = []
    for i, r in enumerate(results):
        s = r.adversarial.copy()
        s.metadata = dict(s.metadata, attack_index=i, success=bool(r.success),
                          target_label=r.target_label)
        adv.append(s)
    save_dataset(Dataset(ds.topology, [], adv, ds.class_names), out / "adversarial")
    save_report(report, out / "report.json")
    atomic_write_text(out / "report.txt", format_table(report))
    agg = report.aggregates
    rate = agg["success_rate"]
    print(f"attacked {agg['count']} sequences, success rate "
          f"{'undefined' if rate is None else format(rate, '.4f')}")


def _adversarial_results(path):
    """Rebuild minimal attack results from an 'attack' output directory."""
    from .attack import AttackResult, AttackTrace
    from .metrics import AttackMetrics
    ds = load_dataset(Path(path) / "adversarial" if (Path(path) / "adversarial").exists()
                      else path)
    out = []
    for s in ds.test:
        t = s.metadata.get("target_label")
        out.append(AttackResult(s, bool(s.metadata.get("success", False)), -1,
                                AttackMetrics(0.0, 0.0, 0.0, 0.0), AttackTrace(), 0, 0.0, {},
                                target_label=t))
    return ds, out


def _smoothing_config(args, seed, sigma=None):
    return SmoothingConfig(sigma=args.sigma if sigma is None else sigma,
                           num_samples=args.samples, kernel_size=args.kernel,
                           kernel_sigma=args.kernel_sigma, alpha=args.alpha, seed=seed)


def cmd_defend(args, seed):
    model = load_model(args.model)
    _, results = _adversarial_results(args.data)
    if args.limit is not None:
        results = results[:args.limit]
    clean = None
    if args.clean is not None:
        clean = load_dataset(args.clean).test
        clean = clean if args.limit is None else clean[:args.limit]
    cfg = _smoothing_config(args, seed)
    summary = evaluate_defense(model, results, cfg, clean)
    doc = {"format_version": 1, "kind": "defense", "environment": environment_stamp(seed),
           **summary}
    _write_json(args.out, doc)
    print(f"undefended accuracy {summary['adversarial_accuracy']}, "
          f"smoothed {summary['adversarial_smoothed_accuracy']}")


def cmd_certify(args, seed):
    model = load_model(args.model)
    ds = load_dataset(args.data)
    curves = evaluate_certified(model, ds.test, args.sigma, args.radii, args.samples,
                                args.alpha, args.kernel, args.kernel_sigma, seed, args.limit)
    out = Path(args.out)
    doc = {"format_version": 1, "kind": "certification", "environment": environment_stamp(seed),
           **curves}
    _write_json(out / "certification.json", doc)
    lines = ["radius  " + "  ".join(f"sigma={s:>8s}" for s in curves["curves"])]
    for k, r in enumerate(curves["radii"]):
        vals = "  ".join(f"{'n/a' if c[k] is None else format(c[k], '.4f'):>14s}"
                         for c in curves["curves"].values())
        lines.append(f"{r:6.3f}  {vals}")
    atomic_write_text(out / "certification.txt", "\n".join(lines) + "\n")
    print(lines[0])
    print(lines[1])


def cmd_evaluate(args, seed):
    model = load_model(args.model)
    ds = load_dataset(args.data)
    seqs = ds.test if args.limit is None else ds.test[:args.limit]
    doc = {"format_version": 1, "kind": "evaluation", "environment": environment_stamp(seed),
           "count": len(seqs), "accuracy": accuracy(model, seqs) if seqs else None}
    if args.smoothed:
        d = evaluate_defense(model, [], _smoothing_config(args, seed), seqs)
        doc["smoothed_accuracy"] = d.get("clean_smoothed_accuracy")
    if args.adversarial:
        _, results = _adversarial_results(args.adversarial)
        doc["transfer_rate"] = evaluate_transfer(results, model)
        doc["transfer_count"] = len(results)
    _write_json(args.out, doc)
    print(json.dumps({k: v for k, v in doc.items() if k != "environment"}))


def cmd_render(args, seed):
    path = Path(args.data)
    if path.is_dir():
        ds = load_dataset(path)
        split = ds.test or ds.train
        if not 0 <= args.index < len(split):
            raise UsageError(f"--index {args.index} outside [0, {len(split) - 1}]")
        seq, topo = split[args.index], ds.topology
    else:
        seq = read_sequence(path)
        from .skeleton import ntu25, topology_by_name
        topo = ntu25() if seq.num_joints == 25 else topology_by_name(f"chain{seq.num_joints}")
    adv = None
    if args.adv:
        ap = Path(args.adv)
        if ap.is_dir():
            ads, _ = _adversarial_results(ap)
            adv = ads.test[args.index]
        else:
            adv = read_sequence(ap)
    render_frames(seq, topo, args.frames, args.out, adv=adv, view=args.view)
    print(f"wrote {args.out}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "attack": cmd_attack,
            "defend": cmd_defend, "certify": cmd_certify, "evaluate": cmd_evaluate,
            "render": cmd_render}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        seed = _seed(args)
        COMMANDS[args.command](args, seed)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except SystemExit as exc:
        # --help
        return int(exc.code or 0)
    except (SkeladvError, ValueError, OSError) as exc:
        print(f"skeladv: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
