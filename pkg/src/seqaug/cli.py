"""Command-line pipeline: preprocess, augment, evaluate, curve, project.

Exit codes: 0 success, 1 unexpected failure, 2 invalid input, 3 infeasible
target accuracy. Results go to stdout, logs to stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .curve import (HarnessConfig, InfeasibleTargetError, accuracy_harness, curve_document, fit_iplf,
                    interval_size_hints, load_curve, parse_sizes, project_sample_size, write_curve,
                    write_curve_plot)
from .data import (CountMatrix, PreprocessConfig, ValidationError, filter_markers, inverse_log2p1,
                   load_counts, load_groups, log2p1, normalize, subsample_pilot, write_counts, write_groups)
from .metrics import combine_sources, evaluate, load_clusters, write_embedding
from .models import DEFAULT_EPOCHS, FLOW_FAMILIES, parse_model_spec
from .offline import OfflineConfig, offline_augment
from .training import (CorruptModelError, ModelVersionError, TrainedGenerator, TrainingPolicy,
                       derive_seeds, fit_generator, load_generator, pretrain_finetune, save_generator)

logger = logging.getLogger("seqaug")


class UsageError(ValueError):
    pass


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _input_record(path) -> dict:
    return {"path": str(path), "sha256": file_sha256(path)}


def _write_json(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    return p


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _manifest(command: str, args: argparse.Namespace, **extra) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "out", "verbose")}
    return {"command": command, "version": __version__, "config": config, **extra}


def _read_matrix(path, groups_path=None) -> CountMatrix:
    _require_file(path, "counts")
    if groups_path is not None:
        _require_file(groups_path, "groups")
    return load_counts(path, groups_path)


def _policy(args, family: str, seed: int) -> TrainingPolicy:
    spec = args.epochs
    if spec == "fixed":
        spec = f"fixed:{DEFAULT_EPOCHS[family]}"
    return TrainingPolicy.from_string(spec, batch_fraction=args.batch_frac,
                                      learning_rate=args.lr, seed=seed)


def _write_training_log(log: list, path) -> None:
    keys = []
    for rec in log:
        keys += [k for k in rec if k not in keys]
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(keys) + "\n")
        for rec in log:
            fh.write("\t".join(repr(rec[k]) if isinstance(rec.get(k), float) else str(rec.get(k, ""))
                               for k in keys) + "\n")


def _train_model(args, pilot: CountMatrix, seed: int) -> TrainedGenerator:
    """Offline augmentation (if any) and model training on the raw pilot."""
    family, config = parse_model_spec(
        args.model, conditional=pilot.groups is not None and args.model.split(":")[0] in FLOW_FAMILIES)
    if family == "cvae" and pilot.groups is None:
        raise UsageError("cvae needs --groups")
    data_seed, train_seed = derive_seeds(seed, 2)
    policy = _policy(args, family, train_seed)
    data = log2p1(pilot)
    data = offline_augment(data, OfflineConfig.from_string(args.offline), policy, data_seed)
    if getattr(args, "pretrain", None):
        pre = log2p1(_read_matrix(args.pretrain, args.pretrain_groups))
        pre = pre.reorder_markers(data.marker_ids)
        pre_policy = TrainingPolicy(epochs=args.pretrain_epochs, batch_fraction=0.1,
                                    learning_rate=args.lr, seed=train_seed)
        return pretrain_finetune(pre, data, family, config, policy, pre_policy)
    return fit_generator(data, family, config, policy)


# ------------------------------------------------------------- commands

def cmd_preprocess(args) -> int:
    m = _read_matrix(args.counts, args.groups)
    before = m.n_markers
    if args.n_per_group is not None:
        m = subsample_pilot(m, args.n_per_group, args.seed)
    cfg = PreprocessConfig(args.normalize, args.filter_mean, args.filter_sd)
    lib = m.counts.sum(axis=0)
    m = filter_markers(normalize(m, cfg.normalization), cfg)
    out = _out_dir(args.out)
    write_counts(m, out / "pilot.tsv")
    if m.groups is not None:
        write_groups(m, out / "pilot_groups.tsv")
    inputs = {"counts": _input_record(args.counts)}
    if args.groups:
        inputs["groups"] = _input_record(args.groups)
    _write_json(_manifest("preprocess", args, inputs=inputs, markers_before=before,
                          markers_after=m.n_markers, samples=list(m.sample_ids),
                          library_sizes={s: float(v) for s, v in zip(m.sample_ids, lib)},
                          thresholds={"mean": args.filter_mean, "sd": args.filter_sd},
                          output_fingerprint=m.fingerprint()),
                out / "manifest.json")
    print(out / "pilot.tsv")
    return 0


def _allocate(n: int, pilot: CountMatrix) -> list[str]:
    """Labels for n samples in proportion to the pilot's group sizes (largest remainder)."""
    labels = pilot.labels
    levels = pilot.group_levels
    share = np.array([labels.count(g) for g in levels], dtype=float) / len(labels) * n
    counts = np.floor(share).astype(int)
    for i in np.argsort(-(share - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return [g for g, c in zip(levels, counts) for _ in range(c)]


def cmd_augment(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be positive")
    if args.replicates < 1:
        raise UsageError("--replicates must be positive")
    pilot = _read_matrix(args.pilot, args.groups)
    g = _train_model(args, pilot, args.seed)
    out = _out_dir(args.out)
    save_generator(g, out / "model.zip")
    _write_training_log(g.training_log, out / "training_log.tsv")
    outputs = []
    for r, rseed in enumerate(derive_seeds(args.seed + 1, args.replicates), start=1):
        if g.conditional:
            labels = ([lv for lv in g.group_levels for _ in range(args.n)] if args.per_group
                      else _allocate(args.n, pilot))
            gen = g.generate(len(labels), labels, rseed)
        else:
            gen = g.generate(args.n, seed=rseed)
        counts = inverse_log2p1(gen)
        name = f"generated_{r:03d}.tsv"
        write_counts(counts, out / name)
        if counts.groups is not None:
            write_groups(counts, out / f"generated_{r:03d}_groups.tsv")
        outputs.append(name)
    inputs = {"pilot": _input_record(args.pilot)}
    if args.groups:
        inputs["groups"] = _input_record(args.groups)
    _write_json(_manifest("augment", args, inputs=inputs, family=g.family, model_config=g.config,
                          policy=g.policy, epochs_trained=len(g.training_log), outputs=outputs,
                          data_fingerprint=pilot.fingerprint()),
                out / "manifest.json")
    for name in outputs:
        print(out / name)
    return 0


def cmd_evaluate(args) -> int:
    gen = _read_matrix(args.generated, args.generated_groups)
    ref = _read_matrix(args.reference, args.reference_groups)
    if set(gen.marker_ids) != set(ref.marker_ids):
        raise UsageError("generated and reference files have different markers")
    clusters = None
    if args.clusters and not Path(args.clusters).is_file():
        logger.warning("clusters file %s not found; ccc_pcc omitted", args.clusters)
        clusters = {}
    elif args.clusters:
        clusters = load_clusters(args.clusters)
    report = evaluate(gen, ref, clusters, two_group=args.two_group)
    out = _out_dir(args.out)
    report.to_json(out / "report.json")
    combined, sources = combine_sources(gen.reorder_markers(ref.marker_ids), ref)
    write_embedding(combined, sources, out / "embed.tsv")
    inputs = {"generated": _input_record(args.generated), "reference": _input_record(args.reference)}
    _write_json(_manifest("evaluate", args, inputs=inputs), out / "manifest.json")
    sys.stdout.write(report.to_json())
    return 0


def cmd_curve(args) -> int:
    pilot = _read_matrix(args.pilot, args.groups)
    if pilot.groups is None:
        raise UsageError("curve needs two-group labels (--groups)")
    out = _out_dir(args.out)
    model_path = Path(args.model)
    if args.model == "none":
        source = pilot
    elif model_path.is_file():
        source = load_generator(model_path)
    else:
        source = _train_model(args, pilot, args.seed)
        save_generator(source, out / "model.zip")
    cfg = HarnessConfig(parse_sizes(args.sizes), args.repeats, args.folds, args.classifier,
                        per_group=not args.total_sizes)
    harness = accuracy_harness(source, cfg, seed=args.seed)
    fit = fit_iplf(harness.sizes, harness.mean_accuracy, harness.repeats)
    doc = curve_document(fit, harness)
    write_curve(doc, out / "curve.json")
    write_curve_plot(fit, out / "curve_plot.tsv")
    _write_json(_manifest("curve", args, inputs={"pilot": _input_record(args.pilot)}),
                out / "manifest.json")
    p = fit.params
    print(f"a={p.a:.6g} b={p.b:.6g} c={p.c:.6g}")
    return 0


def cmd_project(args) -> int:
    fit = load_curve(_require_file(args.curve, "curve"))
    n_star = project_sample_size(fit, args.target_accuracy)
    lo_hint, hi_hint = interval_size_hints(fit, args.target_accuracy)

    def fmt(v):
        return "inf" if math.isinf(v) else str(int(v))

    print(f"{n_star} {fmt(lo_hint)} {fmt(hi_hint)}")
    return 0


# --------------------------------------------------------------- parser

def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--offline", default="none", help="none | gaussian:R:SD | ae:T")
    p.add_argument("--epochs", default="fixed",
                   help="fixed (family default) | fixed:N | early | early:PATIENCE")
    p.add_argument("--batch-frac", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=0.0005)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqaug", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file with per-command default values")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="normalize and filter a counts matrix")
    p.add_argument("--counts", required=True)
    p.add_argument("--groups")
    p.add_argument("--normalize", choices=["none", "tc", "tmm", "uq"], default="none")
    p.add_argument("--filter-mean", type=float)
    p.add_argument("--filter-sd", type=float)
    p.add_argument("--n-per-group", type=int, help="draw a pilot subsample first")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("augment", help="train a generator and write generated counts")
    p.add_argument("--pilot", required=True)
    p.add_argument("--groups")
    p.add_argument("--model", required=True, help="vae:1-10 | cvae:1-100 | gan | wgan | wgangp | realnvp | glow | maf")
    _add_training_flags(p)
    p.add_argument("--n", type=int, required=True, help="samples per generated dataset")
    p.add_argument("--per-group", action="store_true", help="--n samples for every group")
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--pretrain", help="counts file for pre-training (transfer learning)")
    p.add_argument("--pretrain-groups")
    p.add_argument("--pretrain-epochs", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("evaluate", help="score generated data against reference data")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--generated-groups")
    p.add_argument("--reference-groups")
    p.add_argument("--clusters", help="cluster_id<TAB>marker_id file")
    p.add_argument("--two-group", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("curve", help="accuracy harness and learning-curve fit")
    p.add_argument("--pilot", required=True)
    p.add_argument("--groups")
    p.add_argument("--model", required=True, help="model spec, saved model file, or 'none' to subsample the pilot")
    _add_training_flags(p)
    p.add_argument("--sizes", default="10:50:10", help="start:stop:step or a comma list")
    p.add_argument("--classifier", default="knn:20")
    p.add_argument("--repeats", type=int, default=30)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--total-sizes", action="store_true", help="sizes are totals, not per group")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("project", help="sample size needed for a target accuracy")
    p.add_argument("--curve", required=True)
    p.add_argument("--target-accuracy", type=float, required=True)
    p.set_defaults(func=cmd_project)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    doc = json.loads(_require_file(known.config, "config").read_text(encoding="utf-8"))
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sp in subparsers.choices.items():
        section = doc.get(name, {})
        sp.set_defaults(**{k.replace("-", "_"): v for k, v in section.items()})
        # config values satisfy required flags
        for action in sp._actions:
            if action.dest in {k.replace("-", "_") for k in section}:
                action.required = False


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except InfeasibleTargetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (UsageError, ValidationError, CorruptModelError, ModelVersionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        logger.exception("unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
