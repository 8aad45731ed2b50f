"""advdef command line: one subcommand per pipeline phase plus an
end-to-end reproduction command.

Exit codes: 0 success, 2 config error, 3 missing dependency/phase,
4 runtime failure. Every run directory is keyed by the config hash and
carries a manifest; completed phases are skipped unless --force.
"""

import argparse
import logging
import os
import sys
import time

import numpy as np
import yaml

from .. import __version__
from ..attacks import attack_specs_from_config, make_attack, report_label, spec_for
from ..baselines import BASELINE_METHODS, BaselineDefense, default_baseline_specs
from ..classifier import CNNClassifier
from ..config import (ExperimentConfig, config_hash, load_config,
                      parse_fraction)
from ..data import load_classifier_training_set, load_dataset
from ..defense import ReconstructionDefense
from ..errors import AdvDefError, ConfigError, DependencyError
from ..evaluation import (EvaluationReport, accuracy, compare_defenses,
                          export_report, recovery_matrix, robustness_sweep)
from ..pairing import build_paired_training_set
from ..seeding import seed_all
from .manifest import RunManifest, load_manifest, save_manifest
from .plots import emit_plots

log = logging.getLogger("advdef")

VERSATILE = "versatile"


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _load_cfg(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("a config file is required (--config <path>)")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = int(args.seed)
    if args.out:
        cfg.output_dir = args.out
    cfg.validate()
    return cfg


def _run_dir(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.output_dir, f"run-{config_hash(cfg)}")


def _open_run(cfg: ExperimentConfig):
    run_dir = _run_dir(cfg)
    manifest = load_manifest(run_dir, config_hash(cfg))
    return run_dir, manifest


def _load_classifier(run_dir, manifest: RunManifest) -> CNNClassifier:
    manifest.require_phase("classifier", "advdef train-classifier")
    return CNNClassifier.load(manifest.artifact("classifier"))


def _defense_from_phase(manifest: RunManifest, phase: str) -> ReconstructionDefense:
    return ReconstructionDefense.from_checkpoint(manifest.artifact(phase))


def _defense_name(methods, cfg) -> str:
    if tuple(methods) == tuple(cfg.attacks.train_attacks):
        return VERSATILE
    if len(methods) == 1:
        return f"M_{methods[0].upper()}"
    return "mix_" + "_".join(methods)


# ---------------------------------------------------------------------------
# phases (shared by subcommands and reproduce)
# ---------------------------------------------------------------------------

def _phase_classifier(cfg, run_dir, manifest, force=False, dry_run=False) -> None:
    if manifest.phase_complete("classifier") and not force:
        log.info("classifier phase already complete; skipping (use --force to retrain)")
        return
    if dry_run:
        log.info("[dry-run] would train the classifier into %s/classifier", run_dir)
        return
    t0 = time.perf_counter()
    seed_all(cfg.seed)
    train = load_classifier_training_set(cfg)
    clf = CNNClassifier(num_classes=cfg.dataset.num_classes,
                        widths=cfg.classifier.widths,
                        epochs=cfg.classifier.epochs, lr=cfg.classifier.lr,
                        batch_size=cfg.classifier.batch_size, seed=cfg.seed)
    clf.fit(train.images, train.labels)
    test = load_dataset(cfg, "test")
    clean_acc = accuracy(clf, test.images, test.labels)

    out = os.path.join(run_dir, "classifier")
    os.makedirs(out, exist_ok=True)
    ckpt_path = os.path.join(out, "classifier.pt")
    clf.save(ckpt_path)
    meta_path = os.path.join(out, "metadata.yaml")
    with open(meta_path, "w") as fh:
        yaml.safe_dump({
            "architecture": {"type": "SmallCNN",
                             "widths": list(cfg.classifier.widths),
                             "num_classes": cfg.dataset.num_classes},
            "seed": cfg.seed,
            "epochs": cfg.classifier.epochs,
            "train_accuracy": clf.train_accuracy_,
            "clean_test_accuracy": clean_acc,
        }, fh)
    manifest.mark_phase("classifier", [ckpt_path, meta_path],
                        time.perf_counter() - t0)
    save_manifest(manifest, run_dir)
    log.info("classifier done: clean test accuracy %.3f", clean_acc)


def _phase_defense(cfg, run_dir, manifest, methods, force=False,
                   dry_run=False) -> str:
    methods = tuple(methods)
    for m in methods:
        if m not in cfg.attacks.train_attacks:
            raise ConfigError(
                f"--attacks/--single: {m!r} is not a configured training attack "
                f"{list(cfg.attacks.train_attacks)}")
    name = _defense_name(methods, cfg)
    phase = f"defense:{name}"
    if manifest.phase_complete(phase) and not force:
        log.info("%s already complete; skipping", phase)
        return name
    if dry_run:
        log.info("[dry-run] would train defense %s on attacks %s", name, methods)
        return name
    if cfg.dataset.train_per_class % len(methods):
        raise ConfigError(
            f"dataset.train_per_class ({cfg.dataset.train_per_class}) must divide "
            f"evenly over {len(methods)} attacks")
    per_attack = cfg.dataset.train_per_class // len(methods)

    t0 = time.perf_counter()
    seed_all(cfg.seed)
    clf = _load_classifier(run_dir, manifest)
    train = load_dataset(cfg, "train")
    specs = [spec_for(m, cfg.attacks) for m in methods]
    pairs = build_paired_training_set(train, specs, clf, per_attack,
                                      seed=cfg.seed)
    out = os.path.join(run_dir, "defense", name)
    defense = ReconstructionDefense(
        extractor=clf, epochs=cfg.defense.epochs, schedule=cfg.defense.schedule,
        batch_size=cfg.defense.batch_size, lr=cfg.defense.lr,
        beta1=cfg.defense.beta1, beta2=cfg.defense.beta2,
        base_channels=cfg.defense.base_channels,
        dropout=cfg.defense.dropout,
        val_fraction=cfg.defense.val_fraction,
        checkpoint_every=cfg.defense.checkpoint_every, out_dir=out,
        loss_csv=os.path.join(out, "losses.csv"), seed=cfg.seed,
        inference_dropout=cfg.defense.inference_dropout,
        config_hash=config_hash(cfg))
    defense.fit_pairs(pairs)
    manifest.mark_phase(phase, [os.path.join(out, "final.pt"),
                                os.path.join(out, "losses.csv")],
                        time.perf_counter() - t0)
    save_manifest(manifest, run_dir)
    log.info("defense %s trained on %d pairs", name, len(pairs))
    return name


def _eval_attacks(cfg):
    return attack_specs_from_config(cfg)


def _phase_evaluate(cfg, run_dir, manifest, mode, force=False) -> None:
    phase = f"evaluation:{mode}"
    if manifest.phase_complete(phase) and not force:
        log.info("%s already complete; skipping", phase)
        return
    t0 = time.perf_counter()
    seed_all(cfg.seed)
    clf = _load_classifier(run_dir, manifest)
    test = load_dataset(cfg, "test")
    out = os.path.join(run_dir, "eval", mode)
    chash = config_hash(cfg)

    if mode == "matrix":
        defense_phases = manifest.defense_phases()
        if not defense_phases:
            raise DependencyError(
                "no defense checkpoints found; run `advdef train-defense` first")
        defenses = {p.split(":", 1)[1]: _defense_from_phase(manifest, p)
                    for p in defense_phases}
        report = recovery_matrix(defenses, _eval_attacks(cfg), test, clf,
                                 subset_size=cfg.evaluation.matrix_subset,
                                 seed=cfg.seed, config_hash=chash,
                                 sample_count=cfg.evaluation.n_triptych,
                                 fidelity_defense=VERSATILE
                                 if VERSATILE in defenses else None)
    elif mode == "compare":
        manifest.require_phase(f"defense:{VERSATILE}",
                               "advdef train-defense (default attacks)")
        versatile = _defense_from_phase(manifest, f"defense:{VERSATILE}")
        specific = {}
        for p in manifest.defense_phases():
            name = p.split(":", 1)[1]
            if name.startswith("M_"):
                specific[name[2:].lower()] = _defense_from_phase(manifest, p)
        baselines = {m: BaselineDefense(m, spec, random_state=cfg.seed)
                     for m, spec in default_baseline_specs(cfg.dataset.image_size).items()}
        report = compare_defenses(versatile, specific, baselines,
                                  _eval_attacks(cfg), test, clf,
                                  subset_size=cfg.evaluation.matrix_subset,
                                  seed=cfg.seed, config_hash=chash,
                                  sample_count=cfg.evaluation.n_triptych)
    elif mode == "sweep":
        manifest.require_phase(f"defense:{VERSATILE}",
                               "advdef train-defense (default attacks)")
        versatile = _defense_from_phase(manifest, f"defense:{VERSATILE}")
        curves = []
        eps_list = [parse_fraction(e) for e in cfg.evaluation.sweep_eps]
        for family in ("pgd", "mifgsm"):
            curves += robustness_sweep(versatile, family,
                                       cfg.evaluation.sweep_iters, eps_list,
                                       test, clf,
                                       subset_size=cfg.evaluation.sweep_subset,
                                       seed=cfg.seed)
        report = EvaluationReport(config_hash=chash, seed=cfg.seed, sweeps=curves)
        report.wall_clock["total"] = time.perf_counter() - t0
    else:
        raise ConfigError(f"unknown evaluation mode {mode!r}")

    paths = export_report(report, out)
    paths += emit_plots(report, out)
    manifest.mark_phase(phase, paths, time.perf_counter() - t0)
    save_manifest(manifest, run_dir)
    log.info("%s written: %d files under %s", phase, len(paths), out)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train_classifier(args) -> int:
    cfg = _load_cfg(args)
    run_dir, manifest = _open_run(cfg)
    _phase_classifier(cfg, run_dir, manifest, force=args.force,
                      dry_run=args.dry_run)
    return 0


def cmd_attack(args) -> int:
    cfg = _load_cfg(args)
    run_dir, manifest = _open_run(cfg)
    spec = spec_for(args.method, cfg.attacks)
    overrides = {}
    if args.eps is not None:
        overrides["epsilon"] = parse_fraction(args.eps)
    if args.iters is not None:
        overrides["nb_iter"] = int(args.iters)
    if args.step is not None:
        overrides["eps_iter"] = parse_fraction(args.step)
    if overrides:
        from dataclasses import replace
        spec = replace(spec, **overrides)
    if args.dry_run:
        log.info("[dry-run] would run %s with %s", args.method, spec)
        return 0
    seed_all(cfg.seed)
    clf = _load_classifier(run_dir, manifest)
    test = load_dataset(cfg, "test")
    subset = min(cfg.evaluation.matrix_subset or len(test), len(test))
    images, labels = test.images[:subset], test.labels[:subset]

    t0 = time.perf_counter()
    result = make_attack(spec)(clf, images, labels, seed=cfg.seed)
    label = report_label(spec.method)
    stats = {
        "attack": label,
        "spec": {"epsilon": spec.epsilon, "eps_iter": spec.eps_iter,
                 "nb_iter": spec.nb_iter, "norm": spec.norm},
        "clean_accuracy": accuracy(clf, images, labels),
        "post_attack_accuracy": accuracy(clf, result.adversarial, labels),
        "success_rate": float(result.success_mask.mean()),
        "mean_perturbation_norm": float(result.perturbation_norm.mean()),
        "seconds": time.perf_counter() - t0,
    }
    out = os.path.join(run_dir, "attacks")
    os.makedirs(out, exist_ok=True)
    safe = label.replace("(", "_").replace(")", "")
    stats_path = os.path.join(out, f"{safe}.yaml")
    with open(stats_path, "w") as fh:
        yaml.safe_dump(stats, fh)
    npz_path = os.path.join(out, f"{safe}.npz")
    np.savez_compressed(npz_path, adversarial=result.adversarial,
                        success_mask=result.success_mask, labels=labels)
    manifest.mark_phase(f"attack:{args.method}", [stats_path, npz_path],
                        stats["seconds"])
    save_manifest(manifest, run_dir)
    print(f"{label}: accuracy {stats['clean_accuracy']:.3f} -> "
          f"{stats['post_attack_accuracy']:.3f} "
          f"(success {stats['success_rate']:.2f})")
    return 0


def cmd_train_defense(args) -> int:
    cfg = _load_cfg(args)
    run_dir, manifest = _open_run(cfg)
    if args.single and args.attacks:
        raise ConfigError("--single and --attacks are mutually exclusive")
    if args.single:
        methods = [args.single]
    elif args.attacks:
        methods = [m.strip() for m in args.attacks.split(",") if m.strip()]
    else:
        methods = list(cfg.attacks.train_attacks)
    _phase_defense(cfg, run_dir, manifest, methods, force=args.force,
                   dry_run=args.dry_run)
    return 0


def cmd_baseline(args) -> int:
    cfg = _load_cfg(args)
    run_dir, manifest = _open_run(cfg)
    if args.dry_run:
        log.info("[dry-run] would evaluate baseline %s", args.method)
        return 0
    seed_all(cfg.seed)
    clf = _load_classifier(run_dir, manifest)
    test = load_dataset(cfg, "test")
    spec = default_baseline_specs(cfg.dataset.image_size)[args.method]
    defense = BaselineDefense(args.method, spec, random_state=cfg.seed)
    report = recovery_matrix({args.method: defense}, _eval_attacks(cfg), test,
                             clf, subset_size=cfg.evaluation.matrix_subset,
                             seed=cfg.seed, config_hash=config_hash(cfg),
                             sample_count=cfg.evaluation.n_triptych)
    out = os.path.join(run_dir, "eval", f"baseline-{args.method}")
    paths = export_report(report, out)
    paths += emit_plots(report, out)
    manifest.mark_phase(f"evaluation:baseline-{args.method}", paths,
                        report.wall_clock.get("total", 0.0))
    save_manifest(manifest, run_dir)
    avg = report.averages.get(args.method)
    print(f"baseline {args.method}: average recovered accuracy "
          f"{avg if avg is None else f'{avg:.3f}'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    run_dir, manifest = _open_run(cfg)
    modes = ["matrix", "compare", "sweep"] if args.mode == "all" else [args.mode]
    if args.dry_run:
        log.info("[dry-run] would evaluate modes: %s", modes)
        return 0
    for mode in modes:
        _phase_evaluate(cfg, run_dir, manifest, mode, force=args.force)
    return 0


def cmd_reproduce(args) -> int:
    cfg = _load_cfg(args)
    run_dir, manifest = _open_run(cfg)
    plan = ["classifier"]
    if args.with_specific:
        plan += [f"defense:M_{m.upper()}" for m in cfg.attacks.train_attacks]
    plan += [f"defense:{VERSATILE}",
             "evaluation:matrix", "evaluation:compare", "evaluation:sweep"]
    if args.dry_run:
        print("reproduction plan:")
        for step in plan:
            status = "done" if manifest.phase_complete(step) else "pending"
            print(f"  {step:30s} [{status}]")
        return 0
    _phase_classifier(cfg, run_dir, manifest, force=args.force)
    if args.with_specific:
        for m in cfg.attacks.train_attacks:
            _phase_defense(cfg, run_dir, manifest, [m], force=args.force)
    _phase_defense(cfg, run_dir, manifest, cfg.attacks.train_attacks,
                   force=args.force)
    for mode in ("matrix", "compare", "sweep"):
        _phase_evaluate(cfg, run_dir, manifest, mode, force=args.force)
    print(f"reproduction complete; artifacts under {run_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=False, help="experiment config (YAML)")
    common.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    common.add_argument("--out", default=None, help="override the output root")
    common.add_argument("--force", action="store_true",
                        help="redo phases even when the manifest marks them complete")
    common.add_argument("--dry-run", action="store_true",
                        help="print the plan without touching anything")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="advdef",
        description="adversarial attack/defense workbench")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-classifier", parents=[common],
                       help="train the target classifier")
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("attack", parents=[common],
                       help="run one attack against the classifier")
    p.add_argument("--method", required=True)
    p.add_argument("--eps", default=None, help="epsilon, e.g. 16/255 or 0.03")
    p.add_argument("--iters", default=None, help="iteration count")
    p.add_argument("--step", default=None, help="per-iteration step size")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("train-defense", parents=[common],
                       help="train the reconstruction defense")
    p.add_argument("--attacks", default=None,
                   help="comma-separated training attacks (default: config list)")
    p.add_argument("--single", default=None, metavar="ATTACK",
                   help="train an attack-specific model")
    p.set_defaults(func=cmd_train_defense)

    p = sub.add_parser("baseline", parents=[common],
                       help="evaluate an input-transformation baseline")
    p.add_argument("--method", required=True, choices=list(BASELINE_METHODS))
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", parents=[common],
                       help="run the evaluation matrices and sweeps")
    p.add_argument("--mode", default="all",
                   choices=["matrix", "compare", "sweep", "all"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reproduce", parents=[common],
                       help="run the whole pipeline end to end")
    p.add_argument("--with-specific", action="store_true",
                   help="also train one defense per attack")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return 3
    except AdvDefError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.exception("unhandled failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
