"""Metrics, experiment matrices and report serialization.

Everything here consumes in-memory tensors only: adversarial images are
generated, passed through defenses and classified without ever touching
disk; files are written strictly after the numbers exist, by
:func:`export_report`.
"""

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
import yaml

from .attacks import AttackSpec, make_attack, report_label
from .data import LabeledImageSet
from .errors import ConfigError
from .seeding import derive_rng, derive_seed
from .validation import check_image_batch

log = logging.getLogger(__name__)

#: sentinel reported for the PSNR of identical images (never a float)
PSNR_INFINITE = "inf"

CLEAN_ROW = "clean"
NO_DEFENSE = "no_defense"


def accuracy(model, images, labels) -> float:
    """Fraction of argmax-correct predictions over an in-memory batch."""
    images = check_image_batch(images, "images")
    if len(images) == 0:
        raise ValueError("cannot compute accuracy of an empty set")
    labels = np.asarray(labels)
    if len(labels) != len(images):
        raise ValueError(f"{len(labels)} labels for {len(images)} images")
    pred = model.predict(images)
    return float(np.mean(pred == labels))


def mae(a, b) -> float:
    """Mean absolute per-element difference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


def psnr(a, b, max_value: float = 1.0):
    """Peak signal-to-noise ratio in dB; identical inputs return the
    :data:`PSNR_INFINITE` sentinel instead of a number."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_INFINITE
    return float(10.0 * np.log10(max_value * max_value / mse))


@dataclass(frozen=True)
class SweepCurve:
    """Recovered accuracy as a function of iteration count at one epsilon."""

    attack_family: str
    epsilon: float
    points: tuple   # ((nb_iter, recovered_accuracy), ...)

    def __post_init__(self):
        iters = [p[0] for p in self.points]
        if any(a >= b for a, b in zip(iters, iters[1:])):
            raise ValueError("sweep iteration counts must be strictly increasing")
        object.__setattr__(self, "points",
                           tuple((int(i), float(v)) for i, v in self.points))


@dataclass
class EvaluationReport:
    """Everything one evaluation run produced, plus its provenance."""

    config_hash: str = ""
    seed: int = 0
    clean_accuracy: float | None = None
    no_defense: dict = field(default_factory=dict)      # attack label -> accuracy
    recovered: dict = field(default_factory=dict)       # defense -> row -> accuracy|None
    averages: dict = field(default_factory=dict)        # defense -> mean over rows
    fidelity: dict = field(default_factory=dict)        # attack label -> metrics
    sweeps: list = field(default_factory=list)          # [SweepCurve]
    skipped: list = field(default_factory=list)         # [{"cell":…, "reason":…}]
    wall_clock: dict = field(default_factory=dict)      # phase -> seconds
    samples_defense: str | None = None
    samples: dict = field(default_factory=dict)         # attack -> {role: array}

    def __eq__(self, other):
        if not isinstance(other, EvaluationReport):
            return NotImplemented
        plain = ("config_hash", "seed", "clean_accuracy", "no_defense",
                 "recovered", "averages", "fidelity", "skipped",
                 "wall_clock", "samples_defense")
        if any(getattr(self, f) != getattr(other, f) for f in plain):
            return False
        if self.sweeps != other.sweeps:
            return False
        if set(self.samples) != set(other.samples):
            return False
        for key, roles in self.samples.items():
            if set(roles) != set(other.samples[key]):
                return False
            if any(not np.array_equal(roles[r], other.samples[key][r]) for r in roles):
                return False
        return True


def _apply_defense(defense, images: np.ndarray) -> np.ndarray:
    if callable(defense) and not hasattr(defense, "transform"):
        return check_image_batch(defense(images), "defended")
    return check_image_batch(defense.transform(images), "defended")


def _eval_subset(test: LabeledImageSet, subset_size, seed):
    if subset_size is None or subset_size >= len(test):
        return test
    order = derive_rng(seed, "eval", "subset").permutation(len(test))
    return test.subset(order[:subset_size])


def _generate_attacks(classifier, images, labels, specs, seed):
    """Adversarial batch per attack label, generated fully in memory."""
    generated = {}
    for spec in specs:
        label = report_label(spec.method)
        t0 = time.perf_counter()
        result = make_attack(spec)(classifier, images, labels,
                                   seed=derive_seed(seed, "eval", spec.method))
        generated[label] = result.adversarial
        log.info("attack %s: %.1fs, success %.2f", label,
                 time.perf_counter() - t0, result.success_mask.mean())
    return generated


def _column_average(cells: dict) -> float | None:
    values = [v for v in cells.values() if v is not None]
    return float(np.mean(values)) if values else None


def _fidelity_entry(clean, attacked, restored_by: dict) -> dict:
    entry = {"attacked_mae": mae(attacked, clean),
             "attacked_psnr": psnr(attacked, clean),
             "restored": {}}
    for name, restored in restored_by.items():
        entry["restored"][name] = {"mae": mae(restored, clean),
                                   "psnr": psnr(restored, clean)}
    return entry


def recovery_matrix(defenses: dict, attacks: list, test: LabeledImageSet,
                    classifier, *, subset_size=None, seed: int = 0,
                    config_hash: str = "", sample_count: int = 6,
                    fidelity_defense: str | None = None) -> EvaluationReport:
    """Cross-attack accuracy matrix: rows clean+attacks, columns
    no-defense + each named defense.

    Every attack is generated once on the evaluation subset; each defense
    then reconstructs those exact tensors. A failing cell is recorded in
    ``skipped`` and the run continues.
    """
    if not defenses:
        raise ValueError("at least one defense is required")
    for spec in attacks:
        if not isinstance(spec, AttackSpec):
            raise TypeError(f"expected AttackSpec, got {type(spec).__name__}")
    subset = _eval_subset(test, subset_size, seed)
    images, labels = subset.images, subset.labels
    report = EvaluationReport(config_hash=config_hash, seed=seed)
    t_start = time.perf_counter()

    report.clean_accuracy = accuracy(classifier, images, labels)
    adversarial = _generate_attacks(classifier, images, labels, attacks, seed)
    report.no_defense = {label: accuracy(classifier, adv, labels)
                         for label, adv in adversarial.items()}
    report.wall_clock["attack_generation"] = time.perf_counter() - t_start

    fidelity_defense = fidelity_defense or next(iter(defenses))
    report.samples_defense = fidelity_defense
    k = min(sample_count, len(images))

    t_def = time.perf_counter()
    for name, defense in defenses.items():
        cells = {}
        try:
            defended_clean = _apply_defense(defense, images)
            cells[CLEAN_ROW] = accuracy(classifier, defended_clean, labels)
        except Exception as exc:  # cell failure is data, not a crash
            cells[CLEAN_ROW] = None
            report.skipped.append({"cell": f"{name}/{CLEAN_ROW}", "reason": str(exc)})
        for label, adv in adversarial.items():
            try:
                restored = _apply_defense(defense, adv)
                cells[label] = accuracy(classifier, restored, labels)
            except Exception as exc:
                cells[label] = None
                report.skipped.append({"cell": f"{name}/{label}", "reason": str(exc)})
                continue
            if name == fidelity_defense:
                report.fidelity[label] = _fidelity_entry(
                    images, adv, {name: restored})
                report.samples[label] = {
                    "clean": images[:k].copy(),
                    "attacked": adv[:k].copy(),
                    "restored": restored[:k].copy(),
                }
        report.recovered[name] = cells
        report.averages[name] = _column_average(cells)
    report.wall_clock["defense_evaluation"] = time.perf_counter() - t_def
    report.wall_clock["total"] = time.perf_counter() - t_start
    return report


def compare_defenses(versatile, specific: dict, baselines: dict, attacks: list,
                     test: LabeledImageSet, classifier, *, subset_size=None,
                     seed: int = 0, config_hash: str = "",
                     sample_count: int = 6) -> EvaluationReport:
    """Versatile model vs attack-specific models vs transformation baselines.

    The attack-specific column picks, for each attack row, the model
    trained on that attack; its clean and held-out rows are the mean over
    all specific models. With no specific models the column is marked
    skipped (never silently passed).
    """
    subset = _eval_subset(test, subset_size, seed)
    images, labels = subset.images, subset.labels
    report = EvaluationReport(config_hash=config_hash, seed=seed)
    t_start = time.perf_counter()

    report.clean_accuracy = accuracy(classifier, images, labels)
    adversarial = _generate_attacks(classifier, images, labels, attacks, seed)
    report.no_defense = {label: accuracy(classifier, adv, labels)
                         for label, adv in adversarial.items()}

    report.samples_defense = "versatile"
    k = min(sample_count, len(images))
    cells = {}
    defended_clean = _apply_defense(versatile, images)
    cells[CLEAN_ROW] = accuracy(classifier, defended_clean, labels)
    for label, adv in adversarial.items():
        restored = _apply_defense(versatile, adv)
        cells[label] = accuracy(classifier, restored, labels)
        report.fidelity[label] = _fidelity_entry(images, adv, {"versatile": restored})
        report.samples[label] = {"clean": images[:k].copy(),
                                 "attacked": adv[:k].copy(),
                                 "restored": restored[:k].copy()}
    report.recovered["versatile"] = cells
    report.averages["versatile"] = _column_average(cells)

    spec_methods = {report_label(m): d for m, d in (specific or {}).items()}
    cells = {}
    if spec_methods:
        per_model_clean, per_model_heldout = [], []
        for label, defense in spec_methods.items():
            try:
                per_model_clean.append(
                    accuracy(classifier, _apply_defense(defense, images), labels))
            except Exception as exc:
                report.skipped.append({"cell": f"atk_specific[{label}]/{CLEAN_ROW}",
                                       "reason": str(exc)})
        cells[CLEAN_ROW] = float(np.mean(per_model_clean)) if per_model_clean else None
        for label, adv in adversarial.items():
            if label in spec_methods:
                try:
                    restored = _apply_defense(spec_methods[label], adv)
                    cells[label] = accuracy(classifier, restored, labels)
                except Exception as exc:
                    cells[label] = None
                    report.skipped.append({"cell": f"atk_specific/{label}",
                                           "reason": str(exc)})
            else:
                # held-out attack: mean over all specific models
                vals = []
                for name, defense in spec_methods.items():
                    try:
                        vals.append(accuracy(
                            classifier, _apply_defense(defense, adv), labels))
                    except Exception as exc:
                        report.skipped.append({"cell": f"atk_specific[{name}]/{label}",
                                               "reason": str(exc)})
                cells[label] = float(np.mean(vals)) if vals else None
                per_model_heldout.append(label)
    else:
        cells = {CLEAN_ROW: None, **{label: None for label in adversarial}}
        report.skipped.append({"cell": "atk_specific/*",
                               "reason": "attack-specific phase not run"})
    report.recovered["atk_specific"] = cells
    report.averages["atk_specific"] = _column_average(cells)

    for name, defense in (baselines or {}).items():
        cells = {}
        try:
            cells[CLEAN_ROW] = accuracy(
                classifier, _apply_defense(defense, images), labels)
        except Exception as exc:
            cells[CLEAN_ROW] = None
            report.skipped.append({"cell": f"{name}/{CLEAN_ROW}", "reason": str(exc)})
        for label, adv in adversarial.items():
            try:
                cells[label] = accuracy(
                    classifier, _apply_defense(defense, adv), labels)
            except Exception as exc:
                cells[label] = None
                report.skipped.append({"cell": f"{name}/{label}", "reason": str(exc)})
        report.recovered[name] = cells
        report.averages[name] = _column_average(cells)

    report.wall_clock["total"] = time.perf_counter() - t_start
    return report


def robustness_sweep(defense, attack_family: str, iter_list, eps_list,
                     test: LabeledImageSet, classifier, *, eps_iter: float = 0.01,
                     subset_size=None, seed: int = 0) -> list:
    """Recovered accuracy per iteration count, one curve per epsilon.

    Only the iteration budget varies along a curve; the step size stays
    fixed. ``attack_family`` must be 'pgd' or 'mifgsm'.
    """
    if attack_family not in ("pgd", "mifgsm"):
        raise ConfigError("sweep attack_family must be 'pgd' or 'mifgsm'")
    iter_list = [int(i) for i in iter_list]
    if any(a >= b for a, b in zip(iter_list, iter_list[1:])):
        raise ValueError("iter_list must be strictly increasing")
    subset = _eval_subset(test, subset_size, seed)
    images, labels = subset.images, subset.labels
    curves = []
    for eps in eps_list:
        eps = float(eps)
        points = []
        for nb_iter in iter_list:
            spec = AttackSpec(method=attack_family, epsilon=eps,
                              eps_iter=eps_iter, nb_iter=nb_iter)
            result = make_attack(spec)(
                classifier, images, labels,
                seed=derive_seed(seed, "sweep", attack_family, eps, nb_iter))
            restored = _apply_defense(defense, result.adversarial)
            points.append((nb_iter, accuracy(classifier, restored, labels)))
        curves.append(SweepCurve(attack_family, eps, tuple(points)))
    return curves


# ---------------------------------------------------------------------------
# serialization (files are written only after all metrics exist)
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return "skipped"
    if isinstance(value, str):
        return value
    return f"{value:.6f}"


def export_report(report: EvaluationReport, out_dir) -> list:
    """Write the YAML report, CSV matrices and the sample sidecar.

    Returns the written paths. Plots are emitted by the CLI layer from
    the report, not here.
    """
    os.makedirs(out_dir, exist_ok=True)
    tag = report.config_hash or "report"
    paths = []

    doc = {
        "config_hash": report.config_hash,
        "seed": report.seed,
        "clean_accuracy": report.clean_accuracy,
        "no_defense": dict(report.no_defense),
        "recovered": {d: dict(cells) for d, cells in report.recovered.items()},
        "averages": dict(report.averages),
        "fidelity": report.fidelity,
        "sweeps": [{"attack_family": c.attack_family, "epsilon": c.epsilon,
                    "points": [list(p) for p in c.points]} for c in report.sweeps],
        "skipped": list(report.skipped),
        "wall_clock": dict(report.wall_clock),
        "samples_defense": report.samples_defense,
        "samples_file": f"samples_{tag}.npz" if report.samples else None,
    }
    report_path = os.path.join(out_dir, f"report_{tag}.yaml")
    with open(report_path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True)
    paths.append(report_path)

    if report.recovered:
        matrix_path = os.path.join(out_dir, f"matrix_{tag}.csv")
        defenses = list(report.recovered)
        rows = [CLEAN_ROW] + [r for r in report.no_defense]
        with open(matrix_path, "w") as fh:
            fh.write(",".join(["attack", NO_DEFENSE] + defenses) + "\n")
            for row in rows:
                cells = [_fmt(report.clean_accuracy if row == CLEAN_ROW
                              else report.no_defense.get(row))]
                cells += [_fmt(report.recovered[d].get(row)) for d in defenses]
                fh.write(",".join([row] + cells) + "\n")
            fh.write(",".join(["average", ""] +
                              [_fmt(report.averages.get(d)) for d in defenses]) + "\n")
        paths.append(matrix_path)

    if report.fidelity:
        fid_path = os.path.join(out_dir, f"fidelity_{tag}.csv")
        with open(fid_path, "w") as fh:
            fh.write("attack,attacked_mae,attacked_psnr,defense,restored_mae,restored_psnr\n")
            for label, entry in report.fidelity.items():
                for name, vals in entry["restored"].items():
                    fh.write(",".join([
                        label, _fmt(entry["attacked_mae"]), _fmt(entry["attacked_psnr"]),
                        name, _fmt(vals["mae"]), _fmt(vals["psnr"])]) + "\n")
        paths.append(fid_path)

    if report.sweeps:
        sweep_path = os.path.join(out_dir, f"sweep_{tag}.csv")
        with open(sweep_path, "w") as fh:
            fh.write("attack_family,epsilon,nb_iter,recovered_accuracy\n")
            for curve in report.sweeps:
                for nb_iter, acc in curve.points:
                    fh.write(f"{curve.attack_family},{curve.epsilon:.8f},"
                             f"{nb_iter},{acc:.6f}\n")
        paths.append(sweep_path)

    if report.samples:
        sample_path = os.path.join(out_dir, f"samples_{tag}.npz")
        arrays = {}
        for label, roles in report.samples.items():
            for role, arr in roles.items():
                arrays[f"{label}::{role}"] = arr
        np.savez_compressed(sample_path, **arrays)
        paths.append(sample_path)
    return paths


def load_report(path) -> EvaluationReport:
    """Inverse of export_report for the YAML document (+ sample sidecar)."""
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    report = EvaluationReport(
        config_hash=doc["config_hash"], seed=doc["seed"],
        clean_accuracy=doc["clean_accuracy"], no_defense=doc["no_defense"],
        recovered=doc["recovered"], averages=doc["averages"],
        fidelity=doc["fidelity"],
        sweeps=[SweepCurve(c["attack_family"], c["epsilon"],
                           tuple(tuple(p) for p in c["points"]))
                for c in doc["sweeps"]],
        skipped=doc["skipped"], wall_clock=doc["wall_clock"],
        samples_defense=doc["samples_defense"],
    )
    if doc.get("samples_file"):
        sample_path = os.path.join(os.path.dirname(path), doc["samples_file"])
        with np.load(sample_path) as blob:
            for key in blob.files:
                label, role = key.split("::", 1)
                report.samples.setdefault(label, {})[role] = blob[key]
    return report
