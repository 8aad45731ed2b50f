"""Experiment configuration: schema, validation, YAML round-trip, hashing.

One config file drives the whole pipeline (dataset -> classifier ->
paired set -> defense -> evaluation). Every run is keyed by the sha256
hash of the canonical config dict, so artifacts are traceable to the
exact settings that produced them.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import yaml

from .errors import ConfigError

DATA_DIR_ENV = "ADVDEF_DATA_DIR"

# 6 training attacks; deepfool is the held-out probe and never trains a defense
TRAIN_ATTACKS = ("fgsm", "bim", "pgd", "mifgsm", "cw_l2", "autoattack")
HELD_OUT_ATTACK = "deepfool"


def parse_fraction(value) -> float:
    """Parse an epsilon given as a float, a decimal string or 'a/b'."""
    if isinstance(value, (int, float)):
        return float(value)
    text = str(value).strip()
    if "/" in text:
        num, den = text.split("/", 1)
        try:
            return float(num) / float(den)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"cannot parse fraction {value!r}") from exc
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse number {value!r}") from exc


@dataclass
class DatasetConfig:
    name: str = "synthetic"
    image_size: int = 32
    num_classes: int = 10
    train_per_class: int = 18            # paired-training split
    test_per_class: int = 50
    classifier_train_per_class: int = 200  # the target model's own pool
    data_dir: str | None = None

    def resolved_data_dir(self) -> str:
        return self.data_dir or os.environ.get(DATA_DIR_ENV) or "data"


@dataclass
class AttackConfig:
    train_attacks: tuple = TRAIN_ATTACKS
    epsilon: float = 8.0 / 255.0
    eps_iter: float = 0.01
    nb_iter: int = 40
    decay: float = 1.0
    overshoot: float = 0.02
    deepfool_max_iter: int = 50
    cw_confidence: float = 0.0
    cw_binary_steps: int = 5
    cw_iterations: int = 100
    cw_lr: float = 0.01
    cw_initial_c: float = 0.01
    overrides: dict = field(default_factory=dict)


@dataclass
class ClassifierConfig:
    epochs: int = 15
    lr: float = 1e-3
    batch_size: int = 64
    widths: tuple = (32, 64, 128, 256)


@dataclass
class DefenseConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    base_channels: int = 32
    dropout: float = 0.5
    val_fraction: float = 0.1
    checkpoint_every: int = 10
    inference_dropout: bool = False
    # list of {start, end, lambda1, lambda2}; half-open epoch intervals
    schedule: list = field(default_factory=lambda: [
        {"start": 0, "end": 40, "lambda1": 100.0, "lambda2": 100.0},
        {"start": 40, "end": 70, "lambda1": 100.0, "lambda2": 50.0},
        {"start": 70, "end": 100, "lambda1": 100.0, "lambda2": 1.0},
    ])


@dataclass
class EvaluationConfig:
    matrix_subset: int = 500
    sweep_subset: int = 200
    sweep_iters: tuple = (10, 20, 30, 40, 50, 60, 70, 80, 90, 100)
    sweep_eps: tuple = ("2/255", "5/255", "10/255")
    n_triptych: int = 6


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/desk"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    attacks: AttackConfig = field(default_factory=AttackConfig)
    pairing_per_attack: int = 3
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def validate(self) -> None:
        """Raise ConfigError naming the offending field on any violation."""
        if self.seed is None:
            raise ConfigError("seed: a seed is required (no unseeded runs)")
        if self.dataset.image_size < 16 or self.dataset.image_size & (self.dataset.image_size - 1):
            raise ConfigError("dataset.image_size: must be a power of two >= 16")
        if self.dataset.train_per_class <= 0 or self.dataset.test_per_class <= 0:
            raise ConfigError("dataset.train_per_class/test_per_class: must be positive")
        if self.dataset.classifier_train_per_class <= 0:
            raise ConfigError("dataset.classifier_train_per_class: must be positive")
        n_attacks = len(self.attacks.train_attacks)
        if n_attacks == 0:
            raise ConfigError("attacks.train_attacks: at least one attack required")
        if HELD_OUT_ATTACK in self.attacks.train_attacks:
            raise ConfigError(
                f"attacks.train_attacks: {HELD_OUT_ATTACK!r} is the held-out "
                "evaluation attack and may not be trained on")
        if self.dataset.train_per_class != self.pairing_per_attack * n_attacks:
            raise ConfigError(
                "pairing_per_attack: dataset.train_per_class "
                f"({self.dataset.train_per_class}) must equal pairing_per_attack "
                f"x number of training attacks ({self.pairing_per_attack} x {n_attacks})")
        if self.attacks.epsilon < 0:
            raise ConfigError("attacks.epsilon: must be >= 0")
        if self.attacks.eps_iter <= 0 or self.attacks.nb_iter < 1:
            raise ConfigError("attacks.eps_iter/nb_iter: need eps_iter > 0 and nb_iter >= 1")
        _check_schedule(self.defense.schedule, self.defense.epochs)
        if not all(a < b for a, b in
                   zip(self.evaluation.sweep_iters, self.evaluation.sweep_iters[1:])):
            raise ConfigError("evaluation.sweep_iters: must be strictly increasing")


def _check_schedule(rows: list, total_epochs: int) -> None:
    if not rows:
        raise ConfigError("defense.schedule: empty")
    expected_start = 0
    for i, row in enumerate(rows):
        try:
            start, end = int(row["start"]), int(row["end"])
            l1, l2 = float(row["lambda1"]), float(row["lambda2"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"defense.schedule[{i}]: needs start/end/lambda1/lambda2") from exc
        if start != expected_start or end <= start:
            raise ConfigError(
                f"defense.schedule[{i}]: intervals must be contiguous and non-empty "
                f"(expected start {expected_start}, got [{start}, {end}))")
        if l1 < 0 or l2 < 0:
            raise ConfigError(f"defense.schedule[{i}]: weights must be non-negative")
        expected_start = end
    if expected_start != total_epochs:
        raise ConfigError(
            f"defense.schedule: intervals cover [0, {expected_start}) "
            f"but defense.epochs is {total_epochs}")


def _to_plain(obj):
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, list):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _to_plain(asdict(cfg))


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})

    def section(cls, key, tuple_fields=()):
        data = dict(raw.pop(key, {}) or {})
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"{key}: unknown fields {sorted(unknown)}")
        for tf in tuple_fields:
            if tf in data and isinstance(data[tf], list):
                data[tf] = tuple(data[tf])
        return cls(**data)

    dataset = section(DatasetConfig, "dataset")
    attacks = section(AttackConfig, "attacks", tuple_fields=("train_attacks",))
    attacks.epsilon = parse_fraction(attacks.epsilon)
    attacks.eps_iter = parse_fraction(attacks.eps_iter)
    classifier = section(ClassifierConfig, "classifier", tuple_fields=("widths",))
    defense = section(DefenseConfig, "defense")
    evaluation = section(EvaluationConfig, "evaluation",
                         tuple_fields=("sweep_iters", "sweep_eps"))

    known_top = {"seed", "output_dir", "pairing_per_attack"}
    unknown = set(raw) - known_top
    if unknown:
        raise ConfigError(f"unknown top-level fields {sorted(unknown)}")
    if "seed" not in raw or raw["seed"] is None:
        raise ConfigError("seed: a seed is required (no unseeded runs)")
    cfg = ExperimentConfig(
        seed=int(raw["seed"]),
        output_dir=str(raw.get("output_dir", "runs/desk")),
        dataset=dataset,
        attacks=attacks,
        pairing_per_attack=int(raw.get("pairing_per_attack", 3)),
        classifier=classifier,
        defense=defense,
        evaluation=evaluation,
    )
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    """Load and validate a YAML experiment config."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)


def config_hash(cfg: ExperimentConfig) -> str:
    """12-hex-digit digest of the canonical config; names run artifacts.

    Filesystem locations (output_dir, data_dir) are excluded: they do
    not affect any computed number, so moving a run must not change its
    identity.
    """
    plain = config_to_dict(cfg)
    plain.pop("output_dir", None)
    plain.get("dataset", {}).pop("data_dir", None)
    canon = json.dumps(plain, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def default_desk_config(seed: int = 0, output_dir: str = "runs/desk") -> ExperimentConfig:
    cfg = ExperimentConfig(seed=seed, output_dir=output_dir)
    cfg.validate()
    return cfg
