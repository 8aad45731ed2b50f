"""advdef: adversarial attacks, a trainable reconstruction defense, and
an evaluation harness for measuring how well defenses recover accuracy.
"""

from .attacks import (AttackResult, AttackSpec, autoattack_standin, cw_l2,
                      deepfool, fgsm, make_attack, mifgsm, pgd, project_linf)
from .baselines import (BaselineDefense, BaselineSpec, pixel_deflection,
                        random_resize_pad, wavelet_denoise, wd_pd)
from .classifier import CNNClassifier, Prediction
from .config import ExperimentConfig, default_desk_config, load_config, save_config
from .data import LabeledImageSet, load_dataset
from .defense import (DefenseCheckpoint, ReconstructionDefense, reconstruct,
                      train_defense)
from .evaluation import (EvaluationReport, SweepCurve, accuracy,
                         compare_defenses, export_report, load_report, mae,
                         psnr, recovery_matrix, robustness_sweep)
from .pairing import PairedImageSet, build_paired_training_set
from .seeding import seed_all

__version__ = "0.1.0"

__all__ = [
    "AttackResult", "AttackSpec", "autoattack_standin", "cw_l2", "deepfool",
    "fgsm", "make_attack", "mifgsm", "pgd", "project_linf",
    "BaselineDefense", "BaselineSpec", "pixel_deflection", "random_resize_pad",
    "wavelet_denoise", "wd_pd",
    "CNNClassifier", "Prediction",
    "ExperimentConfig", "default_desk_config", "load_config", "save_config",
    "LabeledImageSet", "load_dataset",
    "DefenseCheckpoint", "ReconstructionDefense", "reconstruct", "train_defense",
    "EvaluationReport", "SweepCurve", "accuracy", "compare_defenses",
    "export_report", "load_report", "mae", "psnr", "recovery_matrix",
    "robustness_sweep",
    "PairedImageSet", "build_paired_training_set",
    "seed_all",
    "__version__",
]
