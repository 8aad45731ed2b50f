import numpy as np
import pytest
import torch
import torch.nn as nn

from advdef.attacks import (ATTACK_METHODS, AttackSpec, autoattack_standin,
                            cw_l2, deepfool, fgsm, make_attack, mifgsm, pgd,
                            project_linf, report_label)
from advdef.errors import ConfigError
from conftest import LinearImageModel, rand_images

BUDGET_TOL = 1e-6


def linf(a, b):
    return np.abs(a - b).reshape(len(a), -1).max(axis=1)


def small_spec(**kw):
    base = dict(method="pgd", epsilon=8 / 255, eps_iter=0.01, nb_iter=5)
    base.update(kw)
    return AttackSpec(**base)


# ---------------------------------------------------------------------------
# spec validation
# ---------------------------------------------------------------------------

def test_spec_rejects_unknown_method():
    with pytest.raises(ConfigError, match="pgd2"):
        AttackSpec(method="pgd2")


def test_spec_norm_constraints():
    with pytest.raises(ConfigError, match="linf"):
        AttackSpec(method="pgd", norm="l2")
    with pytest.raises(ConfigError, match="l2"):
        AttackSpec(method="cw_l2", norm="linf")
    AttackSpec(method="cw_l2", norm="l2")  # valid


def test_spec_rejects_bad_budget():
    with pytest.raises(ConfigError):
        AttackSpec(method="pgd", epsilon=-0.1)
    with pytest.raises(ConfigError):
        AttackSpec(method="pgd", eps_iter=0.0)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def test_project_identity_inside_ball():
    rng = np.random.default_rng(0)
    anchor = rng.uniform(0.3, 0.7, (2, 4, 4, 3)).astype(np.float32)
    candidate = anchor + rng.uniform(-0.05, 0.05, anchor.shape).astype(np.float32)
    out = project_linf(candidate, anchor, 0.1)
    assert np.allclose(out, candidate, atol=1e-7)


def test_project_uniform_overshoot():
    anchor = np.full((1, 4, 4, 3), 0.5, dtype=np.float32)
    candidate = anchor + 1.0
    out = project_linf(candidate, anchor, 0.1)
    assert np.allclose(out, 0.6)


def test_project_zero_radius_returns_anchor():
    rng = np.random.default_rng(1)
    anchor = rng.uniform(0, 1, (2, 4, 4, 3)).astype(np.float32)
    out = project_linf(anchor + 0.3, anchor, 0.0)
    assert np.allclose(out, np.clip(anchor, 0, 1), atol=1e-7)


def test_project_idempotent():
    rng = np.random.default_rng(2)
    anchor = rng.uniform(0, 1, (2, 4, 4, 3)).astype(np.float32)
    once = project_linf(anchor + rng.normal(0, 0.3, anchor.shape), anchor, 0.05)
    twice = project_linf(once, anchor, 0.05)
    assert np.array_equal(once, twice)


# ---------------------------------------------------------------------------
# fgsm
# ---------------------------------------------------------------------------

def test_fgsm_zero_epsilon_is_identity(classifier, datasets):
    x = datasets["test"].images[:8]
    y = datasets["test"].labels[:8]
    res = fgsm(classifier, x, y, 0.0)
    assert np.array_equal(res.adversarial, x)


def test_fgsm_linear_analytic_oracle():
    rng = np.random.default_rng(3)
    d = 8 * 8 * 3
    w = rng.normal(0, 0.3, (3, d)).astype(np.float32)
    model = LinearImageModel(w)
    x = rand_images(rng, 4, size=8)
    y = rng.integers(0, 3, 4)
    eps = 0.05
    res = fgsm(model, x, y, eps)

    flat = np.transpose(x, (0, 3, 1, 2)).reshape(4, -1)
    logits = flat @ w.T
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    p[np.arange(4), y] -= 1.0
    grad_flat = p @ w
    grad = np.transpose(grad_flat.reshape(4, 3, 8, 8), (0, 2, 3, 1))
    expected = np.clip(x + eps * np.sign(grad), 0.0, 1.0).astype(np.float32)
    assert np.allclose(res.adversarial, expected, atol=1e-6)


def test_fgsm_zero_gradient_sign_convention():
    model = LinearImageModel(np.zeros((3, 8 * 8 * 3), dtype=np.float32))
    x = rand_images(np.random.default_rng(4), 3, size=8)
    res = fgsm(model, x, np.array([0, 1, 2]), 0.1)
    assert np.array_equal(res.adversarial, x)  # sign(0) == 0, no movement


# ---------------------------------------------------------------------------
# pgd / bim
# ---------------------------------------------------------------------------

def test_pgd_one_step_equals_fgsm(classifier, datasets):
    x = datasets["test"].images[:8]
    y = datasets["test"].labels[:8]
    eps = 8 / 255
    spec = small_spec(eps_iter=eps, nb_iter=1)
    a = pgd(classifier, x, y, spec, random_init=False)
    b = fgsm(classifier, x, y, eps)
    assert np.max(np.abs(a.adversarial - b.adversarial)) <= 1e-7


def test_pgd_trajectory_and_ball(classifier, datasets):
    """Replay the loop through the public ops and check every iterate."""
    x = datasets["test"].images[:6]
    y = datasets["test"].labels[:6]
    spec = small_spec(nb_iter=4)
    iterate = x.copy()
    for _ in range(spec.nb_iter):
        grad = classifier.loss_gradient(iterate, y)
        iterate = project_linf(iterate + spec.eps_iter * np.sign(grad), x,
                               spec.epsilon)
        assert linf(iterate, x).max() <= spec.epsilon + BUDGET_TOL
        assert iterate.min() >= 0.0 and iterate.max() <= 1.0
    res = pgd(classifier, x, y, spec, random_init=False)
    assert np.max(np.abs(res.adversarial - iterate)) <= 1e-6


def test_pgd_random_init_stays_in_ball(classifier, datasets):
    x = datasets["test"].images[:8]
    y = datasets["test"].labels[:8]
    res = pgd(classifier, x, y, small_spec(nb_iter=2), random_init=True, seed=11)
    assert linf(res.adversarial, x).max() <= 8 / 255 + BUDGET_TOL


def test_pgd_deterministic_given_seed(classifier, datasets):
    x = datasets["test"].images[:8]
    y = datasets["test"].labels[:8]
    spec = small_spec(nb_iter=3)
    a = pgd(classifier, x, y, spec, random_init=True, seed=5)
    b = pgd(classifier, x, y, spec, random_init=True, seed=5)
    assert np.array_equal(a.adversarial, b.adversarial)
    c = pgd(classifier, x, y, spec, random_init=True, seed=6)
    assert not np.array_equal(a.adversarial, c.adversarial)


def test_monotone_harm_with_budget(classifier, datasets):
    x = datasets["test"].images
    y = datasets["test"].labels
    small = pgd(classifier, x, y, small_spec(epsilon=2 / 255, nb_iter=10),
                random_init=False)
    large = pgd(classifier, x, y, small_spec(epsilon=16 / 255, eps_iter=0.01,
                                             nb_iter=10), random_init=False)
    acc_small = float(np.mean(classifier.predict(small.adversarial) == y))
    acc_large = float(np.mean(classifier.predict(large.adversarial) == y))
    assert acc_large <= acc_small


# ---------------------------------------------------------------------------
# mifgsm
# ---------------------------------------------------------------------------

def test_mifgsm_zero_decay_equals_bim(classifier, datasets):
    x = datasets["test"].images[:8]
    y = datasets["test"].labels[:8]
    spec = small_spec(method="mifgsm", decay=0.0, nb_iter=4)
    a = mifgsm(classifier, x, y, spec)
    b = pgd(classifier, x, y, small_spec(nb_iter=4), random_init=False)
    assert np.max(np.abs(a.adversarial - b.adversarial)) <= 1e-7


def test_mifgsm_zero_gradient_is_identity():
    model = LinearImageModel(np.zeros((3, 8 * 8 * 3), dtype=np.float32))
    x = rand_images(np.random.default_rng(5), 3, size=8)
    spec = small_spec(method="mifgsm", nb_iter=3)
    res = mifgsm(model, x, np.array([0, 1, 2]), spec)
    assert np.array_equal(res.adversarial, x)


def test_mifgsm_ball(classifier, datasets):
    x = datasets["test"].images[:8]
    y = datasets["test"].labels[:8]
    res = mifgsm(classifier, x, y, small_spec(method="mifgsm", nb_iter=6))
    assert linf(res.adversarial, x).max() <= 8 / 255 + BUDGET_TOL
    assert res.adversarial.min() >= 0 and res.adversarial.max() <= 1


# ---------------------------------------------------------------------------
# cw_l2
# ---------------------------------------------------------------------------

def test_cw_already_misclassified_returns_tiny_delta(classifier, datasets):
    x = datasets["test"].images[:24]
    pred = classifier.predict(x)
    wrong_y = (pred + 1) % classifier.num_classes  # label != prediction
    spec = AttackSpec(method="cw_l2", norm="l2", cw_binary_steps=1,
                      cw_iterations=2)
    res = cw_l2(classifier, x, wrong_y, spec)
    assert res.success_mask.all()
    assert res.perturbation_norm.max() <= 1e-3


def test_cw_success_means_flip(classifier, datasets):
    x = datasets["test"].images[:16]
    y = datasets["test"].labels[:16]
    spec = AttackSpec(method="cw_l2", norm="l2", cw_binary_steps=3,
                      cw_iterations=40)
    res = cw_l2(classifier, x, y, spec)
    pred = classifier.predict(res.adversarial)
    assert np.all(pred[res.success_mask] != y[res.success_mask])
    assert res.success_mask.mean() >= 0.5
    # failures return the original image untouched
    assert np.array_equal(res.adversarial[~res.success_mask],
                          x[~res.success_mask])


# ---------------------------------------------------------------------------
# deepfool
# ---------------------------------------------------------------------------

def test_deepfool_linear_analytic_distance():
    rng = np.random.default_rng(6)
    d = 8 * 8 * 3
    w_row = rng.normal(0, 1.0, d).astype(np.float32)
    # two-class linear model with logit gap f(x) = w.x + b
    weight = np.stack([w_row, -w_row]) / 2
    bias = np.array([0.25, -0.25], dtype=np.float32)
    model = LinearImageModel(weight, bias)
    x = np.full((1, 8, 8, 3), 0.5, dtype=np.float32)

    flat = np.transpose(x, (0, 3, 1, 2)).reshape(1, -1)
    gap = float(flat @ w_row + 0.5)          # logit0 - logit1
    analytic = abs(gap) / np.linalg.norm(w_row)
    overshoot = 0.02
    res = deepfool(model, x, max_iter=10, overshoot=overshoot)
    assert res.success_mask.all()
    assert res.perturbation_norm[0] == pytest.approx(
        analytic * (1 + overshoot), rel=5e-3)


def test_deepfool_zero_iterations_is_identity(classifier, datasets):
    x = datasets["test"].images[:4]
    res = deepfool(classifier, x, max_iter=0, overshoot=0.02)
    assert np.array_equal(res.adversarial, x)
    assert not res.success_mask.any()


def test_deepfool_flips_model_labels(classifier, datasets):
    x = datasets["test"].images[:24]
    orig = classifier.predict(x)
    res = deepfool(classifier, x, max_iter=50, overshoot=0.02)
    pred = classifier.predict(res.adversarial)
    assert res.success_mask.mean() >= 0.7
    assert np.all(pred[res.success_mask] != orig[res.success_mask])


# ---------------------------------------------------------------------------
# autoattack stand-in (apgd)
# ---------------------------------------------------------------------------

def test_apgd_never_worse_than_first_iterate(classifier, datasets):
    import torch.nn.functional as F
    x = datasets["test"].images[:12]
    y = datasets["test"].labels[:12]
    spec = small_spec(method="autoattack", nb_iter=10)
    res = autoattack_standin(classifier, x, y, spec, seed=3)

    def ce(images):
        logits = torch.tensor(classifier.decision_function(images))
        return F.cross_entropy(logits, torch.tensor(y), reduction="none").numpy()

    first = fgsm(classifier, x, y, 0.0)  # loss at the clean point
    # the returned best iterate cannot lose to the unperturbed loss
    assert (ce(res.adversarial) >= ce(first.adversarial) - 1e-5).all()


def test_apgd_ball_and_range(classifier, datasets):
    x = datasets["test"].images[:12]
    y = datasets["test"].labels[:12]
    res = autoattack_standin(classifier, x, y,
                             small_spec(method="autoattack", nb_iter=12), seed=4)
    assert linf(res.adversarial, x).max() <= 8 / 255 + BUDGET_TOL
    assert res.adversarial.min() >= 0 and res.adversarial.max() <= 1


def test_apgd_deterministic_given_seed(classifier, datasets):
    x = datasets["test"].images[:8]
    y = datasets["test"].labels[:8]
    spec = small_spec(method="autoattack", nb_iter=8)
    a = autoattack_standin(classifier, x, y, spec, seed=9)
    b = autoattack_standin(classifier, x, y, spec, seed=9)
    assert np.array_equal(a.adversarial, b.adversarial)


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

def test_make_attack_dispatch_identity(classifier, datasets):
    x = datasets["test"].images[:6]
    y = datasets["test"].labels[:6]
    spec = AttackSpec(method="fgsm", epsilon=0.02)
    via_registry = make_attack(spec)(classifier, x, y)
    direct = fgsm(classifier, x, y, 0.02)
    assert np.array_equal(via_registry.adversarial, direct.adversarial)


def test_make_attack_bim_is_pgd_without_init(classifier, datasets):
    x = datasets["test"].images[:6]
    y = datasets["test"].labels[:6]
    spec = small_spec(method="bim", nb_iter=3)
    via_registry = make_attack(spec)(classifier, x, y, seed=1)
    direct = pgd(classifier, x, y, small_spec(nb_iter=3), random_init=False)
    assert np.array_equal(via_registry.adversarial, direct.adversarial)


def test_registry_error_lists_all_seven():
    with pytest.raises(ConfigError) as err:
        AttackSpec(method="pgd2")
    for name in ATTACK_METHODS:
        assert name in str(err.value)
    assert len(ATTACK_METHODS) == 7


def test_chunked_execution_matches_single_batch(classifier, datasets):
    import advdef.attacks as attacks_mod
    x = datasets["test"].images[:20]
    y = datasets["test"].labels[:20]
    spec = small_spec(nb_iter=2, random_init=False)
    whole = make_attack(spec)(classifier, x, y, seed=2)
    old = attacks_mod.ATTACK_CHUNK
    attacks_mod.ATTACK_CHUNK = 7
    try:
        chunked = make_attack(spec)(classifier, x, y, seed=2)
    finally:
        attacks_mod.ATTACK_CHUNK = old
    # deterministic attacks are chunk-invariant
    assert np.array_equal(whole.adversarial, chunked.adversarial)


def test_report_label_marks_the_standin():
    assert report_label("autoattack") == "autoattack(standin)"
    assert report_label("pgd") == "pgd"


# ---------------------------------------------------------------------------
# budget property sweep (the larger version lives in acceptance)
# ---------------------------------------------------------------------------

def test_budget_property_random_cases(classifier, datasets):
    rng = np.random.default_rng(12)
    x_pool = datasets["test"].images
    y_pool = datasets["test"].labels
    cases = 0
    for trial in range(8):
        idx = rng.choice(len(x_pool), size=25, replace=False)
        x, y = x_pool[idx], y_pool[idx]
        eps = float(rng.uniform(0.0, 0.15))
        method = ATTACK_METHODS[trial % 5]  # the five L-inf methods
        if method == "bim":
            method = "pgd"
        spec = AttackSpec(method=method if method in ("pgd", "mifgsm", "autoattack")
                          else "pgd",
                          epsilon=eps, eps_iter=float(rng.uniform(0.004, 0.05)),
                          nb_iter=int(rng.integers(1, 5)))
        res = make_attack(spec)(classifier, x, y, seed=int(rng.integers(1 << 30)))
        assert linf(res.adversarial, x).max() <= eps + BUDGET_TOL
        assert res.adversarial.min() >= 0.0 and res.adversarial.max() <= 1.0
        cases += len(x)
    assert cases == 200
