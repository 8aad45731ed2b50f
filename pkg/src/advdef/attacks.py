"""Seven white-box attacks with a string-keyed registry.

All attacks consume and produce NHWC float32 batches in [0, 1]; the
torch NCHW conversion is internal. Every attack is pure with respect to
the model and its own inputs. L-inf attacks guarantee
``max|adv - x| <= epsilon`` and outputs inside [0, 1]; the two
minimal-perturbation attacks (cw_l2, deepfool) encode per-image failure
in ``success_mask`` instead of raising.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.exceptions import NotFittedError

from .config import AttackConfig, ExperimentConfig, parse_fraction
from .errors import ConfigError
from .seeding import derive_seed
from .validation import check_image_batch, check_labels, to_nchw, to_nhwc

ATTACK_METHODS = ("fgsm", "bim", "pgd", "mifgsm", "cw_l2", "deepfool", "autoattack")
LINF_METHODS = ("fgsm", "bim", "pgd", "mifgsm", "autoattack")
BUDGET_TOL = 1e-6


@dataclass(frozen=True)
class AttackSpec:
    """One attack plus its budget; field meanings follow the method."""

    method: str
    epsilon: float = 8.0 / 255.0     # L-inf radius (unused by cw_l2/deepfool)
    eps_iter: float = 0.01           # per-step size for iterative methods
    nb_iter: int = 40
    norm: str = "linf"
    decay: float = 1.0               # mifgsm momentum mu
    overshoot: float = 0.02          # deepfool
    max_iter: int = 50               # deepfool
    num_candidates: int = 10         # deepfool candidate classes
    random_init: bool = True         # pgd only
    cw_confidence: float = 0.0
    cw_binary_steps: int = 5
    cw_iterations: int = 100
    cw_lr: float = 0.01
    cw_initial_c: float = 0.01

    def __post_init__(self):
        if self.method not in ATTACK_METHODS:
            raise ConfigError(
                f"unknown attack method {self.method!r}; "
                f"registered: {list(ATTACK_METHODS)}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.method != "fgsm" and self.method in LINF_METHODS:
            if self.eps_iter <= 0 or self.nb_iter < 1:
                raise ConfigError("iterative attacks need eps_iter > 0 and nb_iter >= 1")
        if self.method in LINF_METHODS and self.norm != "linf":
            raise ConfigError(f"{self.method} requires norm == 'linf'")
        if self.method in ("cw_l2", "deepfool") and self.norm != "l2":
            raise ConfigError(f"{self.method} requires norm == 'l2'")
        if self.decay < 0:
            raise ConfigError("decay must be >= 0")


@dataclass
class AttackResult:
    """Adversarial batch plus per-image success flags and perturbation size."""

    adversarial: np.ndarray        # (N, H, W, C) in [0, 1]
    success_mask: np.ndarray       # (N,) bool: prediction changed
    perturbation_norm: np.ndarray  # (N,) float in the attack's norm


def _module_of(model) -> nn.Module:
    if isinstance(model, nn.Module):
        return model
    module = getattr(model, "module_", None)
    if module is None:
        raise NotFittedError("model must be a torch module or a fitted classifier")
    return module


def _logits(module: nn.Module, x: torch.Tensor) -> torch.Tensor:
    return module(x)


def _ce_grad(module: nn.Module, x: torch.Tensor, y: torch.Tensor):
    """Per-sample CE loss and its gradient w.r.t. x (sum-reduced backward)."""
    xg = x.detach().requires_grad_(True)
    logits = _logits(module, xg)
    loss = F.cross_entropy(logits, y, reduction="none")
    (grad,) = torch.autograd.grad(loss.sum(), xg)
    return loss.detach(), grad.detach(), logits.detach()


def _result(module, x0: torch.Tensor, adv: torch.Tensor, y: torch.Tensor | None,
            norm: str) -> AttackResult:
    with torch.no_grad():
        pred = _logits(module, adv).argmax(1)
        if y is None:
            ref = _logits(module, x0).argmax(1)
        else:
            ref = y
    delta = (adv - x0).flatten(1)
    if norm == "linf":
        norms = delta.abs().amax(dim=1)
    else:
        norms = delta.norm(dim=1)
    return AttackResult(
        adversarial=to_nhwc(adv),
        success_mask=(pred != ref).cpu().numpy(),
        perturbation_norm=norms.cpu().numpy().astype(np.float64),
    )


def _gen(seed) -> torch.Generator | None:
    if seed is None:
        return None
    g = torch.Generator()
    g.manual_seed(int(seed) & ((1 << 63) - 1))
    return g


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------

def project_linf(candidate: np.ndarray, anchor: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip into the L-inf ball around anchor, then into [0, 1]. Idempotent."""
    candidate = np.asarray(candidate, dtype=np.float32)
    anchor = np.asarray(anchor, dtype=np.float32)
    if candidate.shape != anchor.shape:
        raise ValueError(f"shape mismatch: {candidate.shape} vs {anchor.shape}")
    out = np.clip(candidate, anchor - epsilon, anchor + epsilon)
    return np.clip(out, 0.0, 1.0)


def _project_linf_t(candidate: torch.Tensor, anchor: torch.Tensor,
                    epsilon: float) -> torch.Tensor:
    out = torch.clamp(candidate, anchor - epsilon, anchor + epsilon)
    return out.clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# attacks
# ---------------------------------------------------------------------------

def fgsm(model, x, y, epsilon: float) -> AttackResult:
    """Single sign-gradient step of size epsilon, clipped to [0, 1]."""
    module = _module_of(model)
    x = check_image_batch(x, "x")
    y = check_labels(y, "y", n=len(x))
    xt = to_nchw(x)
    yt = torch.tensor(y)
    _, grad, _ = _ce_grad(module, xt, yt)
    adv = (xt + epsilon * grad.sign()).clamp(0.0, 1.0)
    return _result(module, xt, adv, yt, "linf")


def pgd(model, x, y, spec: AttackSpec, random_init: bool = True,
        seed=None) -> AttackResult:
    """Iterative sign-gradient ascent projected into the epsilon ball.

    ``random_init=False`` is exactly BIM; with it, the start point is
    uniform in the ball (projected to [0, 1]).
    """
    if spec.norm != "linf":
        raise ConfigError("pgd requires an L-inf spec")
    module = _module_of(model)
    x = check_image_batch(x, "x")
    y = check_labels(y, "y", n=len(x))
    x0 = to_nchw(x)
    yt = torch.tensor(y)
    adv = x0.clone()
    if random_init and spec.epsilon > 0:
        noise = torch.empty_like(x0).uniform_(-spec.epsilon, spec.epsilon,
                                              generator=_gen(seed))
        adv = (x0 + noise).clamp(0.0, 1.0)
    for _ in range(spec.nb_iter):
        _, grad, _ = _ce_grad(module, adv, yt)
        adv = _project_linf_t(adv + spec.eps_iter * grad.sign(), x0, spec.epsilon)
    return _result(module, x0, adv, yt, "linf")


def mifgsm(model, x, y, spec: AttackSpec) -> AttackResult:
    """Iterative sign-gradient attack with an L1-normalized momentum buffer.

    g <- mu*g + grad/||grad||_1 per image (0/0 defined as 0), stepping by
    sign(g); decay mu == 0 reduces exactly to BIM.
    """
    if spec.norm != "linf":
        raise ConfigError("mifgsm requires an L-inf spec")
    module = _module_of(model)
    x = check_image_batch(x, "x")
    y = check_labels(y, "y", n=len(x))
    x0 = to_nchw(x)
    yt = torch.tensor(y)
    adv = x0.clone()
    g = torch.zeros_like(x0)
    for _ in range(spec.nb_iter):
        _, grad, _ = _ce_grad(module, adv, yt)
        l1 = grad.abs().flatten(1).sum(dim=1).view(-1, 1, 1, 1)
        unit = torch.where(l1 > 0, grad / l1.clamp(min=1e-38), torch.zeros_like(grad))
        g = spec.decay * g + unit
        adv = _project_linf_t(adv + spec.eps_iter * g.sign(), x0, spec.epsilon)
    return _result(module, x0, adv, yt, "linf")


def cw_l2(model, x, y, spec: AttackSpec) -> AttackResult:
    """Untargeted Carlini-Wagner L2 with binary search over the constant c.

    Minimizes ||delta||_2^2 + c*f(x+delta) where f is the max-margin logit
    loss with confidence kappa, using the tanh change of variables for the
    box constraint. Returns the lowest-norm successful adversarial per
    image, or the original with success False.
    """
    module = _module_of(model)
    x = check_image_batch(x, "x")
    y = check_labels(y, "y", n=len(x))
    x0 = to_nchw(x)
    yt = torch.tensor(y)
    n = len(x)

    # tanh-space anchor; small shrink keeps atanh finite at the box edges
    shrink = 1.0 - 1e-6
    w0 = torch.atanh((2.0 * x0 - 1.0) * shrink)

    lower = torch.zeros(n)
    upper = torch.full((n,), float("inf"))
    c = torch.full((n,), float(spec.cw_initial_c))

    best_adv = x0.clone()
    best_l2 = torch.full((n,), float("inf"))
    onehot_big = None

    for _ in range(spec.cw_binary_steps):
        w = w0.clone().requires_grad_(True)
        opt = torch.optim.Adam([w], lr=spec.cw_lr)
        success_at_c = torch.zeros(n, dtype=torch.bool)
        for _ in range(spec.cw_iterations + 1):
            x_adv = (torch.tanh(w) + 1.0) / 2.0
            logits = _logits(module, x_adv)
            if onehot_big is None:
                onehot_big = F.one_hot(yt, logits.shape[1]).float() * 1e9
            real = logits.gather(1, yt.view(-1, 1)).squeeze(1)
            other = (logits - onehot_big).amax(dim=1)
            f = torch.clamp(real - other + spec.cw_confidence, min=0.0)
            l2 = (x_adv - x0).flatten(1).pow(2).sum(dim=1)

            with torch.no_grad():
                flipped = logits.argmax(1) != yt
                improved = flipped & (l2 < best_l2)
                if improved.any():
                    best_l2 = torch.where(improved, l2.detach(), best_l2)
                    best_adv = torch.where(improved.view(-1, 1, 1, 1),
                                           x_adv.detach(), best_adv)
                success_at_c |= flipped

            loss = (l2 + c * f).sum()
            opt.zero_grad()
            loss.backward()
            opt.step()
        # binary search: shrink c where the attack succeeded, grow otherwise
        upper = torch.where(success_at_c, torch.minimum(upper, c), upper)
        lower = torch.where(success_at_c, lower, torch.maximum(lower, c))
        c = torch.where(torch.isinf(upper), lower * 10.0, (lower + upper) / 2.0)

    found = torch.isfinite(best_l2)
    adv = torch.where(found.view(-1, 1, 1, 1), best_adv, x0).clamp(0.0, 1.0)
    delta_norm = (adv - x0).flatten(1).norm(dim=1)
    return AttackResult(
        adversarial=to_nhwc(adv),
        success_mask=found.cpu().numpy(),
        perturbation_norm=delta_norm.cpu().numpy().astype(np.float64),
    )


def deepfool(model, x, max_iter: int = 50, overshoot: float = 0.02,
             num_candidates: int = 10) -> AttackResult:
    """Iterative minimal-perturbation attack against the model's own labels.

    Linearizes the decision boundaries to the top candidate classes,
    steps to the nearest one, and scales the accumulated perturbation by
    (1 + overshoot). Success means the predicted label flipped within
    max_iter; labels are the model's predictions on x, no ground truth
    is consulted.
    """
    module = _module_of(model)
    x = check_image_batch(x, "x")
    x0 = to_nchw(x)
    n = len(x)

    with torch.no_grad():
        logits0 = _logits(module, x0)
    orig = logits0.argmax(1)
    n_classes = logits0.shape[1]
    k = min(num_candidates, n_classes)
    # candidate classes per image: top-k of the original logits, minus the
    # original class itself
    ranked = logits0.argsort(dim=1, descending=True)
    cand = torch.stack([row[row != o][:k - 1] if k > 1 else row[:0]
                        for row, o in zip(ranked, orig)])

    r_tot = torch.zeros_like(x0)
    for _ in range(max_iter):
        x_i = (x0 + (1.0 + overshoot) * r_tot).detach().requires_grad_(True)
        logits = _logits(module, x_i)
        active = logits.argmax(1) == orig
        if not active.any():
            break
        f_orig = logits.gather(1, orig.view(-1, 1)).squeeze(1)
        (grad_orig,) = torch.autograd.grad(f_orig.sum(), x_i, retain_graph=True)

        best_ratio = torch.full((n,), float("inf"))
        best_r = torch.zeros_like(x0)
        for j in range(cand.shape[1]):
            cls_j = cand[:, j]
            f_j = logits.gather(1, cls_j.view(-1, 1)).squeeze(1)
            retain = j < cand.shape[1] - 1
            (grad_j,) = torch.autograd.grad(f_j.sum(), x_i, retain_graph=retain)
            w = grad_j - grad_orig
            f_diff = (f_j - f_orig).detach()
            w_norm = w.flatten(1).norm(dim=1).clamp(min=1e-12)
            ratio = f_diff.abs() / w_norm
            r_j = ((f_diff.abs() + 1e-4) / w_norm.pow(2)).view(-1, 1, 1, 1) * w
            take = ratio < best_ratio
            best_ratio = torch.where(take, ratio, best_ratio)
            best_r = torch.where(take.view(-1, 1, 1, 1), r_j, best_r)
        r_tot = torch.where(active.view(-1, 1, 1, 1), r_tot + best_r, r_tot)

    adv = (x0 + (1.0 + overshoot) * r_tot).clamp(0.0, 1.0)
    return _result(module, x0, adv, None, "l2")


def autoattack_standin(model, x, y, spec: AttackSpec, seed=None) -> AttackResult:
    """Auto-PGD with cross-entropy loss (single run), standing in for the
    full AutoAttack ensemble.

    Gradient ascent with momentum 0.75, a checkpoint schedule that halves
    the per-image step size on stagnation (restarting from the best point
    seen), and best-iterate tracking by loss. Same epsilon-ball contract
    as pgd. Reports label the result "autoattack(standin)".
    """
    if spec.norm != "linf":
        raise ConfigError("autoattack_standin requires an L-inf spec")
    module = _module_of(model)
    x = check_image_batch(x, "x")
    y = check_labels(y, "y", n=len(x))
    x0 = to_nchw(x)
    yt = torch.tensor(y)
    n = len(x)
    n_iter = max(int(spec.nb_iter), 1)
    alpha = 0.75      # momentum weight on the gradient step
    rho = 0.75        # stagnation fraction for step halving

    # checkpoint schedule: p0=0, p1=0.22, p_{j+1}=p_j+max(p_j-p_{j-1}-0.03, 0.06)
    ps = [0.0, 0.22]
    while ps[-1] < 1.0:
        ps.append(ps[-1] + max(ps[-1] - ps[-2] - 0.03, 0.06))
    checkpoints = sorted({min(int(np.ceil(p * n_iter)), n_iter) for p in ps})

    if spec.epsilon > 0:
        noise = torch.empty_like(x0).uniform_(-spec.epsilon, spec.epsilon,
                                              generator=_gen(seed))
        x_k = (x0 + noise).clamp(0.0, 1.0)
    else:
        x_k = x0.clone()

    loss_k, grad, _ = _ce_grad(module, x_k, yt)
    best_loss = loss_k.clone()
    best_x = x_k.clone()
    eta = torch.full((n, 1, 1, 1), 2.0 * spec.epsilon)

    x_prev = x_k.clone()
    improves = torch.zeros(n)
    best_at_last_ckpt = best_loss.clone()
    eta_at_last_ckpt = eta.clone()
    last_ckpt = 0

    for k in range(1, n_iter + 1):
        z = _project_linf_t(x_k + eta * grad.sign(), x0, spec.epsilon)
        if k == 1:
            x_next = z
        else:
            step = x_k + alpha * (z - x_k) + (1 - alpha) * (x_k - x_prev)
            x_next = _project_linf_t(step, x0, spec.epsilon)
        x_prev = x_k
        x_k = x_next
        loss_next, grad, _ = _ce_grad(module, x_k, yt)
        improves += (loss_next > loss_k).float()
        loss_k = loss_next

        better = loss_next > best_loss
        if better.any():
            best_loss = torch.where(better, loss_next, best_loss)
            best_x = torch.where(better.view(-1, 1, 1, 1), x_k, best_x)

        if k in checkpoints and k < n_iter:
            span = k - last_ckpt
            cond1 = improves < rho * span
            cond2 = (eta_at_last_ckpt.view(-1) == eta.view(-1)) & \
                    (best_at_last_ckpt >= best_loss)
            halve = cond1 | cond2
            if halve.any():
                eta = torch.where(halve.view(-1, 1, 1, 1), eta / 2.0, eta)
                x_k = torch.where(halve.view(-1, 1, 1, 1), best_x, x_k)
                x_prev = torch.where(halve.view(-1, 1, 1, 1), best_x, x_prev)
                loss_k, grad, _ = _ce_grad(module, x_k, yt)
            improves = torch.zeros(n)
            best_at_last_ckpt = best_loss.clone()
            eta_at_last_ckpt = eta.clone()
            last_ckpt = k

    return _result(module, x0, best_x, yt, "linf")


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

#: sub-batch size for registry-dispatched attacks; every attack treats
#: images independently, so chunking never changes the result for a
#: fixed chunk size and per-chunk derived seeds
ATTACK_CHUNK = 128


def _chunked(fn):
    def run(model, x, y, seed=None):
        x = check_image_batch(x, "x")
        n = len(x)
        if n <= ATTACK_CHUNK:
            return fn(model, x, y, seed)
        parts = []
        for ci, start in enumerate(range(0, n, ATTACK_CHUNK)):
            sl = slice(start, start + ATTACK_CHUNK)
            part_seed = None if seed is None else derive_seed(seed, "chunk", ci)
            parts.append(fn(model, x[sl], None if y is None else y[sl], part_seed))
        return AttackResult(
            adversarial=np.concatenate([p.adversarial for p in parts]),
            success_mask=np.concatenate([p.success_mask for p in parts]),
            perturbation_norm=np.concatenate([p.perturbation_norm for p in parts]),
        )
    return run


def make_attack(spec: AttackSpec):
    """Closure (model, x, y, seed=None) -> AttackResult for the spec's method.

    'bim' dispatches to pgd without random init; 'deepfool' ignores y.
    Large batches run in fixed-size chunks with per-chunk derived seeds.
    """
    method = spec.method
    if method == "fgsm":
        fn = lambda model, x, y, seed: fgsm(model, x, y, spec.epsilon)
    elif method == "bim":
        fn = lambda model, x, y, seed: pgd(model, x, y, spec,
                                           random_init=False, seed=seed)
    elif method == "pgd":
        fn = lambda model, x, y, seed: pgd(model, x, y, spec,
                                           random_init=spec.random_init, seed=seed)
    elif method == "mifgsm":
        fn = lambda model, x, y, seed: mifgsm(model, x, y, spec)
    elif method == "cw_l2":
        fn = lambda model, x, y, seed: cw_l2(model, x, y, spec)
    elif method == "deepfool":
        fn = lambda model, x, y, seed: deepfool(
            model, x, spec.max_iter, spec.overshoot, spec.num_candidates)
    elif method == "autoattack":
        fn = lambda model, x, y, seed: autoattack_standin(model, x, y, spec,
                                                          seed=seed)
    else:
        raise ConfigError(
            f"unknown attack method {method!r}; registered: {list(ATTACK_METHODS)}")
    return _chunked(fn)


def spec_for(method: str, attacks: AttackConfig) -> AttackSpec:
    """Build the AttackSpec for one method from the experiment config."""
    base = dict(
        method=method,
        epsilon=parse_fraction(attacks.epsilon),
        eps_iter=parse_fraction(attacks.eps_iter),
        nb_iter=attacks.nb_iter,
        norm="l2" if method in ("cw_l2", "deepfool") else "linf",
        decay=attacks.decay,
        overshoot=attacks.overshoot,
        max_iter=attacks.deepfool_max_iter,
        cw_confidence=attacks.cw_confidence,
        cw_binary_steps=attacks.cw_binary_steps,
        cw_iterations=attacks.cw_iterations,
        cw_lr=attacks.cw_lr,
        cw_initial_c=attacks.cw_initial_c,
    )
    overrides = dict(attacks.overrides.get(method, {}))
    for key in ("epsilon", "eps_iter"):
        if key in overrides:
            overrides[key] = parse_fraction(overrides[key])
    base.update(overrides)
    return AttackSpec(**base)


def attack_specs_from_config(config: ExperimentConfig, methods=None) -> list:
    """Specs for the given methods (default: training attacks + held-out)."""
    if methods is None:
        methods = tuple(config.attacks.train_attacks) + ("deepfool",)
    return [spec_for(m, config.attacks) for m in methods]


def report_label(method: str) -> str:
    """Name used for this attack in reports; the stand-in is marked."""
    return "autoattack(standin)" if method == "autoattack" else method

