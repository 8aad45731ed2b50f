import numpy as np
import pytest
import torch
from sklearn.exceptions import NotFittedError

from advdef import CNNClassifier
from advdef.classifier import FEATURE_LAYERS, SmallCNN, parameter_digest
from conftest import LinearImageModel, rand_images


def linear_estimator(weight, bias=None, num_classes=None):
    """CNNClassifier shell around a hand-built linear module."""
    est = CNNClassifier(num_classes=num_classes or weight.shape[0])
    est.module_ = LinearImageModel(weight, bias)
    est.classes_ = np.arange(est.num_classes)
    est.input_size_ = 16
    est.train_accuracy_ = 1.0
    return est


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        CNNClassifier().predict(np.zeros((1, 32, 32, 3), dtype=np.float32))


def test_fit_reaches_sane_accuracy(classifier, datasets):
    assert classifier.train_accuracy_ >= 0.8
    acc = classifier.score(datasets["test"].images, datasets["test"].labels)
    assert acc >= 0.5  # the tiny fixture model; the desk gate lives in acceptance


def nchw_flat(x):
    """Flatten NHWC images the way the internal torch modules see them."""
    return np.transpose(x, (0, 3, 1, 2)).reshape(len(x), -1)


def test_one_epoch_beats_chance_on_train():
    rng = np.random.default_rng(0)
    x = rand_images(rng, 10, size=32)
    y = np.arange(10) % 10
    clf = CNNClassifier(epochs=1, seed=0).fit(x, y)
    assert clf.train_accuracy_ >= 0.10


def test_fit_deterministic_same_seed(datasets):
    x, y = datasets["train"].images, datasets["train"].labels
    a = CNNClassifier(epochs=2, seed=3).fit(x, y)
    b = CNNClassifier(epochs=2, seed=3).fit(x, y)
    for (ka, ta), (kb, tb) in zip(sorted(a.module_.state_dict().items()),
                                  sorted(b.module_.state_dict().items())):
        assert ka == kb
        assert torch.equal(ta, tb), f"parameter {ka} differs between runs"


def test_divergence_aborts(datasets):
    x, y = datasets["train"].images[:40], datasets["train"].labels[:40]
    with pytest.raises(RuntimeError, match="diverged"):
        CNNClassifier(epochs=3, lr=1e20, batch_size=8, seed=0).fit(x, y)


def test_probabilities_sum_to_one(classifier, datasets):
    proba = classifier.predict_proba(datasets["test"].images[:32])
    assert np.allclose(proba.sum(axis=1), 1.0, atol=1e-5)


def test_uniform_logits_confidence_and_tie_break():
    est = linear_estimator(np.zeros((10, 16 * 16 * 3), dtype=np.float32))
    x = rand_images(np.random.default_rng(0), 4, size=16)
    preds = est.predictions(x)
    for p in preds:
        assert p.label == 0             # equal logits break toward index 0
        assert p.confidence == pytest.approx(0.1, abs=1e-6)


def test_hand_built_linear_prediction():
    # two classes scored by mean intensity of disjoint halves
    d = 16 * 16 * 3
    w = np.zeros((2, d), dtype=np.float32)
    w[0, : d // 2] = 1.0
    w[1, d // 2:] = 1.0
    est = linear_estimator(w)
    # brighten exactly the pixels class 0 scores (nchw flat order)
    flat = np.zeros((1, d), dtype=np.float32)
    flat[0, : d // 2] = 0.9
    x = np.transpose(flat.reshape(1, 3, 16, 16), (0, 2, 3, 1)).copy()
    logits = est.decision_function(x)
    assert np.argmax(logits) == 0
    assert logits[0, 0] == pytest.approx(0.9 * d / 2, rel=1e-5)


def test_loss_gradient_matches_linear_closed_form():
    rng = np.random.default_rng(1)
    d = 16 * 16 * 3
    w = rng.normal(0, 0.05, (3, d)).astype(np.float32)
    est = linear_estimator(w)
    x = rand_images(rng, 5, size=16)
    y = rng.integers(0, 3, 5)
    grad = est.loss_gradient(x, y)
    flat = nchw_flat(x)
    logits = flat @ w.T
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    p[np.arange(5), y] -= 1.0
    expected_flat = p @ w
    expected = np.transpose(expected_flat.reshape(5, 3, 16, 16), (0, 2, 3, 1))
    assert np.allclose(grad, expected, atol=1e-5)


def test_loss_gradient_zero_for_constant_model():
    est = linear_estimator(np.zeros((4, 16 * 16 * 3), dtype=np.float32))
    x = rand_images(np.random.default_rng(2), 3, size=16)
    grad = est.loss_gradient(x, np.array([0, 1, 2]))
    assert np.all(grad == 0.0)


def test_gradient_matches_finite_differences_single_precision():
    # smooth (linear-softmax) model: the 1e-2 single-precision tolerance
    # is meaningful there; the ReLU CNN is checked in double below
    rng = np.random.default_rng(1)
    d = 16 * 16 * 3
    w = rng.normal(0, 0.1, (4, d)).astype(np.float32)
    est = linear_estimator(w)
    x = rand_images(rng, 2, size=16)
    y = np.array([1, 3])
    grad = est.loss_gradient(x, y)

    def loss_at(xx):
        logits = est.decision_function(xx).astype(np.float64)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return -logp[np.arange(len(y)), y].sum()

    h = 1e-3
    checked = 0
    while checked < 8:
        i = rng.integers(0, len(x))
        hh, ww, cc = rng.integers(0, 16), rng.integers(0, 16), rng.integers(0, 3)
        if not (h <= x[i, hh, ww, cc] <= 1 - h) or abs(grad[i, hh, ww, cc]) < 1e-3:
            continue
        hi, lo = x.copy(), x.copy()
        hi[i, hh, ww, cc] += h
        lo[i, hh, ww, cc] -= h
        fd = (loss_at(hi) - loss_at(lo)) / (2 * h)
        assert grad[i, hh, ww, cc] == pytest.approx(fd, rel=1e-2)
        checked += 1


def test_gradient_matches_finite_differences_cnn_double(classifier, datasets):
    # the trained CNN, checked in double precision at the tight tolerance
    import torch.nn.functional as F
    x = datasets["test"].images[:2].copy()
    y = datasets["test"].labels[:2]
    module = classifier.frozen_feature_module().double()

    def loss_at(xx):
        xt = torch.tensor(np.transpose(xx, (0, 3, 1, 2)), dtype=torch.float64)
        return float(F.cross_entropy(module(xt), torch.tensor(y), reduction="sum"))

    xt = torch.tensor(np.transpose(x, (0, 3, 1, 2)), dtype=torch.float64,
                      requires_grad=True)
    loss = F.cross_entropy(module(xt), torch.tensor(y), reduction="sum")
    (g,) = torch.autograd.grad(loss, xt)
    grad = g.permute(0, 2, 3, 1).numpy()
    # float32 autograd agrees with the double path to float32 resolution
    assert np.allclose(classifier.loss_gradient(x, y), grad, atol=1e-4)

    rng = np.random.default_rng(3)
    h = 1e-6
    checked = 0
    x64 = x.astype(np.float64)
    while checked < 8:
        i = rng.integers(0, len(x))
        hh, ww, cc = rng.integers(0, 32), rng.integers(0, 32), rng.integers(0, 3)
        if not (h <= x[i, hh, ww, cc] <= 1 - h) or abs(grad[i, hh, ww, cc]) < 1e-4:
            continue
        hi, lo = x64.copy(), x64.copy()
        hi[i, hh, ww, cc] += h
        lo[i, hh, ww, cc] -= h
        fd = (loss_at(hi) - loss_at(lo)) / (2 * h)
        assert grad[i, hh, ww, cc] == pytest.approx(fd, rel=1e-4)
        checked += 1


def test_feature_activations_contracts(classifier, datasets):
    x = datasets["test"].images[:4]
    assert classifier.feature_activations(x, []) == []
    feats = classifier.feature_activations(x, list(FEATURE_LAYERS))
    assert len(feats) == len(FEATURE_LAYERS)
    again = classifier.feature_activations(x, list(FEATURE_LAYERS))
    for a, b in zip(feats, again):
        assert np.array_equal(a, b)
    with pytest.raises(ValueError, match="block1"):
        classifier.feature_activations(x, ["conv9"])


def test_features_respond_to_perturbation(classifier, datasets):
    x = datasets["test"].images[:2]
    delta = np.clip(x + 0.01, 0, 1)
    fa = classifier.feature_activations(x, ["block1"])[0]
    fb = classifier.feature_activations(delta, ["block1"])[0]
    assert np.abs(fa - fb).max() > 0


def test_inference_is_pure(classifier, datasets):
    x, y = datasets["test"].images[:8], datasets["test"].labels[:8]
    before = parameter_digest(classifier.module_)
    classifier.predict(x)
    classifier.feature_activations(x, ["block2"])
    classifier.loss_gradient(x, y)
    assert parameter_digest(classifier.module_) == before


def test_size_agnostic_inference(classifier):
    x = rand_images(np.random.default_rng(4), 2, size=36)
    assert classifier.predict(x).shape == (2,)
    with pytest.raises(ValueError, match="16x16"):
        classifier.predict(rand_images(np.random.default_rng(4), 1, size=8))


def test_save_load_round_trip(classifier, datasets, tmp_path):
    path = tmp_path / "clf.pt"
    classifier.save(path)
    loaded = CNNClassifier.load(path)
    x = datasets["test"].images[:16]
    assert np.array_equal(loaded.predict(x), classifier.predict(x))
    assert np.allclose(loaded.decision_function(x),
                       classifier.decision_function(x))


def test_frozen_feature_module_is_detached(classifier):
    frozen = classifier.frozen_feature_module()
    assert all(not p.requires_grad for p in frozen.parameters())
    assert all(p.requires_grad for p in classifier.module_.parameters())


def test_smallcnn_rejects_bad_widths():
    with pytest.raises(ValueError, match="widths"):
        SmallCNN(widths=(32, 64))
