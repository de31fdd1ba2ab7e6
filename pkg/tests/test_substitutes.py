import numpy as np
import pytest

from canforest.errors import TrainingError
from canforest.features import LabeledDataset
from canforest.forest import DecisionTree
from canforest.substitutes import (MlpParams, MlpSubstitute, SvmParams, decode_substitute, encode_substitute,
                                   mlp_gradient, mlp_jacobian, train_dt, train_mlp, train_svm)

from conftest import blobs


def random_mlp(seed=0, hidden=16, n_classes=4, scale=0.4):
    """Random network kept out of softmax saturation, where differences of
    probabilities near 1 would drown in rounding."""
    rng = np.random.default_rng(seed)
    sizes = [(9, hidden), (hidden, hidden), (hidden, n_classes)]
    return MlpSubstitute(tuple(rng.normal(0, scale, s) for s in sizes), tuple(rng.normal(0, 0.3, s[1]) for s in sizes),
                         ("A", "B", "C", "D")[:n_classes])


def loss(m, x, k):
    return -np.log(m.predict_proba(x)[0, k])


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def smooth_inputs(m, rng, count, margin=1e-3):
    """Random inputs whose ReLU pre-activations all sit at least `margin` from the
    kink, so the +-h stencil stays on one linear piece."""
    out = []
    while len(out) < count:
        x = rng.random(9)
        z1, _, z2, _, _ = m._forward(x[None])
        if min(np.abs(z1).min(), np.abs(z2).min()) >= margin:
            out.append(x)
    return out


def test_gradient_matches_central_differences():
    m = random_mlp()
    rng = np.random.default_rng(1)
    h = 1e-5
    for x in smooth_inputs(m, rng, 100):
        k = int(rng.integers(4))
        fd = np.array([(loss(m, x + h * e, k) - loss(m, x - h * e, k)) / (2 * h) for e in np.eye(9)])
        assert rel_err(mlp_gradient(m, x, k), fd) < 1e-4


def test_jacobian_matches_central_differences():
    m = random_mlp(2)
    rng = np.random.default_rng(3)
    h = 1e-5
    for x in smooth_inputs(m, rng, 100):
        fd = np.stack([(m.predict_proba(x + h * e)[0] - m.predict_proba(x - h * e)[0]) / (2 * h) for e in np.eye(9)], 1)
        J = mlp_jacobian(m, x)
        for j in range(4):
            assert rel_err(J[j], fd[j]) < 1e-4


def test_dead_network_has_zero_gradient():
    m = random_mlp()
    zero = MlpSubstitute(tuple(np.zeros_like(w) for w in m.weights), m.biases, m.class_names)
    assert not mlp_gradient(zero, np.full(9, 0.5), 0).any()


def test_mlp_learns_separable_blobs():
    ds = blobs(40, n_classes=2)
    m = train_mlp(ds, MlpParams(epochs=50), seed=0)
    assert np.mean(m.predict(ds.X) == ds.y) >= 0.95
    assert m.loss_history[-1] < m.loss_history[0]


def test_mlp_and_svm_are_seed_deterministic():
    ds = blobs(10)
    assert encode_substitute(train_mlp(ds, MlpParams(epochs=5), 3)) == encode_substitute(train_mlp(ds, MlpParams(epochs=5), 3))
    assert encode_substitute(train_svm(ds, SvmParams(epochs=20), 3)) == encode_substitute(train_svm(ds, SvmParams(epochs=20), 3))


def test_svm_separates_one_dimensional_data():
    x = np.linspace(0, 1, 40)
    X = np.zeros((40, 9))
    X[:, 0] = x
    ds = LabeledDataset(X, (x > 0.5).astype(int), ("A", "B"))
    s = train_svm(ds, SvmParams(reg=1e-4, epochs=2000, lr=1.0))
    assert np.array_equal(s.predict(X), ds.y)
    assert s.objective_history[-1] < s.objective_history[0]


@pytest.mark.parametrize("train", [train_mlp, train_svm, train_dt])
def test_single_class_refused(train):
    ds = blobs(10, n_classes=1)
    with pytest.raises(TrainingError):
        train(ds)


def test_substitute_encoding_round_trip():
    ds = blobs(10)
    for model in (train_mlp(ds, MlpParams(epochs=3)), train_svm(ds, SvmParams(epochs=5)), train_dt(ds)):
        back = decode_substitute(encode_substitute(model))
        assert encode_substitute(back) == encode_substitute(model)
        assert np.array_equal(back.predict(ds.X), model.predict(ds.X))
    assert isinstance(decode_substitute(encode_substitute(train_dt(ds))), DecisionTree)
