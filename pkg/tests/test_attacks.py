import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from canforest.attacks import (AdversarialBatch, DtAttack, Fgsm, Jsma, SvmAttack, craft_batch, dt_attack, fgsm, jsma,
                               parse_method, read_batch_csv, svm_attack, transferability_rate, write_batch_csv)
from canforest.errors import AttackError, EmptyInputError, InvalidInputError
from canforest.features import LabeledDataset
from canforest.forest import LEAF, DecisionTree, ForestParams
from canforest.substitutes import MlpParams, MlpSubstitute, SvmParams, SvmSubstitute, train_dt, train_mlp, train_svm

from conftest import NAMES, blobs


def linear_mlp(w, scale=4.0):
    """Two-class MLP whose logit gap is exactly scale * w.x (ReLU pair +w, -w)."""
    w = np.asarray(w, dtype=float)
    W1 = np.stack([w, -w], axis=1)
    W3 = np.array([[0.0, 0.0], [scale, -scale]]).T  # logits = [0, scale*(h0 - h1)]
    return MlpSubstitute((W1, np.eye(2), W3), (np.zeros(2), np.zeros(2), np.zeros(2)), ("A", "B"))


W = np.array([0.3, 0.8, -0.5, 0, 0, 0, 0, 0, 0])


@pytest.fixture(scope="module")
def subs():
    ds = blobs(15)
    return ds, train_mlp(ds, MlpParams(epochs=30)), train_svm(ds, SvmParams(epochs=100)), train_dt(ds)


def test_parse_method():
    assert parse_method("fgsm0.36") == Fgsm(0.36) and parse_method("FGSM(0.5)") == Fgsm(0.5)
    assert parse_method("jsma") == Jsma() and parse_method("svm:2") == SvmAttack(2.0) and parse_method("dt") == DtAttack()
    assert Fgsm(0.4).tag == "fgsm0.4"
    with pytest.raises(InvalidInputError):
        parse_method("pgd")


def test_fgsm_zero_is_identity():
    x = np.linspace(0.1, 0.9, 9)
    assert np.array_equal(fgsm(linear_mlp(W), x, "A", 0.0), x)


def test_fgsm_direction_is_sign_of_logistic_gradient():
    # With the true class A the loss gradient is p_B * scale * w, so the step follows sign(w).
    x = np.full(9, 0.5)
    x[0] = 0.9  # w.x > 0 keeps the first ReLU active and away from its kink
    m = linear_mlp(W)
    assert np.allclose(fgsm(m, x, "A", 0.05) - x, 0.05 * np.sign(W))
    assert np.allclose(fgsm(m, x, "B", 0.05) - x, -0.05 * np.sign(W))


def test_jsma_leaves_misclassified_rows_alone():
    x = np.full(9, 0.5)
    x[1] = 0.9  # predicted B
    m = linear_mlp(W)
    assert m.predict(x)[0] == 1
    out, ok = jsma(m, x, "A")
    assert np.array_equal(out, x) and ok


def test_jsma_first_feature_has_largest_saliency():
    # dp_A/dx = -p_A p_B * scale * w; raising x_i lowers p_A most where w_i is largest.
    x = np.full(9, 0.4)
    x[2] = 0.9
    m = linear_mlp(W)
    assert m.predict(x)[0] == 0
    out, _ = jsma(m, x, "A", theta=0.1, gamma=1 / 9)
    changed = np.flatnonzero(out != x)
    assert list(changed) == [1] and out[1] == pytest.approx(0.5)


def test_jsma_modifies_each_feature_at_most_once(subs):
    ds, mlp, _, _ = subs
    for x, label in zip(ds.X[:20], ds.labels[:20]):
        out, _ = jsma(mlp, x, label, theta=0.1, gamma=0.5)
        d = out - x
        assert np.count_nonzero(d) <= 5 and np.all(np.abs(d) <= 0.1 + 1e-12)


def test_svm_attack_flips_with_enough_lambda():
    s = SvmSubstitute(np.array([[1.0] + [0] * 8, [-1.0] + [0] * 8]), np.array([-0.5, 0.5]), ("A", "B"))
    x = np.full(9, 0.2)
    x[0] = 0.7  # decision gap 0.4, distance 0.2 to the boundary along w
    assert s.predict(x)[0] == 0
    lam = 2 * 0.2 / 1.0
    assert s.predict(svm_attack(s, x, lam + 1e-9))[0] == 1
    with pytest.raises(AttackError):
        svm_attack(SvmSubstitute(np.zeros((2, 9)), np.array([1.0, 0.0]), ("A", "B")), x)


def stump():
    return DecisionTree(np.array([0, LEAF, LEAF]), np.array([0.5, 0, 0]), np.array([1, LEAF, LEAF]),
                        np.array([2, LEAF, LEAF]), np.array([[5, 5], [5, 0], [0, 5]]), 1)


def test_dt_attack_crosses_the_stump():
    x = np.full(9, 0.3)
    out, ok = dt_attack(stump(), x, 0.05)
    assert ok and 0.5 < out[0] <= 0.55 + 1e-12
    assert np.array_equal(out[1:], x[1:])


def test_dt_attack_on_single_class_tree():
    leaf = DecisionTree(np.array([LEAF]), np.zeros(1), np.array([LEAF]), np.array([LEAF]), np.array([[3, 0]]), 0)
    with pytest.raises(AttackError):
        dt_attack(leaf, np.zeros(9))


def test_dt_attack_bound_without_flip_is_flagged():
    # target region needs x0 > 0.5 but feature 1 routes everything to class 0 first
    t = DecisionTree(np.array([1, LEAF, 0, LEAF, LEAF]), np.array([2.0, 0, 0.5, 0, 0]), np.array([1, LEAF, 3, LEAF, LEAF]),
                     np.array([2, LEAF, 4, LEAF, LEAF]), np.array([[5, 5], [5, 0], [0, 5], [0, 5], [0, 5]]), 2)
    out, ok = dt_attack(t, np.full(9, 0.3))
    assert not ok and np.all((out >= 0) & (out <= 1))


def test_batches(subs):
    ds, mlp, svm, dt = subs
    assert np.array_equal(craft_batch(Fgsm(0.0), mlp, ds).perturbed, ds.X)
    for method, sub in ((Fgsm(0.3), mlp), (Jsma(), mlp), (SvmAttack(), svm), (DtAttack(), dt)):
        a, b = craft_batch(method, sub, ds), craft_batch(method, sub, ds)
        assert np.array_equal(a.perturbed, b.perturbed) and a.substitute_id == b.substitute_id
        assert a.method == method.tag and len(a) == len(ds)
    with pytest.raises(InvalidInputError):
        craft_batch(Fgsm(0.1), svm, ds)


@settings(max_examples=30)
@given(st.floats(0, 1), st.integers(0, 2**32))
def test_fgsm_stays_in_unit_box(eps, seed):
    ds = blobs(3, seed=seed % 1000)
    m = linear_mlp(np.random.default_rng(seed).normal(size=9))
    ds2 = LabeledDataset(ds.X, ds.y % 2, ("A", "B"))
    P = craft_batch(Fgsm(eps), m, ds2).perturbed
    assert np.all((P >= 0) & (P <= 1)) and np.all(np.abs(P - ds2.X) <= eps + 1e-12)


class Fixed:
    def __init__(self, flips):
        self.flips = flips

    def predict(self, X):
        return (np.asarray(X)[:, 0] > 0.5).astype(int)


def test_transferability_counts_flips():
    X = np.full((4, 9), 0.2)
    P = X.copy()
    P[0, 0] = 0.9
    b = AdversarialBatch(X, P, ("A",) * 4, "x")
    assert transferability_rate(Fixed(1), b) == 0.25
    assert transferability_rate(Fixed(0), AdversarialBatch(X, X, ("A",) * 4, "x")) == 0.0
    with pytest.raises(EmptyInputError):
        transferability_rate(Fixed(0), b.subset([]))


def test_batch_csv_round_trip(tmp_path, subs):
    ds, mlp, _, _ = subs
    b = craft_batch(Fgsm(0.2), mlp, ds)
    write_batch_csv(b, tmp_path / "b.csv", NAMES)
    back = read_batch_csv(tmp_path / "b.csv", ds.X, NAMES)
    assert back.labels == b.labels and back.method == "fgsm0.2"
    assert np.allclose(back.perturbed, b.perturbed, atol=1e-6) and np.array_equal(back.success, b.success)


def test_perturbed_outside_box_rejected():
    with pytest.raises(InvalidInputError):
        AdversarialBatch(np.zeros((1, 9)), np.full((1, 9), 1.5), ("A",), "x")
