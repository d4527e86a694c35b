import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from gracekit import numkit as nk
from gracekit import rcka
from gracekit.errors import DomainError, ShapeError


def _orthogonal(rng, d):
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return q


def test_gram_examples():
    np.testing.assert_allclose(rcka.gram(np.eye(3)), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(rcka.gram(np.array([[1.0, 2.0], [1.0, 2.0]])), np.ones((2, 2)))
    k = rcka.gram(np.array([[1.0, 0.0], [1.0, 1.0]]))
    assert k[0, 1] == pytest.approx(0.707107, abs=1e-6)
    with pytest.raises(DomainError, match="1"):
        rcka.gram(np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]]))


def test_center_examples(rng):
    np.testing.assert_allclose(rcka.center(np.ones((4, 4))), 0.0, atol=1e-15)
    c = 0.3
    np.testing.assert_allclose(rcka.center(np.array([[1, c], [c, 1]])),
                               np.array([[1, -1], [-1, 1]]) * (1 - c) / 2, atol=1e-15)
    kc = rcka.center(rcka.gram(rng.normal(size=(6, 3))))
    np.testing.assert_allclose(rcka.center(kc), kc, atol=1e-14)
    with pytest.raises(ShapeError):
        rcka.center(np.ones((2, 3)))


def test_hsic_examples(rng):
    k = rcka.gram(rng.normal(size=(5, 3)))
    assert rcka.hsic(k, np.zeros((5, 5))) == 0.0
    hk = rcka.center(np.eye(5))
    assert rcka.hsic(hk, hk, centered=True) > 0
    kb = rcka.gram(rng.normal(size=(5, 4)))
    h = np.eye(5) - 1 / 5
    explicit = np.trace(h @ k @ h @ h @ kb @ h) / 16
    assert rcka.hsic(k, kb) == pytest.approx(explicit, abs=1e-12)
    with pytest.raises(ShapeError):
        rcka.hsic(np.eye(3), np.eye(4))


def test_cka_invariances(rng):
    v = rng.normal(size=(12, 5))
    assert float(rcka.cka(rcka.GramPair.from_features(v, v))) == pytest.approx(1.0, abs=1e-9)
    transformed = 2.5 * v @ _orthogonal(rng, 5)
    assert float(rcka.cka(rcka.GramPair.from_features(v, transformed))) == pytest.approx(1.0, abs=1e-9)


def test_independent_features_have_low_cka():
    values = []
    for seed in range(100):
        r = np.random.default_rng(seed)
        values.append(float(rcka.cka(rcka.GramPair.from_features(r.normal(size=(32, 8)), r.normal(size=(32, 8))))))
    assert np.mean(values) < 0.5


def test_degenerate_representation_raises():
    v = np.tile([[1.0, 2.0, 3.0]], (4, 1))
    with pytest.raises(DomainError):
        rcka.cka(rcka.GramPair.from_features(v, np.random.default_rng(0).normal(size=(4, 3))))


@given(st.integers(0, 2**31 - 1), st.integers(3, 20), st.integers(1, 9), st.integers(1, 9))
def test_cka_in_unit_interval(seed, n, da, db):
    r = np.random.default_rng(seed)
    try:
        value = float(rcka.cka(rcka.GramPair.from_features(r.normal(size=(n, da)), r.normal(size=(n, db)))))
    except DomainError:  # 1-d features can all share a sign, leaving a constant Gram
        assume(False)
    assert -1e-12 <= value <= 1 + 1e-12


def test_rcka_loss_examples(rng):
    vt = rng.normal(size=(10, 6))
    assert float(rcka.rcka_loss(vt, vt)) == pytest.approx(0.0, abs=1e-12)
    assert float(rcka.rcka_loss(vt, 3.7 * vt)) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ShapeError):
        rcka.rcka_loss(vt, vt[:9])


def test_planted_clusters_prefer_structure_preserving_student(rng):
    labels = np.repeat([0, 1], 8)
    centers = rng.normal(size=(2, 6)) * 3
    teacher = centers[labels] + 0.3 * rng.normal(size=(16, 6))
    student_centers = rng.normal(size=(2, 4)) * 3
    preserving = student_centers[labels] + 0.3 * rng.normal(size=(16, 4))
    permuted_labels = rng.permutation(labels)
    permuted = student_centers[permuted_labels] + 0.3 * rng.normal(size=(16, 4))
    assert float(rcka.rcka_loss(teacher, preserving)) < float(rcka.rcka_loss(teacher, permuted))


@pytest.mark.parametrize("pooling", ["per_sample", "concat"])
def test_rcka_gradient(rng, pooling):
    vt = rng.normal(size=(3, 7, 5))
    vs = rng.normal(size=(3, 7, 4))
    f = lambda p: rcka.rcka_loss(vt, nk.reshape(p, vs.shape), pooling)  # noqa: E731
    assert nk.finite_diff_check(f, vs.reshape(-1)) < 1e-4


def test_per_sample_pooling_is_mean_of_samples(rng):
    vt, vs = rng.normal(size=(4, 6, 3)), rng.normal(size=(4, 6, 3))
    per = [float(rcka.rcka_loss(vt[i], vs[i])) for i in range(4)]
    assert float(rcka.rcka_loss(vt, vs)) == pytest.approx(np.mean(per), rel=1e-12)
    assert float(rcka.rcka_loss(vt, vs, "concat")) != pytest.approx(np.mean(per), rel=1e-6)
    with pytest.raises(ValueError):
        rcka.rcka_loss(vt, vs, "bogus")


def test_similarity_gap_planted(rng):
    labels = np.repeat([0, 1, 2], 5)
    clustered = rng.normal(size=(3, 8))[labels] * 4 + rng.normal(size=(15, 8))
    assert rcka.similarity_gap(clustered, labels) > rcka.similarity_gap(rng.normal(size=(15, 8)), labels)
