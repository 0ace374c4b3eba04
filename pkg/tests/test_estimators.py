import numpy as np
import pytest
from sklearn.base import clone
from sklearn.datasets import make_moons

from jacmatch.estimators import JacobianMatchingClassifier


@pytest.fixture(scope="module")
def moons():
    X, y = make_moons(300, noise=0.1, random_state=0)
    return X, np.array(["a", "b"])[y]


def test_fit_predict_strings(moons):
    X, y = moons
    clf = JacobianMatchingClassifier(width=16, epochs=30, lr=0.01).fit(X, y)
    assert set(clf.predict(X)) <= {"a", "b"}
    assert clf.score(X, y) > 0.9
    proba = clf.predict_proba(X[:5])
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-12)
    assert clf.transform(X[:5]).shape[0] == 5
    assert len(clf.history_) == 30


def test_same_random_state_same_model(moons):
    X, y = moons
    a = JacobianMatchingClassifier(epochs=3).fit(X, y)
    b = clone(a).fit(X, y)
    assert np.array_equal(a.decision_function(X), b.decision_function(X))


def test_get_set_params():
    clf = JacobianMatchingClassifier(gamma=0.5)
    assert clf.get_params()["gamma"] == 0.5
    assert clf.set_params(epochs=2).epochs == 2


def test_teacher_matching(moons):
    X, y = moons
    teacher = JacobianMatchingClassifier(width=16, epochs=20, lr=0.01).fit(X, y).network_
    student = JacobianMatchingClassifier(width=8, teacher=teacher, beta=1.0, gamma=1.0, epochs=5).fit(X, y)
    assert {"activation", "jacobian"} <= set(student.history_[-1])


def test_validation_errors(moons):
    X, y = moons
    with pytest.raises(ValueError, match="teacher"):
        JacobianMatchingClassifier(beta=1.0).fit(X, y)
    with pytest.raises(ValueError, match="labels"):
        JacobianMatchingClassifier().fit(X, y[:-1])
    bad = X.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        JacobianMatchingClassifier().fit(bad, y)
    clf = JacobianMatchingClassifier(epochs=1).fit(X, y)
    with pytest.raises(ValueError, match="shape"):
        clf.predict(np.zeros((2, 3)))


def test_unfitted_raises():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        JacobianMatchingClassifier().predict(np.zeros((1, 2)))
