import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from protosanity import ProtoPartClassifier
from protosanity.data import make_synthetic
from protosanity.errors import InvalidArgumentError
from protosanity.validation import check_fraction, check_images, check_labels


@pytest.fixture(scope="module")
def data():
    train, test, _ = make_synthetic(num_classes=3, train=30, test=9, size=16, seed=4)
    return train, test


@pytest.fixture(scope="module")
def fitted(data):
    train, _ = data
    labels = np.array(["a", "b", "c"])[train.labels]
    return ProtoPartClassifier(channels=(4, 6), prototypes_per_class=2, epochs=2).fit(train.images, labels)


def test_params_round_trip_through_clone():
    est = ProtoPartClassifier(similarity="protopnet", epochs=3)
    params = clone(est).get_params()
    assert params["similarity"] == "protopnet" and params["epochs"] == 3
    assert set(params) == {
        "similarity",
        "epsilon",
        "prototypes_per_class",
        "channels",
        "feature_scale",
        "epochs",
        "learning_rate",
        "batch_size",
        "optimizer",
        "random_state",
    }


def test_unfitted_estimator_refuses_to_predict(data):
    with pytest.raises(NotFittedError):
        ProtoPartClassifier().predict(data[1].images)


def test_output_shapes(fitted, data):
    _, test = data
    assert fitted.predict(test.images).shape == (9,)
    assert set(fitted.predict(test.images)) <= {"a", "b", "c"}
    assert fitted.decision_function(test.images).shape == (9, 3)
    assert fitted.transform(test.images).shape == (9, 6)
    assert_allclose(fitted.predict_proba(test.images).sum(axis=1), 1.0)
    assert len(fitted.loss_curve_) == 2
    assert list(fitted.classes_) == ["a", "b", "c"]


def test_single_image_is_accepted(fitted, data):
    one = data[1].images[0]
    assert_array_equal(fitted.predict(one), fitted.predict(data[1].images[:1]))


def test_transform_is_in_prototree_range(fitted, data):
    s = fitted.transform(data[1].images)
    assert np.all((s > 0) & (s <= 1))


def test_fit_is_deterministic(data):
    train, test = data
    a = ProtoPartClassifier(channels=(4, 6), prototypes_per_class=1, epochs=1).fit(train.images, train.labels)
    b = ProtoPartClassifier(channels=(4, 6), prototypes_per_class=1, epochs=1).fit(train.images, train.labels)
    assert_array_equal(a.decision_function(test.images), b.decision_function(test.images))


def test_wrong_geometry_rejected(fitted):
    with pytest.raises(InvalidArgumentError):
        fitted.predict(np.zeros((2, 3, 8, 8)))


@pytest.mark.parametrize(
    "X",
    [np.zeros((3, 16, 16)), np.zeros((0, 3, 4, 4)), np.full((1, 3, 4, 4), np.nan), np.full((1, 3, 4, 4), 2.0)],
)
def test_check_images_rejects(X):
    with pytest.raises(InvalidArgumentError):
        check_images(X)


def test_check_images_casts_and_adds_batch_axis():
    out = check_images(np.zeros((3, 4, 4), dtype=np.float32), allow_single=True)
    assert out.shape == (1, 3, 4, 4) and out.dtype == np.float64


def test_check_labels_length():
    with pytest.raises(InvalidArgumentError):
        check_labels([0, 1], 3)


@pytest.mark.parametrize("value,low_open,ok", [(0.0, True, False), (0.0, False, True), (1.0, True, True), (1.5, True, False)])
def test_check_fraction(value, low_open, ok):
    if ok:
        assert check_fraction(value, "f", low_open) == value
    else:
        with pytest.raises(InvalidArgumentError):
            check_fraction(value, "f", low_open)
