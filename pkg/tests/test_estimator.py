import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from srlift.data import compositional_split
from srlift.estimator import BasicNormalizer, PixelNormalizer, PoseLifter


def arrays(data):
    return data.keypoints_2d.reshape(len(data), -1), data.pose_3d.reshape(len(data), -1)


def test_basic_normalizer_round_trip(tiny_dataset):
    X, _ = arrays(tiny_dataset)
    norm = BasicNormalizer(1000, 1000).fit(X)
    np.testing.assert_allclose(norm.inverse_transform(norm.transform(X)), X, atol=1e-9)
    with pytest.raises(NotFittedError):
        BasicNormalizer().transform(X)
    with pytest.raises(ValueError):
        BasicNormalizer().fit(X[:, :5])


def test_pixel_normalizer_standardizes(tiny_dataset):
    X, _ = arrays(tiny_dataset)
    Z = PixelNormalizer().fit_transform(X)
    np.testing.assert_allclose(Z.mean(axis=0), 0, atol=1e-9)
    np.testing.assert_allclose(Z.std(axis=0), 1, atol=1e-9)


def test_lifter_params_and_clone():
    lifter = PoseLifter(kind="gp", width=64, epochs=3)
    params = lifter.get_params()
    assert params["kind"] == "gp" and params["width"] == 64
    assert clone(lifter).get_params() == params


def test_lifter_fit_predict_score(tiny_dataset):
    train, test = compositional_split(tiny_dataset)
    X, y = arrays(train)
    lifter = PoseLifter(width=32, epochs=3, batch_size=128, random_state=0).fit(X, y)
    Xt, yt = arrays(test)
    pred = lifter.predict(Xt)
    assert pred.shape == yt.shape and np.all(np.isfinite(pred))
    assert lifter.score(Xt, yt) < 0
    again = PoseLifter(width=32, epochs=3, batch_size=128, random_state=0).fit(X, y)
    np.testing.assert_array_equal(again.predict(Xt), pred)
    with pytest.raises(ValueError, match="features"):
        lifter.predict(Xt[:, :10])


def test_lifter_validates_input():
    with pytest.raises(ValueError):
        PoseLifter().fit(np.zeros((4, 33)), np.zeros((4, 51)))
    with pytest.raises(NotFittedError):
        PoseLifter().predict(np.zeros((1, 34)))
