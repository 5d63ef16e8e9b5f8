import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from combogait.errors import ConfigError, DataError, DimensionError
from combogait.estimator import ComboGait

from conftest import tiny_config


def toy_data(n_ids=3, per_id=2, t=5, seed=0):
    cfg = tiny_config()
    rng = np.random.default_rng(seed)
    X, y, attrs = [], [], []
    for i in range(n_ids):
        base = rng.random((cfg.height, cfg.width)) < 0.4
        for _ in range(per_id):
            sil = (base ^ (rng.random((t, cfg.height, cfg.width)) < 0.05)).astype(np.uint8)
            X.append((sil, rng.standard_normal((t, 82)).astype(np.float32)))
            y.append(f"id{i}")
            attrs.append((i % 5, i % 2, i % 4))
    return X, np.array(y), np.array(attrs)


def make(**kw):
    params = dict(model_config=tiny_config(), iterations=3, p_subjects=2, k_seqs=2, frames=4)
    params.update(kw)
    return ComboGait(**params)


def test_fit_transform_predict_shapes():
    X, y, attrs = toy_data()
    est = make().fit(X, y, attrs)
    emb = est.transform(X)
    assert emb.shape == (6, 6 * 4)
    assert est.predict(X).shape == (6, 3)
    assert est.loss_trace_.shape == (3, 6)
    assert est.classes_.tolist() == ["id0", "id1", "id2"]
    assert np.array_equal(est.fit_transform(X, y, attributes=attrs), make().fit(X, y, attrs).transform(X))


def test_clone_and_params():
    est = make(beta=0.1)
    cloned = clone(est)
    assert cloned.get_params()["beta"] == 0.1
    assert cloned.get_params()["iterations"] == 3


def test_random_state_determinism():
    X, y, attrs = toy_data()
    a = make(random_state=3).fit(X, y, attrs).transform(X)
    b = make(random_state=3).fit(X, y, attrs).transform(X)
    assert a.tobytes() == b.tobytes()


def test_not_fitted_and_validation():
    X, y, attrs = toy_data()
    with pytest.raises(NotFittedError):
        make().transform(X)
    with pytest.raises(ConfigError):
        make().fit(X, y)
    make(beta=0.0).fit(X, y)
    with pytest.raises(DataError):
        make().fit(X, y[:-1], attrs)
    bad = [(sil[:, :-1], smpl) for sil, smpl in X]
    with pytest.raises(DimensionError):
        make().fit(bad, y, attrs)
