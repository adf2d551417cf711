import numpy as np
import pytest
from sklearn.base import clone

from gridvit import GridViTClassifier
from gridvit.errors import ValidationError

SMALL = dict(k=4, patch_size=8, embed_dim=8, layers=1, heads=2, mlp_ratio=1, epochs=2, val_fraction=0.5)


def as_array(records):
    X = np.stack([np.stack([r.t1.voxels, r.t2.voxels]) for r in records])
    return X, np.array([r.label for r in records])


@pytest.fixture(scope="module")
def fitted(small_records):
    return GridViTClassifier(**SMALL).fit(small_records)


def test_params_round_trip_through_clone():
    est = GridViTClassifier(mode="late", embed_dim=32)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.set_params(lr=0.01).lr == 0.01


def test_fit_predict_shapes(fitted, small_records):
    proba = fitted.predict_proba(small_records)
    assert proba.shape == (9, 3)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-5)
    assert set(fitted.predict(small_records)) <= {0, 1, 2}
    assert 0.0 <= fitted.score(small_records, [r.label for r in small_records]) <= 1.0


def test_array_and_record_inputs_agree(fitted, small_records):
    X, _ = as_array(small_records)
    np.testing.assert_array_equal(fitted.predict_proba(X), fitted.predict_proba(small_records))


def test_fit_on_arrays(small_records):
    X, y = as_array(small_records)
    est = GridViTClassifier(mode="t2", **SMALL).fit(X, y)
    assert est.config_.channels == 1 and est.predict(X).shape == (9,)


def test_unfitted_predict_raises(small_records):
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        GridViTClassifier().predict(small_records)


@pytest.mark.parametrize("X, y", [
    (np.zeros((3, 1, 6, 16, 16)), [0, 1, 2]),
    (np.zeros((3, 2, 6, 16, 16)), [0, 1]),
    (np.zeros((3, 2, 6, 16, 16)), [0, 1, 3]),
    (np.full((3, 2, 6, 16, 16), np.nan), [0, 1, 2]),
])
def test_fit_validates_inputs(X, y):
    with pytest.raises(ValidationError):
        GridViTClassifier(**SMALL).fit(X, y)


def test_save_and_reload(fitted, small_records, tmp_path):
    fitted.save(tmp_path / "e.gvck")
    back = GridViTClassifier.from_checkpoint(tmp_path / "e.gvck")
    assert back.predict_proba(small_records).tobytes() == fitted.predict_proba(small_records).tobytes()


def test_explain_returns_one_map_per_case(fitted, small_records):
    maps = fitted.explain(small_records[:2])
    assert len(maps) == 2
    assert maps[0].raw.shape == (fitted.config_.num_patches,)
