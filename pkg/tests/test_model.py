import numpy as np
import pytest

from wmrb.data import FeatureMatrix, identity_features
from wmrb.model import (
    MAGIC,
    ConfigError,
    ModelFormatError,
    ModelShapeError,
    entity_reprs,
    init_params,
    item_repr,
    load_model,
    save_model,
    score,
    score_batch,
    user_repr,
)


@pytest.fixture
def hybrid():
    # 3 users with identity features, 4 items with identity + one shared tag
    uf = identity_features(3)
    itf = FeatureMatrix.from_triples(
        [0, 1, 2, 3, 0, 2], [0, 1, 2, 3, 4, 4], [1, 1, 1, 1, 0.5, 2.0], 4, 5
    )
    params = init_params(6, 3, 5, seed=1, scale=0.3)
    params.item_biases[:] = [0.1, -0.2, 0.3, 0.0, 0.05]
    params.user_biases[:] = [1.0, 0.0, -1.0]
    return params, uf, itf


def test_init_is_seeded_and_bounded():
    a = init_params(4, 5, 7, seed=3, scale=0.1)
    b = init_params(4, 5, 7, seed=3, scale=0.1)
    assert a == b
    assert a != init_params(4, 5, 7, seed=4, scale=0.1)
    assert np.all(np.abs(a.user_embeddings) <= 0.1)
    assert not a.item_biases.any()
    assert a.dtype == np.float32


def test_init_rejects_bad_shapes():
    with pytest.raises(ConfigError):
        init_params(0, 2, 2)


def test_representation_is_weighted_feature_sum(hybrid):
    params, uf, itf = hybrid
    r = item_repr(params, itf, 2)
    emb = params.item_embeddings.astype(np.float64)
    np.testing.assert_allclose(r.vector, emb[2] + 2.0 * emb[4])
    assert r.bias == pytest.approx(0.3 + 2.0 * 0.05)


def test_score_matches_definition(hybrid):
    params, uf, itf = hybrid
    u = user_repr(params, uf, 0)
    i = item_repr(params, itf, 0)
    assert score(params, itf, u, 0) == pytest.approx(u.vector @ i.vector + u.bias + i.bias)


def test_single_and_batch_scores_bitwise_equal(hybrid):
    params, uf, itf = hybrid
    for user in range(3):
        u = user_repr(params, uf, user)
        batch = score_batch(params, itf, u, [3, 0, 2, 1])
        single = [score(params, itf, u, i) for i in (3, 0, 2, 1)]
        assert batch.tolist() == single


def test_entity_reprs_agree_with_single(hybrid):
    params, _, itf = hybrid
    vecs, b = entity_reprs(params.item_embeddings, params.item_biases, itf)
    for i in range(4):
        r = item_repr(params, itf, i)
        np.testing.assert_allclose(vecs[i], r.vector, rtol=1e-12)
        assert b[i] == pytest.approx(r.bias, rel=1e-12)


def test_roundtrip(tmp_path, hybrid):
    params, *_ = hybrid
    path = tmp_path / "m.bin"
    save_model(params, path)
    assert path.read_bytes().startswith(MAGIC)
    assert load_model(path) == params
    assert load_model(path, dim=6, num_user_features=3, num_item_features=5) == params


def test_shape_mismatch(tmp_path, hybrid):
    params, *_ = hybrid
    save_model(params, tmp_path / "m.bin")
    with pytest.raises(ModelShapeError):
        load_model(tmp_path / "m.bin", dim=8)


def test_version_and_magic_errors(tmp_path, hybrid):
    params, *_ = hybrid
    path = tmp_path / "m.bin"
    save_model(params, path)
    blob = path.read_bytes()
    path.write_bytes(MAGIC[:-1] + b"9" + blob[len(MAGIC):])
    with pytest.raises(ModelFormatError, match="version"):
        load_model(path)
    path.write_bytes(b"NOTAMODEL" + blob)
    with pytest.raises(ModelFormatError, match="magic"):
        load_model(path)
    path.write_bytes(blob[:-3])
    with pytest.raises(ModelFormatError, match="truncated"):
        load_model(path)


def test_incompatible_features(hybrid):
    params, uf, _ = hybrid
    with pytest.raises(ModelShapeError):
        params.check_compatible(uf, identity_features(4))
