"""Tests for encoders, heads, baselines and checkpoints"""

import json

import numpy as np
import pytest

from tweet_geodensity.data_models import GeoPoint, ModelKind
from tweet_geodensity.diffcore import Graph, backward, gradient_check
from tweet_geodensity.exceptions import ConfigError, DataError
from tweet_geodensity.geo import vincenty_distance
from tweet_geodensity.mixture import convert_params, mixture_log_density
from tweet_geodensity.models import (CnnEncoder, ConstantModel, EnetModel, MdnHead, MlpEncoder,
                                     ModelHyperParams, NeuralGeoModel, RegressionHead, Standardizer,
                                     bag_of_words, constant_baselines, embed_concat, enet_objective,
                                     enet_solve, encode_features, load_checkpoint, mdn_forward,
                                     mlp_forward, regression_forward, save_checkpoint, soft_threshold)
from tweet_geodensity.training import loss_node

TINY = ModelHyperParams(vocab_size=12, embed_dim=3, windows=(2, 3), filters=2, hidden=4,
                        mixtures=3, dropout=0.0)


def dense_cnn_features(encoder: CnnEncoder, ids: np.ndarray) -> np.ndarray:
    """Direct loop over window positions"""
    rows = encoder.embedding[ids]
    batch, length, dim = rows.shape
    pooled = []
    for w, (weight, bias) in sorted(encoder.banks.items()):
        responses = np.stack([
            np.maximum(rows[:, i:i + w, :].reshape(batch, w * dim) @ weight.T + bias, 0.0)
            for i in range(length - w + 1)
        ], axis=1)
        pooled.append(responses.max(axis=1))
    return np.concatenate(pooled, axis=-1)


class TestEmbedConcat:

    def test_concatenation_order(self):
        g = Graph()
        table = g.parameter("embedding", np.array([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(g.value(embed_concat(g, [[0, 1]], table)), [[1, 2, 3, 4]])

    def test_all_pad(self):
        g = Graph()
        table = g.parameter("embedding", np.array([[0.5, -0.5], [3.0, 4.0]]))
        np.testing.assert_array_equal(g.value(embed_concat(g, [[0, 0, 0]], table)),
                                      [[0.5, -0.5, 0.5, -0.5, 0.5, -0.5]])

    def test_id_out_of_range(self):
        g = Graph()
        table = g.parameter("embedding", np.zeros((2, 2)))
        with pytest.raises(DataError):
            embed_concat(g, [[0, 2]], table)

    def test_gradient_touches_only_looked_up_rows(self, rng):
        model = NeuralGeoModel.build(ModelKind.CNN_L2, TINY, seed=3)
        ids = np.array([[2, 5, 7, 5, 0]])
        g = Graph()
        loss = loss_node(g, model.forward(g, ids, np.array([4])), rng.normal(size=(1, 2)),
                         ModelKind.CNN_L2.loss_kind)
        grads = backward(g, loss)["embedding"]
        untouched = np.setdiff1d(np.arange(TINY.vocab_size), ids)
        assert np.all(grads[untouched] == 0.0)


class TestCnnEncoder:

    def test_constant_filter(self, rng):
        encoder = CnnEncoder(rng.normal(size=(5, 2)), {2: (np.zeros((1, 4)), np.ones(1))})
        g = Graph()
        out = g.value(encode_features(g, rng.integers(0, 5, size=(3, 4)), encoder))
        np.testing.assert_array_equal(out, np.ones((3, 1)))

    def test_max_of_relu(self):
        encoder = CnnEncoder(np.array([[2.0], [-5.0], [3.0]]), {1: (np.ones((1, 1)), np.zeros(1))})
        g = Graph()
        assert g.value(encode_features(g, [[0, 1, 2]], encoder)).item() == 3.0

    def test_large_scale_width(self, rng):
        encoder = CnnEncoder.init(rng, 10, 300, (3, 4, 5), 128, 0.2)
        assert encoder.width == 384

    def test_matches_dense_recomputation(self, rng):
        encoder = CnnEncoder.init(rng, 20, 4, (2, 3, 4), 5, 0.0)
        ids = rng.integers(0, 20, size=(6, 7))
        g = Graph()
        np.testing.assert_allclose(g.value(encode_features(g, ids, encoder)),
                                   dense_cnn_features(encoder, ids), atol=1e-12)

    def test_order_dependence_witness(self, rng):
        encoder = CnnEncoder.init(rng, 10, 3, (2,), 4, 0.0)
        forward = np.array([[2, 3, 4, 5, 6]])
        g = Graph()
        a = g.value(encode_features(g, forward, encoder))
        b = g.value(encode_features(g, forward[:, ::-1], encoder))
        assert not np.allclose(a, b)

    def test_too_short_sequence(self, rng):
        encoder = CnnEncoder.init(rng, 10, 3, (2, 5), 2, 0.0)
        with pytest.raises(ConfigError):
            encode_features(Graph(), np.zeros((1, 4), dtype=int), encoder)

    def test_dropout_only_while_training(self, rng):
        encoder = CnnEncoder.init(rng, 10, 3, (2,), 50, 0.5)
        ids = rng.integers(0, 10, size=(2, 6))
        g = Graph()
        evaluation = g.value(encode_features(g, ids, encoder))
        np.testing.assert_array_equal(evaluation, dense_cnn_features(encoder, ids))
        trained = g.value(encode_features(g, ids, encoder, training=True, rng=np.random.default_rng(0)))
        assert np.any((trained == 0) & (evaluation > 0))


class TestHeads:

    def test_bias_only_regression(self, rng):
        head = RegressionHead(np.zeros((2, 6)), np.array([35.0, 135.0]))
        g = Graph()
        out = g.value(regression_forward(g, g.constant(rng.normal(size=(4, 6))), head))
        np.testing.assert_array_equal(out, np.tile([35.0, 135.0], (4, 1)))

    def test_identity_like_regression(self):
        head = RegressionHead(np.eye(2), np.array([0.5, -0.5]))
        g = Graph()
        out = g.value(regression_forward(g, g.constant([[1.0, 2.0]]), head))
        np.testing.assert_array_equal(out, [[1.5, 1.5]])

    def test_zero_mdn_converts_to_default_mixture(self):
        head = MdnHead(np.zeros((6, 3)), np.zeros(6))
        g = Graph()
        theta = g.value(mdn_forward(g, g.constant(np.ones((1, 3))), head))
        np.testing.assert_array_equal(theta, np.zeros((1, 6)))
        gmm = convert_params(theta[0])
        np.testing.assert_allclose(gmm.sigma, np.full((1, 2), np.log(2.0)))

    def test_large_scale_theta_width(self, rng):
        assert MdnHead.init(rng, 384, 50).bias.shape == (300,)

    def test_slice_k_feeds_component_k(self):
        bias = np.zeros(18)
        bias[6 + 1] = 7.0   # mu_1 of component 1
        head = MdnHead(np.zeros((18, 2)), bias)
        g = Graph()
        gmm = convert_params(g.value(mdn_forward(g, g.constant(np.zeros((1, 2))), head))[0])
        np.testing.assert_array_equal(gmm.mu[:, 0], [0.0, 7.0, 0.0])


class TestMlp:

    @pytest.fixture
    def encoder(self, rng):
        return MlpEncoder.init(rng, 10, 4, 6, 0.0)

    def test_zero_hidden_weights(self, rng):
        encoder = MlpEncoder(rng.normal(size=(10, 4)), np.zeros((6, 4)), np.zeros(6))
        head = RegressionHead(rng.normal(size=(2, 6)), np.array([1.0, -2.0]))
        g = Graph()
        out = g.value(mlp_forward(g, [[2, 3, 4]], [3], encoder, head))
        np.testing.assert_array_equal(out, [[1.0, -2.0]])

    def test_token_order_invariant(self, rng, encoder):
        head = RegressionHead.init(rng, encoder.width)
        ids = np.array([[2, 3, 4, 5, 0]])
        g = Graph()
        a = g.value(mlp_forward(g, ids, [4], encoder, head))
        b = g.value(mlp_forward(g, np.array([[5, 4, 2, 3, 0]]), [4], encoder, head))
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_padding_positions_ignored(self, rng, encoder):
        head = RegressionHead.init(rng, encoder.width)
        g = Graph()
        a = g.value(mlp_forward(g, [[2, 3, 0, 0]], [2], encoder, head))
        b = g.value(mlp_forward(g, [[2, 3]], [2], encoder, head))
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_empty_tweet_uses_pad_row(self, rng, encoder):
        head = RegressionHead.init(rng, encoder.width)
        g = Graph()
        out = g.value(mlp_forward(g, [[0, 0, 0]], [0], encoder, head))
        hidden = np.maximum(encoder.hidden_weight @ encoder.embedding[0] + encoder.hidden_bias, 0.0)
        np.testing.assert_allclose(out[0], head.weight @ hidden + head.bias, atol=1e-12)


@pytest.mark.parametrize("kind", [ModelKind.CNN_L2, ModelKind.CNN_L1, ModelKind.MLP_L2,
                                  ModelKind.MLP_L1, ModelKind.CMDN, ModelKind.MDN])
def test_gradient_check_per_kind(kind):
    rng = np.random.default_rng(17)
    hyper = ModelHyperParams(**{**TINY.to_dict(), 'dropout': 0.2})
    model = NeuralGeoModel.build(kind, hyper, seed=5)
    lengths = np.array([5, 4, 1, 0])
    ids = rng.integers(2, hyper.vocab_size, size=(4, 5))
    ids[np.arange(5)[None, :] >= lengths[:, None]] = 0
    g = Graph()
    output = model.forward(g, ids, lengths, training=True, rng=np.random.default_rng(1))
    loss = loss_node(g, output, rng.normal(size=(4, 2)), kind.loss_kind)
    assert gradient_check(g, loss) < 1e-4


class TestNeuralGeoModel:

    def test_build_is_seeded(self):
        a = NeuralGeoModel.build(ModelKind.CMDN, TINY, seed=4)
        b = NeuralGeoModel.build(ModelKind.CMDN, TINY, seed=4)
        for name, value in a.tensors().items():
            np.testing.assert_array_equal(value, b.tensors()[name])

    def test_baseline_kind_rejected(self):
        with pytest.raises(ConfigError):
            NeuralGeoModel.build(ModelKind.MEAN, TINY)

    def test_regression_has_no_density(self):
        model = NeuralGeoModel.build(ModelKind.CNN_L2, TINY)
        with pytest.raises(DataError):
            model.predict_mixtures(np.zeros((1, 4), dtype=int), np.array([0]))

    def test_density_points_are_modes_in_degrees(self, rng):
        model = NeuralGeoModel.build(ModelKind.CMDN, TINY, seed=2,
                                     standardizer=Standardizer(np.array([35.0, 137.0]), np.array([2.0, 3.0])))
        ids = rng.integers(0, TINY.vocab_size, size=(5, 6))
        lengths = np.full(5, 6)
        points = model.predict_points(ids, lengths)
        for point, gmm in zip(points, model.predict_mixtures(ids, lengths)):
            assert any(np.array_equal(point, mu) for mu in gmm.mu)
            assert 25.0 < point[0] < 45.0

    def test_prediction_batches_agree(self, rng):
        model = NeuralGeoModel.build(ModelKind.CNN_L1, TINY, seed=2)
        ids = rng.integers(0, TINY.vocab_size, size=(9, 5))
        lengths = np.full(9, 5)
        np.testing.assert_allclose(model.predict_raw(ids, lengths, batch_size=4),
                                   model.predict_raw(ids, lengths), atol=1e-12)


class TestStandardizer:

    def test_constant_axis_keeps_unit_scale(self):
        fit = Standardizer.fit(np.array([[35.0, 135.0], [35.0, 137.0]]))
        np.testing.assert_array_equal(fit.std, [1.0, 1.0])
        np.testing.assert_array_equal(fit.transform([[35.0, 136.0]]), [[0.0, 0.0]])

    def test_degree_density_includes_jacobian(self, rng):
        standardizer = Standardizer(np.array([35.0, 137.0]), np.array([2.0, 4.0]))
        gmm = convert_params(rng.normal(size=12))
        degrees = np.array([36.0, 135.0])
        expected = mixture_log_density(standardizer.transform(degrees[None, :])[0], gmm) \
            + standardizer.log_jacobian()
        assert mixture_log_density(degrees, standardizer.to_degrees(gmm)) == pytest.approx(expected, abs=1e-10)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            Standardizer.fit(np.empty((0, 2)))


class TestElasticNet:

    def test_soft_threshold(self):
        assert soft_threshold(1.5, 1.0) == 0.5
        assert soft_threshold(-0.4, 1.0) == 0.0

    def test_unpenalized_matches_least_squares(self, rng):
        x = rng.normal(size=(20, 4))
        y = x @ rng.normal(size=(4, 2)) + rng.normal(scale=0.1, size=(20, 2)) + [3.0, -1.0]
        fit = enet_solve(x, y, 0.0, 0.0, steps=20000, tol=1e-15)
        design = np.hstack([x, np.ones((20, 1))])
        solution, *_ = np.linalg.lstsq(design, y, rcond=None)
        np.testing.assert_allclose(fit.weight.T, solution[:4], atol=1e-6)
        np.testing.assert_allclose(fit.intercept, solution[4], atol=1e-6)

    def test_huge_l1_shrinks_to_mean(self, rng):
        x = rng.poisson(1.0, size=(30, 6)).astype(float)
        y = rng.normal(size=(30, 2))
        fit = enet_solve(x, y, 1e6, 0.0, steps=50)
        assert np.all(fit.weight == 0.0)
        np.testing.assert_allclose(fit.intercept, y.mean(axis=0))

    def test_objective_non_increasing(self, rng):
        x = rng.poisson(0.5, size=(40, 15)).astype(float)
        y = rng.normal(size=(40, 2))
        objective = np.array(enet_solve(x, y, 0.01, 0.01, steps=200).objective)
        assert np.all(np.diff(objective) <= 1e-12 * np.maximum(1.0, np.abs(objective[:-1])))

    def test_objective_value(self):
        x = np.array([[1.0], [2.0]])
        y = np.array([[1.0, 0.0], [2.0, 0.0]])
        weight = np.array([[1.0], [0.0]])
        assert enet_objective(x, y, weight, np.zeros(2), 0.5, 0.25) == pytest.approx(0.75)

    def test_negative_penalty_rejected(self):
        with pytest.raises(ConfigError):
            enet_solve(np.ones((2, 2)), np.ones((2, 2)), -1.0, 0.0)

    def test_bag_of_words_ignores_padding(self):
        counts = bag_of_words(np.array([[2, 2, 3, 0], [0, 0, 0, 0]]), np.array([3, 0]), 5)
        np.testing.assert_array_equal(counts, [[0, 0, 2, 1, 0], [0, 0, 0, 0, 0]])

    def test_fit_predicts_in_degrees(self, rng):
        ids = rng.integers(2, 8, size=(25, 4))
        points = np.column_stack([rng.uniform(30, 40, 25), rng.uniform(130, 140, 25)])
        model = EnetModel.fit(ids, np.full(25, 4), points, 8, 1e6, 0.0, steps=20)
        np.testing.assert_allclose(model.predict_points(ids[:3], np.full(3, 4)),
                                   np.tile(points.mean(axis=0), (3, 1)), atol=1e-9)


class TestConstantBaselines:

    def test_two_points(self):
        result = constant_baselines(np.array([[0.0, 0.0], [2.0, 2.0]]))
        assert result['mean'] == GeoPoint(1.0, 1.0)
        assert result['median'] == GeoPoint(1.0, 1.0)

    def test_median_resists_outlier(self):
        result = constant_baselines(np.array([[0.0, 0.0], [0.0, 0.0], [9.0, 9.0]]))
        assert result['median'] == GeoPoint(0.0, 0.0)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            constant_baselines(np.empty((0, 2)))

    def test_median_beats_mean_on_skewed_data(self, rng):
        crowd = np.column_stack([rng.normal(35.68, 0.1, 160), rng.normal(139.69, 0.1, 160)])
        tail = np.column_stack([rng.uniform(26.0, 33.0, 40), rng.uniform(127.0, 131.0, 40)])
        points = np.vstack([crowd, tail])

        def median_error(kind):
            model = ConstantModel.fit(kind, points)
            return np.median([vincenty_distance(model.point, GeoPoint(*p)) for p in points])

        assert median_error(ModelKind.MEDIAN) < median_error(ModelKind.MEAN)

    def test_rejects_neural_kind(self):
        with pytest.raises(ConfigError):
            ConstantModel(ModelKind.CMDN, GeoPoint(0.0, 0.0))


class TestCheckpoint:

    @pytest.fixture
    def batch(self, rng):
        return rng.integers(0, TINY.vocab_size, size=(6, 5)), np.full(6, 5)

    @pytest.mark.parametrize("kind", [ModelKind.CMDN, ModelKind.CNN_L2, ModelKind.MDN, ModelKind.MLP_L1])
    def test_neural_round_trip_is_bitwise(self, tmp_path, batch, kind):
        model = NeuralGeoModel.build(kind, TINY, seed=9,
                                     standardizer=Standardizer(np.array([35.0, 137.0]), np.array([1.5, 2.5])))
        save_checkpoint(model, tmp_path / "model.npz", {'seed': 9}, "abc")
        loaded = load_checkpoint(tmp_path / "model.npz")
        assert loaded.model.kind == kind
        assert loaded.config == {'seed': 9}
        assert loaded.vocab_hash == "abc"
        assert loaded.model.predict_points(*batch).tobytes() == model.predict_points(*batch).tobytes()

    def test_enet_round_trip(self, tmp_path, batch, rng):
        ids, lengths = batch
        points = np.column_stack([rng.uniform(30, 40, 6), rng.uniform(130, 140, 6)])
        model = EnetModel.fit(ids, lengths, points, TINY.vocab_size, 1e-3, 1e-3, steps=30)
        loaded = load_checkpoint(save_checkpoint(model, tmp_path / "enet.npz", {}, "h")).model
        assert loaded.predict_points(ids, lengths).tobytes() == model.predict_points(ids, lengths).tobytes()

    def test_mean_checkpoint_holds_one_point(self, tmp_path):
        model = ConstantModel.fit(ModelKind.MEAN, np.array([[35.0, 139.0], [34.0, 135.0]]))
        path = save_checkpoint(model, tmp_path / "mean.npz", {}, "h")
        with np.load(path) as data:
            assert sorted(data.files) == ['__meta__', 'point']
        assert load_checkpoint(path).model.point == GeoPoint(34.5, 137.0)

    def test_shape_mismatch_rejected(self, tmp_path):
        path = save_checkpoint(NeuralGeoModel.build(ModelKind.CMDN, TINY), tmp_path / "m.npz", {}, "h")
        with np.load(path) as data:
            arrays = {name: data[name] for name in data.files}
        arrays['embedding'] = np.zeros((TINY.vocab_size + 1, TINY.embed_dim))
        with open(path, 'wb') as f:
            np.savez(f, **arrays)
        with pytest.raises(DataError, match="embedding"):
            load_checkpoint(path)

    def test_unknown_format_rejected(self, tmp_path):
        path = save_checkpoint(ConstantModel(ModelKind.MEDIAN, GeoPoint(1.0, 2.0)), tmp_path / "m.npz", {}, "h")
        with np.load(path) as data:
            meta = json.loads(str(data['__meta__']))
            point = data['point']
        meta['format'] = 99
        with open(path, 'wb') as f:
            np.savez(f, __meta__=np.array(json.dumps(meta)), point=point)
        with pytest.raises(DataError, match="format"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "none.npz")
