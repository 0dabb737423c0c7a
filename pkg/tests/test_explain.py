import numpy as np
import pytest

from config import SelectionConfig
from services import tensor_engine as te
from services.dataset_service import ModalityKind, presence_matrix
from services.errors import ArityError, ConfigError, SchemaError
from services.explain_service import (background_reference, explain_shapley, grad_attribution, gradcam_volume,
                                      shapley_exact, shapley_mc)
from services.fusion_service import FusionModel
from services.preprocess_service import Preprocessor
from services.synth_service import synth_generate
from tests.conftest import small_model, small_synth

GENES = ModalityKind.GENES


def interaction(rows):
    rows = np.atleast_2d(rows)
    return 0.2 * rows[:, 0] * rows[:, 1] + 0.1 * rows[:, 2] * rows[:, 3] + 0.3 * rows[:, 4] + 0.1 * rows[:, 5]


class TestExactShapley:

    def test_efficiency(self, rng):
        w = rng.normal(size=10)

        def fn(rows):
            return np.tanh(rows @ w) + rows[:, 0] * rows[:, 3] - rows[:, 7] ** 2

        attr = shapley_exact(fn, rng.normal(size=10), rng.normal(size=(20, 10)))
        assert abs(attr.efficiency_residual) < 1e-10
        assert attr.sample_value - attr.baseline_value == pytest.approx(attr.values.sum(), abs=1e-10)

    def test_additive_model(self, rng):
        w = rng.normal(size=5)
        background = rng.normal(size=(30, 5))
        x = rng.normal(size=5)
        attr = shapley_exact(lambda rows: rows @ w, x, background)
        np.testing.assert_allclose(attr.values, w * (x - background.mean(axis=0)), atol=1e-12)

    def test_product_splits_evenly(self):
        attr = shapley_exact(lambda r: r[:, 0] * r[:, 1], np.array([2.0, 3.0]), np.zeros((1, 2)))
        np.testing.assert_allclose(attr.values, [3.0, 3.0], atol=1e-12)

    def test_symmetry_and_dummy(self):
        attr = shapley_exact(lambda r: r[:, 0] + r[:, 1], np.array([1.0, 1.0, 9.0]), np.zeros((1, 3)))
        assert attr.values[0] == attr.values[1]
        assert attr.values[2] == 0.0

    def test_subset_keeps_other_features_fixed(self):
        attr = shapley_exact(interaction, np.ones(6), np.zeros((1, 6)), features=[0, 4])
        np.testing.assert_allclose(attr.values, [0.2, 0.3], atol=1e-12)
        assert attr.features == [0, 4]

    def test_arity_limit(self):
        with pytest.raises(ArityError):
            shapley_exact(lambda r: r.sum(axis=1), np.zeros(16), np.zeros((1, 16)))

    def test_duplicate_features(self):
        with pytest.raises(ConfigError):
            shapley_exact(interaction, np.ones(6), np.zeros((1, 6)), features=[1, 1])


class TestMonteCarloShapley:

    def test_close_to_exact(self):
        x, bg = np.ones(6), np.zeros((1, 6))
        exact = shapley_exact(interaction, x, bg)
        mc = shapley_mc(interaction, x, bg, permutations=2000, seed=4)
        np.testing.assert_allclose(mc.values, exact.values, atol=0.02)
        assert abs(mc.efficiency_residual) < 1e-10

    def test_seeded(self):
        x, bg = np.ones(6), np.zeros((1, 6))
        a = shapley_mc(interaction, x, bg, permutations=50, seed=1)
        b = shapley_mc(interaction, x, bg, permutations=50, seed=1)
        np.testing.assert_array_equal(a.values, b.values)

    def test_handles_many_features(self, rng):
        w = rng.normal(size=20)
        attr = shapley_mc(lambda r: r @ w, np.ones(20), np.zeros((1, 20)), permutations=10)
        np.testing.assert_allclose(attr.values, w, atol=1e-12)


class TestBackground:

    def test_mean_and_mode(self):
        bg = np.array([[1.0, 0.0], [3.0, 1.0], [np.nan, 1.0]])
        np.testing.assert_allclose(background_reference(bg, [False, True]), [2.0, 1.0])

    def test_empty(self):
        with pytest.raises(ConfigError):
            background_reference(np.zeros((0, 3)))


class TestModelAttribution:

    @pytest.fixture(scope='class')
    def model(self, prepared):
        _, data = prepared
        return FusionModel(data.schema, small_model(), seed=3)

    def features(self, model):
        names = model.layout.names
        return [n for n in names if n.startswith("Genes:")][:3] + [n for n in names if n.startswith("Radiomics:")][:3]

    def test_masked_features_are_zero(self, model, prepared):
        _, data = prepared
        feats = self.features(model)
        attr = explain_shapley(model, data, 0, 2, data, features=feats, mask=[GENES])
        assert attr.features == feats
        assert all(v == 0.0 for name, v in zip(attr.features, attr.values) if name.startswith("Genes:"))
        assert abs(attr.efficiency_residual) < 1e-10

    def test_unknown_feature(self, model, prepared):
        _, data = prepared
        with pytest.raises(SchemaError):
            explain_shapley(model, data, 0, 0, data, features=["Genes:nope"])

    def test_value_function_reproduces_prediction(self, model, prepared):
        _, data = prepared
        attr = explain_shapley(model, data, 1, 1, data, features=self.features(model)[:2])
        assert attr.sample_value == pytest.approx(model.predict(data.subset([1]))[0, 1], abs=1e-12)

    def test_grad_attribution_masks_tokens(self, model, prepared):
        _, data = prepared
        attr = grad_attribution(model, data, 0, 0, mask=[GENES, ModalityKind.GM])
        assert attr.features[0] == '[IMAGE]' and len(attr.features) == model.layout.n_tokens + 1
        assert attr.values[0] == 0.0
        for name, value in zip(attr.features, attr.values):
            if name.startswith("Genes:"):
                assert value == 0.0
        assert np.all(np.isfinite(attr.values))

    def test_grad_attribution_matches_finite_differences(self, model, prepared):
        _, data = prepared
        row = int(np.flatnonzero(np.all(presence_matrix(data), axis=1))[0])
        target = 1
        batch = model.batch(data, [row])
        p = model.params.bind()
        tokens = model.tokens(p, batch).data
        query = model.image_query(p, batch).data

        def along_token(t):
            def logit(step):
                scaled = tokens.copy()
                scaled[0, t] *= 1.0 + step[0]
                return float(model.logits_from(p, te.constant(scaled), te.constant(query),
                                               batch.presence).data[0, target])
            return te.numeric_gradient(logit, [np.zeros(1)])[0][0]

        def along_query(step):
            return float(model.logits_from(p, te.constant(tokens), te.constant(query * (1.0 + step[0])),
                                           batch.presence).data[0, target])

        expected = [te.numeric_gradient(along_query, [np.zeros(1)])[0][0]]
        expected += [along_token(t) for t in range(tokens.shape[1])]
        attr = grad_attribution(model, data, row, target)
        assert te.relative_error(attr.values, expected) < 1e-3

    def test_grad_attribution_is_zero_when_the_logit_ignores_tokens(self, prepared):
        _, data = prepared
        frozen = FusionModel(data.schema, small_model(), seed=3)
        weights = frozen.params['head.fc2.W'].copy()
        weights[:, 2] = 0.0
        frozen.params['head.fc2.W'] = weights
        ignored = grad_attribution(frozen, data, 0, 2)
        assert np.all(ignored.values == 0.0)
        assert np.any(grad_attribution(frozen, data, 0, 0).values != 0.0)

    def test_gradcam_needs_trainable_encoder(self, model, prepared):
        _, data = prepared
        with pytest.raises(ConfigError):
            gradcam_volume(model, data, 0, 0)


class TestGradCam:

    def test_map_over_pooling_grid(self):
        dataset, _ = synth_generate(small_synth(image_mode="volume", volume_dim=4, pool_grid=2,
                                                informative={"Radiomics": 3, "GmEmbedding": 4, "Genes": 4,
                                                             "Meta": 2}), seed=1)
        _, data = Preprocessor.fit_transform(dataset, SelectionConfig(p_threshold=0.5, k=5))
        model = FusionModel(data.schema, small_model(image_mode='trainable', pool_grid=2), seed=0,
                            volume_shape=(4, 4, 4))
        row = int(np.flatnonzero(data.present[ModalityKind.GM])[0])
        cam = gradcam_volume(model, data, row, 2)
        assert cam.shape == (2, 2, 2)
        assert cam.min() >= 0.0 and cam.max() <= 1.0
        assert cam.max() == 1.0 or cam.max() == 0.0
