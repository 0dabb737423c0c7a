import numpy as np
import pytest

from config import DropoutConfig
from services import layers
from services import tensor_engine as te
from services.dataset_service import MODALITIES, ModalityKind, mask_modalities, presence_matrix
from services.errors import ConfigError
from services.fusion_service import DropoutPolicy, FusionModel, ModalityMask, apply_dropout, cross_attend
from tests import oracle
from tests.conftest import small_model

GENES, META = ModalityKind.GENES, ModalityKind.META


def attention_params(d, seed=0):
    params = te.ParameterStore()
    rng = np.random.default_rng(seed)
    layers.init_attention(params, 'x.attn.', d, rng)
    layers.init_layer_norm(params, 'x.ln.', d)
    return params.bind()


class TestCrossAttend:

    def test_single_valid_key_gets_all_weight(self, rng):
        p = attention_params(4)
        query = te.constant(rng.normal(size=(2, 4)))
        kv = te.constant(rng.normal(size=(2, 3, 4)))
        valid = np.array([[False, True, False], [True, False, False]])
        _, weights = cross_attend(p, 'x.', query, kv, valid, heads=2)
        np.testing.assert_allclose(weights[0, :, 0, 1], 1.0)
        np.testing.assert_allclose(weights[1, :, 0, 0], 1.0)
        assert np.all(weights[0, :, 0, [0, 2]] == 0.0)

    def test_no_valid_key_falls_back_to_normalised_query(self, rng):
        p = attention_params(4)
        q = rng.normal(size=(1, 4))
        out, _ = cross_attend(p, 'x.', te.constant(q), te.constant(rng.normal(size=(1, 2, 4))),
                              np.zeros((1, 2), dtype=bool), heads=2, eps=1e-5)
        expected = (q - q.mean()) / np.sqrt(q.var() + 1e-5)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_weights_are_a_distribution(self, rng):
        p = attention_params(8)
        valid = rng.random((4, 5)) < 0.7
        valid[:, 0] = True
        _, weights = cross_attend(p, 'x.', te.constant(rng.normal(size=(4, 8))),
                                  te.constant(rng.normal(size=(4, 5, 8))), valid, heads=4)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(weights[~np.broadcast_to(valid[:, None, None, :], weights.shape)] == 0.0)

    def test_masked_kv_rows_have_no_influence(self, rng):
        p = attention_params(8)
        query = te.constant(rng.normal(size=(3, 8)))
        kv = rng.normal(size=(3, 5, 8))
        valid = np.array([[True, False, True, False, False],
                          [False, False, False, False, True],
                          [True, True, True, True, False]])
        changed = kv.copy()
        changed[~valid] = rng.normal(size=(int((~valid).sum()), 8)) * 1e3
        out, weights = cross_attend(p, 'x.', query, te.constant(kv), valid, heads=4)
        out_c, weights_c = cross_attend(p, 'x.', query, te.constant(changed), valid, heads=4)
        np.testing.assert_array_equal(out.data, out_c.data)
        np.testing.assert_array_equal(weights, weights_c)


class TestDropout:

    def test_rates_match_policy(self):
        policy = DropoutPolicy.from_config(DropoutConfig(Genes=0.3, Meta=0.5))
        presence = np.ones((20000, 4), dtype=bool)
        kept = apply_dropout(presence, policy, np.random.default_rng(0))
        dropped = 1.0 - kept.mean(axis=0)
        assert dropped[MODALITIES.index(GENES)] == pytest.approx(0.3, abs=0.015)
        assert dropped[MODALITIES.index(META)] == pytest.approx(0.5, abs=0.015)
        assert kept[:, 0].all() and kept[:, 1].all()

    def test_never_drops_the_last_imaging_stream(self):
        policy = DropoutPolicy({ModalityKind.RADIOMICS: 0.9})
        presence = np.zeros((500, 4), dtype=bool)
        presence[:, 0] = True
        kept = apply_dropout(presence, policy, np.random.default_rng(1))
        assert kept[:, 0].all()

    def test_absent_stays_absent(self):
        policy = DropoutPolicy.from_config(DropoutConfig())
        mask = ModalityMask.from_row([True, True, False, True])
        out = apply_dropout(mask, policy, np.random.default_rng(2))
        assert isinstance(out, ModalityMask)
        assert not out.present[GENES]

    def test_zero_policy_keeps_everything(self):
        presence = np.random.default_rng(3).random((200, 4)) < 0.7
        presence[:, 0] = True
        policy = DropoutPolicy.from_config(DropoutConfig(Genes=0.0, Meta=0.0))
        np.testing.assert_array_equal(apply_dropout(presence, policy, np.random.default_rng(4)), presence)

    def test_certain_drop_removes_genes_and_meta_only(self):
        presence = np.ones((300, 4), dtype=bool)
        presence[::3, 1] = False
        policy = DropoutPolicy.from_config(DropoutConfig(Genes=1.0, Meta=1.0))
        kept = apply_dropout(presence, policy, np.random.default_rng(5))
        assert not kept[:, MODALITIES.index(GENES)].any()
        assert not kept[:, MODALITIES.index(META)].any()
        np.testing.assert_array_equal(kept[:, :2], presence[:, :2])

    def test_policy_guards(self):
        with pytest.raises(ConfigError):
            DropoutPolicy({ModalityKind.RADIOMICS: 0.2, ModalityKind.GM: 0.2})
        with pytest.raises(ConfigError):
            DropoutPolicy({ModalityKind.GM: 1.0})
        with pytest.raises(ConfigError):
            DropoutPolicy({GENES: 1.5})


class TestFusionModel:

    @pytest.fixture(scope='class')
    def model(self, prepared):
        _, data = prepared
        return FusionModel(data.schema, small_model(), seed=4)

    def test_predict_is_a_distribution(self, model, prepared):
        _, data = prepared
        probs = model.predict(data)
        assert probs.shape == (len(data), 3)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(probs >= 0)

    def test_masked_modalities_have_no_influence(self, model, prepared):
        _, data = prepared
        rng = np.random.default_rng(8)
        base = model.predict(data, mask=[GENES, META])
        noisy = {k: data.numeric[k] + rng.normal(0, 100, data.numeric[k].shape) for k in (GENES, META)}
        codes = rng.integers(0, 2, data.codes.shape)
        changed = data.replace(numeric=noisy, codes=codes)
        np.testing.assert_array_equal(model.predict(changed, mask=[GENES, META]), base)

    def test_masking_equals_absence(self, model, prepared):
        _, data = prepared
        absent = mask_modalities(data, [GENES, META])
        np.testing.assert_array_equal(model.predict(data, mask=[GENES, META]), model.predict(absent))

    def test_missing_gm_uses_learned_query(self, model, prepared):
        _, data = prepared
        a = model.predict(data, mask=[ModalityKind.GM])
        noisy = data.replace(numeric={ModalityKind.GM: data.numeric[ModalityKind.GM] * 50.0})
        np.testing.assert_array_equal(model.predict(noisy, mask=[ModalityKind.GM]), a)

    def test_predict_sample_matches_batch(self, model, prepared):
        _, data = prepared
        sample = data.sample(3)
        mask = ModalityMask.from_sample(sample).without([GENES])
        np.testing.assert_allclose(model.predict_sample(sample, mask), model.predict(data.subset([3]), [GENES])[0],
                                   atol=1e-12)

    def test_excluded_modality_is_ignored(self, prepared):
        _, data = prepared
        model = FusionModel(data.schema, small_model(modalities=["Radiomics", "GmEmbedding", "Meta"]), seed=1)
        assert not any(n.startswith("Genes:") for n in model.layout.names)
        noisy = data.replace(numeric={GENES: data.numeric[GENES] + 5.0})
        np.testing.assert_array_equal(model.predict(noisy), model.predict(data))

    @pytest.mark.parametrize("variant", [dict(attention_direction='symmetric'), dict(kv_granularity='modality'),
                                         dict(d=4, d_ff=8), dict(first_layer_prenorm=True)])
    def test_variants_predict_distributions(self, prepared, variant):
        _, data = prepared
        model = FusionModel(data.schema, small_model(**variant), seed=2)
        probs = model.predict(data)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("variant", [dict(), dict(attention_direction='symmetric'),
                                         dict(kv_granularity='modality')])
    def test_end_to_end_gradient(self, prepared, variant):
        _, data = prepared
        model = FusionModel(data.schema, small_model(**variant), seed=6)
        batch = model.batch(data, np.arange(4), mask=[META])
        name = 'fuse.xattn.attn.v.W'

        def build(w):
            bound = model.params.bind()
            bound[name] = w
            logits = model.forward(bound, batch)
            return te.sum_(te.softmax(logits) * np.arange(3.0))

        base = model.params[name].copy()
        analytic = te.analytic_gradient(build, [base])[0]
        numeric = te.numeric_gradient(lambda w: build(te.constant(w)).item(), [base])[0]
        assert te.relative_error(analytic, numeric) < 1e-4

    def test_matches_straight_line_forward_pass(self, model, prepared):
        _, data = prepared
        presence = presence_matrix(data)
        rows = [int(np.flatnonzero(presence.all(axis=1))[0]),
                int(np.flatnonzero(~presence[:, 2])[0]),
                int(np.flatnonzero(~presence[:, 3])[0])]
        P = dict(model.params.items())
        n_cat = len(model.layout.categorical)
        for mask in ((), (ModalityKind.GM,), (GENES, META)):
            batch = model.batch(data, rows, mask)
            probs = model.predict(data.subset(rows), mask)
            token_valid = model.layout.validity(batch.presence)
            for i in range(len(rows)):
                expected = oracle.fused_probabilities(P, model.cfg, batch.x_num[i], batch.codes[i], n_cat,
                                                      token_valid[i], batch.image[i], batch.presence[i, 1])
                np.testing.assert_allclose(probs[i], expected, rtol=0, atol=1e-9)

    def test_description_rebuilds_same_layout(self, model):
        again = FusionModel.from_description(model.describe())
        assert again.params.names() == model.params.names()
        for name, arr in model.params.items():
            np.testing.assert_array_equal(again.params[name], arr)
