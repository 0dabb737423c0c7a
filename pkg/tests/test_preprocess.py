import numpy as np
import pytest

from config import SelectionConfig
from services.dataset_service import ModalityKind, group_kfold
from services.errors import FitError
from services.preprocess_service import (Preprocessor, apply_imputer, apply_scaler, fit_imputer,
                                         fit_scaler)

GENES = ModalityKind.GENES


def split(dataset, fold=0):
    plan = group_kfold(dataset, 3, 0)
    test = plan.test_index(dataset, fold)
    return dataset.subset(~test), dataset.subset(test)


class TestImputer:

    def test_fills_only_present_rows(self, synth_dataset):
        model = fit_imputer(synth_dataset)
        out = apply_imputer(model, synth_dataset)
        present = synth_dataset.present[GENES]
        assert not np.isnan(out.numeric[GENES][present]).any()
        assert np.isnan(out.numeric[GENES][~present]).all()
        meta_rows = synth_dataset.present[ModalityKind.META]
        assert (out.codes[meta_rows] >= 0).all()
        assert (out.codes[~meta_rows] == -1).all()

    def test_class_conditional_means(self, synth_dataset):
        model = fit_imputer(synth_dataset)
        rows = synth_dataset.present[GENES]
        mat = synth_dataset.numeric[GENES][rows]
        labels = synth_dataset.labels[rows]
        expected = np.nanmean(mat[labels == 2], axis=0)
        np.testing.assert_allclose(model.numeric[GENES]["class"][2], expected, rtol=1e-12)

    def test_unlabeled_rows_use_marginal(self, synth_dataset):
        model = fit_imputer(synth_dataset)
        gaps = np.isnan(synth_dataset.numeric[GENES]) & synth_dataset.present[GENES][:, None]
        assert gaps.any()
        out = apply_imputer(model, synth_dataset, use_labels=False)
        cols = np.nonzero(gaps)[1]
        np.testing.assert_allclose(out.numeric[GENES][gaps], np.asarray(model.numeric[GENES]["global"])[cols])

    def test_feature_never_observed(self, synth_dataset):
        values = synth_dataset.numeric[GENES].copy()
        values[:, 0] = np.nan
        broken = synth_dataset.replace(numeric={GENES: values})
        with pytest.raises(FitError):
            fit_imputer(broken)


class TestScaler:

    def test_standardises_present_rows(self, synth_dataset):
        imputed = apply_imputer(fit_imputer(synth_dataset), synth_dataset)
        scaled = apply_scaler(fit_scaler(imputed), imputed)
        rows = scaled.present[GENES]
        np.testing.assert_allclose(scaled.numeric[GENES][rows].mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(scaled.numeric[GENES][rows].std(axis=0), 1.0, atol=1e-12)

    def test_zero_variance_feature_is_recorded(self, synth_dataset):
        values = synth_dataset.numeric[GENES].copy()
        values[synth_dataset.present[GENES], 1] = 4.0
        flat = synth_dataset.replace(numeric={GENES: values})
        scaler = fit_scaler(apply_imputer(fit_imputer(flat), flat))
        assert any("GENE0001" in w for w in scaler.warnings)
        assert scaler.scale[GENES][1] == 1.0 and scaler.mean[GENES][1] == 0.0


class TestLeakage:

    def test_test_rows_never_change_fitted_parameters(self, synth_dataset):
        cfg = SelectionConfig(p_threshold=0.5, k=5)
        train, _ = split(synth_dataset)
        pre_a, _ = Preprocessor.fit_transform(train, cfg)

        held_out = group_kfold(synth_dataset, 3, 0).test_index(synth_dataset, 0)
        noisy = {}
        for kind in (GENES, ModalityKind.RADIOMICS):
            values = synth_dataset.numeric[kind].copy()
            values[held_out] += 1000.0
            noisy[kind] = values
        train_b, _ = split(synth_dataset.replace(numeric=noisy))
        pre_b, _ = Preprocessor.fit_transform(train_b, cfg)
        assert pre_a.to_dict() == pre_b.to_dict()

    def test_transform_does_not_refit(self, synth_dataset):
        cfg = SelectionConfig(p_threshold=0.5, k=5)
        train, test = split(synth_dataset, 1)
        pre, _ = Preprocessor.fit_transform(train, cfg)
        before = pre.to_dict()
        pre.transform(test.replace(numeric={GENES: test.numeric[GENES] * 50.0}))
        assert pre.to_dict() == before

    def test_transformed_test_has_selected_schema(self, synth_dataset):
        train, test = split(synth_dataset, 2)
        pre, train_t = Preprocessor.fit_transform(train, SelectionConfig(p_threshold=0.5, k=3))
        test_t = pre.transform(test)
        assert test_t.schema == train_t.schema
        assert train_t.schema.dim(GENES) == len(pre.selection.selected["Genes"]) <= 3

    def test_round_trip_through_dict(self, prepared):
        pre, _ = prepared
        again = Preprocessor.from_dict(pre.to_dict())
        assert again.to_dict() == pre.to_dict()
