"""
Fold-local preprocessing: class-conditional imputation, standard scaling and
the feature selection that runs on their output.

All three fit on a training split only; there is no API that hands them test rows.
Absent modalities are never imputed, only missing entries inside a present
modality are.
"""
from dataclasses import dataclass, field

import numpy as np

from config import CLASSES
from services.dataset_service import MODALITIES, TABULAR, ModalityKind
from services.errors import FitError
from services.run_log import get_logger
from services.selection_service import FeatureSelection, apply_selection, fit_selection

log = get_logger('PREPROCESS')


def _mode(codes):
    """Most frequent code; ties go to the smallest code."""
    values, counts = np.unique(codes, return_counts=True)
    return int(values[np.argmax(counts)])


@dataclass
class ImputationModel:
    # numeric: kind -> {"global": [d], "class": [[d] per class]}
    numeric: dict = field(default_factory=dict)
    # categorical: {"global": [c], "class": [[c] per class]}
    categorical: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "numeric": {k.value: v for k, v in self.numeric.items()},
            "categorical": self.categorical,
        }

    @classmethod
    def from_dict(cls, data):
        return cls({ModalityKind(k): v for k, v in data["numeric"].items()}, data["categorical"])


def fit_imputer(train, modalities=MODALITIES):
    """
    Class-conditional means (numeric) and modes (categorical) from a training split.

    A class with no observed value for a feature falls back to the class-marginal
    statistic; a feature with no observed value at all raises FitError.
    """
    numeric = {}
    for kind in modalities:
        kind = ModalityKind(kind)
        if kind == ModalityKind.GM or train.schema.dim(kind) == 0:
            continue
        rows = train.present[kind]
        if not rows.any():
            continue
        mat = train.numeric[kind][rows]
        labels = train.labels[rows]
        observed = ~np.isnan(mat)
        missing_all = ~observed.any(axis=0)
        if missing_all.any():
            name = train.schema.names(kind)[int(np.flatnonzero(missing_all)[0])]
            raise FitError(f"feature '{name}' ({kind.value}) has no observed value in the fit split")
        global_mean = np.nanmean(mat, axis=0)
        per_class = []
        for c in range(len(CLASSES)):
            sub = mat[labels == c]
            sums = np.nansum(sub, axis=0)
            counts = (~np.isnan(sub)).sum(axis=0)
            means = np.where(counts > 0, sums / np.maximum(counts, 1), global_mean)
            per_class.append(means.tolist())
        numeric[kind] = {"global": global_mean.tolist(), "class": per_class}

    categorical = {}
    meta_rows = train.present[ModalityKind.META]
    if ModalityKind.META in [ModalityKind(m) for m in modalities] and train.schema.categorical and meta_rows.any():
        codes = train.codes[meta_rows]
        labels = train.labels[meta_rows]
        global_modes, class_modes = [], [[] for _ in CLASSES]
        for j, name in enumerate(train.schema.categorical):
            col = codes[:, j]
            seen = col[col >= 0]
            if seen.size == 0:
                raise FitError(f"feature '{name}' (Meta) has no observed value in the fit split")
            g = _mode(seen)
            global_modes.append(g)
            for c in range(len(CLASSES)):
                sub = col[(labels == c) & (col >= 0)]
                class_modes[c].append(_mode(sub) if sub.size else g)
        categorical = {"global": global_modes, "class": class_modes}

    return ImputationModel(numeric, categorical)


def apply_imputer(model, dataset, use_labels=True):
    """
    Fill missing entries of present modalities.

    Labeled rows use their class statistics when use_labels is set; unlabeled
    rows (and every row when use_labels is False) use the class-marginal ones.
    """
    labels = dataset.labels if use_labels else np.full(len(dataset), -1)
    numeric = {}
    for kind, stats in model.numeric.items():
        mat = dataset.numeric[kind].copy()
        fill = np.tile(np.asarray(stats["global"]), (len(dataset), 1))
        for c in range(len(CLASSES)):
            fill[labels == c] = np.asarray(stats["class"][c])
        gaps = np.isnan(mat) & dataset.present[kind][:, None]
        mat[gaps] = fill[gaps]
        numeric[kind] = mat

    codes = None
    if model.categorical:
        codes = dataset.codes.copy()
        fill = np.tile(np.asarray(model.categorical["global"], dtype=np.int64), (len(dataset), 1))
        for c in range(len(CLASSES)):
            fill[labels == c] = np.asarray(model.categorical["class"][c], dtype=np.int64)
        gaps = (codes < 0) & dataset.present[ModalityKind.META][:, None]
        codes[gaps] = fill[gaps]

    return dataset.replace(numeric=numeric, codes=codes)


@dataclass
class Scaler:
    mean: dict = field(default_factory=dict)  # kind -> list
    scale: dict = field(default_factory=dict)  # kind -> list
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {
            "mean": {k.value: v for k, v in self.mean.items()},
            "scale": {k.value: v for k, v in self.scale.items()},
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data):
        return cls({ModalityKind(k): v for k, v in data["mean"].items()},
                   {ModalityKind(k): v for k, v in data["scale"].items()},
                   list(data.get("warnings", [])))


def fit_scaler(train, modalities=TABULAR):
    """
    Per-feature mean and population SD over the present rows of a training split.
    Zero-variance features get mean 0 / scale 1 so they pass through unchanged.
    """
    scaler = Scaler()
    for kind in modalities:
        kind = ModalityKind(kind)
        if kind == ModalityKind.GM or train.schema.dim(kind) == 0:
            continue
        rows = train.present[kind]
        if not rows.any():
            continue
        mat = train.numeric[kind][rows]
        mu = np.nanmean(mat, axis=0)
        sd = np.nanstd(mat, axis=0)
        flat = ~(sd > 0)
        for j in np.flatnonzero(flat):
            name = train.schema.names(kind)[j]
            msg = f"zero-variance feature '{name}' ({kind.value}) left unscaled"
            log.warning(msg)
            scaler.warnings.append(msg)
        scaler.mean[kind] = np.where(flat, 0.0, mu).tolist()
        scaler.scale[kind] = np.where(flat, 1.0, sd).tolist()
    return scaler


def apply_scaler(scaler, dataset):
    numeric = {}
    for kind, mu in scaler.mean.items():
        mat = dataset.numeric[kind]
        numeric[kind] = (mat - np.asarray(mu)) / np.asarray(scaler.scale[kind])
    return dataset.replace(numeric=numeric)


@dataclass
class Preprocessor:
    """Imputer, scaler and feature selection fitted together on one training split."""
    imputer: ImputationModel
    scaler: Scaler
    selection: FeatureSelection

    @classmethod
    def fit_transform(cls, train, selection_cfg):
        """Fit on train and return (preprocessor, transformed train)."""
        imputer = fit_imputer(train)
        imputed = apply_imputer(imputer, train, use_labels=True)
        scaler = fit_scaler(imputed)
        scaled = apply_scaler(scaler, imputed)
        selection = fit_selection(scaled, selection_cfg)
        return cls(imputer, scaler, selection), apply_selection(selection, scaled)

    def transform(self, dataset, use_labels=False):
        imputed = apply_imputer(self.imputer, dataset, use_labels=use_labels)
        return apply_selection(self.selection, apply_scaler(self.scaler, imputed))

    @property
    def warnings(self):
        return list(self.scaler.warnings)

    def to_dict(self):
        return {
            "imputer": self.imputer.to_dict(),
            "scaler": self.scaler.to_dict(),
            "selection": self.selection.to_dict(),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(ImputationModel.from_dict(data["imputer"]),
                   Scaler.from_dict(data["scaler"]),
                   FeatureSelection.from_dict(data["selection"]))
