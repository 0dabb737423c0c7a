import numpy as np
import pytest

import database
from config import DropoutConfig, ModelConfig, RunConfig, SelectionConfig, SynthConfig, TrainConfig
from services.preprocess_service import Preprocessor
from services.synth_service import synth_generate


def small_synth(**overrides):
    values = dict(
        class_counts={"CTL": 10, "MCI": 10, "AD": 10},
        visits_min=1,
        visits_max=2,
        radiomics_dim=6,
        gm_dim=8,
        genes_dim=10,
        meta_numeric_dim=2,
        informative={"Radiomics": 3, "GmEmbedding": 3, "Genes": 4, "Meta": 2},
        snr=3.0,
        missing_genes=0.25,
        missing_meta=0.25,
        missing_entry_rate=0.02,
    )
    values.update(overrides)
    return SynthConfig(**values)


def small_model(**overrides):
    values = dict(d=8, layers=1, heads=2, d_ff=16, cross_heads=2, d_img=8, img_hidden=8)
    values.update(overrides)
    return ModelConfig(**values)


def small_run_config(**train_overrides):
    train = dict(lr=1e-2, weight_decay=1e-4, batch_size=16, max_epochs=3, patience=2,
                 val_fraction=0.2, folds=3, dropout=DropoutConfig())
    train.update(train_overrides)
    return RunConfig(
        synth=small_synth(),
        selection=SelectionConfig(p_threshold=0.5, k=5),
        model=small_model(),
        train=TrainConfig(**train),
    ).validate()


@pytest.fixture(autouse=True)
def isolated_ledger(tmp_path, monkeypatch):
    """Every test writes its run ledger under its own tmp directory."""
    monkeypatch.setattr(database, 'DB_URI', f"sqlite:///{tmp_path / 'runs.db'}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope='session')
def synth_dataset():
    dataset, _ = synth_generate(small_synth(), seed=3)
    return dataset


@pytest.fixture(scope='session')
def synth_truth():
    _, truth = synth_generate(small_synth(), seed=3)
    return truth


@pytest.fixture(scope='session')
def prepared(synth_dataset):
    """(preprocessor, imputed + scaled + selected dataset) fitted on the whole small cohort."""
    return Preprocessor.fit_transform(synth_dataset, SelectionConfig(p_threshold=0.5, k=5))


@pytest.fixture
def run_config():
    return small_run_config()
