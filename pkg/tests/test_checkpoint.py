import json

import numpy as np
import pytest

from services.checkpoint_service import (CHECKPOINT_NAME, DESCRIPTION_NAME, load_model, read_checkpoint,
                                         save_model)
from services.errors import FormatError, SchemaError
from services.fusion_service import FusionModel
from tests.conftest import small_model


@pytest.fixture
def saved(tmp_path, prepared):
    _, data = prepared
    model = FusionModel(data.schema, small_model(attention_direction='symmetric'), seed=12)
    save_model(model, tmp_path, config_hash="abc123", seed=5)
    return model, tmp_path


def test_reload_gives_identical_predictions(saved, prepared):
    model, path = saved
    _, data = prepared
    again = load_model(path)
    np.testing.assert_array_equal(again.predict(data), model.predict(data))
    assert again.params.names() == model.params.names()


def test_description_is_stamped(saved):
    _, path = saved
    desc = json.loads((path / DESCRIPTION_NAME).read_text())
    assert desc["config_hash"] == "abc123" and desc["seed"] == 5
    assert desc["init_seed"] == 12


def test_blocks_are_in_parameter_order(saved):
    model, path = saved
    schema_hash, blocks = read_checkpoint(path / CHECKPOINT_NAME)
    assert schema_hash == model.schema.schema_hash()
    assert list(blocks) == model.params.names()


@pytest.mark.parametrize("damage", [lambda b: b[:-3], lambda b: b + b'\x00', lambda b: b'XXXX' + b[4:]])
def test_damaged_checkpoint(saved, damage):
    _, path = saved
    target = path / CHECKPOINT_NAME
    target.write_bytes(damage(target.read_bytes()))
    with pytest.raises(FormatError):
        load_model(path)


def test_schema_mismatch(saved):
    _, path = saved
    desc_path = path / DESCRIPTION_NAME
    desc = json.loads(desc_path.read_text())
    desc["schema"]["numeric"]["Genes"][0] = "RENAMED"
    desc_path.write_text(json.dumps(desc))
    with pytest.raises(SchemaError):
        load_model(path)


def test_missing_description(tmp_path):
    with pytest.raises(FormatError):
        load_model(tmp_path)
