"""
OFT1 parameter checkpoints.

Layout, all little-endian:
    magic "OFT1"
    32-byte SHA-256 of the model's dataset schema
    u32 block count
    per block: u32 name length, UTF-8 name, u32 rank, rank x u32 dims, f64 data

The model description (config, schema, volume shape) travels next to the
checkpoint as model.json so a reader can rebuild the parameter layout first.
"""
import json
import struct
from pathlib import Path

import numpy as np

from services.artifacts import write_json
from services.errors import FormatError, SchemaError
from services.fusion_service import FusionModel
from services.run_log import get_logger

log = get_logger('CHECKPOINT')

MAGIC = b'OFT1'
CHECKPOINT_NAME = 'model.oft'
DESCRIPTION_NAME = 'model.json'


def write_checkpoint(path, params, schema_hash):
    with open(path, 'wb') as f:
        f.write(MAGIC)
        f.write(bytes.fromhex(schema_hash))
        items = params.items()
        f.write(struct.pack('<I', len(items)))
        for name, arr in items:
            raw = name.encode('utf-8')
            f.write(struct.pack('<I', len(raw)))
            f.write(raw)
            f.write(struct.pack('<I', arr.ndim))
            f.write(struct.pack(f'<{arr.ndim}I', *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype='<f8').tobytes())


def read_checkpoint(path):
    """Returns (schema hash hex, {name: array}) in file order."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not an OFT1 checkpoint")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    schema_hash = take(32).hex()
    (count,) = struct.unpack('<I', take(4))
    blocks = {}
    for _ in range(count):
        (name_len,) = struct.unpack('<I', take(4))
        name = take(name_len).decode('utf-8')
        (rank,) = struct.unpack('<I', take(4))
        dims = struct.unpack(f'<{rank}I', take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        blocks[name] = np.frombuffer(take(8 * size), dtype='<f8').astype(np.float64).reshape(dims)
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return schema_hash, blocks


def save_model(model, out_dir, config_hash="", seed=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_checkpoint(out / CHECKPOINT_NAME, model.params, model.schema.schema_hash())
    write_json(out / DESCRIPTION_NAME, model.describe(), config_hash, model.seed if seed is None else seed)
    log.info(f"Saved {len(model.params)} parameter blocks to {out / CHECKPOINT_NAME}")


def load_model(model_dir):
    """Rebuild a FusionModel from model.json and fill it from model.oft."""
    model_dir = Path(model_dir)
    desc_path = model_dir / DESCRIPTION_NAME
    if not desc_path.exists():
        raise FormatError(f"no {DESCRIPTION_NAME} in {model_dir}")
    try:
        description = json.loads(desc_path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise FormatError(f"{desc_path}: {e}")
    model = FusionModel.from_description(description)

    schema_hash, blocks = read_checkpoint(model_dir / CHECKPOINT_NAME)
    if schema_hash != model.schema.schema_hash():
        raise SchemaError("checkpoint schema hash does not match the model description")
    if list(blocks) != model.params.names():
        raise SchemaError("checkpoint parameter names do not match the model layout")
    for name, arr in blocks.items():
        if arr.shape != model.params[name].shape:
            raise SchemaError(f"checkpoint block {name} has shape {arr.shape}, model expects "
                              f"{model.params[name].shape}")
        model.params[name] = arr
    return model
