"""
Artifact writers. Every file a command emits carries the config hash and seed:
JSON reports as top-level keys, CSV files as a leading comment line.
Output is byte-stable for a given content (sorted keys, repr floats, '\n').
"""
import json
from pathlib import Path

import pandas as pd


def stamp(config_hash, seed):
    return {"config_hash": config_hash, "seed": seed}


def write_json(path, payload, config_hash, seed):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = dict(payload)
    body.update(stamp(config_hash, seed))
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(body, f, indent=2, sort_keys=True, allow_nan=False)
        f.write('\n')
    return path


def cell(value):
    """Text of one CSV cell; floats keep their shortest round-trip repr."""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_frame(path, frame, config_hash=None, seed=None):
    """Write a frame of preformatted cells, with the stamp line first when a hash is given."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        if config_hash is not None:
            f.write(f"# config_hash={config_hash} seed={seed}\n")
        frame.to_csv(f, index=False, lineterminator='\n', na_rep='')
    return path


def write_csv(path, header, rows, config_hash, seed):
    frame = pd.DataFrame([[cell(v) for v in row] for row in rows], columns=list(header), dtype=object)
    return write_frame(path, frame, config_hash, seed)


def read_csv(path):
    """Rows of a CSV written by write_csv, as dicts of strings, skipping the stamp line."""
    frame = pd.read_csv(path, comment='#', dtype=str, keep_default_na=False)
    return frame.to_dict('records')
