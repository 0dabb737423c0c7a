"""
Dataset containers, the on-disk CSV + manifest format, and patient-level splitting.

A Dataset is stored column-wise: one float matrix per modality (NaN = missing
entry), one integer matrix of categorical codes (-1 = missing), and one
presence vector per modality. Sample / ModalityBlock are the row view of it.
All arrays are frozen after construction.
"""
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from config import CLASSES
from services.artifacts import write_frame
from services.errors import ConfigError, FormatError, SchemaError, SplitError
from services.run_log import get_logger
from services.volume_io import read_mask, read_volume, write_mask, write_volume

log = get_logger('DATA')

FORMAT_VERSION = 1
MANIFEST_NAME = 'dataset.json'


class ModalityKind(str, Enum):
    RADIOMICS = "Radiomics"
    GM = "GmEmbedding"
    GENES = "Genes"
    META = "Meta"


MODALITIES = (ModalityKind.RADIOMICS, ModalityKind.GM, ModalityKind.GENES, ModalityKind.META)
IMAGING = (ModalityKind.RADIOMICS, ModalityKind.GM)
TABULAR = (ModalityKind.RADIOMICS, ModalityKind.GENES, ModalityKind.META)

MODALITY_FILES = {
    ModalityKind.RADIOMICS: 'tabular.csv',
    ModalityKind.GM: 'gm_embeddings.csv',
    ModalityKind.GENES: 'genes.csv',
    ModalityKind.META: 'meta.csv',
}

_ALIASES = {
    'rad': ModalityKind.RADIOMICS, 'radiomics': ModalityKind.RADIOMICS,
    'gm': ModalityKind.GM, 'gmembedding': ModalityKind.GM, 'gm_embedding': ModalityKind.GM,
    'genes': ModalityKind.GENES, 'gene': ModalityKind.GENES,
    'meta': ModalityKind.META, 'metadata': ModalityKind.META,
}


def parse_modality(name):
    """Map a CLI/config spelling ('genes', 'GmEmbedding', 'rad', ...) to a ModalityKind."""
    key = str(name).strip().lower()
    if key in _ALIASES:
        return _ALIASES[key]
    raise ConfigError(f"unknown modality '{name}'")


def parse_modality_list(text):
    if text is None or text == '':
        return []
    items = text.split(',') if isinstance(text, str) else text
    return [parse_modality(item) for item in items if str(item).strip()]


def label_index(name):
    try:
        return CLASSES.index(name)
    except ValueError:
        raise SchemaError(f"unknown label '{name}'; expected one of {list(CLASSES)}")


@dataclass(frozen=True)
class DatasetSchema:
    numeric: dict  # ModalityKind -> list of feature names
    categorical: list = field(default_factory=list)  # Meta categorical feature names
    vocab: dict = field(default_factory=dict)  # categorical name -> list of category strings

    def names(self, kind):
        return list(self.numeric.get(ModalityKind(kind), []))

    def dim(self, kind):
        return len(self.numeric.get(ModalityKind(kind), []))

    def cardinalities(self):
        return [len(self.vocab[name]) for name in self.categorical]

    def feature_counts(self):
        counts = {k.value: self.dim(k) for k in MODALITIES}
        counts['MetaCategorical'] = len(self.categorical)
        return counts

    def to_dict(self):
        return {
            "numeric": {k.value: self.names(k) for k in MODALITIES},
            "categorical": list(self.categorical),
            "vocab": {name: list(self.vocab[name]) for name in self.categorical},
        }

    @classmethod
    def from_dict(cls, data):
        try:
            numeric = {ModalityKind(k): list(v) for k, v in data["numeric"].items()}
            categorical = list(data.get("categorical", []))
            vocab = {name: list(data["vocab"][name]) for name in categorical}
        except (KeyError, ValueError, TypeError) as e:
            raise SchemaError(f"malformed schema: {e}")
        for kind in MODALITIES:
            numeric.setdefault(kind, [])
        return cls(numeric, categorical, vocab)

    def schema_hash(self):
        raw = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(raw.encode('utf-8')).hexdigest()

    def with_numeric(self, kind, names):
        numeric = dict(self.numeric)
        numeric[ModalityKind(kind)] = list(names)
        return DatasetSchema(numeric, list(self.categorical), dict(self.vocab))


@dataclass(frozen=True)
class ModalityBlock:
    kind: ModalityKind
    values: np.ndarray
    codes: np.ndarray
    present: bool


@dataclass(frozen=True)
class Sample:
    patient_id: str
    visit_id: str
    label: Optional[str]
    modalities: dict  # ModalityKind -> ModalityBlock
    volume: object = None

    def __post_init__(self):
        if not any(self.modalities[k].present for k in IMAGING):
            raise SchemaError(f"sample {self.patient_id}/{self.visit_id} has neither Radiomics nor GmEmbedding")
        if self.label is not None and self.label not in CLASSES:
            raise SchemaError(f"unknown label '{self.label}'")


def _freeze(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


class Dataset:
    """Immutable column store of samples conforming to one schema."""

    def __init__(self, schema, patient_ids, visit_ids, labels, numeric, codes, present, volumes=None):
        n = len(patient_ids)
        self.schema = schema
        self.patient_ids = _freeze(np.asarray(patient_ids, dtype=object))
        self.visit_ids = _freeze(np.asarray(visit_ids, dtype=object))
        self.labels = _freeze(np.asarray(labels, dtype=np.int64).reshape(n))
        self.numeric = {}
        self.present = {}
        for kind in MODALITIES:
            mat = np.asarray(numeric.get(kind, np.zeros((n, 0))), dtype=np.float64).reshape(n, schema.dim(kind))
            self.numeric[kind] = _freeze(mat)
            self.present[kind] = _freeze(np.asarray(present.get(kind, np.zeros(n, bool)), dtype=bool).reshape(n))
        self.codes = _freeze(np.asarray(codes, dtype=np.int64).reshape(n, len(schema.categorical)))
        self.volumes = tuple(volumes) if volumes is not None else None
        self._validate()

    def _validate(self):
        imaging = self.present[ModalityKind.RADIOMICS] | self.present[ModalityKind.GM]
        if len(self) and not imaging.all():
            bad = int(np.flatnonzero(~imaging)[0])
            raise SchemaError(f"sample {self.patient_ids[bad]}/{self.visit_ids[bad]} has no imaging modality")
        if np.any((self.labels < -1) | (self.labels >= len(CLASSES))):
            raise SchemaError("labels outside the class set")
        cards = self.schema.cardinalities()
        for j, card in enumerate(cards):
            col = self.codes[:, j]
            if np.any(col >= card) or np.any(col < -1):
                raise SchemaError(f"categorical code out of range for '{self.schema.categorical[j]}'")
        if self.volumes is not None and len(self.volumes) != len(self):
            raise SchemaError("volume list length does not match sample count")

    def __len__(self):
        return len(self.patient_ids)

    @property
    def labeled(self):
        return bool(len(self)) and bool(np.all(self.labels >= 0))

    def patients(self):
        """Distinct patient ids in sorted order."""
        return sorted(set(self.patient_ids.tolist()))

    def patient_labels(self):
        out = {}
        for pid, lab in zip(self.patient_ids, self.labels):
            out.setdefault(pid, int(lab))
        return out

    def class_counts(self, by_patient=False):
        if by_patient:
            labs = list(self.patient_labels().values())
        else:
            labs = self.labels.tolist()
        return {name: int(sum(1 for v in labs if v == i)) for i, name in enumerate(CLASSES)}

    def subset(self, index):
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return Dataset(
            self.schema,
            self.patient_ids[index], self.visit_ids[index], self.labels[index],
            {k: self.numeric[k][index] for k in MODALITIES},
            self.codes[index],
            {k: self.present[k][index] for k in MODALITIES},
            [self.volumes[i] for i in index] if self.volumes is not None else None,
        )

    def patient_index(self, patients):
        wanted = set(patients)
        return np.array([pid in wanted for pid in self.patient_ids], dtype=bool)

    def replace(self, schema=None, numeric=None, codes=None, present=None, labels=None):
        """New dataset with some columns swapped out (used by preprocessing and masking)."""
        merged_numeric = dict(self.numeric)
        merged_numeric.update(numeric or {})
        merged_present = dict(self.present)
        merged_present.update(present or {})
        return Dataset(
            schema or self.schema,
            self.patient_ids, self.visit_ids,
            self.labels if labels is None else labels,
            merged_numeric,
            self.codes if codes is None else codes,
            merged_present,
            self.volumes,
        )

    def without_labels(self):
        return self.replace(labels=np.full(len(self), -1, dtype=np.int64))

    def sample(self, i):
        label = int(self.labels[i])
        blocks = {}
        for kind in MODALITIES:
            codes = self.codes[i] if kind == ModalityKind.META else np.zeros(0, dtype=np.int64)
            blocks[kind] = ModalityBlock(kind, self.numeric[kind][i], codes, bool(self.present[kind][i]))
        return Sample(str(self.patient_ids[i]), str(self.visit_ids[i]),
                      CLASSES[label] if label >= 0 else None, blocks,
                      self.volumes[i] if self.volumes is not None else None)

    def samples(self):
        for i in range(len(self)):
            yield self.sample(i)

    @classmethod
    def from_samples(cls, schema, samples):
        samples = list(samples)
        n = len(samples)
        numeric = {k: np.full((n, schema.dim(k)), np.nan) for k in MODALITIES}
        present = {k: np.zeros(n, dtype=bool) for k in MODALITIES}
        codes = np.full((n, len(schema.categorical)), -1, dtype=np.int64)
        for i, s in enumerate(samples):
            for kind in MODALITIES:
                block = s.modalities[kind]
                present[kind][i] = block.present
                if block.present:
                    if len(block.values) != schema.dim(kind):
                        raise SchemaError(f"{kind.value} arity {len(block.values)} != schema {schema.dim(kind)}")
                    numeric[kind][i] = block.values
                    if kind == ModalityKind.META:
                        codes[i] = block.codes
        labels = [label_index(s.label) if s.label is not None else -1 for s in samples]
        volumes = [s.volume for s in samples] if any(s.volume is not None for s in samples) else None
        return cls(schema, [s.patient_id for s in samples], [s.visit_id for s in samples],
                   labels, numeric, codes, present, volumes)


# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------

def mask_modalities(dataset, kinds):
    """Mark the given modalities absent for every sample (inference-time masking)."""
    kinds = [ModalityKind(k) for k in kinds]
    present = {k: np.zeros(len(dataset), dtype=bool) for k in kinds}
    return dataset.replace(present=present)


def conform_schema(dataset, schema):
    """
    Re-express dataset under another schema. Only modalities that no sample
    carries may differ; their columns become NaN / -1 and stay absent.
    """
    if dataset.schema == schema:
        return dataset
    n = len(dataset)
    numeric = {}
    for kind in MODALITIES:
        if dataset.schema.names(kind) == schema.names(kind):
            numeric[kind] = dataset.numeric[kind]
        elif dataset.present[kind].any():
            raise SchemaError(f"{kind.value} features do not match the model's training schema")
        else:
            numeric[kind] = np.full((n, schema.dim(kind)), np.nan)
    codes = dataset.codes
    same_cats = (dataset.schema.categorical == schema.categorical
                 and all(dataset.schema.vocab[c] == schema.vocab[c] for c in schema.categorical))
    if not same_cats:
        if dataset.present[ModalityKind.META].any():
            raise SchemaError("categorical metadata does not match the model's training schema")
        codes = np.full((n, len(schema.categorical)), -1, dtype=np.int64)
    return Dataset(schema, dataset.patient_ids, dataset.visit_ids, dataset.labels, numeric, codes,
                   dict(dataset.present), dataset.volumes)


def presence_matrix(dataset, modalities=MODALITIES):
    return np.stack([dataset.present[ModalityKind(k)] for k in modalities], axis=1)


# ---------------------------------------------------------------------------
# Patient-level k-fold
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: dict  # patient_id -> fold index

    def test_index(self, dataset, fold):
        return np.array([self.assignments[pid] == fold for pid in dataset.patient_ids], dtype=bool)

    def train_index(self, dataset, fold):
        return ~self.test_index(dataset, fold)

    def fold_patients(self, fold):
        return sorted(p for p, f in self.assignments.items() if f == fold)

    def covers(self, dataset):
        return all(pid in self.assignments for pid in dataset.patient_ids)

    def to_dict(self):
        return {"k": self.k, "assignments": {p: self.assignments[p] for p in sorted(self.assignments)}}


def group_kfold(dataset, k, seed, stratified=False):
    """
    Deal patients into k folds after a seeded shuffle.

    All visits of a patient land in the same fold. With stratified=True the
    shuffled patients are ordered class by class before dealing, so each fold
    gets a near-equal share of every class.
    """
    if k < 2:
        raise SplitError(f"k must be >= 2, got {k}")
    patients = dataset.patients()
    if len(patients) < k:
        raise SplitError(f"{len(patients)} patients cannot fill {k} folds")

    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    if stratified:
        labels = dataset.patient_labels()
        order = sorted(order, key=lambda p: labels[p])  # stable: keeps the shuffle within a class

    assignments = {pid: i % k for i, pid in enumerate(order)}
    return FoldPlan(k, assignments)


def split_validation(dataset, fraction, seed):
    """Carve a patient-grouped validation subset out of a training split."""
    patients = dataset.patients()
    n_val = int(round(fraction * len(patients)))
    if n_val < 1 or n_val >= len(patients):
        raise ConfigError(
            f"validation split of {fraction} over {len(patients)} patients leaves an empty train or validation set")
    rng = np.random.default_rng(seed)
    chosen = {patients[i] for i in rng.permutation(len(patients))[:n_val]}
    val = dataset.patient_index(chosen)
    return dataset.subset(~val), dataset.subset(val)


# ---------------------------------------------------------------------------
# CSV + manifest format
# ---------------------------------------------------------------------------

def _fmt(value):
    return '' if not np.isfinite(value) else repr(float(value))


def _modality_columns(schema, kind):
    columns = ['patient_id', 'visit_id']
    if kind != ModalityKind.GM:
        columns.append('label')
    columns += schema.names(kind)
    if kind == ModalityKind.META:
        columns += schema.categorical
    return columns


def _modality_frame(dataset, kind):
    schema = dataset.schema
    rows = np.flatnonzero(dataset.present[kind])
    frame = pd.DataFrame({'patient_id': dataset.patient_ids[rows], 'visit_id': dataset.visit_ids[rows]},
                         dtype=object)
    if kind != ModalityKind.GM:
        frame['label'] = [CLASSES[int(lab)] if lab >= 0 else '' for lab in dataset.labels[rows]]
    values = dataset.numeric[kind][rows]
    for j, name in enumerate(schema.names(kind)):
        frame[name] = [_fmt(v) for v in values[:, j]]
    if kind == ModalityKind.META:
        for j, name in enumerate(schema.categorical):
            vocab = schema.vocab[name]
            frame[name] = [vocab[int(c)] if c >= 0 else '' for c in dataset.codes[rows, j]]
    return frame[_modality_columns(schema, kind)]


def save_dataset(dataset, out_dir, extra=None):
    """
    Write tabular.csv / gm_embeddings.csv / genes.csv / meta.csv plus dataset.json.
    A modality file omits the row of any sample where that modality is absent.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schema = dataset.schema
    files = {}

    for kind in MODALITIES:
        if kind == ModalityKind.GM and dataset.volumes is not None and schema.dim(kind) == 0:
            continue
        fname = MODALITY_FILES[kind]
        write_frame(out / fname, _modality_frame(dataset, kind))
        files[kind.value] = fname

    if dataset.volumes is not None:
        vol_dir = out / 'volumes'
        vol_dir.mkdir(exist_ok=True)
        for i, vol in enumerate(dataset.volumes):
            write_volume(vol_dir / f"{dataset.patient_ids[i]}__{dataset.visit_ids[i]}.obv", vol)
        files['volumes'] = 'volumes'

    manifest = {
        "format_version": FORMAT_VERSION,
        "classes": list(CLASSES),
        "schema": schema.to_dict(),
        "files": files,
        "n_samples": len(dataset),
        "n_patients": len(dataset.patients()),
        "class_counts": dataset.class_counts(by_patient=True),
    }
    if extra:
        manifest.update(extra)
    with open(out / MANIFEST_NAME, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write('\n')
    log.info(f"Wrote {len(dataset)} samples ({manifest['n_patients']} patients) to {out}")
    return manifest


def load_manifest(data_dir):
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        raise FormatError(f"no {MANIFEST_NAME} in {data_dir}")
    try:
        manifest = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: {e}")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {manifest.get('format_version')}")
    if list(manifest.get("classes", [])) != list(CLASSES):
        raise FormatError(f"{path}: class list must be {list(CLASSES)}")
    return manifest


def _read_modality(path, schema, kind):
    """One modality file as a frame: ids, label and categories as text, features as float (NaN = empty)."""
    fname = path.name
    expect = _modality_columns(schema, kind)
    text_cols = [c for c in expect if c not in set(schema.names(kind))]
    try:
        header = list(pd.read_csv(path, nrows=0).columns)
        if header != expect:
            raise SchemaError(f"{fname}: header does not match schema")
        frame = pd.read_csv(path, dtype={c: str for c in text_cols}, keep_default_na=False, na_values=[''],
                            float_precision='round_trip')
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise SchemaError(f"{fname}: {e}")
    for name in schema.names(kind):
        if pd.api.types.is_numeric_dtype(frame[name]):
            continue
        bad = frame[name][pd.to_numeric(frame[name], errors='coerce').isna() & frame[name].notna()]
        if len(bad):
            raise SchemaError(f"{fname}:{int(bad.index[0]) + 2}: '{bad.iloc[0]}' is not a number")
    frame[text_cols] = frame[text_cols].fillna('')
    duplicated = frame.duplicated(['patient_id', 'visit_id'])
    if duplicated.any():
        row = frame[duplicated].iloc[0]
        raise SchemaError(f"{fname}: duplicate row for ({row['patient_id']}, {row['visit_id']})")
    return frame


def load_dataset(data_dir):
    """Read a dataset directory written by save_dataset (or by hand in the same format)."""
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    schema = DatasetSchema.from_dict(manifest["schema"])
    files = manifest.get("files", {})

    frames = {}
    for kind in MODALITIES:
        fname = files.get(kind.value)
        if not fname:
            continue
        path = data_dir / fname
        if not path.exists():
            raise FormatError(f"manifest lists {fname} but it is missing")
        frames[kind] = _read_modality(path, schema, kind)

    keys = []
    seen = {}
    labels = {}
    for kind, frame in frames.items():
        texts = frame['label'] if 'label' in frame else [''] * len(frame)
        for line_no, (pid, vid, text) in enumerate(zip(frame['patient_id'], frame['visit_id'], texts), start=2):
            key = (pid, vid)
            if key not in seen:
                seen[key] = len(keys)
                keys.append(key)
            if text != '':
                lab = label_index(text)
                if labels.setdefault(key, lab) != lab:
                    raise SchemaError(f"{MODALITY_FILES[kind]}:{line_no}: conflicting label for {key}")

    n = len(keys)
    numeric = {k: np.full((n, schema.dim(k)), np.nan) for k in MODALITIES}
    present = {k: np.zeros(n, dtype=bool) for k in MODALITIES}
    codes = np.full((n, len(schema.categorical)), -1, dtype=np.int64)
    for kind, frame in frames.items():
        idx = np.array([seen[key] for key in zip(frame['patient_id'], frame['visit_id'])], dtype=np.int64)
        present[kind][idx] = True
        numeric[kind][idx] = frame[schema.names(kind)].to_numpy(dtype=np.float64).reshape(len(idx), schema.dim(kind))
        if kind == ModalityKind.META:
            for j, name in enumerate(schema.categorical):
                vocab = schema.vocab[name]
                unknown = ~frame[name].isin(vocab + [''])
                if unknown.any():
                    raise SchemaError(f"{MODALITY_FILES[kind]}:{int(np.flatnonzero(unknown)[0]) + 2}: "
                                      f"unknown category '{frame[name][unknown].iloc[0]}' for '{name}'")
                codes[idx, j] = [vocab.index(t) if t != '' else -1 for t in frame[name]]

    volumes = None
    if files.get('volumes'):
        vol_dir = data_dir / files['volumes']
        volumes = []
        for pid, vid in keys:
            path = vol_dir / f"{pid}__{vid}.obv"
            if not path.exists():
                raise FormatError(f"missing volume {path}")
            volumes.append(read_volume(path))
        for i in range(n):
            present[ModalityKind.GM][i] = True

    return Dataset(schema, [k[0] for k in keys], [k[1] for k in keys],
                   [labels.get(k, -1) for k in keys], numeric, codes, present, volumes)


def save_region_mask(data_dir, mask):
    vol_dir = Path(data_dir) / 'volumes'
    vol_dir.mkdir(parents=True, exist_ok=True)
    write_mask(vol_dir / 'regions.obm', mask)


def load_region_mask(data_dir):
    return read_mask(Path(data_dir) / 'volumes' / 'regions.obm')
