"""
Run configuration.

One JSON document drives every command. It is split into nested sections
(synth, selection, model, train) that map onto the dataclasses below. Unknown
keys anywhere are rejected so a typo never silently falls back to a default.
Process-level knobs (log level, ledger location, worker cap) come from the
environment / .env instead.
"""
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from dotenv import load_dotenv

from services.errors import ConfigError

load_dotenv()

CLASSES = ("CTL", "MCI", "AD")
MODALITY_NAMES = ("Radiomics", "GmEmbedding", "Genes", "Meta")

# Environment knobs, e.g. in .env:
#   OMNIFUSE_LOG=DEBUG
#   OMNIFUSE_DB=sqlite:///omnifuse_runs.db   ('none' disables the run ledger)
#   OMNIFUSE_MAX_WORKERS=4
DB_URI = os.getenv('OMNIFUSE_DB', 'sqlite:///omnifuse_runs.db')
MAX_WORKERS = int(os.getenv('OMNIFUSE_MAX_WORKERS', '0')) or (os.cpu_count() or 1)


def _default_counts():
    return {"CTL": 100, "MCI": 100, "AD": 100}


def _default_informative():
    return {"Radiomics": 6, "GmEmbedding": 6, "Genes": 8, "Meta": 2}


@dataclass
class SynthConfig:
    class_counts: dict = field(default_factory=_default_counts)  # patients per class
    visits_min: int = 1
    visits_max: int = 3
    radiomics_dim: int = 16
    gm_dim: int = 64
    genes_dim: int = 40
    meta_numeric_dim: int = 4
    informative: dict = field(default_factory=_default_informative)
    snr: float = 2.3
    patient_effect: float = 0.3
    missing_genes: float = 0.2
    missing_meta: float = 0.2
    missing_entry_rate: float = 0.01
    domain_shift: float = 0.0
    image_mode: str = "embedding"  # embedding | volume
    volume_dim: int = 8
    pool_grid: int = 2

    def validate(self):
        if set(self.class_counts) != set(CLASSES):
            raise ConfigError(f"synth.class_counts needs exactly {list(CLASSES)}")
        for name, count in self.class_counts.items():
            if not isinstance(count, int) or count < 0:
                raise ConfigError(f"synth.class_counts[{name}] must be a non-negative integer")
        if sum(self.class_counts.values()) == 0:
            raise ConfigError("synth.class_counts are all zero")
        if self.visits_min < 1 or self.visits_max < self.visits_min:
            raise ConfigError("synth visits need 1 <= visits_min <= visits_max")
        for name in ("radiomics_dim", "gm_dim", "genes_dim", "meta_numeric_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"synth.{name} must be >= 1")
        if set(self.informative) - set(MODALITY_NAMES):
            raise ConfigError(f"synth.informative keys must be among {list(MODALITY_NAMES)}")
        dims = {"Radiomics": self.radiomics_dim, "GmEmbedding": self.gm_dim,
                "Genes": self.genes_dim, "Meta": self.meta_numeric_dim}
        if self.image_mode == "volume":
            dims["GmEmbedding"] = self.pool_grid ** 3
        for name, n in self.informative.items():
            if n < 0 or n > dims[name]:
                raise ConfigError(f"synth.informative[{name}] must lie in [0, {dims[name]}]")
        if not self.snr > 0:
            raise ConfigError("synth.snr must be > 0")
        if self.patient_effect < 0 or self.domain_shift < 0:
            raise ConfigError("synth.patient_effect and synth.domain_shift must be >= 0")
        for name in ("missing_genes", "missing_meta", "missing_entry_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"synth.{name} must lie in [0, 1]")
        if self.image_mode not in ("embedding", "volume"):
            raise ConfigError("synth.image_mode must be 'embedding' or 'volume'")
        if self.image_mode == "volume" and (self.pool_grid < 1 or self.volume_dim % self.pool_grid):
            raise ConfigError("synth.volume_dim must be a multiple of synth.pool_grid")


@dataclass
class SelectionConfig:
    p_threshold: float = 0.01
    w_f: float = 0.7
    w_p: float = 0.3
    k: int = 139
    modalities: list = field(default_factory=lambda: ["Genes"])

    def validate(self):
        if abs(self.w_f + self.w_p - 1.0) > 1e-12:
            raise ConfigError("selection.w_f + selection.w_p must equal 1")
        if self.w_f < 0 or self.w_p < 0:
            raise ConfigError("selection weights must be >= 0")
        if not 0.0 < self.p_threshold < 1.0:
            raise ConfigError("selection.p_threshold must lie in (0, 1)")
        if self.k < 1:
            raise ConfigError("selection.k must be >= 1")
        _check_modalities(self.modalities, "selection.modalities")


@dataclass
class DropoutConfig:
    """Per-modality drop probabilities used while training."""
    Genes: float = 0.3
    Meta: float = 0.3
    Radiomics: float = 0.0
    GmEmbedding: float = 0.0

    def validate(self):
        for name in MODALITY_NAMES:
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"train.dropout.{name} must lie in [0, 1]")
        if self.Radiomics > 0 and self.GmEmbedding > 0:
            raise ConfigError("dropout may target at most one imaging stream")
        if self.Radiomics >= 1.0 or self.GmEmbedding >= 1.0:
            raise ConfigError("an imaging stream cannot be dropped with probability 1")


@dataclass
class ModelConfig:
    d: int = 64
    layers: int = 2
    heads: int = 4
    d_ff: int = 128
    cross_heads: int = 4
    d_img: int = 64
    image_mode: str = "precomputed"  # precomputed | trainable
    pool_grid: int = 2
    img_hidden: int = 64
    first_layer_prenorm: bool = False
    attention_direction: str = "image_query"  # image_query | symmetric
    kv_granularity: str = "token"  # token | modality
    modalities: list = field(default_factory=lambda: list(MODALITY_NAMES))
    ln_eps: float = 1e-5

    def validate(self):
        for name in ("d", "layers", "heads", "d_ff", "cross_heads", "d_img", "pool_grid", "img_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.d % self.heads:
            raise ConfigError("model.heads must divide model.d")
        if self.d % self.cross_heads:
            raise ConfigError("model.cross_heads must divide model.d")
        if self.image_mode not in ("precomputed", "trainable"):
            raise ConfigError("model.image_mode must be 'precomputed' or 'trainable'")
        if self.attention_direction not in ("image_query", "symmetric"):
            raise ConfigError("model.attention_direction must be 'image_query' or 'symmetric'")
        if self.kv_granularity not in ("token", "modality"):
            raise ConfigError("model.kv_granularity must be 'token' or 'modality'")
        if not self.ln_eps > 0:
            raise ConfigError("model.ln_eps must be > 0")
        _check_modalities(self.modalities, "model.modalities")
        if not set(self.modalities) & {"Radiomics", "GmEmbedding"}:
            raise ConfigError("model.modalities must include Radiomics or GmEmbedding")


@dataclass
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 5e-4
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 5
    focal_gamma: float = 2.0
    val_fraction: float = 0.15
    modality_dropout: bool = True
    dropout: DropoutConfig = field(default_factory=DropoutConfig)
    folds: int = 5
    stratified_folds: bool = False
    sample_sd: bool = False
    eval_masks: list = field(default_factory=list)

    def validate(self):
        if not (self.lr > 0 and self.batch_size > 0 and self.max_epochs > 0 and self.patience > 0):
            raise ConfigError("train.lr, batch_size, max_epochs and patience must be positive")
        if self.weight_decay < 0 or self.focal_gamma < 0:
            raise ConfigError("train.weight_decay and train.focal_gamma must be >= 0")
        if self.patience > self.max_epochs:
            raise ConfigError("train.patience must not exceed train.max_epochs")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("train.val_fraction must lie in (0, 1)")
        if self.folds < 2:
            raise ConfigError("train.folds must be >= 2")
        for mask in self.eval_masks:
            _check_modalities(mask, "train.eval_masks entry")
        self.dropout.validate()


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        self.synth.validate()
        self.selection.validate()
        self.model.validate()
        self.train.validate()
        return self

    def to_dict(self):
        return asdict(self)

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))

    def config_hash(self):
        return hashlib.sha256(self.canonical_json().encode('utf-8')).hexdigest()


def _check_modalities(names, where):
    unknown = [n for n in names if n not in MODALITY_NAMES]
    if unknown:
        raise ConfigError(f"{where}: unknown modalities {unknown}; expected {list(MODALITY_NAMES)}")


def section_from_dict(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else known[name].default
        if is_dataclass(default):
            kwargs[name] = section_from_dict(type(default), value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data):
    return section_from_dict(RunConfig, data or {}, "config").validate()


def load_config(path=None):
    """Load and validate a RunConfig; no path means all defaults."""
    if path is None:
        return RunConfig().validate()
    try:
        data = json.loads(Path(path).read_text(encoding='utf-8'))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    return config_from_dict(data)
