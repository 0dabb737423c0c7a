"""
Cross-attention fusion of the grey-matter image embedding with the tabular
token set, modality-aware masking, modality dropout and the 3-class head.

The image embedding is the query; the encoded tabular tokens plus the tabular
CLS are keys/values. A sample whose GM embedding is absent (or not consumed by
the model) queries with a learned missing-image vector instead.
"""
from dataclasses import asdict, dataclass, replace

import numpy as np

from config import CLASSES, ModelConfig, section_from_dict
from services import layers
from services import tensor_engine as te
from services.dataset_service import (IMAGING, MODALITIES, Dataset, DatasetSchema, ModalityKind,
                                      parse_modality, presence_matrix)
from services.errors import ConfigError, SchemaError
from services.image_encoder import ImageEncoder
from services.run_log import get_logger
from services.tabular_encoder import TabularEncoder

log = get_logger('FUSION')

GM = MODALITIES.index(ModalityKind.GM)
PREDICT_CHUNK = 512


@dataclass(frozen=True)
class ModalityMask:
    """Presence of each modality for one sample."""
    present: dict  # ModalityKind -> bool

    @classmethod
    def from_row(cls, row):
        return cls({k: bool(v) for k, v in zip(MODALITIES, row)})

    @classmethod
    def from_sample(cls, sample):
        return cls({k: sample.modalities[k].present for k in MODALITIES})

    def as_row(self):
        return np.array([self.present.get(k, False) for k in MODALITIES], dtype=bool)

    def without(self, kinds):
        drop = {ModalityKind(k) for k in kinds}
        return ModalityMask({k: (v and k not in drop) for k, v in self.present.items()})


@dataclass(frozen=True)
class DropoutPolicy:
    probs: dict  # ModalityKind -> drop probability

    def __post_init__(self):
        for kind, p in self.probs.items():
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"drop probability for {kind.value} must lie in [0, 1]")
        imaging = [k for k in IMAGING if self.probs.get(k, 0.0) > 0]
        if len(imaging) > 1:
            raise ConfigError("a dropout policy may target at most one imaging stream")
        if any(self.probs.get(k, 0.0) >= 1.0 for k in IMAGING):
            raise ConfigError("an imaging stream cannot be dropped with probability 1")

    @classmethod
    def from_config(cls, dropout_cfg):
        return cls({ModalityKind(name): float(p) for name, p in asdict(dropout_cfg).items()})

    def vector(self):
        return np.array([self.probs.get(k, 0.0) for k in MODALITIES])


def apply_dropout(mask, policy, rng):
    """
    Drop each present modality independently with its policy probability.

    Accepts a ModalityMask or a (B, 4) presence matrix and returns the same kind.
    Uniform draws are taken for all four modalities of every row so the RNG
    stream does not depend on the policy. An imaging drop that would leave a
    row with no imaging stream is undone.
    """
    single = isinstance(mask, ModalityMask)
    presence = np.atleast_2d(mask.as_row() if single else np.asarray(mask, dtype=bool))
    u = rng.random(presence.shape)
    kept = presence & ~(u < policy.vector()[None, :])

    rad, gm = MODALITIES.index(ModalityKind.RADIOMICS), MODALITIES.index(ModalityKind.GM)
    lost = ~(kept[:, rad] | kept[:, gm]) & (presence[:, rad] | presence[:, gm])
    kept[lost, rad] = presence[lost, rad]
    kept[lost, gm] = presence[lost, gm]
    return ModalityMask.from_row(kept[0]) if single else kept


def cross_attend(p, prefix, query, kv, valid, heads, eps=1e-5):
    """
    Multi-head attention of query (B, d) over kv tokens (B, m, d), then
    residual add and layer norm. A row with no valid kv token yields
    layer_norm(query). Returns (output (B, d), attention weights (B, h, 1, m)).
    """
    valid = np.asarray(valid, dtype=bool)
    b, d = query.shape
    q3 = te.reshape(query, (b, 1, d))
    out, weights = layers.multi_head_attention(p, prefix + 'attn.', q3, kv, valid, heads,
                                               allow_all_masked=True)
    any_valid = valid.any(axis=1).astype(np.float64)[:, None, None]
    fused = layers.layer_norm(p, prefix + 'ln.', q3 + out * any_valid, eps)
    return te.reshape(fused, (b, d)), weights


@dataclass(frozen=True)
class FusionBatch:
    index: np.ndarray
    presence: np.ndarray  # (B, 4) after model restriction and masks
    x_num: np.ndarray
    codes: np.ndarray
    image: np.ndarray  # (B, image input dim), zero rows where GM is invalid
    labels: np.ndarray

    def __len__(self):
        return len(self.index)

    def with_presence(self, presence):
        return replace(self, presence=np.asarray(presence, dtype=bool))

    def take(self, rows):
        return FusionBatch(self.index[rows], self.presence[rows], self.x_num[rows],
                           self.codes[rows], self.image[rows], self.labels[rows])


class FusionModel:
    """Tabular FT-Transformer + image embedding + cross-attention + classifier MLP."""

    def __init__(self, schema, cfg=None, seed=0, volume_shape=None):
        self.schema = schema
        self.cfg = cfg or ModelConfig()
        self.seed = int(seed)
        self.used = [parse_modality(m) for m in self.cfg.modalities]
        self.used_row = np.array([k in self.used for k in MODALITIES], dtype=bool)

        rng = np.random.default_rng(self.seed)
        d = self.cfg.d
        self.params = te.ParameterStore()
        self.tabular = TabularEncoder(schema, self.cfg, self.used, self.params, rng)
        self.image = ImageEncoder(self.cfg, self.params, rng, volume_shape)
        self.project = self.cfg.d_img != d
        if self.project:
            layers.init_linear(self.params, 'fuse.img_proj.', self.cfg.d_img, d, rng)
        self.params.add('fuse.missing_query', te.uniform_init(rng, (d,), d))
        layers.init_attention(self.params, 'fuse.xattn.attn.', d, rng)
        layers.init_layer_norm(self.params, 'fuse.xattn.ln.', d)
        head_in = d
        if self.cfg.attention_direction == 'symmetric':
            layers.init_attention(self.params, 'fuse.rev.attn.', d, rng)
            layers.init_layer_norm(self.params, 'fuse.rev.ln.', d)
            head_in = 2 * d
        layers.init_linear(self.params, 'head.fc1.', head_in, d, rng)
        layers.init_linear(self.params, 'head.fc2.', d, len(CLASSES), rng)
        log.debug(f"model with {sum(a.size for _, a in self.params.items())} parameters, "
                  f"{self.tabular.layout.n_tokens} tabular tokens")

    # -- description / persistence ------------------------------------------

    @property
    def layout(self):
        return self.tabular.layout

    def describe(self):
        return {
            "model": asdict(self.cfg),
            "schema": self.schema.to_dict(),
            "init_seed": self.seed,
            "volume_shape": list(self.image.volume_shape) if self.image.volume_shape else None,
        }

    @classmethod
    def from_description(cls, data):
        cfg = section_from_dict(ModelConfig, data["model"], "model")
        cfg.validate()
        return cls(DatasetSchema.from_dict(data["schema"]), cfg, data.get("init_seed", 0), data.get("volume_shape"))

    # -- inputs -------------------------------------------------------------

    def batch(self, dataset, index=None, mask=()):
        """Model inputs for the given rows, with the listed modalities masked."""
        index = np.arange(len(dataset)) if index is None else np.asarray(index)
        presence = presence_matrix(dataset)[index] & self.used_row[None, :]
        for kind in mask:
            presence[:, MODALITIES.index(ModalityKind(kind))] = False
        x_num, codes = self.layout.inputs(dataset, index, presence)

        gm_rows = presence[:, GM]
        image = np.zeros((len(index), self.image.input_dim))
        if gm_rows.any():
            if self.image.mode == 'precomputed':
                raw = self.image.prepare(dataset.numeric[ModalityKind.GM][index])
                if np.isnan(raw[gm_rows]).any():
                    raise SchemaError("GmEmbedding has missing entries in present rows")
                image[gm_rows] = raw[gm_rows]
            else:
                if dataset.volumes is None:
                    raise SchemaError("trainable image encoder needs volumes in the dataset")
                rows = np.flatnonzero(gm_rows)
                image[rows] = self.image.prepare([dataset.volumes[index[i]] for i in rows])
        return FusionBatch(index, presence, x_num, codes, image, dataset.labels[index])

    # -- forward ------------------------------------------------------------

    def image_query(self, p, batch, image_input=None):
        emb = self.image.embed(p, batch.image if image_input is None else image_input)
        if self.project:
            emb = layers.dense(p, 'fuse.img_proj.', emb)
        gm_valid = batch.presence[:, GM].astype(np.float64)[:, None]
        return emb * gm_valid + p['fuse.missing_query'] * (1.0 - gm_valid)

    def tokens(self, p, batch):
        return self.tabular.tokenize(p, batch.x_num, batch.codes)

    def _kv(self, encoded, tok_valid, presence):
        """Key/value set: per-feature tokens with the CLS, or one mean token per modality."""
        cls_valid = tok_valid[:, 1:].any(axis=1)
        if self.cfg.kv_granularity == 'token':
            valid = tok_valid.copy()
            valid[:, 0] = cls_valid
            return encoded, valid
        kinds = self.layout.kinds()
        b, t = tok_valid.shape
        pool = np.zeros((b, len(kinds) + 1, t))
        pool[:, 0, 0] = 1.0
        valid = np.zeros((b, len(kinds) + 1), dtype=bool)
        valid[:, 0] = cls_valid
        for m, kind in enumerate(kinds, start=1):
            members = self.layout.source == MODALITIES.index(kind)
            rows = presence[:, MODALITIES.index(kind)]
            pool[rows, m, :] = members / members.sum()
            valid[:, m] = rows
        return te.matmul(pool, encoded), valid

    def logits_from(self, p, tokens, query, presence):
        """Classifier logits (B, 3) from tabular input tokens and the image query."""
        tok_valid = self.layout.validity(presence)
        encoded, cls = self.tabular.encode(p, tokens, tok_valid)
        kv, kv_valid = self._kv(encoded, tok_valid, presence)
        z, _ = cross_attend(p, 'fuse.xattn.', query, kv, kv_valid, self.cfg.cross_heads, self.cfg.ln_eps)
        if self.cfg.attention_direction == 'symmetric':
            b, d = query.shape
            rev, _ = cross_attend(p, 'fuse.rev.', cls, te.reshape(query, (b, 1, d)),
                                  presence[:, GM:GM + 1], self.cfg.cross_heads, self.cfg.ln_eps)
            z = te.concat([z, rev], axis=1)
        hidden = te.gelu(layers.dense(p, 'head.fc1.', z))
        return layers.dense(p, 'head.fc2.', hidden)

    def forward(self, p, batch):
        return self.logits_from(p, self.tokens(p, batch), self.image_query(p, batch), batch.presence)

    def predict_batch(self, batch):
        p = self.params.bind()
        return te.softmax(self.forward(p, batch)).data

    def predict(self, dataset, mask=()):
        """Class probabilities (N, 3) in CLASSES order."""
        out = []
        for start in range(0, len(dataset), PREDICT_CHUNK):
            index = np.arange(start, min(start + PREDICT_CHUNK, len(dataset)))
            out.append(self.predict_batch(self.batch(dataset, index, mask)))
        return np.concatenate(out, axis=0) if out else np.zeros((0, len(CLASSES)))

    def predict_sample(self, sample, mask=None):
        """Probabilities for one Sample under an optional ModalityMask."""
        dataset = Dataset.from_samples(self.schema, [sample])
        masked = ()
        if mask is not None:
            masked = [k for k in MODALITIES if not mask.present.get(k, False)]
        return self.predict(dataset, masked)[0]
