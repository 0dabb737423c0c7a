"""
FT-Transformer over the tabular modalities.

Every numeric feature j becomes the token b_j + x_j * W_j, every categorical
feature the token b_j + W_j[code], and a learned CLS token is prepended. One
shared tokenizer/encoder covers the concatenated Radiomics, Genes and Meta
schema. Tokens of a modality that is absent for a sample are carried along
but flagged invalid, and attention never looks at them.
"""
from dataclasses import dataclass

import numpy as np

from services import layers
from services import tensor_engine as te
from services.dataset_service import MODALITIES, TABULAR, ModalityKind
from services.errors import SchemaError

CLS = -1


@dataclass(frozen=True)
class TokenLayout:
    """Token order of one model: CLS, numeric features by modality, then categoricals."""
    numeric_kinds: tuple  # ((kind, dim), ...)
    categorical: tuple  # categorical feature names
    cardinalities: tuple
    names: tuple  # one per token, CLS first
    source: np.ndarray  # index into MODALITIES per token, CLS = -1

    @classmethod
    def build(cls, schema, modalities):
        used = set(ModalityKind(m) for m in modalities)
        numeric_kinds = tuple((k, schema.dim(k)) for k in TABULAR if k in used and schema.dim(k))
        categorical = tuple(schema.categorical) if ModalityKind.META in used else ()
        cards = tuple(len(schema.vocab[c]) for c in categorical)
        names = ['[CLS]']
        source = [CLS]
        for kind, _ in numeric_kinds:
            names += [f"{kind.value}:{n}" for n in schema.names(kind)]
            source += [MODALITIES.index(kind)] * schema.dim(kind)
        names += [f"Meta:{c}" for c in categorical]
        source += [MODALITIES.index(ModalityKind.META)] * len(categorical)
        return cls(numeric_kinds, categorical, cards, tuple(names), np.array(source, dtype=np.int64))

    @property
    def n_numeric(self):
        return sum(dim for _, dim in self.numeric_kinds)

    @property
    def n_tokens(self):
        return len(self.names)

    def kinds(self):
        """Tabular modalities that own at least one token, in token order."""
        out = [k for k, _ in self.numeric_kinds]
        if self.categorical and ModalityKind.META not in out:
            out.append(ModalityKind.META)
        return out

    def validity(self, presence):
        """Per-token validity (B, T) from a (B, 4) presence matrix; CLS always valid."""
        presence = np.asarray(presence, dtype=bool)
        valid = np.ones((presence.shape[0], self.n_tokens), dtype=bool)
        feat = self.source >= 0
        valid[:, feat] = presence[:, self.source[feat]]
        return valid

    def inputs(self, dataset, index, presence):
        """
        Gather (x_num, codes) for the rows in index. Values of modalities flagged
        absent in presence are zero-filled; a present modality must be fully imputed.
        """
        b = len(index)
        x_num = np.zeros((b, self.n_numeric))
        col = 0
        for kind, dim in self.numeric_kinds:
            rows = presence[:, MODALITIES.index(kind)]
            block = dataset.numeric[kind][index]
            if np.isnan(block[rows]).any():
                raise SchemaError(f"{kind.value} has missing entries in present rows; impute before encoding")
            x_num[rows, col:col + dim] = block[rows]
            col += dim
        codes = np.zeros((b, len(self.categorical)), dtype=np.int64)
        if self.categorical:
            rows = presence[:, MODALITIES.index(ModalityKind.META)]
            block = dataset.codes[index]
            if (block[rows] < 0).any():
                raise SchemaError("Meta has missing categorical codes in present rows; impute before encoding")
            codes[rows] = block[rows]
        return x_num, codes


class TabularEncoder:

    def __init__(self, schema, cfg, modalities, params, rng, prefix='tab.'):
        self.layout = TokenLayout.build(schema, modalities)
        self.cfg = cfg
        self.prefix = prefix
        d = cfg.d
        n_num = self.layout.n_numeric
        params.add(prefix + 'num.W', te.uniform_init(rng, (n_num, d), d))
        params.add(prefix + 'num.b', te.uniform_init(rng, (n_num, d), d))
        for j, card in enumerate(self.layout.cardinalities):
            params.add(f"{prefix}cat{j}.W", te.uniform_init(rng, (card, d), d))
        params.add(prefix + 'cat.b', te.uniform_init(rng, (len(self.layout.categorical), d), d))
        params.add(prefix + 'cls', te.uniform_init(rng, (d,), d))
        for layer in range(cfg.layers):
            base = f"{prefix}layer{layer}."
            layers.init_layer_norm(params, base + 'ln1.', d)
            layers.init_attention(params, base + 'attn.', d, rng)
            layers.init_layer_norm(params, base + 'ln2.', d)
            layers.init_ffn(params, base + 'ffn.', d, cfg.d_ff, rng)
        layers.init_layer_norm(params, prefix + 'ln_out.', d)

    def tokenize(self, p, x_num, codes):
        """Token sequence (B, n + 1, d), CLS at position 0."""
        x_num = np.asarray(x_num, dtype=np.float64)
        codes = np.asarray(codes, dtype=np.int64)
        b = x_num.shape[0]
        d = self.cfg.d
        for j, card in enumerate(self.layout.cardinalities):
            bad = (codes[:, j] >= card) | (codes[:, j] < 0)
            if bad.any():
                raise SchemaError(f"categorical code {int(codes[bad, j][0])} out of range for "
                                  f"'{self.layout.categorical[j]}' (cardinality {card})")

        parts = [p[self.prefix + 'cls'] * np.ones((b, 1, d))]
        if self.layout.n_numeric:
            parts.append(x_num[:, :, None] * p[self.prefix + 'num.W'] + p[self.prefix + 'num.b'])
        bias = p[self.prefix + 'cat.b']
        for j in range(len(self.layout.categorical)):
            tok = te.take(p[f"{self.prefix}cat{j}.W"], codes[:, j], axis=0) + bias[j]
            parts.append(te.reshape(tok, (b, 1, d)))
        return te.concat(parts, axis=1)

    def encode(self, p, tokens, valid):
        """
        Pre-norm transformer stack. Returns (all tokens after the final norm, CLS row).
        The first layer skips its attention pre-norm unless first_layer_prenorm is set.
        """
        eps = self.cfg.ln_eps
        x = tokens
        for layer in range(self.cfg.layers):
            base = f"{self.prefix}layer{layer}."
            if layer == 0 and not self.cfg.first_layer_prenorm:
                h = x
            else:
                h = layers.layer_norm(p, base + 'ln1.', x, eps)
            attn, _ = layers.multi_head_attention(p, base + 'attn.', h, h, valid, self.cfg.heads)
            x = x + attn
            x = x + layers.ffn(p, base + 'ffn.', layers.layer_norm(p, base + 'ln2.', x, eps))
        x = layers.layer_norm(p, self.prefix + 'ln_out.', x, eps)
        return x, x[:, 0]
