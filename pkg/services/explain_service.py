"""
Attribution methods.

Shapley values for tabular features, by exact coalition enumeration (up to 15
features) or by seeded permutation sampling. A feature outside a coalition is
replaced by the background mean (numeric) or mode (categorical). For the
fused model there is also gradient x input per token and a Grad-CAM style map
over the pooling grid of the trainable volume encoder.
"""
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from config import CLASSES
from services import tensor_engine as te
from services.dataset_service import presence_matrix
from services.errors import ArityError, ConfigError, SchemaError
from services.fusion_service import GM
from services.run_log import get_logger

log = get_logger('EXPLAIN')

MAX_EXACT_FEATURES = 15
EVAL_CHUNK = 4096


@dataclass
class Attribution:
    method: str  # ExactShapley | McShapley | GradInput
    target_class: int
    features: list
    values: np.ndarray
    baseline_value: float
    sample_value: float
    efficiency_residual: Optional[float] = None

    def to_dict(self):
        return {
            "method": self.method,
            "target_class": CLASSES[self.target_class] if 0 <= self.target_class < len(CLASSES) else self.target_class,
            "phi": {name: float(v) for name, v in zip(self.features, self.values)},
            "baseline_value": self.baseline_value,
            "sample_value": self.sample_value,
            "efficiency_residual": self.efficiency_residual,
        }


def background_reference(background, categorical=None):
    """Column means of the background set (NaN ignored), modes for categorical columns."""
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if background.shape[0] == 0:
        raise ConfigError("background set must not be empty")
    categorical = np.zeros(background.shape[1], dtype=bool) if categorical is None else np.asarray(categorical)
    ref = np.zeros(background.shape[1])
    for j in range(background.shape[1]):
        col = background[:, j]
        col = col[~np.isnan(col)]
        if col.size == 0:
            continue
        if categorical[j]:
            values, counts = np.unique(col, return_counts=True)
            ref[j] = values[np.argmax(counts)]
        else:
            ref[j] = col.mean()
    return ref


def _evaluate(value_fn, rows):
    out = [np.asarray(value_fn(rows[s:s + EVAL_CHUNK]), dtype=np.float64).reshape(-1)
           for s in range(0, len(rows), EVAL_CHUNK)]
    return np.concatenate(out)


def _players(sample, features):
    features = list(range(len(sample))) if features is None else [int(f) for f in features]
    if len(set(features)) != len(features):
        raise ConfigError("feature index set has duplicates")
    return features


def shapley_exact(value_fn, sample, background, features=None, categorical=None, target_class=0):
    """
    Exact Shapley values over the coalitions of `features` (indices into sample).

    value_fn maps an (N, n) array of feature rows to N outputs. Features not in
    the index set keep their sample values throughout.
    """
    sample = np.asarray(sample, dtype=np.float64)
    players = _players(sample, features)
    m = len(players)
    if m > MAX_EXACT_FEATURES:
        raise ArityError(f"exact Shapley is limited to {MAX_EXACT_FEATURES} features, got {m}; use the mc method")
    ref = background_reference(background, categorical)

    codes = np.arange(2 ** m)
    members = ((codes[:, None] >> np.arange(m)[None, :]) & 1).astype(bool)
    rows = np.tile(sample, (len(codes), 1))
    for j, f in enumerate(players):
        rows[~members[:, j], f] = ref[f]
    v = _evaluate(value_fn, rows)

    sizes = members.sum(axis=1)
    weight = np.array([math.factorial(s) * math.factorial(m - s - 1) / math.factorial(m) for s in range(m)])
    phi = np.zeros(m)
    for j in range(m):
        without = codes[~members[:, j]]
        phi[j] = np.sum(weight[sizes[without]] * (v[without | (1 << j)] - v[without]))

    baseline, full = float(v[0]), float(v[-1])
    residual = float(phi.sum() - (full - baseline))
    return Attribution("ExactShapley", target_class, players, phi, baseline, full, residual)


def shapley_mc(value_fn, sample, background, features=None, categorical=None, target_class=0,
               permutations=1000, seed=0):
    """
    Permutation-sampling Shapley estimate. Permutation k is drawn from its own
    generator seeded with (seed, k), so results do not depend on evaluation order.
    """
    if permutations < 1:
        raise ConfigError("permutations must be >= 1")
    sample = np.asarray(sample, dtype=np.float64)
    players = _players(sample, features)
    m = len(players)
    ref = background_reference(background, categorical)
    start = sample.copy()
    start[players] = ref[players]

    orders = np.array([np.random.default_rng([seed, k]).permutation(m) for k in range(permutations)])
    rows = np.tile(start, (permutations, m + 1, 1))
    for k in range(permutations):
        for step, j in enumerate(orders[k], start=1):
            rows[k, step:, players[j]] = sample[players[j]]
    v = _evaluate(value_fn, rows.reshape(-1, len(sample))).reshape(permutations, m + 1)

    phi = np.zeros(m)
    gains = v[:, 1:] - v[:, :-1]
    for k in range(permutations):
        phi[orders[k]] += gains[k]
    phi /= permutations
    baseline, full = float(v[0, 0]), float(v[0, -1])
    residual = float(phi.sum() - (full - baseline))
    return Attribution("McShapley", target_class, players, phi, baseline, full, residual)


# ---------------------------------------------------------------------------
# Model adapters
# ---------------------------------------------------------------------------

class TabularValueFunction:
    """
    Target-class probability of a fused model as a function of one sample's
    tabular feature vector (numeric features then categorical codes). The
    sample's image input and modality mask stay fixed.
    """

    def __init__(self, model, dataset, index, target, mask=()):
        self.model = model
        self.target = int(target)
        self.batch = model.batch(dataset, [index], mask)
        self.n_numeric = model.layout.n_numeric
        self.names = list(model.layout.names[1:])
        self.valid = model.layout.validity(self.batch.presence)[0, 1:]

    def sample_vector(self):
        return np.concatenate([self.batch.x_num[0], self.batch.codes[0].astype(np.float64)])

    def categorical(self):
        flags = np.zeros(len(self.names), dtype=bool)
        flags[self.n_numeric:] = True
        return flags

    def background(self, dataset):
        """Background rows from a dataset; features of absent modalities are NaN."""
        rows = np.arange(len(dataset))
        presence = presence_matrix(dataset) & self.model.used_row[None, :]
        x_num, codes = self.model.layout.inputs(dataset, rows, presence)
        out = np.concatenate([x_num, codes.astype(np.float64)], axis=1)
        valid = self.model.layout.validity(presence)[:, 1:]
        out[~valid] = np.nan
        return out

    def __call__(self, rows):
        rows = np.atleast_2d(rows)
        n = len(rows)
        tiled = self.batch.take(np.zeros(n, dtype=np.int64))
        tiled = replace(tiled, x_num=rows[:, :self.n_numeric],
                        codes=np.rint(rows[:, self.n_numeric:]).astype(np.int64))
        return self.model.predict_batch(tiled)[:, self.target]


def explain_shapley(model, dataset, index, target, background, method='exact', features=None,
                    mask=(), permutations=2000, seed=0):
    """Shapley attribution of one sample's tabular features; masked-modality features get exactly 0."""
    fn = TabularValueFunction(model, dataset, index, target, mask)
    if features is None:
        players = list(range(len(fn.names)))
    else:
        unknown = [f for f in features if f not in fn.names]
        if unknown:
            raise SchemaError(f"unknown features {unknown}")
        players = [fn.names.index(f) for f in features]
    bg = fn.background(background)
    if method == 'exact':
        attr = shapley_exact(fn, fn.sample_vector(), bg, players, fn.categorical(), target)
    else:
        attr = shapley_mc(fn, fn.sample_vector(), bg, players, fn.categorical(), target, permutations, seed)
    for j, f in enumerate(players):
        if not fn.valid[f]:
            attr.values[j] = 0.0
    attr.features = [fn.names[f] for f in players]
    return attr


def grad_attribution(model, dataset, index, target, mask=()):
    """
    Gradient x input per fused token: the image query token first, then the
    tabular tokens (CLS first). Tokens of masked modalities score exactly 0.
    """
    batch = model.batch(dataset, [index], mask)
    tape = te.Tape()
    p = model.params.bind(tape)
    tokens = model.tokens(p, batch)
    query = model.image_query(p, batch)
    logits = model.logits_from(p, tokens, query, batch.presence)
    tape.backward(logits[0, int(target)])

    tok_scores = np.sum(tokens.grad * tokens.data, axis=-1)[0]
    tok_scores[~model.layout.validity(batch.presence)[0]] = 0.0
    img_score = float(np.sum(query.grad * query.data)) if batch.presence[0, GM] else 0.0
    names = ['[IMAGE]'] + list(model.layout.names)
    values = np.concatenate([[img_score], tok_scores])
    logit = float(logits.data[0, int(target)])
    return Attribution("GradInput", int(target), names, values, 0.0, logit)


def gradcam_volume(model, dataset, index, target):
    """
    Grad-CAM over the pooling grid of the trainable volume encoder: ReLU of
    gradient x activation per grid cell, normalised to a maximum of 1.
    """
    if model.image.mode != 'trainable':
        raise ConfigError("Grad-CAM needs a trainable volume encoder")
    batch = model.batch(dataset, [index])
    if not batch.presence[0, GM]:
        raise SchemaError("sample has no grey-matter volume to explain")
    tape = te.Tape()
    p = model.params.bind(tape)
    pooled = tape.leaf(batch.image)
    query = model.image_query(p, batch, image_input=pooled)
    logits = model.logits_from(p, model.tokens(p, batch), query, batch.presence)
    tape.backward(logits[0, int(target)])

    cam = np.maximum(pooled.grad[0] * pooled.data[0], 0.0)
    top = cam.max()
    if top > 0:
        cam = cam / top
    g = model.image.grid
    return cam.reshape(g, g, g)

