"""
Training and cross-validation.

Weighted focal loss with inverse-frequency class weights, Adam with decoupled
weight decay, early stopping on a patient-grouped validation split, and the
k-fold driver that fits all preprocessing inside each fold.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from config import CLASSES, MAX_WORKERS
from services import tensor_engine as te
from services.dataset_service import parse_modality_list, split_validation
from services.errors import ConfigError, NumericError
from services.fusion_service import DropoutPolicy, FusionModel, apply_dropout
from services.metrics_service import BINARY_TASKS, evaluate_probs, summarise
from services.preprocess_service import Preprocessor
from services.run_log import banner, get_logger

log = get_logger('TRAIN')
cv_log = get_logger('CV')

PROB_FLOOR = 1e-12
BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def class_weights(counts):
    """w_c = N / (K * n_c) from per-class counts (sequence or {class name: count})."""
    if isinstance(counts, dict):
        counts = [counts[name] for name in CLASSES]
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 1):
        raise ConfigError(f"class weights need every class represented, got counts {counts.tolist()}")
    return counts.sum() / (len(counts) * counts)


def focal_loss(probs, labels, weights, gamma, events=None):
    """
    Mean of -w_y * (1 - p_y)^gamma * log(p_y) over the batch.

    probs is a Tensor of shape (B, 3) or (3,). p_y below 1e-12 is clamped
    before the log; each clamp is logged and appended to events when given.
    """
    if gamma < 0:
        raise ConfigError("focal gamma must be >= 0")
    probs = probs if isinstance(probs, te.Tensor) else te.constant(probs)
    if probs.ndim == 1:
        probs = te.reshape(probs, (1, probs.shape[0]))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    rows = np.arange(len(labels))
    p_y = probs[rows, labels]
    low = p_y.data < PROB_FLOOR
    if low.any():
        msg = f"focal loss clamped {int(low.sum())} probabilities at {PROB_FLOOR}"
        log.warning(msg)
        if events is not None:
            events.append(msg)
        p_y = te.clip_min(p_y, PROB_FLOOR)
    w = np.asarray(weights, dtype=np.float64)[labels]
    loss = -(w * te.power(1.0 - p_y, gamma) * te.log(p_y))
    return te.mean(loss)


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, lr, weight_decay):
    """
    One bias-corrected Adam update with decoupled weight decay,
    w <- w - lr*wd*w applied before the Adam delta. Updates params and state in place.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    for name, g in grads.items():
        w = params[name]
        if weight_decay:
            w = w - lr * weight_decay * w
        m = BETA1 * state.m.get(name, 0.0) + (1.0 - BETA1) * g
        v = BETA2 * state.v.get(name, 0.0) + (1.0 - BETA2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - BETA1 ** t)
        v_hat = v / (1.0 - BETA2 ** t)
        params[name] = w - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return params, state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

class EarlyStopping:
    """Tracks the best validation loss; signals a stop after `patience` epochs without improvement."""

    def __init__(self, patience):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.best_params = None
        self.waited = 0

    def update(self, epoch, val_loss, params=None):
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_params = params.snapshot() if params is not None else None
            self.waited = 0
            return False
        self.waited += 1
        return self.waited >= self.patience


@dataclass
class TrainResult:
    history: list  # [{"epoch", "train_loss", "val_loss"}]
    best_epoch: int
    stopped_epoch: int
    clamp_events: list = field(default_factory=list)


def batch_loss(model, batch, weights, gamma, events=None):
    p = model.params.bind()
    probs = te.softmax(model.forward(p, batch))
    return focal_loss(probs, batch.labels, weights, gamma, events).item()


def train(model, split, cfg, seed):
    """
    Minibatch training of model on an already preprocessed split.

    A patient-grouped validation subset is carved out of split; the best
    validation-loss parameters are restored at the end.
    """
    fit, val = split_validation(split, cfg.val_fraction, seed)
    weights = class_weights(fit.class_counts())
    fit_batch = model.batch(fit)
    val_batch = model.batch(val)
    policy = DropoutPolicy.from_config(cfg.dropout)
    rng = np.random.default_rng([seed, 1])
    state = AdamState()
    stopper = EarlyStopping(cfg.patience)
    history, events = [], []
    stopped = cfg.max_epochs

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(fit_batch))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = fit_batch.take(order[start:start + cfg.batch_size])
            if cfg.modality_dropout:
                batch = batch.with_presence(apply_dropout(batch.presence, policy, rng))
            tape = te.Tape()
            p = model.params.bind(tape)
            loss = focal_loss(te.softmax(model.forward(p, batch)), batch.labels, weights,
                              cfg.focal_gamma, events)
            te.check_finite(loss, f"training loss at epoch {epoch}")
            tape.backward(loss)
            adam_step(model.params, {name: p[name].grad for name in model.params.names()},
                      state, cfg.lr, cfg.weight_decay)
            total += loss.item() * len(batch)

        train_loss = total / len(fit_batch)
        val_loss = batch_loss(model, val_batch, weights, cfg.focal_gamma)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        log.info(f"epoch {epoch}: train {train_loss:.5f} val {val_loss:.5f}")
        if stopper.update(epoch, val_loss, model.params):
            stopped = epoch
            log.info(f"early stop at epoch {epoch}; restoring epoch {stopper.best_epoch}")
            break

    if stopper.best_params is not None:
        model.params.restore(stopper.best_params)
    return TrainResult(history, stopper.best_epoch, stopped, events)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

def fold_seed(seed, fold):
    """Independent per-fold seed derived from (seed, fold)."""
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def mask_key(mask):
    return ",".join(m.value for m in mask)


def volume_shape_of(dataset, model_cfg):
    if model_cfg.image_mode != 'trainable':
        return None
    if not dataset.volumes:
        raise ConfigError("model.image_mode 'trainable' needs a dataset with volumes")
    return dataset.volumes[0].intensities.shape


def fit_model(train_ds, cfg, seed):
    """Fold-local preprocessing then training; returns (preprocessor, model, TrainResult)."""
    pre, train_t = Preprocessor.fit_transform(train_ds, cfg.selection)
    model = FusionModel(train_t.schema, cfg.model, seed, volume_shape_of(train_ds, cfg.model))
    result = train(model, train_t, cfg.train, seed)
    return pre, model, result


@dataclass
class FoldOutcome:
    fold: int
    scores: dict
    masked: dict
    selected: dict
    result: TrainResult
    n_train: int
    n_test: int
    test_patients: list
    warnings: list

    def to_dict(self):
        out = dict(self.scores)
        out.update({
            "fold": self.fold,
            "best_epoch": self.result.best_epoch,
            "stopped_epoch": self.result.stopped_epoch,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "test_patients": self.test_patients,
            "selected_features": self.selected,
            "clamp_events": len(self.result.clamp_events),
        })
        out["warnings"] = self.warnings + list(self.scores.get("warnings", []))
        return out


def run_fold(dataset, plan, fold, cfg, seed, eval_masks):
    test_mask = plan.test_index(dataset, fold)
    train_ds = dataset.subset(~test_mask)
    test_ds = dataset.subset(test_mask)
    fseed = fold_seed(seed, fold)
    cv_log.info(f"fold {fold}: {len(train_ds)} train / {len(test_ds)} test samples")

    pre, model, result = fit_model(train_ds, cfg, fseed)
    test_t = pre.transform(test_ds, use_labels=False)
    scores = evaluate_probs(model.predict(test_t), test_t.labels)
    masked = {mask_key(m): evaluate_probs(model.predict(test_t, m), test_t.labels) for m in eval_masks}
    cv_log.info(f"fold {fold}: accuracy {scores['accuracy']:.4f}, best epoch {result.best_epoch}")
    return FoldOutcome(fold, scores, masked, pre.selection.to_dict()["selected"], result,
                       len(train_ds), len(test_ds), plan.fold_patients(fold), pre.warnings)


def _aggregate_block(rows, sample_sd):
    block = {"aggregate": summarise(rows, sample_sd), "binary": {}}
    for pos, neg in BINARY_TASKS:
        key = f"{pos}_vs_{neg}"
        subs = [r["binary"][key] for r in rows if key in r["binary"]]
        if subs:
            block["binary"][key] = summarise(subs, sample_sd)
    return block


def run_cv(dataset, plan, cfg, seed, parallel=1, eval_masks=None):
    """
    k-fold cross-validation over a FoldPlan. Folds are independent and may run
    on a thread pool; the report does not depend on the number of workers.

    Returns (report dict, history rows [(fold, epoch, train_loss, val_loss)]).
    """
    if not plan.covers(dataset):
        raise ConfigError("fold plan does not cover every patient of the dataset")
    masks = [parse_modality_list(m) for m in (cfg.train.eval_masks if eval_masks is None else eval_masks)]
    workers = max(1, min(int(parallel), MAX_WORKERS, plan.k))
    banner(cv_log, f"{plan.k}-fold CV on {len(dataset)} samples, {workers} worker(s)")

    def job(fold):
        return run_fold(dataset, plan, fold, cfg, seed, masks)

    if workers == 1:
        outcomes = [job(f) for f in range(plan.k)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(job, range(plan.k)))
    outcomes.sort(key=lambda o: o.fold)

    per_fold = [o.to_dict() for o in outcomes]
    report = {
        "command": "cv",
        "config": cfg.to_dict(),
        "folds": plan.k,
        "per_fold": per_fold,
    }
    report.update(_aggregate_block(per_fold, cfg.train.sample_sd))
    report["masked_eval"] = {}
    for m in masks:
        key = mask_key(m)
        rows = [o.masked[key] for o in outcomes]
        report["masked_eval"][key] = {"per_fold": [{k: r[k] for k in ("accuracy", "recall", "f1")} for r in rows]}
        report["masked_eval"][key].update(_aggregate_block(rows, cfg.train.sample_sd))

    history = [(o.fold, h["epoch"], h["train_loss"], h["val_loss"]) for o in outcomes for h in o.result.history]
    agg = report["aggregate"]
    banner(cv_log, f"accuracy {agg['accuracy']['summary']}  recall {agg['recall']['summary']}  "
                   f"f1 {agg['f1']['summary']}")
    return report, history
