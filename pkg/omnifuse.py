"""
OmniFuse command line.

Generates synthetic cohorts, runs feature selection, radiomics extraction,
training, cross-validation, evaluation, prediction, attribution and the
modality ablation grid. Every artifact carries the config hash and seed; the
same (config, seed) pair reproduces it byte for byte.

Usage:
    python omnifuse.py synth --config c.json --seed 1 --out data/
    python omnifuse.py cv --config c.json --data data/ --seed 7 --out runs/cv/
    python omnifuse.py eval --model runs/train/ --data external/ --mask Genes,Meta --out runs/eval/
"""
import argparse
import copy
import json
import sys
from pathlib import Path

from dotenv import load_dotenv

# Load environment variables before any service reads them
load_dotenv()

import numpy as np  # noqa: E402

from config import CLASSES, load_config  # noqa: E402
from services import ledger_service, radiomics_service  # noqa: E402
from services.artifacts import write_csv, write_json  # noqa: E402
from services.checkpoint_service import load_model, save_model  # noqa: E402
from services.dataset_service import (DatasetSchema, conform_schema, group_kfold, label_index,  # noqa: E402
                                      load_dataset, parse_modality_list)
from services.errors import OmniFuseError, SchemaError, UsageError  # noqa: E402
from services.explain_service import explain_shapley, gradcam_volume, grad_attribution  # noqa: E402
from services.metrics_service import evaluate_probs  # noqa: E402
from services.preprocess_service import (Preprocessor, apply_imputer, apply_scaler, fit_imputer,  # noqa: E402
                                         fit_scaler)
from services.run_log import banner, get_logger  # noqa: E402
from services.selection_service import fit_selection  # noqa: E402
from services.synth_service import write_synthetic  # noqa: E402
from services.training_service import fit_model, mask_key, run_cv  # noqa: E402
from services.volume_io import read_mask, read_volume  # noqa: E402

log = get_logger('OMNIFUSE')

PREPROCESS_NAME = 'preprocess.json'

# In-domain ablation grid, smallest subsets first.
DEFAULT_GRID = (
    ("Radiomics",),
    ("GmEmbedding",),
    ("Radiomics", "Genes"),
    ("Radiomics", "GmEmbedding"),
    ("Radiomics", "Genes", "Meta"),
    ("Radiomics", "GmEmbedding", "Genes"),
    ("Radiomics", "GmEmbedding", "Genes", "Meta"),
)
MISSING_MASK = ("Genes", "Meta")


class OmniFuseParser(argparse.ArgumentParser):
    """argparse reports usage problems as UsageError so they share the error line format."""

    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def effective_config(args):
    """Load the run config and fold the command-line overrides into it."""
    cfg = load_config(args.config)
    if getattr(args, 'k', None) is not None:
        cfg.selection.k = args.k
    if getattr(args, 'folds', None) is not None:
        cfg.train.folds = args.folds
    return cfg.validate()


def history_rows(history):
    return [[h["epoch"], h["train_loss"], h["val_loss"]] for h in history]


def load_trained(model_dir):
    """(model, preprocessor, preprocess document) from a train output directory."""
    model = load_model(model_dir)
    path = Path(model_dir) / PREPROCESS_NAME
    if not path.exists():
        raise SchemaError(f"no {PREPROCESS_NAME} in {model_dir}")
    doc = json.loads(path.read_text(encoding='utf-8'))
    return model, Preprocessor.from_dict(doc), doc


def prepare_external(model, pre, doc, data_dir):
    """Load a dataset, conform it to the training schema and run the fitted preprocessing."""
    dataset = load_dataset(data_dir)
    dataset = conform_schema(dataset, DatasetSchema.from_dict(doc["data_schema"]))
    transformed = pre.transform(dataset, use_labels=False)
    if transformed.schema.schema_hash() != model.schema.schema_hash():
        raise SchemaError("preprocessed data does not match the model's input schema")
    return transformed


def find_sample(dataset, key):
    """Row index from 'patient/visit' or a plain integer."""
    if key.isdigit():
        index = int(key)
        if index >= len(dataset):
            raise UsageError(f"sample index {index} out of range ({len(dataset)} samples)")
        return index
    pid, _, vid = key.partition('/')
    for i, (p, v) in enumerate(zip(dataset.patient_ids, dataset.visit_ids)):
        if p == pid and (not vid or v == vid):
            return i
    raise UsageError(f"no sample '{key}' in the dataset")


def parse_grid(text):
    if not text:
        return [list(s) for s in DEFAULT_GRID]
    return [[m.value for m in parse_modality_list(part)] for part in text.split(';') if part.strip()]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    cfg = effective_config(args)
    h = cfg.config_hash()
    _, manifest = write_synthetic(cfg.synth, args.seed, args.out, h)
    write_json(Path(args.out) / 'config.json', {"config": cfg.to_dict()}, h, args.seed)
    log.info(f"Synthetic cohort: {manifest['class_counts']}")
    return 0


def cmd_select(args):
    cfg = effective_config(args)
    dataset = load_dataset(args.data)
    imputed = apply_imputer(fit_imputer(dataset), dataset, use_labels=True)
    scaled = apply_scaler(fit_scaler(imputed), imputed)
    selection = fit_selection(scaled, cfg.selection)
    report = selection.report(cfg.selection)
    report.update({"command": "select", "n_samples": len(dataset), "selected": selection.selected})
    write_json(Path(args.out) / 'selection_report.json', report, cfg.config_hash(), args.seed)
    return 0


def cmd_radiomics(args):
    cfg = effective_config(args)
    volume = read_volume(args.volume)
    mask = read_mask(args.mask)
    mask.check_matches(volume)
    regions = [int(r) for r in args.regions.split(',')] if args.regions else None
    rows = radiomics_service.extract(volume, mask, regions, args.bins, args.alpha, args.workers)
    write_csv(Path(args.out) / 'radiomics.csv', ['region', 'feature', 'value'], rows,
              cfg.config_hash(), args.seed)
    return 0


def cmd_train(args):
    cfg = effective_config(args)
    h = cfg.config_hash()
    dataset = load_dataset(args.data)
    banner(log, f"Training on all {len(dataset)} samples")
    pre, model, result = fit_model(dataset, cfg, args.seed)
    out = Path(args.out)
    save_model(model, out, h, args.seed)

    doc = pre.to_dict()
    doc["data_schema"] = dataset.schema.to_dict()
    write_json(out / PREPROCESS_NAME, doc, h, args.seed)
    write_csv(out / 'history.csv', ['epoch', 'train_loss', 'val_loss'], history_rows(result.history), h, args.seed)

    train_t = pre.transform(dataset, use_labels=False)
    report = evaluate_probs(model.predict(train_t), train_t.labels)
    report.update({
        "command": "train",
        "config": cfg.to_dict(),
        "n_samples": len(dataset),
        "best_epoch": result.best_epoch,
        "stopped_epoch": result.stopped_epoch,
        "clamp_events": len(result.clamp_events),
        "selected_features": pre.selection.selected,
    })
    report["warnings"] = pre.warnings + report["warnings"]
    write_json(out / 'train_report.json', report, h, args.seed)
    ledger_service.record_run("train", dict(report, config_hash=h, seed=args.seed), args.data, out)
    return 0


def cmd_cv(args):
    cfg = effective_config(args)
    if args.mask:
        cfg.train.eval_masks = cfg.train.eval_masks + [[m.value for m in parse_modality_list(args.mask)]]
        cfg.validate()
    h = cfg.config_hash()
    dataset = load_dataset(args.data)
    plan = group_kfold(dataset, cfg.train.folds, args.seed, cfg.train.stratified_folds)
    report, history = run_cv(dataset, plan, cfg, args.seed, args.parallel_folds)
    out = Path(args.out)
    write_json(out / 'cv_report.json', report, h, args.seed)
    write_csv(out / 'history.csv', ['fold', 'epoch', 'train_loss', 'val_loss'], history, h, args.seed)
    ledger_service.record_run("cv", dict(report, config_hash=h, seed=args.seed), args.data, out)
    return 0


def cmd_eval(args):
    model, pre, doc = load_trained(args.model)
    data = prepare_external(model, pre, doc, args.data)
    if not data.labeled:
        raise SchemaError("eval needs a label for every sample")
    mask = parse_modality_list(args.mask)
    report = evaluate_probs(model.predict(data, mask), data.labels)
    report.update({
        "command": "eval",
        "mask": mask_key(mask),
        "n_samples": len(data),
        "model_config_hash": doc.get("config_hash"),
    })
    h = doc.get("config_hash", "")
    write_json(Path(args.out) / 'eval_report.json', report, h, args.seed)
    ledger_service.record_run("eval", dict(report, config_hash=h, seed=args.seed), args.data, args.out)
    return 0


def cmd_predict(args):
    model, pre, doc = load_trained(args.model)
    data = prepare_external(model, pre, doc, args.data)
    probs = model.predict(data, parse_modality_list(args.mask))
    rows = [[str(p), str(v)] + [float(x) for x in row] + [CLASSES[int(np.argmax(row))]]
            for p, v, row in zip(data.patient_ids, data.visit_ids, probs)]
    header = ['patient_id', 'visit_id'] + [f"p_{c}" for c in CLASSES] + ['predicted']
    write_csv(Path(args.out) / 'predictions.csv', header, rows, doc.get("config_hash", ""), args.seed)
    return 0


def cmd_explain(args):
    model, pre, doc = load_trained(args.model)
    data = prepare_external(model, pre, doc, args.data)
    index = find_sample(data, args.sample)
    mask = parse_modality_list(args.mask)
    if args.target:
        target = label_index(args.target)
    else:
        target = int(np.argmax(model.predict(data.subset([index]), mask)[0]))

    if args.method == 'grad':
        attr = grad_attribution(model, data, index, target, mask)
    else:
        features = [f for f in args.features.split(',') if f] if args.features else None
        method = 'exact' if args.method == 'exact' else 'mc'
        attr = explain_shapley(model, data, index, target, data, method, features, mask,
                               args.permutations, args.seed)
    report = attr.to_dict()
    report.update({"command": "explain", "sample": f"{data.patient_ids[index]}/{data.visit_ids[index]}",
                   "mask": mask_key(mask)})
    if model.image.mode == 'trainable' and not mask:
        try:
            report["gradcam"] = gradcam_volume(model, data, index, target).tolist()
        except OmniFuseError as e:
            log.info(f"Grad-CAM skipped: {e}")
    write_json(Path(args.out) / 'attributions.json', report, doc.get("config_hash", ""), args.seed)
    return 0


def cmd_ablate(args):
    cfg = effective_config(args)
    h = cfg.config_hash()
    dataset = load_dataset(args.data)
    plan = group_kfold(dataset, cfg.train.folds, args.seed, cfg.train.stratified_folds)
    grid = parse_grid(args.grid)
    runs = [(subset, True) for subset in grid]
    if args.control:
        runs.append((list(grid[-1]), False))

    rows, subsets = [], {}
    for subset, dropout in runs:
        sub_cfg = copy.deepcopy(cfg)
        sub_cfg.model.modalities = list(subset)
        sub_cfg.selection.modalities = [m for m in cfg.selection.modalities if m in subset]
        sub_cfg.train.modality_dropout = dropout and cfg.train.modality_dropout
        masked = [m for m in MISSING_MASK if m in subset]
        sub_cfg.train.eval_masks = [list(MISSING_MASK)] if masked else []
        sub_cfg.validate()
        name = "+".join(subset) + ("" if dropout else " (no dropout)")
        banner(log, f"Ablation subset {name}")
        report, _ = run_cv(dataset, plan, sub_cfg, args.seed, args.parallel_folds)
        subsets[name] = {"aggregate": report["aggregate"], "binary": report["binary"],
                         "masked_eval": {k: {"aggregate": v["aggregate"]} for k, v in report["masked_eval"].items()}}
        base = {"subset": list(subset), "modality_dropout": sub_cfg.train.modality_dropout}
        rows.append(dict(base, inference_mask=None, **{k: v for k, v in report["aggregate"].items()}))
        for key, block in report["masked_eval"].items():
            rows.append(dict(base, inference_mask=key, **{k: v for k, v in block["aggregate"].items()}))

    full = "+".join(grid[-1])
    result = {
        "command": "ablate",
        "config": cfg.to_dict(),
        "folds": plan.k,
        "rows": rows,
        "subsets": subsets,
        "aggregate": subsets[full]["aggregate"],
    }
    out = Path(args.out)
    write_json(out / 'ablation_report.json', result, h, args.seed)
    ledger_service.record_run("ablate", dict(result, config_hash=h, seed=args.seed), args.data, out)
    return 0


def cmd_runs(args):
    for row in ledger_service.recent_runs(args.limit):
        print(json.dumps(row, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = OmniFuseParser(prog='omnifuse', description="Multimodal CTL/MCI/AD classifier toolkit")
    sub = parser.add_subparsers(dest='command', parser_class=OmniFuseParser)

    def command(name, func, help_text, data=True, out=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument('--config', default=None, help="run config JSON (defaults when omitted)")
        p.add_argument('--seed', type=int, default=0)
        if data:
            p.add_argument('--data', required=True, help="dataset directory")
        if out:
            p.add_argument('--out', required=True, help="output directory")
        p.set_defaults(func=func)
        return p

    command('synth', cmd_synth, "generate a planted-signal cohort", data=False)

    p = command('select', cmd_select, "ANOVA feature ranking on a whole dataset")
    p.add_argument('--k', type=int, default=None)

    p = command('radiomics', cmd_radiomics, "radiomics features for each region of a label map", data=False)
    p.add_argument('--volume', required=True)
    p.add_argument('--mask', required=True)
    p.add_argument('--regions', default=None, help="comma-separated region labels (default: all)")
    p.add_argument('--bins', type=int, default=radiomics_service.DEFAULT_BINS)
    p.add_argument('--alpha', type=int, default=0)
    p.add_argument('--workers', type=int, default=1)

    p = command('train', cmd_train, "fit preprocessing and model on all samples")
    p.add_argument('--k', type=int, default=None)

    p = command('cv', cmd_cv, "patient-grouped k-fold cross-validation")
    p.add_argument('--k', type=int, default=None)
    p.add_argument('--folds', type=int, default=None)
    p.add_argument('--parallel-folds', type=int, default=1)
    p.add_argument('--mask', default=None, help="extra inference mask to evaluate, e.g. Genes,Meta")

    for name, func, help_text in (('eval', cmd_eval, "score a trained model on a labeled dataset"),
                                  ('predict', cmd_predict, "class probabilities for every sample")):
        p = command(name, func, help_text)
        p.add_argument('--model', required=True, help="train output directory")
        p.add_argument('--mask', default=None)

    p = command('explain', cmd_explain, "attribute one prediction")
    p.add_argument('--model', required=True)
    p.add_argument('--sample', required=True, help="'patient/visit' or row index")
    p.add_argument('--method', choices=('exact', 'mc', 'grad'), default='exact')
    p.add_argument('--features', default=None, help="comma-separated token names, e.g. Genes:g0003")
    p.add_argument('--target', default=None, help="class name (default: predicted class)")
    p.add_argument('--permutations', type=int, default=2000)
    p.add_argument('--mask', default=None)

    p = command('ablate', cmd_ablate, "cross-validate every modality subset of a grid")
    p.add_argument('--k', type=int, default=None)
    p.add_argument('--folds', type=int, default=None)
    p.add_argument('--parallel-folds', type=int, default=1)
    p.add_argument('--grid', default=None, help="subsets separated by ';', e.g. 'Radiomics;Radiomics,Genes'")
    p.add_argument('--control', action='store_true', help="add a full-modality run without modality dropout")

    p = sub.add_parser('runs', help="list recent ledger rows")
    p.add_argument('--limit', type=int, default=20)
    p.set_defaults(func=cmd_runs)
    return parser


def main(argv=None):
    """Run one subcommand; returns 0, or 1/2/3 for usage, data and numeric errors."""
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, 'func', None):
            raise UsageError("a subcommand is required")
        return args.func(args)
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    except OmniFuseError as e:
        msg = str(e).replace('\n', ' ')
        print(f"error code={e.exit_code} type={type(e).__name__} msg={msg}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error code=2 type={type(e).__name__} msg={e}", file=sys.stderr)
        return 2


if __name__ == '__main__':
    sys.exit(main())
