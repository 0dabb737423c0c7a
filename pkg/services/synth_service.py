"""
Synthetic multimodal cohort generator.

Stands in for the access-restricted clinical cohorts. Every class gets a
prototype in a shared latent space; each modality sees that prototype on its
informative dimensions through its own noise, so modalities are redundant
views of one signal and combining them raises the effective SNR.
"""
import numpy as np

from config import CLASSES, SynthConfig
from services.dataset_service import (MODALITIES, Dataset, DatasetSchema, ModalityKind,
                                      save_dataset, save_region_mask)
from services.run_log import get_logger
from services.volume_io import RegionMask, Volume3D

log = get_logger('SYNTH')

META_NUMERIC_NAMES = ("age", "mmse")
META_CATEGORICAL = {"sex": ["F", "M"], "apoe4": ["0", "1", "2"]}

# P(apoe4 allele count) per class, CTL / MCI / AD
APOE4_PROBS = np.array([
    [0.70, 0.25, 0.05],
    [0.50, 0.40, 0.10],
    [0.35, 0.45, 0.20],
])

# Realistic location/scale for the named metadata columns; mmse falls with disease.
_META_AFFINE = {"age": (72.0, 7.0), "mmse": (26.0, -2.5)}


def _feature_names(cfg):
    meta = list(META_NUMERIC_NAMES[:cfg.meta_numeric_dim])
    meta += [f"clin_{i:02d}" for i in range(len(meta), cfg.meta_numeric_dim)]
    gm_dim = 0 if cfg.image_mode == "volume" else cfg.gm_dim
    return {
        ModalityKind.RADIOMICS: [f"region{i // 4:02d}_{('energy', 'entropy', 'mad', 'glcm_prominence')[i % 4]}"
                                 for i in range(cfg.radiomics_dim)],
        ModalityKind.GM: [f"e{i}" for i in range(gm_dim)],
        ModalityKind.GENES: [f"GENE{i:04d}" for i in range(cfg.genes_dim)],
        ModalityKind.META: meta,
    }


def _prototypes(rng, k, snr):
    """Three class means at the corners of an equilateral triangle with side snr."""
    protos = np.zeros((len(CLASSES), k))
    if k == 0:
        return protos
    if k == 1:
        protos[:, 0] = np.array([-1.0, 0.0, 1.0]) * snr
        return protos
    basis, _ = np.linalg.qr(rng.standard_normal((k, 2)))
    radius = snr / np.sqrt(3.0)
    for c, angle in enumerate((90.0, 210.0, 330.0)):
        theta = np.deg2rad(angle)
        protos[c] = radius * (np.cos(theta) * basis[:, 0] + np.sin(theta) * basis[:, 1])
    return protos


def _exact_missing(rng, n_patients, fraction):
    """Exactly round(fraction * n) patients flagged, chosen without replacement."""
    flags = np.zeros(n_patients, dtype=bool)
    n_missing = int(round(fraction * n_patients))
    flags[rng.permutation(n_patients)[:n_missing]] = True
    return flags


def synth_generate(cfg, seed):
    """
    Build a Dataset from a SynthConfig, deterministically for a given seed.

    Returns (dataset, truth) where truth maps modality name to the informative
    feature names, for oracle checks.
    """
    if not isinstance(cfg, SynthConfig):
        cfg = SynthConfig(**cfg)
    cfg.validate()
    rng = np.random.default_rng(seed)
    names = _feature_names(cfg)
    dims = {k: len(v) for k, v in names.items()}
    if cfg.image_mode == "volume":
        dims[ModalityKind.GM] = cfg.pool_grid ** 3

    latent_k = max(cfg.informative.values()) if cfg.informative else 0
    protos = _prototypes(rng, latent_k, cfg.snr)

    # Each modality embeds the first `informative` latent dims on randomly chosen columns.
    informative_cols = {}
    for kind in MODALITIES:
        n_inf = int(cfg.informative.get(kind.value, 0))
        informative_cols[kind] = np.sort(rng.permutation(dims[kind])[:n_inf])
    shift = {}
    for kind in MODALITIES:
        direction = rng.standard_normal(dims[kind])
        norm = np.linalg.norm(direction)
        shift[kind] = cfg.domain_shift * direction / norm if norm > 0 else np.zeros(dims[kind])

    patient_labels = []
    for c, name in enumerate(CLASSES):
        patient_labels += [c] * cfg.class_counts[name]
    patient_labels = np.array(patient_labels, dtype=np.int64)
    n_patients = len(patient_labels)
    no_genes = _exact_missing(rng, n_patients, cfg.missing_genes)
    no_meta = _exact_missing(rng, n_patients, cfg.missing_meta)

    pids, vids, labels = [], [], []
    numeric = {k: [] for k in MODALITIES}
    present = {k: [] for k in MODALITIES}
    codes = []
    volumes = [] if cfg.image_mode == "volume" else None

    for p in range(n_patients):
        c = int(patient_labels[p])
        effects = {k: rng.normal(0.0, cfg.patient_effect, dims[k]) for k in MODALITIES}
        sex = int(rng.integers(0, 2))
        apoe = int(rng.choice(3, p=APOE4_PROBS[c]))
        n_visits = int(rng.integers(cfg.visits_min, cfg.visits_max + 1))
        for v in range(n_visits):
            pids.append(f"P{p:05d}")
            vids.append(f"V{v}")
            labels.append(c)
            for kind in MODALITIES:
                x = rng.standard_normal(dims[kind]) + effects[kind] + shift[kind]
                cols = informative_cols[kind]
                x[cols] += protos[c, :len(cols)]
                numeric[kind].append(x)
            present[ModalityKind.RADIOMICS].append(True)
            present[ModalityKind.GM].append(True)
            present[ModalityKind.GENES].append(not no_genes[p])
            present[ModalityKind.META].append(not no_meta[p])
            codes.append([sex, apoe])

    n = len(pids)
    numeric = {k: np.array(v).reshape(n, dims[k]) for k, v in numeric.items()}
    present = {k: np.array(v, dtype=bool) for k, v in present.items()}
    codes = np.array(codes, dtype=np.int64).reshape(n, len(META_CATEGORICAL))

    # Named metadata columns get clinical-looking units.
    for j, name in enumerate(names[ModalityKind.META]):
        loc, scale = _META_AFFINE.get(name, (0.0, 1.0))
        numeric[ModalityKind.META][:, j] = loc + scale * numeric[ModalityKind.META][:, j]

    if cfg.image_mode == "volume":
        volumes = [_render_volume(rng, numeric[ModalityKind.GM][i], cfg) for i in range(n)]
        numeric[ModalityKind.GM] = np.zeros((n, 0))

    if cfg.missing_entry_rate > 0:
        for kind in (ModalityKind.RADIOMICS, ModalityKind.GENES, ModalityKind.META):
            holes = rng.random(numeric[kind].shape) < cfg.missing_entry_rate
            numeric[kind][holes] = np.nan
        holes = rng.random(codes.shape) < cfg.missing_entry_rate
        codes[holes] = -1

    # Absent modalities carry no values at all.
    for kind in MODALITIES:
        if numeric[kind].shape[1]:
            numeric[kind][~present[kind]] = np.nan
    codes[~present[ModalityKind.META]] = -1

    schema = DatasetSchema(
        {k: names[k] for k in MODALITIES},
        list(META_CATEGORICAL),
        {k: list(v) for k, v in META_CATEGORICAL.items()},
    )
    dataset = Dataset(schema, pids, vids, labels, numeric, codes, present, volumes)
    truth = {}
    for kind in MODALITIES:
        if kind == ModalityKind.GM and cfg.image_mode == "volume":
            truth[kind.value] = [f"cell{i}" for i in informative_cols[kind]]
        else:
            truth[kind.value] = [names[kind][i] for i in informative_cols[kind]]
    log.info(f"Generated {n} samples from {n_patients} patients "
             f"(genes missing for {int(no_genes.sum())}, meta missing for {int(no_meta.sum())})")
    return dataset, truth


def _render_volume(rng, cells, cfg):
    """Piecewise-constant volume over a pool_grid^3 partition plus voxel noise."""
    g = cfg.pool_grid
    edge = cfg.volume_dim // g
    grid = np.asarray(cells).reshape(g, g, g)
    vol = np.kron(grid, np.ones((edge, edge, edge)))
    vol = 1.0 + vol + rng.normal(0.0, 0.1, vol.shape)
    return Volume3D(vol.astype(np.float32).astype(np.float64))


def region_mask_for(cfg):
    """Two-region label map splitting the volume along x; used by the radiomics command."""
    labels = np.zeros((cfg.volume_dim,) * 3, dtype=np.uint16)
    half = cfg.volume_dim // 2
    labels[:half] = 1
    labels[half:] = 2
    return RegionMask(labels)


def write_synthetic(cfg, seed, out_dir, config_hash=None):
    dataset, truth = synth_generate(cfg, seed)
    extra = {"seed": seed, "synth_truth": truth}
    if config_hash:
        extra["config_hash"] = config_hash
    manifest = save_dataset(dataset, out_dir, extra)
    if cfg.image_mode == "volume":
        save_region_mask(out_dir, region_mask_for(cfg))
    return dataset, manifest
