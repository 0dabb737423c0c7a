"""
Radiomics features from a volume restricted to one region of a label map.

Fixed-bin-count discretization, first-order statistics (energy, entropy, mean
absolute deviation, mean, variance), GLCM cluster prominence averaged over the
13 unique 3-D directions, and GLDM gray-level variance on 26-connectivity.
"""
import itertools
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from services.errors import ConfigError, FeatureUndefined, RegionEmpty, SchemaError
from services.run_log import get_logger

log = get_logger('RADIOMICS')

DEFAULT_BINS = 32
ENTROPY_EPS = 2.2e-16

# The 13 unique unit offsets in 3-D: the first non-zero component is positive.
OFFSETS = tuple(o for o in itertools.product((-1, 0, 1), repeat=3)
                if any(o) and next(c for c in o if c) > 0)
NEIGHBOURS = tuple(o for o in itertools.product((-1, 0, 1), repeat=3) if any(o))

FEATURE_NAMES = ("energy", "entropy", "mean_absolute_deviation", "mean", "variance",
                 "glcm_cluster_prominence", "gldm_gray_level_variance")


def _region(volume, mask, region_label):
    data = volume.intensities if hasattr(volume, 'intensities') else np.asarray(volume, dtype=np.float64)
    labels = mask.labels if hasattr(mask, 'labels') else np.asarray(mask)
    if labels.shape != data.shape:
        raise SchemaError(f"mask dims {labels.shape} do not match volume dims {data.shape}")
    inside = labels == region_label
    if not inside.any():
        raise RegionEmpty(f"region {region_label} has no voxels")
    return data, inside


def discretize(volume, mask, region_label, bin_count=DEFAULT_BINS):
    """
    Gray-level grid with levels 1..G inside the region and 0 outside.
    level = floor((v - min) / (max - min) * G) + 1, clamped to G.
    """
    if bin_count < 1:
        raise ConfigError("bin_count must be >= 1")
    data, inside = _region(volume, mask, region_label)
    values = data[inside]
    lo, hi = values.min(), values.max()
    grid = np.zeros(data.shape, dtype=np.int64)
    if hi == lo:
        grid[inside] = 1
        return grid
    levels = np.floor((values - lo) / (hi - lo) * bin_count).astype(np.int64) + 1
    grid[inside] = np.minimum(levels, bin_count)
    return grid


def first_order(volume, mask, region_label, bin_count=DEFAULT_BINS):
    data, inside = _region(volume, mask, region_label)
    values = data[inside].astype(np.float64)
    levels = discretize(volume, mask, region_label, bin_count)[inside]
    hist = np.bincount(levels, minlength=bin_count + 1)[1:].astype(np.float64)
    p = hist / hist.sum()
    p = p[p > 0]
    mean = values.mean()
    return {
        "energy": float(np.sum(values * values)),
        # empty bins contribute nothing; an occupied bin with p = 1 gives exactly 0
        "entropy": float(-np.sum(p * np.log2(np.where(p < 1.0, p + ENTROPY_EPS, 1.0)))),
        "mean_absolute_deviation": float(np.mean(np.abs(values - mean))),
        "mean": float(mean),
        "variance": float(np.mean((values - mean) ** 2)),
    }


def _shifted(grid, offset):
    """Pairs (a, b) of equal-shaped views with b the voxel at a + offset."""
    src, dst = [], []
    for axis, step in enumerate(offset):
        n = grid.shape[axis]
        if step >= 0:
            src.append(slice(0, n - step))
            dst.append(slice(step, n))
        else:
            src.append(slice(-step, n))
            dst.append(slice(0, n + step))
    return grid[tuple(src)], grid[tuple(dst)]


def glcm_counts(grid, offset, levels):
    """Raw (non-symmetrised) co-occurrence counts for one offset over in-region pairs."""
    a, b = _shifted(grid, offset)
    both = (a > 0) & (b > 0)
    counts = np.zeros((levels, levels), dtype=np.int64)
    np.add.at(counts, (a[both] - 1, b[both] - 1), 1)
    return counts


def glcm(grid, offset, levels=None, symmetric=True):
    """Normalised co-occurrence matrix for one offset, or None when it has no pairs."""
    levels = int(grid.max()) if levels is None else levels
    counts = glcm_counts(grid, offset, levels)
    if symmetric:
        counts = counts + counts.T
    total = counts.sum()
    if total == 0:
        return None
    return counts / total


def cluster_prominence(p):
    g = p.shape[0]
    i = np.arange(1, g + 1, dtype=np.float64)[:, None]
    j = np.arange(1, g + 1, dtype=np.float64)[None, :]
    mu_i = np.sum(i * p)
    mu_j = np.sum(j * p)
    return float(np.sum((i + j - mu_i - mu_j) ** 4 * p))


def glcm_features(grid, offsets=OFFSETS, symmetric=True, levels=None):
    """Cluster prominence per offset, averaged over offsets that have pairs."""
    grid = np.asarray(grid)
    if np.count_nonzero(grid) < 2:
        raise FeatureUndefined("GLCM needs at least 2 in-region voxels")
    levels = int(grid.max()) if levels is None else levels
    values = []
    for offset in offsets:
        p = glcm(grid, offset, levels, symmetric)
        if p is not None:
            values.append(cluster_prominence(p))
    if not values:
        raise FeatureUndefined("no in-region voxel pair along any offset")
    return {"cluster_prominence": float(np.mean(values))}


def dependence_matrix(grid, alpha=0):
    """D[g-1, k]: voxels of level g with k in-region 26-neighbours within |dlevel| <= alpha."""
    grid = np.asarray(grid)
    if not np.any(grid > 0):
        raise RegionEmpty("dependence matrix of an empty region")
    levels = int(grid.max())
    padded = np.pad(grid, 1)
    core = tuple(slice(1, n + 1) for n in grid.shape)
    dep = np.zeros(grid.shape, dtype=np.int64)
    for offset in NEIGHBOURS:
        shifted = padded[tuple(slice(1 + o, n + 1 + o) for o, n in zip(offset, grid.shape))]
        dep += (shifted > 0) & (np.abs(shifted - padded[core]) <= alpha)
    inside = grid > 0
    D = np.zeros((levels, len(NEIGHBOURS) + 1), dtype=np.int64)
    np.add.at(D, (grid[inside] - 1, dep[inside]), 1)
    return D


def gldm_gray_level_variance(grid, alpha=0):
    D = dependence_matrix(grid, alpha).astype(np.float64)
    p = D / D.sum()
    g = np.arange(1, p.shape[0] + 1, dtype=np.float64)[:, None]
    mu = np.sum(g * p)
    return float(np.sum(p * (g - mu) ** 2))


def extract_region(volume, mask, region_label, bin_count=DEFAULT_BINS, alpha=0):
    """All features for one region, as {feature name: value}."""
    out = first_order(volume, mask, region_label, bin_count)
    grid = discretize(volume, mask, region_label, bin_count)
    out["glcm_cluster_prominence"] = glcm_features(grid, levels=bin_count)["cluster_prominence"]
    out["gldm_gray_level_variance"] = gldm_gray_level_variance(grid, alpha)
    return out


def extract(volume, mask, regions=None, bin_count=DEFAULT_BINS, alpha=0, workers=1):
    """
    Rows (region, feature, value) for the listed regions (default: every
    non-zero label), in region order then FEATURE_NAMES order.
    """
    if regions is None:
        labels = mask.labels if hasattr(mask, 'labels') else np.asarray(mask)
        regions = [int(r) for r in np.unique(labels) if r != 0]
    regions = list(regions)

    def one(region):
        return region, extract_region(volume, mask, region, bin_count, alpha)

    if workers > 1 and len(regions) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, regions))
    else:
        results = [one(r) for r in regions]
    rows = []
    for region, feats in results:
        rows += [(region, name, feats[name]) for name in FEATURE_NAMES]
    log.info(f"Extracted {len(FEATURE_NAMES)} features from {len(regions)} region(s)")
    return rows
