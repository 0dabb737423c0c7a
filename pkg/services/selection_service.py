"""
Statistical feature selection.

ANOVA F-test per feature with p-values from the F distribution (computed through
the regularized incomplete beta function), p-value gating, then a weighted mix
of min-max normalised F-scores and -log p-values to rank the survivors.
Always fitted on the training split of the current fold.
"""
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from config import CLASSES
from services.dataset_service import ModalityKind
from services.errors import DomainError, NumericError
from services.run_log import get_logger

log = get_logger('SELECT')

_EPS = 1e-16
_FPMIN = 1e-300
_MAXIT = 10000


@dataclass(frozen=True)
class FeatureScore:
    feature_name: str
    f_score: float
    p_value: float
    combined: Optional[float] = None
    modality: str = ""

    def to_dict(self, selected=False):
        return {
            "modality": self.modality,
            "f": _json_float(self.f_score),
            "p": self.p_value,
            "combined": self.combined,
            "selected": selected,
        }


def _json_float(value):
    return "inf" if math.isinf(value) else value


def _betacf(a, b, x):
    """Continued fraction for I_x(a, b), modified Lentz."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise NumericError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(a, b, x):
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not (a > 0 and b > 0) or not (0.0 <= x <= 1.0):
        raise DomainError(f"incomplete beta out of domain: a={a}, b={b}, x={x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_survival(f, df_between, df_within):
    """P(F > f) for F ~ F(df_between, df_within)."""
    if math.isinf(f):
        return 0.0
    if f <= 0.0:
        return 1.0
    x = df_within / (df_within + df_between * f)
    return regularized_incomplete_beta(df_within / 2.0, df_between / 2.0, x)


def anova_f(groups):
    """
    One-way ANOVA over per-class value groups.

    Returns (F, p). Zero within-group variance gives (inf, 0) unless the
    between-group variance is zero too, which gives (0, 1).
    """
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    g = len(groups)
    if g < 2 or any(len(x) == 0 for x in groups):
        raise DomainError("anova_f needs at least two non-empty groups")
    n = sum(len(x) for x in groups)
    if n < g + 1:
        raise DomainError(f"anova_f needs n >= groups + 1, got n={n}, groups={g}")

    grand = np.concatenate(groups).mean()
    means = [x.mean() for x in groups]
    ssb = float(sum(len(x) * (m - grand) ** 2 for x, m in zip(groups, means)))
    ssw = float(sum(((x - m) ** 2).sum() for x, m in zip(groups, means)))
    df_b, df_w = g - 1, n - g

    scale = max(float(np.abs(np.concatenate(groups)).max()), 1e-300)
    tiny = n * (16.0 * np.finfo(np.float64).eps * scale) ** 2
    if ssw <= tiny:
        if ssb <= tiny:
            return 0.0, 1.0
        return math.inf, 0.0
    f = (ssb / df_b) / (ssw / df_w)
    return f, f_survival(f, df_b, df_w)


def score_features(train, modalities):
    """ANOVA F / p for every numeric feature of the given modalities, over present rows."""
    scores = []
    for kind in modalities:
        kind = ModalityKind(kind)
        rows = train.present[kind] & (train.labels >= 0)
        mat = train.numeric[kind][rows]
        labels = train.labels[rows]
        for j, name in enumerate(train.schema.names(kind)):
            col = mat[:, j]
            groups = [col[(labels == c) & ~np.isnan(col)] for c in range(len(CLASSES))]
            groups = [grp for grp in groups if len(grp)]
            try:
                f, p = anova_f(groups)
            except DomainError:
                f, p = 0.0, 1.0
            scores.append(FeatureScore(name, f, p, None, kind.value))
    return scores


def combine_scores(scores, config, log_base=10.0):
    """
    Gate by p <= threshold and attach the weighted combined score to survivors.

    Both terms are min-max normalised over the survivors. Infinite F (and p = 0)
    map to the top of their range; a degenerate range normalises to 1.0.
    """
    survivors = [s for s in scores if s.p_value <= config.p_threshold]
    if not survivors:
        return [FeatureScore(s.feature_name, s.f_score, s.p_value, None, s.modality) for s in scores]

    f_vals = np.array([s.f_score for s in survivors])
    with np.errstate(divide='ignore'):
        p_vals = -np.log(np.array([s.p_value for s in survivors])) / math.log(log_base)

    def normalise(v):
        finite = np.isfinite(v)
        out = np.ones_like(v)
        if finite.any():
            lo, hi = v[finite].min(), v[finite].max()
            if hi > lo:
                out[finite] = (v[finite] - lo) / (hi - lo)
        return out

    fn = normalise(f_vals)
    pn = normalise(p_vals)
    combined = {s.feature_name + "\x00" + s.modality: config.w_f * a + config.w_p * b
                for s, a, b in zip(survivors, fn, pn)}
    out = []
    for s in scores:
        key = s.feature_name + "\x00" + s.modality
        out.append(FeatureScore(s.feature_name, s.f_score, s.p_value, combined.get(key), s.modality))
    return out


def combined_rank(scores, config, log_base=10.0):
    """Top-k feature names by combined score; ties broken by name."""
    ranked = [s for s in combine_scores(scores, config, log_base) if s.combined is not None]
    if not ranked:
        log.warning("SelectionEmpty: no feature passed the p-value gate")
        return []
    ranked.sort(key=lambda s: (not math.isinf(s.f_score), -s.combined, s.feature_name))
    return [s.feature_name for s in ranked[:config.k]]


@dataclass
class FeatureSelection:
    selected: dict  # modality name -> ordered feature names
    scores: list

    def to_dict(self):
        return {"selected": {k: list(v) for k, v in self.selected.items()}}

    @classmethod
    def from_dict(cls, data):
        return cls({k: list(v) for k, v in data["selected"].items()}, [])

    def report(self, config):
        chosen = {(m, n) for m, names in self.selected.items() for n in names}
        return {
            "config": {
                "p_threshold": config.p_threshold, "w_f": config.w_f, "w_p": config.w_p,
                "k": config.k, "modalities": list(config.modalities),
            },
            "features": {
                f"{s.modality}:{s.feature_name}": s.to_dict((s.modality, s.feature_name) in chosen)
                for s in self.scores
            },
        }


def fit_selection(train, config):
    """Score and select per configured modality, on a training split only."""
    selected = {}
    all_scores = []
    for modality in config.modalities:
        scores = combine_scores(score_features(train, [modality]), config)
        all_scores += scores
        selected[modality] = combined_rank(scores, config)
        log.info(f"{modality}: kept {len(selected[modality])} of {len(scores)} features")
    return FeatureSelection(selected, all_scores)


def apply_selection(selection, dataset):
    """Project the selected modalities onto their chosen columns, in ranked order."""
    schema = dataset.schema
    numeric = {}
    for modality, names in selection.selected.items():
        kind = ModalityKind(modality)
        current = schema.names(kind)
        index = [current.index(n) for n in names]
        numeric[kind] = dataset.numeric[kind][:, index]
        schema = schema.with_numeric(kind, names)
    return dataset.replace(schema=schema, numeric=numeric)
