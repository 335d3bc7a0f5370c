"""Downstream probes and metrics on latents and images."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage, stats
from skimage.metrics import structural_similarity
from sklearn.pipeline import Pipeline, make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.svm import LinearSVC

from .geometry import luminance

PSNR_CEILING = 100.0
EIGEN_FLOOR = 1e-10


# --------------------------------------------------------------------------- probes

def fit_linear_classifier(latents: np.ndarray, labels: Sequence[int], seed: int = 0) -> Pipeline:
    """One-vs-rest linear max-margin classifier (squared hinge, C = 1) on standardised latents."""
    X = np.asarray(latents, dtype=np.float64)
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise ValueError("need at least two classes")
    if np.any(counts < 2):
        raise ValueError("every class needs at least two samples")
    clf = make_pipeline(
        StandardScaler(),
        LinearSVC(C=1.0, loss="squared_hinge", penalty="l2", max_iter=20000, random_state=seed),
    )
    return clf.fit(X, y)


@dataclass
class LinearRegressor:
    coef: np.ndarray
    intercept: float

    def predict(self, latents: np.ndarray) -> np.ndarray:
        return np.asarray(latents, dtype=np.float64) @ self.coef + self.intercept


def fit_linear_regressor(latents: np.ndarray, targets: Sequence[float]) -> LinearRegressor:
    """Ordinary least squares with intercept (minimum-norm solution when rank deficient)."""
    X = np.asarray(latents, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(targets, dtype=np.float64)
    if X.shape[0] < 2 or X.shape[0] != y.shape[0]:
        raise ValueError("need at least two samples with matching targets")
    if np.all(X == X[0]):
        raise ValueError("all latents are identical")
    mean_x, mean_y = X.mean(axis=0), y.mean()
    coef, *_ = np.linalg.lstsq(X - mean_x, y - mean_y, rcond=None)
    return LinearRegressor(coef, float(mean_y - mean_x @ coef))


# --------------------------------------------------------------------------- classification

@dataclass
class ClassificationReport:
    labels: list
    confusion: np.ndarray
    precision: dict
    recall: dict
    accuracy: float
    kappa: float
    undefined_precision: list = field(default_factory=list)
    undefined_recall: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = self.confusion.tolist()
        d["precision"] = {str(k): v for k, v in self.precision.items()}
        d["recall"] = {str(k): v for k, v in self.recall.items()}
        return _jsonable(d)


def classification_metrics(pred, truth, labels: Optional[Sequence] = None) -> ClassificationReport:
    """Per-class precision/recall, accuracy and Cohen's kappa.

    A class never predicted gets precision 0 and is listed in
    ``undefined_precision`` (likewise for recall of a class absent from truth).
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth must have equal length")
    if pred.size == 0:
        raise ValueError("empty input")
    if labels is None:
        labels = sorted(set(truth.tolist()) | set(pred.tolist()))
    labels = list(labels)
    index = {lab: i for i, lab in enumerate(labels)}
    k = len(labels)
    cm = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(truth.tolist(), pred.tolist()):
        cm[index[t], index[p]] += 1
    n = cm.sum()
    precision, recall, no_p, no_r = {}, {}, [], []
    for i, lab in enumerate(labels):
        col, row = cm[:, i].sum(), cm[i, :].sum()
        precision[lab] = float(cm[i, i] / col) if col else 0.0
        recall[lab] = float(cm[i, i] / row) if row else 0.0
        if not col:
            no_p.append(lab)
        if not row:
            no_r.append(lab)
    p_o = float(np.trace(cm)) / n
    p_e = float((cm.sum(axis=0) * cm.sum(axis=1)).sum()) / (n * n)
    kappa = 1.0 if p_e == 1.0 else (p_o - p_e) / (1.0 - p_e)
    return ClassificationReport(labels, cm, precision, recall, p_o, kappa, no_p, no_r)


# --------------------------------------------------------------------------- distances

def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((mat + mat.T) / 2.0)
    w = np.where(w < EIGEN_FLOOR, 0.0, w)
    return (v * np.sqrt(w)) @ v.T


def frechet_feature_distance(A: np.ndarray, B: np.ndarray) -> float:
    """Fréchet distance between Gaussians fitted to two feature sets.

    ``|mu_A - mu_B|^2 + tr(S_A + S_B - 2 (S_A S_B)^(1/2))`` with sample
    covariances. The cross term is evaluated as ``tr((S_A^½ S_B S_A^½)^½)``
    using symmetric eigendecompositions; eigenvalues below 1e-10 are treated
    as zero so rank-deficient sets are handled.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    if B.ndim == 1:
        B = B[:, None]
    if A.shape[0] < 2 or B.shape[0] < 2:
        raise ValueError("each set needs at least two vectors")
    if A.shape[1] != B.shape[1]:
        raise ValueError("feature dimensionality differs")
    mu_a, mu_b = A.mean(axis=0), B.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(A, rowvar=False))
    cov_b = np.atleast_2d(np.cov(B, rowvar=False))
    sa = _psd_sqrt(cov_a)
    inner = sa @ cov_b @ sa
    w = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    cross = float(np.sqrt(np.where(w < EIGEN_FLOOR, 0.0, w)).sum())
    diff = mu_a - mu_b
    d = float(diff @ diff) + float(np.trace(cov_a) + np.trace(cov_b)) - 2.0 * cross
    return max(d, 0.0)


# --------------------------------------------------------------------------- image fidelity

def psnr(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    """PSNR in dB; identical inputs give :data:`PSNR_CEILING`."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("shape mismatch")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CEILING
    return min(10.0 * math.log10(data_range ** 2 / mse), PSNR_CEILING)


def ssim(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    """SSIM with the usual 11-tap Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("shape mismatch")
    channel_axis = -1 if x.ndim == 3 else None
    return float(structural_similarity(
        x, y, data_range=data_range, channel_axis=channel_axis,
        gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
    ))


def image_fidelity(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> tuple[float, float]:
    return psnr(x, y, data_range), ssim(x, y, data_range)


# --------------------------------------------------------------------------- cell proxy

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
DEFAULT_BLOB_THRESHOLD = 0.5


def blob_stats(x: np.ndarray, threshold: float = DEFAULT_BLOB_THRESHOLD, min_area: int = 3) -> tuple[int, float]:
    """Count dark 8-connected blobs of at least ``min_area`` pixels.

    Returns:
        ``(count, occupancy)`` where occupancy is the fraction of the image
        covered by the counted blobs.
    """
    dark = luminance(x) < threshold
    lab, n = ndimage.label(dark, structure=EIGHT_CONNECTED)
    if n == 0:
        return 0, 0.0
    areas = np.bincount(lab.ravel())[1:]
    keep = areas >= min_area
    return int(keep.sum()), float(areas[keep].sum()) / dark.size


def blob_descriptor(x: np.ndarray, threshold: float = DEFAULT_BLOB_THRESHOLD) -> np.ndarray:
    """Small hand-made feature vector of cell statistics, for Fréchet distances.

    Components: blob count, occupancy, mean blob area, blob-area spread,
    mean luminance of tissue and of dark pixels, luminance standard deviation
    and high-frequency energy (mean squared Laplacian).
    """
    lum = luminance(x)
    dark = lum < threshold
    lab, n = ndimage.label(dark, structure=EIGHT_CONNECTED)
    areas = np.bincount(lab.ravel())[1:] if n else np.zeros(0)
    areas = areas[areas >= 3]
    light = lum[~dark]
    return np.array([
        areas.size,
        areas.sum() / lum.size if areas.size else 0.0,
        areas.mean() if areas.size else 0.0,
        areas.std() if areas.size else 0.0,
        light.mean() if light.size else 0.0,
        lum[dark].mean() if dark.any() else 0.0,
        lum.std(),
        float(np.mean(ndimage.laplace(lum) ** 2)),
    ])


def relative_abs_error(values: Sequence[float], reference: Sequence[float]) -> float:
    """Mean of ``|v - ref| / max(ref, 1e-12)`` over paired values."""
    v = np.asarray(values, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    return float(np.mean(np.abs(v - r) / np.maximum(np.abs(r), 1e-12)))


# --------------------------------------------------------------------------- significance

@dataclass
class SignificanceResult:
    t_statistic: Optional[float]
    t_pvalue: Optional[float]
    ranksum_statistic: float
    ranksum_pvalue: float
    degenerate: bool = False


def significance_test(a: Sequence[float], b: Sequence[float]) -> SignificanceResult:
    """Paired t-test (equal lengths only) and Wilcoxon rank-sum test.

    Identical paired samples have zero-variance differences; the t-statistic
    is reported as 0 with p = 1 and ``degenerate`` is set.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    t_stat = t_p = None
    degenerate = False
    if a.size == b.size:
        d = a - b
        if np.all(d == d[0]):
            degenerate = True
            t_stat, t_p = (0.0, 1.0) if d[0] == 0 else (math.copysign(math.inf, d[0]), 0.0)
        else:
            res = stats.ttest_rel(a, b)
            t_stat, t_p = float(res.statistic), float(res.pvalue)
    rs = stats.ranksums(a, b)
    return SignificanceResult(t_stat, t_p, float(rs.statistic), float(rs.pvalue), degenerate)


# --------------------------------------------------------------------------- latent projection

@dataclass
class Ellipse:
    center: np.ndarray
    half_axes: np.ndarray
    angle_deg: float
    n_points: int
    degenerate: bool = False


@dataclass
class LatentProjection:
    coords: np.ndarray
    mean: np.ndarray
    components: np.ndarray
    ellipses: dict


def _ellipse(points: np.ndarray, n_sigma: float) -> Ellipse:
    center = points.mean(axis=0)
    if points.shape[0] < 3:
        return Ellipse(center, np.zeros(2), 0.0, points.shape[0], degenerate=True)
    cov = np.cov(points, rowvar=False)
    w, v = np.linalg.eigh(cov)
    w = np.clip(w[::-1], 0.0, None)
    v = v[:, ::-1]
    angle = math.degrees(math.atan2(v[1, 0], v[0, 0]))
    degenerate = bool(w[1] <= EIGEN_FLOOR * max(w[0], 1.0))
    return Ellipse(center, n_sigma * np.sqrt(w), angle, points.shape[0], degenerate)


def project_latents_2d(latents: np.ndarray, regions: Sequence[int], n_sigma: float = 2.0) -> LatentProjection:
    """Project onto the top two principal directions and fit per-region ellipses.

    The sign of each direction is fixed so that its largest-magnitude entry is
    positive, making the projection deterministic. Ellipse half-axes are
    ``n_sigma`` standard deviations along the eigenvectors of each region's
    2-D covariance.
    """
    Z = np.asarray(latents, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] < 2:
        raise ValueError("need latents with at least two dimensions")
    regions = np.asarray(regions)
    mean = Z.mean(axis=0)
    _, _, vt = np.linalg.svd(Z - mean, full_matrices=False)
    comps = vt[:2].copy()
    for i in range(comps.shape[0]):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    coords = (Z - mean) @ comps.T
    ellipses = {
        int(lab): _ellipse(coords[regions == lab], n_sigma) for lab in np.unique(regions)
    }
    return LatentProjection(coords, mean, comps, ellipses)


def plot_latent_projection(proj: LatentProjection, regions: Sequence[int], path: Union[str, Path],
                           names: Optional[dict] = None) -> None:
    """Scatter of projected latents with one ellipse per region, saved as PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Ellipse as EllipsePatch

    regions = np.asarray(regions)
    fig, ax = plt.subplots(figsize=(6, 5))
    cmap = plt.get_cmap("tab10")
    for i, lab in enumerate(sorted(proj.ellipses)):
        pts = proj.coords[regions == lab]
        colour = cmap(i % 10)
        label = (names or {}).get(lab, str(lab))
        ax.scatter(pts[:, 0], pts[:, 1], s=4, alpha=0.4, color=colour, label=label)
        e = proj.ellipses[lab]
        if not e.degenerate:
            ax.add_patch(EllipsePatch(e.center, 2 * e.half_axes[0], 2 * e.half_axes[1],
                                      angle=e.angle_deg, fill=False, color=colour, lw=2))
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend(markerscale=3, fontsize=8)
    fig.tight_layout()
    fig.savefig(str(path), dpi=100, metadata={"Software": None})
    plt.close(fig)


# --------------------------------------------------------------------------- report

@dataclass
class MetricReport:
    precision: dict = field(default_factory=dict)
    recall: dict = field(default_factory=dict)
    accuracy: Optional[float] = None
    kappa: Optional[float] = None
    mse_r: Optional[float] = None
    mse_theta: Optional[float] = None
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    fcd: Optional[float] = None
    cell_count_relerr: Optional[float] = None
    cell_occupancy_relerr: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("accuracy",):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for d in (self.precision, self.recall):
            if any(not 0.0 <= v <= 1.0 for v in d.values()):
                raise ValueError("precision/recall must lie in [0, 1]")
        if self.kappa is not None and not -1.0 <= self.kappa <= 1.0:
            raise ValueError("kappa must lie in [-1, 1]")
        if self.fcd is not None and self.fcd < 0:
            raise ValueError("fcd must be >= 0")

    def to_json(self) -> str:
        d = asdict(self)
        d["precision"] = {str(k): v for k, v in self.precision.items()}
        d["recall"] = {str(k): v for k, v in self.recall.items()}
        return json.dumps(_jsonable(d), indent=2, sort_keys=True) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj
