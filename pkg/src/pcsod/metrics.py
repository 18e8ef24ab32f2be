"""MAE, F-measure, E-measure and IoU for per-point saliency maps.

Binarization is always ``P >= t``. Curves are evaluated on the 256-level
grid ``i / 255``; the scalar F/E reported for a view is the curve maximum
(the curve mean is kept alongside).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

THRESHOLDS = np.arange(256) / 255.0


@dataclass(frozen=True)
class MetricsConfig:
    beta_sq: float = 0.3
    thresholds: np.ndarray = field(default_factory=lambda: THRESHOLDS.copy())
    iou_threshold: float = 0.5
    epsilon: float = 1e-12

    def __post_init__(self):
        if self.beta_sq <= 0:
            raise ValueError("beta_sq must be positive")
        t = np.asarray(self.thresholds, dtype=np.float64)
        if t.ndim != 1 or t.size == 0 or t.min() < 0 or t.max() > 1:
            raise ValueError("thresholds must be a nonempty 1-D grid within [0, 1]")
        object.__setattr__(self, "thresholds", t)


@dataclass
class MetricsReport:
    mae: float
    iou: float
    f_curve: np.ndarray
    e_curve: np.ndarray
    name: str = ""

    @property
    def max_f(self) -> float:
        return float(np.max(self.f_curve)) if np.isfinite(self.f_curve).all() else float("nan")

    @property
    def mean_f(self) -> float:
        return float(np.mean(self.f_curve))

    @property
    def max_e(self) -> float:
        return float(np.max(self.e_curve))

    @property
    def mean_e(self) -> float:
        return float(np.mean(self.e_curve))

    def row(self) -> dict[str, object]:
        return {"view": self.name, "mae": self.mae, "max_f": self.max_f, "mean_f": self.mean_f,
                "max_e": self.max_e, "mean_e": self.mean_e, "iou": self.iou}


def _check(P, G) -> tuple[np.ndarray, np.ndarray]:
    P = np.asarray(P, dtype=np.float64).reshape(-1)
    G = np.asarray(G).reshape(-1)
    if P.shape != G.shape:
        raise ValueError(f"length mismatch: {P.size} predictions vs {G.size} labels")
    return P, G.astype(bool)


def _check_t(t: float) -> None:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold {t} outside [0, 1]")


def mae(P, G) -> float:
    P, G = _check(P, G)
    return float(np.mean(np.abs(P - G)))


def _f_from_counts(tp, fp, fn, beta_sq):
    tp, fp, fn = (np.asarray(x, dtype=np.float64) for x in (tp, fp, fn))
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
        reca = tp / (tp + fn)
        denom = beta_sq * prec + reca
        f = np.where(denom > 0, (1 + beta_sq) * prec * reca / np.where(denom > 0, denom, 1), 0.0)
    # no ground-truth positives: recall undefined
    return np.where(tp + fn > 0, f, np.nan)


def f_measure_at(P, G, t: float, beta_sq: float = 0.3) -> float:
    """Weighted harmonic mean of precision and recall at threshold ``t``.

    Returns NaN when the ground truth has no positives (such views are
    skipped when aggregating).
    """
    _check_t(t)
    P, G = _check(P, G)
    B = P >= t
    tp = np.count_nonzero(B & G)
    fp = np.count_nonzero(B & ~G)
    fn = np.count_nonzero(~B & G)
    return float(_f_from_counts(tp, fp, fn, beta_sq))


def _e_from_counts(n11, n10, n01, n00, eps):
    """Mean enhanced alignment from the four confusion counts (B, G)."""
    n11, n10, n01, n00 = (np.asarray(x, dtype=np.float64) for x in (n11, n10, n01, n00))
    n = n11 + n10 + n01 + n00
    mb = (n11 + n10) / n
    mg = (n11 + n01) / n
    total = np.zeros_like(n)
    for count, b, g in ((n11, 1, 1), (n10, 1, 0), (n01, 0, 1), (n00, 0, 0)):
        pb, pg = b - mb, g - mg
        xi = 2 * pb * pg / (pb * pb + pg * pg + eps)
        total = total + count * (1 + xi) ** 2 / 4
    e = total / n
    b_const = (mb == 0) | (mb == 1)
    g_const = (mg == 0) | (mg == 1)
    both = b_const & g_const
    return np.where(both, np.where(mb == mg, 1.0, 0.0), e)


def e_measure_at(P, G, t: float, epsilon: float = 1e-12) -> float:
    _check_t(t)
    P, G = _check(P, G)
    B = P >= t
    n11 = np.count_nonzero(B & G)
    n10 = np.count_nonzero(B & ~G)
    n01 = np.count_nonzero(~B & G)
    n00 = B.size - n11 - n10 - n01
    return float(_e_from_counts(n11, n10, n01, n00, epsilon))


def iou(P, G, t: float = 0.5) -> float:
    _check_t(t)
    P, G = _check(P, G)
    B = P >= t
    union = np.count_nonzero(B | G)
    if union == 0:
        return 1.0
    return np.count_nonzero(B & G) / union


def _curve_counts(P: np.ndarray, G: np.ndarray, thresholds: np.ndarray):
    """Confusion counts at every threshold via one sort of the predictions."""
    pos = np.sort(P[G])
    neg = np.sort(P[~G])
    # number of values >= t
    tp = pos.size - np.searchsorted(pos, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg, thresholds, side="left")
    fn = pos.size - tp
    tn = neg.size - fp
    return tp, fp, fn, tn


def evaluate(P, G, cfg: MetricsConfig | None = None, name: str = "") -> MetricsReport:
    cfg = cfg or MetricsConfig()
    P, G = _check(P, G)
    tp, fp, fn, tn = _curve_counts(P, G, cfg.thresholds)
    f_curve = _f_from_counts(tp, fp, fn, cfg.beta_sq)
    e_curve = _e_from_counts(tp, fp, fn, tn, cfg.epsilon)
    return MetricsReport(mae(P, G), iou(P, G, cfg.iou_threshold), f_curve, e_curve, name)


def aggregate(reports: list[MetricsReport], name: str = "aggregate") -> MetricsReport:
    """Average per-view metrics; views with undefined F are left out of the F curve."""
    if not reports:
        raise ValueError("cannot aggregate an empty report list")
    f = np.stack([r.f_curve for r in reports])
    defined = np.isfinite(f).all(axis=1)
    f_curve = f[defined].mean(axis=0) if defined.any() else np.full(f.shape[1], np.nan)
    return MetricsReport(
        mae=float(np.mean([r.mae for r in reports])),
        iou=float(np.mean([r.iou for r in reports])),
        f_curve=f_curve,
        e_curve=np.stack([r.e_curve for r in reports]).mean(axis=0),
        name=name,
    )


REPORT_COLUMNS = ["view", "mae", "max_f", "mean_f", "max_e", "mean_e", "iou"]


def write_report_csv(path, reports: list[MetricsReport], total: MetricsReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
        w.writerow(total.row())


def write_curve_csv(path, report: MetricsReport, thresholds=THRESHOLDS) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "f_measure", "e_measure"])
        for t, fv, ev in zip(thresholds, report.f_curve, report.e_curve):
            w.writerow([f"{t:.6f}", fv, ev])
