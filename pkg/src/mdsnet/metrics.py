"""Multi-view fusion and segmentation evaluation."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree

from .nn import ShapeError


class MetricError(ValueError):
    pass


# ----------------------------------------------------------------------------
# fusion
# ----------------------------------------------------------------------------

@dataclass
class FusedPrediction:
    maps: dict
    mean_prob: np.ndarray
    mask: np.ndarray
    thr: float

    @property
    def prob_axial(self):
        return self.maps.get("axial")

    @property
    def prob_coronal(self):
        return self.maps.get("coronal")

    @property
    def prob_sagittal(self):
        return self.maps.get("sagittal")


def fuse_maps(maps, thr=0.5):
    """Average aligned probability maps (a dict view -> array) and threshold the mean."""
    if not 0 < thr < 1:
        raise MetricError(f"threshold must lie in (0, 1), got {thr}")
    if not maps:
        raise MetricError("need at least one probability map")
    arrays = [np.asarray(m, dtype=float) for m in maps.values()]
    shape = arrays[0].shape
    for name, a in zip(maps, arrays):
        if a.shape != shape:
            raise ShapeError(f"{name} map has dims {a.shape}, expected {shape}")
    mean = arrays[0].copy() if len(arrays) == 1 else np.mean(arrays, axis=0)
    return FusedPrediction(dict(maps), mean, (mean >= thr).astype(np.uint8), thr)


def fuse_views(prob_axial, prob_coronal, prob_sagittal, thr=0.5):
    """Three-view vote: mask = mean(axial, coronal, sagittal) >= thr.

    All maps must already be in the axial frame.
    """
    return fuse_maps({"axial": prob_axial, "coronal": prob_coronal, "sagittal": prob_sagittal}, thr)


# ----------------------------------------------------------------------------
# overlap metrics
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Overlap:
    dice: float
    jaccard: float
    precision: float
    recall: float


def _binary(a, name):
    a = np.asarray(a)
    if not np.isin(a, (0, 1)).all():
        raise MetricError(f"{name} must be binary")
    return a.astype(bool)


def binary_overlap_metrics(pred_mask, label):
    """Dice, Jaccard, precision and recall of two binary masks.

    Both empty counts as a perfect match; if only one is empty every score is 0.
    """
    p = _binary(pred_mask, "prediction")
    y = _binary(label, "label")
    if p.shape != y.shape:
        raise ShapeError(f"prediction dims {p.shape} != label dims {y.shape}")
    tp = int(np.count_nonzero(p & y))
    n_p = int(np.count_nonzero(p))
    n_y = int(np.count_nonzero(y))
    if n_p == 0 and n_y == 0:
        return Overlap(1.0, 1.0, 1.0, 1.0)
    if n_p == 0 or n_y == 0:
        return Overlap(0.0, 0.0, 0.0, 0.0)
    return Overlap(
        dice=2 * tp / (n_p + n_y),
        jaccard=tp / (n_p + n_y - tp),
        precision=tp / n_p,
        recall=tp / n_y,
    )


# ----------------------------------------------------------------------------
# boundary distance
# ----------------------------------------------------------------------------

def boundary_mask(mask):
    """Foreground voxels with at least one in-plane 4-neighbour in the background.

    Voxels outside the slice count as background.
    """
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, ((0, 0), (1, 1), (1, 1)))
    interior = (padded[:, :-2, 1:-1] & padded[:, 2:, 1:-1] & padded[:, 1:-1, :-2] & padded[:, 1:-1, 2:])
    return m & ~interior


def boundary_rmse(pred_mask, label, spacing=None):
    """Root mean squared distance from each predicted boundary point to its nearest
    label boundary point.

    Matching is in-plane within the same slice; prediction points on slices whose
    label slice has no boundary are matched against the whole label boundary in 3-D.
    Distances are in voxels, or in ``spacing`` units (per d, l, w axis) when given.
    """
    p = _binary(pred_mask, "prediction")
    y = _binary(label, "label")
    if p.ndim == 2:
        p, y = p[None], y[None]
    if p.shape != y.shape:
        raise ShapeError(f"prediction dims {p.shape} != label dims {y.shape}")
    pb = np.argwhere(boundary_mask(p)).astype(float)
    yb = np.argwhere(boundary_mask(y)).astype(float)
    if len(pb) == 0:
        raise MetricError("prediction boundary is empty")
    if len(yb) == 0:
        raise MetricError("label boundary is empty")
    scale = np.ones(3) if spacing is None else np.asarray(spacing, dtype=float)
    pb *= scale
    yb *= scale
    sq = np.empty(len(pb))
    slices_p = np.round(pb[:, 0] / scale[0]).astype(int)
    slices_y = np.round(yb[:, 0] / scale[0]).astype(int)
    leftover = np.ones(len(pb), dtype=bool)
    for z in np.unique(slices_p):
        sel_y = slices_y == z
        if not sel_y.any():
            continue
        sel_p = slices_p == z
        dist, _ = cKDTree(yb[sel_y, 1:]).query(pb[sel_p, 1:])
        sq[sel_p] = dist**2
        leftover[sel_p] = False
    if leftover.any():
        dist, _ = cKDTree(yb).query(pb[leftover])
        sq[leftover] = dist**2
    return float(np.sqrt(sq.mean()))


# ----------------------------------------------------------------------------
# per-case and aggregate reports
# ----------------------------------------------------------------------------

@dataclass
class CaseMetrics:
    case: str
    dice: float
    jaccard: float
    precision: float
    recall: float
    rmse: float | None


def evaluate_case(pred_mask, label, case="", spacing=None):
    o = binary_overlap_metrics(pred_mask, label)
    try:
        rmse = boundary_rmse(pred_mask, label, spacing)
    except MetricError:
        rmse = None
    return CaseMetrics(str(case), o.dice, o.jaccard, o.precision, o.recall, rmse)


def slice_range_metrics(pred, label, slice_range, case="", spacing=None):
    """Metrics restricted to slices ``[start, stop)`` of the depth axis."""
    start, stop = slice_range
    d = np.asarray(pred).shape[0]
    if not 0 <= start < stop <= d:
        raise MetricError(f"slice range [{start}, {stop}) outside depth {d}")
    return evaluate_case(np.asarray(pred)[start:stop], np.asarray(label)[start:stop], case, spacing)


def summarize(values):
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return None
    return {
        "mean": float(v.mean()),
        "stdv": float(v.std(ddof=1)) if v.size > 1 else 0.0,
        "min": float(v.min()),
        "max": float(v.max()),
        "n": int(v.size),
    }


METRIC_FIELDS = ("dice", "jaccard", "precision", "recall", "rmse")


@dataclass
class MetricReport:
    cases: list = field(default_factory=list)

    def values(self, name):
        return [getattr(c, name) for c in self.cases]

    def aggregate(self):
        return {name: summarize(self.values(name)) for name in METRIC_FIELDS}

    def mean(self, name="dice"):
        s = summarize(self.values(name))
        return None if s is None else s["mean"]

    def formatted(self, percent=("dice", "jaccard", "precision", "recall")):
        """Table-style ``mean±stdv.[min, max]`` strings, overlaps in percent."""
        out = {}
        for name, s in self.aggregate().items():
            if s is None:
                out[name] = None
                continue
            f = 100.0 if name in percent else 1.0
            out[name] = f"{s['mean'] * f:.1f}±{s['stdv'] * f:.1f}[{s['min'] * f:.1f},{s['max'] * f:.1f}]"
        return out

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("case",) + METRIC_FIELDS)
            for c in self.cases:
                writer.writerow([c.case] + ["" if getattr(c, n) is None else repr(getattr(c, n))
                                            for n in METRIC_FIELDS])
        return path

    def write_json(self, path, **extra):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"aggregate": self.aggregate(), "formatted": self.formatted(), **extra}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read_csv(cls, path):
        cases = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                vals = {n: (float(row[n]) if row[n] != "" else None) for n in METRIC_FIELDS}
                cases.append(CaseMetrics(row["case"], **vals))
        return cls(cases)


# ----------------------------------------------------------------------------
# robustness / sensitivity helpers
# ----------------------------------------------------------------------------

def sensitivity_ratio(dice_changed, dice_benchmark):
    """Relative Dice change against the benchmark setting."""
    if dice_benchmark == 0:
        raise MetricError("benchmark Dice must be non-zero")
    return (dice_changed - dice_benchmark) / dice_benchmark


def reliability_curve(per_case_dice, thresholds):
    """Fraction of cases whose Dice is at least each threshold."""
    d = np.asarray(per_case_dice, dtype=float)
    if d.size == 0:
        raise MetricError("reliability curve needs at least one case")
    return [(float(t), float(np.mean(d >= t))) for t in sorted(thresholds)]


def two_sample_ttest(group_a, group_b):
    """Two-sided Student's t-test with pooled variance; returns ``(t, p)``."""
    a = np.asarray(group_a, dtype=float)
    b = np.asarray(group_b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise MetricError("each group needs at least two values")
    na, nb = a.size, b.size
    dof = na + nb - 2
    pooled = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / dof
    if pooled <= 0:
        if a.mean() == b.mean():
            raise MetricError("both groups are constant and equal; t is undefined")
        raise MetricError("pooled variance is zero")
    t = (a.mean() - b.mean()) / np.sqrt(pooled * (1.0 / na + 1.0 / nb))
    p = 2.0 * stats.t.sf(abs(t), dof)
    return float(t), float(p)


def write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def report_dict(report):
    return {"cases": [asdict(c) for c in report.cases], "aggregate": report.aggregate()}
