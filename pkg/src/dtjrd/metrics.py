"""Evaluation metrics: QP-prediction MAEs, image quality, detection mAP,
and Bjontegaard rate/metric deltas over rate-accuracy curves.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .errors import ContractError, ShapeError, ValidationError

PSNR_PEAK = 255.0


# -- prediction error ----------------------------------------------------


def mae_ea(pred, gt, image_ids=None) -> float:
    """Two-level MAE: per-image mean of |pred - gt|, then mean over images.

    With ``image_ids`` omitted every object counts as its own image, which
    reduces to the plain MAE.  Images are weighted equally regardless of how
    many objects they contain.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.size == 0:
        raise ContractError("mae_ea on empty input")
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ContractError(f"pred/gt must be equal 1-D, got {pred.shape} vs {gt.shape}")
    err = np.abs(pred - gt)
    if image_ids is None:
        return float(err.mean())
    image_ids = list(image_ids)
    if len(image_ids) != pred.size:
        raise ContractError("image_ids length must match predictions")
    per_image: dict[str, list[float]] = {}
    for iid, e in zip(image_ids, err):
        per_image.setdefault(iid, []).append(float(e))
    return float(np.mean([np.mean(v) for v in per_image.values()]))


def mae_range(pred, gt, lo: int = 27, hi: int = 51) -> float:
    """Object-weighted MAE over objects whose ground truth lies in [lo, hi]."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ContractError(f"pred/gt must be equal 1-D, got {pred.shape} vs {gt.shape}")
    mask = (gt >= lo) & (gt <= hi)
    if not np.any(mask):
        raise ContractError(f"no ground-truth values in [{lo}, {hi}]")
    return float(np.abs(pred[mask] - gt[mask]).mean())


# -- image quality -------------------------------------------------------


def psnr(a, b) -> float:
    """10 log10(255^2 / MSE) in dB; identical inputs give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ContractError("psnr on empty images")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(PSNR_PEAK * PSNR_PEAK / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), L = 255.

    Inputs are 2-D grayscale planes, or [H, W, 3] arrays which are reduced
    to luma first.  The mean is taken over the valid (fully-windowed) region.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3 and a.shape[2] == 3:
        weights = np.array([0.299, 0.587, 0.114])
        a = a @ weights
        b = b @ weights
    if a.ndim != 2:
        raise ShapeError(f"ssim expects 2-D or [H,W,3] images, got {a.shape}")
    if min(a.shape) < 11:
        raise ContractError(f"ssim needs images of at least 11x11, got {a.shape}")
    window = _gaussian_window()
    c1 = (k1 * PSNR_PEAK) ** 2
    c2 = (k2 * PSNR_PEAK) ** 2

    def filt(x):
        return convolve2d(x, window, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def delta_metrics(originals, gt_coded, pred_coded, gt_rates, pred_rates) -> dict:
    """Per-pair deltas between coding at the true QP and the predicted QP.

    PSNR/SSIM for each coded image are measured against the matching
    original.  Returns mean |dPSNR|, mean |dSSIM|, mean |drate| (in the rate
    unit supplied), and R^2, the squared Pearson correlation of the two PSNR
    sequences.  Needs at least 2 pairs and non-constant PSNR sequences.
    """
    n = len(originals)
    if not (len(gt_coded) == len(pred_coded) == n) or len(gt_rates) != n or len(pred_rates) != n:
        raise ContractError("delta_metrics: all five sequences must have equal length")
    if n < 2:
        raise ContractError("delta_metrics needs at least 2 pairs")
    psnr_gt = np.array([psnr(o, g) for o, g in zip(originals, gt_coded)])
    psnr_pred = np.array([psnr(o, p) for o, p in zip(originals, pred_coded)])
    if not (np.all(np.isfinite(psnr_gt)) and np.all(np.isfinite(psnr_pred))):
        raise ContractError("delta_metrics: lossless pair gives infinite PSNR")
    ssim_gt = np.array([ssim(o, g) for o, g in zip(originals, gt_coded)])
    ssim_pred = np.array([ssim(o, p) for o, p in zip(originals, pred_coded)])
    if np.std(psnr_gt) == 0.0 or np.std(psnr_pred) == 0.0:
        raise ContractError("delta_metrics: zero-variance PSNR sequence, R^2 undefined")
    r = np.corrcoef(psnr_gt, psnr_pred)[0, 1]
    return {
        "delta_psnr": float(np.mean(np.abs(psnr_gt - psnr_pred))),
        "delta_ssim": float(np.mean(np.abs(ssim_gt - ssim_pred))),
        "delta_rate": float(np.mean(np.abs(np.asarray(gt_rates, dtype=np.float64)
                                           - np.asarray(pred_rates, dtype=np.float64)))),
        "r2": float(r * r),
    }


# -- detection mAP --------------------------------------------------------


def iou_xyxy(a, b) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def _average_precision(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """101-point interpolated AP from monotone recall/precision samples."""
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recalls >= r
        ap += float(precisions[mask].max()) if np.any(mask) else 0.0
    return ap / 101.0


def map_at_iou(dets, gts, iou_thr: float = 0.5) -> float:
    """Mean average precision (percent) at one IoU threshold.

    ``dets`` entries are dicts with image_id, category, bbox (x1,y1,x2,y2)
    and score; ``gts`` entries carry no score.  Detections are greedily
    matched in descending-score order to the unmatched same-image,
    same-category ground truth of highest IoU; AP uses 101-point
    interpolation; mAP averages over categories present in the ground truth.
    """
    if not gts:
        raise ContractError("map_at_iou with empty ground truth")
    if not 0.0 < iou_thr <= 1.0:
        raise ContractError(f"iou threshold must be in (0, 1], got {iou_thr}")
    gt_by_key: dict[tuple, list[dict]] = {}
    n_gt_per_cat: dict[str, int] = {}
    for g in gts:
        gt_by_key.setdefault((g["image_id"], g["category"]), []).append(
            {"bbox": g["bbox"], "matched": False}
        )
        n_gt_per_cat[g["category"]] = n_gt_per_cat.get(g["category"], 0) + 1

    aps = []
    for category in sorted(n_gt_per_cat):
        cat_dets = [d for d in dets if d["category"] == category]
        order = sorted(range(len(cat_dets)),
                       key=lambda i: (-cat_dets[i]["score"], i))
        tp = np.zeros(len(order))
        fp = np.zeros(len(order))
        for rank, i in enumerate(order):
            det = cat_dets[i]
            candidates = gt_by_key.get((det["image_id"], category), [])
            best_iou, best = 0.0, None
            for cand in candidates:
                if cand["matched"]:
                    continue
                v = iou_xyxy(det["bbox"], cand["bbox"])
                if v > best_iou:
                    best_iou, best = v, cand
            if best is not None and best_iou >= iou_thr:
                best["matched"] = True
                tp[rank] = 1.0
            else:
                fp[rank] = 1.0
        if len(order) == 0:
            aps.append(0.0)
            continue
        cum_tp = np.cumsum(tp)
        cum_fp = np.cumsum(fp)
        recalls = cum_tp / n_gt_per_cat[category]
        precisions = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
        aps.append(_average_precision(recalls, precisions))
    return float(np.mean(aps) * 100.0)


# -- rate-accuracy curves and Bjontegaard deltas ---------------------------


@dataclass(frozen=True)
class RateAccuracyCurve:
    """Operating points (rate in bits per pixel, metric value)."""

    points: tuple = field(default_factory=tuple)

    def __post_init__(self):
        pts = tuple((float(r), float(m)) for r, m in self.points)
        object.__setattr__(self, "points", pts)
        rates = [p[0] for p in pts]
        if any(r <= 0 for r in rates):
            raise ValidationError("curve rates must be positive")
        if any(rates[i] >= rates[i + 1] for i in range(len(rates) - 1)):
            raise ValidationError("curve rates must be strictly increasing")
        if any(not math.isfinite(p[1]) for p in pts):
            raise ValidationError("curve metric values must be finite")

    @property
    def rates(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def metrics(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])


def save_curve(curve: RateAccuracyCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rate_bpp", "metric"])
        for rate, metric in curve.points:
            writer.writerow([repr(rate), repr(metric)])


def load_curve(path) -> RateAccuracyCurve:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["rate_bpp", "metric"]:
            raise ValidationError(f"{path}: expected header 'rate_bpp,metric'")
        points = []
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise ValidationError(f"{path}: malformed curve row {row!r}")
            points.append((float(row[0]), float(row[1])))
    return RateAccuracyCurve(tuple(points))


def _check_curves(anchor: RateAccuracyCurve, test: RateAccuracyCurve):
    for name, curve in (("anchor", anchor), ("test", test)):
        if len(curve.points) < 4:
            raise ContractError(f"{name} curve needs at least 4 points")
        if np.any(np.diff(curve.metrics) <= 0):
            warnings.warn(f"{name} curve metric is not strictly increasing; "
                          "polynomial fit proceeds", stacklevel=3)


def bd_rate(anchor: RateAccuracyCurve, test: RateAccuracyCurve) -> float:
    """Average bitrate difference in percent (negative = test saves rate).

    Classic cubic-polynomial form: fit log10(rate) as a cubic in the metric
    for both curves, integrate the difference over the overlapping metric
    range, and convert the mean log10 gap to a percentage.
    """
    _check_curves(anchor, test)
    lo = max(anchor.metrics.min(), test.metrics.min())
    hi = min(anchor.metrics.max(), test.metrics.max())
    if hi <= lo:
        raise ContractError("curves have no overlapping metric range")
    p_anchor = np.polyfit(anchor.metrics, np.log10(anchor.rates), 3)
    p_test = np.polyfit(test.metrics, np.log10(test.rates), 3)
    int_anchor = np.polyval(np.polyint(p_anchor), [lo, hi])
    int_test = np.polyval(np.polyint(p_test), [lo, hi])
    avg_diff = ((int_test[1] - int_test[0]) - (int_anchor[1] - int_anchor[0])) / (hi - lo)
    return float((10.0 ** avg_diff - 1.0) * 100.0)


def bd_metric(anchor: RateAccuracyCurve, test: RateAccuracyCurve) -> float:
    """Average metric difference (in metric units) over the shared log-rate range."""
    _check_curves(anchor, test)
    la, lt = np.log10(anchor.rates), np.log10(test.rates)
    lo = max(la.min(), lt.min())
    hi = min(la.max(), lt.max())
    if hi <= lo:
        raise ContractError("curves have no overlapping rate range")
    p_anchor = np.polyfit(la, anchor.metrics, 3)
    p_test = np.polyfit(lt, test.metrics, 3)
    int_anchor = np.polyval(np.polyint(p_anchor), [lo, hi])
    int_test = np.polyval(np.polyint(p_test), [lo, hi])
    return float(((int_test[1] - int_test[0]) - (int_anchor[1] - int_anchor[0])) / (hi - lo))


# -- detection JSON I/O ----------------------------------------------------


def save_detections(path, entries) -> None:
    """Write detections as a JSON array with COCO-style [x, y, w, h] boxes."""
    out = []
    for e in entries:
        x1, y1, x2, y2 = e["bbox"]
        row = {
            "image_id": e["image_id"],
            "category": e["category"],
            "bbox": [x1, y1, x2 - x1, y2 - y1],
        }
        if "score" in e:
            row["score"] = e["score"]
        out.append(row)
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2)


def load_detections(path, with_scores: bool) -> list[dict]:
    """Read a detections JSON array back into (x1, y1, x2, y2) entries."""
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ValidationError(f"{path}: expected a JSON array")
    entries = []
    for i, e in enumerate(raw):
        try:
            x, y, w, h = e["bbox"]
            entry = {
                "image_id": e["image_id"],
                "category": e["category"],
                "bbox": (float(x), float(y), float(x) + float(w), float(y) + float(h)),
            }
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}: bad detection entry {i}: {exc}") from exc
        if w <= 0 or h <= 0:
            raise ValidationError(f"{path}: entry {i} has non-positive box size")
        if with_scores:
            if "score" not in e:
                raise ValidationError(f"{path}: entry {i} lacks a score")
            score = float(e["score"])
            if not 0.0 <= score <= 1.0:
                raise ValidationError(f"{path}: entry {i} score {score} out of [0,1]")
            entry["score"] = score
        entries.append(entry)
    return entries
