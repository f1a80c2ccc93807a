import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from wrapt import synchronized

from .scenes import BACKGROUND_DEPTH, MultiModalVideo

logger = logging.getLogger(__name__)

DEPTH_CLAMP = 1e-3
PSNR_CAP = 40.0


class MetricError(ValueError):
    pass


class DepthErrors(NamedTuple):
    absrel: float
    delta1: float
    sq_rel: float
    rmse: float
    delta2: float
    delta3: float
    scale: float
    shift: float


def align_scale_shift(pred: np.ndarray, gt: np.ndarray) -> Tuple[float, float]:
    """Least-squares a, b minimizing sum((a * pred + b - gt) ** 2)."""
    x = pred.astype(np.float64).reshape(-1)
    y = gt.astype(np.float64).reshape(-1)
    x_mean, y_mean = x.mean(), y.mean()
    var = ((x - x_mean) ** 2).sum()
    if var <= 1e-12 * max(1.0, float((x * x).sum())):
        return 0.0, float(y_mean)
    a = float(((x - x_mean) * (y - y_mean)).sum() / var)
    return a, float(y_mean - a * x_mean)


def depth_metrics(pred: np.ndarray, gt: np.ndarray, align: bool = True) -> DepthErrors:
    if pred.shape != gt.shape:
        raise MetricError(f"depth shapes differ: {pred.shape} vs {gt.shape}")
    gt = gt.astype(np.float64)
    if align:
        a, b = align_scale_shift(pred, gt)
    else:
        a, b = 1.0, 0.0
    aligned = np.maximum(a * pred.astype(np.float64) + b, DEPTH_CLAMP)

    thresh = np.maximum(gt / aligned, aligned / gt)
    return DepthErrors(
        absrel=float(np.mean(np.abs(gt - aligned) / gt)),
        delta1=float(np.mean(thresh < 1.25)),
        sq_rel=float(np.mean((gt - aligned) ** 2 / gt)),
        rmse=float(np.sqrt(np.mean((gt - aligned) ** 2))),
        delta2=float(np.mean(thresh < 1.25**2)),
        delta3=float(np.mean(thresh < 1.25**3)),
        scale=a,
        shift=b,
    )


def seg_miou(pred_ids: np.ndarray, gt_ids: np.ndarray) -> float:
    """Mean IoU of gt instances, matched to predicted ids greedily by descending IoU."""
    if pred_ids.shape != gt_ids.shape:
        raise MetricError(f"seg shapes differ: {pred_ids.shape} vs {gt_ids.shape}")
    gt_labels = [int(i) for i in np.unique(gt_ids) if i > 0]
    pred_labels = [int(i) for i in np.unique(pred_ids) if i > 0]
    if not gt_labels:
        return 1.0 if not pred_labels else 0.0

    pairs = []
    for g in gt_labels:
        gm = gt_ids == g
        for p in pred_labels:
            pm = pred_ids == p
            inter = int(np.count_nonzero(gm & pm))
            if inter:
                pairs.append((inter / int(np.count_nonzero(gm | pm)), g, p))
    pairs.sort(key=lambda item: (-item[0], item[1], item[2]))

    best: Dict[int, float] = {g: 0.0 for g in gt_labels}
    used_gt, used_pred = set(), set()
    for iou, g, p in pairs:
        if g in used_gt or p in used_pred:
            continue
        best[g] = iou
        used_gt.add(g)
        used_pred.add(p)
    return float(np.mean([best[g] for g in gt_labels]))


def _dilate(mask: np.ndarray, tol: int) -> np.ndarray:
    """Chebyshev dilation over the last two axes, zero outside the frame."""
    h, w = mask.shape[-2:]
    out = np.zeros_like(mask)
    for dy in range(-tol, tol + 1):
        for dx in range(-tol, tol + 1):
            src_y = slice(max(0, -dy), min(h, h - dy))
            dst_y = slice(max(0, dy), min(h, h + dy))
            src_x = slice(max(0, -dx), min(w, w - dx))
            dst_x = slice(max(0, dx), min(w, w + dx))
            out[..., dst_y, dst_x] |= mask[..., src_y, src_x]
    return out


def edge_f1(pred: np.ndarray, gt: np.ndarray, tol: int = 1) -> float:
    if pred.shape != gt.shape:
        raise MetricError(f"edge shapes differ: {pred.shape} vs {gt.shape}")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    n_pred, n_gt = int(pred.sum()), int(gt.sum())
    if n_pred == 0 and n_gt == 0:
        return 1.0
    if n_pred == 0 or n_gt == 0:
        return 0.0
    precision = np.count_nonzero(pred & _dilate(gt, tol)) / n_pred
    recall = np.count_nonzero(gt & _dilate(pred, tol)) / n_gt
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise MetricError(f"rgb shapes differ: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred.astype(np.float64) - gt.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def consistency(depth: np.ndarray, seg: np.ndarray) -> float:
    """Fraction of pixels whose nearest region by median depth is their own seg id."""
    if depth.shape != seg.shape:
        raise MetricError(f"depth {depth.shape} and seg {seg.shape} differ in shape")
    labels = [0] + [int(i) for i in np.unique(seg) if i > 0]
    levels = np.array(
        [BACKGROUND_DEPTH] + [float(np.median(depth[seg == i])) for i in labels[1:]]
    )
    nearest = np.argmin(np.abs(depth.astype(np.float64)[..., None] - levels), axis=-1)
    reassigned = np.asarray(labels)[nearest]
    return float(np.mean(reassigned == seg))


@dataclass(frozen=True)
class MetricReport:
    n_samples: int
    absrel: Optional[float] = None
    delta1: Optional[float] = None
    miou: Optional[float] = None
    edge_f1: Optional[float] = None
    psnr: Optional[float] = None
    sq_rel: Optional[float] = None
    rmse: Optional[float] = None
    delta2: Optional[float] = None
    delta3: Optional[float] = None
    consistency: Optional[float] = None

    def values(self) -> Dict[str, float]:
        return {k: v for k, v in asdict(self).items() if v is not None and k != "n_samples"}

    def to_record(self, **labels: str) -> str:
        parts = [f"{k}={v}" for k, v in labels.items()]
        parts.append(f"n_samples={self.n_samples}")
        parts += [f"{k}={v:.6g}" for k, v in self.values().items()]
        return " ".join(parts)

    def check(self) -> List[str]:
        problems = []
        if self.absrel is not None and self.absrel < 0:
            problems.append(f"absrel {self.absrel} < 0")
        for name in ("delta1", "miou", "edge_f1", "delta2", "delta3", "consistency"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                problems.append(f"{name} {value} outside [0, 1]")
        return problems


def evaluate_sample(
    pred: MultiModalVideo, gt: MultiModalVideo, generated: Iterable[str]
) -> Dict[str, float]:
    """Scores the generated modalities of one prediction against exact ground truth."""
    generated = set(generated)
    scores: Dict[str, float] = {}
    if "depth" in generated:
        errors = depth_metrics(pred.depth, gt.depth)
        for name in ("absrel", "delta1", "sq_rel", "rmse", "delta2", "delta3"):
            scores[name] = getattr(errors, name)
    if "seg" in generated:
        scores["miou"] = seg_miou(pred.seg, gt.seg)
    if "edges" in generated:
        scores["edge_f1"] = edge_f1(pred.edges, gt.edges)
    if "rgb" in generated:
        scores["psnr"] = psnr(pred.rgb, gt.rgb)
    if {"depth", "seg"} <= generated:
        scores["consistency"] = consistency(pred.depth, pred.seg)
    return scores


def aggregate(per_sample: Sequence[Mapping[str, float]]) -> MetricReport:
    if not per_sample:
        raise MetricError("nothing to aggregate")
    keys = set(per_sample[0])
    means = {k: float(np.mean([s[k] for s in per_sample])) for k in keys}
    return MetricReport(n_samples=len(per_sample), **means)


def composite_score(report: MetricReport) -> float:
    parts = []
    if report.absrel is not None:
        parts.append(1.0 - min(report.absrel, 1.0))
    if report.miou is not None:
        parts.append(report.miou)
    if report.edge_f1 is not None:
        parts.append(report.edge_f1)
    if report.psnr is not None:
        parts.append(min(report.psnr, PSNR_CAP) / PSNR_CAP)
    if not parts:
        raise MetricError("report has no scored field")
    return float(np.mean(parts))


def format_table(rows: Mapping[str, MetricReport]) -> str:
    columns: List[str] = []
    for report in rows.values():
        columns += [k for k in report.values() if k not in columns]
    header = ["variant"] + columns + ["composite"]
    lines = [header]
    for label, report in rows.items():
        values = report.values()
        cells = [label] + [f"{values[c]:.4f}" if c in values else "-" for c in columns]
        cells.append(f"{composite_score(report):.4f}")
        lines.append(cells)
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(line, widths)) for line in lines)


class RunLog:
    """Append-only text log shared by worker threads."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    @synchronized
    def append(self, line: str):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a") as f:
            f.write(line.rstrip("\n") + "\n")

    def lines(self) -> List[str]:
        if not self.path.exists():
            return []
        return self.path.read_text().splitlines()
