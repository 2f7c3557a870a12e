"""Detection metrics: rotated-box average precision, IoU statistics and
electrode localization error.

AP follows the all-point interpolation convention. A detection matches an
unmatched ground-truth box of the same image when their rotated IoU
strictly exceeds the threshold; the sweep runs thresholds 0.50 to 0.95 in
steps of 0.05 and mAP is their mean. Matching is greedy in descending
confidence with stable tie order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import rotated_iou

MAP_THRESHOLDS = tuple(t / 100.0 for t in range(50, 100, 5))

ELECTRODE_MATCH_CAP_PX = 12.0


def average_precision(detections, truths, iou_threshold):
    """Area under the interpolated precision-recall curve.

    detections: [(image_id, confidence, RotatedBox)], truths:
    [(image_id, RotatedBox)]. Matching is one-to-one, greedy by confidence,
    and requires IoU strictly above iou_threshold.
    """
    if not truths:
        raise ValueError("average precision needs at least one ground-truth box")
    n_truth = len(truths)
    if not detections:
        return 0.0
    truth_by_image = {}
    for t_idx, (img, box) in enumerate(truths):
        truth_by_image.setdefault(img, []).append((t_idx, box))
    order = sorted(range(len(detections)), key=lambda i: -detections[i][1])
    matched = set()
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        img, _, box = detections[i]
        best_iou, best_t = 0.0, None
        for t_idx, t_box in truth_by_image.get(img, ()):
            if t_idx in matched:
                continue
            iou = rotated_iou(box, t_box)
            if iou > iou_threshold and iou > best_iou:
                best_iou, best_t = iou, t_idx
        if best_t is not None:
            matched.add(best_t)
            tp[rank] = 1.0
    fp = 1.0 - tp
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / n_truth
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    # all-point interpolation: running max of precision from the right
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def ap_sweep(detections, truths):
    """AP at each mAP threshold; returns {threshold: AP}."""
    return {t: average_precision(detections, truths, t) for t in MAP_THRESHOLDS}


def mean_ap(detections, truths):
    """(mAP, AP50, AP75) over the standard threshold sweep."""
    sweep = ap_sweep(detections, truths)
    return (
        float(np.mean(list(sweep.values()))),
        sweep[0.50],
        sweep[0.75],
    )


def multiclass_ap(detections_by_class, truths_by_class):
    """Mean AP metrics across classes that have ground truth.

    Inputs are dicts class_id -> detection / truth lists. Returns
    (mAP, AP50, AP75, per_class_sweeps).
    """
    sweeps = {}
    for cid, truths in truths_by_class.items():
        if not truths:
            continue
        sweeps[cid] = ap_sweep(detections_by_class.get(cid, []), truths)
    if not sweeps:
        raise ValueError("no ground truth in any class")
    ap50 = float(np.mean([s[0.50] for s in sweeps.values()]))
    ap75 = float(np.mean([s[0.75] for s in sweeps.values()]))
    m = float(np.mean([np.mean(list(s.values())) for s in sweeps.values()]))
    return m, ap50, ap75, sweeps


def matched_ious(detections, truths, iou_threshold=0.5):
    """IoUs of greedily matched detection/truth pairs (same rule as AP)."""
    truth_by_image = {}
    for t_idx, (img, box) in enumerate(truths):
        truth_by_image.setdefault(img, []).append((t_idx, box))
    order = sorted(range(len(detections)), key=lambda i: -detections[i][1])
    matched = set()
    ious = []
    for i in order:
        img, _, box = detections[i]
        best_iou, best_t = 0.0, None
        for t_idx, t_box in truth_by_image.get(img, ()):
            if t_idx in matched:
                continue
            iou = rotated_iou(box, t_box)
            if iou > iou_threshold and iou > best_iou:
                best_iou, best_t = iou, t_idx
        if best_t is not None:
            matched.add(best_t)
            ious.append(best_iou)
    return ious


def electrode_error(detected, truth_points, spacing_mm_per_px,
                    cap_px=ELECTRODE_MATCH_CAP_PX):
    """Localization error of matched electrodes.

    detected: objects with .x/.y (or (x, y) pairs); truth_points: (x, y)
    pairs. One-to-one nearest matching within cap_px; spurious detections
    count as false positives and are excluded from the mean. Returns
    (mean_px, std_px, mean_mm, std_mm, n_matched, n_false_positive).
    """
    det = np.array(
        [(d.x, d.y) if hasattr(d, "x") else (d[0], d[1]) for d in detected],
        dtype=float,
    ).reshape(-1, 2)
    truth = np.asarray(truth_points, dtype=float).reshape(-1, 2)
    if len(truth) == 0 or len(det) == 0:
        raise ValueError("electrode error needs detections and ground truth")
    d = np.linalg.norm(truth[:, None, :] - det[None, :, :], axis=2)
    pairs = [(d[i, j], i, j) for i in range(len(truth)) for j in range(len(det))]
    pairs.sort()
    used_t, used_d = set(), set()
    errors = []
    for dist, i, j in pairs:
        if dist > cap_px:
            break
        if i in used_t or j in used_d:
            continue
        used_t.add(i)
        used_d.add(j)
        errors.append(dist)
    if not errors:
        raise ValueError(f"no electrode matches within {cap_px} px")
    errors = np.array(errors)
    n_fp = len(det) - len(errors)
    return (
        float(errors.mean()),
        float(errors.std()),
        float(errors.mean() * spacing_mm_per_px),
        float(errors.std() * spacing_mm_per_px),
        len(errors),
        n_fp,
    )


@dataclass
class EvalReport:
    per_class_iou: dict  # class_id -> (mean, std, count)
    ap_per_threshold: dict  # threshold -> AP (class-averaged)
    map_value: float
    ap50: float
    ap75: float
    electrode_mean_px: float | None = None
    electrode_std_px: float | None = None
    electrode_mean_mm: float | None = None
    electrode_std_mm: float | None = None
    catheter_success: dict = field(default_factory=dict)  # kind -> (err_mm, rate)
    counts: dict = field(default_factory=dict)

    def to_text(self):
        lines = ["evaluation report", "=" * 40]
        for cid, (m, s, n) in sorted(self.per_class_iou.items()):
            lines.append(f"class {cid} IoU: {m:.3f} +/- {s:.3f}  (n={n})")
        lines.append(f"mAP: {self.map_value:.3f}  AP50: {self.ap50:.3f}  AP75: {self.ap75:.3f}")
        if self.electrode_mean_px is not None:
            lines.append(
                f"electrodes: {self.electrode_mean_px:.2f} +/- {self.electrode_std_px:.2f} px"
                f"  ({self.electrode_mean_mm:.2f} +/- {self.electrode_std_mm:.2f} mm)"
            )
        for kind, (err, rate) in sorted(self.catheter_success.items()):
            err_txt = f"{err:.2f} mm" if np.isfinite(err) else "n/a"
            lines.append(f"catheter {kind}: error {err_txt}, success rate {rate:.1%}")
        for k, v in sorted(self.counts.items()):
            lines.append(f"count {k}: {v}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        rows = ["metric,value"]
        for cid, (m, s, n) in sorted(self.per_class_iou.items()):
            rows.append(f"iou_mean_class{cid},{m:.6f}")
            rows.append(f"iou_std_class{cid},{s:.6f}")
        for t, ap in sorted(self.ap_per_threshold.items()):
            rows.append(f"ap_{int(round(t * 100))},{ap:.6f}")
        rows.append(f"map,{self.map_value:.6f}")
        if self.electrode_mean_px is not None:
            rows.append(f"electrode_mean_px,{self.electrode_mean_px:.6f}")
            rows.append(f"electrode_std_px,{self.electrode_std_px:.6f}")
            rows.append(f"electrode_mean_mm,{self.electrode_mean_mm:.6f}")
            rows.append(f"electrode_std_mm,{self.electrode_std_mm:.6f}")
        for kind, (err, rate) in sorted(self.catheter_success.items()):
            rows.append(f"catheter_{kind}_error_mm,{err:.6f}")
            rows.append(f"catheter_{kind}_success,{rate:.6f}")
        for k, v in sorted(self.counts.items()):
            rows.append(f"count_{k},{v}")
        return "\n".join(rows) + "\n"
