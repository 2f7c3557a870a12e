import numpy as np
import pytest

from wiredet.geometry import RotatedBox
from wiredet.metrics import (
    MAP_THRESHOLDS,
    average_precision,
    electrode_error,
    mean_ap,
    multiclass_ap,
)


def box_at(x, w=2.0, h=2.0):
    return RotatedBox(x, 0.0, w, h, 0.0)


def test_thresholds_are_the_exact_sweep():
    np.testing.assert_allclose(
        MAP_THRESHOLDS,
        [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95],
        atol=1e-12,
    )


def test_perfect_detector_ap_one():
    truths = [(i, box_at(3.0 * i)) for i in range(5)]
    dets = [(i, 0.9, box_at(3.0 * i)) for i in range(5)]
    assert average_precision(dets, truths, 0.5) == 1.0
    m, ap50, ap75 = mean_ap(dets, truths)
    assert (m, ap50, ap75) == (1.0, 1.0, 1.0)


def test_zero_detections_ap_zero():
    truths = [(0, box_at(0.0))]
    assert average_precision([], truths, 0.5) == 0.0


def test_ap_requires_ground_truth():
    with pytest.raises(ValueError):
        average_precision([(0, 0.9, box_at(0.0))], [], 0.5)


def test_ap_hand_computed_fixture():
    # 4 truths; 5 detections ordered by confidence: TP FP TP TP FP.
    # precisions at the TP ranks: 1/1, 2/3, 3/4; recalls 0.25, 0.5, 0.75.
    # all-point AP = 0.25*1 + 0.25*0.75 + 0.25*0.75 = 0.625
    truths = [(i, box_at(10.0 * i)) for i in range(4)]
    dets = [
        (0, 0.95, box_at(0.1)),   # TP on truth 0
        (0, 0.90, box_at(5.0)),   # FP (no overlap)
        (1, 0.85, box_at(10.1)),  # TP on truth 1
        (2, 0.80, box_at(20.1)),  # TP
        (1, 0.75, box_at(15.0)),  # FP
    ]
    assert average_precision(dets, truths, 0.5) == pytest.approx(0.625, abs=1e-12)


def test_map_all_iou_point_six():
    # 2x2 boxes shifted by 0.5: inter 1.5*2 = 3, union 8-3 = 5, IoU = 0.6.
    # Exactly 0.6 passes thresholds 0.50 and 0.55 only -> mAP = 2/10 = 0.2
    truths = [(i, box_at(0.0)) for i in range(3)]
    dets = [(i, 0.9, box_at(0.5)) for i in range(3)]
    m, ap50, ap75 = mean_ap(dets, truths)
    assert ap50 == 1.0
    assert ap75 == 0.0
    assert m == pytest.approx(0.2, abs=1e-12)


def test_ap_invariant_under_monotone_confidence_rescale():
    rng = np.random.default_rng(0)
    truths = [(i, box_at(5.0 * i)) for i in range(6)]
    dets = []
    for i in range(6):
        shift = rng.uniform(0, 1.5)
        dets.append((i, rng.uniform(0.3, 0.9), box_at(5.0 * i + shift)))
    base = mean_ap(dets, truths)
    rescaled = [(img, 0.1 + 0.5 * conf**2, b) for img, conf, b in dets]
    assert mean_ap(rescaled, truths) == base


def test_map_never_exceeds_ap50():
    rng = np.random.default_rng(1)
    truths = [(i, box_at(5.0 * i)) for i in range(8)]
    dets = [
        (i, rng.uniform(0.2, 1.0), box_at(5.0 * i + rng.uniform(0, 1.2)))
        for i in range(8)
    ]
    m, ap50, _ = mean_ap(dets, truths)
    assert m <= ap50 + 1e-12


def test_multiclass_averages_classes():
    truths = {0: [(0, box_at(0.0))], 1: [(0, box_at(10.0))]}
    dets = {0: [(0, 0.9, box_at(0.0))], 1: []}
    m, ap50, ap75, sweeps = multiclass_ap(dets, truths)
    assert ap50 == pytest.approx(0.5)
    assert set(sweeps) == {0, 1}


def test_electrode_error_exact_match():
    class P:
        def __init__(self, x, y):
            self.x, self.y = x, y

    pts = [(10.0, 10.0), (20.0, 10.0)]
    out = electrode_error([P(*p) for p in pts], pts, 0.417)
    assert out[:4] == (0.0, 0.0, 0.0, 0.0)
    assert out[4] == 2 and out[5] == 0


def test_electrode_error_single_pair():
    mean_px, std_px, mean_mm, std_mm, n, fp = electrode_error(
        [(13.0, 10.0)], [(10.0, 10.0)], 0.417
    )
    assert mean_px == pytest.approx(3.0)
    assert std_px == 0.0
    assert mean_mm == pytest.approx(1.251)
    assert n == 1 and fp == 0


def test_electrode_error_spurious_excluded():
    pts = [(10.0, 10.0)]
    dets = [(10.5, 10.0), (200.0, 200.0)]
    mean_px, _, _, _, n, fp = electrode_error(dets, pts, 0.417)
    assert mean_px == pytest.approx(0.5)
    assert n == 1 and fp == 1


def test_electrode_error_rejects_empty():
    with pytest.raises(ValueError):
        electrode_error([], [(0.0, 0.0)], 0.417)
    with pytest.raises(ValueError):
        electrode_error([(100.0, 100.0)], [(0.0, 0.0)], 0.417)  # beyond 12 px cap
