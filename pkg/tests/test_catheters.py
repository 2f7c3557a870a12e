import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wiredet.catheters import (
    CatheterTrack,
    ClassifierConfig,
    Electrode,
    chain_electrodes,
    classify_catheter,
    extract_electrodes,
    identify_catheters,
    success_rate,
)
from wiredet.backbone import BackboneConfig
from wiredet.detector import DetectorConfig, RawOutputs, encode_targets
from wiredet import autodiff as ad


def elec(x, y, size=4.0, conf=0.9):
    return Electrode(float(x), float(y), float(size), float(conf))


def line_chain(n, spacing, size=4.0, start=(10.0, 10.0), direction=(1.0, 0.0)):
    dx, dy = direction
    norm = math.hypot(dx, dy)
    dx, dy = dx / norm, dy / norm
    return [
        elec(start[0] + i * spacing * dx, start[1] + i * spacing * dy, size)
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# pattern generators (shared with the accuracy property)
# ---------------------------------------------------------------------------

def synth_pattern(rng, kind, noise=0.0):
    """Electrode positions for one catheter template, with optional jitter."""
    spacing = rng.uniform(8.0, 14.0)
    start = rng.uniform(40.0, 260.0, size=2)
    ang = rng.uniform(0.0, 2 * math.pi)
    # gentle circular arc so inner angles stay near straight
    curv = rng.uniform(-0.01, 0.01)
    if kind == "decapolar":
        n, sizes, gaps = 10, [4.0] * 10, [spacing] * 9
    elif kind == "ablation":
        n = 4
        sizes = [8.0, 4.0, 4.0, 4.0] if rng.random() < 0.5 else [4.0, 4.0, 4.0, 8.0]
        gaps = [spacing * 1.2] * 3
    else:  # defibrillation: two tight groups separated by a long gap
        k = int(rng.integers(4, 6))
        n = 2 * k
        sizes = [4.0] * n
        gaps = [spacing] * (k - 1) + [spacing * 3.0] + [spacing] * (k - 1)
    pts = []
    theta = ang
    x, y = start
    pts.append((x, y))
    for g in gaps:
        theta += curv * g
        x += g * math.cos(theta)
        y += g * math.sin(theta)
        pts.append((x, y))
    pts = np.array(pts)
    if noise:
        pts = pts + rng.normal(0.0, noise, size=pts.shape)
    return [elec(p[0], p[1], s) for p, s in zip(pts, sizes)]


# ---------------------------------------------------------------------------
# chaining
# ---------------------------------------------------------------------------

def test_chain_collinear_points():
    pts = line_chain(10, 8.0)
    tracks = chain_electrodes(pts, gap=20.0)
    assert len(tracks) == 1
    xs = [e.x for e in tracks[0].electrodes]
    assert xs == sorted(xs) or xs == sorted(xs, reverse=True)
    assert len(tracks[0].electrodes) == 10


def test_chain_two_clusters():
    pts = line_chain(5, 8.0, start=(10, 10)) + line_chain(5, 8.0, start=(210, 210))
    tracks = chain_electrodes(pts, gap=20.0)
    assert sorted(len(t.electrodes) for t in tracks) == [5, 5]


def test_chain_isolated_point():
    pts = line_chain(4, 8.0, start=(10, 10)) + [elec(150.0, 10.0)]
    tracks = chain_electrodes(pts, gap=20.0)
    assert sorted(len(t.electrodes) for t in tracks) == [1, 4]


def test_chain_is_partition_never_branches():
    rng = np.random.default_rng(0)
    for _ in range(30):
        pts = [elec(x, y) for x, y in rng.uniform(0, 120, size=(15, 2))]
        tracks = chain_electrodes(pts, gap=30.0)
        seen = []
        for t in tracks:
            seen.extend(id(e) for e in t.electrodes)
        assert sorted(seen) == sorted(id(e) for e in pts)
        for t in tracks:
            d = t.adjacent_distances()
            assert np.all(d <= 30.0 + 1e-9)


def test_chain_rejects_bad_gap():
    with pytest.raises(ValueError):
        chain_electrodes([elec(0, 0)], gap=0.0)


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

def test_decapolar_rule():
    track = CatheterTrack(line_chain(10, 10.0))
    assert classify_catheter(track) == "decapolar"


def test_ablation_rule_tip_double():
    pts = line_chain(4, 12.0)
    pts[0] = elec(pts[0].x, pts[0].y, size=8.0)
    assert classify_catheter(CatheterTrack(pts)) == "ablation"


def test_two_electrodes_unknown():
    assert classify_catheter(CatheterTrack(line_chain(2, 10.0))) == "unknown"


def test_defibrillation_two_spacing_groups():
    rng = np.random.default_rng(1)
    pts = synth_pattern(rng, "defibrillation")
    assert classify_catheter(CatheterTrack(pts)) == "defibrillation"


def test_kinked_chain_rejected():
    pts = line_chain(5, 10.0) + [elec(50.0, 8.0)]  # sharp turn-back
    pts = line_chain(5, 10.0)
    pts.append(elec(pts[-1].x - 7.0, pts[-1].y + 7.0))  # ~45 degree kink
    track = CatheterTrack(pts)
    assert track.inner_angles().min() < 100.0
    assert classify_catheter(track) == "unknown"


def test_classification_invariant_under_reversal_and_rigid_motion():
    rng = np.random.default_rng(2)
    for kind in ("decapolar", "ablation", "defibrillation"):
        pts = synth_pattern(rng, kind)
        base = classify_catheter(CatheterTrack(pts))
        assert base == kind
        assert classify_catheter(CatheterTrack(pts[::-1])) == kind
        ang = rng.uniform(0, 2 * math.pi)
        c, s = math.cos(ang), math.sin(ang)
        moved = [
            elec(c * e.x - s * e.y + 31.0, s * e.x + c * e.y - 12.0, e.size)
            for e in pts
        ]
        assert classify_catheter(CatheterTrack(moved)) == kind


def test_classification_accuracy_under_noise():
    # >= 99% correct over 1000 noisy patterns (sigma = 0.5 px)
    rng = np.random.default_rng(3)
    kinds = ("decapolar", "ablation", "defibrillation")
    correct = 0
    total = 1000
    for i in range(total):
        kind = kinds[i % 3]
        pts = synth_pattern(rng, kind, noise=0.5)
        if classify_catheter(CatheterTrack(pts)) == kind:
            correct += 1
    assert correct / total >= 0.99


# ---------------------------------------------------------------------------
# extraction from raw outputs
# ---------------------------------------------------------------------------

def electrode_config():
    return DetectorConfig(
        input_resolution=(60, 60),
        backbone=BackboneConfig(random_channels=4, stage_widths=(6, 8),
                                input_resolution=(60, 60), max_half_width=3),
    )


def test_extract_electrodes_round_trip():
    cfg = electrode_config()
    points = [(2, 10.0 + 4.0 * i, 30.0, 4.0) for i in range(10)]
    gt = encode_targets([], points, cfg)
    out = RawOutputs(
        heatmaps=ad.Tensor(gt.heatmaps),
        size=ad.Tensor(gt.size),
        angle=ad.Tensor(gt.angle),
        offset=ad.Tensor(gt.offset),
    )
    got = extract_electrodes(out, cfg)
    assert len(got) == 10
    got_pts = sorted((e.x, e.y) for e in got)
    want = sorted((round(x), round(y)) for _, x, y, _ in points)
    assert [(round(x), round(y)) for x, y in got_pts] == want
    assert all(e.size == pytest.approx(4.0) for e in got)


def test_extract_empty_heatmap():
    cfg = electrode_config()
    gt = encode_targets([], [(2, 30.0, 30.0, 4.0)], cfg)
    out = RawOutputs(
        heatmaps=ad.Tensor(np.zeros_like(gt.heatmaps)),
        size=ad.Tensor(gt.size),
        angle=ad.Tensor(gt.angle),
        offset=ad.Tensor(gt.offset),
    )
    assert extract_electrodes(out, cfg) == []


# ---------------------------------------------------------------------------
# success rate
# ---------------------------------------------------------------------------

def test_success_all_within_threshold():
    truth = [CatheterTrack(line_chain(10, 10.0))]
    detected = [CatheterTrack([elec(e.x + 0.5, e.y, e.size) for e in truth[0].electrodes])]
    err_mm, rate = success_rate(detected, truth)
    assert rate == 1.0
    assert err_mm == pytest.approx(0.5 * 0.417, rel=1e-6)


def test_success_one_of_ten_fails():
    rng = np.random.default_rng(4)
    truth, detected = [], []
    for k in range(10):
        t = line_chain(4, 12.0, start=(20.0, 20.0 + 30.0 * k))
        truth.append(CatheterTrack(t))
        jitter = 3.0 / 0.417 if k == 0 else 0.3  # one catheter has a 3 mm miss
        d = [elec(e.x + (jitter if i == 0 else 0.3), e.y, e.size) for i, e in enumerate(t)]
        detected.append(CatheterTrack(d))
    _, rate = success_rate(detected, truth, threshold_mm=2.5, spacing_mm_per_px=0.417)
    assert rate == pytest.approx(0.9)


def test_threshold_is_about_six_pixels():
    assert 2.5 / 0.417 == pytest.approx(6.0, abs=0.01)


def test_success_monotone_in_threshold():
    rng = np.random.default_rng(5)
    truth, detected = [], []
    for k in range(8):
        t = line_chain(6, 10.0, start=(15.0, 15.0 + 25.0 * k))
        truth.append(CatheterTrack(t))
        d = [elec(e.x + rng.uniform(0, 4.0), e.y + rng.uniform(0, 2.0), e.size) for e in t]
        detected.append(CatheterTrack(d))
    rates = [
        success_rate(detected, truth, threshold_mm=th)[1]
        for th in (3.0, 2.5, 2.0, 1.5, 1.0, 0.5)
    ]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_success_requires_ground_truth():
    with pytest.raises(ValueError):
        success_rate([], [])


def test_missing_catheter_counts_as_failure():
    truth = [CatheterTrack(line_chain(4, 10.0)), CatheterTrack(line_chain(4, 10.0, start=(100, 100)))]
    detected = [CatheterTrack([elec(e.x, e.y, e.size) for e in truth[0].electrodes])]
    _, rate = success_rate(detected, truth)
    assert rate == pytest.approx(0.5)


@given(st.integers(3, 12), st.floats(6.0, 15.0))
@settings(max_examples=50, deadline=None)
def test_chain_partition_property(n, spacing):
    pts = line_chain(n, spacing)
    tracks = chain_electrodes(pts, gap=spacing * 1.5)
    assert sum(len(t.electrodes) for t in tracks) == n
    assert len(tracks) == 1
