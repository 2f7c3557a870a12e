"""Electrode chaining and catheter identification.

Detected electrode points are linked into non-branching chains by greedy
shortest-edge growth, then each chain is classified from its electrode
pattern: count, adjacent spacing statistics, inner angles and tip size.
The concrete thresholds live in ClassifierConfig; they reconstruct the
named features rather than any published rule set, and are deliberately
exposed as configuration.

``success_rate`` scores identified catheters against labeled ones: a
catheter fails when any of its electrodes misses by more than the
threshold (2.5 mm at the default 0.417 mm/px is about six pixels).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .detector import decode_detections

KINDS = ("ablation", "decapolar", "defibrillation", "unknown")


@dataclass
class Electrode:
    x: float
    y: float
    size: float
    confidence: float


@dataclass
class CatheterTrack:
    electrodes: list  # ordered along the chain
    kind: str = "unknown"

    @property
    def points(self):
        return np.array([(e.x, e.y) for e in self.electrodes])

    def adjacent_distances(self):
        pts = self.points
        return np.linalg.norm(np.diff(pts, axis=0), axis=1)

    def inner_angles(self):
        """Angle at each interior electrode, degrees; 180 means straight."""
        pts = self.points
        if len(pts) < 3:
            return np.array([])
        v1 = pts[:-2] - pts[1:-1]
        v2 = pts[2:] - pts[1:-1]
        dots = (v1 * v2).sum(axis=1)
        norms = np.linalg.norm(v1, axis=1) * np.linalg.norm(v2, axis=1)
        cosines = np.clip(dots / np.maximum(norms, 1e-12), -1.0, 1.0)
        return np.degrees(np.arccos(cosines))


@dataclass
class ClassifierConfig:
    chain_gap: float = 24.0  # px, max link distance
    spacing_uniformity: float = 0.45  # (max-min)/mean ceiling for uniform chains
    tip_ratio: float = 1.5  # tip size over mean of the others
    two_group_ratio: float = 1.8  # large/small spacing-group separation
    min_inner_angle: float = 100.0  # degrees, straightness floor
    decapolar_count: int = 10
    ablation_count: int = 4
    defib_min_count: int = 8


def extract_electrodes(out, config, threshold=0.5):
    """Electrode detections from the multi-instance heatmap channels."""
    roles = config.class_roles
    electrodes = []
    for det in decode_detections(out, config, threshold=threshold):
        if roles[det.class_id] == "multi":
            electrodes.append(
                Electrode(det.point[0], det.point[1], det.size, det.confidence)
            )
    return electrodes


def chain_electrodes(points, gap):
    """Partition electrodes into non-branching chains.

    Edges are considered shortest-first; an edge joins two electrodes when
    both still have chain degree < 2, it does not close a cycle, and its
    length is within gap. Every electrode lands in exactly one chain.
    """
    if gap <= 0:
        raise ValueError("gap must be positive")
    n = len(points)
    if n == 0:
        return []
    coords = np.array([(e.x, e.y) for e in points])
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            d = float(np.hypot(*(coords[i] - coords[j])))
            if d <= gap:
                edges.append((d, i, j))
    edges.sort()
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    degree = [0] * n
    adj = [[] for _ in range(n)]
    for d, i, j in edges:
        if degree[i] >= 2 or degree[j] >= 2:
            continue
        ri, rj = find(i), find(j)
        if ri == rj:
            continue
        parent[ri] = rj
        degree[i] += 1
        degree[j] += 1
        adj[i].append(j)
        adj[j].append(i)

    visited = [False] * n
    tracks = []
    # walk each chain from an endpoint (or the singleton itself)
    for start in range(n):
        if visited[start] or degree[start] > 1:
            continue
        order = [start]
        visited[start] = True
        cur, prev = start, -1
        while True:
            nxt = [k for k in adj[cur] if k != prev]
            if not nxt:
                break
            prev, cur = cur, nxt[0]
            order.append(cur)
            visited[cur] = True
        tracks.append(CatheterTrack([points[k] for k in order]))
    return tracks


def classify_catheter(track, cfg=None):
    """Pattern rules over a chained track; returns one of KINDS.

    Any positive call requires all inner angles above the straightness
    floor. Rules: uniform 10-chain is decapolar; 4-chain with an enlarged
    end electrode is ablation; a long chain with two well-separated
    spacing groups is defibrillation.
    """
    cfg = cfg or ClassifierConfig()
    n = len(track.electrodes)
    if n < 2:
        return "unknown"
    angles = track.inner_angles()
    if len(angles) and angles.min() < cfg.min_inner_angle:
        return "unknown"
    dists = track.adjacent_distances()
    mean_d = float(dists.mean())
    if mean_d <= 0:
        return "unknown"
    uniformity = float((dists.max() - dists.min()) / mean_d)
    if n == cfg.decapolar_count and uniformity <= cfg.spacing_uniformity:
        return "decapolar"
    if n == cfg.ablation_count:
        sizes = np.array([e.size for e in track.electrodes])
        tip = max(sizes[0], sizes[-1])
        others = sizes[sizes != tip] if (sizes != tip).any() else sizes
        if tip >= cfg.tip_ratio * float(np.mean(others)):
            return "ablation"
    if n >= cfg.defib_min_count:
        srt = np.sort(dists)
        jumps = srt[1:] / np.maximum(srt[:-1], 1e-12)
        k = int(np.argmax(jumps))
        small, large = srt[: k + 1], srt[k + 1 :]
        if len(large) and float(large.mean()) >= cfg.two_group_ratio * float(small.mean()):
            return "defibrillation"
    return "unknown"


def identify_catheters(electrodes, cfg=None):
    """Chain then classify; returns CatheterTrack list with kinds set."""
    cfg = cfg or ClassifierConfig()
    tracks = chain_electrodes(electrodes, cfg.chain_gap)
    for t in tracks:
        t.kind = classify_catheter(t, cfg)
    return tracks


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def _match_electrodes(det_pts, truth_pts):
    """Greedy one-to-one nearest pairing; returns per-truth distances
    (inf for unmatched truths)."""
    if len(det_pts) == 0:
        return np.full(len(truth_pts), np.inf)
    d = np.linalg.norm(truth_pts[:, None, :] - det_pts[None, :, :], axis=2)
    dists = np.full(len(truth_pts), np.inf)
    flat = [(d[i, j], i, j) for i in range(d.shape[0]) for j in range(d.shape[1])]
    flat.sort()
    used_t, used_d = set(), set()
    for dist, i, j in flat:
        if i in used_t or j in used_d:
            continue
        used_t.add(i)
        used_d.add(j)
        dists[i] = dist
    return dists


def success_rate(detected, truth, threshold_mm=2.5, spacing_mm_per_px=0.417):
    """Score detected catheter tracks against labeled ones.

    truth: list of CatheterTrack (or electrode-list) ground-truth chains.
    A truth catheter fails when unmatched or when any of its electrodes
    sits farther than threshold_mm from its paired detection. Returns
    (mean_error_mm, rate) with the error averaged over matched electrodes.
    """
    if spacing_mm_per_px <= 0:
        raise ValueError("pixel spacing must be positive")
    if not truth:
        raise ValueError("no ground-truth catheters to score against")
    det_tracks = list(detected)
    pairs = []
    for ti, t in enumerate(truth):
        t_pts = t.points if isinstance(t, CatheterTrack) else np.asarray(t, dtype=float)
        for di, dtk in enumerate(det_tracks):
            d_pts = dtk.points
            cost = _match_electrodes(d_pts, t_pts)
            finite = cost[np.isfinite(cost)]
            mean_cost = finite.mean() if len(finite) else np.inf
            pairs.append((mean_cost, ti, di))
    pairs.sort(key=lambda p: (p[0], p[1], p[2]))
    assigned_t, assigned_d = {}, set()
    for cost, ti, di in pairs:
        if ti in assigned_t or di in assigned_d or not np.isfinite(cost):
            continue
        assigned_t[ti] = di
        assigned_d.add(di)

    threshold_px = threshold_mm / spacing_mm_per_px
    failures = 0
    errors_px = []
    for ti, t in enumerate(truth):
        t_pts = t.points if isinstance(t, CatheterTrack) else np.asarray(t, dtype=float)
        if ti not in assigned_t:
            failures += 1
            continue
        d_pts = det_tracks[assigned_t[ti]].points
        dists = _match_electrodes(d_pts, t_pts)
        if not np.all(np.isfinite(dists)) or dists.max() > threshold_px:
            failures += 1
        errors_px.extend(dists[np.isfinite(dists)].tolist())
    rate = 1.0 - failures / len(truth)
    mean_err_mm = float(np.mean(errors_px)) * spacing_mm_per_px if errors_px else math.inf
    return mean_err_mm, rate
