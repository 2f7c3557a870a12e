"""Procedural phantom images: wires, electrode catheters and device patches.

Each phantom is a bright, lightly textured background carrying dark
smooth-spline wires (widths spanning the filter bank's object range),
one or two electrode catheters drawn from three templates (uniform
ten-electrode, four-electrode with an enlarged tip, and a two-spacing
pattern), and optionally a probe-like and a valve-like patch with exact
rotated-box labels. Patches are either blended in via the Poisson solver
or rendered analytically in place; labels are exact in both modes.

Generation is deterministic per seed; layout collisions retry with a
derived attempt index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .blending import AugmentParams, BlendJob, augment_patch, poisson_blend
from .geometry import RotatedBox, box_corners
from .detector import TrainSample

CLASS_PROBE = 0
CLASS_VALVE = 1
CLASS_ELECTRODE = 2

CATHETER_KINDS = ("decapolar", "ablation", "defibrillation")


class LayoutError(RuntimeError):
    pass


@dataclass
class PhantomConfig:
    height: int = 300
    width: int = 300
    noise_sigma: float = 0.02
    bg_low: float = 0.70
    bg_high: float = 0.85
    smooth_amp: float = 0.04
    wire_count: tuple = (1, 3)
    wire_width: tuple = (2.0, 10.0)
    wire_depth: tuple = (0.18, 0.32)
    catheter_count: tuple = (1, 2)
    catheter_kinds: tuple = CATHETER_KINDS
    electrode_spacing: tuple = (9.0, 14.0)
    electrode_size: tuple = (3.5, 5.5)
    electrode_depth: tuple = (0.35, 0.5)
    defib_gap_factor: float = 2.2
    probe_prob: float = 0.8
    valve_prob: float = 0.5
    device_mode: str = "pie"  # "pie" | "direct" | "none"
    margin_frac: float = 0.12
    electrode_separation: float = 48.0
    pixel_spacing_mm: float = 0.417
    max_layout_retries: int = 30


@dataclass
class Phantom:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    boxes: list  # [(class_id, RotatedBox)]
    points: list  # [(class_id, x, y, size)]
    catheters: list  # [(kind, [(x, y), ...])] ground-truth chains in order

    def train_sample(self):
        return TrainSample(image=self.image, boxes=self.boxes, points=self.points)


# ---------------------------------------------------------------------------
# primitive rendering
# ---------------------------------------------------------------------------

def _smooth_background(rng, h, w, base, amp):
    coarse = rng.standard_normal((6, 6))
    zoom = ndimage.zoom(coarse, (h / 6, w / 6), order=3)[:h, :w]
    zoom = zoom / max(np.abs(zoom).max(), 1e-9)
    return base + amp * zoom


def _bezier(rng, h, w, margin, min_len=80.0):
    """Gently curved quadratic spline polyline inside the margin box."""
    for _ in range(50):
        p0 = rng.uniform([margin, margin], [w - margin, h - margin])
        theta = rng.uniform(0, 2 * math.pi)
        length = rng.uniform(min_len, 0.8 * min(h, w))
        d = np.array([math.cos(theta), math.sin(theta)])
        perp = np.array([-d[1], d[0]])
        p2 = p0 + length * d
        p1 = p0 + 0.5 * length * d + rng.uniform(-0.18, 0.18) * length * perp
        if (
            margin <= p2[0] <= w - margin
            and margin <= p2[1] <= h - margin
            and margin <= p1[0] <= w - margin
            and margin <= p1[1] <= h - margin
        ):
            t = np.linspace(0.0, 1.0, 400)[:, None]
            pts = (1 - t) ** 2 * p0 + 2 * t * (1 - t) * p1 + t**2 * p2
            return pts
    raise LayoutError("could not sample a spline inside the margin box")


def _arclength(pts):
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _render_tube(canvas, pts, width, depth):
    """Darken the canvas along a polyline with a Gaussian cross-section."""
    h, w = canvas.shape
    mask = np.zeros((h, w), dtype=bool)
    ij = np.round(pts[:, ::-1]).astype(int)  # (y, x)
    ij[:, 0] = np.clip(ij[:, 0], 0, h - 1)
    ij[:, 1] = np.clip(ij[:, 1], 0, w - 1)
    mask[ij[:, 0], ij[:, 1]] = True
    dist = ndimage.distance_transform_edt(~mask)
    sigma = max(width / 3.0, 0.6)
    canvas -= depth * np.exp(-(dist**2) / (2.0 * sigma**2))


def _render_blob(canvas, x, y, size, depth):
    h, w = canvas.shape
    sigma = max(size / 3.0, 0.7)
    r = int(math.ceil(3 * sigma))
    x0, x1 = max(0, int(x) - r), min(w - 1, int(x) + r)
    y0, y1 = max(0, int(y) - r), min(h - 1, int(y) + r)
    xs = np.arange(x0, x1 + 1) - x
    ys = np.arange(y0, y1 + 1) - y
    g = np.exp(-(xs[None, :] ** 2 + ys[:, None] ** 2) / (2.0 * sigma**2))
    canvas[y0 : y1 + 1, x0 : x1 + 1] -= depth * g


def probe_delta(u, v, w, h, phase=0.0):
    """Signed intensity offset of the probe-like device in its own frame."""
    a, b = w / 2.0, h / 2.0
    r = np.abs(u / a) ** 4 + np.abs(v / b) ** 4
    edge = np.clip((1.0 - r) * 3.0, 0.0, 1.0)
    stripe = 0.22 * np.exp(-((v / (0.22 * h)) ** 2))
    ribs = 0.06 * np.cos(2.0 * math.pi * u / 7.0 + phase)
    return edge * (-0.48 + stripe + ribs)


def valve_delta(u, v, w, h, phase=0.0):
    """Signed intensity offset of the valve-like device (ring plus mesh)."""
    a, b = w / 2.0, h / 2.0
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    ring = np.exp(-(((rho - 0.8) / 0.16) ** 2))
    inside = np.clip((1.0 - rho) * 4.0, 0.0, 1.0)
    mesh = 0.14 * np.abs(np.cos(2 * math.pi * u / 6.0 + phase) * np.cos(2 * math.pi * v / 6.0))
    return -0.38 * ring - inside * mesh


_DEVICE_FNS = {CLASS_PROBE: probe_delta, CLASS_VALVE: valve_delta}


def render_device_direct(canvas, class_id, box, phase):
    """Analytically rasterize a rotated device into the canvas."""
    h, w = canvas.shape
    rad = math.radians(box.delta)
    c, s = math.cos(rad), math.sin(rad)
    half_diag = 0.5 * math.hypot(box.w, box.h) + 2
    x0, x1 = int(max(0, box.cx - half_diag)), int(min(w - 1, box.cx + half_diag))
    y0, y1 = int(max(0, box.cy - half_diag)), int(min(h - 1, box.cy + half_diag))
    xs = np.arange(x0, x1 + 1) - box.cx
    ys = np.arange(y0, y1 + 1) - box.cy
    X, Y = np.meshgrid(xs, ys)
    u = c * X + s * Y
    v = -s * X + c * Y
    canvas[y0 : y1 + 1, x0 : x1 + 1] += _DEVICE_FNS[class_id](u, v, box.w, box.h, phase)


def make_device_patch(rng, class_id, w, h):
    """Unrotated patch raster, blend mask and tight box for the PIE path."""
    pad = 14
    pw, ph = int(math.ceil(w)) + 2 * pad, int(math.ceil(h)) + 2 * pad
    cx, cy = (pw - 1) / 2.0, (ph - 1) / 2.0
    X, Y = np.meshgrid(np.arange(pw) - cx, np.arange(ph) - cy)
    phase = rng.uniform(0, 2 * math.pi)
    patch = 0.75 + 0.01 * rng.standard_normal((ph, pw))
    patch += _DEVICE_FNS[class_id](X, Y, w, h, phase)
    body = _DEVICE_FNS[class_id](X, Y, w, h, phase) < -0.02
    mask = ndimage.binary_dilation(body, iterations=4)
    mask[:2, :] = mask[-2:, :] = False
    mask[:, :2] = mask[:, -2:] = False
    box = RotatedBox(cx, cy, float(w), float(h), 0.0)
    return np.clip(patch, 0.0, 1.0), mask, box


# ---------------------------------------------------------------------------
# catheter templates
# ---------------------------------------------------------------------------

def catheter_gaps(rng, kind, cfg):
    spacing = rng.uniform(*cfg.electrode_spacing)
    base = rng.uniform(*cfg.electrode_size)
    if kind == "decapolar":
        return [spacing] * 9, [base] * 10
    if kind == "ablation":
        sizes = [base] * 4
        tip = base * rng.uniform(1.8, 2.4)
        if rng.random() < 0.5:
            sizes[0] = tip
        else:
            sizes[-1] = tip
        return [spacing * 1.2] * 3, sizes
    k = int(rng.integers(4, 6))
    gaps = [spacing] * (k - 1) + [spacing * cfg.defib_gap_factor] + [spacing] * (k - 1)
    return gaps, [base] * (2 * k)


def _place_catheter(rng, cfg, existing_points):
    h, w = cfg.height, cfg.width
    margin = cfg.margin_frac * min(h, w)
    kind = cfg.catheter_kinds[int(rng.integers(len(cfg.catheter_kinds)))]
    gaps, sizes = catheter_gaps(rng, kind, cfg)
    total = sum(gaps)
    for _ in range(cfg.max_layout_retries):
        pts = _bezier(rng, h, w, margin, min_len=total * 1.25)
        arc = _arclength(pts)
        if arc[-1] < total + 10:
            continue
        start = rng.uniform(2.0, arc[-1] - total - 2.0)
        targets = start + np.concatenate([[0.0], np.cumsum(gaps)])
        positions = np.stack(
            [np.interp(targets, arc, pts[:, 0]), np.interp(targets, arc, pts[:, 1])],
            axis=1,
        )
        ok = True
        for p in positions:
            if not (margin <= p[0] <= w - margin and margin <= p[1] <= h - margin):
                ok = False
                break
            for q in existing_points:
                if np.hypot(p[0] - q[0], p[1] - q[1]) < cfg.electrode_separation:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            return kind, gaps, sizes, positions, pts
    raise LayoutError(f"could not place a {kind} catheter")


# ---------------------------------------------------------------------------
# phantom assembly
# ---------------------------------------------------------------------------

def _sample_device_box(rng, cfg, class_id, keepout_points, keepout_boxes):
    h, w = cfg.height, cfg.width
    margin = cfg.margin_frac * min(h, w)
    if class_id == CLASS_PROBE:
        bw = rng.uniform(36.0, 58.0)
        bh = bw * rng.uniform(0.40, 0.55)
    else:
        bw = rng.uniform(26.0, 40.0)
        bh = bw * rng.uniform(0.60, 0.80)
    for _ in range(cfg.max_layout_retries):
        delta = rng.uniform(0.0, 90.0)
        box = RotatedBox(
            rng.uniform(margin + bw / 2, w - margin - bw / 2),
            rng.uniform(margin + bh / 2, h - margin - bh / 2),
            bw,
            bh,
            delta,
        )
        diag = 0.5 * math.hypot(bw, bh)
        corners = box_corners(box)
        if corners.min() < 4 or corners[:, 0].max() > w - 4 or corners[:, 1].max() > h - 4:
            continue
        clear = all(
            math.hypot(box.cx - px, box.cy - py) >= diag + 18.0
            for px, py in keepout_points
        ) and all(
            math.hypot(box.cx - ob.cx, box.cy - ob.cy)
            >= diag + 0.5 * math.hypot(ob.w, ob.h) + 14.0
            for ob in keepout_boxes
        )
        if clear:
            return box
    raise LayoutError(f"could not place device class {class_id}")


def _blend_device(canvas, rng, class_id, box, cfg):
    """Insert a device by Poisson blending; returns the exact label box."""
    patch, mask, patch_box = make_device_patch(rng, class_id, box.w, box.h)
    rotation = box.delta if rng.random() < 0.5 else box.delta - 90.0
    cropped, cmask, moved_box, _ = augment_patch(
        patch, mask, patch_box, AugmentParams(rotation, (0, 0)), min_crop=8
    )
    if not cmask.any() or cmask[0].any() or cmask[-1].any() or cmask[:, 0].any() or cmask[:, -1].any():
        raise LayoutError("device mask did not survive the inscribed crop")
    tx = int(round(box.cx - moved_box.cx))
    ty = int(round(box.cy - moved_box.cy))
    cropped2, cmask2, label_box, _ = augment_patch(
        patch, mask, patch_box, AugmentParams(rotation, (tx, ty)), min_crop=8
    )
    job = BlendJob(canvas, cropped2, cmask2, (tx, ty))
    out = poisson_blend(job, tol=1e-6, max_iters=4000)
    canvas[:] = out
    return label_box


def _build_phantom(rng, cfg):
    h, w = cfg.height, cfg.width
    canvas = _smooth_background(rng, h, w, rng.uniform(cfg.bg_low, cfg.bg_high), cfg.smooth_amp)
    margin = cfg.margin_frac * min(h, w)

    n_wires = int(rng.integers(cfg.wire_count[0], cfg.wire_count[1] + 1))
    for _ in range(n_wires):
        pts = _bezier(rng, h, w, margin)
        _render_tube(canvas, pts, rng.uniform(*cfg.wire_width), rng.uniform(*cfg.wire_depth))

    points = []
    catheters = []
    electrode_xy = []
    n_cath = int(rng.integers(cfg.catheter_count[0], cfg.catheter_count[1] + 1))
    for _ in range(n_cath):
        kind, gaps, sizes, positions, body = _place_catheter(rng, cfg, electrode_xy)
        _render_tube(canvas, body, rng.uniform(2.0, 3.2), rng.uniform(0.14, 0.22))
        depth = rng.uniform(*cfg.electrode_depth)
        chain = []
        for (x, y), size in zip(positions, sizes):
            _render_blob(canvas, x, y, size, depth)
            points.append((CLASS_ELECTRODE, float(x), float(y), float(size)))
            chain.append((float(x), float(y)))
            electrode_xy.append((x, y))
        catheters.append((kind, chain))

    boxes = []
    if cfg.device_mode != "none":
        for class_id, prob in ((CLASS_PROBE, cfg.probe_prob), (CLASS_VALVE, cfg.valve_prob)):
            if rng.random() >= prob:
                continue
            box = _sample_device_box(
                rng, cfg, class_id, electrode_xy, [b for _, b in boxes]
            )
            if cfg.device_mode == "pie":
                label = _blend_device(canvas, rng, class_id, box, cfg)
            else:
                render_device_direct(canvas, class_id, box, rng.uniform(0, 2 * math.pi))
                label = box
            boxes.append((class_id, label))

    canvas += cfg.noise_sigma * rng.standard_normal((h, w))
    image = np.clip(canvas, 0.0, 1.0).astype(np.float32)
    points = [
        (cid, float(np.float32(x)), float(np.float32(y)), float(np.float32(s)))
        for cid, x, y, s in points
    ]
    boxes = [
        (
            cid,
            RotatedBox(
                float(np.float32(b.cx)),
                float(np.float32(b.cy)),
                float(np.float32(b.w)),
                float(np.float32(b.h)),
                float(np.float32(min(max(b.delta, 0.0), 90.0))),
            ),
        )
        for cid, b in boxes
    ]
    return Phantom(image=image, boxes=boxes, points=points, catheters=catheters)


def phantom_generate(seed, config=None):
    """One deterministic phantom; layout collisions retry with a derived
    attempt index folded into the RNG seed."""
    cfg = config or PhantomConfig()
    last = None
    for attempt in range(8):
        rng = np.random.default_rng([0x9E3779B9, int(seed), attempt])
        try:
            return _build_phantom(rng, cfg)
        except LayoutError as exc:
            last = exc
    raise LayoutError(f"phantom {seed}: {last}")


def make_phantom_samples(count, seed, config=None):
    """List of Phantoms with seeds seed, seed+1, ..."""
    return [phantom_generate(seed + i, config) for i in range(count)]
