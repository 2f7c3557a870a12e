"""Rotated-rectangle data model and geometric machinery.

A RotatedBox is parameterized by center, size and an angle in [0, 90]
degrees measured from the x-axis to the w-edge; (w, h, 90) describes the
same rectangle as (h, w, 0). This module provides corner extraction,
exact rotated IoU via convex polygon clipping, the largest axis-aligned
crop inside a rotated rectangle (used when rotating image patches), the
swap-tolerant box regression loss, and rigid-transform label propagation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_CLIP_EPS = 1e-9
_AREA_SNAP = 1e-12


@dataclass(frozen=True)
class RotatedBox:
    cx: float
    cy: float
    w: float
    h: float
    delta: float  # degrees in [0, 90]

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")
        if not (0.0 <= self.delta <= 90.0):
            raise ValueError(f"angle must lie in [0, 90] degrees, got {self.delta}")

    def area(self):
        return self.w * self.h


@dataclass(frozen=True)
class ImageDims:
    W_img: int
    H_img: int

    def __post_init__(self):
        if self.W_img < 1 or self.H_img < 1:
            raise ValueError("image dims must be >= 1")


@dataclass(frozen=True)
class InscribedCrop:
    dx: float
    dy: float
    crop_w: float
    crop_h: float


def box_corners(box):
    """Corners of the rotated rectangle in counterclockwise order, (4,2)."""
    a = math.radians(box.delta)
    c, s = math.cos(a), math.sin(a)
    ux, uy = c * box.w / 2.0, s * box.w / 2.0
    vx, vy = -s * box.h / 2.0, c * box.h / 2.0
    cx, cy = box.cx, box.cy
    return np.array(
        [
            [cx + ux + vx, cy + uy + vy],
            [cx - ux + vx, cy - uy + vy],
            [cx - ux - vx, cy - uy - vy],
            [cx + ux - vx, cy + uy - vy],
        ]
    )


def _polygon_area(pts):
    if len(pts) < 3:
        return 0.0
    x = pts[:, 0]
    y = pts[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_halfplane(poly, a, b):
    """Keep the part of poly on the inner side of directed edge a->b.

    Inner side is the left of a->b for counterclockwise subject polygons.
    """
    ex, ey = b[0] - a[0], b[1] - a[1]
    out = []
    n = len(poly)
    for i in range(n):
        p = poly[i]
        q = poly[(i + 1) % n]
        dp = ex * (p[1] - a[1]) - ey * (p[0] - a[0])
        dq = ex * (q[1] - a[1]) - ey * (q[0] - a[0])
        pin = dp >= -_CLIP_EPS
        qin = dq >= -_CLIP_EPS
        if pin:
            out.append(p)
        if pin != qin:
            t = dp / (dp - dq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def _intersection_area(box_a, box_b):
    poly = [tuple(p) for p in box_corners(box_a)]
    clip = box_corners(box_b)
    for i in range(4):
        poly = _clip_halfplane(poly, clip[i], clip[(i + 1) % 4])
        if not poly:
            return 0.0
    return _polygon_area(np.asarray(poly))


def rotated_iou(a, b):
    """Exact intersection-over-union of two rotated boxes, in [0, 1]."""
    if a.area() <= 0 or b.area() <= 0:
        raise ValueError("degenerate zero-area box")
    # canonical operand order so iou(a,b) == iou(b,a) bit-for-bit
    ka = (a.cx, a.cy, a.w, a.h, a.delta)
    kb = (b.cx, b.cy, b.w, b.h, b.delta)
    first, second = (a, b) if ka <= kb else (b, a)
    inter = _intersection_area(first, second)
    if inter < _AREA_SNAP:
        inter = 0.0
    union = a.area() + b.area() - inter
    return inter / union


def inscribed_rect(w, h, alpha):
    """Largest axis-aligned rectangle, with the rotated bound's aspect ratio,
    inside a w x h rectangle rotated by alpha degrees.

    Returns offsets (dx, dy) from the rotated-bound corner and the crop size.
    The crop corners touch the rotated rectangle's edges.
    """
    if w <= 0 or h <= 0:
        raise ValueError("patch sides must be positive")
    if not (0.0 < alpha < 90.0):
        raise ValueError(f"alpha must lie strictly inside (0, 90), got {alpha}")
    a = math.radians(alpha)
    c, s = math.cos(a), math.sin(a)
    w_rot = w * c + h * s
    h_rot = w * s + h * c
    beta = math.atan(w_rot / h_rot)
    # corner-on-edge construction; the binding edge is the longer patch side,
    # so evaluate both side assignments and keep the tighter offsets
    bd_h = h * c * s / math.sin(a + beta)
    dx_h, dy_h = bd_h * math.sin(beta), bd_h * math.cos(beta)
    beta_t = math.atan(h_rot / w_rot)
    bd_w = w * c * s / math.sin(a + beta_t)
    dy_w, dx_w = bd_w * math.sin(beta_t), bd_w * math.cos(beta_t)
    dx, dy = max(dx_h, dx_w), max(dy_h, dy_w)
    return InscribedCrop(dx=dx, dy=dy, crop_w=w_rot - 2.0 * dx, crop_h=h_rot - 2.0 * dy)


def modulated_loss(pred, gt, dims):
    """Swap-tolerant five-parameter regression loss.

    Center and size terms are L1 normalized by the image extents; the angle
    term is L1 over 90 degrees. The two branches cover the (w,h,delta) vs
    (h,w,delta-90) ambiguity and the smaller one is returned.
    """
    for box in (pred, gt):
        if not (0.0 <= box.delta <= 90.0):
            raise ValueError("angles must lie in [0, 90] degrees")
    W, H = float(dims.W_img), float(dims.H_img)
    l_cp = abs(gt.cx - pred.cx) / W + abs(gt.cy - pred.cy) / H
    l1 = l_cp + abs(gt.w - pred.w) / W + abs(gt.h - pred.h) / H
    l2 = l_cp + abs(gt.w - pred.h) / W + abs(gt.h - pred.w) / H
    d_ang = abs(gt.delta - pred.delta)
    return min(l1 + d_ang / 90.0, l2 + abs(90.0 - d_ang) / 90.0)


def _is_rigid(affine, tol=1e-6):
    m = np.asarray(affine, dtype=float)
    if m.shape != (2, 3):
        raise ValueError(f"affine must be 2x3, got {m.shape}")
    r = m[:, :2]
    g = r.T @ r
    scale2 = 0.5 * (g[0, 0] + g[1, 1])
    if scale2 <= 0:
        return False
    return (
        abs(g[0, 1]) <= tol * scale2
        and abs(g[0, 0] - g[1, 1]) <= tol * scale2
    )


def transform_box(box, affine):
    """Apply a rotation+translation (optionally uniformly scaled) 2x3 affine
    to a box and refit center/size/angle with delta renormalized to [0, 90]."""
    if not _is_rigid(affine):
        raise ValueError("affine must be a rotation+translation (no shear or anisotropic scale)")
    m = np.asarray(affine, dtype=float)
    corners = box_corners(box)
    moved = corners @ m[:, :2].T + m[:, 2]
    center = moved.mean(axis=0)
    e_w = moved[0] - moved[1]  # transformed w-edge direction
    e_h = moved[1] - moved[2]
    w = float(np.hypot(*e_w))
    h = float(np.hypot(*e_h))
    ang = math.degrees(math.atan2(e_w[1], e_w[0])) % 180.0
    if ang > 90.0:
        ang -= 90.0
        w, h = h, w
    # endpoint snap: angles within float noise of 0/90 map into range
    ang = min(max(ang, 0.0), 90.0)
    return RotatedBox(cx=float(center[0]), cy=float(center[1]), w=w, h=h, delta=ang)


def rotation_about(angle_deg, center, translation=(0.0, 0.0)):
    """2x3 affine rotating by angle_deg about center, then translating."""
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    cx, cy = center
    tx, ty = translation
    return np.array(
        [
            [c, -s, cx - c * cx + s * cy + tx],
            [s, c, cy - s * cx - c * cy + ty],
        ]
    )
