"""Gradient-domain patch blending and constrained augmentation.

A patch is inserted into a destination image by solving the discrete
Poisson equation over the masked region: interior pixels match the patch
gradients while the region boundary is pinned to the destination. The
linear system is symmetric positive definite and is solved by conjugate
gradient with Jacobi preconditioning. ``laplacian_residual`` re-evaluates
the stencil equations from scratch and serves as the independent check on
any blend result.

``augment_patch`` rotates a patch, crops it to the largest same-aspect
inscribed rectangle, shifts it to its placement origin, and propagates a
rotated-box label through the identical affine. ``synth_dataset`` chains
the two into a seeded synthetic-image generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .geometry import inscribed_rect, rotation_about, transform_box

_N4 = ((-1, 0), (1, 0), (0, -1), (0, 1))


class ConvergenceError(RuntimeError):
    def __init__(self, iterations, residual, tol):
        self.iterations = iterations
        self.residual = residual
        self.tol = tol
        super().__init__(
            f"conjugate gradient did not converge in {iterations} iterations: "
            f"residual {residual:.3e} > tol {tol:.3e}"
        )


class AugmentError(ValueError):
    """Sampled augmentation parameters produced an unusable patch."""


@dataclass
class BlendJob:
    destination: np.ndarray  # (H, W) float
    patch: np.ndarray  # (h, w) float
    mask: np.ndarray  # (h, w) bool, the blend region
    origin: tuple  # (x0, y0) pixel where patch (0,0) lands in destination

    def __post_init__(self):
        self.destination = np.asarray(self.destination, dtype=np.float64)
        self.patch = np.asarray(self.patch, dtype=np.float64)
        self.mask = np.asarray(self.mask).astype(bool)
        if self.mask.shape != self.patch.shape:
            raise ValueError("mask and patch shapes differ")
        if not self.mask.any():
            raise ValueError("empty blend mask")
        if (
            self.mask[0, :].any()
            or self.mask[-1, :].any()
            or self.mask[:, 0].any()
            or self.mask[:, -1].any()
        ):
            raise ValueError("mask touches the patch border; boundary ring undefined")
        x0, y0 = self.origin
        ys, xs = np.nonzero(self.mask)
        H, W = self.destination.shape
        if (
            y0 + ys.min() - 1 < 0
            or x0 + xs.min() - 1 < 0
            or y0 + ys.max() + 1 >= H
            or x0 + xs.max() + 1 >= W
        ):
            raise ValueError("placed blend region leaves destination bounds")


def _region_system(job):
    """Index map, Laplacian matrix and right-hand side for the masked region."""
    mask = job.mask
    ys, xs = np.nonzero(mask)
    n = len(ys)
    index = -np.ones(mask.shape, dtype=np.int64)
    index[ys, xs] = np.arange(n)
    patch = job.patch
    x0, y0 = job.origin

    b = 4.0 * patch[ys, xs]
    rows, cols, vals = [np.arange(n)], [np.arange(n)], [np.full(n, 4.0)]
    for dy, dx in _N4:
        qy, qx = ys + dy, xs + dx
        b -= patch[qy, qx]
        q_idx = index[qy, qx]
        inside = q_idx >= 0
        rows.append(np.arange(n)[inside])
        cols.append(q_idx[inside])
        vals.append(np.full(inside.sum(), -1.0))
        outside = ~inside
        b[outside] += job.destination[y0 + qy[outside], x0 + qx[outside]]
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    return ys, xs, A, b


def poisson_blend(job, tol=1e-6, max_iters=None):
    """Blend job.patch into job.destination over job.mask.

    Solves the masked Poisson system by Jacobi-preconditioned conjugate
    gradient until both the relative l2 residual and the max-abs residual
    drop below tol. Pixels outside the mask are returned bit-identical to
    the destination. Raises ConvergenceError when max_iters runs out.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    ys, xs, A, b = _region_system(job)
    n = len(ys)
    if max_iters is None:
        max_iters = max(1, int(10 * math.sqrt(n)))
    x0c, y0c = job.origin
    x = job.destination[y0c + ys, x0c + xs].copy()  # warm start from destination
    r = b - A @ x
    norm_b = float(np.linalg.norm(b)) or 1.0
    z = r / 4.0
    p = z.copy()
    rz = float(r @ z)
    converged = False
    for _ in range(max_iters):
        if np.linalg.norm(r) <= tol * norm_b and np.abs(r).max() <= tol:
            converged = True
            break
        Ap = A @ p
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        z = r / 4.0
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    else:
        converged = np.linalg.norm(r) <= tol * norm_b and np.abs(r).max() <= tol
    if not converged:
        raise ConvergenceError(max_iters, float(np.abs(r).max()), tol)
    out = job.destination.copy()
    out[y0c + ys, x0c + xs] = x
    return out


def laplacian_residual(result, job):
    """Max-abs residual of the discrete blend equations on a result image.

    Evaluated directly from the job definition, independent of the solver.
    """
    result = np.asarray(result, dtype=np.float64)
    if result.shape != job.destination.shape:
        raise ValueError("result shape must match destination")
    mask = job.mask
    ys, xs = np.nonzero(mask)
    x0, y0 = job.origin
    res = 4.0 * result[y0 + ys, x0 + xs]
    rhs = 4.0 * job.patch[ys, xs]
    for dy, dx in _N4:
        qy, qx = ys + dy, xs + dx
        rhs -= job.patch[qy, qx]
        q_in = mask[qy, qx]
        res[q_in] -= result[y0 + qy[q_in], x0 + qx[q_in]]
        q_out = ~q_in
        rhs[q_out] += job.destination[y0 + qy[q_out], x0 + qx[q_out]]
    return float(np.abs(res - rhs).max())


@dataclass
class AugmentParams:
    rotation: float  # degrees
    translation: tuple  # (tx, ty): destination pixel of the cropped patch origin


@dataclass
class AugmentRanges:
    rotation: tuple = (-30.0, 30.0)
    margin_frac: float = 0.2  # placement confined to the central region
    min_crop: int = 10
    max_retries: int = 100


def _fold_angle(rotation):
    a = abs(rotation) % 180.0
    return 180.0 - a if a > 90.0 else a


def augment_patch(patch, mask, box, params, min_crop=4):
    """Rotate, inscribed-crop and translate a patch with its label.

    Returns (patch', mask', box', affine) where box' and the 2x3 affine are
    in destination coordinates (the caller blends patch' at
    params.translation). Zero rotation is an exact identity apart from the
    translation. Raises AugmentError when the crop falls below min_crop.
    """
    patch = np.asarray(patch, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    tx, ty = (int(params.translation[0]), int(params.translation[1]))
    theta = float(params.rotation)
    alpha = _fold_angle(theta)
    ph, pw = patch.shape
    if alpha < 1e-9:
        affine = np.array([[1.0, 0.0, float(tx)], [0.0, 1.0, float(ty)]])
        return patch.copy(), mask.copy(), transform_box(box, affine), affine

    crop = inscribed_rect(float(pw), float(ph), alpha)
    a = math.radians(alpha)
    w_rot = pw * math.cos(a) + ph * math.sin(a)
    h_rot = pw * math.sin(a) + ph * math.cos(a)
    bw, bh = int(math.ceil(w_rot)), int(math.ceil(h_rot))
    c_p = ((pw - 1) / 2.0, (ph - 1) / 2.0)
    c_b = ((bw - 1) / 2.0, (bh - 1) / 2.0)

    rad = math.radians(theta)
    c, s = math.cos(rad), math.sin(rad)
    # inverse map (canvas -> patch), in (row, col) order for ndimage
    inv = np.array([[c, s], [-s, c]])
    offset = np.array([c_p[1], c_p[0]]) - inv @ np.array([c_b[1], c_b[0]])
    rotated = ndimage.affine_transform(
        patch, inv, offset=offset, output_shape=(bh, bw), order=1, mode="nearest"
    )
    rotated_mask = (
        ndimage.affine_transform(
            mask.astype(np.float64), inv, offset=offset, output_shape=(bh, bw),
            order=1, mode="constant", cval=0.0,
        )
        >= 0.5
    )

    x_lo = int(math.ceil(crop.dx + (bw - w_rot) / 2.0))
    y_lo = int(math.ceil(crop.dy + (bh - h_rot) / 2.0))
    x_hi = int(math.floor(bw - crop.dx - (bw - w_rot) / 2.0))
    y_hi = int(math.floor(bh - crop.dy - (bh - h_rot) / 2.0))
    if x_hi - x_lo < min_crop or y_hi - y_lo < min_crop:
        raise AugmentError(
            f"inscribed crop {x_hi - x_lo}x{y_hi - y_lo} below minimum {min_crop}"
        )
    cropped = rotated[y_lo:y_hi, x_lo:x_hi]
    cropped_mask = rotated_mask[y_lo:y_hi, x_lo:x_hi]

    affine = rotation_about(
        theta, c_p, (c_b[0] - c_p[0] + tx - x_lo, c_b[1] - c_p[1] + ty - y_lo)
    )
    return cropped, cropped_mask, transform_box(box, affine), affine


@dataclass
class SynthSample:
    image: np.ndarray
    boxes: list  # list of RotatedBox propagated from the patch label
    destination_index: int
    patch_index: int


def synth_dataset(destinations, patches, count, seed, ranges=None, tol=1e-6,
                  max_iters=2000):
    """Blend randomly augmented patches into random destinations.

    destinations: list of (H, W) float images.
    patches: list of (patch, mask, RotatedBox) triples.
    Returns (samples, skipped) where skipped lists job indices that failed
    placement more than ranges.max_retries times. Deterministic per seed.
    """
    if not destinations or not patches or count < 1:
        raise ValueError("need nonempty inputs and count >= 1")
    ranges = ranges or AugmentRanges()
    samples = []
    skipped = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        dest_i = int(rng.integers(len(destinations)))
        patch_i = int(rng.integers(len(patches)))
        dest = destinations[dest_i]
        patch, mask, box = patches[patch_i]
        H, W = dest.shape
        mx = int(round(ranges.margin_frac * W))
        my = int(round(ranges.margin_frac * H))
        placed = None
        for _ in range(ranges.max_retries):
            rot = float(rng.uniform(*ranges.rotation))
            try:
                cropped, cmask, _, _ = augment_patch(
                    patch, mask, box, AugmentParams(rot, (0, 0)), ranges.min_crop
                )
            except AugmentError:
                continue
            ch, cw = cropped.shape
            if not cmask.any() or cmask[0].any() or cmask[-1].any() \
               or cmask[:, 0].any() or cmask[:, -1].any():
                continue
            x_max, y_max = W - mx - cw, H - my - ch
            if x_max <= mx or y_max <= my:
                continue
            tx = int(rng.integers(mx, x_max + 1))
            ty = int(rng.integers(my, y_max + 1))
            _, _, box_out, _ = augment_patch(
                patch, mask, box, AugmentParams(rot, (tx, ty)), ranges.min_crop
            )
            try:
                job = BlendJob(dest, cropped, cmask, (tx, ty))
            except ValueError:
                continue
            image = poisson_blend(job, tol=tol, max_iters=max_iters)
            placed = SynthSample(image=image, boxes=[box_out],
                                 destination_index=dest_i, patch_index=patch_i)
            break
        if placed is None:
            skipped.append(i)
        else:
            samples.append(placed)
    return samples, skipped
