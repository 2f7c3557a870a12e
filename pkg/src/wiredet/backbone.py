"""Attention backbone: trainable Gaussian-derivative filters gating random ones.

The first convolution layer runs two branches over the (2x average-pooled)
input image: 15 second-derivative-of-Gaussian kernels covering five object
scales, and a bank of randomly initialized kernels. A per-pixel dot-product
gate squashes the branch similarity through a sigmoid and modulates the
random branch, steering the network toward wire- and tube-like structures.
Two plain conv+relu stages follow at half input resolution.

Kernel weights are pixel-cell integrals of the analytic derivatives (point
sampling aliases badly at the smallest scale), scaled by the variance s and
recentered to an exactly zero sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import autodiff as ad

DOG_KINDS = ("Gxx", "Gyy", "Gxy")

SCALE_MIN = 0.111
SCALE_MAX = 9.0


def scale_for_size(r0):
    """Filter variance for an object of size r0 pixels: ((r0 - 1)/3)^2."""
    if r0 <= 1:
        raise ValueError(f"object size must exceed 1 pixel, got {r0}")
    return ((r0 - 1.0) / 3.0) ** 2


def dog_half_width(s, cap=None):
    """Half extent covering the 3-sigma support of a variance-s kernel."""
    hw = max(2, math.ceil(3.0 * math.sqrt(s)))
    if cap is not None:
        hw = min(hw, cap)
    return hw


@dataclass
class DogKernel:
    kind: str
    scale_s: float
    half_width: int
    weights: ad.Tensor  # (2*half_width+1)^2, trainable


def _gauss_pdf(x, s):
    return np.exp(-x * x / (2.0 * s)) / math.sqrt(2.0 * math.pi * s)


def _gauss_cdf(x, s):
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0 * s)))


def dog_kernel(kind, s, half_width):
    """Build one trainable second-derivative-of-Gaussian kernel.

    Each weight integrates the analytic derivative over its pixel cell; the
    whole kernel is multiplied by s and recentered to a zero sum. Gxx/Gyy
    are even under axis flips, Gxy flips sign under either single flip.
    """
    if s <= 0:
        raise ValueError(f"scale must be positive, got {s}")
    if kind not in DOG_KINDS:
        raise ValueError(f"kind must be one of {DOG_KINDS}, got {kind!r}")
    edges = np.arange(-half_width - 0.5, half_width + 1.5)
    cell_g = _gauss_cdf(edges[1:], s) - _gauss_cdf(edges[:-1], s)
    cell_g1 = _gauss_pdf(edges[1:], s) - _gauss_pdf(edges[:-1], s)
    gp = -(edges / s) * _gauss_pdf(edges, s)
    cell_g2 = gp[1:] - gp[:-1]
    if kind == "Gxx":
        k = np.outer(cell_g, cell_g2)  # rows y, cols x
    elif kind == "Gyy":
        k = np.outer(cell_g2, cell_g)
    else:
        k = np.outer(cell_g1, cell_g1)
    k = k * s
    k = k - k.mean()
    return DogKernel(
        kind=kind,
        scale_s=float(s),
        half_width=half_width,
        weights=ad.parameter(k.astype(np.float32)),
    )


@dataclass
class FilterBank:
    dog_kernels: list  # 15 DogKernel, scale-major, (Gxx, Gyy, Gxy) per scale
    random_kernels: ad.Tensor  # (R, 1, kr, kr), trainable
    scales: list
    object_sizes: list


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def make_dog_bank(object_sizes, random_channels=16, random_kernel_size=5,
                  max_half_width=None, rng=None, analytic=True):
    """Bank of 15 DoG kernels (5 scales x 3 kinds) plus R random kernels.

    With analytic=False the DoG slots get random initialization of identical
    shape (the filter-removal ablation arm).
    """
    sizes = list(object_sizes)
    if len(sizes) != 5:
        raise ValueError(f"exactly 5 object sizes required, got {len(sizes)}")
    scales = [scale_for_size(r) for r in sizes]
    for s in scales:
        if not (SCALE_MIN - 1e-6 <= s <= SCALE_MAX + 1e-9):
            raise ValueError(f"scale {s:.4f} outside [{SCALE_MIN}, {SCALE_MAX}]")
    rng = rng or np.random.default_rng(0)
    kernels = []
    for s in scales:
        hw = dog_half_width(s, max_half_width)
        for kind in DOG_KINDS:
            if analytic:
                kernels.append(dog_kernel(kind, s, hw))
            else:
                ke = 2 * hw + 1
                w = glorot_uniform(rng, (ke, ke), ke * ke, ke * ke)
                kernels.append(
                    DogKernel(kind=kind, scale_s=float(s), half_width=hw,
                              weights=ad.parameter(w))
                )
    kr = random_kernel_size
    rand = glorot_uniform(rng, (random_channels, 1, kr, kr), kr * kr,
                          random_channels * kr * kr)
    return FilterBank(
        dog_kernels=kernels,
        random_kernels=ad.parameter(rand),
        scales=scales,
        object_sizes=sizes,
    )


def attention_gate(q_features, k_features):
    """Per-pixel dot-product gate: sigmoid(<q,k>/sqrt(C)) scaling q."""
    if q_features.shape != k_features.shape:
        raise ValueError(
            f"gate branches must match, got {q_features.shape} vs {k_features.shape}"
        )
    C = q_features.shape[0]
    sim = ad.sum_channels(ad.mul(q_features, k_features))
    a = ad.sigmoid(ad.scale(sim, 1.0 / math.sqrt(C)))
    return ad.mul(q_features, ad.expand_channels(a, C))


@dataclass
class BackboneConfig:
    use_dog: bool = True
    use_attention: bool = True
    random_channels: int = 16
    random_kernel_size: int = 5
    stage_widths: tuple = (16, 24)
    input_resolution: tuple = (300, 300)  # (H, W)
    object_sizes: tuple = (2.0, 4.0, 6.0, 8.0, 10.0)
    max_half_width: int | None = None

    @property
    def out_channels(self):
        return self.stage_widths[-1]


class Backbone:
    """Trainable trunk mapping a (1,H,W) image to (C, H/2, W/2) features."""

    def __init__(self, config, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.bank = make_dog_bank(
            config.object_sizes,
            random_channels=config.random_channels,
            random_kernel_size=config.random_kernel_size,
            max_half_width=config.max_half_width,
            rng=rng,
            analytic=config.use_dog,
        )
        self._bank_extent = 2 * max(k.half_width for k in self.bank.dog_kernels) + 1
        n_dog = len(self.bank.dog_kernels)
        R = config.random_channels
        if config.use_attention:
            self.proj_w = ad.parameter(glorot_uniform(rng, (R, n_dog, 1, 1), n_dog, R))
            self.proj_b = ad.parameter(np.zeros(R, dtype=np.float32))
            fused_channels = R
        else:
            self.proj_w = None
            self.proj_b = None
            fused_channels = n_dog + R
        self.stages = []
        c_in = fused_channels
        for i, c_out in enumerate(config.stage_widths):
            w = ad.parameter(glorot_uniform(rng, (c_out, c_in, 3, 3), c_in * 9, c_out * 9))
            b = ad.parameter(np.zeros(c_out, dtype=np.float32))
            self.stages.append((w, b))
            c_in = c_out

    def parameters(self):
        named = []
        for i, k in enumerate(self.bank.dog_kernels):
            named.append((f"backbone.dog.{i // 3}.{k.kind}", k.weights))
        named.append(("backbone.rand.kernels", self.bank.random_kernels))
        if self.proj_w is not None:
            named.append(("backbone.attn.proj_w", self.proj_w))
            named.append(("backbone.attn.proj_b", self.proj_b))
        for i, (w, b) in enumerate(self.stages):
            named.append((f"backbone.stage{i}.w", w))
            named.append((f"backbone.stage{i}.b", b))
        return named

    def branch_outputs(self, image):
        """DoG-branch and random-branch activations at half resolution."""
        H, W = self.config.input_resolution
        if image.shape != (1, H, W):
            raise ValueError(f"expected a (1,{H},{W}) image, got {image.shape}")
        x = ad.avg_pool2d(image, 2)
        ke = self._bank_extent
        bank = ad.assemble_bank([k.weights for k in self.bank.dog_kernels], ke)
        dog_out = ad.conv2d(x, bank, stride=1, padding=(ke - 1) // 2)
        kr = self.config.random_kernel_size
        rand_out = ad.conv2d(x, self.bank.random_kernels, stride=1, padding=(kr - 1) // 2)
        return dog_out, rand_out

    def forward(self, image):
        dog_out, rand_out = self.branch_outputs(image)
        if self.config.use_attention:
            k_feat = ad.add_channel_bias(ad.conv2d(dog_out, self.proj_w), self.proj_b)
            h = attention_gate(rand_out, k_feat)
        else:
            h = ad.concat_channels([dog_out, rand_out])
        for w, b in self.stages:
            h = ad.relu(ad.add_channel_bias(ad.conv2d(h, w, stride=1, padding=1), b))
        return h


def backbone_forward(image, backbone):
    """Functional wrapper over Backbone.forward."""
    return backbone.forward(image)
