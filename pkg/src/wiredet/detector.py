"""Detection heads over the attention backbone.

Two models share the trunk:

* a single-object head regressing one five-parameter rotated box through
  stacked pooled conv stages and a dense layer, trained with the
  swap-tolerant modulated loss;
* a multi-object head with four dense outputs at half input resolution:
  per-class center heatmaps (sigmoid), a two-channel size map, an angle
  map and a two-channel sub-pixel offset map, trained with penalty-reduced
  focal loss on the heatmaps and masked L1 on the rest.

Ground truth heatmaps carry a Gaussian splat per object (peak exactly 1 at
the center cell, sigma = radius/3); the offset channels store the parity
bits that recover the full-resolution center as (2x + eps_x, 2y + eps_y).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.ndimage import maximum_filter

from . import autodiff as ad
from .backbone import Backbone, BackboneConfig, glorot_uniform
from .geometry import RotatedBox

STRIDE = 2

HEAT_CLAMP = 1e-6


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class DetectorConfig:
    lr: float = 0.001
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    input_resolution: tuple = (300, 300)  # (H, W)
    head: str = "multi"  # or "single"
    num_classes: int = 3
    class_roles: tuple = ("single", "single", "multi")
    lambda_size: float = 0.1
    lambda_offset: float = 1.0
    lambda_angle: float = 1.0
    trunk_channels: int = 32
    up_channels: int = 12
    head_channels: int = 16
    single_widths: tuple = (24, 32, 32)
    single_dense: int = 64
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if len(self.class_roles) != self.num_classes:
            raise ValueError("class_roles must cover every heatmap channel exactly once")
        if self.backbone.input_resolution != self.input_resolution:
            self.backbone = BackboneConfig(
                **{**asdict(self.backbone), "input_resolution": self.input_resolution}
            )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("input_resolution", "class_roles", "single_widths"):
            if key in d:
                d[key] = tuple(d[key])
        if "backbone" in d:
            bd = dict(d["backbone"])
            for key in ("stage_widths", "input_resolution", "object_sizes"):
                if key in bd:
                    bd[key] = tuple(bd[key])
            d["backbone"] = BackboneConfig(**bd)
        return cls(**d)


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

@dataclass
class TargetMaps:
    heatmaps: np.ndarray  # (N, Hc, Wc)
    size: np.ndarray  # (2, Hc, Wc): channel 0 height/electrode size, 1 width
    angle: np.ndarray  # (1, Hc, Wc), delta/90
    offset: np.ndarray  # (2, Hc, Wc): (eps_x, eps_y)
    size_mask: np.ndarray  # (2, Hc, Wc)
    angle_mask: np.ndarray  # (1, Hc, Wc)
    offset_mask: np.ndarray  # (1, Hc, Wc)
    warnings: list


@dataclass
class RawOutputs:
    heatmaps: ad.Tensor
    size: ad.Tensor
    angle: ad.Tensor
    offset: ad.Tensor


@dataclass
class Detection:
    class_id: int
    confidence: float
    box: RotatedBox | None = None
    point: tuple | None = None
    size: float | None = None


def gaussian_radius_box(w, h):
    return max(2, int(round(min(w, h) / (2 * STRIDE))))


def gaussian_radius_point(size):
    return max(1, int(round(size / STRIDE)))


def _splat(heat, cx_cell, cy_cell, radius):
    sigma = radius / 3.0
    Hc, Wc = heat.shape
    x0, x1 = max(0, cx_cell - radius), min(Wc - 1, cx_cell + radius)
    y0, y1 = max(0, cy_cell - radius), min(Hc - 1, cy_cell + radius)
    xs = np.arange(x0, x1 + 1) - cx_cell
    ys = np.arange(y0, y1 + 1) - cy_cell
    g = np.exp(-(xs[None, :] ** 2 + ys[:, None] ** 2) / (2.0 * sigma**2))
    region = heat[y0 : y1 + 1, x0 : x1 + 1]
    np.maximum(region, g, out=region)


def encode_targets(boxes, points, config):
    """Rasterize labels into training targets at half input resolution.

    boxes: [(class_id, RotatedBox)], points: [(class_id, x, y, size)].
    Centers are rounded to integer pixels so the offsets are exact parity
    bits; border-clamped objects are flagged in TargetMaps.warnings.
    """
    H, W = config.input_resolution
    Hc, Wc = H // STRIDE, W // STRIDE
    N = config.num_classes
    heat = np.zeros((N, Hc, Wc))
    size = np.zeros((2, Hc, Wc))
    angle = np.zeros((1, Hc, Wc))
    offset = np.zeros((2, Hc, Wc))
    size_mask = np.zeros((2, Hc, Wc))
    angle_mask = np.zeros((1, Hc, Wc))
    offset_mask = np.zeros((1, Hc, Wc))
    warnings = []

    def center_cell(x, y, what):
        xi, yi = int(round(x)), int(round(y))
        if not (0 <= xi < W and 0 <= yi < H):
            warnings.append(f"{what} center ({x:.1f},{y:.1f}) clamped into image bounds")
            xi, yi = min(max(xi, 0), W - 1), min(max(yi, 0), H - 1)
        return xi // STRIDE, yi // STRIDE, xi % STRIDE, yi % STRIDE

    for class_id, box in boxes:
        cx, cy, ex, ey = center_cell(box.cx, box.cy, f"box class {class_id}")
        _splat(heat[class_id], cx, cy, gaussian_radius_box(box.w, box.h))
        size[0, cy, cx] = box.h / STRIDE
        size[1, cy, cx] = box.w / STRIDE
        angle[0, cy, cx] = box.delta / 90.0
        offset[0, cy, cx] = ex
        offset[1, cy, cx] = ey
        size_mask[:, cy, cx] = 1.0
        angle_mask[0, cy, cx] = 1.0
        offset_mask[0, cy, cx] = 1.0

    for class_id, x, y, psize in points:
        cx, cy, ex, ey = center_cell(x, y, f"point class {class_id}")
        _splat(heat[class_id], cx, cy, gaussian_radius_point(psize))
        size[0, cy, cx] = psize / STRIDE
        offset[0, cy, cx] = ex
        offset[1, cy, cx] = ey
        size_mask[0, cy, cx] = 1.0
        offset_mask[0, cy, cx] = 1.0

    return TargetMaps(heat, size, angle, offset, size_mask, angle_mask, offset_mask, warnings)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def focal_loss(pred_heat, gt_heat):
    """Penalty-reduced pixelwise focal loss, normalized by the peak count.

    pred_heat: Tensor in [0,1]; gt_heat: array with exact-1 peaks.
    """
    gt = np.asarray(gt_heat)
    if pred_heat.shape != gt.shape:
        raise ValueError(f"heatmap shapes differ: {pred_heat.shape} vs {gt.shape}")
    pos_mask = gt == 1.0
    n_peaks = int(pos_mask.sum())
    if n_peaks == 0:
        raise ValueError("focal loss undefined without at least one peak")
    dtype = pred_heat.dtype
    pos = ad.Tensor(pos_mask.astype(dtype))
    neg_w = ad.Tensor(((1.0 - gt) ** 4 * ~pos_mask).astype(dtype))
    p = ad.clamp(pred_heat, HEAT_CLAMP, 1.0 - HEAT_CLAMP)
    one_minus = ad.rsub_const(1.0, p)
    pos_term = ad.sum_all(ad.mul(pos, ad.mul(ad.square(one_minus), ad.log(p))))
    neg_term = ad.sum_all(ad.mul(neg_w, ad.mul(ad.square(p), ad.log(one_minus))))
    return ad.scale(ad.neg(ad.add(pos_term, neg_term)), 1.0 / n_peaks)


def masked_l1(pred, gt, mask, n_cells):
    """Sum of |pred - gt| over masked entries, normalized by the cell count."""
    if n_cells == 0:
        return ad.Tensor(np.zeros((), dtype=pred.dtype))
    dtype = pred.dtype
    diff = ad.absolute(ad.sub(pred, ad.Tensor(np.asarray(gt, dtype=dtype))))
    return ad.scale(ad.sum_all(ad.mul(diff, ad.Tensor(np.asarray(mask, dtype=dtype)))), 1.0 / n_cells)


def head_losses(pred, gt, config):
    """Per-head loss terms and their weighted total for one sample."""
    n_size = int(np.count_nonzero(gt.size_mask.max(axis=0)))
    n_ang = int(np.count_nonzero(gt.angle_mask))
    n_off = int(np.count_nonzero(gt.offset_mask))
    focal = focal_loss(pred.heatmaps, gt.heatmaps)
    size_l1 = masked_l1(pred.size, gt.size, gt.size_mask, n_size)
    offmask = np.repeat(gt.offset_mask, 2, axis=0)
    off_l1 = masked_l1(pred.offset, gt.offset, offmask, n_off)
    ang_l1 = masked_l1(pred.angle, gt.angle, gt.angle_mask, n_ang)
    total = ad.add(
        focal,
        ad.add(
            ad.scale(size_l1, config.lambda_size),
            ad.add(
                ad.scale(off_l1, config.lambda_offset),
                ad.scale(ang_l1, config.lambda_angle),
            ),
        ),
    )
    return {"focal": focal, "size": size_l1, "offset": off_l1, "angle": ang_l1, "total": total}


def modulated_loss_t(pred5, gt_box, dims):
    """Differentiable modulated rotation loss on a normalized 5-vector.

    pred5: Tensor of (cx, cy, w, h, delta/90), all in [0,1];
    gt_box: RotatedBox with normalized center/size and delta in degrees.
    """
    W, H = float(dims[0]), float(dims[1])
    dtype = pred5.dtype
    gt = np.array([gt_box.cx, gt_box.cy, gt_box.w, gt_box.h, gt_box.delta / 90.0], dtype=dtype)
    gt_swap = np.array([gt_box.cx, gt_box.cy, gt_box.h, gt_box.w, gt_box.delta / 90.0], dtype=dtype)
    norm = np.array([1.0 / W, 1.0 / H, 1.0 / W, 1.0 / H, 1.0], dtype=dtype)
    norm_swap = np.array([1.0 / W, 1.0 / H, 1.0 / W, 1.0 / H, 0.0], dtype=dtype)
    d = ad.absolute(ad.sub(pred5, ad.Tensor(gt)))
    branch1 = ad.sum_all(ad.mul(d, ad.Tensor(norm)))
    d_swap = ad.absolute(ad.sub(pred5, ad.Tensor(gt_swap)))
    ang_mask = np.array([0, 0, 0, 0, 1], dtype=dtype)
    ang = ad.sum_all(ad.mul(d, ad.Tensor(ang_mask)))
    branch2 = ad.add(
        ad.sum_all(ad.mul(d_swap, ad.Tensor(norm_swap))), ad.rsub_const(1.0, ang)
    )
    return ad.minimum(branch1, branch2)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def _local_peaks(heat):
    """3x3 local maxima as (value, y, x), value-sorted, raster tie order;
    plateau ties suppress later equal neighbors."""
    peaks = heat == maximum_filter(heat, size=3, mode="constant")
    ys, xs = np.nonzero(peaks)
    vals = heat[ys, xs]
    order = np.lexsort((xs, ys, -vals))
    kept = []
    for i in order:
        y, x, v = int(ys[i]), int(xs[i]), float(vals[i])
        if any(abs(y - ky) <= 1 and abs(x - kx) <= 1 and v == kv for kv, ky, kx in kept):
            continue
        kept.append((v, y, x))
    return kept


def decode_detections(out, config, threshold=0.5):
    """Collect per-channel heatmap peaks into detections.

    Singleton channels keep at most the global maximum; multi-instance
    channels keep every 3x3 local maximum. Emitted confidences always
    exceed the threshold (default 0.5, strict).
    """
    heat = out.heatmaps.data if isinstance(out.heatmaps, ad.Tensor) else np.asarray(out.heatmaps)
    size = out.size.data if isinstance(out.size, ad.Tensor) else np.asarray(out.size)
    angle = out.angle.data if isinstance(out.angle, ad.Tensor) else np.asarray(out.angle)
    offset = out.offset.data if isinstance(out.offset, ad.Tensor) else np.asarray(out.offset)
    detections = []
    for class_id, role in enumerate(config.class_roles):
        peaks = _local_peaks(heat[class_id])
        if role == "single":
            peaks = peaks[:1]
        for v, y, x in peaks:
            if not v > threshold:
                continue
            px = STRIDE * x + float(offset[0, y, x])
            py = STRIDE * y + float(offset[1, y, x])
            if role == "multi":
                detections.append(
                    Detection(
                        class_id=class_id,
                        confidence=v,
                        point=(px, py),
                        size=float(size[0, y, x]) * STRIDE,
                    )
                )
            else:
                h = max(float(size[0, y, x]) * STRIDE, 1e-3)
                w = max(float(size[1, y, x]) * STRIDE, 1e-3)
                delta = float(np.clip(angle[0, y, x], 0.0, 1.0)) * 90.0
                detections.append(
                    Detection(
                        class_id=class_id,
                        confidence=v,
                        box=RotatedBox(px, py, w, h, delta),
                    )
                )
    return detections


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

def _conv_params(rng, c_in, c_out, k):
    w = ad.parameter(glorot_uniform(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k))
    b = ad.parameter(np.zeros(c_out, dtype=np.float32))
    return w, b


def _conv(x, wb, relu=True, padding=None):
    w, b = wb
    k = w.shape[-1]
    out = ad.add_channel_bias(
        ad.conv2d(x, w, stride=1, padding=(k - 1) // 2 if padding is None else padding), b
    )
    return ad.relu(out) if relu else out


class MultiDetector:
    """Center-heatmap detector: four dense heads at half input resolution."""

    def __init__(self, config, seed=None):
        self.config = config
        seed = config.seed if seed is None else seed
        self.backbone = Backbone(config.backbone, seed=seed)
        rng = np.random.default_rng(seed + 1000)
        c_bb = config.backbone.out_channels
        ct, cu, ch = config.trunk_channels, config.up_channels, config.head_channels
        self.down = _conv_params(rng, c_bb, ct, 3)
        self.mid = _conv_params(rng, ct, ct, 3)
        self.up = _conv_params(rng, ct, cu, 3)
        self.fuse = _conv_params(rng, cu + c_bb, ch, 1)
        N = config.num_classes
        self.head_hm = _conv_params(rng, ch, N, 3)
        self.head_size = _conv_params(rng, ch, 2, 3)
        self.head_angle = _conv_params(rng, ch, 1, 3)
        self.head_offset = _conv_params(rng, ch, 2, 3)
        # bias the heatmap toward empty so early focal loss stays tame
        self.head_hm[1].data[:] = -math.log((1.0 - 0.1) / 0.1)

    def parameters(self):
        named = list(self.backbone.parameters())
        for tag, (w, b) in (
            ("down", self.down),
            ("mid", self.mid),
            ("up", self.up),
            ("fuse", self.fuse),
            ("head.hm", self.head_hm),
            ("head.size", self.head_size),
            ("head.angle", self.head_angle),
            ("head.offset", self.head_offset),
        ):
            named.append((f"multi.{tag}.w", w))
            named.append((f"multi.{tag}.b", b))
        return named

    def forward(self, image):
        feats = self.backbone.forward(image)  # (C, H/2, W/2)
        d = _conv(ad.avg_pool2d(feats, 2), self.down)
        m = _conv(d, self.mid)
        u = _conv(ad.upsample_nearest(m, 2), self.up)
        h = _conv(ad.concat_channels([u, feats]), self.fuse)
        return RawOutputs(
            heatmaps=ad.sigmoid(_conv(h, self.head_hm, relu=False)),
            size=_conv(h, self.head_size, relu=False),
            angle=ad.sigmoid(_conv(h, self.head_angle, relu=False)),
            offset=ad.sigmoid(_conv(h, self.head_offset, relu=False)),
        )


class SingleDetector:
    """Five-parameter rotated-box regressor with sigmoid-normalized outputs."""

    POOLS = (2, 3, 5)

    def __init__(self, config, seed=None):
        self.config = config
        seed = config.seed if seed is None else seed
        self.backbone = Backbone(config.backbone, seed=seed)
        rng = np.random.default_rng(seed + 2000)
        c_in = config.backbone.out_channels
        self.convs = []
        for c_out in config.single_widths:
            self.convs.append(_conv_params(rng, c_in, c_out, 3))
            c_in = c_out
        H, W = config.input_resolution
        grid = (H // 2) // int(np.prod(self.POOLS))
        flat = config.single_widths[-1] * grid * grid
        dh = config.single_dense
        self.dense1_w = ad.parameter(glorot_uniform(rng, (dh, flat), flat, dh))
        self.dense1_b = ad.parameter(np.zeros(dh, dtype=np.float32))
        self.dense2_w = ad.parameter(glorot_uniform(rng, (5, dh), dh, 5))
        self.dense2_b = ad.parameter(np.zeros(5, dtype=np.float32))

    def parameters(self):
        named = list(self.backbone.parameters())
        for i, (w, b) in enumerate(self.convs):
            named.append((f"single.conv{i}.w", w))
            named.append((f"single.conv{i}.b", b))
        named.append(("single.dense1.w", self.dense1_w))
        named.append(("single.dense1.b", self.dense1_b))
        named.append(("single.dense2.w", self.dense2_w))
        named.append(("single.dense2.b", self.dense2_b))
        return named

    def forward(self, image):
        h = self.backbone.forward(image)
        for pool, wb in zip(self.POOLS, self.convs):
            h = _conv(ad.avg_pool2d(h, pool), wb)
        h = ad.relu(ad.dense(ad.flatten(h), self.dense1_w, self.dense1_b))
        return ad.sigmoid(ad.dense(h, self.dense2_w, self.dense2_b))

    def predict_box(self, image):
        with ad.no_grad():
            raw = self.forward(image).data
        H, W = self.config.input_resolution
        return RotatedBox(
            cx=float(raw[0]) * W,
            cy=float(raw[1]) * H,
            w=max(float(raw[2]) * W, 1e-3),
            h=max(float(raw[3]) * H, 1e-3),
            delta=float(np.clip(raw[4], 0.0, 1.0)) * 90.0,
        )


def multi_forward(image, model):
    return model.forward(image)


def single_forward(image, model):
    raw = model.forward(image)
    H, W = model.config.input_resolution
    box = RotatedBox(
        cx=float(raw.data[0]) * W,
        cy=float(raw.data[1]) * H,
        w=max(float(raw.data[2]) * W, 1e-3),
        h=max(float(raw.data[3]) * H, 1e-3),
        delta=float(np.clip(raw.data[4], 0.0, 1.0)) * 90.0,
    )
    return box, raw


# ---------------------------------------------------------------------------
# model persistence
# ---------------------------------------------------------------------------

def save_model(model, path):
    ad.save_checkpoint(path, model.parameters())


def load_model(config, path):
    model = MultiDetector(config) if config.head == "multi" else SingleDetector(config)
    state = ad.load_checkpoint(path)
    for name, p in model.parameters():
        if name not in state:
            raise ValueError(f"checkpoint is missing tensor {name}")
        if state[name].shape != p.data.shape:
            raise ValueError(
                f"checkpoint tensor {name} has shape {state[name].shape}, "
                f"model expects {p.data.shape}"
            )
        p.data[:] = state[name]
    return model


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainSample:
    image: np.ndarray  # (H, W) float32 in [0,1]
    boxes: list  # [(class_id, RotatedBox)]
    points: list  # [(class_id, x, y, size)]

    def image_tensor(self):
        return ad.Tensor(self.image[None].astype(np.float32))


def _normalized_gt_box(sample, dims):
    H, W = dims
    cid, box = sample.boxes[0]
    return RotatedBox(box.cx / W, box.cy / H, box.w / W, box.h / H, box.delta)


def _multi_sample_loss(model, sample, target, config):
    out = model.forward(sample.image_tensor())
    return head_losses(out, target, config)


def _single_sample_loss(model, sample, config):
    raw = model.forward(sample.image_tensor())
    gt = _normalized_gt_box(sample, config.input_resolution)
    loss = modulated_loss_t(raw, gt, (1.0, 1.0))
    return {"total": loss}


def train(train_samples, val_samples, config, epochs=None, log=None,
          epoch_hook=None):
    """Train a detector; returns (model, history, best_state).

    history rows: epoch, train_loss, val_loss plus per-head terms for the
    multi head. The returned model carries the best-validation parameters.
    Deterministic for a fixed config.seed. Raises TrainingDiverged on NaN.
    """
    if not train_samples or not val_samples:
        raise ValueError("training and validation splits must be nonempty")
    epochs = config.epochs if epochs is None else epochs
    multi = config.head == "multi"
    model = MultiDetector(config) if multi else SingleDetector(config)
    params = [p for _, p in model.parameters()]
    opt = ad.AdamState.for_params(params, lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)

    targets = val_targets = None
    if multi:
        targets = [encode_targets(s.boxes, s.points, config) for s in train_samples]
        val_targets = [encode_targets(s.boxes, s.points, config) for s in val_samples]

    def eval_loss(samples, tgts):
        tot = 0.0
        with ad.no_grad():
            for i, s in enumerate(samples):
                if multi:
                    tot += _multi_sample_loss(model, s, tgts[i], config)["total"].item()
                else:
                    tot += _single_sample_loss(model, s, config)["total"].item()
        return tot / len(samples)

    history = []
    best = (math.inf, None, -1)
    n = len(train_samples)
    for epoch in range(epochs):
        order = rng.permutation(n)
        terms = {"focal": 0.0, "size": 0.0, "offset": 0.0, "angle": 0.0}
        train_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            for p in params:
                p.zero_grad()
            for idx in batch:
                s = train_samples[idx]
                if multi:
                    losses = _multi_sample_loss(model, s, targets[idx], config)
                    for k in terms:
                        terms[k] += losses[k].item()
                else:
                    losses = _single_sample_loss(model, s, config)
                ad.backward(ad.scale(losses["total"], 1.0 / len(batch)))
                train_loss += losses["total"].item()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            ad.adam_step(params, grads, opt)
        train_loss /= n
        if not np.isfinite(train_loss):
            raise TrainingDiverged(f"training loss became {train_loss} at epoch {epoch}")
        val_loss = eval_loss(val_samples, val_targets if multi else None)
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss}
        if multi:
            row.update({k: v / n for k, v in terms.items()})
        history.append(row)
        if log:
            log(row)
        if val_loss < best[0]:
            best = (val_loss, [p.data.copy() for p in params], epoch)
        if epoch_hook and epoch_hook(model, epoch):
            break
    if best[1] is not None:
        for p, data in zip(params, best[1]):
            p.data[:] = data
    return model, history, {"best_val_loss": best[0], "best_epoch": best[2]}
