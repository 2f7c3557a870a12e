"""Dataset records, label files and 8-bit grayscale image I/O.

Label files are line-oriented name=value text with a versioned header.
Floats are written as 9-significant-digit decimals of their float32
value, which round-trips float32 bit-exactly. Images are stored as 8-bit
grayscale PGM (P5) or PNG, chosen by extension.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

from .detector import TrainSample
from .geometry import RotatedBox

LABEL_HEADER = "wiredet-labels v1"

SPLITS = ("train", "val", "test")


@dataclass
class DatasetRecord:
    image: str  # image filename, relative to the dataset directory
    boxes: list  # [(class_id, RotatedBox)]
    points: list  # [(class_id, x, y, size)]
    pixel_spacing_mm: float = 0.417
    split: str = "train"
    synthetic: bool = False

    def validate(self, image_size=None):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.synthetic and self.split != "train":
            raise ValueError("synthetic records are restricted to the training split")
        if image_size is not None:
            H, W = image_size
            for _, b in self.boxes:
                if not (0 <= b.cx < W and 0 <= b.cy < H):
                    raise ValueError(f"box center ({b.cx},{b.cy}) outside {W}x{H}")
            for _, x, y, _ in self.points:
                if not (0 <= x < W and 0 <= y < H):
                    raise ValueError(f"point ({x},{y}) outside {W}x{H}")


def _fmt(x):
    return format(float(np.float32(x)), ".9g")


def _f32(s):
    return float(np.float32(float(s)))


def _encode_boxes(boxes):
    if not boxes:
        return "-"
    return ";".join(
        f"{cid},{_fmt(b.cx)},{_fmt(b.cy)},{_fmt(b.w)},{_fmt(b.h)},{_fmt(b.delta)}"
        for cid, b in boxes
    )


def _decode_boxes(text):
    if text == "-":
        return []
    boxes = []
    for part in text.split(";"):
        cid, cx, cy, w, h, delta = part.split(",")
        boxes.append(
            (int(cid), RotatedBox(_f32(cx), _f32(cy), _f32(w), _f32(h), _f32(delta)))
        )
    return boxes


def _encode_points(points):
    if not points:
        return "-"
    return ";".join(f"{cid},{_fmt(x)},{_fmt(y)},{_fmt(s)}" for cid, x, y, s in points)


def _decode_points(text):
    if text == "-":
        return []
    pts = []
    for part in text.split(";"):
        cid, x, y, s = part.split(",")
        pts.append((int(cid), _f32(x), _f32(y), _f32(s)))
    return pts


def write_labels(path, records):
    lines = [LABEL_HEADER]
    for r in records:
        r.validate()
        if " " in r.image:
            raise ValueError(f"image name {r.image!r} must not contain spaces")
        lines.append(
            " ".join(
                [
                    f"image={r.image}",
                    f"split={r.split}",
                    f"synthetic={int(r.synthetic)}",
                    f"spacing={_fmt(r.pixel_spacing_mm)}",
                    f"boxes={_encode_boxes(r.boxes)}",
                    f"points={_encode_points(r.points)}",
                ]
            )
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_labels(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != LABEL_HEADER:
        raise ValueError(f"not a label file (expected header {LABEL_HEADER!r})")
    records = []
    for ln in lines[1:]:
        fields = dict(item.split("=", 1) for item in ln.split(" "))
        rec = DatasetRecord(
            image=fields["image"],
            boxes=_decode_boxes(fields["boxes"]),
            points=_decode_points(fields["points"]),
            pixel_spacing_mm=_f32(fields["spacing"]),
            split=fields["split"],
            synthetic=bool(int(fields["synthetic"])),
        )
        rec.validate()
        records.append(rec)
    return records


def save_image(path, array):
    """Write a float [0,1] image as 8-bit grayscale (.pgm or .png)."""
    a = np.clip(np.asarray(array), 0.0, 1.0)
    q = np.round(a * 255.0).astype(np.uint8)
    path = str(path)
    if path.endswith(".pgm"):
        h, w = q.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(q.tobytes())
    elif path.endswith(".png"):
        PILImage.fromarray(q, mode="L").save(path)
    else:
        raise ValueError(f"unsupported image extension on {path!r} (use .pgm or .png)")


def load_image(path):
    """Read an 8-bit grayscale image into float32 [0,1]."""
    path = str(path)
    if path.endswith(".pgm"):
        with open(path, "rb") as fh:
            data = fh.read()
        if not data.startswith(b"P5"):
            raise ValueError(f"{path!r} is not a binary PGM file")
        fields = []
        pos = 2
        while len(fields) < 3:
            while pos < len(data) and data[pos : pos + 1].isspace():
                pos += 1
            if data[pos : pos + 1] == b"#":
                while data[pos : pos + 1] not in (b"\n", b""):
                    pos += 1
                continue
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            fields.append(int(data[start:pos]))
        w, h, maxval = fields
        pos += 1
        q = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    else:
        q = np.asarray(PILImage.open(path).convert("L"))
    return q.astype(np.float32) / 255.0


def write_dataset(directory, items):
    """Write (image_array, DatasetRecord) pairs under directory/images plus
    a labels.txt index."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    records = []
    for image, record in items:
        save_image(os.path.join(directory, "images", record.image), image)
        records.append(record)
    write_labels(os.path.join(directory, "labels.txt"), records)
    return records


def load_dataset(directory):
    return read_labels(os.path.join(directory, "labels.txt"))


def load_split(directory, split, limit=None):
    """TrainSample list for one split of a dataset directory."""
    records = [r for r in load_dataset(directory) if r.split == split]
    if limit is not None:
        records = records[:limit]
    samples = []
    for r in records:
        img = load_image(os.path.join(directory, "images", r.image))
        samples.append(TrainSample(image=img, boxes=r.boxes, points=r.points))
    return samples, records
