"""Synthetic 10-class shape/color dataset and PPM disk format.

Classes are (shape, color family) combinations: 5 procedural shapes x 2
color families, drawn at 32x32 with jittered position/scale and background
noise. Easy to separate, so small CNNs train to high accuracy in minutes.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

N_CLASSES = 10
IMG_SIDE = 32
# Rendered scenes are compressed into a narrow band around mid-gray. The
# zoo models undo this with a fixed input normalization, so classification
# is unaffected, while a fixed-epsilon pixel budget spans a much larger
# fraction of the class separation (mirroring normalized-input ImageNet
# models, where 16/255 in pixels is roughly 0.28 after normalization).
CONTRAST = 0.40
SPLITS = ("train", "heldout", "attack_eval")

SHAPES = ("disk", "square", "triangle", "cross", "ring")
COLOR_FAMILIES = (
    np.array([0.85, 0.35, 0.15], dtype=np.float32),   # warm
    np.array([0.15, 0.35, 0.85], dtype=np.float32),   # cool
)


class DataError(IOError):
    pass


@dataclass
class Dataset:
    images: np.ndarray        # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray        # (N,) int64
    splits: np.ndarray        # (N,) of str split tags

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        m = self.splits == split
        return self.images[m], self.labels[m]

    def __len__(self) -> int:
        return len(self.labels)


def _shape_mask(shape: str, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:IMG_SIDE, 0:IMG_SIDE].astype(np.float32)
    dx, dy = xx - cx, yy - cy
    if shape == "disk":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    if shape == "cross":
        arm = max(r / 3, 1.5)
        box = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        return box & ((np.abs(dx) <= arm) | (np.abs(dy) <= arm))
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(shape)


# fraction of renders whose color-family cue is erased; these are genuinely
# ambiguous between the two families, so independently trained models
# disagree on them instead of converging to identical predictions
AMBIGUOUS_FRACTION = 0.10


def _render(rng: np.random.Generator, label: int) -> np.ndarray:
    shape = SHAPES[label % len(SHAPES)]
    base = COLOR_FAMILIES[label // len(SHAPES)]
    cx = IMG_SIDE / 2 + rng.uniform(-6, 6)
    cy = IMG_SIDE / 2 + rng.uniform(-6, 6)
    r = rng.uniform(5.5, 11)
    if rng.random() < AMBIGUOUS_FRACTION:
        mid = (COLOR_FAMILIES[0] + COLOR_FAMILIES[1]) / 2
        color = np.clip(mid + rng.uniform(-0.10, 0.10, size=3).astype(np.float32), 0, 1)
    else:
        color = np.clip(base + rng.uniform(-0.18, 0.18, size=3).astype(np.float32), 0, 1)
    bg = rng.uniform(0.0, 0.33, size=(3, IMG_SIDE, IMG_SIDE)).astype(np.float32)
    img = bg
    mask = _shape_mask(shape, cx, cy, r)
    img = np.where(mask[None], color[:, None, None], img)
    # distractor stripe occluding part of the shape
    if rng.random() < 0.5:
        pos = int(rng.integers(0, IMG_SIDE))
        width = int(rng.integers(1, 3))
        stripe_color = rng.uniform(0, 1, size=3).astype(np.float32)
        if rng.random() < 0.5:
            img[:, pos:pos + width, :] = stripe_color[:, None, None]
        else:
            img[:, :, pos:pos + width] = stripe_color[:, None, None]
    noise = rng.normal(0, rng.uniform(0.04, 0.09), size=img.shape)
    img = np.clip(img + noise.astype(np.float32), 0, 1)
    img = 0.5 + CONTRAST * (img - 0.5)
    # quantize to 8-bit levels so in-memory and on-disk pixels agree exactly
    return np.round(img * 255).astype(np.float32) / 255


def gen_synthetic_dataset(seed: int, per_class: int) -> Dataset:
    """`per_class` images per class, split 70/15/15 train/heldout/attack_eval."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    images, labels, splits = [], [], []
    n_heldout = max(1, round(per_class * 0.15))
    n_eval = max(1, round(per_class * 0.15))
    for label in range(N_CLASSES):
        rng = np.random.default_rng([seed, label])
        for i in range(per_class):
            images.append(_render(rng, label))
            labels.append(label)
            if i < per_class - n_heldout - n_eval:
                splits.append("train")
            elif i < per_class - n_eval:
                splits.append("heldout")
            else:
                splits.append("attack_eval")
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64),
                   np.asarray(splits))


def write_ppm(path: str, img: np.ndarray) -> None:
    """P6 binary PPM, maxval 255; img is (3, H, W) float in [0, 1]."""
    _, h, w = img.shape
    px = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(px.transpose(1, 2, 0).tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    fields: list[bytes] = []
    i = 0
    while len(fields) < 4:
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if raw[i:i + 1] == b"#":
            while i < len(raw) and raw[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j:j + 1].isspace():
            j += 1
        fields.append(raw[i:j])
        i = j
    if fields[0] != b"P6":
        raise DataError(f"{path}: not a P6 PPM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    body = raw[i + 1:i + 1 + 3 * w * h]
    if len(body) != 3 * w * h:
        raise DataError(f"{path}: truncated pixel data")
    px = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float32) / 255


def save_dataset(ds: Dataset, root: str) -> None:
    """Lay out data/<split>/<class>/<id>.ppm plus a labels.csv manifest."""
    rows = []
    counters: dict[tuple[str, int], int] = {}
    for img, label, split in zip(ds.images, ds.labels, ds.splits):
        k = (str(split), int(label))
        idx = counters.get(k, 0)
        counters[k] = idx + 1
        d = os.path.join(root, str(split), f"{label:02d}")
        os.makedirs(d, exist_ok=True)
        rel = os.path.join(str(split), f"{label:02d}", f"{idx:05d}.ppm")
        write_ppm(os.path.join(root, rel), img)
        rows.append((rel, str(split), int(label)))
    with open(os.path.join(root, "labels.csv"), "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["path", "split", "label"])
        wr.writerows(rows)


def load_dataset(root: str) -> Dataset:
    manifest = os.path.join(root, "labels.csv")
    if not os.path.exists(manifest):
        raise DataError(f"missing manifest {manifest}")
    images, labels, splits = [], [], []
    with open(manifest, newline="") as f:
        for row in csv.DictReader(f):
            images.append(read_ppm(os.path.join(root, row["path"])))
            labels.append(int(row["label"]))
            splits.append(row["split"])
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64),
                   np.asarray(splits))
