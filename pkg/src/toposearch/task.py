"""Synthetic 2D segmentation task.

Foreground classes are shapes with class-specific mid-range intensities.
Bright distractor shapes belong to the background, so intensity alone is not
monotone in the label and a purely linear network cannot separate classes.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T

DICE_SMOOTH = 1e-5


@dataclass(frozen=True)
class TaskConfig:
    patch: tuple[int, int] = (32, 32)
    classes: int = 2
    noise: float = 0.05
    min_fg: float = 0.05
    max_fg: float = 0.6
    distractors: tuple[int, int] = (1, 2)


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) in [0, 1]
    mask: np.ndarray  # (H, W) int64 labels


def class_band(c: int, classes: int) -> tuple[float, float]:
    """Intensity band of foreground class ``c``; bands tile (0.35, 0.7)."""
    width = 0.35 / (classes - 1)
    lo = 0.35 + (c - 1) * width
    return lo + 0.15 * width, lo + 0.85 * width


def _shape_mask(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    h = rng.integers(H // 8, H // 2 + 1)
    w = rng.integers(W // 8, W // 2 + 1)
    y0 = rng.integers(0, H - h + 1)
    x0 = rng.integers(0, W - w + 1)
    yy, xx = np.mgrid[0:H, 0:W]
    if rng.random() < 0.5:
        return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
    cy, cx = y0 + (h - 1) / 2, x0 + (w - 1) / 2
    return ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0


def generate_sample(seed: int, index: int, cfg: TaskConfig = TaskConfig()) -> Sample:
    """Pure function of (seed, index); rejection keeps the foreground fraction in bounds."""
    rng = np.random.default_rng([seed, index])
    H, W = cfg.patch
    while True:
        image = rng.uniform(0.05, 0.2) + np.zeros((H, W))
        mask = np.zeros((H, W), dtype=np.int64)
        for _ in range(rng.integers(cfg.distractors[0], cfg.distractors[1] + 1)):
            image[_shape_mask(rng, H, W)] = rng.uniform(0.8, 0.95)
        for c in range(1, cfg.classes):
            lo, hi = class_band(c, cfg.classes)
            for _ in range(rng.integers(1, 4)):
                m = _shape_mask(rng, H, W)
                image[m] = rng.uniform(lo, hi)
                mask[m] = c
        frac = float(np.mean(mask > 0))
        if cfg.min_fg <= frac <= cfg.max_fg:
            break
    image = np.clip(image + rng.normal(0.0, cfg.noise, (H, W)), 0.0, 1.0)
    return Sample(image[None], mask)


def make_batch(seed: int, indices, cfg: TaskConfig) -> tuple[np.ndarray, np.ndarray]:
    samples = [generate_sample(seed, int(i), cfg) for i in indices]
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


class Dataset:
    """Lazily generated, cached samples addressed by integer id."""

    def __init__(self, seed: int, cfg: TaskConfig):
        self.seed = seed
        self.cfg = cfg
        self._cache: dict[int, Sample] = {}

    def __getitem__(self, i: int) -> Sample:
        s = self._cache.get(i)
        if s is None:
            s = self._cache[i] = generate_sample(self.seed, i, self.cfg)
        return s

    def batch(self, ids) -> tuple[np.ndarray, np.ndarray]:
        samples = [self[int(i)] for i in ids]
        return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


def one_hot(mask: np.ndarray, classes: int) -> np.ndarray:
    """[B,H,W] labels -> [B,C,H,W] float indicator."""
    return (mask[:, None] == np.arange(classes)[None, :, None, None]).astype(np.float64)


def seg_loss(logits, mask: np.ndarray) -> T.Tensor:
    """Even sum of soft Dice loss and pixelwise cross-entropy.

    Dice is computed per (sample, class), background included, and averaged.
    """
    logits = T._tensor(logits)
    B, C, H, W = logits.shape
    if mask.shape != (B, H, W):
        raise T.ShapeError(f"seg_loss: mask {mask.shape} does not match logits {logits.shape}")
    y = one_hot(mask, C)
    logp = T.log_softmax(logits, axis=1)
    ce = T.scale(T.sum_(T.mul(logp, y)), -1.0 / (B * H * W))
    prob = T.softmax(logits, axis=1)
    inter = T.sum_(T.mul(prob, y), axis=(2, 3))
    denom = T.add(T.sum_(prob, axis=(2, 3)), y.sum(axis=(2, 3)) + DICE_SMOOTH)
    num = T.scale(inter, 2.0) + DICE_SMOOTH
    dice = T.mul(num, _reciprocal(denom))
    dice_loss = 1.0 - T.mean(dice)
    return T.scale(T.add(dice_loss, ce), 0.5)


def _reciprocal(x: T.Tensor) -> T.Tensor:
    y = 1.0 / x.data
    return T._make(y, (x,), lambda g: (-g * y * y,), "reciprocal")


def dice_scores(pred: np.ndarray, mask: np.ndarray, classes: int) -> np.ndarray:
    """Hard Dice per foreground class, aggregated over all given pixels."""
    out = []
    for c in range(1, classes):
        p, m = pred == c, mask == c
        denom = p.sum() + m.sum()
        out.append(1.0 if denom == 0 else 2.0 * np.logical_and(p, m).sum() / denom)
    return np.array(out)


def split(train_ids, ratio: float = 0.5, seed: int = 0) -> tuple[list[int], list[int]]:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    ids = list(train_ids)
    perm = np.random.default_rng(seed).permutation(len(ids))
    n1 = int(round(ratio * len(ids)))
    return sorted(ids[k] for k in perm[:n1]), sorted(ids[k] for k in perm[n1:])


def export_dataset(out_dir, seed: int, indices, cfg: TaskConfig = TaskConfig()):
    """Write images/masks as an .npz archive plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, masks = make_batch(seed, indices, cfg)
    with open(out / "data.npz", "wb") as fh:
        np.savez(fh, images=images, masks=masks)
    manifest = {"seed": seed, "indices": [int(i) for i in indices], "task": asdict(cfg),
                "images_shape": list(images.shape), "masks_shape": list(masks.shape)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))


def import_dataset(out_dir) -> tuple[np.ndarray, np.ndarray, dict]:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    with np.load(out / "data.npz") as z:
        images, masks = z["images"].copy(), z["masks"].copy()
    if list(images.shape) != manifest["images_shape"] or list(masks.shape) != manifest["masks_shape"]:
        raise ValueError("dataset arrays do not match their manifest")
    return images, masks, manifest
