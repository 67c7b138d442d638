"""Dataset manifests, the train/validation split and the epoch loop."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import RunConfig
from .errors import ConfigError, DimensionError
from .metrics import ConfusionMatrix, accuracy_metrics, confusion_matrix
from .model import (Model, band_statistics, build_model, normalize, poly_lr,
                    predict_mask, train_step)
from .raster import LUDWIGIA, read_mask, read_raster

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Sample:
    image: str
    mask: str
    group: str = ""
    pred: str = ""


def read_manifest(path) -> list[Sample]:
    """Rows of ``image,mask[,group]`` (or ``pred,mask,group``); paths relative to the file."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or ())
        if "mask" not in cols or not cols & {"image", "pred"}:
            raise ConfigError(f"{path}: manifest needs a mask column and image or pred")
        out = []
        for row in reader:
            def resolve(key):
                v = (row.get(key) or "").strip()
                return os.path.join(base, v) if v else ""
            out.append(Sample(resolve("image"), resolve("mask"),
                              (row.get("group") or "").strip(), resolve("pred")))
    return out


def _name_hash(path: str) -> str:
    return hashlib.sha256(os.path.basename(path).encode("utf-8")).hexdigest()


def split_samples(samples: Sequence[Sample], val_fraction: float = 0.2):
    """Deterministic split by file-name hash, stratified by group."""
    by_group: dict[str, list[Sample]] = {}
    for s in samples:
        by_group.setdefault(s.group, []).append(s)
    train, val = [], []
    for group in sorted(by_group):
        items = sorted(by_group[group], key=lambda s: (_name_hash(s.image or s.pred), s.image))
        n_val = int(math.floor(val_fraction * len(items) + 0.5))
        if n_val >= len(items):
            n_val = len(items) - 1
        held = {id(s) for s in items[:n_val]}
        for s in by_group[group]:
            (val if id(s) in held else train).append(s)
    return train, val


def load_pairs(samples: Sequence[Sample]):
    pairs = []
    for s in samples:
        img, mask = read_raster(s.image), read_mask(s.mask)
        if (img.width, img.height) != (mask.width, mask.height):
            raise DimensionError(f"{s.image} and {s.mask} differ in size")
        pairs.append((img, mask))
    return pairs


def _crop(x: np.ndarray, m: np.ndarray, size: int, rng):
    h, w = m.shape
    if size <= 0 or (size >= h and size >= w):
        return x, m
    ch, cw = min(size, h), min(size, w)
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return x[:, y0 : y0 + ch, x0 : x0 + cw], m[y0 : y0 + ch, x0 : x0 + cw]


def _flip(x, m, rng):
    if rng.random() < 0.5:
        x, m = x[:, :, ::-1], m[:, ::-1]
    if rng.random() < 0.5:
        x, m = x[:, ::-1, :], m[::-1, :]
    return x, m


def ludwigia_iou(model: Model, pairs, tile: int | None, overlap: int, workers: int = 1):
    """Pooled class-1 IoU of eval-mode predictions; None when undefined."""
    def predict(pair):
        return confusion_matrix(predict_mask(model, pair[0], tile, overlap), pair[1],
                                model.config.num_classes)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            mats = list(pool.map(predict, pairs))
    else:
        mats = [predict(p) for p in pairs]
    total = ConfusionMatrix.zeros(model.config.num_classes)
    for cm in mats:
        total = total + cm
    return accuracy_metrics(total)[LUDWIGIA].iou


def fit(cfg: RunConfig, train_pairs, val_pairs=(), workers: int = 1):
    """Train a fresh model; returns ``(model, history)``."""
    model = build_model(cfg.model_config())
    if not train_pairs:
        raise ConfigError("no training samples")
    mean, std = band_statistics([img for img, _ in train_pairs])
    model.set_normalization(mean, std)
    data = [(normalize(model, img.data), mask.data) for img, mask in train_pairs]
    rng = np.random.default_rng(cfg.seed)
    per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = cfg.epochs * per_epoch
    tile = cfg.val_tile or None
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        losses = []
        for b in range(per_epoch):
            xs, ms = [], []
            for idx in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]:
                x, m = _crop(*data[idx], cfg.crop_size, rng)
                if cfg.augment_flips:
                    x, m = _flip(x, m, rng)
                xs.append(x)
                ms.append(m)
            if len({m.shape for m in ms}) > 1:
                raise DimensionError("images in a batch differ in size; set crop_size")
            lr = poly_lr(cfg.lr, model.step, total, cfg.poly_power)
            losses.append(train_step(model, np.stack(xs), np.stack(ms), lr, cfg.momentum,
                                     cfg.weight_decay))
        val_iou = ludwigia_iou(model, val_pairs, tile, cfg.val_overlap, workers) if val_pairs else None
        entry = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "val_iou": val_iou}
        history.append(entry)
        log.info("epoch %d loss %.6f val_iou %s", entry["epoch"], entry["loss"],
                 "n/a" if val_iou is None else f"{val_iou:.4f}")
    return model, history
