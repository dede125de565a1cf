"""Synthetic clip generation, clip storage, frame sampling, and augmentation.

The synthetic task is a moving bright blob over textured noise: the class is
the blob's drift direction, so any single frame is ambiguous by construction
and only spatio-temporal features separate the classes. Every random choice
is derived from explicit seeds, so the full pipeline is bitwise reproducible
regardless of execution order.
"""

from __future__ import annotations

import hashlib
import json
import os
import numpy as np
from dataclasses import dataclass, field

from . import container


@dataclass
class ClipRecord:
    frames: np.ndarray            # (3, F, H, W), values in [0, 1]
    label: object                 # int class index or binary vector
    clip_id: str


@dataclass
class Dataset:
    classes: list
    clips: list                   # list[ClipRecord]
    multi_label: bool = False

    def __len__(self):
        return len(self.clips)


@dataclass
class AugmentConfig:
    out_frames: int = 32
    temporal_stride: int = 2
    jitter_range: tuple = (255, 320)
    crop: int = 224
    flip_prob: float = 0.5
    channel_means: tuple = (0.45, 0.45, 0.45)
    enabled: bool = True

    def __post_init__(self):
        if self.jitter_range[0] < self.crop:
            raise ValueError(
                f"jitter range {self.jitter_range} smaller than crop {self.crop}")


# -- synthetic generation ------------------------------------------------------


def _directions(k: int) -> np.ndarray:
    """Unit drift directions per class: left/right/up/down for K <= 4, then
    evenly spaced angles."""
    base = [(-1.0, 0.0), (1.0, 0.0), (0.0, -1.0), (0.0, 1.0)]
    if k <= 4:
        return np.array(base[:k])
    ang = 2 * np.pi * np.arange(k) / k
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def synth_generate(classes: int, clips_per_class: int, frames: int, size: int,
                   seed: int, multi_label: bool = False) -> Dataset:
    """Deterministic moving-blob dataset. Blob start positions and appearance
    are drawn from the same distribution for every class; only the motion
    differs."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    dirs = _directions(classes)
    speed = size / 16.0           # pixels per frame; crosses ~half the frame
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    sigma = size / 10.0
    records = []
    for k in range(classes):
        for j in range(clips_per_class):
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, k, j]))
            # class-independent draws, in a fixed order
            start = rng.uniform(0, size, size=2)          # (x, y)
            background = rng.uniform(0.05, 0.35, size=(3, size, size))
            tint = rng.uniform(0.5, 0.9, size=3)
            jitter = rng.uniform(0.8, 1.2)                # speed jitter, all classes
            dx, dy = dirs[k] * speed * jitter
            clip = np.empty((3, frames, size, size), dtype=np.float32)
            for f in range(frames):
                cx = (start[0] + dx * f) % size
                cy = (start[1] + dy * f) % size
                # wrap-around distance keeps the blob visible at the border
                ddx = np.abs(xx - cx)
                ddy = np.abs(yy - cy)
                ddx = np.minimum(ddx, size - ddx)
                ddy = np.minimum(ddy, size - ddy)
                blob = np.exp(-(ddx ** 2 + ddy ** 2) / (2 * sigma ** 2))
                frame = background + tint[:, None, None] * blob[None]
                clip[:, f] = np.clip(frame, 0.0, 1.0)
            if multi_label:
                vec = np.zeros(classes, dtype=np.float32)
                vec[k] = 1.0
                label = vec
            else:
                label = k
            records.append(ClipRecord(clip, label, f"synth-{seed}-c{k}-{j}"))
    return Dataset(classes=[f"class_{k}" for k in range(classes)],
                   clips=records, multi_label=multi_label)


# -- frame sampling ------------------------------------------------------------


def sample_frames(frames: np.ndarray, out_frames: int, stride: int = 1,
                  mode: str = "eval", rng=None) -> np.ndarray:
    """eval: equal-interval indices i*floor(F/m); train: a random contiguous
    window of length m*stride, then every stride-th frame."""
    f = frames.shape[1]
    m = out_frames
    if mode == "eval":
        if f < m:
            raise ValueError(f"need at least {m} frames, got {f}")
        step = f // m
        idx = np.arange(m) * step
    elif mode == "train":
        if f < m * stride:
            raise ValueError(f"need at least {m * stride} frames, got {f}")
        start = int(rng.integers(0, f - m * stride + 1))
        idx = start + np.arange(m) * stride
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return frames[:, idx]


# -- resize / crop / flip ------------------------------------------------------


def bilinear_resize(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of (..., H, W) with half-pixel-centre sampling."""
    h, w = frames.shape[-2:]
    if (h, w) == (out_h, out_w):
        return frames.copy()

    def coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    ylo, yhi, yf = coords(h, out_h)
    xlo, xhi, xf = coords(w, out_w)
    top = frames[..., ylo, :]
    bot = frames[..., yhi, :]
    rows = top + (bot - top) * yf[:, None]
    left = rows[..., :, xlo]
    right = rows[..., :, xhi]
    return (left + (right - left) * xf).astype(frames.dtype)


def jitter_crop_flip(frames: np.ndarray, cfg: AugmentConfig, rng=None,
                     training: bool = True) -> np.ndarray:
    """Scale-jittered random crop and flip shared by all frames of one clip;
    eval mode resizes the shorter side to min(jitter_range) and centre-crops."""
    h, w = frames.shape[-2:]
    if training and cfg.enabled:
        short = int(rng.integers(cfg.jitter_range[0], cfg.jitter_range[1] + 1))
    else:
        short = cfg.jitter_range[0]
    if h <= w:
        nh, nw = short, max(1, int(round(w * short / h)))
    else:
        nh, nw = max(1, int(round(h * short / w))), short
    resized = bilinear_resize(frames, nh, nw)
    crop = cfg.crop
    if nh < crop or nw < crop:
        raise ValueError(f"crop {crop} larger than resized frame {nh}x{nw}")
    if training and cfg.enabled:
        top = int(rng.integers(0, nh - crop + 1))
        left = int(rng.integers(0, nw - crop + 1))
        flip = bool(rng.random() < cfg.flip_prob)
    else:
        top = (nh - crop) // 2
        left = (nw - crop) // 2
        flip = False
    out = resized[..., top:top + crop, left:left + crop]
    if flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def mean_normalize(frames: np.ndarray, means) -> np.ndarray:
    means = np.asarray(means, dtype=frames.dtype)
    return frames - means[:, None, None, None]


def augment_clip(clip: ClipRecord, cfg: AugmentConfig, seed: int,
                 training: bool) -> np.ndarray:
    rng = np.random.default_rng(seed)
    frames = sample_frames(clip.frames, cfg.out_frames,
                           cfg.temporal_stride if training else 1,
                           "train" if training else "eval", rng)
    frames = jitter_crop_flip(frames, cfg, rng, training)
    return mean_normalize(frames, cfg.channel_means)


# -- batching ------------------------------------------------------------------


def clip_seed(shuffle_seed: int, epoch: int, clip_id: str) -> int:
    """Per-clip augmentation seed, independent of worker count or batch order."""
    digest = hashlib.sha256(f"{shuffle_seed}:{epoch}:{clip_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def batch_iterator(dataset: Dataset, batch_size: int, cfg: AugmentConfig,
                   shuffle_seed: int = 0, epoch: int = 0, training: bool = True):
    """Yield (clips (N,3,m,crop,crop) float32, labels) with an epoch-seeded
    shuffle; the final partial batch is emitted."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    order = np.arange(len(dataset))
    if training:
        rng = np.random.default_rng(np.random.SeedSequence([shuffle_seed, epoch]))
        rng.shuffle(order)
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        clips = []
        labels = []
        for i in idx:
            rec = dataset.clips[i]
            clips.append(augment_clip(rec, cfg, clip_seed(shuffle_seed, epoch,
                                                          rec.clip_id), training))
            labels.append(rec.label)
        batch = np.stack(clips).astype(np.float32)
        if dataset.multi_label:
            labels = np.stack(labels)
        else:
            labels = np.asarray(labels, dtype=np.int64)
        yield batch, labels


# -- clip and manifest i/o -----------------------------------------------------


def save_clip(path, clip: ClipRecord) -> None:
    label = np.atleast_1d(np.asarray(clip.label, dtype=np.float32))
    container.save_tensors(path, {"frames": clip.frames.astype(np.float32),
                                  "label": label})


def load_clip(path, clip_id: str | None = None, multi_label: bool = False) -> ClipRecord:
    entries = container.load_tensors(path)
    frames = entries["frames"]
    label = entries["label"]
    if not multi_label:
        label = int(label[0])
    return ClipRecord(frames, label,
                      clip_id if clip_id is not None else os.path.basename(path))


def save_dataset(dirpath, dataset: Dataset) -> str:
    """Write one clip file per record plus a JSON manifest; returns the
    manifest path."""
    os.makedirs(dirpath, exist_ok=True)
    items = []
    for rec in dataset.clips:
        fname = f"{rec.clip_id}.kft"
        save_clip(os.path.join(dirpath, fname), rec)
        label = rec.label.tolist() if isinstance(rec.label, np.ndarray) else rec.label
        items.append({"path": fname, "label": label, "id": rec.clip_id})
    manifest = {"classes": dataset.classes, "multi_label": dataset.multi_label,
                "clips": items}
    mpath = os.path.join(dirpath, "manifest.json")
    with open(mpath, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return mpath


def load_dataset(manifest_path) -> Dataset:
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    base = os.path.dirname(manifest_path)
    multi = bool(manifest["multi_label"])
    clips = []
    for item in manifest["clips"]:
        rec = load_clip(os.path.join(base, item["path"]), item["id"], multi)
        clips.append(rec)
    return Dataset(classes=manifest["classes"], clips=clips, multi_label=multi)
