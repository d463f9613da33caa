"""CAM-based pseudo-labels separating foreground semantics from background.

Pipeline per image: class activation map for the ground-truth class,
averaged over rescaled and flipped copies, Gaussian-smoothed, min-max
normalised, thresholded, and finally turned into a label map whose pixels
are either the image's class ``y`` or the background index ``K``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, InputError, ModeError
from .model import K_CLASS, DualHeadModel, as_batch, upsample

THRESHOLD_MODES = ("fixed", "mean")


@dataclass
class MaskConfig:
    scales: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0)
    use_flips: bool = True
    gaussian_sigma: float = 1.0
    threshold_mode: str = "fixed"
    theta: float = 0.5

    def validate(self):
        if not self.scales:
            raise ConfigError("scales must be non-empty")
        if any(s <= 0 for s in self.scales):
            raise ConfigError(f"scales must be positive, got {self.scales}")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ConfigError(f"threshold_mode must be one of {THRESHOLD_MODES}")
        if not 0 < self.theta < 1:
            raise ConfigError("theta must lie in (0, 1)")
        if self.gaussian_sigma < 0:
            raise ConfigError("gaussian_sigma must be >= 0")
        return self


def cam_from_features(weights, features, y, out_size=None):
    """``M[i, j] = weights[y] . features[:, i, j]`` (bias excluded).

    ``weights`` is ``n_out x C``, ``features`` is ``C x h x w``.  With
    ``out_size`` the map is bilinearly resized (corner-aligned) to it.
    """
    w = torch.as_tensor(np.asarray(weights), dtype=torch.float64)
    g = torch.as_tensor(np.asarray(features), dtype=torch.float64)
    m = torch.einsum("c,chw->hw", w[y], g)
    if out_size is not None:
        m = upsample(m[None, None], out_size)[0, 0]
    return m.numpy()


def _check(model, labels):
    if model.mode != K_CLASS:
        raise ModeError(f"CAM needs the {K_CLASS} classifier, got a {model.mode} model")
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise InputError(f"class index out of range [0, {model.num_classes})")


@torch.no_grad()
def _cam_batch(model, x, labels):
    """Raw CAMs at feature resolution, ``N x h x w`` float64."""
    w, _ = model.classifier_weights()
    g = model.features(x).double()
    wy = w.double()[torch.as_tensor(labels, dtype=torch.long)]
    return torch.einsum("nc,nchw->nhw", wy, g)


@torch.no_grad()
def cam(model: DualHeadModel, image, y):
    """Class activation map of one image for class ``y``, resized to H x W."""
    _check(model, [y])
    model.eval()
    x = as_batch(image)
    m = _cam_batch(model, x, [y])
    return upsample(m[:, None], x.shape[-2:])[0, 0].numpy()


@torch.no_grad()
def multiscale_cam(model: DualHeadModel, images, labels, cfg: MaskConfig, batch_size=256):
    """Ensemble CAM over scales x flips, then Gaussian smoothing.

    ``images`` is ``N x 3 x H x W`` (or a single ``3 x H x W`` image with a
    scalar label); returns float64 maps of shape ``N x H x W`` (or ``H x W``).
    """
    cfg.validate()
    single = np.ndim(labels) == 0
    labels = np.atleast_1d(np.asarray(labels))
    _check(model, labels)
    model.eval()
    x_all = as_batch(images)
    H, W = x_all.shape[-2:]
    variants = [(s, f) for s in cfg.scales for f in ((False, True) if cfg.use_flips else (False,))]
    for s, _ in variants:
        size = int(round(H * s))
        if size // model.stride < 1:
            raise ConfigError(f"scale {s} gives a {size}px input and an empty feature map")

    out = np.empty((len(x_all), H, W))
    for i in range(0, len(x_all), batch_size):
        x = x_all[i:i + batch_size]
        y = labels[i:i + batch_size]
        acc = torch.zeros(len(x), H, W, dtype=torch.float64)
        for s, flip in variants:
            size = (int(round(H * s)), int(round(W * s)))
            xs = upsample(x, size)
            if flip:
                xs = xs.flip(-1)
            m = _cam_batch(model, xs, y)
            if flip:
                m = m.flip(-1)
            acc += upsample(m[:, None], (H, W))[:, 0]
        out[i:i + batch_size] = (acc / len(variants)).numpy()

    if cfg.gaussian_sigma > 0:
        for k in range(len(out)):
            out[k] = gaussian_filter(out[k], cfg.gaussian_sigma, mode="nearest")
    return out[0] if single else out


def normalize_map(m):
    """Min-max normalise to [0, 1]; a constant map becomes all zeros.

    Accepts one ``H x W`` map or a stack ``N x H x W`` (normalised per map).
    """
    m = np.asarray(m, dtype=np.float64)
    flat = m.reshape(-1, *m.shape[-2:])
    lo = flat.min(axis=(1, 2), keepdims=True)
    span = flat.max(axis=(1, 2), keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (flat - lo) / safe, 0.0)
    return out.reshape(m.shape)


def threshold_mask(m, cfg: MaskConfig):
    """Foreground iff value >= threshold (``theta``, or the map mean)."""
    m = np.asarray(m, dtype=np.float64)
    if cfg.threshold_mode == "mean":
        t = m.mean(axis=(-2, -1), keepdims=True)
    elif cfg.threshold_mode == "fixed":
        t = cfg.theta
    else:
        raise ConfigError(f"unknown threshold_mode {cfg.threshold_mode!r}")
    return m >= t


def build_label_map(mask, y, num_classes):
    K = int(num_classes)
    if not 0 <= y < K:
        raise InputError(f"class {y} out of range [0, {K})")
    return np.where(np.asarray(mask, dtype=bool), y, K).astype(np.int64)


def mask_iou(pred, truth):
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise InputError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, truth).sum() / union)


def generate_pseudo_masks(model: DualHeadModel, examples, cfg: MaskConfig):
    """Binary pseudo-masks and (K+1) label maps for a labelled ExampleSet."""
    images, labels = examples.images(), examples.labels()
    maps = normalize_map(multiscale_cam(model, images, labels, cfg))
    masks = threshold_mask(maps, cfg)
    K = model.num_classes
    label_maps = np.where(masks, labels[:, None, None], K).astype(np.int64)
    return masks, label_maps


def save_masks(directory, example_ids, masks, labels, num_classes, cfg: MaskConfig, stats=None):
    """Persist masks as 0/255 PNGs plus a manifest mapping id -> file."""
    directory = Path(directory)
    (directory / "png").mkdir(parents=True, exist_ok=True)
    records = []
    for eid, m, y in zip(example_ids, masks, labels):
        rel = f"png/{eid}.png"
        Image.fromarray(np.asarray(m, dtype=np.uint8) * 255).save(directory / rel, format="PNG")
        records.append({"id": eid, "mask": rel, "label": int(y)})
    manifest = {
        "num_classes": int(num_classes),
        "background_index": int(num_classes),
        "config": {
            "scales": list(cfg.scales), "use_flips": cfg.use_flips,
            "gaussian_sigma": cfg.gaussian_sigma, "threshold_mode": cfg.threshold_mode,
            "theta": cfg.theta,
        },
        "stats": stats or {},
        "masks": records,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_masks(directory):
    """Return ``(ids, masks, label_maps, manifest)`` from ``save_masks`` output."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    K = manifest["background_index"]
    ids, masks, maps = [], [], []
    for r in manifest["masks"]:
        m = np.asarray(Image.open(directory / r["mask"])) > 127
        ids.append(r["id"])
        masks.append(m)
        maps.append(np.where(m, r["label"], K))
    return ids, np.stack(masks), np.stack(maps).astype(np.int64), manifest
