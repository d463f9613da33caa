"""Dual-head network: one feature extractor and one 1x1 classifier, two heads.

The dense head upsamples the feature map bilinearly and classifies every
pixel; the global head average-pools the feature map and classifies the
pooled vector.  Both heads are weight-free, so switching between them
(``convert_dense_to_classifier``) turns a trained dense predictor into an
image classifier without touching a single parameter.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, DataError, InputError, ModeError, TrainingError

K_CLASS = "k_class"
K_PLUS_1 = "k_plus_1"
MODES = (K_CLASS, K_PLUS_1)
DENSE, GLOBAL = "dense", "global"

PROB_FLOOR = 1e-12
CHECKPOINT_VERSION = 1


# --------------------------------------------------------------------------
# modules
# --------------------------------------------------------------------------

def _block(c_in, c_out):
    return [nn.Conv2d(c_in, c_out, 3, padding=1, bias=False), nn.BatchNorm2d(c_out), nn.ReLU(inplace=True)]


class FeatureExtractor(nn.Module):
    """Small fully-convolutional extractor with output stride 4."""

    stride = 4

    def __init__(self, width=16, channels=64):
        super().__init__()
        self.width = width
        self.channels = channels
        self.body = nn.Sequential(
            *_block(3, width), nn.MaxPool2d(2),
            *_block(width, 2 * width), *_block(2 * width, 2 * width), nn.MaxPool2d(2),
            *_block(2 * width, channels), *_block(channels, channels),
        )

    def forward(self, x):
        return self.body(x)


def upsample(x, size):
    """Bilinear resize with corner-aligned sampling; identity at equal size."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=True)


class DualHeadModel(nn.Module):
    """Feature extractor plus per-pixel linear classifier.

    ``mode`` fixes the number of outputs (K for ``k_class``, K+1 for
    ``k_plus_1``; the background category sits at index K).  ``head`` picks
    what ``forward`` returns: per-pixel probabilities (``dense``) or
    image-level logits (``global``).
    """

    def __init__(self, num_classes, mode=K_CLASS, image_size=32, width=16, channels=64,
                 head=GLOBAL, extractor=None, classifier=None):
        super().__init__()
        if mode not in MODES:
            raise ModeError(f"unknown mode {mode!r}")
        if head not in (DENSE, GLOBAL):
            raise ModeError(f"unknown head {head!r}")
        self.num_classes = int(num_classes)
        self.mode = mode
        self.head = head
        self.image_size = int(image_size)
        self.extractor = extractor if extractor is not None else FeatureExtractor(width, channels)
        n_out = self.num_outputs
        if classifier is None:
            classifier = nn.Conv2d(self.extractor.channels, n_out, kernel_size=1)
        if classifier.out_channels != n_out:
            raise ModeError(f"classifier has {classifier.out_channels} outputs, mode {mode} needs {n_out}")
        self.classifier = classifier

    @property
    def num_outputs(self):
        return self.num_classes + (1 if self.mode == K_PLUS_1 else 0)

    @property
    def stride(self):
        return self.extractor.stride

    @property
    def channels(self):
        return self.extractor.channels

    def classifier_weights(self):
        """``(weight, bias)`` with weight shaped ``num_outputs x C``."""
        return self.classifier.weight[:, :, 0, 0], self.classifier.bias

    def check_input(self, x):
        H = self.image_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != H or x.shape[3] != H:
            raise InputError(f"expected input of shape (N, 3, {H}, {H}), got {tuple(x.shape)}")

    # the building blocks below accept any spatial size
    def features(self, x):
        return self.extractor(x)

    def pixel_logits(self, x):
        """Per-pixel logits at feature resolution (before upsampling)."""
        return self.classifier(self.features(x))

    def pooled_features(self, x):
        return self.features(x).mean(dim=(2, 3))

    def dense_logits(self, x):
        """Classifier applied to the upsampled feature map."""
        g = self.features(x)
        return self.classifier(upsample(g, x.shape[-2:]))

    def dense_logits_fast(self, x):
        # upsample-then-classify equals classify-then-upsample: both maps are
        # linear and the bilinear weights sum to one
        return upsample(self.pixel_logits(x), x.shape[-2:])

    def global_logits(self, x):
        w, b = self.classifier_weights()
        return F.linear(self.pooled_features(x), w, b)

    # checked entry points
    def forward_dense(self, x):
        self.check_input(x)
        return torch.softmax(self.dense_logits(x), dim=1)

    def forward_global(self, x):
        self.check_input(x)
        return self.global_logits(x)

    def forward(self, x):
        return self.forward_dense(x) if self.head == DENSE else self.forward_global(x)


def parameter_checksum(model: nn.Module) -> str:
    """sha256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def convert_dense_to_classifier(model: DualHeadModel) -> DualHeadModel:
    """Expose the global-pooling head of a dense (K+1) model.

    The returned model wraps the very same extractor and classifier modules,
    so parameters are shared, not copied.
    """
    if model.mode != K_PLUS_1:
        raise ModeError(f"conversion expects a {K_PLUS_1} model, got {model.mode}")
    out = DualHeadModel(model.num_classes, K_PLUS_1, model.image_size, head=GLOBAL,
                        extractor=model.extractor, classifier=model.classifier)
    out.train(model.training)
    return out


# --------------------------------------------------------------------------
# numpy-facing helpers
# --------------------------------------------------------------------------

def as_batch(images) -> torch.Tensor:
    """Accept ``N x 3 x H x W`` / ``3 x H x W`` arrays or tensors."""
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    if x.ndim == 3:
        x = x[None]
    return x.float()


@torch.no_grad()
def forward_global(model: DualHeadModel, images, batch_size=512) -> np.ndarray:
    model.eval()
    x = as_batch(images)
    return np.concatenate([model.forward_global(x[i:i + batch_size]).numpy()
                           for i in range(0, len(x), batch_size)])


@torch.no_grad()
def forward_dense(model: DualHeadModel, images, batch_size=256) -> np.ndarray:
    model.eval()
    x = as_batch(images)
    return np.concatenate([model.forward_dense(x[i:i + batch_size]).numpy()
                           for i in range(0, len(x), batch_size)])


@torch.no_grad()
def pooled_features(model: DualHeadModel, images, batch_size=512) -> np.ndarray:
    model.eval()
    x = as_batch(images)
    model.check_input(x)
    return np.concatenate([model.pooled_features(x[i:i + batch_size]).numpy()
                           for i in range(0, len(x), batch_size)])


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def pixel_ce_loss(pred, labels, eps=PROB_FLOOR):
    """Mean over pixels of ``-log pred[label]``.

    ``pred`` holds probabilities shaped ``(K+1, H, W)`` or ``(N, K+1, H, W)``;
    ``labels`` is the matching integer map.  Works on numpy arrays (float64
    result) and on torch tensors (differentiable).
    """
    if torch.is_tensor(pred):
        labels = torch.as_tensor(labels, dtype=torch.long)
        if pred.ndim == 3:
            pred, labels = pred[None], labels[None]
        p = pred.gather(1, labels[:, None]).squeeze(1)
        return -torch.log(p.clamp_min(eps)).mean()
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if pred.ndim == 3:
        pred, labels = pred[None], labels[None]
    if labels.min() < 0 or labels.max() >= pred.shape[1]:
        raise InputError("label map values out of range")
    p = np.take_along_axis(pred, labels[:, None], axis=1)[:, 0]
    return float(-np.log(np.maximum(p, eps)).mean())


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 0.01
    lr_milestones: tuple[float, ...] = (0.6, 0.9)
    lr_decay: float = 0.1
    warmup_steps: int = 0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    flip: bool = True
    random_scale: bool = False
    scale_range: tuple[float, float] = (0.5, 2.0)
    mixup: bool = False
    mixup_alpha: float = 0.1
    width: int = 16
    channels: int = 64
    deterministic: bool = True

    def validate(self):
        from .errors import ConfigError
        if self.steps <= 0:
            raise ConfigError("steps must be > 0")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be > 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError("scale_range must satisfy 0 < lo <= hi")
        return self

    def lr_at(self, step):
        lr = self.learning_rate
        if self.warmup_steps and step < self.warmup_steps:
            return lr * (step + 1) / self.warmup_steps
        for m in self.lr_milestones:
            if step >= int(m * self.steps):
                lr *= self.lr_decay
        return lr


def set_determinism(flag: bool):
    torch.use_deterministic_algorithms(bool(flag))


def _sgd(model, cfg):
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def _scaled_size(H, stride, s):
    return max(stride, int(round(H * s / stride)) * stride)


def _augment(x, y_map, cfg, gen):
    """Batch-wide flip and rescale; ``y_map`` (label maps) follows the image."""
    if cfg.flip:
        flip = torch.rand(x.shape[0], generator=gen) < 0.5
        x = torch.where(flip[:, None, None, None], x.flip(-1), x)
        if y_map is not None:
            y_map = torch.where(flip[:, None, None], y_map.flip(-1), y_map)
    if cfg.random_scale:
        lo, hi = cfg.scale_range
        s = lo + (hi - lo) * torch.rand(1, generator=gen).item()
        size = _scaled_size(x.shape[-1], FeatureExtractor.stride, s)
        if size != x.shape[-1]:
            x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=True)
            if y_map is not None:
                y_map = F.interpolate(y_map[:, None].float(), size=(size, size),
                                      mode="nearest")[:, 0].long()
    return x, y_map


def _run_sgd(model, cfg, n, loss_fn, log_every=None):
    cfg.validate()
    set_determinism(cfg.deterministic)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = _sgd(model, cfg)
    history = []
    model.train()
    for step in range(cfg.steps):
        for group in opt.param_groups:
            group["lr"] = cfg.lr_at(step)
        idx = torch.randint(0, n, (min(cfg.batch_size, n),), generator=gen)
        loss = loss_fn(idx, gen)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"loss became non-finite at step {step}", step=step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(value)
        if log_every and step % log_every == 0:
            print(f"step {step:5d}  loss {value:.4f}  lr {cfg.lr_at(step):.4g}")
    model.eval()
    return history


def train_classifier(train, cfg: TrainConfig, num_classes, image_size=None, log_every=None):
    """Train a K-class image classifier through the global head.

    ``train`` is an ExampleSet or an ``(images N x 3 x H x W, labels)`` pair.
    The loss curve is attached as ``model.loss_history``.
    """
    x_all, y_all = _unpack(train)
    K = int(num_classes)
    if y_all.numel() and (y_all.min() < 0 or y_all.max() >= K):
        raise DataError(f"labels must lie in [0, {K})")
    torch.manual_seed(cfg.seed)
    model = DualHeadModel(K, K_CLASS, image_size or x_all.shape[-1], cfg.width, cfg.channels)

    # mixup draws from the global torch RNG, seeded above
    beta = torch.distributions.Beta(torch.tensor(cfg.mixup_alpha), torch.tensor(cfg.mixup_alpha))

    def loss_fn(idx, gen):
        x, _ = _augment(x_all[idx], None, cfg, gen)
        y = y_all[idx]
        if cfg.mixup:
            lam = float(beta.sample().item())
            perm = torch.randperm(len(idx), generator=gen)
            x = lam * x + (1 - lam) * x[perm]
            logits = model.global_logits(x)
            return lam * F.cross_entropy(logits, y) + (1 - lam) * F.cross_entropy(logits, y[perm])
        return F.cross_entropy(model.global_logits(x), y)

    model.loss_history = _run_sgd(model, cfg, len(x_all), loss_fn, log_every)
    return model


def train_dense(init, train, label_maps, cfg: TrainConfig, num_classes, log_every=None):
    """Train a (K+1)-class dense predictor on per-pixel pseudo-labels.

    ``init`` is a trained model whose extractor is copied as warm start, or
    None for fresh weights.  The classifier is always freshly initialised
    with K+1 output columns.
    """
    x_all, _ = _unpack(train)
    y_maps = torch.as_tensor(np.asarray(label_maps), dtype=torch.long)
    K = int(num_classes)
    if y_maps.shape != (x_all.shape[0], x_all.shape[2], x_all.shape[3]):
        raise DataError(f"label maps {tuple(y_maps.shape)} do not match images {tuple(x_all.shape)}")
    if y_maps.numel() and (y_maps.min() < 0 or y_maps.max() > K):
        raise DataError(f"label map values must lie in [0, {K}]")
    torch.manual_seed(cfg.seed)
    width, channels = cfg.width, cfg.channels
    if init is not None:
        width, channels = init.extractor.width, init.extractor.channels
    model = DualHeadModel(K, K_PLUS_1, x_all.shape[-1], width, channels, head=DENSE)
    if init is not None:
        model.extractor.load_state_dict(init.extractor.state_dict())

    def loss_fn(idx, gen):
        x, y = _augment(x_all[idx], y_maps[idx], cfg, gen)
        return F.cross_entropy(model.dense_logits_fast(x), y)

    model.loss_history = _run_sgd(model, cfg, len(x_all), loss_fn, log_every)
    return model


def _unpack(data):
    if isinstance(data, tuple):
        x, y = data
    else:
        x, y = data.images(), data.labels()
    return as_batch(x), torch.as_tensor(np.asarray(y), dtype=torch.long)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(model: DualHeadModel, path, config=None):
    """Write weights and metadata to an ``.npz`` archive."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "mode": model.mode,
        "head": model.head,
        "num_classes": model.num_classes,
        "image_size": model.image_size,
        "stride": model.stride,
        "width": model.extractor.width,
        "channels": model.extractor.channels,
        "config": _jsonable(config),
    }
    arrays = {f"w/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
             **arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path, expect_mode=None) -> DualHeadModel:
    try:
        with np.load(Path(path), allow_pickle=False) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            state = {k[2:]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("w/")}
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
    if expect_mode is not None and meta["mode"] != expect_mode:
        raise ModeError(f"checkpoint {path} holds a {meta['mode']} model, expected {expect_mode}")
    model = DualHeadModel(meta["num_classes"], meta["mode"], meta["image_size"], meta["width"],
                          meta["channels"], head=meta["head"])
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {path} has incompatible weights: {exc}") from exc
    model.eval()
    model.config = meta.get("config")
    return model


def _jsonable(config):
    if config is None:
        return None
    if hasattr(config, "__dataclass_fields__"):
        return asdict(config)
    return config
