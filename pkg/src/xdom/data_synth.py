"""Shapes-on-textures image generator with exact foreground masks.

Every image is a pure function of ``(spec, split, index)``: one filled shape
(the semantic content) drawn over a procedural background texture (the
domain).  Held-out shapes give semantic shift, held-out textures give domain
shift, and the two are independent so each can be switched on separately.

Pixel values are quantised to 8 bits at generation time, so an example read
back from disk is bit-identical to the one produced in memory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, PlacementError

SPLIT_TAGS = ("id_train", "id_test", "ood_semantic", "ood_domain", "ood_both")
OOD_KINDS = ("semantic", "domain", "both")
NO_LABEL = -1

_SPLIT_CODES = {tag: i for i, tag in enumerate(SPLIT_TAGS)}


# --------------------------------------------------------------------------
# shapes
# --------------------------------------------------------------------------
# Each rule receives integer row/col grids over a size x size box and returns
# the inclusion mask.  Coordinates are doubled pixel centres measured from the
# box centre (2*i + 1 - size), which keeps every test in exact integer math.

def _arm(size):
    return max(1, size // 3)


def _square(u, v, size):
    return np.ones(u.shape, dtype=bool)


def _circle(u, v, size):
    return u * u + v * v <= size * size


def _triangle(u, v, size):
    row = (v + size - 1) // 2
    return np.abs(u) <= row + 1


def _cross(u, v, size):
    t = _arm(size)
    return (np.abs(u) <= t) | (np.abs(v) <= t)


def _diamond(u, v, size):
    return np.abs(u) + np.abs(v) <= size


def _ring(u, v, size):
    r2 = u * u + v * v
    inner = size // 2
    return (r2 <= size * size) & (r2 >= inner * inner)


def _ex(u, v, size):
    t = _arm(size)
    return (np.abs(u - v) <= t) | (np.abs(u + v) <= t)


SHAPES = {
    "square": _square,
    "circle": _circle,
    "triangle": _triangle,
    "cross": _cross,
    "diamond": _diamond,
    "ring": _ring,
    "ex": _ex,
}


def shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` raster of ``shape`` filling its bounding box."""
    if shape not in SHAPES:
        raise ConfigError(f"unknown shape {shape!r}")
    if size < 2:
        raise PlacementError(f"shape size must be >= 2, got {size}")
    idx = 2 * np.arange(size) + 1 - size
    v, u = np.meshgrid(idx, idx, indexing="ij")
    return SHAPES[shape](u, v, size)


# --------------------------------------------------------------------------
# textures
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Texture:
    kind: str  # stripes | checker | noise
    period: float = 4.0
    angle: float = 0.0
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    low: tuple[float, float] = (0.05, 0.15)   # range of the darkest value
    high: tuple[float, float] = (0.45, 0.55)  # range of the brightest value


# ID backgrounds use cool tints, the held-out ones warm tints over the same
# brightness range, so the domain shift is carried by colour and pattern
# rather than by how bright the scenery is.
TEXTURES = {
    # in-distribution defaults
    "stripes_h4": Texture("stripes", period=4.0, angle=90.0, tint=(0.55, 0.75, 1.0)),
    "noise": Texture("noise", period=1.0, tint=(0.8, 1.0, 0.7)),
    # held out by default
    "checker_2": Texture("checker", period=2.0, tint=(1.0, 0.55, 0.35)),
    "stripes_d6": Texture("stripes", period=6.0, angle=45.0, tint=(1.0, 0.8, 0.3)),
    "blotch_4": Texture("noise", period=4.0, tint=(1.0, 0.4, 0.6)),
    "stripes_v3": Texture("stripes", period=3.0, angle=0.0, tint=(0.9, 0.6, 0.2)),
}


# grey level of the shape fill; it overlaps the background brightness range
FG_LEVEL = (0.3, 1.0)
FG_NOISE = 0.03


def texture_pattern(texture_id: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Single-channel pattern in [0, 1] with a random phase."""
    try:
        tex = TEXTURES[texture_id]
    except KeyError:
        raise ConfigError(f"unknown texture {texture_id!r}") from None
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if tex.kind == "stripes":
        a = np.deg2rad(tex.angle)
        phase = rng.uniform(0.0, 2 * np.pi)
        proj = xx * np.cos(a) + yy * np.sin(a)
        return 0.5 + 0.5 * np.sin(2 * np.pi * proj / tex.period + phase)
    if tex.kind == "checker":
        cell = int(tex.period)
        oy, ox = rng.integers(0, 2 * cell, size=2)
        return (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
    if tex.kind == "noise":
        cell = int(tex.period)
        n = -(-size // cell)
        coarse = rng.uniform(0.0, 1.0, size=(n, n))
        return np.kron(coarse, np.ones((cell, cell)))[:size, :size]
    raise ConfigError(f"texture {texture_id!r} has unknown kind {tex.kind!r}")


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_example(shape, texture_id, placement, seed, image_size=32):
    """Draw ``shape`` at ``placement = (top, left, size)`` over a texture.

    ``shape`` may be None for a texture-only image.  Returns ``(image, mask)``
    with ``image`` a float32 ``H x W x 3`` array on the 8-bit grid and
    ``mask`` a boolean ``H x W`` array marking exactly the shape's pixels.
    """
    H = int(image_size)
    rng = np.random.default_rng(seed)
    mask = np.zeros((H, H), dtype=bool)
    if shape is not None:
        top, left, size = (int(p) for p in placement)
        if size < 2 or top < 0 or left < 0 or top + size > H or left + size > H:
            raise PlacementError(
                f"placement {(top, left, size)} does not fit a {H}x{H} frame")
        mask[top:top + size, left:left + size] = shape_mask(shape, size)

    pattern = texture_pattern(texture_id, H, rng)
    tex = TEXTURES[texture_id]
    lo = rng.uniform(*tex.low)
    hi = rng.uniform(*tex.high)
    tint = np.asarray(tex.tint)
    image = (lo + (hi - lo) * pattern)[..., None] * tint

    if shape is not None:
        level = rng.uniform(*FG_LEVEL)
        fg = level + rng.normal(0.0, FG_NOISE, size=(H, H))
        image[mask] = np.clip(fg[mask], 0.0, 1.0)[:, None]

    return (quantize(image).astype(np.float32) / 255.0), mask


# --------------------------------------------------------------------------
# dataset containers
# --------------------------------------------------------------------------

@dataclass
class DatasetSpec:
    num_classes: int = 4
    image_size: int = 32
    shapes_per_class: tuple[str, ...] = ("square", "circle", "triangle", "cross")
    id_texture_ids: tuple[str, ...] = ("stripes_h4", "noise")
    fg_fraction_range: tuple[float, float] = (0.1, 0.35)
    n_train: int = 2000
    n_test: int = 400
    seed: int = 0

    def validate(self):
        K, H = self.num_classes, self.image_size
        if K < 2:
            raise ConfigError(f"num_classes must be >= 2, got {K}")
        if H < 16:
            raise ConfigError(f"image_size must be >= 16, got {H}")
        if len(self.shapes_per_class) != K:
            raise ConfigError("shapes_per_class needs exactly one shape per class")
        if len(set(self.shapes_per_class)) != K:
            raise ConfigError("shapes_per_class contains duplicates")
        for s in self.shapes_per_class:
            if s not in SHAPES:
                raise ConfigError(f"unknown shape {s!r}")
        if not self.id_texture_ids:
            raise ConfigError("id_texture_ids is empty")
        for t in self.id_texture_ids:
            if t not in TEXTURES:
                raise ConfigError(f"unknown texture {t!r}")
        lo, hi = self.fg_fraction_range
        if not 0 < lo <= hi < 1:
            raise ConfigError(f"fg_fraction_range must satisfy 0 < lo <= hi < 1, got {(lo, hi)}")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("n_train and n_test must be non-negative")
        for s in self.shapes_per_class:
            valid_sizes(s, H, self.fg_fraction_range)
        return self

    @property
    def held_out_shapes(self):
        return tuple(s for s in SHAPES if s not in self.shapes_per_class)

    @property
    def held_out_textures(self):
        return tuple(t for t in TEXTURES if t not in self.id_texture_ids)


@dataclass
class LabeledExample:
    example_id: str
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    label: int
    true_mask: np.ndarray | None
    split_tag: str
    shape: str | None
    texture_id: str
    placement: tuple[int, int, int] | None


@dataclass
class ExampleSet:
    examples: list[LabeledExample] = field(default_factory=list)

    def __len__(self):
        return len(self.examples)

    def __iter__(self) -> Iterator[LabeledExample]:
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def images(self) -> np.ndarray:
        """Stacked images, ``N x 3 x H x W`` float32 (channels first)."""
        return np.stack([e.image for e in self.examples]).transpose(0, 3, 1, 2).copy()

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.examples], dtype=np.int64)

    def masks(self) -> np.ndarray:
        return np.stack([e.true_mask for e in self.examples])

    def ids(self) -> list[str]:
        return [e.example_id for e in self.examples]


_SIZE_CACHE: dict = {}


def valid_sizes(shape, image_size, fg_range):
    """Box sizes whose rendered mask area fraction falls in ``fg_range``."""
    key = (shape, image_size, tuple(fg_range))
    if key not in _SIZE_CACHE:
        lo, hi = fg_range
        total = image_size * image_size
        sizes = [s for s in range(2, image_size + 1)
                 if lo <= shape_mask(shape, s).sum() / total <= hi]
        if not sizes:
            raise ConfigError(
                f"shape {shape!r} cannot reach a foreground fraction in {tuple(fg_range)} "
                f"on a {image_size}x{image_size} frame")
        _SIZE_CACHE[key] = sizes
    return _SIZE_CACHE[key]


def _example_rng(seed, split_tag, index):
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, _SPLIT_CODES[split_tag], index])


def _make_example(spec, split_tag, index, shape, label, texture_id, rng):
    H = spec.image_size
    placement = None
    if shape is not None:
        size = int(rng.choice(valid_sizes(shape, H, spec.fg_fraction_range)))
        top = int(rng.integers(0, H - size + 1))
        left = int(rng.integers(0, H - size + 1))
        placement = (top, left, size)
    render_seed = int(rng.integers(0, 2**63 - 1))
    image, mask = render_example(shape, texture_id, placement, render_seed, H)
    return LabeledExample(
        example_id=f"{split_tag}_{index:06d}",
        image=image,
        label=label,
        true_mask=mask,
        split_tag=split_tag,
        shape=shape,
        texture_id=texture_id,
        placement=placement,
    )


def _id_split(spec, split_tag, n):
    out = []
    K = spec.num_classes
    for i in range(n):
        rng = _example_rng(spec.seed, split_tag, i)
        label = i % K
        texture = spec.id_texture_ids[int(rng.integers(len(spec.id_texture_ids)))]
        out.append(_make_example(spec, split_tag, i, spec.shapes_per_class[label],
                                 label, texture, rng))
    return ExampleSet(out)


def gen_id_dataset(spec: DatasetSpec):
    """Class-balanced in-distribution ``(train, test)`` sets."""
    spec.validate()
    return _id_split(spec, "id_train", spec.n_train), _id_split(spec, "id_test", spec.n_test)


def gen_ood_dataset(kind: str, spec: DatasetSpec, n: int, empty_fraction: float = 0.0) -> ExampleSet:
    """OOD examples with semantic shift, domain shift, or both.

    ``semantic``: held-out shape on an ID texture.  ``domain``: ID shape on a
    held-out texture, or, for a share ``empty_fraction`` of the examples, the
    bare texture.  ``both``: held-out shape on a held-out texture.
    """
    if not 0.0 <= empty_fraction <= 1.0:
        raise ConfigError("empty_fraction must lie in [0, 1]")
    if kind not in OOD_KINDS:
        raise ConfigError(f"unknown OOD kind {kind!r}; expected one of {OOD_KINDS}")
    spec.validate()
    shapes = spec.held_out_shapes if kind in ("semantic", "both") else spec.shapes_per_class
    textures = spec.held_out_textures if kind in ("domain", "both") else spec.id_texture_ids
    if kind in ("semantic", "both") and not shapes:
        raise ConfigError("no held-out shape is available for semantic shift")
    if kind in ("domain", "both") and not textures:
        raise ConfigError("no held-out texture is available for domain shift")
    for s in shapes:
        valid_sizes(s, spec.image_size, spec.fg_fraction_range)

    split_tag = f"ood_{kind}"
    out = []
    for i in range(n):
        rng = _example_rng(spec.seed, split_tag, i)
        texture = textures[int(rng.integers(len(textures)))]
        if kind == "domain" and rng.uniform() < empty_fraction:
            shape, label = None, NO_LABEL
        else:
            shape = shapes[int(rng.integers(len(shapes)))]
            label = spec.shapes_per_class.index(shape) if kind == "domain" else NO_LABEL
        out.append(_make_example(spec, split_tag, i, shape, label, texture, rng))
    return ExampleSet(out)


# --------------------------------------------------------------------------
# serialisation
# --------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def _write_png(path, array):
    Image.fromarray(array).save(path, format="PNG", optimize=False, compress_level=6)


def save_example_set(examples: ExampleSet, directory, spec: DatasetSpec | None = None):
    """Write ``manifest.json`` plus ``images/<id>.png`` and ``masks/<id>.png``.

    Masks are single-channel 8-bit rasters with 0 = background and
    255 = foreground.
    """
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for e in examples:
        image_path = f"images/{e.example_id}.png"
        _write_png(directory / image_path, quantize(e.image))
        mask_path = None
        if e.true_mask is not None:
            mask_path = f"masks/{e.example_id}.png"
            _write_png(directory / mask_path, e.true_mask.astype(np.uint8) * 255)
        records.append({
            "id": e.example_id,
            "label": int(e.label),
            "split": e.split_tag,
            "shape": e.shape,
            "texture": e.texture_id,
            "placement": list(e.placement) if e.placement is not None else None,
            "image": image_path,
            "mask": mask_path,
        })
    manifest = {
        "spec": _spec_dict(spec) if spec is not None else None,
        "seed": spec.seed if spec is not None else None,
        "examples": records,
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory / MANIFEST_NAME


def load_example_set(directory) -> ExampleSet:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST_NAME).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset manifest in {directory}: {exc}") from exc
    out = []
    for r in manifest["examples"]:
        image = np.asarray(Image.open(directory / r["image"]).convert("RGB"))
        mask = None
        if r["mask"] is not None:
            mask = np.asarray(Image.open(directory / r["mask"])) > 127
        out.append(LabeledExample(
            example_id=r["id"],
            image=image.astype(np.float32) / 255.0,
            label=int(r["label"]),
            true_mask=mask,
            split_tag=r["split"],
            shape=r["shape"],
            texture_id=r["texture"],
            placement=tuple(r["placement"]) if r["placement"] is not None else None,
        ))
    return ExampleSet(out)


def _spec_dict(spec):
    d = asdict(spec)
    d["shapes_per_class"] = list(spec.shapes_per_class)
    d["id_texture_ids"] = list(spec.id_texture_ids)
    d["fg_fraction_range"] = list(spec.fg_fraction_range)
    return d


def directory_digest(directory) -> str:
    """sha256 over every file (relative path + bytes) under ``directory``."""
    directory = Path(directory)
    h = hashlib.sha256()
    for p in sorted(directory.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(directory)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def stack_label_maps(maps: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([np.asarray(m, dtype=np.int64) for m in maps])
