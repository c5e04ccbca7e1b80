"""Core data types, on-disk ingestion, and the synthetic modality-shift generator.

Images are carried as float32 arrays in the unit range [0, 1] and only
converted to the signed range [-1, 1] at the VAE boundary. Masks are binary
{0, 1} ground truth or [0, 1] probability maps.
"""

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image


class IngestionError(Exception):
    """A dataset directory is malformed (e.g. an image without a mask)."""


class GenerationError(Exception):
    """The synthetic generator could not satisfy its constraints."""


UNIT = "unit"
SIGNED = "signed"
_RANGE_TOL = 1e-5


@dataclass
class ImageTensor:
    """A batch of images, shape [B, C, H, W], with a declared value range.

    value_range is "unit" for [0, 1] data or "signed" for [-1, 1] data
    (the latter only appears at the VAE boundary).
    """

    data: torch.Tensor
    value_range: str = UNIT

    def __post_init__(self):
        if self.data.dim() != 4:
            raise ValueError(f"image tensor must be 4-D [B,C,H,W], got {tuple(self.data.shape)}")
        b, c, h, w = self.data.shape
        if h != w:
            raise ValueError(f"images must be square, got {h}x{w}")
        if c not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {c}")
        if self.value_range not in (UNIT, SIGNED):
            raise ValueError(f"unknown value range {self.value_range!r}")
        if not torch.isfinite(self.data).all():
            raise ValueError("image tensor contains non-finite values")
        lo, hi = (0.0, 1.0) if self.value_range == UNIT else (-1.0, 1.0)
        dmin, dmax = self.data.min().item(), self.data.max().item()
        if dmin < lo - _RANGE_TOL or dmax > hi + _RANGE_TOL:
            raise ValueError(
                f"values [{dmin:.4g}, {dmax:.4g}] outside declared {self.value_range} range"
            )

    @property
    def size(self):
        return self.data.shape[-1]

    def to_signed(self):
        if self.value_range == SIGNED:
            return self
        return ImageTensor(self.data * 2.0 - 1.0, SIGNED)

    def to_unit(self):
        if self.value_range == UNIT:
            return self
        return ImageTensor((self.data + 1.0) * 0.5, UNIT)


@dataclass
class MaskTensor:
    """A batch of masks, shape [B, 1, H, W]; binary ground truth or probabilities."""

    data: torch.Tensor
    probability: bool = False

    def __post_init__(self):
        if self.data.dim() != 4:
            raise ValueError(f"mask tensor must be 4-D [B,1,H,W], got {tuple(self.data.shape)}")
        if self.data.shape[1] != 1:
            raise ValueError(f"mask tensor must have one channel, got {self.data.shape[1]}")
        if not torch.isfinite(self.data).all():
            raise ValueError("mask tensor contains non-finite values")
        dmin, dmax = self.data.min().item(), self.data.max().item()
        if self.probability:
            if dmin < -_RANGE_TOL or dmax > 1.0 + _RANGE_TOL:
                raise ValueError(f"probability mask outside [0,1]: [{dmin:.4g}, {dmax:.4g}]")
        else:
            binary = (self.data == 0) | (self.data == 1)
            if not binary.all():
                raise ValueError("ground-truth mask must contain only 0 and 1")


@dataclass(frozen=True)
class DataItem:
    name: str
    image: np.ndarray  # float32 [C, H, W], unit range
    mask: np.ndarray  # float32 [1, H, W], values {0, 1}
    domain: str  # "source" | "target"
    blob_count: int = -1  # -1 when unknown (e.g. loaded without a manifest)


@dataclass(frozen=True)
class Dataset:
    """An immutable, ordered collection of image/mask pairs with a split tag."""

    items: tuple
    split: str = "train"
    mixed_in_names: tuple = ()  # names of target items mixed in for supervised training

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        for it in self.items:
            if it.image.shape[1:] != it.mask.shape[1:]:
                raise ValueError(
                    f"item {it.name}: image {it.image.shape} and mask {it.mask.shape} disagree"
                )
            if it.domain not in ("source", "target"):
                raise ValueError(f"item {it.name}: unknown domain {it.domain!r}")

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    @property
    def names(self):
        return [it.name for it in self.items]

    def images(self):
        """Stack all images into a unit-range ImageTensor [N, C, H, W]."""
        arr = np.stack([it.image for it in self.items])
        return ImageTensor(torch.from_numpy(arr), UNIT)

    def masks(self):
        arr = np.stack([it.mask for it in self.items])
        return MaskTensor(torch.from_numpy(arr), probability=False)

    def with_split(self, split):
        return replace(self, split=split)


def _freeze(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    arr.flags.writeable = False
    return arr


def _quantize8(arr):
    """Snap a unit-range float array to the 8-bit grid (lossless PNG round trip)."""
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0) / 255.0


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class PhotometricParams:
    """Per-domain rendering of the grayscale-ish scene into RGB appearance."""

    channel_gains: tuple = (1.0, 0.95, 0.9)
    gamma: float = 1.0
    channel_permutation: tuple = (0, 1, 2)
    vignette_strength: float = 0.0

    def __post_init__(self):
        if len(self.channel_gains) != 3 or any(g <= 0 for g in self.channel_gains):
            raise ValueError("channel_gains must be three positive values")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if sorted(self.channel_permutation) != [0, 1, 2]:
            raise ValueError("channel_permutation must be a permutation of (0, 1, 2)")
        if not 0.0 <= self.vignette_strength < 1.0:
            raise ValueError("vignette_strength must be in [0, 1)")


# Defaults mimic a white-light (warm, bright) source domain and a
# narrow-band-like (permuted channels, darker gamma, vignetted) target domain.
SOURCE_PHOTOMETRIC = PhotometricParams((1.0, 0.95, 0.9), 1.0, (0, 1, 2), 0.0)
TARGET_PHOTOMETRIC = PhotometricParams((0.5, 0.9, 0.8), 1.6, (2, 0, 1), 0.25)


@dataclass(frozen=True)
class SyntheticShiftConfig:
    num_images: int = 100  # per domain
    image_size: int = 128
    blob_count_range: tuple = (1, 3)
    blob_scale_range: tuple = (0.10, 0.22)  # radii as a fraction of image size
    source_transform: PhotometricParams = field(default_factory=lambda: SOURCE_PHOTOMETRIC)
    target_transform: PhotometricParams = field(default_factory=lambda: TARGET_PHOTOMETRIC)
    texture_noise_amplitude: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.num_images < 1:
            raise ValueError("num_images must be >= 1")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        lo, hi = self.blob_count_range
        if not (1 <= lo <= hi):
            raise ValueError("blob_count_range must satisfy 1 <= lo <= hi")
        slo, shi = self.blob_scale_range
        if not (0.0 < slo <= shi):
            raise ValueError("blob_scale_range must satisfy 0 < lo <= hi")
        if self.source_transform == self.target_transform:
            raise ValueError("source and target transforms must differ")
        if self.texture_noise_amplitude < 0:
            raise ValueError("texture_noise_amplitude must be >= 0")


def _lowfreq_field(rng, size, cells=5, amplitude=0.06):
    grid = rng.uniform(-1.0, 1.0, size=(cells, cells)).astype(np.float32)
    img = Image.fromarray(grid, mode="F").resize((size, size), Image.BILINEAR)
    return np.asarray(img) * amplitude


def _sample_blob(rng, size, scale_range):
    """One elliptical lesion that fits fully inside the image, or None."""
    a = rng.uniform(*scale_range) * size
    b = rng.uniform(*scale_range) * size
    theta = rng.uniform(0.0, math.pi)
    margin = max(a, b)
    if margin >= size / 2.0 - 1.0:
        return None
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    return cx, cy, a, b, theta


def _blob_field(blob, size):
    """Normalized squared elliptical radius r^2 over the pixel grid."""
    cx, cy, a, b, theta = blob
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dx, dy = xx - cx, yy - cy
    ct, st = math.cos(theta), math.sin(theta)
    u = (dx * ct + dy * st) / a
    v = (-dx * st + dy * ct) / b
    return u * u + v * v


def _render_scene(rng, cfg):
    """Draw geometry + appearance for one item; returns (rgb scene, mask, blob count)."""
    size = cfg.image_size
    base = np.array([0.52, 0.42, 0.38], dtype=np.float32)
    tint = rng.uniform(-0.04, 0.04, size=3).astype(np.float32)
    texture = _lowfreq_field(rng, size)
    noise = rng.normal(0.0, 1.0, size=(size, size)).astype(np.float32)
    scene = (base + tint)[:, None, None] + texture[None] + cfg.texture_noise_amplitude * noise[None]

    n_blobs = int(rng.integers(cfg.blob_count_range[0], cfg.blob_count_range[1] + 1))
    mask = np.zeros((size, size), dtype=np.float32)
    lesion_color = np.array([0.30, 0.18, 0.10], dtype=np.float32)
    for _ in range(n_blobs):
        blob = None
        for _attempt in range(100):
            blob = _sample_blob(rng, size, cfg.blob_scale_range)
            if blob is not None:
                break
        if blob is None:
            raise GenerationError(
                f"could not place a blob of scale {cfg.blob_scale_range} "
                f"inside a {size}x{size} image after 100 attempts"
            )
        r2 = _blob_field(blob, size)
        support = r2 <= 1.0
        mask[support] = 1.0
        strength = rng.uniform(0.75, 1.0)
        bump = np.clip(1.0 - r2, 0.0, 1.0) ** 0.5  # soft shoulder, hard support edge
        scene += (lesion_color * strength)[:, None, None] * bump[None]

    return np.clip(scene, 0.0, 1.0), mask, n_blobs


def _apply_photometric(scene, params, size):
    rgb = scene[list(params.channel_permutation)]
    rgb = rgb * np.asarray(params.channel_gains, dtype=np.float32)[:, None, None]
    rgb = np.clip(rgb, 0.0, 1.0) ** params.gamma
    if params.vignette_strength > 0:
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
        c = (size - 1) / 2.0
        d2 = ((xx - c) ** 2 + (yy - c) ** 2) / (2 * c * c)
        rgb = rgb * (1.0 - params.vignette_strength * d2)[None]
    return _quantize8(rgb).astype(np.float32)


def generate_synthetic(cfg):
    """Generate (source, target) datasets with a shared geometry distribution.

    Source and target draw disjoint geometry samples from one seeded stream,
    then render them under their respective photometric transforms. Output is
    byte-identical for identical configs.
    """
    rng = np.random.default_rng(cfg.seed)
    datasets = []
    for domain, prefix, transform in (
        ("source", "src", cfg.source_transform),
        ("target", "tgt", cfg.target_transform),
    ):
        items = []
        for i in range(cfg.num_images):
            scene, mask, n_blobs = _render_scene(rng, cfg)
            rgb = _apply_photometric(scene, transform, cfg.image_size)
            items.append(
                DataItem(
                    name=f"{prefix}_{i:04d}",
                    image=_freeze(rgb),
                    mask=_freeze(mask[None]),
                    domain=domain,
                    blob_count=n_blobs,
                )
            )
        datasets.append(Dataset(tuple(items), split="train"))
    return datasets[0], datasets[1]


# ---------------------------------------------------------------------------
# disk I/O


def save_dataset(dataset, root_dir, seed=None):
    """Write root/{images,masks}/<name>.png plus a manifest.csv."""
    root = Path(root_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for it in dataset:
        img = np.round(np.transpose(it.image, (1, 2, 0)) * 255.0).astype(np.uint8)
        if img.shape[2] == 1:
            img = img[:, :, 0]
        Image.fromarray(img).save(root / "images" / f"{it.name}.png")
        msk = (it.mask[0] * 255.0).astype(np.uint8)
        Image.fromarray(msk, mode="L").save(root / "masks" / f"{it.name}.png")
    with open(root / "manifest.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["name", "domain", "seed", "blob_count"])
        for it in dataset:
            w.writerow([it.name, it.domain, "" if seed is None else seed, it.blob_count])
    return root


def _read_manifest(root):
    path = root / "manifest.csv"
    if not path.exists():
        return {}
    out = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            count = row.get("blob_count", "")
            out[row["name"]] = (row.get("domain", "source"), int(count) if count else -1)
    return out


def load_dataset(root_dir, split="test", target_size=128, domain="source"):
    """Load root/{images,masks}/*.png into a Dataset, resized to target_size.

    Images are resized bilinearly and normalized to [0, 1]; masks are resized
    with nearest-neighbor and re-binarized at 0.5. Items are ordered by
    basename. A missing mask raises IngestionError naming the file.
    """
    root = Path(root_dir)
    image_dir, mask_dir = root / "images", root / "masks"
    if not image_dir.is_dir():
        raise IngestionError(f"missing images directory under {root}")
    manifest = _read_manifest(root)
    items = []
    for img_path in sorted(image_dir.glob("*.png")):
        name = img_path.stem
        mask_path = mask_dir / img_path.name
        if not mask_path.exists():
            raise IngestionError(f"no mask for image {name!r} (expected {mask_path})")
        img = Image.open(img_path)
        if img.size != (target_size, target_size):
            img = img.resize((target_size, target_size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
        if arr.ndim == 2:
            arr = arr[None]
        else:
            arr = np.transpose(arr[:, :, :3], (2, 0, 1))
        msk = Image.open(mask_path).convert("L")
        if msk.size != (target_size, target_size):
            msk = msk.resize((target_size, target_size), Image.NEAREST)
        marr = np.asarray(msk, dtype=np.float32) / 255.0
        if not np.all((marr == 0.0) | (marr == 1.0)):
            warnings.warn(f"mask {name!r} is not binary after load; re-binarizing at 0.5")
        marr = (marr >= 0.5).astype(np.float32)
        item_domain, blob_count = manifest.get(name, (domain, -1))
        items.append(DataItem(name, _freeze(arr), _freeze(marr[None]), item_domain, blob_count))
    return Dataset(tuple(items), split=split)


# ---------------------------------------------------------------------------
# splitting and mixing


def split(dataset, fractions, seed=0):
    """Seeded shuffle + disjoint partition; split tags are train/val/test in order."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    n = len(dataset)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    bounds = [0]
    acc = 0.0
    for f in fractions:
        acc += f
        bounds.append(int(math.floor(acc * n + 1e-9)))
    bounds[-1] = n
    tags = ["train", "val", "test"]
    parts = []
    for i in range(len(fractions)):
        idx = order[bounds[i] : bounds[i + 1]]
        if len(idx) == 0:
            raise ValueError(f"fraction {fractions[i]} produces an empty split for n={n}")
        tag = tags[i] if i < len(tags) else f"part{i}"
        parts.append(Dataset(tuple(dataset.items[j] for j in idx), split=tag))
    return tuple(parts)


def mix_target_into_source(source, target, fraction, seed=0):
    """Append a seeded sample of floor(fraction * |target|) labeled target items.

    The chosen names are recorded on the returned dataset (mixed_in_names) so
    evaluation can exclude them from the target test set.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    n_takes = int(math.floor(fraction * len(target)))
    if n_takes == 0:
        return Dataset(source.items, split=source.split, mixed_in_names=())
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(target), size=n_takes, replace=False).tolist())
    taken = tuple(target.items[i] for i in chosen)
    return Dataset(
        source.items + taken,
        split=source.split,
        mixed_in_names=tuple(it.name for it in taken),
    )
