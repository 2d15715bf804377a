"""Domain types, manifest I/O and deterministic randomness plumbing.

Everything downstream (backends, detection, poisoning, defenses) is built
on the types in this module. All images are 8-bit numpy grids; all
randomness flows through explicit :class:`Rng` streams so that every run
is replayable from (config, seed).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image as PILImage

__all__ = [
    "Image",
    "CaptionedSample",
    "Dataset",
    "LogoRef",
    "Mask",
    "Rng",
    "CoreError",
    "LoadError",
    "IntegrityError",
    "EmptyMaskError",
    "shannon_entropy",
    "mask_from_bbox",
    "load_dataset",
    "save_dataset",
]


class CoreError(Exception):
    """Base class for errors raised by poisonlab."""


class LoadError(CoreError):
    """A manifest or referenced file could not be loaded."""


class IntegrityError(CoreError):
    """Dataset contents violate an invariant (e.g. duplicate ids)."""


class EmptyMaskError(CoreError):
    """A mask-producing operation would yield no set bits."""


@dataclass(frozen=True)
class Image:
    """8-bit image grid; channel 4, when present, is alpha."""

    pixels: np.ndarray  # H x W x C uint8, C in {1, 3, 4}
    id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.dtype != np.uint8:
            raise IntegrityError(f"image {self.id!r}: pixels must be uint8, got {px.dtype}")
        if px.ndim != 3 or px.shape[2] not in (1, 3, 4):
            raise IntegrityError(f"image {self.id!r}: bad shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise IntegrityError(f"image {self.id!r}: empty dims {px.shape}")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def rgb(self) -> np.ndarray:
        """Color planes only (alpha stripped, gray broadcast to 3 channels)."""
        px = self.pixels
        if px.shape[2] == 1:
            return np.repeat(px, 3, axis=2)
        return px[:, :, :3]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return self.id == other.id and self.pixels.shape == other.pixels.shape and bool(
            np.array_equal(self.pixels, other.pixels)
        )

    def __hash__(self):
        return hash((self.id, self.pixels.shape, self.pixels.tobytes()))


@dataclass(frozen=True)
class CaptionedSample:
    image: Image
    caption: str
    entropy: float
    source_tag: str = ""

    @property
    def id(self) -> str:
        return self.image.id


@dataclass(frozen=True)
class Dataset:
    samples: tuple[CaptionedSample, ...]
    manifest_path: str = ""
    split_tag: str = ""

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise IntegrityError(f"duplicate sample ids: {dupes}")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def by_id(self, sample_id: str) -> CaptionedSample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)


@dataclass(frozen=True)
class LogoRef:
    """Target logo: canonical transparency-carrying image plus styled variants.

    ``variants[0]`` is always the canonical image.
    """

    logo_id: str
    canonical: Image
    variants: tuple[Image, ...]
    identifier_token: str = "[V] logo"

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(self.variants))
        if not self.variants or self.variants[0] != self.canonical:
            raise IntegrityError("variants[0] must be the canonical image")

    @classmethod
    def from_canonical(cls, logo_id: str, canonical: Image,
                       identifier_token: str = "[V] logo") -> "LogoRef":
        return cls(logo_id=logo_id, canonical=canonical,
                   variants=(canonical,), identifier_token=identifier_token)

    def with_variants(self, extra: list[Image]) -> "LogoRef":
        return replace(self, variants=self.variants + tuple(extra))


_EMPTY_BBOX = (-1, -1, -1, -1)


@dataclass(frozen=True)
class Mask:
    """Binary editing region with a tight bounding box over the set bits.

    bbox convention: (x0, y0, x1, y1) half-open, i.e. columns x0..x1-1 and
    rows y0..y1-1. The empty mask carries the sentinel bbox (-1,-1,-1,-1).
    """

    bits: np.ndarray  # H x W bool

    def __post_init__(self):
        b = np.asarray(self.bits).astype(bool)
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        ys, xs = np.nonzero(self.bits)
        if ys.size == 0:
            return _EMPTY_BBOX
        return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    @property
    def empty(self) -> bool:
        return not self.bits.any()

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape  # (H, W)

    @classmethod
    def empty_like(cls, dims: tuple[int, int]) -> "Mask":
        return cls(np.zeros(dims, dtype=bool))


@dataclass(frozen=True)
class Rng:
    """Named deterministic random stream.

    Identical (seed, stream_label) pairs always yield identical draw
    sequences; :meth:`child` derives independent named substreams.
    """

    seed: int
    stream_label: str = "root"

    def _entropy(self) -> list[int]:
        digest = hashlib.sha256(self.stream_label.encode("utf-8")).digest()
        label_words = [int.from_bytes(digest[i:i + 8], "little") for i in range(0, 32, 8)]
        return [self.seed & 0xFFFFFFFFFFFFFFFF] + label_words

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self._entropy())))

    def child(self, label: str) -> "Rng":
        return Rng(self.seed, f"{self.stream_label}/{label}")

    def torch_seed(self) -> int:
        # stable 63-bit seed for torch.Generator.manual_seed
        return int(self.generator().integers(0, 2 ** 62))


def shannon_entropy(image: Image) -> float:
    """Histogram entropy in bits, summed over channels.

    Per-channel 256-bin histogram with log base 2 and 0*log0 := 0.
    """
    px = image.pixels
    total = 0.0
    for c in range(px.shape[2]):
        counts = np.bincount(px[:, :, c].ravel(), minlength=256).astype(np.float64)
        p = counts / counts.sum()
        nz = p[p > 0]
        total += float(-(nz * np.log2(nz)).sum())
    return total


def mask_from_bbox(box: tuple[int, int, int, int], dims: tuple[int, int],
                   dilation: int = 0) -> Mask:
    """Rectangular mask from a half-open (x0, y0, x1, y1) box, dilated then
    clamped to ``dims`` = (H, W)."""
    if dilation < 0:
        raise ValueError(f"dilation must be >= 0, got {dilation}")
    H, W = dims
    x0, y0, x1, y1 = box
    x0, x1 = x0 - dilation, x1 + dilation
    y0, y1 = y0 - dilation, y1 + dilation
    cx0, cy0 = max(0, x0), max(0, y0)
    cx1, cy1 = min(W, x1), min(H, y1)
    if cx0 >= cx1 or cy0 >= cy1:
        raise EmptyMaskError(f"box {box} with dilation {dilation} lies outside dims {dims}")
    bits = np.zeros((H, W), dtype=bool)
    bits[cy0:cy1, cx0:cx1] = True
    return Mask(bits)


def resize_pixels(pixels: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an 8-bit H x W x C grid to dims = (H, W)."""
    H, W = dims
    if pixels.shape[:2] == (H, W):
        return pixels.copy()
    mode = {1: "L", 3: "RGB", 4: "RGBA"}[pixels.shape[2]]
    arr = pixels[:, :, 0] if mode == "L" else pixels
    pil = PILImage.fromarray(arr, mode=mode).resize((W, H), PILImage.BILINEAR)
    out = np.asarray(pil)
    if out.ndim == 2:
        out = out[:, :, None]
    return out


# --- manifest and PNG I/O -------------------------------------------------

def save_image(image: Image, path: str) -> None:
    px = image.pixels
    if px.shape[2] == 1:
        pil = PILImage.fromarray(px[:, :, 0], mode="L")
    elif px.shape[2] == 3:
        pil = PILImage.fromarray(px, mode="RGB")
    else:
        pil = PILImage.fromarray(px, mode="RGBA")
    pil.save(path, format="PNG")


def load_image(path: str, image_id: str = "") -> Image:
    if not os.path.exists(path):
        raise LoadError(f"image file not found: {path}")
    with PILImage.open(path) as pil:
        if pil.mode not in ("L", "RGB", "RGBA"):
            pil = pil.convert("RGB")
        px = np.asarray(pil)
    if px.ndim == 2:
        px = px[:, :, None]
    return Image(pixels=px, id=image_id or os.path.splitext(os.path.basename(path))[0])


def save_mask(mask: Mask, path: str) -> None:
    save_image(Image(np.where(mask.bits, 255, 0).astype(np.uint8)[:, :, None], id="mask"), path)


def load_mask(path: str) -> Mask:
    img = load_image(path)
    return Mask(img.pixels[:, :, 0] >= 128)


def save_dataset(dataset: Dataset, manifest_path: str) -> None:
    """Write the manifest JSON and one PNG per sample beside it."""
    root = os.path.dirname(os.path.abspath(manifest_path))
    img_dir = os.path.join(root, "images")
    os.makedirs(img_dir, exist_ok=True)
    entries = []
    for s in dataset.samples:
        rel = os.path.join("images", f"{s.id}.png")
        save_image(s.image, os.path.join(root, rel))
        entries.append({
            "id": s.id,
            "image_path": rel,
            "caption": s.caption,
            "entropy": s.entropy,
            "source_tag": s.source_tag,
        })
    doc = {"split_tag": dataset.split_tag, "samples": entries}
    with open(manifest_path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_dataset(manifest_path: str) -> Dataset:
    """Load a manifest written by :func:`save_dataset` (entropy recomputed
    when the manifest omits it)."""
    if not os.path.exists(manifest_path):
        raise LoadError(f"manifest not found: {manifest_path}")
    try:
        with open(manifest_path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise LoadError(f"manifest {manifest_path} does not parse: {e}") from e
    root = os.path.dirname(os.path.abspath(manifest_path))
    samples = []
    for entry in doc.get("samples", []):
        path = entry["image_path"]
        if not os.path.isabs(path):
            path = os.path.join(root, path)
        img = load_image(path, image_id=entry["id"])
        entropy = entry.get("entropy")
        if entropy is None:
            entropy = shannon_entropy(img)
        samples.append(CaptionedSample(
            image=img,
            caption=entry.get("caption", ""),
            entropy=float(entropy),
            source_tag=entry.get("source_tag", ""),
        ))
    return Dataset(samples=tuple(samples), manifest_path=manifest_path,
                   split_tag=doc.get("split_tag", ""))
