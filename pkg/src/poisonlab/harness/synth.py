"""Procedural desk-scale corpus and the bundled toy glyph logo."""

from __future__ import annotations

import numpy as np

from ..core import CaptionedSample, Dataset, Image, LogoRef, Rng, shannon_entropy

TEXTURE_FAMILIES = ("gradient", "stripes", "blobs", "checker")
COLOR_WORDS = {
    "red": (220, 60, 50), "green": (60, 190, 80), "blue": (60, 90, 220),
    "yellow": (230, 210, 60), "purple": (150, 70, 200), "orange": (240, 150, 40),
    "teal": (40, 180, 180), "pink": (240, 120, 180),
}
FAMILY_WORDS = {"gradient": "shaded", "stripes": "striped",
                "blobs": "spotted", "checker": "checkered"}
OBJECT_WORDS = ("square", "banner", "panel", "tile", "card", "board")


def default_glyph(size: int = 6) -> LogoRef:
    """Fixed high-contrast RGBA glyph used as the desk-scale target logo."""
    px = np.zeros((size, size, 4), dtype=np.uint8)
    px[:, :, 3] = 255
    px[:, :, :3] = (20, 20, 20)
    # bright ring with a contrasting diagonal, asymmetric corner dot
    px[0, :, :3] = px[-1, :, :3] = (250, 240, 40)
    px[:, 0, :3] = px[:, -1, :3] = (250, 240, 40)
    for i in range(size):
        px[i, i, :3] = (240, 60, 200)
    px[1, size - 2, :3] = (60, 220, 240)
    return LogoRef.from_canonical("toy-glyph", Image(px, id="toy-glyph"))


def _texture(family: str, color: tuple[int, int, int], res: int,
             g: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) / res
    angle = g.uniform(0, 2 * np.pi)
    u = np.cos(angle) * xx + np.sin(angle) * yy
    if family == "gradient":
        field = (u - u.min()) / (u.max() - u.min() + 1e-9)
    elif family == "stripes":
        freq = g.uniform(2.0, 6.0)
        field = 0.5 + 0.5 * np.sin(2 * np.pi * freq * u + g.uniform(0, 2 * np.pi))
    elif family == "checker":
        freq = g.uniform(2.0, 5.0)
        v = -np.sin(angle) * xx + np.cos(angle) * yy
        field = ((np.sin(2 * np.pi * freq * u) * np.sin(2 * np.pi * freq * v)) > 0).astype(float)
        field = 0.15 + 0.7 * field
    else:  # blobs
        field = np.zeros((res, res))
        for _ in range(g.integers(3, 7)):
            cy, cx = g.uniform(0, 1, size=2)
            r = g.uniform(0.08, 0.25)
            field += np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r ** 2)))
        field = np.clip(field, 0, 1)
    base = np.array(color, dtype=np.float64)
    other = np.array(g.choice(list(COLOR_WORDS.values())), dtype=np.float64)
    img = field[:, :, None] * base[None, None, :] + (1 - field[:, :, None]) * 0.35 * other
    noise_sigma = g.uniform(1.0, 18.0)
    img = img + g.normal(0, noise_sigma, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synth_corpus(n: int, rng: Rng, resolution: int = 32,
                 families: tuple[str, ...] = TEXTURE_FAMILIES,
                 source_tag: str = "synth") -> Dataset:
    """Deterministic textured corpus with compositional captions."""
    if n < 1:
        raise ValueError("n must be >= 1")
    samples = []
    color_names = list(COLOR_WORDS)
    for i in range(n):
        g = rng.child(f"sample{i}").generator()
        family = families[int(g.integers(0, len(families)))]
        color = color_names[int(g.integers(0, len(color_names)))]
        obj = OBJECT_WORDS[int(g.integers(0, len(OBJECT_WORDS)))]
        px = _texture(family, COLOR_WORDS[color], resolution, g)
        img = Image(px, id=f"{source_tag}_{i:05d}")
        caption = f"a {FAMILY_WORDS[family]} {color} {obj}"
        samples.append(CaptionedSample(image=img, caption=caption,
                                       entropy=shannon_entropy(img),
                                       source_tag=source_tag))
    return Dataset(samples=tuple(samples), split_tag=source_tag)
