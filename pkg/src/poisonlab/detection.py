"""Logo detection: box proposal, embedding comparison against an expanded
reference set, and an exhaustive multi-scale template-matching oracle.

The pipeline detector mirrors an open-vocabulary-detector + embedder
stack at desk scale: a sliding-window template proposer emits candidate
boxes, each box is embedded and compared to every reference variant by
cosine similarity, and the best (proposal, variant) pair decides the
verdict at threshold tau. Scores live on the bounded scale (cos+1)/2 so
the default tau of 0.5 sits at zero cosine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Protocol, runtime_checkable

import cv2
import numpy as np

from .core import CoreError, Image, LogoRef, Rng, resize_pixels
from .backends.base import ConfigError, EditRequest, ModelHandle

Box = tuple[int, int, int, int]  # (x0, y0, x1, y1) half-open

ORACLE_SCALES = (0.5, 0.75, 1.0, 1.5, 2.0)
MAX_PROPOSALS = 64

# recorded embedding for zero-variance regions; keeps degenerate inputs
# deterministic instead of dividing by zero
def _null_vector(dim: int) -> np.ndarray:
    v = np.zeros(dim, dtype=np.float64)
    v[0] = 1.0
    return v


class ExpansionError(CoreError):
    """Reference-set expansion failed for a specific variant index."""

    def __init__(self, message: str, variant_index: int):
        super().__init__(message)
        self.variant_index = variant_index


@dataclass(frozen=True)
class BoxProposal:
    box: Box
    proposer_score: float


@dataclass(frozen=True)
class DetectionResult:
    matched: bool
    score: float
    box: Optional[Box] = None
    variant_index: Optional[int] = None

    def to_row(self) -> dict:
        return {"matched": self.matched, "score": self.score,
                "box": list(self.box) if self.box else None,
                "variant_index": self.variant_index}


@runtime_checkable
class BoxProposer(Protocol):
    def propose(self, image: Image, threshold: float) -> list[BoxProposal]: ...


@runtime_checkable
class Embedder(Protocol):
    dim: int

    def embed(self, region: Image) -> np.ndarray: ...


# --- pixel helpers --------------------------------------------------------

def _gray(px: np.ndarray) -> np.ndarray:
    if px.shape[2] == 1:
        return px[:, :, 0].astype(np.float32)
    rgb = px[:, :, :3].astype(np.float32)
    return 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]


def flatten_alpha(px: np.ndarray, background: int = 128) -> np.ndarray:
    """Composite an RGBA grid over a flat background; pass RGB through."""
    if px.shape[2] != 4:
        return px[:, :, :3] if px.shape[2] == 3 else np.repeat(px, 3, axis=2)
    a = px[:, :, 3:4].astype(np.float32) / 255.0
    rgb = px[:, :, :3].astype(np.float32)
    out = rgb * a + background * (1.0 - a)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _match_map(image_rgb: np.ndarray, template_rgb: np.ndarray) -> np.ndarray:
    """Zero-mean NCC of template at every valid position; NaNs cleared."""
    r = cv2.matchTemplate(image_rgb.astype(np.float32),
                          template_rgb.astype(np.float32), cv2.TM_CCOEFF_NORMED)
    return np.nan_to_num(r, nan=0.0, posinf=0.0, neginf=0.0)


# --- embedders ------------------------------------------------------------

class ToyEmbedder:
    """Whitened, downsampled-patch embedding.

    Regions are resized to a small grid, mean-subtracted per the whole
    patch and L2-normalized. Grayscale by default; ``color=True`` keeps
    the three channels (used by the set-based defense, where hue matters).
    """

    def __init__(self, grid: int = 12, color: bool = False):
        self.grid = grid
        self.color = color
        self.dim = grid * grid * (3 if color else 1)

    def embed(self, region: Image) -> np.ndarray:
        px = flatten_alpha(region.pixels)
        small = resize_pixels(px, (self.grid, self.grid))
        if self.color:
            v = small[:, :, :3].astype(np.float64).ravel()
        else:
            v = _gray(small).astype(np.float64).ravel()
        v = v - v.mean()
        n = np.linalg.norm(v)
        if n < 1e-9:
            return _null_vector(self.dim)
        return v / n


def embed(region: Image, embedder: Embedder) -> np.ndarray:
    """L2-normalized embedding of a region (never fails on degenerate input)."""
    if region.height < 1 or region.width < 1:
        raise ConfigError("cannot embed an empty region")
    return embedder.embed(region)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.clip(np.dot(u, v), -1.0, 1.0))


def similarity_score(cos: float) -> float:
    """Bounded detection score: (cos+1)/2, so tau=0.5 is zero cosine."""
    return (cos + 1.0) / 2.0


# --- proposers ------------------------------------------------------------

def _background_level(n_dims: int) -> float:
    # expected peak |ncc| of a matched filter over a noise field grows like
    # sqrt(2 ln K / d); windows with few pixels need a much higher bar
    return min(0.9, 1.45 * math.sqrt(2.0 * math.log(1500.0) / n_dims))


class TemplateProposer:
    """Sliding-window proposer scoring |NCC| against the canonical logo.

    Scores are recalibrated against the noise-floor of each window size so
    that a low emission threshold (the 0.01 default) does not flood the
    embedder with chance correlations.
    """

    def __init__(self, logo: LogoRef, scales: tuple[float, ...] = ORACLE_SCALES,
                 max_proposals: int = MAX_PROPOSALS):
        self.logo = logo
        self.scales = scales
        self.max_proposals = max_proposals
        self._templates = []
        base = flatten_alpha(logo.canonical.pixels)
        h0, w0 = base.shape[:2]
        for s in scales:
            th, tw = max(2, round(h0 * s)), max(2, round(w0 * s))
            self._templates.append(resize_pixels(base, (th, tw)))

    def propose(self, image: Image, threshold: float) -> list[BoxProposal]:
        if not (0.0 <= threshold <= 1.0):
            raise ConfigError(f"proposer threshold must be in [0,1], got {threshold}")
        rgb = image.rgb()
        H, W = rgb.shape[:2]
        found: list[BoxProposal] = []
        for tmpl in self._templates:
            th, tw = tmpl.shape[:2]
            if th > H or tw > W:
                continue
            bg = _background_level(th * tw * 3)
            amap = np.abs(_match_map(rgb, tmpl))
            # greedy peak picking with template-sized suppression
            for _ in range(self.max_proposals):
                y, x = np.unravel_index(int(np.argmax(amap)), amap.shape)
                raw = float(amap[y, x])
                score = max(0.0, (raw - bg) / (1.0 - bg))
                if score < max(threshold, 1e-12) or raw <= 0.0:
                    break
                found.append(BoxProposal(box=(int(x), int(y), int(x) + tw, int(y) + th),
                                         proposer_score=min(1.0, score)))
                y0, y1 = max(0, y - th // 2), min(amap.shape[0], y + th // 2 + 1)
                x0, x1 = max(0, x - tw // 2), min(amap.shape[1], x + tw // 2 + 1)
                amap[y0:y1, x0:x1] = -1.0
        found.sort(key=lambda p: -p.proposer_score)
        return found[: self.max_proposals]


class UniquePatchProposer:
    """Logo-agnostic proposer for the set-based defense.

    Emits windows that are locally distinctive: their content does not
    recur elsewhere in the same image. Inserted logos are one-off patches
    in an otherwise self-similar texture, so they surface here without any
    knowledge of the target logo.
    """

    def __init__(self, window: int = 8, stride: int = 2, max_proposals: int = 16):
        self.window = window
        self.stride = stride
        self.max_proposals = max_proposals

    def propose(self, image: Image, threshold: float) -> list[BoxProposal]:
        rgb = image.rgb()
        H, W = rgb.shape[:2]
        w = self.window
        if H < w or W < w:
            return []
        cands = []
        for y in range(0, H - w + 1, self.stride):
            for x in range(0, W - w + 1, self.stride):
                patch = rgb[y:y + w, x:x + w]
                if float(patch.std()) < 2.0:
                    continue
                amap = np.abs(_match_map(rgb, patch))
                # ignore the self-match neighbourhood
                y0, y1 = max(0, y - w // 2), min(amap.shape[0], y + w // 2 + 1)
                x0, x1 = max(0, x - w // 2), min(amap.shape[1], x + w // 2 + 1)
                amap[y0:y1, x0:x1] = 0.0
                uniqueness = 1.0 - float(amap.max())
                if uniqueness >= threshold:
                    cands.append(BoxProposal(box=(x, y, x + w, y + w),
                                             proposer_score=min(1.0, max(0.0, uniqueness))))
        cands.sort(key=lambda p: -p.proposer_score)
        picked: list[BoxProposal] = []
        for c in cands:
            if all(_iou(c.box, p.box) < 0.3 for p in picked):
                picked.append(c)
            if len(picked) >= self.max_proposals:
                break
        return picked


def _iou(a: Box, b: Box) -> float:
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0, ix1 - ix0), max(0, iy1 - iy0)
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def propose_boxes(image: Image, proposer: BoxProposer, threshold: float) -> list[BoxProposal]:
    """Candidate logo boxes, sorted descending by proposer score."""
    return proposer.propose(image, threshold)


# --- pipeline detector ----------------------------------------------------

def _crop(image: Image, box: Box) -> Image:
    x0, y0, x1, y1 = box
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(image.width, x1), min(image.height, y1)
    return Image(image.rgb()[y0:y1, x0:x1], id=f"{image.id}@{box}")


def _variant_embeddings(logo: LogoRef, embedder: Embedder) -> list[np.ndarray]:
    return [embedder.embed(Image(flatten_alpha(v.pixels), id=v.id))
            for v in logo.variants]


def detect(image: Image, logo: LogoRef, tau: float, proposer: BoxProposer,
           embedder: Embedder, proposer_threshold: float = 0.01) -> DetectionResult:
    """Max cosine over (proposal, variant) pairs; matched iff score > tau.

    Ties break toward the lowest (proposal rank, variant index).
    """
    if not (0.0 <= tau <= 1.0):
        raise ConfigError(f"tau must be in [0,1], got {tau}")
    if not logo.variants:
        raise ConfigError("LogoRef has no variants")
    proposals = propose_boxes(image, proposer, proposer_threshold)[:MAX_PROPOSALS]
    if not proposals:
        return DetectionResult(matched=False, score=0.0)
    refs = _variant_embeddings(logo, embedder)
    best = (-1.0, 0, 0)  # (score, proposal rank, variant index)
    for pi, prop in enumerate(proposals):
        emb = embedder.embed(_crop(image, prop.box))
        for vi, ref in enumerate(refs):
            score = similarity_score(cosine(emb, ref))
            if score > best[0] + 1e-12:
                best = (score, pi, vi)
    score, pi, vi = best
    if score > tau:
        return DetectionResult(matched=True, score=score,
                               box=proposals[pi].box, variant_index=vi)
    return DetectionResult(matched=False, score=max(score, 0.0))


# --- reference-set expansion ----------------------------------------------

def _recolor(px: np.ndarray, g: np.random.Generator) -> np.ndarray:
    out = px.copy()
    rgb = out[:, :, :3].astype(np.float32)
    gains = g.uniform(0.4, 1.0, size=3)
    perm = g.permutation(3)
    rgb = rgb[:, :, perm] * gains[None, None, :]
    out[:, :, :3] = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    return out


def _rescale(px: np.ndarray, g: np.random.Generator) -> np.ndarray:
    s = float(g.uniform(0.5, 2.0))
    h, w = px.shape[:2]
    return resize_pixels(px, (max(2, round(h * s)), max(2, round(w * s))))


def _invert(px: np.ndarray, g: np.random.Generator) -> np.ndarray:
    out = px.copy()
    out[:, :, :3] = 255 - out[:, :, :3]
    return out


def expand_references(logo: LogoRef, styles: list[Image], n_variants: int,
                      backend=None, model: ModelHandle | None = None,
                      rng: Rng = Rng(0, "expand")) -> LogoRef:
    """LogoRef with canonical plus n_variants styled renditions.

    Deterministic transforms (recolor / rescale / invert) by default; when
    a backend and model are supplied, style images additionally drive
    low-strength edits of the glyph so rendered style variations enter the
    reference set.
    """
    if n_variants < 1:
        raise ConfigError(f"n_variants must be >= 1, got {n_variants}")
    transforms = (_recolor, _rescale, _invert)
    variants: list[Image] = []
    for i in range(n_variants):
        g = rng.child(f"variant{i}").generator()
        try:
            if backend is not None and model is not None and styles and i < len(styles):
                style = styles[i]
                canvas = flatten_alpha(logo.canonical.pixels)
                canvas = resize_pixels(canvas, (style.height, style.width))
                edited = backend.sdedit(model, EditRequest(
                    image=Image(canvas, id=f"{logo.logo_id}_style{i}"),
                    prompt=f"{logo.identifier_token} pasted on it",
                    rng=rng.child(f"style{i}"), noise_strength=0.2, style_ref=style))
                px = resize_pixels(edited.pixels,
                                   (logo.canonical.height, logo.canonical.width))
            else:
                px = transforms[i % len(transforms)](logo.canonical.pixels, g)
        except Exception as e:
            raise ExpansionError(f"variant {i} failed: {e}", variant_index=i) from e
        variants.append(Image(px, id=f"{logo.logo_id}_v{i + 1}"))
    return logo.with_variants(variants)


# --- brute-force oracle ---------------------------------------------------

def oracle_detect(image: Image, logo: LogoRef, tau: float,
                  scales: tuple[float, ...] = ORACLE_SCALES) -> DetectionResult:
    """Exhaustive NCC over all positions and scales of every variant.

    Peak is the best signed correlation clipped to [0,1]; matched iff
    peak > tau. Independent of the proposer/embedder pipeline.
    """
    rgb = image.rgb()
    H, W = rgb.shape[:2]
    best_score, best_box, best_vi = 0.0, None, None
    for vi, variant in enumerate(logo.variants):
        base = flatten_alpha(variant.pixels)
        vh, vw = base.shape[:2]
        for s in scales:
            th, tw = max(2, round(vh * s)), max(2, round(vw * s))
            if th > H or tw > W:
                continue
            r = _match_map(rgb, resize_pixels(base, (th, tw)))
            y, x = np.unravel_index(int(np.argmax(r)), r.shape)
            peak = float(np.clip(r[y, x], 0.0, 1.0))
            if peak > best_score:
                best_score = peak
                best_box = (int(x), int(y), int(x) + tw, int(y) + th)
                best_vi = vi
    if best_score > tau:
        return DetectionResult(matched=True, score=best_score,
                               box=best_box, variant_index=best_vi)
    return DetectionResult(matched=False, score=best_score)
