"""Natural logo-location discovery: iterative low-strength editing until the
logo emerges, then detection of its location to build an inpainting mask,
subject to stealthiness constraints (area cap, protected regions,
background priors)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .backends.base import ConfigError, EditRequest, ModelHandle
from .core import Image, LogoRef, Mask, Rng, mask_from_bbox
from .detection import BoxProposer, DetectionResult, Embedder, detect

DEFAULT_EDIT_PROMPT = "[V] logo pasted on it"
DEFAULT_STRENGTH = 0.3
DEFAULT_ITERS = 3
DEFAULT_DILATION = 2


@dataclass(frozen=True)
class MaskConstraints:
    max_area_fraction: float = 1.0
    exclusion: Optional[Mask] = None      # protected region; enforced by rejection
    background_prior: Optional[Mask] = None  # preferred region; restricts the edit
    dilation: int = DEFAULT_DILATION

    def __post_init__(self):
        if not (0.0 < self.max_area_fraction <= 1.0):
            raise ConfigError(
                f"max_area_fraction must be in (0,1], got {self.max_area_fraction}")
        if self.dilation < 0:
            raise ConfigError("dilation must be >= 0")

    def satisfied_by(self, mask: Mask) -> bool:
        H, W = mask.shape
        if mask.area > self.max_area_fraction * H * W:
            return False
        if self.exclusion is not None and bool((mask.bits & self.exclusion.bits).any()):
            return False
        return True


@dataclass(frozen=True)
class MaskGenResult:
    mask: Mask
    edited_preview: Image
    detection: DetectionResult
    iterations_used: int


def iterative_sdedit(backend, model: ModelHandle, image: Image, prompt: str,
                     strength: float = DEFAULT_STRENGTH, iters: int = DEFAULT_ITERS,
                     style_ref: Optional[Image] = None, rng: Rng = Rng(0)) -> Image:
    """Apply SDEdit ``iters`` times, feeding each output into the next call."""
    if iters < 1:
        raise ConfigError(f"iters must be >= 1, got {iters}")
    out = image
    for i in range(iters):
        out = backend.sdedit(model, EditRequest(
            image=out, prompt=prompt, noise_strength=strength,
            style_ref=style_ref, rng=rng if iters == 1 else rng.child(f"iter{i}")))
    return out


def _iterative_inpaint(backend, model: ModelHandle, image: Image, mask: Mask,
                       prompt: str, strength: float, iters: int,
                       style_ref: Optional[Image], rng: Rng) -> Image:
    out = image
    for i in range(iters):
        out = backend.blended_inpaint(model, EditRequest(
            image=out, prompt=prompt, mask=mask, noise_strength=strength,
            style_ref=style_ref, rng=rng.child(f"inpaint{i}")))
    return out


def generate_mask(backend, model: ModelHandle, image: Image, logo: LogoRef,
                  tau: float, constraints: MaskConstraints, max_retries: int,
                  rng: Rng, proposer: BoxProposer, embedder: Embedder, *,
                  prompt: Optional[str] = None, strength: float = DEFAULT_STRENGTH,
                  iters: int = DEFAULT_ITERS,
                  style_ref: Optional[Image] = None) -> MaskGenResult:
    """Edit until the logo emerges, then convert its detected box to a mask.

    Retries with fresh noise until the detection matches and the mask
    satisfies the constraints; an exhausted budget yields an empty-mask
    result with matched=False. With a background prior the edit is
    restricted to that region via blended inpainting instead of
    whole-image SDEdit.
    """
    if max_retries < 1:
        raise ConfigError("max_retries must be >= 1")
    H, W = image.height, image.width
    if constraints.exclusion is not None and constraints.exclusion.area >= H * W:
        raise ConfigError("exclusion mask covers the entire image")
    if prompt is None:
        prompt = f"{logo.identifier_token} pasted on it" \
            if logo.identifier_token else DEFAULT_EDIT_PROMPT
    last_edit = image
    for attempt in range(1, max_retries + 1):
        sub = rng.child(f"attempt{attempt}")
        if constraints.background_prior is not None and not constraints.background_prior.empty:
            edited = _iterative_inpaint(backend, model, image,
                                        constraints.background_prior, prompt,
                                        strength, iters, style_ref, sub)
        else:
            edited = iterative_sdedit(backend, model, image, prompt,
                                      strength, iters, style_ref, sub)
        last_edit = edited
        det = detect(edited, logo, tau, proposer, embedder)
        if det.matched:
            mask = mask_from_bbox(det.box, (H, W), dilation=constraints.dilation)
            if constraints.satisfied_by(mask):
                return MaskGenResult(mask=mask, edited_preview=edited,
                                     detection=det, iterations_used=attempt)
    return MaskGenResult(mask=Mask.empty_like((H, W)), edited_preview=last_edit,
                         detection=DetectionResult(matched=False, score=0.0),
                         iterations_used=max_retries)
