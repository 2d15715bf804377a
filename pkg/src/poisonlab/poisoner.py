"""Poisoned-image production: paste + iterative blended inpainting +
zoom-in refinement, and dataset-level orchestration (ratios, selection
policy, trigger modes)."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .backends.base import ConfigError, EditRequest, ModelHandle
from .core import (CaptionedSample, Dataset, Image, LogoRef, Mask, Rng,
                   mask_from_bbox, resize_pixels)
from .detection import BoxProposer, Embedder, detect
from .maskgen import MaskConstraints, _iterative_inpaint, generate_mask


@dataclass(frozen=True)
class Trigger:
    mode: str = "none"          # none | caption_suffix | category
    text: str = ""

    def __post_init__(self):
        if self.mode not in ("none", "caption_suffix", "category"):
            raise ConfigError(f"unknown trigger mode {self.mode!r}")
        if self.mode != "none" and not self.text:
            raise ConfigError(f"trigger mode {self.mode!r} needs text")


@dataclass(frozen=True)
class PoisonPlan:
    ratio: float = 1.0
    selection: str = "entropy_desc"   # entropy_desc | random
    trigger: Trigger = field(default_factory=Trigger)
    sdedit_strength: float = 0.3
    sdedit_iters: int = 3
    inpaint_iters: int = 3
    refine_strength: float = 0.25
    refine_iters: int = 2
    patch_margin_fraction: float = 0.30
    tau: float = 0.5
    max_retries: int = 4
    paste_first: bool = True   # pasting before inpainting is on by default

    def __post_init__(self):
        if not (0.0 < self.ratio <= 1.0):
            raise ConfigError(f"ratio must be in (0,1], got {self.ratio}")
        if self.selection not in ("entropy_desc", "random"):
            raise ConfigError(f"unknown selection policy {self.selection!r}")


@dataclass(frozen=True)
class PoisonRecord:
    original_id: str
    poisoned_image: Image
    mask: Mask
    attempts: int
    final_score: float
    stage_log: tuple[tuple[str, float, float], ...]  # (stage, seconds, det score)
    caption_out: str
    success: bool

    def to_row(self) -> dict:
        return {"original_id": self.original_id, "attempts": self.attempts,
                "final_score": self.final_score, "success": self.success,
                "caption_out": self.caption_out,
                "mask_bbox": list(self.mask.bbox),
                "stage_log": [list(s) for s in self.stage_log]}


@dataclass(frozen=True)
class PoisonedDataset:
    dataset: Dataset
    poisoned_ids: tuple[str, ...]
    warnings: int = 0  # quota shortfall after exhausting candidates


def paste_logo(image: Image, logo_region: Image, mask: Mask) -> Image:
    """Alpha-composite the logo region, resized to the mask bbox."""
    if mask.empty:
        raise ConfigError("paste_logo requires a non-empty mask")
    x0, y0, x1, y1 = mask.bbox
    out = image.rgb().astype(np.float64)
    patch = resize_pixels(logo_region.pixels, (y1 - y0, x1 - x0))
    if patch.shape[2] == 4:
        a = patch[:, :, 3:4].astype(np.float64) / 255.0
        rgb = patch[:, :, :3].astype(np.float64)
    else:
        a = np.ones((y1 - y0, x1 - x0, 1))
        rgb = patch[:, :, :3].astype(np.float64)
    out[y0:y1, x0:x1] = a * rgb + (1.0 - a) * out[y0:y1, x0:x1]
    return Image(np.clip(np.rint(out), 0, 255).astype(np.uint8), id=image.id)


def refine(backend, model: ModelHandle, image: Image, mask: Mask,
           plan: PoisonPlan, rng: Rng, *, prompt: str = "",
           style_ref: Optional[Image] = None) -> Image:
    """Zoom-in refinement: crop a margin-padded square patch around the
    mask, upsample to backend resolution, inpaint at low strength, and
    merge the refined mask region back."""
    if mask.empty:
        raise ConfigError("refine requires a non-empty mask")
    if plan.refine_strength == 0.0 or plan.refine_iters == 0:
        return image
    x0, y0, x1, y1 = mask.bbox
    H, W = image.height, image.width
    side = round((1.0 + plan.patch_margin_fraction) * max(x1 - x0, y1 - y0))
    side = min(side, H, W)
    cx, cy = (x0 + x1) // 2, (y0 + y1) // 2
    px0 = int(np.clip(cx - side // 2, 0, W - side))
    py0 = int(np.clip(cy - side // 2, 0, H - side))
    px1, py1 = px0 + side, py0 + side

    res = backend.resolution
    patch = resize_pixels(image.rgb()[py0:py1, px0:px1], (res, res))
    mask_patch = mask.bits[py0:py1, px0:px1].astype(np.uint8) * 255
    mask_up = resize_pixels(mask_patch[:, :, None], (res, res))[:, :, 0] >= 128
    if not mask_up.any():
        return image
    refined = _iterative_inpaint(
        backend, model, Image(patch, id=f"{image.id}_patch"), Mask(mask_up),
        prompt, plan.refine_strength, plan.refine_iters, style_ref,
        rng.child("refine"))
    down = resize_pixels(refined.pixels, (side, side))
    out = image.rgb().copy()
    region = out[py0:py1, px0:px1]
    inside = mask.bits[py0:py1, px0:px1]
    region[inside] = down[inside]  # outside-mask pixels stay bit-exact
    out[py0:py1, px0:px1] = region
    return Image(out, id=image.id)


def patch_side(bbox: tuple[int, int, int, int], margin_fraction: float) -> int:
    """Refinement patch side: margin_fraction larger than the longest bbox axis."""
    x0, y0, x1, y1 = bbox
    return round((1.0 + margin_fraction) * max(x1 - x0, y1 - y0))


def poison_image(backend, model: ModelHandle, sample: CaptionedSample,
                 logo: LogoRef, plan: PoisonPlan, constraints: MaskConstraints,
                 rng: Rng, proposer: BoxProposer, embedder: Embedder) -> PoisonRecord:
    """Full per-image pipeline, retried whole with fresh noise.

    mask generation -> paste of the detected preview logo -> iterative
    blended inpainting (style_ref = original image) -> zoom-in refinement
    -> final detection. Success requires the final score to clear tau and
    the mask complement to stay bit-exact; exhausted retries yield a
    failed record for exclusion from the poisoned set.
    """
    prompt = f"{logo.identifier_token} pasted on it"
    stage_log: list[tuple[str, float, float]] = []
    original = sample.image
    H, W = original.height, original.width
    for attempt in range(1, plan.max_retries + 1):
        sub = rng.child(f"attempt{attempt}")
        t0 = time.perf_counter()
        mg = generate_mask(backend, model, original, logo, plan.tau, constraints,
                           max_retries=1, rng=sub.child("maskgen"),
                           proposer=proposer, embedder=embedder, prompt=prompt,
                           strength=plan.sdedit_strength, iters=plan.sdedit_iters,
                           style_ref=original)
        stage_log.append(("maskgen", time.perf_counter() - t0, mg.detection.score))
        if mg.mask.empty:
            continue

        t0 = time.perf_counter()
        if plan.paste_first:
            x0, y0, x1, y1 = mg.detection.box
            preview_logo = Image(mg.edited_preview.rgb()[y0:y1, x0:x1],
                                 id=f"{sample.id}_preview_logo")
            work = paste_logo(original, preview_logo,
                              mask_from_bbox(mg.detection.box, (H, W), dilation=0))
        else:
            work = original
        stage_log.append(("paste", time.perf_counter() - t0, mg.detection.score))

        t0 = time.perf_counter()
        work = _iterative_inpaint(backend, model, work, mg.mask, prompt,
                                  plan.sdedit_strength, plan.inpaint_iters,
                                  original, sub.child("inpaint"))
        # inpainting starts from the pasted composite, so the mask interior
        # may have drifted from the original; restore the complement exactly
        out = work.rgb().copy()
        keep = ~mg.mask.bits
        out[keep] = original.rgb()[keep]
        work = Image(out, id=sample.id)
        det_mid = detect(work, logo, plan.tau, proposer, embedder)
        stage_log.append(("inpaint", time.perf_counter() - t0, det_mid.score))

        t0 = time.perf_counter()
        work = refine(backend, model, work, mg.mask, plan, sub,
                      prompt=prompt, style_ref=original)
        det_final = detect(work, logo, plan.tau, proposer, embedder)
        stage_log.append(("refine", time.perf_counter() - t0, det_final.score))

        if det_final.matched:
            return PoisonRecord(original_id=sample.id, poisoned_image=work,
                                mask=mg.mask, attempts=attempt,
                                final_score=det_final.score,
                                stage_log=tuple(stage_log),
                                caption_out=sample.caption, success=True)
    return PoisonRecord(original_id=sample.id, poisoned_image=original,
                        mask=Mask.empty_like((H, W)), attempts=plan.max_retries,
                        final_score=0.0, stage_log=tuple(stage_log),
                        caption_out=sample.caption, success=False)


def select_targets(dataset: Dataset, plan: PoisonPlan, rng: Rng) -> list[str]:
    """Candidate ids in selection-policy order (quota is applied by the caller).

    Category triggers restrict candidates to captions containing the word.
    """
    candidates = list(dataset.samples)
    if plan.trigger.mode == "category":
        word = plan.trigger.text.lower()
        candidates = [s for s in candidates if word in s.caption.lower()]
        if not candidates:
            raise ConfigError(
                f"category trigger {plan.trigger.text!r} matches no captions")
    if plan.selection == "entropy_desc":
        candidates.sort(key=lambda s: (-s.entropy, s.id))
    else:
        g = rng.child("select").generator()
        candidates = [candidates[i] for i in g.permutation(len(candidates))]
    return [s.id for s in candidates]


def poison_dataset(backend, model: ModelHandle, dataset: Dataset, logo: LogoRef,
                   plan: PoisonPlan, constraints: MaskConstraints, rng: Rng,
                   proposer: BoxProposer, embedder: Embedder
                   ) -> tuple[PoisonedDataset, list[PoisonRecord]]:
    """Replace ceil(ratio*N) samples with poisoned counterparts.

    Failed records are replaced by the next candidate under the selection
    order; a quota shortfall is reported via the warnings count, never
    silently."""
    n = len(dataset)
    quota = int(np.ceil(plan.ratio * n))
    if quota < 1:
        raise ConfigError("ratio * |dataset| must be >= 1")
    order = select_targets(dataset, plan, rng)
    records: list[PoisonRecord] = []
    poisoned: dict[str, PoisonRecord] = {}
    for sample_id in order:
        if len(poisoned) >= quota:
            break
        sample = dataset.by_id(sample_id)
        rec = poison_image(backend, model, sample, logo, plan, constraints,
                           rng.child(f"poison/{sample_id}"), proposer, embedder)
        records.append(rec)
        if rec.success:
            poisoned[sample_id] = rec
    warnings = quota - len(poisoned)
    if plan.trigger.mode == "caption_suffix":
        for i, rec in enumerate(records):
            if rec.success:
                new_cap = f"{rec.caption_out} {plan.trigger.text}".strip()
                records[i] = replace(rec, caption_out=new_cap)
                poisoned[rec.original_id] = records[i]

    new_samples = []
    for s in dataset:
        if s.id in poisoned:
            rec = poisoned[s.id]
            caption = s.caption
            if plan.trigger.mode == "caption_suffix":
                caption = f"{s.caption} {plan.trigger.text}".strip()
            new_samples.append(replace(
                s, image=Image(rec.poisoned_image.pixels, id=s.id),
                caption=caption))
        else:
            new_samples.append(s)
    out = Dataset(samples=tuple(new_samples), split_tag=dataset.split_tag)
    return (PoisonedDataset(dataset=out, poisoned_ids=tuple(poisoned),
                            warnings=warnings), records)
