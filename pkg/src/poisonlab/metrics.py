"""Stealthiness, attack-success (LIR / FAE) and minimum-modification metrics."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .backends.base import ConfigError, ModelHandle, ShapeError
from .core import Image, LogoRef, Rng
from .detection import (BoxProposer, DetectionResult, Embedder, ToyEmbedder,
                        cosine, detect)

PSNR_CAP_DB = 100.0
DEFAULT_FAE_IMAGES = 4  # probe batch size per epoch


class ProtocolError(ConfigError):
    """An evaluation protocol rule was violated (e.g. 'logo' in a prompt)."""


@dataclass(frozen=True)
class StealthReport:
    psnr_db: float
    perceptual_dist: float
    img_img_align: float
    img_txt_align: float

    def to_row(self) -> dict:
        return {"psnr_db": self.psnr_db, "perceptual_dist": self.perceptual_dist,
                "img_img_align": self.img_img_align,
                "img_txt_align": self.img_txt_align}


@dataclass(frozen=True)
class AttackReport:
    lir: float
    fae: Optional[int]
    per_prompt: tuple[tuple[str, DetectionResult], ...]

    def to_row(self) -> dict:
        return {"lir": self.lir, "fae": self.fae,
                "per_prompt": [[p, d.to_row()] for p, d in self.per_prompt]}


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for identical images."""
    if a.pixels.shape != b.pixels.shape:
        raise ShapeError(f"psnr dims differ: {a.pixels.shape} vs {b.pixels.shape}")
    mse = float(np.mean((a.pixels.astype(np.float64) - b.pixels.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(255.0 ** 2 / mse))


def _patches(px: np.ndarray, size: int) -> list[np.ndarray]:
    H, W = px.shape[:2]
    out = []
    for y in range(0, H - size + 1, size):
        for x in range(0, W - size + 1, size):
            out.append(px[y:y + size, x:x + size])
    return out or [px]


def perceptual_distance(a: Image, b: Image, embedder: Embedder | None = None,
                        patch_size: int = 8) -> float:
    """Mean over aligned patches of (1 - cosine) between patch embeddings."""
    if a.pixels.shape[:2] != b.pixels.shape[:2]:
        raise ShapeError("perceptual_distance dims differ")
    embedder = embedder or ToyEmbedder(grid=8, color=True)
    pa, pb = _patches(a.rgb(), patch_size), _patches(b.rgb(), patch_size)
    dists = []
    for qa, qb in zip(pa, pb):
        ea = embedder.embed(Image(qa, id="a"))
        eb = embedder.embed(Image(qb, id="b"))
        dists.append(1.0 - cosine(ea, eb))
    return float(np.mean(dists))


class HashJointEmbedder:
    """Toy image-text joint embedding.

    Caption tokens map to fixed pseudo-random unit vectors in the image
    embedder's space; alignment is the cosine between the mean token
    vector and the image embedding. Weakly informative by design: it only
    has to be deterministic and shared across compared conditions.
    """

    def __init__(self, embedder: Embedder | None = None):
        self.embedder = embedder or ToyEmbedder(grid=8, color=True)
        self.dim = self.embedder.dim

    def _token_vec(self, token: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(token.encode()).digest()[:8], "little")
        g = np.random.Generator(np.random.PCG64(seed))
        v = g.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def text_embed(self, caption: str) -> np.ndarray:
        tokens = caption.lower().split() or ["<empty>"]
        v = np.mean([self._token_vec(t) for t in tokens], axis=0)
        n = np.linalg.norm(v)
        return v / n if n > 1e-12 else self._token_vec("<empty>")

    def align(self, image: Image, caption: str) -> float:
        return cosine(self.embedder.embed(image), self.text_embed(caption))


def stealth_report(original: Image, poisoned: Image, caption: str,
                   joint: HashJointEmbedder | None = None,
                   embedder: Embedder | None = None) -> StealthReport:
    joint = joint or HashJointEmbedder(embedder)
    embedder = embedder or joint.embedder
    return StealthReport(
        psnr_db=psnr(original, poisoned),
        perceptual_dist=perceptual_distance(original, poisoned, embedder),
        img_img_align=cosine(embedder.embed(original), embedder.embed(poisoned)),
        img_txt_align=joint.align(poisoned, caption),
    )


def check_prompts(prompts: list[str]) -> None:
    if not prompts:
        raise ConfigError("prompts must be non-empty")
    for p in prompts:
        if "logo" in p.lower():
            raise ProtocolError(f"evaluation prompt contains 'logo': {p!r}")


def lir(backend, model: ModelHandle, prompts: list[str], logo: LogoRef,
        tau: float, proposer: BoxProposer, embedder: Embedder,
        rng: Rng) -> AttackReport:
    """Logo inclusion rate: one generation per prompt, detect, matched/total.

    Prompts must not contain the word 'logo' (trigger-free protocol)."""
    check_prompts(prompts)
    images = backend.generate_batch(model, prompts, rng)
    per_prompt = []
    matched = 0
    for prompt, img in zip(prompts, images):
        det = detect(img, logo, tau, proposer, embedder)
        matched += det.matched
        per_prompt.append((prompt, det))
    return AttackReport(lir=matched / len(prompts), fae=None,
                        per_prompt=tuple(per_prompt))


def fae(backend, checkpoints: list[ModelHandle], probe_prompt: str,
        logo: LogoRef, tau: float, proposer: BoxProposer, embedder: Embedder,
        rng: Rng, images_per_epoch: int = DEFAULT_FAE_IMAGES) -> Optional[int]:
    """First-attack epoch: earliest (1-based) epoch whose probe batch
    contains at least one detected logo; None when no epoch matches."""
    if not checkpoints:
        raise ConfigError("fae needs a non-empty checkpoint list")
    if images_per_epoch < 1:
        raise ConfigError("images_per_epoch must be >= 1")
    for epoch, handle in enumerate(checkpoints, start=1):
        prompts = [probe_prompt] * images_per_epoch
        images = backend.generate_batch(handle, prompts, rng.child(f"epoch{epoch}"))
        if any(detect(img, logo, tau, proposer, embedder).matched for img in images):
            return epoch
    return None


def delta_perf(backend, model_p: ModelHandle, model_o: ModelHandle,
               eval_prompts: list[str], rng: Rng,
               style_refs: Optional[list[Image]] = None,
               joint: HashJointEmbedder | None = None) -> dict:
    """Task-performance deltas (poisoned minus original).

    text_align: mean prompt-image alignment under the joint embedder;
    style_sim: mean image-embedding cosine to the style references."""
    if not eval_prompts:
        raise ConfigError("eval_prompts must be non-empty")
    joint = joint or HashJointEmbedder()

    def _evaluate(model: ModelHandle) -> tuple[float, float | None]:
        images = backend.generate_batch(model, eval_prompts, rng)
        aligns = [joint.align(img, p) for img, p in zip(images, eval_prompts)]
        style = None
        if style_refs is not None:
            if not style_refs:
                raise ConfigError("style_refs given but empty")
            ref_embs = [joint.embedder.embed(s) for s in style_refs]
            sims = [max(cosine(joint.embedder.embed(img), r) for r in ref_embs)
                    for img in images]
            style = float(np.mean(sims))
        return float(np.mean(aligns)), style

    align_p, style_p = _evaluate(model_p)
    align_o, style_o = _evaluate(model_o)
    out = {"text_align_delta": align_p - align_o}
    if style_refs is not None:
        out["style_sim_delta"] = style_p - style_o
    return out
