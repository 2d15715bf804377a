"""Trainable toy pixel-space denoising diffusion backend.

A small convolutional eps-prediction network at a fixed square resolution
(default 32x32), conditioned on a timestep embedding and a bag-of-tokens
caption embedding. Sampling is ancestral with seeded noise streams, so
every output is a pure function of (weights, request, seed).
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core import Dataset, Image, Mask, Rng
from .base import ConfigError, EditRequest, ModelHandle, ShapeError
from .schedule import NoiseSchedule

NULL_TOKEN = "<null>"

_TOKEN_RE = re.compile(r"[a-z0-9\[\]]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ToyDenoiser(nn.Module):
    """Conv encoder-decoder predicting the added noise."""

    def __init__(self, vocab_size: int, cond_dim: int = 64, width: int = 24):
        super().__init__()
        self.cond_dim = cond_dim
        self.tok = nn.Embedding(vocab_size, cond_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(cond_dim, cond_dim), nn.SiLU(), nn.Linear(cond_dim, cond_dim))
        self.style_proj = nn.Linear(3, cond_dim)
        # style conditioning starts as a near no-op; it is only exercised
        # through edit requests, never through the training batches
        nn.init.normal_(self.style_proj.weight, std=1e-3)
        nn.init.zeros_(self.style_proj.bias)

        w = width
        self.in_conv = nn.Conv2d(3, w, 3, padding=1)
        self.cond1 = nn.Linear(cond_dim, w)
        self.conv1 = nn.Conv2d(w, w, 3, padding=1)
        self.down = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.cond2 = nn.Linear(cond_dim, 2 * w)
        self.conv2 = nn.Conv2d(2 * w, 2 * w, 3, padding=1)
        self.up = nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1)
        self.cond3 = nn.Linear(cond_dim, w)
        self.conv3 = nn.Conv2d(w, w, 3, padding=1)
        self.out_conv = nn.Conv2d(w, 3, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def caption_embedding(self, token_ids: list[list[int]]) -> torch.Tensor:
        embs = []
        for ids in token_ids:
            if not ids:
                ids = [0]
            embs.append(self.tok(torch.tensor(ids, dtype=torch.long)).mean(dim=0))
        return torch.stack(embs)

    def forward(self, z: torch.Tensor, t: torch.Tensor, cap_emb: torch.Tensor,
                style: torch.Tensor | None = None) -> torch.Tensor:
        cond = self.time_mlp(_timestep_embedding(t, self.cond_dim)) + cap_emb
        if style is not None:
            cond = cond + self.style_proj(style)
        h = F.silu(self.in_conv(z) + self.cond1(cond)[:, :, None, None])
        h = F.silu(self.conv1(h))
        skip = h
        h = F.silu(self.down(h) + self.cond2(cond)[:, :, None, None])
        h = F.silu(self.conv2(h))
        h = F.silu(self.up(h) + self.cond3(cond)[:, :, None, None])
        h = h + skip
        h = F.silu(self.conv3(h))
        return self.out_conv(h)


@dataclass
class _LoadedModel:
    net: ToyDenoiser
    vocab: dict[str, int]
    loss_history: list[float]


def _to_z(px: np.ndarray) -> np.ndarray:
    return px.astype(np.float32) / 127.5 - 1.0


def _from_z(z: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((z + 1.0) * 127.5), 0, 255).astype(np.uint8)


class ToyBackend:
    """Diffusion backend with local training and deterministic sampling."""

    kind = "toy"

    def __init__(self, root: str | None = None, resolution: int = 32,
                 schedule: NoiseSchedule | None = None,
                 batch_size: int = 64, learning_rate: float = 2e-3,
                 draws_per_sample: int = 4):
        self.root = root or os.environ.get("POISONLAB_HOME", "poisonlab_runs")
        self.resolution = resolution
        self.schedule = schedule or NoiseSchedule.cosine(200)
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.draws_per_sample = draws_per_sample
        self._cache: dict[str, _LoadedModel] = {}

    # --- checkpoint plumbing ---------------------------------------------

    def _ckpt_path(self, ref: str) -> str:
        return os.path.join(self.root, "checkpoints", f"{ref}.pt")

    def _save(self, ref: str, net: ToyDenoiser, vocab: dict[str, int],
              loss_history: list[float], epochs: int, seed: int) -> ModelHandle:
        path = self._ckpt_path(ref)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        torch.save({
            "state_dict": net.state_dict(),
            "vocab": vocab,
            "loss_history": loss_history,
            "resolution": self.resolution,
            "schedule_T": self.schedule.T,
            "sampler": "ancestral-v1",
        }, path)
        self._cache[ref] = _LoadedModel(net, vocab, loss_history)
        return ModelHandle(backend_kind=self.kind, weights_ref=ref,
                           cond_vocab=len(vocab), trained_epochs=epochs, seed=seed)

    def _load(self, model: ModelHandle) -> _LoadedModel:
        if model.weights_ref in self._cache:
            return self._cache[model.weights_ref]
        path = self._ckpt_path(model.weights_ref)
        if not os.path.exists(path):
            raise ConfigError(f"checkpoint not found for weights_ref={model.weights_ref!r}")
        blob = torch.load(path, weights_only=False)
        net = ToyDenoiser(vocab_size=len(blob["vocab"]))
        net.load_state_dict(blob["state_dict"])
        net.eval()
        loaded = _LoadedModel(net, blob["vocab"], blob["loss_history"])
        self._cache[model.weights_ref] = loaded
        return loaded

    def loss_history(self, model: ModelHandle) -> list[float]:
        return list(self._load(model).loss_history)

    # --- training ---------------------------------------------------------

    def _prep_images(self, dataset: Dataset) -> np.ndarray:
        zs = []
        for s in dataset:
            px = s.image.rgb()
            if px.shape[:2] != (self.resolution, self.resolution):
                raise ShapeError(
                    f"sample {s.id!r} has dims {px.shape[:2]}, backend expects "
                    f"{(self.resolution, self.resolution)}")
            zs.append(_to_z(px))
        return np.stack(zs).transpose(0, 3, 1, 2)  # N,3,H,W

    def _token_ids(self, captions: list[str], vocab: dict[str, int]) -> list[list[int]]:
        return [[vocab.get(tok, 0) for tok in tokenize(c)] for c in captions]

    def train(self, dataset: Dataset, epochs: int, rng: Rng, *,
              finetune_from: ModelHandle | None = None,
              regularization: Dataset | None = None, reg_weight: float = 0.0,
              keep_epoch_checkpoints: bool = False,
              run_ref: str | None = None) -> ModelHandle:
        if len(dataset) == 0:
            raise ConfigError("cannot train on an empty dataset")
        if epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if regularization is not None and reg_weight <= 0:
            raise ConfigError("reg_weight must be > 0 when a regularization dataset is given")

        torch.manual_seed(rng.torch_seed())
        vocab = {NULL_TOKEN: 0}
        for s in dataset:
            for tok in tokenize(s.caption):
                vocab.setdefault(tok, len(vocab))
        if finetune_from is not None:
            base = self._load(finetune_from)
            merged = dict(base.vocab)
            for tok in vocab:
                merged.setdefault(tok, len(merged))
            vocab = merged
            net = ToyDenoiser(vocab_size=len(vocab))
            state = {k: v.clone() for k, v in base.net.state_dict().items()}
            old_rows = state["tok.weight"]
            new_rows = net.state_dict()["tok.weight"].clone()
            new_rows[: old_rows.shape[0]] = old_rows
            state["tok.weight"] = new_rows
            net.load_state_dict(state)
        else:
            net = ToyDenoiser(vocab_size=len(vocab))
        net.train()

        imgs = self._prep_images(dataset)
        caps = self._token_ids([s.caption for s in dataset], vocab)
        if regularization is not None:
            reg_imgs = self._prep_images(regularization)
            reg_caps = self._token_ids([s.caption for s in regularization], vocab)

        opt = torch.optim.Adam(net.parameters(), lr=self.learning_rate)
        g = rng.child("train").generator()
        T = self.schedule.T
        alpha = torch.tensor(self.schedule.alpha, dtype=torch.float32)
        sigma = torch.tensor(self.schedule.sigma, dtype=torch.float32)

        ref = run_ref or f"toy_{rng.seed}_{abs(hash(rng.stream_label)) % 10 ** 8}_{len(dataset)}x{epochs}"
        loss_history = []
        epoch_handles = []
        n = len(dataset)
        for epoch in range(epochs):
            epoch_losses = []
            for _pass in range(self.draws_per_sample):
                order = g.permutation(n)
                for start in range(0, n, self.batch_size):
                    idx = order[start:start + self.batch_size]
                    z0 = torch.from_numpy(imgs[idx])
                    t = torch.from_numpy(g.integers(1, T + 1, size=len(idx)))
                    eps = torch.from_numpy(
                        g.standard_normal(z0.shape, dtype=np.float32))
                    zt = alpha[t][:, None, None, None] * z0 + sigma[t][:, None, None, None] * eps
                    cap = net.caption_embedding([caps[i] for i in idx])
                    loss = F.mse_loss(net(zt, t, cap), eps)
                    if regularization is not None:
                        ridx = g.integers(0, len(reg_imgs), size=len(idx))
                        rz0 = torch.from_numpy(reg_imgs[ridx])
                        rt = torch.from_numpy(g.integers(1, T + 1, size=len(idx)))
                        reps = torch.from_numpy(
                            g.standard_normal(rz0.shape, dtype=np.float32))
                        rzt = alpha[rt][:, None, None, None] * rz0 \
                            + sigma[rt][:, None, None, None] * reps
                        rcap = net.caption_embedding([reg_caps[i] for i in ridx])
                        loss = loss + reg_weight * F.mse_loss(net(rzt, rt, rcap), reps)
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    epoch_losses.append(float(loss.detach()))
            loss_history.append(float(np.mean(epoch_losses)))
            if keep_epoch_checkpoints:
                snap = ToyDenoiser(vocab_size=len(vocab))
                snap.load_state_dict({k: v.clone() for k, v in net.state_dict().items()})
                snap.eval()
                epoch_handles.append(self._save(
                    f"{ref}_ep{epoch + 1}", snap, vocab, list(loss_history),
                    epochs=epoch + 1, seed=rng.seed))

        net.eval()
        handle = self._save(ref, net, vocab, loss_history, epochs=epochs, seed=rng.seed)
        if keep_epoch_checkpoints:
            self._epoch_handles = {ref: epoch_handles}
        return handle

    def epoch_checkpoints(self, model: ModelHandle) -> list[ModelHandle]:
        """Per-epoch handles saved during train(keep_epoch_checkpoints=True)."""
        handles = getattr(self, "_epoch_handles", {}).get(model.weights_ref)
        if handles is None:
            raise ConfigError(f"no per-epoch checkpoints recorded for {model.weights_ref!r}")
        return list(handles)

    def loss_on_batch(self, model: ModelHandle, images: list[Image],
                      captions: list[str], t: np.ndarray, noise: np.ndarray) -> float:
        """Training objective on a frozen batch with the given true noise."""
        m = self._load(model)
        z0 = torch.from_numpy(
            np.stack([_to_z(im.rgb()) for im in images]).transpose(0, 3, 1, 2))
        tt = torch.from_numpy(np.asarray(t, dtype=np.int64))
        eps = torch.from_numpy(noise.astype(np.float32))
        alpha = torch.tensor(self.schedule.alpha, dtype=torch.float32)
        sigma = torch.tensor(self.schedule.sigma, dtype=torch.float32)
        zt = alpha[tt][:, None, None, None] * z0 + sigma[tt][:, None, None, None] * eps
        cap = m.net.caption_embedding(self._token_ids(captions, m.vocab))
        with torch.no_grad():
            return float(F.mse_loss(m.net(zt, tt, cap), eps))

    # --- sampling ---------------------------------------------------------

    def _style_vector(self, style_ref: Image | None) -> torch.Tensor | None:
        if style_ref is None:
            return None
        z = _to_z(style_ref.rgb())
        return torch.tensor(z.mean(axis=(0, 1)), dtype=torch.float32)[None, :]

    def _denoise_from(self, net: ToyDenoiser, z: torch.Tensor, t_start: int,
                      cap_emb: torch.Tensor, style: torch.Tensor | None,
                      rng: Rng, mask: np.ndarray | None = None,
                      z_orig: torch.Tensor | None = None) -> torch.Tensor:
        """Ancestral denoising from timestep t_start down to 0.

        When ``mask`` is given, the mask complement is overwritten at every
        step with the correspondingly-noised original (blended inpainting).
        """
        alpha, sigma = self.schedule.alpha, self.schedule.sigma
        g_anc = rng.child("ancestral").generator()
        g_blend = rng.child("blend").generator()
        m = None
        if mask is not None:
            m = torch.from_numpy(mask.astype(np.float32))[None, None, :, :]
        with torch.no_grad():
            for t in range(t_start, 0, -1):
                tt = torch.full((z.shape[0],), t, dtype=torch.long)
                eps_hat = net(z, tt, cap_emb.expand(z.shape[0], -1), style)
                a_t, s_t = alpha[t], sigma[t]
                a_p, s_p = alpha[t - 1], sigma[t - 1]
                z0_hat = torch.clamp((z - s_t * eps_hat) / max(a_t, 1e-8), -1.0, 1.0)
                if t > 1:
                    abar_t, abar_p = a_t ** 2, a_p ** 2
                    beta_t = 1.0 - abar_t / max(abar_p, 1e-12)
                    var = (s_p ** 2 / max(s_t ** 2, 1e-12)) * beta_t
                    var = float(min(max(var, 0.0), s_p ** 2))
                    dir_coeff = math.sqrt(max(s_p ** 2 - var, 0.0))
                    xi = torch.from_numpy(
                        g_anc.standard_normal(z.shape, dtype=np.float32))
                    z = a_p * z0_hat + dir_coeff * eps_hat + math.sqrt(var) * xi
                else:
                    z = z0_hat
                if m is not None:
                    noise_b = torch.from_numpy(
                        g_blend.standard_normal(z.shape, dtype=np.float32))
                    z_keep = a_p * z_orig + s_p * noise_b
                    z = m * z + (1.0 - m) * z_keep
        return z

    def _cap_emb(self, net: ToyDenoiser, vocab: dict[str, int], prompt: str) -> torch.Tensor:
        with torch.no_grad():
            return net.caption_embedding(self._token_ids([prompt], vocab))

    def generate(self, model: ModelHandle, prompt: str, rng: Rng) -> Image:
        return self.generate_batch(model, [prompt], rng)[0]

    def generate_batch(self, model: ModelHandle, prompts: list[str], rng: Rng,
                       style_ref: Image | None = None) -> list[Image]:
        """One image per prompt; each prompt gets its own child noise stream."""
        m = self._load(model)
        R = self.resolution
        outs = []
        for i, prompt in enumerate(prompts):
            sub = rng.child(f"gen{i}") if len(prompts) > 1 else rng
            g0 = sub.child("init").generator()
            z = torch.from_numpy(g0.standard_normal((1, 3, R, R), dtype=np.float32))
            cap = self._cap_emb(m.net, m.vocab, prompt)
            z = self._denoise_from(m.net, z, self.schedule.T, cap,
                                   self._style_vector(style_ref), sub)
            outs.append(Image(_from_z(z[0].numpy().transpose(1, 2, 0)),
                              id=f"gen_{rng.seed}_{i}"))
        return outs

    def sdedit(self, model: ModelHandle, req: EditRequest) -> Image:
        if req.mask is not None:
            raise ConfigError("sdedit takes no mask; use blended_inpaint")
        if req.noise_strength == 0.0:
            return req.image
        m = self._load(model)
        t_start = math.ceil(req.noise_strength * self.schedule.T)
        z0 = torch.from_numpy(_to_z(req.image.rgb()).transpose(2, 0, 1))[None]
        g0 = req.rng.child("init").generator()
        eps = torch.from_numpy(g0.standard_normal(z0.shape, dtype=np.float32))
        z = self.schedule.alpha[t_start] * z0 + self.schedule.sigma[t_start] * eps
        cap = self._cap_emb(m.net, m.vocab, req.prompt)
        z = self._denoise_from(m.net, z, t_start, cap,
                               self._style_vector(req.style_ref), req.rng)
        return Image(_from_z(z[0].numpy().transpose(1, 2, 0)), id=req.image.id)

    def blended_inpaint(self, model: ModelHandle, req: EditRequest) -> Image:
        if req.mask is None or req.mask.empty:
            raise ConfigError("blended_inpaint requires a non-empty mask")
        if req.mask.shape != (req.image.height, req.image.width):
            raise ShapeError("mask dims do not match image dims")
        m = self._load(model)
        t_start = math.ceil(req.noise_strength * self.schedule.T)
        z_orig = torch.from_numpy(_to_z(req.image.rgb()).transpose(2, 0, 1))[None]
        g0 = req.rng.child("init").generator()
        eps = torch.from_numpy(g0.standard_normal(z_orig.shape, dtype=np.float32))
        z = self.schedule.alpha[t_start] * z_orig + self.schedule.sigma[t_start] * eps
        cap = self._cap_emb(m.net, m.vocab, req.prompt)
        z = self._denoise_from(m.net, z, t_start, cap,
                               self._style_vector(req.style_ref), req.rng,
                               mask=req.mask.bits, z_orig=z_orig)
        out = _from_z(z[0].numpy().transpose(1, 2, 0))
        # the blend guarantees this up to float rounding; make it bit-exact
        keep = ~req.mask.bits
        out[keep] = req.image.rgb()[keep]
        return Image(out, id=req.image.id)
