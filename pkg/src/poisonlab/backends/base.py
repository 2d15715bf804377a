"""Diffusion-backend contract shared by the toy model and the remote client."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol, runtime_checkable

from ..core import CoreError, Image, Mask, Rng
from ..core import Dataset  # noqa: F401  (re-exported for backend implementers)


class BackendError(CoreError):
    """Base class for backend failures."""


class ConfigError(BackendError):
    """A request violates the backend contract (bad strength, empty mask, ...)."""


class ShapeError(BackendError):
    """Image dimensions are inconsistent with the backend or each other."""


@dataclass(frozen=True)
class ModelHandle:
    """Opaque reference to a trained model checkpoint."""

    backend_kind: str            # "toy" or "remote"
    weights_ref: str             # storage key resolvable by the owning backend
    cond_vocab: int = 0
    trained_epochs: int = 0
    seed: int = 0


@dataclass(frozen=True)
class EditRequest:
    """One generation/edit call: SDEdit when mask is absent, inpaint when present."""

    image: Image
    prompt: str
    rng: Rng
    mask: Optional[Mask] = None
    noise_strength: float = 1.0
    style_ref: Optional[Image] = None

    def __post_init__(self):
        if not (0.0 <= self.noise_strength <= 1.0):
            raise ConfigError(f"noise_strength must be in [0,1], got {self.noise_strength}")


@runtime_checkable
class DiffusionBackend(Protocol):
    """Generate / SDEdit / blended-inpaint / fine-tune surface."""

    def train(self, dataset, epochs: int, rng: Rng, *,
              finetune_from: Optional[ModelHandle] = None,
              regularization=None, reg_weight: float = 0.0) -> ModelHandle: ...

    def generate(self, model: ModelHandle, prompt: str, rng: Rng) -> Image: ...

    def sdedit(self, model: ModelHandle, req: EditRequest) -> Image: ...

    def blended_inpaint(self, model: ModelHandle, req: EditRequest) -> Image: ...
