from .base import (BackendError, ConfigError, DiffusionBackend, EditRequest,
                   ModelHandle, ShapeError)
from .remote import DecodeError, RemoteBackend, TransportError, UnavailableError
from .schedule import NoiseSchedule
from .toy import ToyBackend, ToyDenoiser, tokenize

__all__ = [
    "BackendError", "ConfigError", "DiffusionBackend", "EditRequest",
    "ModelHandle", "ShapeError", "NoiseSchedule", "ToyBackend", "ToyDenoiser",
    "tokenize", "RemoteBackend", "TransportError", "DecodeError", "UnavailableError",
]
