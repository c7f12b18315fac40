from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

MODALITIES = ("text", "speech")


@dataclass
class ModalBatch:
    """One batch in a single modality.

    ``prompt`` is int token ids [B, S] for text or float features [B, S, F] for
    speech. ``response`` holds int ids [B, R]; ``loss_mask`` marks which response
    positions contribute to the loss (by construction, all of them).
    """

    modality: str
    prompt: np.ndarray
    response: np.ndarray
    loss_mask: np.ndarray | None = None
    ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ContractError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        want = 2 if self.modality == "text" else 3
        if self.prompt.ndim != want:
            raise ContractError(f"{self.modality} prompt must be {want}-D, got shape {self.prompt.shape}")
        if self.response.ndim != 2 or self.response.shape[0] != self.prompt.shape[0]:
            raise ContractError(f"response shape {self.response.shape} does not match prompt {self.prompt.shape}")
        if self.loss_mask is None:
            self.loss_mask = np.ones(self.response.shape, dtype=bool)

    @property
    def batch_size(self) -> int:
        return self.prompt.shape[0]

    @property
    def prompt_len(self) -> int:
        return self.prompt.shape[1]

    @property
    def response_len(self) -> int:
        return self.response.shape[1]
