"""Token sequences fed to the language model."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .tensor import Tensor


class Role(IntEnum):
    SYS = 0
    VIS = 1
    TXT = 2
    OUT = 3


@dataclass
class TokenSequence:
    """Embedded tokens plus per-token position ids and role tags.

    ``embeddings`` is (T, D) or (B, T, D). ``position_ids`` and ``token_ids``
    are (T,) or (B, T); ``roles`` is always (T,) because every batch member
    shares the same segment layout. Visual tokens carry token id -1.
    """

    embeddings: Tensor
    position_ids: np.ndarray
    roles: np.ndarray
    token_ids: np.ndarray

    def __post_init__(self):
        self.position_ids = np.asarray(self.position_ids, dtype=np.int64)
        self.roles = np.asarray(self.roles, dtype=np.int8)
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.roles.shape[0])

    @property
    def batched(self) -> bool:
        return self.embeddings.ndim == 3

    def indices(self, role: Role) -> np.ndarray:
        return np.flatnonzero(self.roles == role)

    def boundaries(self) -> list[int]:
        """Slot indices where the role changes."""
        return [i for i in range(1, len(self)) if self.roles[i] != self.roles[i - 1]]
