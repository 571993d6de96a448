"""Shared observation types: sensor modalities and the egocentric sensor grid."""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

GRID_SIZE = 16
GRID_CELLS = GRID_SIZE * GRID_SIZE

# Steering command range in radians; full left / full right.
STEERING_LIMIT = 0.69


class ModalityId(IntEnum):
    """Sensor encoding of a scene. Every scene can be rendered in all three."""

    OCCUPANCY = 0
    DISTANCE = 1
    SEMANTIC = 2

    @classmethod
    def from_name(cls, name: str) -> "ModalityId":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown modality {name!r}; expected one of "
                             f"{[m.name.lower() for m in cls]}") from None


@dataclass(frozen=True, eq=False)
class Observation:
    """One egocentric, forward-facing 16x16 sensor grid with values in [0, 1].

    The grid is row-major with row 0 farthest ahead of the vehicle and
    column 0 leftmost in the vehicle frame.
    """

    modality: ModalityId
    grid: np.ndarray  # (16, 16) float32

    def __post_init__(self):
        if self.grid.shape != (GRID_SIZE, GRID_SIZE):
            raise ValueError(f"observation grid must be {GRID_SIZE}x{GRID_SIZE}, "
                             f"got {self.grid.shape}")
        if self.grid.dtype != np.float32:
            raise ValueError(f"observation grid must be float32, got {self.grid.dtype}")

    def flat(self) -> np.ndarray:
        """Row-major flattened view of the grid, length 256."""
        return self.grid.reshape(-1)
