from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SparseCodes:
    """Fixed-width sparse codes.

    ``indices`` and ``values`` have shape (batch, width). Unused slots carry
    index -1 and value 0.
    """

    indices: np.ndarray
    values: np.ndarray
    n_latents: int

    @property
    def batch_size(self) -> int:
        return self.indices.shape[0]

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.batch_size, self.n_latents), dtype=np.float64 if self.values.dtype == np.float64 else np.float32)
        rows, slots = np.nonzero(self.indices >= 0)
        np.add.at(dense, (rows, self.indices[rows, slots]), self.values[rows, slots])
        return dense

    def l0(self) -> np.ndarray:
        """Nonzero count per row."""
        return ((self.indices >= 0) & (self.values != 0)).sum(axis=1)
