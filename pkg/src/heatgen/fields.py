"""Per-vertex signal fields (n x c arrays bound to a mesh)."""

from dataclasses import dataclass

import numpy as np

__all__ = ["SignalField"]


@dataclass(frozen=True)
class SignalField:
    """An n x c per-vertex signal (RGB texture when c = 3).

    ``mesh_id`` is the hex content hash of the mesh the field lives on;
    operators and fields must agree on it before they are combined.
    """

    values: np.ndarray
    mesh_id: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise ValueError(f"field values must be (n, c), got {values.shape}")
        if not np.isfinite(values).all():
            raise ValueError("field contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def n_vertices(self):
        return self.values.shape[0]

    @property
    def n_channels(self):
        return self.values.shape[1]

    def with_values(self, values):
        return SignalField(values, self.mesh_id)

    def require_mesh(self, mesh_id):
        if self.mesh_id and mesh_id and self.mesh_id != mesh_id:
            raise ValueError(
                f"field bound to mesh {self.mesh_id[:12]}... but operator "
                f"belongs to {mesh_id[:12]}..."
            )
