"""Dataset construction: texture baking, per-face atlases, batching, file IO.

Training samples are per-vertex RGB fields in [0, 1], stored in a packed
binary alongside the operator cache so baking happens once, not per epoch.
"""

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fields import SignalField

__all__ = [
    "PaddedBatch",
    "TexturedSample",
    "atlas_to_vertices",
    "bake_image_to_vertices",
    "build_batch",
    "face_colors_from_atlas",
    "from_model_space",
    "load_field",
    "load_sample",
    "read_split",
    "sample_image_bilinear",
    "save_field",
    "to_model_space",
]

DEFAULT_CAPACITY = 60_000

# Reference corpus sizes (documentation constants, used for split sanity checks)
CELEBAHQ_TRAIN_COUNT = 24_183
CELEBAHQ_TEST_COUNT = 2_824
SHAPENET_CHAIR_TRAIN_COUNT = 2_412
SHAPENET_CHAIR_TEST_COUNT = 311


@dataclass(frozen=True)
class TexturedSample:
    """A baked training sample: per-vertex RGB in [0, 1] plus provenance."""

    colors: SignalField
    source_id: str = ""

    def __post_init__(self):
        v = self.colors.values
        if v.shape[1] != 3:
            raise ValueError(f"textured sample needs 3 channels, got {v.shape[1]}")
        if v.min() < -1e-9 or v.max() > 1.0 + 1e-9:
            raise ValueError(
                f"colors outside [0, 1]: range [{v.min():.4f}, {v.max():.4f}]"
            )

    @property
    def mesh_id(self):
        return self.colors.mesh_id


def to_model_space(rgb):
    """Map colors from [0, 1] into the [-1, 1] range used for training."""
    return 2.0 * rgb - 1.0


def from_model_space(x):
    """Inverse of :func:`to_model_space`; no clamping (export clamps)."""
    return 0.5 * (x + 1.0)


def sample_image_bilinear(image, uv):
    """Bilinearly sample an (H, W, C) image at uv in [0, 1]^2.

    v = 0 addresses the bottom image row (OBJ texture convention). uv
    outside the unit square is clamped with a warning.
    """
    image = np.asarray(image, dtype=np.float64)
    uv = np.asarray(uv, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"image must be (H, W, C), got {image.shape}")
    if uv.ndim != 2 or uv.shape[1] != 2:
        raise ValueError(f"uv must be (n, 2), got {uv.shape}")
    if (uv < 0.0).any() or (uv > 1.0).any():
        warnings.warn("uv coordinates outside [0, 1]; clamping", stacklevel=2)
        uv = np.clip(uv, 0.0, 1.0)
    h, w = image.shape[:2]
    col = uv[:, 0] * (w - 1)
    row = (1.0 - uv[:, 1]) * (h - 1)
    c0 = np.floor(col).astype(np.int64)
    r0 = np.floor(row).astype(np.int64)
    c1 = np.minimum(c0 + 1, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    fc = (col - c0)[:, None]
    fr = (row - r0)[:, None]
    top = image[r0, c0] * (1 - fc) + image[r0, c1] * fc
    bot = image[r1, c0] * (1 - fc) + image[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def bake_image_to_vertices(image, uv, mesh, source_id=""):
    """Assign vertex colors by bilinear lookup of an image at per-vertex uv."""
    if uv is None:
        raise ValueError("per-vertex uv coordinates are required for baking")
    uv = np.asarray(uv, dtype=np.float64)
    if len(uv) != mesh.n_vertices:
        raise ValueError(f"uv count {len(uv)} != vertex count {mesh.n_vertices}")
    colors = sample_image_bilinear(image, uv)
    return TexturedSample(
        colors=SignalField(np.clip(colors, 0.0, 1.0), mesh.mesh_id),
        source_id=source_id,
    )


def face_colors_from_atlas(image, face_uv):
    """One RGB per face: sample the atlas at the face's (centroid) uv."""
    return sample_image_bilinear(image, face_uv)


def atlas_to_vertices(face_colors, mesh, source_id=""):
    """Area-interpolate per-face colors onto vertices.

    Vertex color is the face-area-weighted average of its incident faces'
    colors, so outputs stay inside the convex hull of the incident colors.
    """
    face_colors = np.asarray(face_colors, dtype=np.float64)
    if face_colors.shape != (mesh.n_faces, 3):
        raise ValueError(
            f"face colors must be ({mesh.n_faces}, 3), got {face_colors.shape}"
        )
    n = mesh.n_vertices
    acc = np.zeros((n, 3), dtype=np.float64)
    wsum = np.zeros(n, dtype=np.float64)
    for c in range(3):
        idx = mesh.faces[:, c]
        np.add.at(acc, idx, mesh.face_areas[:, None] * face_colors)
        np.add.at(wsum, idx, mesh.face_areas)
    uncovered = wsum <= 0.0
    if uncovered.any():
        i = int(np.flatnonzero(uncovered)[0])
        raise ValueError(f"vertex {i} has no incident face area; cannot interpolate")
    colors = acc / wsum[:, None]
    return TexturedSample(
        colors=SignalField(np.clip(colors, 0.0, 1.0), mesh.mesh_id),
        source_id=source_id,
    )


@dataclass
class PaddedBatch:
    """Fixed-capacity stack of color fields with a validity mask.

    Padded rows are zero and masked out; losses divide by the real vertex
    count per element so padding is loss-neutral.
    """

    capacity: int
    values: np.ndarray          # (B, capacity, c), zero beyond counts[b]
    mask: np.ndarray            # (B, capacity) bool
    counts: np.ndarray          # (B,) real vertex counts
    mesh_ids: list
    operators: list = field(default_factory=list)
    source_ids: list = field(default_factory=list)


def build_batch(samples, capacity=DEFAULT_CAPACITY, operators=None):
    """Zero-pad sample color fields to a common capacity with a mask.

    ``samples`` may be TexturedSamples or bare SignalFields. Raises if any
    sample exceeds the capacity (decimate the mesh first).
    """
    if not samples:
        raise ValueError("empty batch")
    fields = [s.colors if isinstance(s, TexturedSample) else s for s in samples]
    c = fields[0].n_channels
    counts = np.array([f.n_vertices for f in fields], dtype=np.int64)
    too_big = counts > capacity
    if too_big.any():
        i = int(np.flatnonzero(too_big)[0])
        raise ValueError(
            f"sample {i} has {counts[i]} vertices > capacity {capacity}; "
            "decimate the mesh or raise the capacity"
        )
    values = np.zeros((len(fields), capacity, c), dtype=np.float64)
    mask = np.zeros((len(fields), capacity), dtype=bool)
    for b, f in enumerate(fields):
        values[b, :counts[b]] = f.values
        mask[b, :counts[b]] = True
    return PaddedBatch(
        capacity=capacity, values=values, mask=mask, counts=counts,
        mesh_ids=[f.mesh_id for f in fields],
        operators=list(operators) if operators is not None else [],
        source_ids=[s.source_id if isinstance(s, TexturedSample) else ""
                    for s in samples],
    )


# ---------------------------------------------------------------------------
# Baked-sample file ("HGTX") and split files
# ---------------------------------------------------------------------------

FIELD_MAGIC = b"HGTX"
FIELD_VERSION = 1
_FIELD_HEADER = struct.Struct("<4sI32sI")


def save_field(field_or_sample, path):
    """Write a 3-channel field as a packed binary; atomic."""
    if isinstance(field_or_sample, TexturedSample):
        sig, source_id = field_or_sample.colors, field_or_sample.source_id
    else:
        sig, source_id = field_or_sample, ""
    if sig.n_channels != 3:
        raise ValueError("field files store RGB (3 channels)")
    path = Path(path)
    mesh_hash = bytes.fromhex(sig.mesh_id) if sig.mesh_id else b"\x00" * 32
    sid = source_id.encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_FIELD_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, mesh_hash,
                                    sig.n_vertices))
        fh.write(sig.values.astype("<f4").tobytes())
        fh.write(struct.pack("<H", len(sid)))
        fh.write(sid)
    tmp.replace(path)


def load_field(path):
    """Read a field file; returns (SignalField, source_id). No range check."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic, version, mesh_hash, n = _FIELD_HEADER.unpack(
            fh.read(_FIELD_HEADER.size))
        if magic != FIELD_MAGIC:
            raise ValueError(f"{path}: not a baked field file")
        if version != FIELD_VERSION:
            raise ValueError(f"{path}: unsupported field version {version}")
        values = np.frombuffer(fh.read(12 * n), dtype="<f4").reshape(n, 3)
        (sid_len,) = struct.unpack("<H", fh.read(2))
        source_id = fh.read(sid_len).decode("utf-8")
    mesh_id = mesh_hash.hex() if mesh_hash != b"\x00" * 32 else ""
    return SignalField(values.astype(np.float64), mesh_id), source_id


def load_sample(path):
    """Read a field file as a training sample, enforcing colors in [0, 1]."""
    sig, source_id = load_field(path)
    return TexturedSample(colors=sig, source_id=source_id)


def read_split(path):
    """One source_id per line, UTF-8; blank lines are skipped."""
    with open(path, "r", encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def write_split(ids, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for sid in ids:
            fh.write(f"{sid}\n")
    tmp.replace(path)
