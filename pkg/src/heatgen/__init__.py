"""Denoising diffusion for per-vertex signals on triangle meshes.

The pipeline: load a mesh, precompute spectral operators (cotangent
Laplacian, eigenbasis, tangent gradients), bake training textures onto
vertices, train a noise predictor built from heat-diffusion blocks, and
draw new textures by ancestral sampling.
"""

from .data import (
    PaddedBatch,
    TexturedSample,
    atlas_to_vertices,
    bake_image_to_vertices,
    build_batch,
    load_field,
    load_sample,
    save_field,
)
from .diffusion import (
    NoiseSchedule,
    ancestral_sample,
    make_schedule,
    q_sample,
    run_training,
    training_step,
)
from .evaluate import compute_mmd_cov, field_distance, time_inference
from .fields import SignalField
from .mesh import (
    Mesh,
    MeshLoadError,
    TangentFrame,
    compute_tangent_frames,
    compute_vertex_normals,
    load_mesh,
    save_ply,
)
from .net import (
    NetConfig,
    NoisePredictor,
    backward,
    forward,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .spectral import (
    SpectralOperators,
    assemble_cotan_laplacian,
    build_gradient_operator,
    build_operators,
    eigendecompose,
    heat_filter,
    load_operators,
    save_operators,
)

__version__ = "0.1.0"
