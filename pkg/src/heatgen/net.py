"""Noise-prediction network for per-vertex signals.

A stack of residual blocks, each combining learnable-time spectral heat
diffusion, tangent-gradient features mixed by a learnable complex matrix,
and a timestep-conditioned per-vertex MLP with layer normalization. The
model is mesh-agnostic: all geometry enters through precomputed spectral
operators, so one set of weights runs on any cached mesh.
"""

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .fields import SignalField

__all__ = [
    "NetConfig",
    "NoisePredictor",
    "TorchOperators",
    "backward",
    "forward",
    "init_model",
    "load_checkpoint",
    "parameter_gradients",
    "save_checkpoint",
    "torch_operators",
]


@dataclass(frozen=True)
class NetConfig:
    c_in: int = 3
    width: int = 192
    n_blocks: int = 8
    k: int = 128
    time_embed_dim: int = 128


class TorchOperators:
    """Spectral operators converted to torch tensors for one dtype."""

    def __init__(self, ops, dtype=torch.float64):
        self.n = ops.n
        self.k = ops.k
        self.mesh_id = ops.mesh_id
        self.dtype = dtype
        self.mass = torch.from_numpy(ops.mass).to(dtype)
        self.evals = torch.from_numpy(ops.evals).to(dtype)
        self.evecs = torch.from_numpy(ops.evecs).to(dtype)
        G = ops.grad.tocsr()
        crow = torch.from_numpy(G.indptr.astype(np.int64))
        col = torch.from_numpy(G.indices.astype(np.int64))
        with warnings.catch_warnings():
            # torch's sparse CSR layout works fine here but still carries a
            # beta-state warning at construction
            warnings.simplefilter("ignore")
            self.grad_x = torch.sparse_csr_tensor(
                crow, col,
                torch.from_numpy(np.ascontiguousarray(G.data.real)).to(dtype),
                size=(self.n, self.n))
            self.grad_y = torch.sparse_csr_tensor(
                crow, col,
                torch.from_numpy(np.ascontiguousarray(G.data.imag)).to(dtype),
                size=(self.n, self.n))


_TORCH_OPS_CACHE = {}


def torch_operators(ops, dtype=torch.float64):
    """Convert (and memoize) SpectralOperators for use inside the network."""
    key = (ops.mesh_id, ops.k, dtype)
    hit = _TORCH_OPS_CACHE.get(key)
    if hit is None:
        hit = _TORCH_OPS_CACHE[key] = TorchOperators(ops, dtype)
    return hit


class SinusoidalEmbedding(nn.Module):
    """Classic sin/cos embedding of integer timesteps; accepts a scalar or a
    (B,) batch of steps."""

    def __init__(self, dim):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("time embedding dimension must be even")
        self.dim = dim
        half = dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64)
                          / max(half - 1, 1))
        self.register_buffer("freqs", freqs)

    def forward(self, t):
        t = torch.as_tensor(t, dtype=self.freqs.dtype)
        angles = t[..., None] * self.freqs
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class HeatDiffusion(nn.Module):
    """Spectral heat filter with one learnable diffusion time per channel.

    Times are kept nonnegative through a softplus reparameterization of the
    stored raw parameter.
    """

    def __init__(self, width):
        super().__init__()
        self.raw_times = nn.Parameter(torch.zeros(width, dtype=torch.float64))

    @property
    def times(self):
        return F.softplus(self.raw_times)

    def forward(self, x, ops):
        # x is (..., n, w); matmul broadcasting handles batched stacks
        coeff = torch.matmul(ops.evecs.T, ops.mass[:, None] * x)   # (..., k, w)
        decay = torch.exp(-ops.evals[:, None] * self.times[None, :])
        return torch.matmul(ops.evecs, decay * coeff)


class GradientFeatures(nn.Module):
    """Collapse per-channel tangent gradients to rotation-invariant scalars.

    Gradients z = dX + i dY are mixed channel-wise by a learnable complex
    matrix A (stored as real/imaginary parts) and reduced per vertex as
    tanh(Re(conj(z) * (A z))).
    """

    def __init__(self, width):
        super().__init__()
        self.a_re = nn.Parameter(torch.empty(width, width, dtype=torch.float64))
        self.a_im = nn.Parameter(torch.empty(width, width, dtype=torch.float64))

    def forward(self, zx, zy):
        w_re = zx @ self.a_re.T - zy @ self.a_im.T
        w_im = zy @ self.a_re.T + zx @ self.a_im.T
        return torch.tanh(zx * w_re + zy * w_im)


class DiffusionBlock(nn.Module):
    """Residual block: heat diffusion, gradient features, timestep-aware MLP.

    The MLP consumes layer-normalized [diffused, gradient features, input],
    receives the projected time embedding as an additive bias after its
    first layer, and feeds a residual connection around the whole block.
    """

    def __init__(self, width, time_embed_dim):
        super().__init__()
        self.width = width
        self.heat = HeatDiffusion(width)
        self.grad_features = GradientFeatures(width)
        self.norm = nn.LayerNorm(3 * width).to(torch.float64)
        self.lin1 = nn.Linear(3 * width, width, dtype=torch.float64)
        self.lin2 = nn.Linear(width, width, dtype=torch.float64)
        self.lin3 = nn.Linear(width, width, dtype=torch.float64)
        self.time_proj = nn.Linear(time_embed_dim, width, dtype=torch.float64)

    def forward(self, x, ops, temb):
        diffused = self.heat(x, ops)
        zx = _spmm(ops.grad_x, diffused)
        zy = _spmm(ops.grad_y, diffused)
        grads = self.grad_features(zx, zy)
        h = self.norm(torch.cat([diffused, grads, x], dim=-1))
        # temb is (d,) or (B, d); the projected bias broadcasts over vertices
        bias = self.time_proj(temb)
        if bias.dim() == 2:
            bias = bias[:, None, :]
        h = self.lin1(h) + bias
        h = F.silu(h)
        h = F.silu(self.lin2(h))
        return x + self.lin3(h)


def _spmm(sp, dense):
    """Sparse (n, n) @ dense (..., n, w), flattening any batch dims."""
    if dense.dim() == 2:
        return torch.matmul(sp, dense)
    b, n, w = dense.shape
    flat = dense.permute(1, 0, 2).reshape(n, b * w)
    out = torch.matmul(sp, flat)
    return out.reshape(n, b, w).permute(1, 0, 2)


class NoisePredictor(nn.Module):
    """Predicts the noise component of a noisy per-vertex signal at step t."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.embed = SinusoidalEmbedding(config.time_embed_dim)
        self.time_mlp = nn.Linear(config.time_embed_dim, config.time_embed_dim,
                                  dtype=torch.float64)
        self.input_proj = nn.Linear(config.c_in, config.width, dtype=torch.float64)
        self.blocks = nn.ModuleList(
            DiffusionBlock(config.width, config.time_embed_dim)
            for _ in range(config.n_blocks)
        )
        self.output_proj = nn.Linear(config.width, config.c_in, dtype=torch.float64)

    @property
    def dtype(self):
        return self.input_proj.weight.dtype

    def forward(self, x, t, ops):
        """Predict noise for x of shape (n, c) with an int timestep, or a
        same-mesh stack (B, n, c) with per-element timesteps (B,)."""
        if x.shape[-2] != ops.n:
            raise ValueError(
                f"field has {x.shape[-2]} rows but operators belong to a mesh "
                f"with {ops.n} vertices"
            )
        temb = F.silu(self.time_mlp(self.embed(t).to(self.dtype)))
        h = self.input_proj(x)
        for b, block in enumerate(self.blocks):
            h = block(h, ops, temb)
            if not torch.isfinite(h).all():
                raise FloatingPointError(f"non-finite activations after block {b}")
        return self.output_proj(h)


def _softplus_inverse(y):
    # log(expm1(y)), stable for small y
    return float(np.log(np.expm1(y))) if y < 20.0 else float(y)


def init_model(config, seed=0, diffusion_time_init=0.01, dtype=torch.float64):
    """Deterministically initialized model.

    Linear weights draw from the fan-in-scaled uniform U(-1/sqrt(fan_in),
    1/sqrt(fan_in)) and biases start at zero; the final output projection is
    zeroed so a fresh model predicts the zero field. Raw diffusion times are
    set so the effective time equals ``diffusion_time_init`` (a sensible
    value is the squared mean edge length of the training mesh).
    """
    gen = torch.Generator().manual_seed(seed)
    model = NoisePredictor(config)

    def fan_in_uniform(weight):
        fan_in = weight.shape[1]
        bound = 1.0 / math.sqrt(fan_in)
        with torch.no_grad():
            weight.copy_((torch.rand(weight.shape, generator=gen,
                                     dtype=torch.float64) * 2.0 - 1.0) * bound)

    raw_time = _softplus_inverse(diffusion_time_init)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Linear):
                fan_in_uniform(module.weight)
                module.bias.zero_()
            elif isinstance(module, HeatDiffusion):
                module.raw_times.fill_(raw_time)
            elif isinstance(module, GradientFeatures):
                fan_in_uniform(module.a_re)
                fan_in_uniform(module.a_im)
        model.output_proj.weight.zero_()
        model.output_proj.bias.zero_()
    return model.to(dtype)


def forward(model, f_t, t, ops):
    """Functional inference surface over numpy-backed fields."""
    f_t.require_mesh(ops.mesh_id)
    tops = torch_operators(ops, model.dtype)
    x = torch.from_numpy(f_t.values).to(model.dtype)
    with torch.no_grad():
        out = model(x, t, tops)
    return f_t.with_values(out.double().numpy())


def backward(model, f_t, t, ops, upstream_grad):
    """Reverse-mode gradients of sum(forward * upstream) for every parameter.

    Returns a dict mapping parameter names to numpy gradient arrays.
    """
    f_t.require_mesh(ops.mesh_id)
    tops = torch_operators(ops, model.dtype)
    x = torch.from_numpy(f_t.values).to(model.dtype)
    upstream = torch.from_numpy(np.asarray(upstream_grad, dtype=np.float64)).to(model.dtype)
    if upstream.shape != x.shape:
        raise ValueError(f"upstream gradient shape {tuple(upstream.shape)} != field shape {tuple(x.shape)}")
    out = model(x, t, tops)
    objective = (out * upstream).sum()
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(objective, params, allow_unused=False)
    result = {n: g.detach().double().numpy().copy() for n, g in zip(names, grads)}
    for name, g in result.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    return result


def parameter_gradients(model):
    """Current .grad tensors by name (after a torch backward pass)."""
    return {n: None if p.grad is None else p.grad.detach().clone()
            for n, p in model.named_parameters()}


# ---------------------------------------------------------------------------
# Checkpoint file ("HGCK")
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"HGCK"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIIII")
_OPT_SECTION = b"OPTS"


def _write_tensor(fh, name, array):
    # np.ascontiguousarray would promote 0-d scalars to rank 1
    data = np.asarray(array, dtype=np.float64)
    name_bytes = name.encode("utf-8")
    fh.write(struct.pack("<H", len(name_bytes)))
    fh.write(name_bytes)
    fh.write(struct.pack("<B", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
    fh.write(data.astype("<f8").tobytes())


def _read_tensor(fh):
    (name_len,) = struct.unpack("<H", fh.read(2))
    name = fh.read(name_len).decode("utf-8")
    (rank,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy()
    return name, data


def save_checkpoint(model, path, optimizer=None):
    """Serialize model parameters (always f64) plus optional optimizer state."""
    path = Path(path)
    cfg = model.config
    opt_tensors = []
    if optimizer is not None:
        name_by_param = {p: n for n, p in model.named_parameters()}
        for param, state in optimizer.state.items():
            pname = name_by_param[param]
            for key, value in state.items():
                if isinstance(value, torch.Tensor):
                    opt_tensors.append((f"{pname}.{key}", value.detach().double().numpy()))
                else:
                    opt_tensors.append((f"{pname}.{key}", np.float64(value)))

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                                   cfg.c_in, cfg.width, cfg.n_blocks,
                                   cfg.k, cfg.time_embed_dim))
        named = list(model.named_parameters())
        fh.write(struct.pack("<I", len(named)))
        for name, param in named:
            _write_tensor(fh, name, param.detach().double().numpy())
        fh.write(_OPT_SECTION)
        fh.write(struct.pack("<I", len(opt_tensors)))
        for name, tensor in opt_tensors:
            _write_tensor(fh, name, tensor)
    tmp.replace(path)


def load_checkpoint(path, dtype=torch.float64):
    """Rebuild a model (and raw optimizer-state tensors) from a checkpoint.

    Returns (model, opt_state) where opt_state maps "param_name.key" to
    numpy arrays; pass it to :func:`attach_optimizer_state` to resume.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        magic, version, c_in, width, n_blocks, k, temb = _CKPT_HEADER.unpack(
            fh.read(_CKPT_HEADER.size))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        config = NetConfig(c_in=c_in, width=width, n_blocks=n_blocks, k=k,
                           time_embed_dim=temb)
        (n_params,) = struct.unpack("<I", fh.read(4))
        tensors = dict(_read_tensor(fh) for _ in range(n_params))
        tag = fh.read(4)
        opt_state = {}
        if tag == _OPT_SECTION:
            (n_opt,) = struct.unpack("<I", fh.read(4))
            opt_state = dict(_read_tensor(fh) for _ in range(n_opt))
        elif tag:
            raise ValueError(f"{path}: unknown section tag {tag!r}")

    model = NoisePredictor(config)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name not in tensors:
                raise ValueError(f"{path}: checkpoint is missing parameter '{name}'")
            value = tensors.pop(name)
            if tuple(value.shape) != tuple(param.shape):
                raise ValueError(
                    f"{path}: parameter '{name}' has shape {value.shape}, "
                    f"expected {tuple(param.shape)}"
                )
            param.copy_(torch.from_numpy(value))
    if tensors:
        raise ValueError(f"{path}: unused checkpoint tensors: {sorted(tensors)}")
    return model.to(dtype), opt_state


def attach_optimizer_state(optimizer, model, opt_state):
    """Load serialized per-parameter state tensors into a torch optimizer."""
    if not opt_state:
        return
    params = dict(model.named_parameters())
    grouped = {}
    for full_name, value in opt_state.items():
        pname, key = full_name.rsplit(".", 1)
        grouped.setdefault(pname, {})[key] = value
    for pname, entries in grouped.items():
        if pname not in params:
            raise ValueError(f"optimizer state references unknown parameter '{pname}'")
        param = params[pname]
        state = {}
        for key, value in entries.items():
            if key == "step":
                state[key] = torch.tensor(float(np.asarray(value).reshape(-1)[0]))
            else:
                state[key] = torch.from_numpy(np.asarray(value)).to(param.dtype)
        optimizer.state[param] = state
