"""Denoising-diffusion machinery on vertex signal fields.

Linear noise schedule, forward noising, the noise-prediction MSE objective,
single-step training updates, and ancestral sampling. Timestep indices are
0-based: index t corresponds to the (t+1)-th noising step, so t ranges over
[0, T).
"""

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .fields import SignalField
from .net import save_checkpoint, torch_operators

__all__ = [
    "NoiseSchedule",
    "TrainingRun",
    "ancestral_sample",
    "ancestral_sample_batch",
    "make_schedule",
    "padded_batch_loss",
    "q_sample",
    "run_training",
    "training_step",
]

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with derived quantities.

    alpha_bar[t] is the cumulative product of alpha up to index t; sigma is
    the posterior standard deviation, fixed to sqrt(beta_t).
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self):
        return len(self.beta)


def make_schedule(T=DEFAULT_T, beta_start=DEFAULT_BETA_START, beta_end=DEFAULT_BETA_END):
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"beta range must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def q_sample(f0, t, eps, sched):
    """Forward noising: sqrt(abar_t) * f0 + sqrt(1 - abar_t) * eps.

    Works uniformly on SignalFields, numpy arrays, and torch tensors (the
    schedule coefficients are plain floats).
    """
    if not 0 <= t < sched.T:
        raise ValueError(f"timestep {t} outside [0, {sched.T})")
    ab = float(sched.alpha_bar[t])
    if isinstance(f0, SignalField):
        eps_values = eps.values if isinstance(eps, SignalField) else np.asarray(eps)
        if eps_values.shape != f0.values.shape:
            raise ValueError(
                f"noise shape {eps_values.shape} != signal shape {f0.values.shape}"
            )
        return f0.with_values(
            math.sqrt(ab) * f0.values + math.sqrt(1.0 - ab) * eps_values
        )
    if f0.shape != eps.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != signal shape {tuple(f0.shape)}")
    return math.sqrt(ab) * f0 + math.sqrt(1.0 - ab) * eps


def training_step(model, optimizer, batch, sched, generator):
    """One optimizer update on a batch of (SignalField, SpectralOperators).

    Per element: t ~ uniform{0..T-1}, eps ~ N(0, I), MSE between eps and the
    model's prediction on the noised signal; the batch loss is the mean of
    per-element losses. Elements sharing one operator set are evaluated as a
    single stacked forward pass. Returns the batch loss as a float.
    """
    if not batch:
        raise ValueError("empty batch")
    optimizer.zero_grad(set_to_none=True)

    # draw (t, eps) in batch order so the random stream does not depend on
    # how elements group by mesh
    draws = []
    for field, ops in batch:
        field.require_mesh(ops.mesh_id)
        t = int(torch.randint(0, sched.T, (1,), generator=generator).item())
        eps = torch.randn(field.values.shape, generator=generator,
                          dtype=torch.float64).to(model.dtype)
        draws.append((field, ops, t, eps))

    groups = {}
    for draw in draws:
        groups.setdefault(id(draw[1]), []).append(draw)

    total = None
    for items in groups.values():
        ops = items[0][1]
        tops = torch_operators(ops, model.dtype)
        x0 = torch.stack([torch.from_numpy(f.values).to(model.dtype)
                          for f, _, _, _ in items])
        eps = torch.stack([e for _, _, _, e in items])
        ts = np.array([t for _, _, t, _ in items])
        ab = torch.from_numpy(sched.alpha_bar[ts]).to(model.dtype)[:, None, None]
        f_t = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
        pred = model(f_t, torch.from_numpy(ts), tops)
        losses = ((pred - eps) ** 2).mean(dim=(1, 2))
        if not torch.isfinite(losses).all():
            raise FloatingPointError(
                f"non-finite loss on mesh {ops.mesh_id[:12]}...; step aborted"
            )
        part = losses.sum()
        total = part if total is None else total + part
    mean_loss = total / len(batch)
    mean_loss.backward()
    optimizer.step()
    return float(mean_loss.detach())


def padded_batch_loss(model, batch, ts, eps_padded, sched):
    """Noise-prediction loss evaluated through a zero-padded batch.

    ``batch`` is a data.PaddedBatch whose operators are set; ``ts`` gives one
    timestep per element and ``eps_padded`` is (B, capacity, c) noise, zero
    on padded rows. Masked rows contribute nothing; each element is averaged
    over its real vertex count so the result equals the mean of per-sample
    losses.
    """
    B, capacity, c = eps_padded.shape
    values = torch.from_numpy(batch.values).to(model.dtype)
    eps = torch.as_tensor(eps_padded).to(model.dtype)
    mask = torch.from_numpy(batch.mask)
    pred = torch.zeros_like(eps)
    for b in range(B):
        n_b = int(batch.counts[b])
        tops = torch_operators(batch.operators[b], model.dtype)
        f_t = q_sample(values[b, :n_b], int(ts[b]), eps[b, :n_b], sched)
        pred[b, :n_b] = model(f_t, int(ts[b]), tops)
    sq = (pred - eps) ** 2 * mask[:, :, None]
    per_element = sq.sum(dim=(1, 2)) / (
        torch.as_tensor(batch.counts, dtype=model.dtype) * c
    )
    return per_element.mean()


def ancestral_sample(model, ops, sched, seed=0, n_channels=None):
    """Generate one field by iterating the learned reverse transitions.

    Starts from per-vertex standard normal noise and applies, for t = T..1,
    the posterior mean step with the model's noise prediction, adding
    sigma_t-scaled noise except at the final step. Deterministic given seed.
    """
    tops = torch_operators(ops, model.dtype)
    c = n_channels or model.config.c_in
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn((ops.n, c), generator=gen, dtype=torch.float64).to(model.dtype)
    with torch.no_grad():
        for t in range(sched.T - 1, -1, -1):
            eps_hat = model(x, t, tops)
            coef = float(sched.beta[t] / math.sqrt(1.0 - sched.alpha_bar[t]))
            x = (x - coef * eps_hat) / math.sqrt(float(sched.alpha[t]))
            if t > 0:
                noise = torch.randn((ops.n, c), generator=gen,
                                    dtype=torch.float64).to(model.dtype)
                x = x + float(sched.sigma[t]) * noise
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite sample state at step {t}")
    return SignalField(x.double().numpy(), ops.mesh_id)


def ancestral_sample_batch(model, ops, sched, seeds, n_channels=None):
    """Draw several samples on one mesh through stacked reverse steps.

    Each sample consumes its own seeded noise stream, so results depend only
    on the per-sample seed, not on which samples share the batch.
    """
    tops = torch_operators(ops, model.dtype)
    c = n_channels or model.config.c_in
    gens = [torch.Generator().manual_seed(s) for s in seeds]
    B = len(gens)

    def draw():
        return torch.stack([
            torch.randn((ops.n, c), generator=g, dtype=torch.float64)
            for g in gens
        ]).to(model.dtype)

    x = draw()
    with torch.no_grad():
        for t in range(sched.T - 1, -1, -1):
            ts = torch.full((B,), t, dtype=torch.int64)
            eps_hat = model(x, ts, tops)
            coef = float(sched.beta[t] / math.sqrt(1.0 - sched.alpha_bar[t]))
            x = (x - coef * eps_hat) / math.sqrt(float(sched.alpha[t]))
            if t > 0:
                x = x + float(sched.sigma[t]) * draw()
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite sample state at step {t}")
    return [SignalField(x[b].double().numpy(), ops.mesh_id) for b in range(B)]


@dataclass
class TrainingRun:
    """Summary of a finished training loop."""

    steps: int
    final_loss: float
    mean_recent_loss: float
    checkpoint_path: Path


def run_training(model, optimizer, dataset, sched, run_dir, *, batch_size=8,
                 epochs=1, max_steps=None, seed=0, ckpt_every=1000,
                 log_every=1, stop_below=None, window=100):
    """Train over (SignalField, SpectralOperators) pairs with logging.

    Writes ``loss.csv`` (step, wall_time_s, loss) and periodic checkpoints
    under ``run_dir``; a final checkpoint is always written. ``stop_below``
    stops early once the trailing-``window`` mean loss drops below it.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    gen = torch.Generator().manual_seed(seed)
    t0 = time.perf_counter()
    losses = []
    step = 0
    done = False

    log_path = run_dir / "loss.csv"
    with open(log_path, "w", newline="") as log_fh:
        writer = csv.writer(log_fh)
        writer.writerow(["step", "wall_time_s", "loss"])
        for _epoch in range(epochs):
            order = torch.randperm(len(dataset), generator=gen).tolist()
            for lo in range(0, len(order), batch_size):
                batch = [dataset[i] for i in order[lo:lo + batch_size]]
                loss = training_step(model, optimizer, batch, sched, gen)
                losses.append(loss)
                step += 1
                if step % log_every == 0:
                    writer.writerow(
                        [step, f"{time.perf_counter() - t0:.3f}", f"{loss:.8f}"]
                    )
                if ckpt_every and step % ckpt_every == 0:
                    save_checkpoint(model, run_dir / f"ckpt-step{step:07d}.hgck",
                                    optimizer)
                recent = float(np.mean(losses[-window:]))
                if stop_below is not None and len(losses) >= window and recent < stop_below:
                    done = True
                if max_steps is not None and step >= max_steps:
                    done = True
                if done:
                    break
            if done:
                break
            save_checkpoint(model, run_dir / "ckpt-epoch-end.hgck", optimizer)

    final_path = run_dir / "ckpt-final.hgck"
    save_checkpoint(model, final_path, optimizer)
    return TrainingRun(
        steps=step,
        final_loss=losses[-1] if losses else float("nan"),
        mean_recent_loss=float(np.mean(losses[-window:])) if losses else float("nan"),
        checkpoint_path=final_path,
    )
