"""Command-line entry point.

Subcommands cover the full pipeline: operator precomputation, texture
baking, training, sampling, evaluation, and colored-mesh export. Runs are
reproducible from the serialized config plus seed; outputs are written
atomically.
"""

import argparse
import dataclasses
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluate as eval_mod
from .fields import SignalField
from .mesh import load_mesh, save_ply
from .spectral import build_operators, load_operators, read_cache_header, save_operators

DEFAULT_CACHE_DIR = ".heatgen-cache"


@dataclass
class RunConfig:
    """Training configuration; defaults follow the reference experiment
    setup where one is stated (k, blocks, learning rate, batch size,
    epochs, capacity)."""

    data_dir: str = ""
    cache_dir: str = DEFAULT_CACHE_DIR
    run_dir: str = "runs/default"
    k: int = 128
    blocks: int = 8
    width: int = 192
    time_embed_dim: int = 128
    schedule_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    learning_rate: float = 3e-2
    batch_size: int = 8
    epochs: int = 96
    max_steps: int = 0
    seed: int = 0
    capacity: int = data_mod.DEFAULT_CAPACITY
    precision: str = "f64"
    ckpt_every: int = 1000
    deterministic: bool = False

    @classmethod
    def from_file(cls, path):
        """Parse a `key = value` config file (# starts a comment)."""
        values = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                key, raw = (s.strip() for s in line.split("=", 1))
                if key not in fields:
                    raise ValueError(f"{path}:{lineno}: unknown config key '{key}'")
                ftype = fields[key].type
                if ftype in ("bool", bool):
                    values[key] = raw.lower() in ("1", "true", "yes", "on")
                elif ftype in ("int", int):
                    values[key] = int(raw)
                elif ftype in ("float", float):
                    values[key] = float(raw)
                else:
                    values[key] = raw
        return cls(**values)

    def to_file(self, path):
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            for f in dataclasses.fields(self):
                fh.write(f"{f.name} = {getattr(self, f.name)}\n")
        tmp.replace(path)


def _apply_thread_settings(deterministic):
    import torch

    env = os.environ.get("HEATGEN_THREADS")
    if deterministic:
        torch.set_num_threads(1)
    elif env:
        torch.set_num_threads(max(1, int(env)))


def _torch_dtype(precision):
    import torch

    if precision == "f64":
        return torch.float64
    if precision == "f32":
        return torch.float32
    raise ValueError(f"precision must be f32 or f64, got '{precision}'")


# ---------------------------------------------------------------------------
# Operator cache resolution
# ---------------------------------------------------------------------------

def find_cache(cache_dir, mesh_hash, k=None):
    """Locate an operator cache for a mesh hash (and k, when given)."""
    cache_dir = Path(cache_dir)
    if not cache_dir.is_dir():
        return None
    for path in sorted(cache_dir.glob("*.hgop")):
        try:
            _, _, ck, chash = read_cache_header(path)
        except (ValueError, OSError):
            continue
        if chash == mesh_hash and (k is None or ck == k):
            return path
    return None


def resolve_operators(cache_dir, mesh_hash, k=None):
    path = find_cache(cache_dir, mesh_hash, k)
    if path is None:
        want = f" with k={k}" if k else ""
        raise FileNotFoundError(
            f"no operator cache{want} for mesh {mesh_hash.hex()[:12]}... in "
            f"{cache_dir}; run `heatgen precompute` first"
        )
    return load_operators(path)


def ensure_operators(mesh, k, cache_dir, method="auto", seed=0, quiet=False):
    """Load cached operators for a mesh, computing and caching if absent."""
    cache_dir = Path(cache_dir)
    existing = find_cache(cache_dir, mesh.content_hash, k)
    if existing is not None:
        return load_operators(existing), True
    ops = build_operators(mesh, k, method=method, seed=seed)
    cache_dir.mkdir(parents=True, exist_ok=True)
    out = cache_dir / f"{mesh.mesh_id[:16]}.k{k}.hgop"
    save_operators(ops, out)
    if not quiet:
        print(f"  cached operators -> {out}")
    return ops, False


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_precompute(args):
    failures = 0
    for mesh_path in args.mesh:
        try:
            mesh = load_mesh(mesh_path)
            cached = find_cache(args.cache_dir, mesh.content_hash, args.k)
            if cached is not None:
                print(f"{mesh_path}: skipped (cached) -> {cached}")
                continue
            ops = build_operators(mesh, args.k, method=args.method, seed=args.seed)
            Path(args.cache_dir).mkdir(parents=True, exist_ok=True)
            out = Path(args.cache_dir) / f"{Path(mesh_path).stem}-{mesh.mesh_id[:12]}.k{args.k}.hgop"
            save_operators(ops, out)
            print(f"{mesh_path}: n={mesh.n_vertices} k={args.k} -> {out}")
        except Exception as exc:  # per-mesh failures must not abort the batch
            failures += 1
            print(f"{mesh_path}: FAILED ({type(exc).__name__}: {exc})", file=sys.stderr)
    return 1 if failures else 0


def _read_uv_file(path, n):
    uv = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if uv.shape != (n, 2):
        raise ValueError(f"{path}: expected {n} rows of 'u v', got shape {uv.shape}")
    return uv


def _load_image(path):
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def cmd_bake(args):
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.shapenet:
        return _bake_shape_tree(args, out_dir)

    mesh = load_mesh(args.mesh)
    uv = _read_uv_file(args.uv, mesh.n_vertices)
    image_dir = Path(args.images)
    names = None
    if args.split:
        names = data_mod.read_split(args.split)
        paths = [image_dir / name for name in names]
    else:
        exts = (".png", ".jpg", ".jpeg", ".bmp")
        paths = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in exts)
    if not paths:
        raise FileNotFoundError(f"no images found under {image_dir}")
    for path in paths:
        sample = data_mod.bake_image_to_vertices(
            _load_image(path), uv, mesh, source_id=path.name)
        data_mod.save_field(sample, out_dir / (path.stem + ".hgtx"))
    print(f"baked {len(paths)} image(s) onto {mesh.n_vertices} vertices -> {out_dir}")
    return 0


def _bake_shape_tree(args, out_dir):
    """Bake a per-category shape tree: each shape directory holds a mesh
    plus either per-face colors (face_colors.txt/.npy) or an atlas image
    with per-face centroid uv (atlas.png + face_uv.txt)."""
    category_dir = Path(args.shapenet) / args.category
    if not category_dir.is_dir():
        raise FileNotFoundError(f"category directory not found: {category_dir}")
    shape_dirs = sorted(p for p in category_dir.iterdir() if p.is_dir())
    if not shape_dirs:
        raise FileNotFoundError(f"no shape directories under {category_dir}")
    baked = 0
    for shape_dir in shape_dirs:
        mesh_path = next(
            (shape_dir / name for name in ("mesh.obj", "mesh.ply")
             if (shape_dir / name).exists()), None)
        if mesh_path is None:
            print(f"{shape_dir.name}: no mesh.obj/mesh.ply, skipped", file=sys.stderr)
            continue
        mesh = load_mesh(mesh_path)
        if (shape_dir / "face_colors.npy").exists():
            face_colors = np.load(shape_dir / "face_colors.npy")
        elif (shape_dir / "face_colors.txt").exists():
            face_colors = np.loadtxt(shape_dir / "face_colors.txt", ndmin=2)
        elif (shape_dir / "atlas.png").exists() and (shape_dir / "face_uv.txt").exists():
            atlas = _load_image(shape_dir / "atlas.png")
            face_uv = np.loadtxt(shape_dir / "face_uv.txt", ndmin=2)
            face_colors = data_mod.face_colors_from_atlas(atlas, face_uv)
        else:
            print(f"{shape_dir.name}: no face colors or atlas, skipped", file=sys.stderr)
            continue
        sample = data_mod.atlas_to_vertices(face_colors, mesh,
                                            source_id=shape_dir.name)
        data_mod.save_field(sample, out_dir / (shape_dir.name + ".hgtx"))
        baked += 1
    if not baked:
        raise RuntimeError(f"no shapes baked from {category_dir}")
    print(f"baked {baked} shape(s) -> {out_dir}")
    return 0


def _load_dataset(config):
    """Baked samples from data_dir, paired with cached operators by hash."""
    data_dir = Path(config.data_dir)
    paths = sorted(data_dir.glob("*.hgtx"))
    if not paths:
        raise FileNotFoundError(f"no .hgtx samples under {data_dir}")
    ops_by_id = {}
    dataset = []
    for path in paths:
        sample = data_mod.load_sample(path)
        if sample.colors.n_vertices > config.capacity:
            raise ValueError(
                f"{path}: {sample.colors.n_vertices} vertices exceeds capacity "
                f"{config.capacity}; decimate the mesh or raise `capacity`"
            )
        mid = sample.mesh_id
        if mid not in ops_by_id:
            ops_by_id[mid] = resolve_operators(
                config.cache_dir, bytes.fromhex(mid), config.k)
        field = SignalField(data_mod.to_model_space(sample.colors.values), mid)
        dataset.append((field, ops_by_id[mid]))
    return dataset, ops_by_id


def cmd_train(args):
    import torch

    from .diffusion import make_schedule, run_training
    from .net import NetConfig, init_model

    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    for key in ("data_dir", "cache_dir", "run_dir", "epochs", "max_steps",
                "learning_rate", "batch_size", "seed", "width", "blocks", "k",
                "precision", "ckpt_every", "capacity", "schedule_steps"):
        value = getattr(args, key, None)
        if value is not None:
            config = dataclasses.replace(config, **{key: value})
    if args.deterministic:
        config = dataclasses.replace(config, deterministic=True)
    _apply_thread_settings(config.deterministic)

    run_dir = Path(config.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config.to_file(run_dir / "config.txt")

    dataset, ops_by_id = _load_dataset(config)
    print(f"dataset: {len(dataset)} sample(s) on {len(ops_by_id)} mesh(es)")

    # init the learnable diffusion times near the squared mean edge length,
    # estimated from the mean vertex area share
    mean_mass = float(np.mean([ops.mass.mean() for ops in ops_by_id.values()]))
    time_init = 2.0 / np.sqrt(3.0) * mean_mass

    net_config = NetConfig(c_in=3, width=config.width, n_blocks=config.blocks,
                           k=config.k, time_embed_dim=config.time_embed_dim)
    model = init_model(net_config, seed=config.seed,
                       diffusion_time_init=time_init,
                       dtype=_torch_dtype(config.precision))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    sched = make_schedule(config.schedule_steps, config.beta_start, config.beta_end)

    result = run_training(
        model, optimizer, dataset, sched, run_dir,
        batch_size=config.batch_size, epochs=config.epochs,
        max_steps=config.max_steps or None, seed=config.seed,
        ckpt_every=config.ckpt_every,
    )
    print(f"trained {result.steps} step(s); final loss {result.final_loss:.6f}; "
          f"checkpoint {result.checkpoint_path}")
    return 0


def cmd_sample(args):
    from .diffusion import ancestral_sample, make_schedule
    from .net import load_checkpoint

    _apply_thread_settings(args.deterministic)
    model, _ = load_checkpoint(args.ckpt, dtype=_torch_dtype(args.precision))
    mesh = load_mesh(args.mesh)
    ops, _ = ensure_operators(mesh, model.config.k, args.cache_dir,
                              seed=args.seed, quiet=False)
    sched = make_schedule(args.steps, args.beta_start, args.beta_end)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        seed_i = args.seed + i
        field = ancestral_sample(model, ops, sched, seed=seed_i)
        rgb = SignalField(data_mod.from_model_space(field.values), field.mesh_id)
        out = out_dir / f"sample-{seed_i:05d}.hgtx"
        data_mod.save_field(rgb, out)
        print(f"sample {i + 1}/{args.count} -> {out}")
    return 0


def _load_field_dir(path):
    paths = sorted(Path(path).glob("*.hgtx"))
    if not paths:
        raise FileNotFoundError(f"no .hgtx fields under {path}")
    return [data_mod.load_field(p)[0] for p in paths]


def cmd_eval(args):
    reference = _load_field_dir(args.ref)
    generated = _load_field_dir(args.gen)
    mesh_ids = {f.mesh_id for f in reference + generated}
    if len(mesh_ids) != 1:
        raise ValueError(f"fields span {len(mesh_ids)} meshes; expected exactly 1")
    mesh_id = mesh_ids.pop()
    if args.ops:
        ops = load_operators(args.ops)
        if ops.mesh_id != mesh_id:
            raise ValueError("--ops cache does not match the fields' mesh")
    else:
        ops = resolve_operators(args.cache_dir, bytes.fromhex(mesh_id))
    mmd, cov = eval_mod.compute_mmd_cov(reference, generated, ops.mass)
    out = Path(args.out) if args.out else Path(args.gen) / "report.csv"
    summary = eval_mod.write_report(out, mmd, cov, len(reference), len(generated))
    print(summary)
    print(f"report -> {out}")
    return 0


def cmd_export(args):
    field, source_id = data_mod.load_field(args.field)
    mesh = load_mesh(args.mesh)
    if field.mesh_id and field.mesh_id != mesh.mesh_id:
        raise ValueError(
            f"field was generated on mesh {field.mesh_id[:12]}... but "
            f"{args.mesh} hashes to {mesh.mesh_id[:12]}..."
        )
    save_ply(mesh, args.out, vertex_colors=field.values)
    label = f" ({source_id})" if source_id else ""
    print(f"exported{label} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="heatgen",
        description="Denoising diffusion for per-vertex signals on triangle "
                    "meshes via spectral heat-kernel filtering.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("precompute", help="build and cache spectral operators")
    p.add_argument("--mesh", nargs="+", required=True)
    p.add_argument("--k", type=int, default=128)
    p.add_argument("--cache-dir", default=DEFAULT_CACHE_DIR)
    p.add_argument("--method", default="auto",
                   choices=["auto", "dense", "iterative"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("bake", help="bake textures to per-vertex colors")
    p.add_argument("--images", help="directory of images to bake")
    p.add_argument("--uv", help="per-vertex uv file (one 'u v' line per vertex)")
    p.add_argument("--mesh", help="target mesh for image baking")
    p.add_argument("--split", help="optional split file restricting/ordering images")
    p.add_argument("--shapenet", help="root of a per-category shape tree")
    p.add_argument("--category", help="category name under the shape tree")
    p.add_argument("--out-dir", default="baked")
    p.set_defaults(func=cmd_bake)

    p = sub.add_parser("train", help="train a noise predictor")
    p.add_argument("--config", help="key = value config file")
    for flag, typ in [("data-dir", str), ("cache-dir", str), ("run-dir", str),
                      ("epochs", int), ("max-steps", int),
                      ("learning-rate", float), ("batch-size", int),
                      ("seed", int), ("width", int), ("blocks", int),
                      ("k", int), ("precision", str), ("ckpt-every", int),
                      ("capacity", int), ("schedule-steps", int)]:
        p.add_argument(f"--{flag}", type=typ, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="samples")
    p.add_argument("--cache-dir", default=DEFAULT_CACHE_DIR)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)
    p.add_argument("--precision", default="f64")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="MMD/COV between field sets")
    p.add_argument("--ref", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--ops", help="operator cache supplying the mass weights")
    p.add_argument("--cache-dir", default=DEFAULT_CACHE_DIR)
    p.add_argument("--out", help="report CSV path (default <gen>/report.csv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="write a vertex-colored PLY")
    p.add_argument("--field", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
