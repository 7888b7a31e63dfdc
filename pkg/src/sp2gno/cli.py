"""Command line: gen-darcy, train, eval, predict, check, convert.

Exit codes: 0 success, 1 usage, 2 data, 3 numerical failure, 4 check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import (BundleCache, BundleSettings, DataError, Dataset, PointCloudSample,
                   convert_npz, dataset_bundles, default_cache_dir, generate_darcy,
                   geometry_fingerprint, load_dataset, save_dataset, subsample_dataset)
from .embedding import anchor_count, lipschitz_embed, select_anchors
from .graph import GraphError, build_knn_graph
from .model import Bundle, ModelConfig, init_parameters
from .spectral import EigensolverError, SpectralBasis
from .training import (Normalizer, TrainConfig, TrainingDiverged, evaluate, train,
                       write_history)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3, 4

logger = logging.getLogger("sp2gno")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ config

TRAIN_DEFAULTS = {
    "data": "", "out": "", "train_split": "train", "val_split": "val",
    "k": 20, "m": 32, "blocks": 6, "width": 32, "edge_width": 8, "gate_width": 64,
    "q_width": 0, "n_anchors": "auto",
    "lr": 1e-3, "weight_decay": 1e-4, "batch_size": 20, "epochs": 200,
    "decay_step": 0, "decay_gamma": 0.5,
    "seed": 0, "anchor_seed": -1, "eig_seed": -1, "init_seed": -1, "shuffle_seed": -1,
    "eig_tol": 1e-8, "cache_dir": "",
}
_SEED_KEYS = ("anchor_seed", "eig_seed", "init_seed", "shuffle_seed")


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key = key.strip().replace("-", "_")
        if key not in TRAIN_DEFAULTS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value.strip()
    return out


def _coerce(key: str, value):
    default = TRAIN_DEFAULTS[key]
    if key == "n_anchors":
        return "auto" if str(value) == "auto" else int(value)
    try:
        return type(default)(value)
    except ValueError as exc:
        raise UsageError(f"{key}: cannot parse {value!r} as {type(default).__name__}") from exc


def resolve_train_config(args) -> dict:
    """Flag > config file > default; seeds left at -1 inherit the master seed."""
    from_file = read_config_file(args.config) if args.config else {}
    resolved = {}
    for key in TRAIN_DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = _coerce(key, flag)
        elif key in from_file:
            resolved[key] = _coerce(key, from_file[key])
        else:
            resolved[key] = TRAIN_DEFAULTS[key]
    for key in _SEED_KEYS:
        if resolved[key] < 0:
            resolved[key] = resolved["seed"]
    problems = []
    if not resolved["data"]:
        problems.append("data path is required")
    if not resolved["out"]:
        problems.append("output directory is required")
    for key in ("k", "m", "blocks", "width", "edge_width", "gate_width", "batch_size"):
        if resolved[key] < 1:
            problems.append(f"{key} must be positive")
    if resolved["epochs"] < 0:
        problems.append("epochs must be non-negative")
    if resolved["lr"] <= 0 or resolved["weight_decay"] < 0 or resolved["eig_tol"] <= 0:
        problems.append("lr and eig_tol must be positive, weight_decay non-negative")
    if resolved["n_anchors"] != "auto" and resolved["n_anchors"] < 1:
        problems.append("n_anchors must be 'auto' or positive")
    if problems:
        raise UsageError("; ".join(problems))
    return resolved


def write_resolved(resolved: dict, path) -> Path:
    path = Path(path)
    path.write_text("".join(f"{k} = {resolved[k]}\n" for k in sorted(resolved)))
    return path


# ------------------------------------------------------------------ helpers

def _settings_from_checkpoint(ck: Checkpoint) -> BundleSettings:
    s = ck.settings
    return BundleSettings(k=int(s.get("k", 20)), m=ck.params.config.m,
                          n_anchors=ck.params.config.n_anchors,
                          anchor_seed=int(s.get("anchor_seed", 0)),
                          eig_seed=int(s.get("eig_seed", 0)), tol=float(s.get("eig_tol", 1e-8)))


def _cache(directory: str = "") -> BundleCache:
    return BundleCache(directory or default_cache_dir())


def _prime_with_stored_basis(cache: BundleCache, ck: Checkpoint, ds: Dataset,
                             settings: BundleSettings):
    """Reuse the basis saved with the checkpoint when the geometry is the training one."""
    if not ck.basis or not ds.samples:
        return
    coords = ds.samples[0].coordinates
    if ck.settings.get("basis_geometry") != geometry_fingerprint(coords):
        return
    graph = build_knn_graph(coords, settings.k)
    basis = SpectralBasis(ck.basis["eigenvalues"], ck.basis["eigenvectors"],
                          ck.basis["residuals"], graph.fingerprint())
    emb = lipschitz_embed(graph, select_anchors(graph, settings.n_anchors, settings.anchor_seed))
    key = (geometry_fingerprint(coords), settings.key())
    with cache._lock:
        cache._store.setdefault(key, Bundle(graph, basis, emb))


def _check_compatible(ck: Checkpoint, ds: Dataset):
    c = ck.params.config
    if (ds.d_a, ds.d_u, ds.dim) != (c.d_a, c.d_u, c.dim):
        raise DataError(f"dataset channels (d_a={ds.d_a}, d_u={ds.d_u}, dim={ds.dim}) do not "
                        f"match the checkpoint (d_a={c.d_a}, d_u={c.d_u}, dim={c.dim})")


def _select(ds: Dataset, split: str) -> Dataset:
    if split == "all":
        return ds
    if not ds.has_split(split):
        raise DataError(f"dataset has no split {split!r}")
    return ds.split(split)


# ------------------------------------------------------------------ commands

def cmd_gen_darcy(args) -> int:
    if args.grid < 8:
        raise UsageError(f"--grid must be at least 8 (got {args.grid})")
    splits = []
    n_train = args.count - args.val_count - args.test_count
    if n_train < 0:
        raise UsageError("--val-count + --test-count exceed --count")
    for name, size in (("train", n_train), ("val", args.val_count), ("test", args.test_count)):
        if size:
            splits.append((name, size))
    ds, residual = generate_darcy(args.grid, args.count, args.seed, splits)
    out = Path(args.out)
    if not out.parent.exists():
        raise DataError(f"output directory {out.parent} does not exist")
    save_dataset(ds, out)
    print(f"wrote {len(ds)} samples with {ds.n_nodes} nodes each to {out}; "
          f"max discrete residual {residual:.3e}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    out = Path(cfg["out"])
    ds = load_dataset(cfg["data"])
    train_ds = _select(ds, cfg["train_split"]) if ds.has_split(cfg["train_split"]) else ds
    val_ds = _select(ds, cfg["val_split"]) if ds.has_split(cfg["val_split"]) else None
    if len(train_ds) == 0:
        raise DataError("training split is empty")
    n_first = train_ds.samples[0].n_nodes
    if cfg["k"] >= n_first:
        raise UsageError(f"k={cfg['k']} must be below the node count {n_first}")
    n_anchors = anchor_count(n_first) if cfg["n_anchors"] == "auto" else cfg["n_anchors"]
    cfg["n_anchors_resolved"] = n_anchors
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / "config.txt")

    settings = BundleSettings(k=cfg["k"], m=cfg["m"], n_anchors=n_anchors,
                              anchor_seed=cfg["anchor_seed"], eig_seed=cfg["eig_seed"],
                              tol=cfg["eig_tol"])
    cache = _cache(cfg["cache_dir"])
    train_b = dataset_bundles(train_ds, settings, cache)
    val_b = dataset_bundles(val_ds, settings, cache) if val_ds is not None else None
    config = ModelConfig(d_a=ds.d_a, d_u=ds.d_u, dim=ds.dim, width=cfg["width"],
                         n_blocks=cfg["blocks"], m=cfg["m"], n_anchors=n_anchors,
                         edge_width=cfg["edge_width"], gate_width=cfg["gate_width"],
                         q_width=cfg["q_width"] or None)
    params = init_parameters(config, cfg["init_seed"])
    normalizer = Normalizer.fit(train_ds)
    tc = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                     weight_decay=cfg["weight_decay"], shuffle_seed=cfg["shuffle_seed"],
                     decay_step=cfg["decay_step"], decay_gamma=cfg["decay_gamma"])
    result = train(params, train_ds, train_b, normalizer, tc, val_ds, val_b,
                   on_epoch=lambda row: print(
                       f"epoch {row['epoch']:4d}  train {row['train_loss']:.5f}  "
                       f"val {row['val_loss']:.5f}  {row['wall_seconds']:.1f}s", flush=True))
    write_history(result.history, out / "history.csv")
    settings_out = {"k": str(cfg["k"]), "anchor_seed": str(cfg["anchor_seed"]),
                    "eig_seed": str(cfg["eig_seed"]), "eig_tol": repr(cfg["eig_tol"]),
                    "best_epoch": str(result.best_epoch)}
    basis = {}
    if ds.mode == "shared":
        b = train_b[0].basis
        basis = {"eigenvalues": b.eigenvalues, "eigenvectors": b.eigenvectors,
                 "residuals": b.residuals}
        settings_out["basis_geometry"] = geometry_fingerprint(train_ds.samples[0].coordinates)
    final_state = params.state_dict()
    params.load_state_dict(result.best_state)
    save_checkpoint(Checkpoint(params, normalizer, settings_out, basis), out / "checkpoint.spgc")
    params.load_state_dict(final_state)
    save_checkpoint(Checkpoint(params, normalizer, settings_out, basis), out / "last.spgc")
    print(f"best epoch {result.best_epoch}; checkpoint written to {out / 'checkpoint.spgc'}")
    return EXIT_OK


def _coord_names(dim: int) -> list[str]:
    return ["x", "y", "z"][:dim]


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    ds = _select(load_dataset(args.data), args.split)
    _check_compatible(ck, ds)
    settings = _settings_from_checkpoint(ck)
    cache = _cache(args.cache_dir)
    _prime_with_stored_basis(cache, ck, ds, settings)
    bundles = dataset_bundles(ds, settings, cache)
    metrics = evaluate(ck.params, ds, bundles, ck.normalizer, return_predictions=True)
    lines = ["sample,relative_l2,mse"]
    lines += [f"{i},{r:.8e},{e:.8e}" for i, (r, e) in
              enumerate(zip(metrics["relative_l2"], metrics["mse"]))]
    summary = (f"mean relative L2 {metrics['mean_relative_l2']:.6e}; "
               f"mean squared relative L2 {metrics['mean_squared_relative_l2']:.6e}; "
               f"mean MSE {metrics['mean_mse']:.6e}; samples {len(ds)}")
    print("\n".join(lines))
    print(summary)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text("\n".join(lines) + "\n")
        (out / "summary.txt").write_text(summary + "\n")
        i = args.plot_sample
        if not 0 <= i < len(ds):
            raise UsageError(f"--plot-sample {i} outside 0..{len(ds) - 1}")
        s = ds.samples[i]
        pred = metrics["predictions"][i]
        cols = _coord_names(ds.dim)
        header = cols + [f"truth_{c}" for c in ds.u_names] + [f"pred_{c}" for c in ds.u_names] \
            + [f"error_{c}" for c in ds.u_names]
        table = np.concatenate([s.coordinates, s.u, pred, pred - s.u], axis=1)
        np.savetxt(out / f"field_{i}.csv", table, delimiter=",", header=",".join(header),
                   comments="", fmt="%.10e")
    return EXIT_OK


def cmd_predict(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    ds = _select(load_dataset(args.data), args.split)
    _check_compatible(ck, ds)
    if args.subsample:
        ds = subsample_dataset(ds, args.subsample, args.subsample_seed)
    settings = _settings_from_checkpoint(ck)
    if settings.k >= (ds.n_nodes or min(s.n_nodes for s in ds.samples)):
        raise DataError(f"k={settings.k} is not below the node count of the target cloud")
    cache = _cache(args.cache_dir)
    _prime_with_stored_basis(cache, ck, ds, settings)
    bundles = dataset_bundles(ds, settings, cache)
    metrics = evaluate(ck.params, ds, bundles, ck.normalizer, return_predictions=True)
    samples = [PointCloudSample(s.coordinates, s.a, p, s.sample_id)
               for s, p in zip(ds.samples, metrics["predictions"])]
    out = Dataset(samples, ds.dim, ds.d_a, ds.d_u, ds.mode, [("predicted", 0, len(samples))],
                  list(ds.a_names), [f"pred_{c}" for c in ds.u_names])
    save_dataset(out, args.out)
    print(f"wrote {len(samples)} predictions ({samples[0].n_nodes} nodes) to {args.out}; "
          f"mean relative L2 against the file's u {metrics['mean_relative_l2']:.6e}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import run_all
    results = run_all(seed=args.seed, n=args.n, m=args.m, perturb=args.perturb_gradient,
                      lemma_graphs=args.lemma_graphs)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_convert(args) -> int:
    ds = convert_npz(args.npz, args.out, mode=args.mode)
    print(f"wrote {len(ds)} samples ({ds.mode}) to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sp2gno", description="Spatio-spectral graph neural operator")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-darcy", help="generate a synthetic Darcy dataset")
    g.add_argument("--grid", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--val-count", type=int, default=0)
    g.add_argument("--test-count", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_darcy)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="flat key=value file; flags override it")
    t.add_argument("--data")
    t.add_argument("--out")
    for key, default in TRAIN_DEFAULTS.items():
        if key in ("data", "out"):
            continue
        kind = str if key == "n_anchors" else type(default)
        t.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind, default=None,
                       help=f"default {default}")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "per-sample metrics and a field CSV"),
                                 ("predict", cmd_predict, "write predictions as SPGN")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--split", default="all")
        e.add_argument("--cache-dir", default="")
        if name == "eval":
            e.add_argument("--out", default="")
            e.add_argument("--plot-sample", type=int, default=0)
        else:
            e.add_argument("--out", required=True)
            e.add_argument("--subsample", type=int, default=0,
                           help="predict on a random subset of this many nodes")
            e.add_argument("--subsample-seed", type=int, default=0)
        e.set_defaults(func=func)

    c = sub.add_parser("check", help="oracle-based diagnostics")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--n", type=int, default=64)
    c.add_argument("--m", type=int, default=None)
    c.add_argument("--lemma-graphs", type=int, default=50)
    c.add_argument("--perturb-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_check)

    v = sub.add_parser("convert", help="pack an .npz (coords, a, u) into SPGN")
    v.add_argument("--npz", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--mode", choices=["shared", "per-sample"], default=None)
    v.set_defaults(func=cmd_convert)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("sp2gno: error: --threads must be positive", file=sys.stderr)
        return EXIT_USAGE
    from threadpoolctl import threadpool_limits
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"sp2gno: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GraphError, CheckpointError, OSError) as exc:
        print(f"sp2gno: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, EigensolverError, FloatingPointError) as exc:
        print(f"sp2gno: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
