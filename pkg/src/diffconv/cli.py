"""Command-line entry point.

Every command writes its table as CSV plus a JSON report (version, seed,
config digest, the fully resolved configuration and metrics) into ``--out``.

Exit codes:
  0  success
  2  bad command line
  3  parse error in an input file
  4  I/O error (missing or unreadable file)
  5  validation error (inputs violate an operation's contract)
"""

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, _backend
from . import autograd as ag
from .core import InvalidInputError
from .data import (DATA_ROOT_ENV, OffParseError, inject_noise, modelnet_split,
                   read_off, read_pcd_txt, resample_split, sample_surface, synthetic_dataset)
from .grouping import (DilationField, KdTree, ball_query, knn_query)
from .network import (DiffConvNet, RunConfig, evaluate, load_config, train_loop, write_history)
from .nn import CheckpointError, grad_check, load_checkpoint, save_checkpoint

log = logging.getLogger("diffconv")

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_IO, EXIT_VALIDATION = 0, 2, 3, 4, 5

# ablation switch -> NetworkConfig overrides
SWITCHES = {
    "full": {},
    "no-smoothing": {"smoothing": False},
    "fixed-ball": {"grouping": "ball"},
    "knn": {"grouping": "knn"},
    "binary": {"adjacency": "binary"},
    "isotropic": {"adjacency": "isotropic"},
    "spatial": {"adjacency": "spatial"},
    "feature": {"adjacency": "feature"},
    "inverse-density": {"adjacency": "inverse_density"},
    "no-pe": {"positional": False},
    "no-br": {"balanced": False},
    "all-off": {"smoothing": False, "grouping": "ball", "adjacency": "binary"},
}


# ---------------------------------------------------------------- helpers

def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolved_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
        cfg.data = dataclasses.replace(cfg.data, seed=args.seed)
    return cfg


def _report(args, command, cfg, metrics=None, rows=None, extra=None):
    report = {
        "command": command,
        "version": __version__,
        "backend": _backend.name(),
        "seed": args.seed,
        "config_digest": cfg.digest() if cfg is not None else None,
        "config": cfg.to_dict() if cfg is not None else None,
        "arguments": {k: v for k, v in vars(args).items() if k != "func"},
        "data_root": os.environ.get(DATA_ROOT_ENV),
        "metrics": metrics or {},
        "rows": rows or [],
    }
    if extra:
        report.update(extra)
    path = _out_dir(args) / f"{command}_report.json"
    path.write_text(json.dumps(report, indent=2, default=_json_default), encoding="utf-8")
    return report


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return str(obj)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _read_input_cloud(path, points, seed):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{path}: no such file")
    if str(path).lower().endswith(".off"):
        return sample_surface(read_off(path), points, seed)
    pts, _ = read_pcd_txt(path)
    return pts


def _dataset(cfg: RunConfig):
    d = cfg.data
    fractions = (d.train_fraction, d.val_fraction, d.test_fraction)
    if d.source == "synthetic":
        split = synthetic_dataset(d.classes, d.n_per_class, d.points_per_cloud, d.seed, fractions)
    elif d.source == "modelnet":
        split = modelnet_split(d.root or None)
    elif d.source == "modelnet-resampled":
        split = resample_split(modelnet_split(d.root or None), d.seed, fractions)
    else:
        raise InvalidInputError(f"unknown data source {d.source!r}")
    if split.num_classes != cfg.network.num_classes:
        raise InvalidInputError(
            f"dataset has {split.num_classes} classes but the network expects "
            f"{cfg.network.num_classes}")

    def load(items):
        return ([it.points(d.points_per_cloud, d.seed + i) for i, it in enumerate(items)],
                np.array([it.label for it in items], dtype=np.int64))

    return split, load(split.train), load(split.val), load(split.test)


def _sidecar(ckpt):
    return Path(str(ckpt) + ".json")


def _load_model(args, cfg):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"{ckpt}: checkpoint not found")
    meta = {}
    if _sidecar(ckpt).is_file():
        meta = json.loads(_sidecar(ckpt).read_text(encoding="utf-8"))
        if not args.config and "config" in meta:
            saved = meta["config"]
            cfg = RunConfig()
            cfg.network = dataclasses.replace(cfg.network, **{
                k: tuple(v) if isinstance(v, list) else v for k, v in saved["network"].items()})
            cfg.train = dataclasses.replace(cfg.train, **saved["train"])
            cfg.data = dataclasses.replace(cfg.data, **{
                k: tuple(v) if isinstance(v, list) else v for k, v in saved["data"].items()})
    model = DiffConvNet(cfg.network)
    model.load_state_dict(load_checkpoint(ckpt))
    return model, cfg, meta


# ---------------------------------------------------------------- commands

def cmd_density(args):
    cfg = _resolved_config(args)
    pts = _read_input_cloud(args.input, args.points, cfg.data.seed)
    h = args.bandwidth if args.bandwidth is not None else cfg.network.bandwidth
    r2 = args.sq_radius if args.sq_radius is not None else cfg.network.base_sq_radius
    field = DilationField.from_cloud(pts, h, r2)
    rows = [[*p, d, dn, r] for p, d, dn, r in
            zip(pts, field.density, field.normalized_density, field.radius)]
    out = Path(args.output) if args.output else _out_dir(args) / "density.csv"
    _write_csv(out, ["x", "y", "z", "density", "normalized_density", "dilated_radius"], rows)
    metrics = {"points": len(pts), "bandwidth": h, "sq_radius": r2,
               "density_min": float(field.density.min()), "density_max": float(field.density.max())}
    _report(args, "density", cfg, metrics, extra={"output": str(out)})
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


def group_statistics(graph, radii=None):
    deg = graph.degrees
    stats = {
        "points": int(graph.num_rows),
        "edges": int(graph.num_edges),
        "neighbors_min": int(deg.min()) if deg.size else 0,
        "neighbors_mean": float(deg.mean()) if deg.size else 0.0,
        "neighbors_max": int(deg.max()) if deg.size else 0,
        "directedness_rate": graph.reverse_edge_fraction(),
    }
    if radii is not None:
        stats.update(radius_min=float(np.min(radii)), radius_mean=float(np.mean(radii)),
                     radius_max=float(np.max(radii)))
    return stats


def cmd_group(args):
    cfg = _resolved_config(args)
    pts = _read_input_cloud(args.input, args.points, cfg.data.seed)
    radii = None
    if args.strategy == "knn":
        graph = knn_query(pts, pts, args.k)
    elif args.strategy == "ball":
        r = args.radius if args.radius is not None else float(np.sqrt(cfg.network.base_sq_radius))
        graph = ball_query(pts, pts, r)
        radii = np.full(len(pts), r)
    else:
        h = args.bandwidth if args.bandwidth is not None else cfg.network.bandwidth
        r2 = args.sq_radius if args.sq_radius is not None else cfg.network.base_sq_radius
        field = DilationField.from_cloud(pts, h, r2)
        graph = ball_query(pts, pts, sq_radius=field.sq_radius)
        radii = field.radius
    stats = group_statistics(graph, radii)
    out = Path(args.output) if args.output else _out_dir(args) / "group.csv"
    rows = [[i, int(d), "" if radii is None else float(radii[i])]
            for i, d in enumerate(graph.degrees)]
    _write_csv(out, ["point", "neighbors", "radius"], rows)
    _report(args, "group", cfg, stats, extra={"strategy": args.strategy, "output": str(out)})
    print(json.dumps(stats))
    return EXIT_OK


def cmd_train(args):
    cfg = _resolved_config(args)
    if args.epochs is not None:
        cfg.train = dataclasses.replace(cfg.train, epochs=args.epochs)
    split, (trx, try_), (vax, vay), (tex, tey) = _dataset(cfg)
    model = DiffConvNet(cfg.network)
    t0 = time.perf_counter()
    val_x, val_y = (vax, vay) if len(vax) else (tex, tey)
    history = train_loop(model, trx, try_, cfg.train, val_x, val_y)
    elapsed = time.perf_counter() - t0
    result = evaluate(model, tex, tey, cfg.train.eval_batch_size)
    out = _out_dir(args)
    write_history(history, out / "metrics.csv")
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    save_checkpoint(ckpt, model.state_dict())
    metrics = {"test_OA": result["OA"], "test_MA": result["MA"], "train_seconds": elapsed,
               "warnings": result["warnings"]}
    _sidecar(ckpt).write_text(json.dumps({"config": cfg.to_dict(), "metrics": metrics},
                                         default=_json_default), encoding="utf-8")
    _report(args, "train", cfg, metrics, rows=history, extra={"checkpoint": str(ckpt)})
    print(f"test OA {result['OA']:.4f}  MA {result['MA']:.4f}  ({elapsed:.1f}s)")
    return EXIT_OK


def cmd_eval(args):
    cfg = _resolved_config(args)
    model, cfg, meta = _load_model(args, cfg)
    _, _, _, (tex, tey) = _dataset(cfg)
    result = evaluate(model, tex, tey, cfg.train.eval_batch_size)
    metrics = {"OA": result["OA"], "MA": result["MA"], "per_class": result["per_class"],
               "warnings": result["warnings"]}
    if "metrics" in meta:
        metrics["recorded_test_OA"] = meta["metrics"].get("test_OA")
    _report(args, "eval", cfg, metrics)
    print(f"OA {result['OA']:.4f}  MA {result['MA']:.4f}")
    return EXIT_OK


def cmd_noise_bench(args):
    cfg = _resolved_config(args)
    model, cfg, _ = _load_model(args, cfg)
    _, _, _, (tex, tey) = _dataset(cfg)
    rows = []
    for level in args.levels:
        rng = np.random.default_rng(cfg.data.seed + 7919 + level)
        noisy = [inject_noise(c, level, rng) for c in tex]
        result = evaluate(model, noisy, tey, cfg.train.eval_batch_size)
        rows.append([level, result["OA"]])
        print(f"noise {level:4d}  OA {result['OA']:.4f}")
    out = _out_dir(args) / "noise.csv"
    _write_csv(out, ["noise_count", "OA"], rows)
    _report(args, "noise-bench", cfg, {"OA_at_max_noise": rows[-1][1]},
            rows=[{"noise_count": n, "OA": oa} for n, oa in rows])
    return EXIT_OK


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_bench(args):
    from .network import NetworkConfig, estimate_flops
    cfg = _resolved_config(args)
    rng = np.random.default_rng(cfg.data.seed)
    rows = []
    for n in args.sizes:
        pts = rng.uniform(-1.0, 1.0, (n, 3))
        # ball covering ~1% of the [-1, 1]^3 volume
        r = (0.01 * 8.0 * 3.0 / (4.0 * np.pi)) ** (1.0 / 3.0)
        tree = KdTree(pts)
        ball_query(pts[:8], pts, r), tree.ball(pts[:8], r)  # warm up compiled kernels
        t_brute = _time(lambda: ball_query(pts, pts, r), args.repeats)
        t_tree = _time(lambda: tree.ball(pts, r), args.repeats)
        t_build = _time(lambda: KdTree(pts), args.repeats)
        k = min(16, n)
        t_knn_brute = _time(lambda: knn_query(pts, pts, k), args.repeats)
        t_knn_tree = _time(lambda: tree.knn(pts, k), args.repeats)
        rows.append({"n": n, "radius": r, "ball_brute_s": t_brute, "ball_kdtree_s": t_tree,
                     "kdtree_build_s": t_build, "knn_brute_s": t_knn_brute,
                     "knn_kdtree_s": t_knn_tree})
        print(f"N={n:6d} ball brute {t_brute * 1e3:8.2f} ms  kd-tree {t_tree * 1e3:8.2f} ms  "
              f"knn brute {t_knn_brute * 1e3:8.2f} ms  kd-tree {t_knn_tree * 1e3:8.2f} ms")
    net_cfg = NetworkConfig(input_points=args.forward_points, num_classes=40,
                            seed=cfg.network.seed)
    model = DiffConvNet(net_cfg)
    cloud = rng.normal(size=(args.forward_points, 3))
    cloud /= np.linalg.norm(cloud, axis=1, keepdims=True)
    model.forward([cloud])
    t_fwd = _time(lambda: model.forward([cloud]), args.repeats)
    flops = estimate_flops(model, cloud)
    forward = {"points": args.forward_points, "forward_s": t_fwd, "flops": flops,
               "params": int(sum(p.data.size for p in model.parameters()))}
    print(f"forward N={args.forward_points}: {t_fwd * 1e3:.1f} ms, ~{flops / 1e6:.1f} MFLOPs, "
          f"{forward['params']} parameters")
    out = _out_dir(args) / "bench.csv"
    _write_csv(out, list(rows[0].keys()) if rows else ["n"], [list(r.values()) for r in rows])
    _report(args, "bench", cfg, {"forward": forward}, rows=rows)
    return EXIT_OK


def ablation_config(cfg: RunConfig, switch: str) -> RunConfig:
    if switch not in SWITCHES:
        raise InvalidInputError(f"unknown ablation switch {switch!r}; "
                                f"choose from {', '.join(SWITCHES)}")
    return RunConfig(dataclasses.replace(cfg.network, **SWITCHES[switch]),
                     cfg.train, cfg.data)


def variant_grad_check(net_cfg, points=16, seed=0, max_coords=6):
    """Max relative gradient error of the classifier loss for one small cloud pair."""
    small = dataclasses.replace(net_cfg, input_points=points,
                                stage_point_counts=(points, points // 2, points // 4, points // 8),
                                stage_widths=(6, 6, 8, 8), head_hidden=8, dropout=0.0,
                                base_sq_radius=max(net_cfg.base_sq_radius, 0.1), knn_k=4)
    model = DiffConvNet(small)
    rng = np.random.default_rng(seed)
    clouds = [c / np.linalg.norm(c, axis=1).max() for c in rng.normal(size=(2, points, 3))]
    labels = rng.integers(0, small.num_classes, 2)
    keys = model.sample_keys([points, points], rng)

    def loss():
        return ag.softmax_cross_entropy(model.forward(clouds, key_indices=keys), labels)

    err, _ = grad_check(loss, model.parameters(), max_coords=max_coords, rng=rng)
    return err


def cmd_ablate(args):
    cfg = _resolved_config(args)
    rows = []
    data = _dataset(cfg) if args.train else None
    for switch in args.switches:
        vcfg = ablation_config(cfg, switch)
        row = {"variant": switch, "grad_error": variant_grad_check(vcfg.network, seed=cfg.network.seed)}
        if data is not None:
            _, (trx, try_), _, (tex, tey) = data
            model = DiffConvNet(vcfg.network)
            train_loop(model, trx, try_, vcfg.train)
            res = evaluate(model, tex, tey, vcfg.train.eval_batch_size)
            row.update(OA=res["OA"], MA=res["MA"])
        rows.append(row)
        print("  ".join(f"{k}={v:.3g}" if isinstance(v, float) else f"{k}={v}"
                        for k, v in row.items()))
    out = _out_dir(args) / "ablation.csv"
    header = list(rows[0].keys())
    _write_csv(out, header, [[r.get(h, "") for h in header] for r in rows])
    _report(args, "ablate", cfg, rows=rows)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _int_list(text):
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text):
    return [t for t in text.replace(",", " ").split() if t]


def build_parser():
    p = argparse.ArgumentParser(
        prog="diffconv",
        description="Density-dilated difference graph convolution on point clouds.",
        epilog="exit codes: 0 ok, 2 usage, 3 parse error, 4 I/O error, 5 validation error. "
               f"${DATA_ROOT_ENV} points at a ModelNet-style directory tree "
               "(<root>/<class>/{train,test}/*.off); nothing is downloaded.",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="INI run configuration (see configs/)")
    p.add_argument("--seed", type=int, help="override every seed in the configuration")
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    p.add_argument("--threads", type=int, help="numba worker threads")
    p.add_argument("--backend", choices=_backend.BACKENDS, help="kernel backend")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cloud_args(sp):
        sp.add_argument("input", help="point cloud (PCD-TXT) or mesh (.off)")
        sp.add_argument("--points", type=int, default=1024, help="samples drawn from a mesh")

    sp = sub.add_parser("density", help="per-point kernel density and dilated radius as CSV")
    cloud_args(sp)
    sp.add_argument("--bandwidth", type=float)
    sp.add_argument("--sq-radius", type=float)
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_density)

    sp = sub.add_parser("group", help="neighbourhood statistics for a grouping strategy")
    cloud_args(sp)
    sp.add_argument("--strategy", choices=("knn", "ball", "dilated"), default="dilated")
    sp.add_argument("--k", type=int, default=16)
    sp.add_argument("--radius", type=float)
    sp.add_argument("--sq-radius", type=float)
    sp.add_argument("--bandwidth", type=float)
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_group)

    sp = sub.add_parser("train", help="train a classifier; writes metrics.csv and a checkpoint")
    sp.add_argument("--checkpoint")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("noise-bench", help="accuracy as uniform noise points are added")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--levels", type=_int_list, default=[0, 10, 50, 100, 200])
    sp.set_defaults(func=cmd_noise_bench)

    sp = sub.add_parser("bench", help="query timings, forward time and FLOP estimate")
    sp.add_argument("--sizes", type=_int_list, default=[1024, 4096])
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--forward-points", type=int, default=1024)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("ablate", help="gradient-check (and optionally train) ablated variants")
    sp.add_argument("--switches", type=_str_list, default=list(SWITCHES),
                    help=f"comma-separated subset of: {', '.join(SWITCHES)}")
    sp.add_argument("--train", action="store_true", help="also train and evaluate each variant")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.backend:
        _backend.set_backend(args.backend)
    if args.threads:
        try:
            import numba
            numba.set_num_threads(args.threads)
        except (ImportError, ValueError) as exc:
            log.warning("ignoring --threads: %s", exc)
    try:
        return args.func(args)
    except (OffParseError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (FileNotFoundError, PermissionError, IsADirectoryError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvalidInputError, FloatingPointError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
