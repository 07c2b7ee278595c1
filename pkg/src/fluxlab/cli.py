"""Command-line interface.

Subcommands: generate, train, eval, matrix, dimsweep, report.  All
randomness flows from --seed; outputs are UTF-8 CSV/JSON.  Exit code 0
means every requested piece of work succeeded; 2 flags usage errors such
as missing input files.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import pipeline
from .evaluate import clustering_regime_metrics
from .lorenz import LorenzConfig, generate_lorenz
from .marginal_io import read_marginals, write_marginals
from .mesh import MeshBenchConfig, generate_mesh_benchmark
from .pipeline import (
    apply_overrides,
    config_hash,
    dim_sweep,
    lorenz_experiment,
    matrix_rows,
    mesh_experiment,
    run_experiment,
    run_matrix,
    synthetic_experiment,
)

REPORT_COLUMNS = ["method", "1-hop WD", "2-hop WD", "full-chain WD", "ARI", "NMI"]


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.add_argument("--force", action="store_true")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")


def _parse_overrides(pairs):
    out = {}
    for item in pairs:
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        out[key] = val
    return out


def _build_config(dataset, variant, seed, overrides, data_path=None, embed_dim=3):
    if dataset == "lorenz":
        cfg = lorenz_experiment(variant=variant, seed=seed)
    elif dataset == "mesh":
        cfg = mesh_experiment(variant=variant, embed_dim=embed_dim, seed=seed)
    elif dataset == "synthetic":
        cfg = synthetic_experiment(variant=variant, seed=seed)
    elif dataset == "file":
        cfg = synthetic_experiment(variant=variant, seed=seed)
        cfg.dataset.kind = "file"
        cfg.dataset.path = data_path
    else:
        raise SystemExit(f"unknown dataset {dataset!r}")
    apply_overrides(cfg, overrides)
    return cfg


def cmd_generate(args):
    overrides = _parse_overrides(args.overrides)
    rng = np.random.default_rng(args.seed)
    os.makedirs(args.out, exist_ok=True)
    if args.dataset == "lorenz":
        cfg = LorenzConfig(samples_per_marginal=args.samples)
        for key, val in overrides.items():
            if not hasattr(cfg, key):
                raise SystemExit(f"unknown lorenz config key {key!r}")
            setattr(cfg, key, json.loads(val))
        seq = generate_lorenz(cfg, rng)
        path = os.path.join(args.out, "lorenz.csv")
        write_marginals(path, seq)
        print(path)
    elif args.dataset == "mesh":
        if args.mesh is not None and not os.path.exists(args.mesh):
            print(f"error: mesh file not found: {args.mesh}", file=sys.stderr)
            raise SystemExit(2)
        cfg = MeshBenchConfig(
            mesh_path=args.mesh, embed_dim=args.dim, embed_seed=args.seed,
            samples_per_marginal=args.samples,
        )
        seq, mesh, A, m3d = generate_mesh_benchmark(cfg, rng)
        paths = []
        for k in range(seq.T):
            path = os.path.join(args.out, f"marginal_{k}.csv")
            _write_single_marginal(path, k, seq.samples(k))
            paths.append(path)
        emb_path = os.path.join(args.out, "embedding.csv")
        np.savetxt(emb_path, A, delimiter=",")
        full = os.path.join(args.out, "mesh.csv")
        write_marginals(full, seq)
        print("\n".join(paths + [emb_path, full]))
    elif args.dataset == "synthetic":
        seq = pipeline.make_synthetic_stages(rng=rng)
        path = os.path.join(args.out, "synthetic.csv")
        write_marginals(path, seq)
        print(path)
    else:
        raise SystemExit(f"unknown dataset {args.dataset!r}")
    return 0


def _write_single_marginal(path, k, X):
    header = "k,segment,label," + ",".join(f"f{i}" for i in range(X.shape[1]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for row in X:
            fh.write(f"{k},{k},-," + ",".join(repr(float(v)) for v in row) + "\n")


def cmd_train(args):
    overrides = _parse_overrides(args.overrides)
    cfg = _build_config(args.dataset, args.variant, args.seed, overrides, data_path=args.data, embed_dim=args.dim)
    chash = config_hash(cfg)
    run_dir = os.path.join(args.out, chash)
    if os.path.exists(os.path.join(run_dir, "report.json")) and not args.force:
        print(f"error: run {run_dir} already exists; use --force to overwrite", file=sys.stderr)
        return 1
    record = run_experiment(cfg, out_dir=args.out)
    print(json.dumps({"run_dir": run_dir, "report": record.report.to_dict()}, indent=2, sort_keys=True))
    return 0


def cmd_eval(args):
    if not os.path.exists(args.data):
        print(f"error: data file not found: {args.data}", file=sys.stderr)
        return 2
    seq = read_marginals(args.data)
    out = {}
    for method in args.clustering.split(","):
        method = method.strip()
        if method:
            out[method] = clustering_regime_metrics(seq, method=method, k=args.k, seed=args.seed)
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_matrix(args):
    with open(args.config, encoding="utf-8") as fh:
        manifest = json.load(fh)
    dataset = manifest.get("dataset", "lorenz")
    variants = manifest.get("variants", ["flux"])
    seeds = manifest.get("seeds", [0])
    overrides = dict(manifest.get("overrides", {}))
    overrides.update(_parse_overrides(args.overrides))
    configs = []
    for variant in variants:
        for seed in seeds:
            configs.append(
                _build_config(dataset, variant, seed, overrides, data_path=manifest.get("path"),
                              embed_dim=manifest.get("embed_dim", 3))
            )
    records = run_matrix(configs, out_dir=args.out)
    rows = matrix_rows(records)
    table_path = os.path.join(args.out, "table.csv")
    _write_rows(table_path, rows, ["method", "seed", "1-hop WD", "2-hop WD", "full-chain WD", "ARI", "NMI"])
    print(table_path)
    return 0


def cmd_dimsweep(args):
    dims = [int(d) for d in args.dims.split(",")]
    variants = [v.strip() for v in args.variants.split(",")]
    overrides = _parse_overrides(args.overrides)

    def base_cfg(variant, embed_dim, seed):
        cfg = mesh_experiment(variant=variant, embed_dim=embed_dim, seed=seed)
        apply_overrides(cfg, overrides)
        return cfg

    rows, _ = dim_sweep(base_cfg, dims, variants, out_dir=args.out, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "dimsweep.csv")
    _write_rows(path, rows, ["dim", "method", "held_out_wd", "training_wd", "all_wd", "surface_dev"])
    print(path)
    return 0


def cmd_report(args):
    rows = []
    if os.path.isdir(args.runs):
        for name in sorted(os.listdir(args.runs)):
            rec_path = os.path.join(args.runs, name, "record.json")
            if not os.path.exists(rec_path):
                continue
            with open(rec_path, encoding="utf-8") as fh:
                rec = json.load(fh)
            rep = rec.get("report") or {}
            rows.append(
                {
                    "method": rec["variant"],
                    "seed": rec["seed"],
                    "1-hop WD": rep.get("wd1"),
                    "2-hop WD": rep.get("wd2"),
                    "full-chain WD": rep.get("wd_fc"),
                    "ARI": rep.get("seg_ari"),
                    "NMI": rep.get("seg_nmi"),
                }
            )
    rows.sort(key=lambda r: (r["method"], r["seed"]))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "report.csv")
    _write_rows(path, rows, REPORT_COLUMNS)
    for row in rows:
        print(",".join(str(row.get(c, "")) for c in REPORT_COLUMNS))
    return 0


def _write_rows(path, rows, columns):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: ("" if row.get(c) is None else row.get(c)) for c in columns})


def build_parser():
    parser = argparse.ArgumentParser(prog="fluxlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write benchmark marginal CSV files")
    p.add_argument("--dataset", required=True, choices=["lorenz", "mesh", "synthetic"])
    p.add_argument("--mesh", default=None, help="OBJ path (mesh dataset; default bundled icosphere)")
    p.add_argument("--dim", type=int, default=3)
    p.add_argument("--samples", type=int, default=512)
    _add_common(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="run one experiment (train + eval)")
    p.add_argument("--dataset", default="lorenz", choices=["lorenz", "mesh", "synthetic", "file"])
    p.add_argument("--variant", default="flux", choices=list(pipeline.VARIANTS))
    p.add_argument("--data", default=None, help="marginal CSV (dataset=file)")
    p.add_argument("--dim", type=int, default=3)
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="clustering-baseline regime metrics for a marginal file")
    p.add_argument("--data", required=True)
    p.add_argument("--clustering", default="kmeans,gmm")
    p.add_argument("--k", type=int, default=2)
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("matrix", help="run a manifest of variants x seeds")
    p.add_argument("--config", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_matrix)

    p = sub.add_parser("dimsweep", help="mesh benchmark across ambient dimensions")
    p.add_argument("--dims", default="3,20")
    p.add_argument("--variants", default="flux,euclid_multimarginal")
    _add_common(p)
    p.set_defaults(fn=cmd_dimsweep)

    p = sub.add_parser("report", help="summarize a runs directory")
    p.add_argument("--runs", default="runs")
    _add_common(p)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit:
        raise
    except KeyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
