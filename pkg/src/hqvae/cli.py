"""Command-line entry point: ``hqvae <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 numeric abort, 4 I/O error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import checkpoint as ckpt
from . import evaluation as E
from .config import ConfigError, RunConfig, dump_config, load_config, preset_layers
from .data import load_dataset
from .networks import PrefixDecodeError
from .objectives import NumericAbort
from .trainer import METRICS_SCHEMA, Trainer, load_model

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("hqvae")


class OutputExists(OSError):
    pass


# config handling


def resolve_config(path=None, variant=None, layers=None, K=None, epochs=None, seed=None):
    """Load a config file (or defaults) and apply command-line overrides."""
    cfg = load_config(path) if path else RunConfig()
    m = cfg.model
    if variant:
        m.variant = variant
    if layers is not None or variant:
        n = layers if layers is not None else m.num_layers
        k = K if K is not None else m.layers[0].codebook_size
        m.layers = preset_layers(m.variant, n, k, m.layers[0].resolution)
    elif K is not None:
        for l in m.layers:
            l.codebook_size = K
    if epochs is not None:
        cfg.train.epochs = epochs
    if seed is not None:
        cfg.train.seed = seed
    return cfg.validate()


def manifest(cfg, run_dir):
    return {
        "version": __version__,
        "config_hash": cfg.content_hash(),
        "seed": cfg.train.seed,
        "metrics_schema": METRICS_SCHEMA,
        "layout": {"manifest": "manifest.yaml", "checkpoints": "checkpoints/", "metrics": "metrics.csv",
                   "eval": "eval/", "dumps": "dumps/"},
        "run_dir": str(run_dir),
        "config": cfg.to_dict(),
    }


def prepare_run_dir(runs_root, cfg, force=False):
    run_dir = Path(runs_root) / cfg.content_hash()
    if (run_dir / "manifest.yaml").exists():
        if not force:
            raise OutputExists(f"run directory {run_dir} already exists; pass --force to overwrite")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "manifest.yaml").write_text(yaml.safe_dump(manifest(cfg, run_dir), sort_keys=False))
    return run_dir


def run_dir_of(checkpoint_path, out=None):
    if out:
        return Path(out)
    p = Path(checkpoint_path).resolve()
    return p.parent.parent if p.parent.name == "checkpoints" else p.parent


# subcommands


def cmd_train(args):
    cfg = resolve_config(args.config, args.variant, args.layers, args.K, args.epochs, args.seed)
    if args.data_source:
        cfg.data.source = args.data_source
    ds = load_dataset(cfg.data, args.data_dir)
    run_dir = prepare_run_dir(args.runs_dir, cfg, args.force)
    print(f"run directory: {run_dir}")
    val = ds["val"] if len(ds["val"]) else None
    tr = Trainer(cfg, ds["train"], val, out_dir=run_dir)
    tr.fit()
    tr.save(run_dir / "checkpoints" / "final.ckpt")
    if len(ds["test"]):
        rep = E.evaluate(tr.model, ds["test"], split="test")
        rep.write(run_dir / "eval" / "test.json")
        print(f"test rmse(x100) {rep.rmse:.4f} ssim {rep.ssim:.4f} perplexity {[round(p, 2) for p in rep.perplexity]}")
    return EXIT_OK


def cmd_evaluate(args):
    model, cfg, _ = load_model(args.checkpoint)
    ds = load_dataset(cfg.data, args.data_dir)
    out = run_dir_of(args.checkpoint, args.out) / "eval"
    for split in args.split:
        rep = E.evaluate(model, ds[split], split=split)
        path = rep.write(out / f"{split}.json")
        print(f"{split}: rmse(x100) {rep.rmse:.4f} ssim {rep.ssim:.4f} -> {path}")
    return EXIT_OK


def cmd_rd_sweep(args):
    base = resolve_config(args.config, seed=0)
    configs = []
    for variant in args.variants:
        for L in args.layers:
            for K in args.K:
                c = resolve_config(args.config, variant, L, K, args.epochs)
                configs.append((f"{variant}-L{L}-K{K}", c))
    ds = load_dataset(base.data, args.data_dir)
    grid = json.dumps([base.content_hash(), [c.content_hash() for _, c in configs], list(args.seeds)])
    out = Path(args.runs_dir) / "rd" / hashlib.sha1(grid.encode()).hexdigest() / "rd.csv"
    if out.exists() and not args.force:
        raise OutputExists(f"{out} already exists; pass --force to overwrite")
    rows, _ = E.rd_sweep(configs, ds, out, seeds=args.seeds, jobs=args.jobs)
    print(f"{len(rows)} runs -> {out}")
    return EXIT_OK


def cmd_progressive_dump(args):
    model, cfg, _ = load_model(args.checkpoint)
    ds = load_dataset(cfg.data, args.data_dir)
    out = run_dir_of(args.checkpoint, args.out) / "dumps" / f"progressive_{args.split}"
    res = E.progressive_dump(model, ds[args.split][:args.n], out, magnify=args.magnify)
    print(f"prefix mse {[round(m, 6) for m in res['prefix_mse']]}, "
          f"telescoping error {res['telescoping_error']:.2e} -> {out}")
    return EXIT_OK


def cmd_sample(args):
    model, _, _ = load_model(args.checkpoint)
    imgs = E.sample_images(model, args.n, np.random.default_rng(args.seed))
    out = run_dir_of(args.checkpoint, args.out) / "dumps" / f"samples_seed{args.seed}.png"
    E.save_png(imgs, out, nrow=min(args.n, 8))
    print(out)
    return EXIT_OK


def cmd_inspect(args):
    arrays = ckpt.load_arrays(args.checkpoint)
    for name, a in arrays.items():
        if name != "meta/json":
            print(f"{name}\t{a.dtype}\t{tuple(a.shape)}")
    if "meta/json" in arrays:
        meta = ckpt.decode_json(arrays["meta/json"])
        print("state:", meta.get("state"))
        print(dump_config(RunConfig.from_dict(meta["config"])), end="")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="hqvae", description="Hierarchical quantized autoencoders")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, runs=True):
        sp.add_argument("--data-dir", help="dataset root (default: $HQQ_DATA_DIR)")
        if runs:
            sp.add_argument("--runs-dir", default="runs")
            sp.add_argument("--force", action="store_true", help="overwrite an existing run directory")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--variant", choices=["sqvae2", "rsqvae", "hybrid", "vqvae2", "rqvae", "vqvae"])
    t.add_argument("--layers", type=int)
    t.add_argument("--K", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--data-source", choices=["synth", "cifar10", "folder"])
    common(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("evaluate", help="metrics on dataset splits")
    e.add_argument("checkpoint")
    e.add_argument("--split", nargs="+", default=["test"], choices=["train", "val", "test"])
    e.add_argument("--out")
    common(e, runs=False)
    e.set_defaults(fn=cmd_evaluate)

    r = sub.add_parser("rd-sweep", help="train a grid of capacities and tabulate RD points")
    r.add_argument("--config")
    r.add_argument("--variants", nargs="+", default=["sqvae2"])
    r.add_argument("--layers", nargs="+", type=int, default=[2])
    r.add_argument("--K", nargs="+", type=int, default=[32])
    r.add_argument("--seeds", nargs="+", type=int, default=[0])
    r.add_argument("--epochs", type=int)
    r.add_argument("--jobs", type=int, default=1)
    common(r)
    r.set_defaults(fn=cmd_rd_sweep)

    d = sub.add_parser("progressive-dump", help="write prefix reconstructions and per-layer additions")
    d.add_argument("checkpoint")
    d.add_argument("--split", default="test", choices=["train", "val", "test"])
    d.add_argument("--n", type=int, default=8)
    d.add_argument("--magnify", type=float, default=4.0)
    d.add_argument("--out")
    common(d, runs=False)
    d.set_defaults(fn=cmd_progressive_dump)

    s = sub.add_parser("sample", help="decode uniform prior samples")
    s.add_argument("checkpoint")
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sample)

    i = sub.add_parser("inspect-checkpoint", help="list arrays and the stored config")
    i.add_argument("checkpoint")
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ConfigError, PrefixDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        # a missing config file is a configuration problem
        return EXIT_CONFIG if getattr(args, "config", None) and not Path(args.config).exists() else EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
