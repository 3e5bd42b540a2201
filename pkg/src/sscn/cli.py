"""Command-line entry point: ``sscn voxelize|train|eval|bench|verify``.

Set ``SSCN_NUM_THREADS`` to cap the BLAS thread pool (1 gives bit-exact
reproducibility across machines with the same BLAS).
"""
import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

from . import checkpoint, config
from .accounting import network_cost
from .data import (DataError, collate, load_manifest, load_point_cloud, normalize_to_sphere,
                   prepare, save_voxel_sample, split_by_hash, voxelize)
from .network import SpecError, build_network
from .seeding import stream
from .synthetic import curve_dataset, curve_manifest
from .train import category_weights_from, evaluate_multiview, train

log = logging.getLogger("sscn")

THREADS_ENV = "SSCN_NUM_THREADS"


def load_dataset(cfg: config.RunConfig):
    """``(clouds, manifest)`` for the configured source."""
    d = cfg.data
    if d.source == "synthetic":
        clouds = curve_dataset(d.n_samples, d.data_seed)
        return clouds, curve_manifest(clouds)
    root = Path(d.source)
    man_path = root / "manifest.txt"
    if not man_path.is_file():
        raise DataError(f"{root}: no manifest.txt")
    man = load_manifest(man_path)
    clouds = []
    for name in sorted(man.sample_category):
        labels = root / f"{name}.seg"
        pc = load_point_cloud(root / f"{name}.pts", labels if labels.is_file() else None,
                              dims=cfg.network.d, category=man.sample_category[name])
        pc.name = name
        clouds.append(pc)
    return clouds, man


def split(clouds, which):
    if which == "all":
        return list(clouds)
    return [c for c in clouds if split_by_hash(c.name) == which]


def _out_dir(cfg):
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_voxelize(args):
    pc = load_point_cloud(args.points, args.labels, dims=args.dims)
    pc.name = Path(args.points).stem
    grid = args.S * args.grid_multiplier
    rng = stream(args.seed, "voxelize", pc.name)
    sample = voxelize(normalize_to_sphere(pc, args.S), args.S, grid, rng, args.feature_mode)
    save_voxel_sample(sample, args.out)
    t = sample.tensor
    print(f"{pc.name}: {len(pc)} points -> {t.a} active voxels in a {grid}^{t.dims} grid"
          f" ({t.a / args.S ** t.dims:.3%} of S^{t.dims}); {sample.n_outside} outside")
    return 0


def cmd_train(args):
    cfg = config.load(args.config, args.set)
    out = _out_dir(cfg)
    config.save(cfg, out / "config.ini")
    clouds, _ = load_dataset(cfg)
    tr, va = split(clouds, "train"), split(clouds, "validation")
    tcfg = cfg.train_config()
    net = opt = None
    start = 0
    if args.resume:
        net, opt, ck = checkpoint.load(args.resume)
        if net.spec != cfg.network:
            raise config.ConfigError(f"{args.resume} was trained with a different network")
        start = ck.epoch
    log.info("training %s on %d samples (%d held out)", cfg.network.arch, len(tr), len(va))

    def on_epoch(net, opt, rec):
        print(rec.line(), flush=True)
        every = cfg.train.checkpoint_every
        if every and (rec.epoch + 1) % every == 0:
            checkpoint.save(out / f"epoch_{rec.epoch + 1:03d}.ckpt", net, opt,
                            seed=tcfg.seed, epoch=rec.epoch + 1)

    t0 = time.perf_counter()
    net, opt, _ = train(cfg.network, tr, tcfg, val_clouds=va, net=net, opt=opt,
                        log_path=out / cfg.paths.log, on_epoch=on_epoch, start_epoch=start)
    final = out / "final.ckpt"
    checkpoint.save(final, net, opt, seed=tcfg.seed, epoch=tcfg.epochs)
    print(f"wrote {final} after {time.perf_counter() - t0:.1f}s")
    return 0


def cmd_eval(args):
    overrides = list(args.set)
    if args.views is not None:
        overrides.append(f"eval.views={args.views}")
    if args.no_mask:
        overrides.append("eval.mask=false")
    cfg = config.load(args.config, overrides)
    net, _, _ = checkpoint.load(args.checkpoint)
    clouds, man = load_dataset(cfg)
    weights = category_weights_from(split(clouds, "train"), man)
    chosen = split(clouds, cfg.eval.split)
    if not chosen:
        raise DataError(f"no samples in split {cfg.eval.split!r}")
    rep = evaluate_multiview(net, chosen, cfg.train_config(), K=cfg.eval.views, mask=cfg.eval.mask,
                             manifest=man, category_weights=weights)
    result = rep.to_dict()
    result.update(views=cfg.eval.views, mask=cfg.eval.mask, split=cfg.eval.split,
                  checkpoint=str(args.checkpoint))
    text = json.dumps(result, indent=2, sort_keys=True)
    print(text)
    path = _out_dir(cfg) / cfg.paths.report
    path.write_text(text + "\n")
    log.info("report written to %s", path)
    return 0


def cmd_bench(args):
    cfg = config.load(args.config, args.set)
    tcfg = cfg.train_config()
    if args.checkpoint:
        net, _, _ = checkpoint.load(args.checkpoint)
    else:
        net = build_network(cfg.network, stream(tcfg.seed, "init"), grid_size=tcfg.grid_size)
    clouds, _ = load_dataset(cfg)
    chosen = split(clouds, cfg.eval.split)[:args.samples]
    if not chosen:
        raise DataError("nothing to benchmark")
    batch = collate([prepare(c, tcfg.S, tcfg.grid_size, stream(tcfg.seed, "eval", c.name, 0),
                             tcfg.augment, tcfg.affine_eps, tcfg.feature_mode) for c in chosen])
    t0 = time.perf_counter()
    rep = network_cost(net, batch.tensor, raw=args.raw)
    seconds = time.perf_counter() - t0
    print(rep.to_text())
    print(f"active input sites: {batch.tensor.a} in {len(chosen)} samples; "
          f"forward {seconds * 1e3:.1f} ms; rule books built: {net.rulebook_builds()}")
    if args.csv:
        Path(args.csv).write_text(rep.to_csv())
    return 0


def cmd_verify(args):
    from .verify import run_suite
    results = run_suite(quick=args.quick, corrupt=args.corrupt)
    failed = [r for r in results if not r.ok]
    for r in results:
        print(r.line())
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    return 1 if failed else 0


def build_parser():
    p = argparse.ArgumentParser(prog="sscn", description="Submanifold sparse convolutional networks")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("voxelize", help="voxelize a points file into a .npz sample")
    v.add_argument("points")
    v.add_argument("out")
    v.add_argument("--S", type=int, default=16)
    v.add_argument("--labels")
    v.add_argument("--dims", type=int, default=3)
    v.add_argument("--grid-multiplier", type=int, choices=(1, 4), default=4)
    v.add_argument("--feature-mode", default="count")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_voxelize)

    def with_config(sp):
        sp.add_argument("config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set train.epochs=5")

    t = sub.add_parser("train", help="train a network")
    with_config(t)
    t.add_argument("--resume", metavar="CHECKPOINT")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    with_config(e)
    e.add_argument("checkpoint")
    e.add_argument("--views", type=int)
    e.add_argument("--no-mask", action="store_true")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="per-layer cost report for one batch")
    with_config(b)
    b.add_argument("--checkpoint")
    b.add_argument("--samples", type=int, default=1)
    b.add_argument("--raw", action="store_true", help="count multiplies and adds separately")
    b.add_argument("--csv", help="also write the report as CSV")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("verify", help="run the property suite")
    r.add_argument("--quick", action="store_true", help="fewer random cases")
    r.add_argument("--corrupt", action="store_true", help="inject a fault into the golden test")
    r.set_defaults(func=cmd_verify)
    return p


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise config.ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (config.ConfigError, DataError, SpecError, checkpoint.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e.filename or ''}: {e.strerror}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
