"""Command-line entry point.

Exit codes: 0 success, 1 domain error (bad config, corrupt file, failed
check), 2 usage error (argparse).
"""
import argparse
import hashlib
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .errors import EfaError

log = logging.getLogger("efayolo")


def _config(path):
    from .detector import ModelConfig
    from .formats import load_config

    return load_config(path) if path else ModelConfig()


def config_hash(cfg):
    from .formats import print_config

    return hashlib.sha256(print_config(cfg).encode()).hexdigest()[:16]


def cmd_analyze(args):
    from .analysis import analyze
    from .detector import build_model

    cfg = _config(args.config)
    if args.input_size:
        cfg = cfg.with_(input_size=args.input_size)
    report = analyze(build_model(cfg, seed=args.seed), cfg.input_size, args.precision)
    if args.table:
        sys.stdout.write(report.to_text() + "\n")
    kv = report.to_kv()
    sys.stdout.write(kv)
    if args.out:
        Path(args.out).write_text(kv, encoding="utf-8")
    return 0


def cmd_infer(args):
    from .detector import build_model, format_detections, infer_image
    from .formats import load_ppm, read_weights

    cfg_path = args.config
    if cfg_path is None and Path(args.weights).with_suffix(".cfg").exists():
        cfg_path = Path(args.weights).with_suffix(".cfg")
    cfg = _config(cfg_path)
    weights = {k: v.astype(np.float32) for k, v in read_weights(args.weights).items()}
    model = build_model(cfg, weights=weights)
    dets = infer_image(model, load_ppm(args.image), args.conf, args.iou)
    sys.stdout.write(format_detections(dets))
    return 0


def cmd_bench(args):
    from .analysis import benchmark_latency
    from .detector import build_model

    cfg = _config(args.config)
    if args.input_size:
        cfg = cfg.with_(input_size=args.input_size)
    model = build_model(cfg, seed=args.seed)
    stats = benchmark_latency(model, cfg.input_size, args.warmup, args.iters, threads=args.threads)
    sys.stdout.write(f"config_hash = {config_hash(cfg)}\ninput_size = {cfg.input_size}\n")
    sys.stdout.write(stats.to_kv())
    return 0


def cmd_gradcheck(args):
    from .selftest import format_gradcheck, gradcheck_blocks

    results = gradcheck_blocks(args.seed, args.tolerance)
    sys.stdout.write(format_gradcheck(results))
    bad = [name for name, rep in results if not rep.passed]
    if bad:
        log.error("gradient check failed for: %s", ", ".join(bad))
        return 1
    return 0


def cmd_selftest(args):
    from .selftest import run_selftest

    failed = run_selftest(args.seed, out=sys.stdout)
    if failed:
        log.error("failing properties: %s", ", ".join(failed))
        return 1
    sys.stdout.write("all properties hold\n")
    return 0


def cmd_train_toy(args):
    from .detector import ModelConfig, build_model
    from .formats import print_config, write_weights
    from .toytrain import blob_recall, calibrate_bn, gen_dataset, train, write_trace

    cfg = ModelConfig(input_size=args.size, width_mult=args.width_mult, num_classes=1)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg, seed=args.seed)
    data = gen_dataset(args.seed, args.count, args.size)
    held = gen_dataset(args.seed + 1000, args.eval_count, args.size)
    t0 = time.perf_counter()
    trace = train(
        model, data, args.steps, lr=args.lr, batch=args.batch, momentum=args.momentum,
        weight_decay=args.weight_decay, seed=args.seed,
    )
    elapsed = time.perf_counter() - t0
    calibrate_bn(model, data, args.batch)
    write_trace(out / "loss.csv", trace)
    write_weights(model, out / "weights.efaw")
    (out / "weights.cfg").write_text(print_config(cfg), encoding="utf-8")
    k = min(20, len(trace))
    first, last = float(np.mean(trace[:k])), float(np.mean(trace[-k:]))
    recall = blob_recall(model, held, conf=args.conf)
    sys.stdout.write(
        f"steps = {len(trace)}\nfirst20_mean_loss = {first:.6f}\nlast20_mean_loss = {last:.6f}\n"
        f"loss_ratio = {last / first:.4f}\nheldout_recall = {recall:.4f}\n"
        f"train_seconds = {elapsed:.1f}\nout_dir = {out}\n"
    )
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="efayolo", description="CPU inference, analysis and verification for an attention-augmented lightweight detector")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="parameter / FLOP / size report")
    a.add_argument("--config")
    a.add_argument("--input-size", type=int)
    a.add_argument("--precision", choices=("fp32", "fp16"), default="fp16")
    a.add_argument("--out", help="also write the key-value report here")
    a.add_argument("--table", action="store_true", help="print the per-layer table first")
    a.add_argument("--seed", type=int, default=42)
    a.set_defaults(func=cmd_analyze)

    i = sub.add_parser("infer", help="detect objects in a binary PPM image")
    i.add_argument("--weights", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--conf", type=float, default=0.25)
    i.add_argument("--iou", type=float, default=0.5)
    i.add_argument("--config", help="model config (default: <weights>.cfg if present, else built-in default)")
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="single-image latency")
    b.add_argument("--config")
    b.add_argument("--iters", type=int, default=100)
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--input-size", type=int)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--seed", type=int, default=42)
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", help="finite-difference check of every block")
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("selftest", help="quick property checks for every module")
    s.add_argument("--seed", type=int, default=42)
    s.set_defaults(func=cmd_selftest)

    t = sub.add_parser("train-toy", help="train a small model on synthetic blobs")
    t.add_argument("--size", type=int, default=64)
    t.add_argument("--width-mult", type=float, default=0.25)
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--momentum", type=float, default=0.0)
    t.add_argument("--weight-decay", type=float, default=0.0)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--count", type=int, default=512, help="training images")
    t.add_argument("--eval-count", type=int, default=200, help="held-out images")
    t.add_argument("--conf", type=float, default=0.25)
    t.add_argument("--seed", type=int, default=42)
    t.add_argument("--out-dir", default="toy_run")
    t.set_defaults(func=cmd_train_toy)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except EfaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc.strerror or exc}: {exc.filename}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
