"""Command-line front door.

Subcommands: selftest, dump-matrix, viz-states, train-toy, bench, erf.
All file outputs land under --out-dir; report paths write a rendered PNG
next to each CSV/PGM. Exit codes: 0 success, 1 invariant or check failure,
2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import fusion, oracle, pgm, report, selftest, ssm, train
from .model import ModelConfig, save_checkpoint
from .tensor import DomainError, write_csv

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3


def _parse_size(text: str):
    """'64' -> 64; '8x8' -> (8, 8)."""
    if "x" in text.lower():
        h, _, w = text.lower().partition("x")
        return int(h), int(w)
    return int(text)


def _build_kernel(mode: str, channels: int, dilations, rng) -> fusion.FusionKernel:
    if mode == "identity":
        return fusion.identity_kernel(channels, dilations)
    if mode == "random":
        return fusion.random_kernel(channels, dilations, rng=rng)
    if mode == "right":
        k = fusion.identity_kernel(channels, dilations)
        k.weights[0, :, 1, 2] = 1.0  # tap at offset (0, +d)
        return k
    raise ValueError(f"unknown kernel mode {mode}")


def _load_config(path: str | None) -> ModelConfig:
    if path is None:
        return ModelConfig()
    return ModelConfig.from_json(Path(path).read_text())


def _synthetic_bar(hw=(16, 16), seed: int = 42) -> np.ndarray:
    ds = train.make_bar_dataset(n=2, hw=hw, seed=seed)
    return ds.images[0]


def _load_image(args) -> np.ndarray:
    if args.image is not None:
        return pgm.read_image(args.image)
    return _synthetic_bar(seed=args.seed)


def cmd_selftest(args, out_dir: Path) -> int:
    ok = selftest.run_checks(name_filter=args.filter, corrupt=args.corrupt)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_dump_matrix(args, out_dir: Path) -> int:
    rng = np.random.default_rng(args.seed)
    size = _parse_size(args.size)
    if args.mode == "spatial":
        if not isinstance(size, tuple):
            raise ValueError("spatial mode needs --size HxW")
        height, width = size
        length = height * width
    else:
        length = size if isinstance(size, int) else size[0] * size[1]

    if args.mode == "attention":
        seq = oracle.AttentionSeq(
            q=rng.normal(size=(length, 4)),
            k=rng.normal(size=(length, 4)),
            v=rng.normal(size=(length, 1)),
        )
        m = oracle.linear_attention_matrix(seq)
    else:
        channels = 2
        u = rng.normal(size=(length, channels))
        params = ssm.init_ssm_params(channels, n_state=1, rng=rng)
        dseq = ssm.discretize(u, params)
        if args.mode == "mamba":
            m = oracle.mamba_matrix(dseq, channel=0)
        else:
            kernel = _build_kernel(args.kernel, channels, (1, 3), rng)
            fmat = fusion.fusion_adjacency(kernel, height, width, channel=0)
            m = oracle.spatial_matrix(dseq, fmat, channel=0)

    csv_path = out_dir / "M.csv"
    pgm_path = out_dir / "M.pgm"
    oracle.dump_matrix(m, csv_path, pgm_path)
    report.save_heatmap(oracle.normalized_abs(m), out_dir / "M.png",
                        title=f"{args.mode} |M| (max-normalized)")
    check = oracle.check_structure(m)
    print(f"structure: {m.structure}")
    print(f"check: {check.describe()}")
    print(f"wrote {csv_path}, {pgm_path}, {out_dir / 'M.png'}")
    return EXIT_OK if check.ok else EXIT_CHECK_FAILED


def cmd_viz_states(args, out_dir: Path) -> int:
    img = _load_image(args)
    rng = np.random.default_rng(args.seed)
    kernel = _build_kernel(args.kernel, args.channels, (1, 3, 5), rng)
    layer = train.make_scan_image_layer(channels=args.channels, seed=args.seed, kernel=kernel)
    x_map, h_map = train.state_maps(layer, img)

    def normalize(v):
        mags = np.abs(v)
        peak = mags.max()
        return mags / peak if peak > 0 else mags

    pgm.write_pgm(out_dir / "x_mean.pgm", normalize(x_map))
    pgm.write_pgm(out_dir / "h_mean.pgm", normalize(h_map))
    report.save_state_pair(x_map, h_map, out_dir / "states.png")
    print(f"wrote {out_dir / 'x_mean.pgm'}, {out_dir / 'h_mean.pgm'}, {out_dir / 'states.png'}")
    return EXIT_OK


def cmd_train_toy(args, out_dir: Path) -> int:
    cfg = _load_config(args.config)
    ds = train.make_bar_dataset(n=args.samples, hw=cfg.input_hw, seed=args.seed)
    result = train.train_toy(cfg, ds, steps=args.steps, lr=args.lr,
                             batch_size=args.batch, seed=args.seed)
    losses = result.losses if args.steps > 0 else np.array([result.initial_loss])
    train.write_loss_csv(out_dir / "loss.csv", losses)
    report.save_curve(losses, out_dir / "loss.png", title="training cross-entropy")
    save_checkpoint(out_dir / "model.ckpt", result.weights)
    (out_dir / "config.json").write_text(cfg.to_json() + "\n")
    ratio = result.final_loss / result.initial_loss if result.initial_loss else float("nan")
    print(f"initial loss {result.initial_loss:.6f}")
    print(f"final loss   {result.final_loss:.6f} (ratio {ratio:.4f})")
    print(f"train accuracy {result.accuracy:.4f}")
    print(f"wrote {out_dir / 'loss.csv'}, {out_dir / 'loss.png'}, {out_dir / 'model.ckpt'}")
    return EXIT_OK


def cmd_bench(args, out_dir: Path) -> int:
    reports = []
    try:
        if args.which in ("scan", "all"):
            reports += bench_mod.bench_scan_vs_matrix(
                [64, 128, 256], seed=args.seed, threads=args.threads,
                corrupt=args.corrupt == "scan",
            )
        if args.which in ("sasf", "all"):
            reports += bench_mod.bench_sasf_merge(
                [(16, 16), (32, 32)], seed=args.seed,
                corrupt=args.corrupt == "sasf",
            )
    except bench_mod.EquivalenceError as exc:
        print(f"equivalence precheck failed: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    bench_mod.report_csv(reports, out_dir / "bench.csv")
    report.save_bench_chart(reports, out_dir / "bench.png")
    print(bench_mod.report_table(reports))
    print(f"wrote {out_dir / 'bench.csv'}, {out_dir / 'bench.png'}")
    return EXIT_OK


def cmd_erf(args, out_dir: Path) -> int:
    img = _load_image(args)
    rng = np.random.default_rng(args.seed)
    kernel = None
    if args.kernel != "none":
        kernel = _build_kernel(args.kernel, args.channels, (1, 3, 5), rng)
    layer = train.make_scan_image_layer(channels=args.channels, seed=args.seed, kernel=kernel)
    emap = train.erf_map(layer, img)
    peak = emap.max()
    pgm.write_pgm(out_dir / "erf.pgm", emap / peak if peak > 0 else emap)
    write_csv(out_dir / "erf.csv", emap)
    report.save_heatmap(emap, out_dir / "erf.png", title="receptive field of the center output")
    print(f"wrote {out_dir / 'erf.pgm'}, {out_dir / 'erf.csv'}, {out_dir / 'erf.png'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="statefusion",
        description="Structure-aware selective scan: self-tests, matrix dumps, "
                    "state/receptive-field maps, toy training, benchmarks.",
    )
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--threads", type=int, default=1,
                        help="parallel scan lanes (default 1: deterministic order)")
    parser.add_argument("--out-dir", default="out")
    parser.add_argument("--config", default=None, help="model config JSON path")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("selftest", help="run the invariant suite")
    p.add_argument("--filter", default=None, help="substring filter on check names")
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)  # test hook
    p.set_defaults(fn=cmd_selftest)

    p = sub.add_parser("dump-matrix", help="materialize and dump an L x L mixing matrix")
    p.add_argument("--mode", choices=("attention", "mamba", "spatial"), required=True)
    p.add_argument("--size", required=True, help="L for 1D modes, HxW for spatial")
    p.add_argument("--kernel", choices=("identity", "random", "right"), default="random")
    p.set_defaults(fn=cmd_dump_matrix)

    p = sub.add_parser("viz-states", help="dump state maps before/after fusion")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--image", default=None, help="ASCII PGM/PPM input image")
    group.add_argument("--synthetic", action="store_true", help="use a generated bar image")
    p.add_argument("--kernel", choices=("identity", "random", "right"), default="identity")
    p.add_argument("--channels", type=int, default=8)
    p.set_defaults(fn=cmd_viz_states)

    p = sub.add_parser("train-toy", help="train the toy backbone on bar orientation")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--samples", type=int, default=256)
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("bench", help="timing reports with equivalence prechecks")
    p.add_argument("--which", choices=("scan", "sasf", "all"), default="all")
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)  # test hook
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("erf", help="gradient map of the center output pixel")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--image", default=None, help="ASCII PGM/PPM input image")
    group.add_argument("--synthetic", action="store_true")
    p.add_argument("--kernel", choices=("none", "identity", "random", "right"), default="random")
    p.add_argument("--channels", type=int, default=8)
    p.set_defaults(fn=cmd_erf)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        return args.fn(args, out_dir)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DomainError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
