"""Command-line entry points.

Subcommands: train, eval, render, synth, stream-pack, stream-sweep,
helmholtz-check.  See README for dataset/config file formats.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import helmholtz, pipeline, render, stream
from .gauss import load_ply, save_ply


def _cmd_synth(args):
    ds, canonical = pipeline.synth_scene(args.kind, args.frames, args.gaussians,
                                         args.resolution, seed=args.seed)
    pipeline.save_dataset(ds, args.out, init_scene=canonical)
    print(f"wrote {len(ds)} frames and init.ply to {args.out}")


def _cmd_train(args):
    cfg = pipeline.load_config(args.config) if args.config else pipeline.TrainConfig()
    if args.iterations is not None:
        cfg.iterations = args.iterations
    dataset = pipeline.load_dataset(args.data)
    init = pipeline.load_init_scene(args.data)
    ck = pipeline.train(cfg, dataset, init, out_path=args.out)
    print(f"trained {ck.iteration} iterations -> {args.out}")


def _cmd_eval(args):
    ck = pipeline.load_checkpoint(args.ckpt)
    dataset = pipeline.load_dataset(args.data)
    rows = pipeline.evaluate(ck, dataset)
    csv = pipeline.eval_to_csv(rows)
    if args.out:
        Path(args.out).write_text(csv, encoding="ascii")
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(csv)


def _cmd_render(args):
    ck = pipeline.load_checkpoint(args.ckpt)
    dataset = pipeline.load_dataset(args.data)
    cams = [f.camera for f in dataset.frames]
    if args.times:
        timestamps = [float(v) for v in args.times.split(",") if v.strip() != ""]
    else:
        timestamps = [f.t for f in dataset.frames]
    _, traj = pipeline.render_sequence(ck, cams, timestamps, out_dir=args.out)
    if args.traj:
        Path(args.traj).write_text(pipeline.trajectory_to_csv(traj), encoding="ascii")
    print(f"rendered {len(timestamps)} frames to {args.out}")


def _cmd_stream_pack(args):
    dataset = pipeline.load_dataset(args.data)
    init = pipeline.load_init_scene(args.data)
    frames = [(f.camera, f.image) for f in dataset.frames]
    layered = stream.train_layered(frames, init, n_layers=args.layers,
                                   iters_per_layer=args.iters, seed=args.seed,
                                   n_new_per_layer=args.new_per_layer)
    stream.save_layered(layered, args.out)
    print(f"wrote {layered.n_levels}-layer scene to {args.out}")


def _cmd_stream_sweep(args):
    layered = stream.load_layered(args.layered)
    dataset = pipeline.load_dataset(args.data)
    frames = [(f.camera, f.image) for f in dataset.frames]
    rows = stream.rate_quality_sweep(layered, frames)
    csv = stream.sweep_to_csv(rows)
    if args.out:
        Path(args.out).write_text(csv, encoding="ascii")
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(csv)


def _cmd_helmholtz_check(args):
    field = helmholtz.random_band_limited(args.n, seed=args.seed)
    fc, fs, f0 = helmholtz.decompose(field)
    recon = fc.values + fs.values + f0[None, None, None, :]
    err = float(np.max(np.abs(field.values - recon)))
    ortho = abs(helmholtz.inner(fc, fs))
    print(f"n={args.n} reconstruction max err {err:.3e}, <Fc,Fs> {ortho:.3e}, "
          f"div(Fs) {np.max(np.abs(helmholtz.divergence(fs))):.3e}, "
          f"curl(Fc) {helmholtz.curl(fc).max_norm():.3e}")
    if args.out:
        n = field.n
        lines = ["i,j,k,fx,fy,fz,fcx,fcy,fcz,fsx,fsy,fsz"]
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    row = [i, j, k, *field.values[i, j, k], *fc.values[i, j, k],
                           *fs.values[i, j, k]]
                    lines.append(",".join(str(v) for v in row))
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="ascii")
        print(f"wrote {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hamsplat",
                                description="Hamiltonian deformable Gaussian splatting")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic toy dataset")
    s.add_argument("--kind", choices=("pendulum", "orbit", "mixed"), required=True)
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--gaussians", type=int, default=300)
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_synth)

    s = sub.add_parser("train", help="train on a dataset directory")
    s.add_argument("--config", default=None, help="key=value config file")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--iterations", type=int, default=None,
                   help="override the config iteration count")
    s.set_defaults(fn=_cmd_train)

    s = sub.add_parser("eval", help="PSNR/SSIM table for a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("render", help="render a camera path from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True, help="dataset dir supplying cameras")
    s.add_argument("--out", required=True, help="output frame directory")
    s.add_argument("--times", default=None, help="comma-separated timestamps")
    s.add_argument("--traj", default=None, help="trajectory CSV path")
    s.set_defaults(fn=_cmd_render)

    s = sub.add_parser("stream-pack", help="train a layered LOD scene")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--iters", type=int, default=300)
    s.add_argument("--new-per-layer", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=_cmd_stream_pack)

    s = sub.add_parser("stream-sweep", help="rate/quality table over LOD levels")
    s.add_argument("--layered", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(fn=_cmd_stream_sweep)

    s = sub.add_parser("helmholtz-check", help="decompose a random periodic field")
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None, help="CSV dump path")
    s.set_defaults(fn=_cmd_helmholtz_check)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
