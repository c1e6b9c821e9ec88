"""Command-line entry point: ``ssmrecon <subcommand> ...``.

Exit status is 0 on success, 2 for usage errors (unknown subcommand or flag)
and 1 for any other failure, reported as a single ``error:`` line on stderr.
"""
from __future__ import annotations

import os

# Reproducibility contract: single-threaded numerics.  Must precede numpy.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import statistics  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402

import numpy as np  # noqa: E402

from . import pipeline  # noqa: E402
from .config import RunConfig, load_config  # noqa: E402
from .errors import ReconError  # noqa: E402
from .forward_model import DEFAULT_CALIB, generate_gaussian_mask  # noqa: E402
from .metrics import (magnitude, mass_outside, write_metrics_csv,  # noqa: E402
                      write_pgm)
from .network import REFERENCE_PARAM_COUNT, count_tensors, param_count  # noqa: E402
from .phantoms import SPLITS, load_split, make_dataset  # noqa: E402
from .tensorfile import save_tensor  # noqa: E402
from .training import train  # noqa: E402


def _run_config(args) -> RunConfig:
    run = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        run.seed = args.seed
    return run


def _say(msg):
    print(msg, flush=True)


def cmd_gen_data(args):
    run = _run_config(args)
    split_idx = make_dataset(args.out, run.phantom(), run.n_train, run.n_val, run.n_test,
                             run.R, mask_seed=run.mask_seed, ncoils=run.ncoils, calib=run.calib)
    sizes = ", ".join(f"{s}={len(v)}" for s, v in split_idx.items())
    _say(f"wrote dataset to {args.out} ({sizes}; R={','.join(map(str, run.R))})")


def cmd_train(args):
    run = _run_config(args)
    if args.variant:
        run.variant = args.variant
    if args.iters is not None:
        run.iters = args.iters
    resume = None
    if args.resume:
        run_r, _, resume = pipeline.load_checkpoint(args.resume)
        run = run_r
    net = run.network()
    data = pipeline.load_training_data(args.data, run.R)
    t0 = time.perf_counter()
    result = train(data, net, run.training(), config_text=run.to_text(), resume=resume,
                   log_path=args.log, ckpt_path=args.out)
    ck = result.checkpoint
    _say(f"trained {run.variant} for {ck.step} steps in {time.perf_counter() - t0:.1f} s; "
         f"final loss {ck.loss:.6f}; checkpoint {args.out}")


def _method(args):
    if args.ckpt:
        run, net, ck = pipeline.load_checkpoint(args.ckpt)
        return run, net, ck.params, None
    return _run_config(args), None, None, args.baseline


def _rates(args):
    return args.R if args.R else pipeline.dataset_rates(args.data)


def cmd_reconstruct(args):
    run, net, params, baseline = _method(args)
    os.makedirs(args.out, exist_ok=True)
    n = 0
    for R in _rates(args):
        data = load_split(args.data, args.split, R)
        if baseline:
            recon = pipeline.baseline_recon(data, baseline, pipeline.cg_config(run))
        else:
            recon = pipeline.network_recon(data, params, net)
        for i, idx in enumerate(data.indices):
            stem = os.path.join(args.out, f"{idx:04d}-R{R}")
            save_tensor(stem + ".recon.mrtn", recon[i])
            mag = magnitude(recon[i])
            write_pgm(stem + ".recon.pgm", mag)
            write_pgm(stem + ".error.pgm", np.abs(mag - magnitude(data.x_fs[i])))
            n += 1
    _say(f"wrote {n} reconstructions to {args.out}")


def cmd_evaluate(args):
    run, net, params, baseline = _method(args)
    rows = pipeline.evaluate(args.data, args.split, _rates(args), params=params, net=net,
                             baseline=baseline, run=run)
    write_metrics_csv(args.out, rows)
    label = baseline or run.variant
    for R in sorted({r[1] for r in rows}):
        sel = [r for r in rows if r[1] == R]
        _say(f"{label} R={R}: median PSNR {statistics.median(r[2] for r in sel):.3f} dB, "
             f"median SSIM {statistics.median(r[3] for r in sel):.4f} over {len(sel)} slices")


def cmd_erf(args):
    run, net, ck = pipeline.load_checkpoint(args.ckpt)
    R = args.R[0] if args.R else pipeline.dataset_rates(args.data)[0]
    data = load_split(args.data, args.split, R)
    erf = pipeline.network_erf(data, ck.params, net, count=args.count)
    save_tensor(args.out, erf)
    if args.pgm:
        write_pgm(args.pgm, erf)
    H = erf.shape[0]
    _say(f"{run.variant}: ERF mass outside radius {H // 4} = {mass_outside(erf, H / 4):.6f} "
         f"({min(args.count or len(data), len(data))} slices)")


def cmd_mask_gen(args):
    mask = generate_gaussian_mask(args.size, args.size, args.R, calib=args.calib, seed=args.seed)
    save_tensor(args.out, mask.grid)
    _say(f"mask {args.size}x{args.size} R={args.R}: {mask.count} samples -> {args.out}")


def cmd_param_count(args):
    run = _run_config(args)
    net = run.network()
    n = param_count(net)
    ratio = n / REFERENCE_PARAM_COUNT
    _say(f"param_count {n} ({n:.3e})")
    _say(f"reference   {REFERENCE_PARAM_COUNT:.2e}")
    _say(f"ratio       {ratio:.4f} ({(ratio - 1) * 100:+.1f}%)")
    if args.verify:
        from .network import build
        built = count_tensors(build(net, seed=0))
        _say(f"instantiated {built} ({'matches' if built == n else 'MISMATCH'})")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssmrecon", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        return sp

    def data_args(sp):
        sp.add_argument("--data", required=True, help="dataset directory")
        sp.add_argument("--split", default="test", choices=SPLITS)
        sp.add_argument("--R", type=int, action="append", help="acceleration (repeatable)")

    sp = add("gen-data", cmd_gen_data, "generate the phantom dataset")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)

    sp = add("train", cmd_train, "train a network")
    sp.add_argument("--config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path (.mrck)")
    sp.add_argument("--log", help="loss log CSV")
    sp.add_argument("--variant", choices=("mamba", "only_dc"))
    sp.add_argument("--iters", type=int)
    sp.add_argument("--resume", help="continue from this checkpoint")
    sp.add_argument("--seed", type=int)

    for name, fn, help_ in (("reconstruct", cmd_reconstruct, "write reconstructions and PGMs"),
                            ("evaluate", cmd_evaluate, "write per-slice PSNR/SSIM CSV")):
        sp = add(name, fn, help_)
        grp = sp.add_mutually_exclusive_group(required=True)
        grp.add_argument("--ckpt")
        grp.add_argument("--baseline", choices=pipeline.BASELINES)
        sp.add_argument("--config", help="settings for --baseline cg")
        data_args(sp)
        sp.add_argument("--out", required=True)

    sp = add("erf", cmd_erf, "effective receptive field with a zero mask")
    sp.add_argument("--ckpt", required=True)
    data_args(sp)
    sp.add_argument("--count", type=int, default=100)
    sp.add_argument("--out", required=True, help="ERF tensor (.mrtn)")
    sp.add_argument("--pgm")

    sp = add("mask-gen", cmd_mask_gen, "generate one sampling mask")
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--R", type=float, default=4)
    sp.add_argument("--calib", type=int, default=DEFAULT_CALIB)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("param-count", cmd_param_count, "closed-form parameter count")
    sp.add_argument("--config")
    sp.add_argument("--verify", action="store_true", help="also instantiate and count")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (ReconError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
