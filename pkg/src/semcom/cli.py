"""Command-line interface.

    semcom train     --config CFG --phase {1,2,3} [--tag T] [--alpha A]
    semcom eval      --config CFG --mode MODE --ckpt PATH [PATH ...]
    semcom transmit  --image IMG --ckpt PATH --snr DB [--seed N] [--out DIR]
    semcom ingest    --dir DIR [--crop N] [--patches N]
    semcom toy-corpus --dir DIR

Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 missing
input. ``SEMCOM_OUTPUT_ROOT`` prefixes relative output directories.
"""
import argparse
import contextlib
import json
import logging
import os
import sys

import torch
import torch.nn.functional as F

from .channel import make_rng, normalize_latent, transmit_latent
from .checkpoint import load_checkpoint
from .codec import decode, encode
from .config import load_config, save_config
from .data import ingest_dataset, load_image, save_image, to_tensor, write_toy_corpus
from .denoiser import denoise_adaptive, write_traces
from .errors import CheckpointError, ConfigError, MissingInputError, SemcomError, ShapeError
from .evaluation import (
    ablate_initial_ss,
    ablate_ss_loss,
    ablate_steps,
    measure_receiver_latency,
    plot_bars,
    plot_sweep,
    run_snr_sweep,
)
from .metrics import psnr
from .runner import load_data, run_phase

logger = logging.getLogger("semcom")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3
EVAL_MODES = ("sweep", "ablate-ss", "ablate-steps", "ablate-loss", "latency")


class OutputLocked(SemcomError):
    pass


@contextlib.contextmanager
def output_lock(directory):
    """Exclusive ownership of an output directory for one command."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutputLocked(f"{directory} is in use by another command (remove {path} if stale)") from None
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        yield directory
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.remove(path)


def _load_cfg(path):
    if not os.path.exists(path):
        raise MissingInputError(f"config file {path!r} not found")
    return load_config(path)


# ---------------------------------------------------------------- commands


def cmd_train(args):
    cfg = _load_cfg(args.config)
    out = cfg.resolved_output_dir()
    with output_lock(out):
        data = load_data(cfg, out)
        logger.info("dataset %s", data.summary())
        _, ckpt = run_phase(cfg, args.phase, data, out, tag=args.tag, alpha=args.alpha)
    print(ckpt)
    return EXIT_OK


def _eval_sweep(cfg, systems, paths, images, out):
    ev = cfg.eval
    main = systems[0]
    if len(systems) > 1:
        baselines = {os.path.splitext(os.path.basename(p))[0]: s for p, s in zip(paths[1:], systems[1:])}
    else:
        baselines = {"jscc_t": main}
    res = run_snr_sweep(main, images, ev.snr_list, seed=ev.seed, baselines=baselines, batch_size=ev.batch_size)
    stem = os.path.join(out, "sweep")
    res.write(stem)
    return [stem + ".jsonl", plot_sweep(res, stem + "_psnr.png", "psnr"),
            plot_sweep(res, stem + "_ms_ssim.png", "ms_ssim")]


def _eval_ablate_ss(cfg, systems, paths, images, out):
    res = ablate_initial_ss(systems[0], images, cfg.eval.snr_list, seed=cfg.eval.seed,
                            batch_size=cfg.eval.batch_size)
    stem = os.path.join(out, "ablate_initial_ss")
    res.write(stem)
    return [stem + ".jsonl", plot_sweep(res, stem + ".png", "psnr")]


def _eval_ablate_steps(cfg, systems, paths, images, out):
    res = ablate_steps(systems[0], images, cfg.eval.snr_list, seed=cfg.eval.seed, batch_size=cfg.eval.batch_size)
    stem = os.path.join(out, "ablate_steps")
    res.write(stem)
    return [stem + ".jsonl", plot_bars(res, stem + ".png", "psnr_delta")]


def _eval_ablate_loss(cfg, systems, paths, images, out):
    if len(systems) != 2:
        raise ConfigError("ablate-loss needs two checkpoints: with SS loss, then without")
    res = ablate_ss_loss(systems[0], systems[1], images, cfg.eval.snr_list, seed=cfg.eval.seed,
                         export_dir=os.path.join(out, "ablate_loss_images"), batch_size=cfg.eval.batch_size)
    stem = os.path.join(out, "ablate_loss")
    res.write(stem)
    return [stem + ".jsonl", plot_sweep(res, stem + ".png", "psnr")]


def _eval_latency(cfg, systems, paths, images, out):
    if systems[0].denoiser is None:
        raise ConfigError("latency needs a checkpoint with a trained denoiser")
    ev = cfg.eval
    table = measure_receiver_latency(systems[0], images[: ev.latency_images], ev.snr_list,
                                     repetitions=ev.latency_repetitions, warmup=ev.latency_warmup, seed=ev.seed)
    stem = os.path.join(out, "latency")
    table.write(stem)
    return [stem + ".jsonl", stem + ".csv"]


EVAL_HANDLERS = {
    "sweep": _eval_sweep,
    "ablate-ss": _eval_ablate_ss,
    "ablate-steps": _eval_ablate_steps,
    "ablate-loss": _eval_ablate_loss,
    "latency": _eval_latency,
}


def cmd_eval(args):
    cfg = _load_cfg(args.config)
    if args.mode not in EVAL_HANDLERS:
        raise ConfigError(f"unknown eval mode {args.mode!r}; choose from {EVAL_MODES}")
    systems = [load_checkpoint(p)[0] for p in args.ckpt]
    if args.mode in ("ablate-ss", "ablate-steps") and systems[0].denoiser is None:
        raise ConfigError(f"{args.mode} needs a checkpoint with a trained denoiser")
    out = os.path.join(cfg.resolved_output_dir(), "eval")
    with output_lock(out):
        images = load_data(cfg, cfg.resolved_output_dir()).val
        files = EVAL_HANDLERS[args.mode](cfg, systems, args.ckpt, images, out)
        save_config(cfg, os.path.join(out, "resolved_config.yaml"))
    for f in files:
        print(f)
    return EXIT_OK


def _pad_to(x, multiple):
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x, (ph, pw)


@torch.no_grad()
def transmit_image(path, system, snr_db, seed=0):
    """Send one image through encoder, channel, adaptive denoiser and decoder.

    The image is reflect-padded up to a size the codec and the denoiser
    accept; the padding is stripped from every output. Returns a dict with
    the reconstruction, its trace and per-stage PSNR.
    """
    if not os.path.exists(path):
        raise MissingInputError(f"image {path!r} not found")
    try:
        x = to_tensor(load_image(path)).unsqueeze(0)
    except OSError as exc:
        raise ShapeError(f"cannot decode image {path!r}: {exc}") from exc
    cfg = system.codec_cfg
    multiple = cfg.downsample * (2 ** system.denoiser.cfg.unet_depth if system.denoiser else 1)
    h, w = x.shape[-2:]
    xp, padding = _pad_to(x, multiple)
    y = encode(xp, system.encoder, cfg)
    clean = decode(normalize_latent(y, system.power), system.decoder, cfg)[..., :h, :w]
    _, z1 = transmit_latent(y, snr_db, make_rng(seed), system.power)
    noisy = decode(z1, system.decoder, cfg)[..., :h, :w]
    stages = {"no_channel": float(psnr(x, clean)), "received": float(psnr(x, noisy))}
    trace = None
    y_hat = z1
    if system.denoiser is not None:
        y_hat, (trace,) = denoise_adaptive(z1, snr_db, system.denoiser, keep_latents=True)
        for k, z in enumerate(trace.latents[1:], start=1):
            x_k = decode(z.unsqueeze(0), system.decoder, cfg)[..., :h, :w]
            stages[f"step_{k}" + ("" if k <= trace.steps_kept else "_discarded")] = float(psnr(x, x_k))
    x_hat = decode(y_hat, system.decoder, cfg)[..., :h, :w]
    stages["output"] = float(psnr(x, x_hat))
    return {"x": x[0], "x_hat": x_hat[0], "trace": trace, "psnr": stages, "padding": list(padding)}


def cmd_transmit(args):
    system, _, _ = load_checkpoint(args.ckpt)
    res = transmit_image(args.image, system, args.snr, args.seed)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out, os.path.splitext(os.path.basename(args.image))[0])
    save_image(stem + "_recon.png", res["x_hat"])
    report = {"image": args.image, "snr_db": args.snr, "seed": args.seed, "padding": res["padding"],
              "psnr": res["psnr"]}
    if res["trace"] is not None:
        with contextlib.suppress(FileNotFoundError):
            os.remove(stem + "_trace.jsonl")
        write_traces(stem + "_trace.jsonl", [res["trace"]], args.snr, [os.path.basename(args.image)])
        report["trace"] = res["trace"].to_record()
    with open(stem + "_report.json", "w") as fh:
        json.dump(report, fh, indent=2)
    print(json.dumps(report["psnr"]))
    return EXIT_OK


def cmd_ingest(args):
    data = ingest_dataset(args.dir, crop_size=args.crop, patches_per_image=args.patches,
                          val_fraction=args.val_fraction, seed=args.seed, scale=args.scale)
    print(json.dumps(data.summary()))
    return EXIT_OK


def cmd_toy_corpus(args):
    for p in write_toy_corpus(args.dir):
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="semcom", description="Latent-denoising image transmission experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one phase")
    t.add_argument("--config", required=True)
    t.add_argument("--phase", type=int, required=True, choices=(1, 2, 3))
    t.add_argument("--tag", default=None, help="checkpoint suffix, e.g. no_ss for the ablation arm")
    t.add_argument("--alpha", type=float, default=None, help="override the SS-loss weight in phase 2")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="sweeps, ablations and latency")
    e.add_argument("--config", required=True)
    e.add_argument("--mode", required=True, choices=EVAL_MODES)
    e.add_argument("--ckpt", required=True, nargs="+")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("transmit", help="send one image through the trained pipeline")
    x.add_argument("--image", required=True)
    x.add_argument("--ckpt", required=True)
    x.add_argument("--snr", type=float, required=True)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out", default="transmit_out")
    x.set_defaults(func=cmd_transmit)

    i = sub.add_parser("ingest", help="summarize an image folder as a dataset")
    i.add_argument("--dir", required=True)
    i.add_argument("--crop", type=int, default=32)
    i.add_argument("--patches", type=int, default=1)
    i.add_argument("--val-fraction", type=float, default=0.1)
    i.add_argument("--scale", type=float, default=1.0)
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_ingest)

    c = sub.add_parser("toy-corpus", help="write the bundled sample photos as PNGs")
    c.add_argument("--dir", required=True)
    c.set_defaults(func=cmd_toy_corpus)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except MissingInputError as exc:
        logger.error("%s", exc)
        return EXIT_MISSING
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (CheckpointError, SemcomError, OSError, RuntimeError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
