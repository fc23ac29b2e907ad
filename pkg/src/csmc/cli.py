"""Command line interface: ``csmc <subcommand> ...``.

On failure every subcommand prints one JSON line
``{"error": <ExceptionName>, "message": <text>}`` to stderr and exits with
status 2 (1 for unexpected exceptions).
"""

import argparse
import json
import logging
import sys

import numpy as np

from . import codec, desk, metrics, plotting, training, video
from .errors import ConfigError, CsmcError
from .network import build_model, decode_video
from .sensing import SensingConfig, make_matrix

log = logging.getLogger("csmc")


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _size(text):
    parts = text.lower().split("x")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must be N or WxH, got {text!r}")
    if len(vals) == 1:
        return vals[0], vals[0]
    if len(vals) == 2:
        return vals[0], vals[1]
    raise argparse.ArgumentTypeError(f"size must be N or WxH, got {text!r}")


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_videos(paths):
    if not paths:
        raise ConfigError("no --data videos given")
    return [video.read_gsv(p) for p in paths]


def _training_set(args, config):
    if args.data:
        clips = _load_videos(args.data)
    else:
        clips = desk.synthetic_clips(config.data)
    return desk.build_training_set(clips, config)


def _heldout_frames(args, config):
    if getattr(args, "test", None):
        return desk.crop_frames(video.read_gsv(args.test), config.data.crop)
    return desk.crop_frames(desk.heldout_clip(config.data), config.data.crop)


# -- subcommands -------------------------------------------------------------

def cmd_make_synthetic(args):
    w, h = args.size
    vid = video.make_synthetic(args.kind, w, h, args.frames, tuple(args.velocity), args.seed)
    video.write_gsv(args.out, vid)
    print(json.dumps({"out": args.out, "width": w, "height": h, "frames": args.frames}))


def _sensing_from_json(path):
    with open(path) as fh:
        d = json.load(fh)
    cfg = SensingConfig(d.get("block_size", 16), d.get("compression_factor", 16))
    return make_matrix(cfg, d.get("matrix_seed", 0)), cfg.block_size


def cmd_encode(args):
    if bool(args.model) == bool(args.sensing):
        raise ConfigError("give exactly one of --model or --sensing")
    if args.model:
        model = training.load_model(args.model)
        phi, b = model.phi, model.config.block_size
    else:
        phi, b = _sensing_from_json(args.sensing)
    raw = video.read_gsv(args.inp)
    frames = raw.as_float()
    ys = codec.encode_frames(frames, phi, b, args.snr_db, args.noise_seed)
    header = codec.make_header(phi, b, frames.shape, args.snr_db,
                               args.noise_seed if args.snr_db is not None else None)
    codec.write_measurements(args.out, header, ys)
    print(json.dumps({"out": args.out, "frames": header["frames"], "m": header["m"],
                      "cr": header["compression_factor"]}))


def cmd_decode(args):
    model = training.load_model(args.model)
    header, ys = codec.read_measurements(args.inp)
    codec.check_model_matches(header, model)
    frames = decode_video(model, ys, (header["height"], header["width"]), args.mc_mode)
    out = np.stack([np.round(f * 255.0) for f in frames]).astype(np.uint8)
    video.write_gsv(args.out, video.RawVideo(out))
    print(json.dumps({"out": args.out, "frames": len(frames)}))


def cmd_pretrain(args):
    config = desk.load_config(args.config)
    ds = _training_set(args, config)
    model = build_model(config.model)
    training.fit_norm_stats(model, ds)
    epochs = config.train.pretrain_epochs or 1
    _, hist = training.pretrain_prelim(
        model, ds, config.train, epochs=epochs,
        on_epoch=lambda e, v: log.info("pretrain epoch %d loss %.6f", e, v))
    model.extra["pretrain_history"] = hist
    training.save_checkpoint(args.out, training.Checkpoint(model, epoch=0))
    print(json.dumps({"out": args.out, "pretrain_history": hist}))


def cmd_train(args):
    config = desk.load_config(args.config)
    ds = _training_set(args, config)
    if args.init:
        model = training.load_model(args.init)
        if model.config.stage_count != config.train.stage_count:
            raise ConfigError("--init model stage count differs from the config")
        ckpt = training.train(model, ds, config.train, args.out, args.log)
        ckpt.model.extra["lambda_mc"] = config.train.lambda_mc
        training.save_checkpoint(args.out, ckpt)
    else:
        ckpt = desk.fit(config, ds, pretrain=not args.no_pretrain,
                        checkpoint_path=args.out, log_path=args.log)
    fig = plotting.plot_loss_curve(ckpt.history, plotting.figure_path(args.out, "_loss"))
    print(json.dumps({"out": args.out, "epochs": ckpt.epoch,
                      "final": ckpt.history[-1], "figure": fig}))


def cmd_eval(args):
    ref = video.read_gsv(args.ref).as_float()
    test = video.read_gsv(args.test).as_float()
    report = metrics.video_metrics(ref, test)
    report["ref"], report["test"] = args.ref, args.test
    _write_json(args.report, report)
    fig = plotting.plot_frame_metrics(report, plotting.figure_path(args.report))
    print(json.dumps({"mean_psnr": report["mean_psnr"], "mean_ssim": report["mean_ssim"],
                      "report": args.report, "figure": fig}))


def cmd_ablate_stages(args):
    config = desk.load_config(args.config)
    ds = _training_set(args, config)
    report = desk.stage_ablation(config, args.stages, ds, _heldout_frames(args, config))
    _write_json(args.report, report)
    fig = plotting.plot_stage_ablation(report, plotting.figure_path(args.report))
    for row in report["rows"]:
        print(json.dumps(row))
    print(json.dumps({"report": args.report, "figure": fig}))


def cmd_noise_sweep(args):
    model = training.load_model(args.model)
    crop = args.crop if args.crop else None
    if args.inp:
        frames = desk.crop_frames(video.read_gsv(args.inp), crop)
    else:
        frames = desk.crop_frames(desk.heldout_clip(desk.DataConfig()), crop)
    report = desk.noise_sweep(model, frames, args.snr_list, args.noise_seed, args.mc_mode)
    _write_json(args.report, report)
    fig = plotting.plot_noise_sweep(report, plotting.figure_path(args.report))
    for row in report["rows"]:
        print(json.dumps(row))
    print(json.dumps({"noiseless_psnr": report["noiseless_psnr"], "report": args.report,
                      "figure": fig}))


def build_parser():
    p = argparse.ArgumentParser(prog="csmc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-synthetic", help="write a synthetic GSV clip")
    s.add_argument("--kind", choices=video.SYNTHETIC_KINDS, default="translate")
    s.add_argument("--size", type=_size, default=(160, 160), help="N or WxH")
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--velocity", type=_ints, default=[2, 0], help="dx,dy per frame")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_synthetic)

    s = sub.add_parser("encode", help="measure a GSV video block by block")
    s.add_argument("--model")
    s.add_argument("--sensing", help="JSON with block_size, compression_factor, matrix_seed")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--snr-db", type=float)
    s.add_argument("--noise-seed", type=int, default=0)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", help="reconstruct a measurement file")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mc-mode", choices=("learned", "lsq", "off"))
    s.set_defaults(func=cmd_decode)

    for name, func, helptext in (("pretrain", cmd_pretrain, "pre-train the preliminary CNNs"),
                                 ("train", cmd_train, "train a model end to end")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config")
        s.add_argument("--data", nargs="*", help="GSV training videos (default: synthetic)")
        s.add_argument("--out", required=True)
        if name == "train":
            s.add_argument("--init", help="start from this checkpoint (e.g. a pretrain output)")
            s.add_argument("--log", help="write per-epoch JSON lines here")
            s.add_argument("--no-pretrain", action="store_true")
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="PSNR/SSIM of a test video against a reference")
    s.add_argument("--ref", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate-stages", help="train and compare several stage counts")
    s.add_argument("--config")
    s.add_argument("--stages", type=_ints, default=[2, 3, 4, 5])
    s.add_argument("--data", nargs="*")
    s.add_argument("--test", help="held-out GSV clip (default: synthetic)")
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_ablate_stages)

    s = sub.add_parser("noise-sweep", help="decode noisy measurements at several SNRs")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="inp", help="GSV clip (default: synthetic held-out clip)")
    s.add_argument("--crop", type=int, default=0, help="centre crop size, 0 = none")
    s.add_argument("--snr-list", type=_floats, default=[20.0, 30.0, 40.0, 50.0])
    s.add_argument("--noise-seed", type=int, default=0)
    s.add_argument("--mc-mode", choices=("learned", "lsq", "off"))
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_noise_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CsmcError, OSError, KeyError, json.JSONDecodeError, TypeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
