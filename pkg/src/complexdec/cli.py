"""Command line interface: ``complexdec <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import bitstream, checkpoints, dsp
from .config import (CodecConfig, SdeConfig, TrainConfig, UNetConfig, checkpoint_dir, get_preset,
                     load_yaml_config)
from .data import DatasetManifest, load_waves
from .evaluation import evaluate, export_spectrogram_image
from .postfilter import enhance
from .training import train_codec, train_spf

logger = logging.getLogger("complexdec")


def _configs(args) -> tuple[CodecConfig, dict]:
    raw = load_yaml_config(args.config) if getattr(args, "config", None) else {}
    preset = args.preset or raw.get("preset", "default")
    cfg = get_preset(preset)
    if raw.get("codec"):
        cfg = CodecConfig.from_dict({**cfg.to_dict(), **raw["codec"]})
    return cfg, raw


def _train_config(args, raw: dict, hop: int) -> TrainConfig:
    kw = dict(raw.get("train", {}))
    for name in ("lr", "batch_size", "segment_length", "max_steps", "seed", "checkpoint_every", "lr_schedule"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    kw["hop"] = hop
    return TrainConfig(**kw)


def _out_dir(args) -> Path:
    return Path(args.out) if args.out else checkpoint_dir()


def _codec_path(args) -> Path:
    return Path(args.codec) if args.codec else checkpoint_dir() / "codec.pt"


def cmd_train_codec(args) -> int:
    cfg, raw = _configs(args)
    tc = _train_config(args, raw, cfg.hop)
    manifest = DatasetManifest.load(args.manifest).split(args.split)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    result = train_codec(manifest, cfg, tc, out_dir=out, log_path=out / "codec_losses.jsonl")
    print(result.checkpoint)
    return 0


def cmd_train_spf(args) -> int:
    _, raw = _configs(args)
    codec = checkpoints.load_codec(_codec_path(args))
    tc = _train_config(args, raw, codec.config.hop)
    sde = SdeConfig.from_dict(raw.get("sde", {}))
    unet = UNetConfig.from_dict(raw.get("unet", {}))
    manifest = DatasetManifest.load(args.manifest).split(args.split)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    result = train_spf(manifest, codec, sde, unet, tc, out_dir=out, crop_frames=unet.tile_frames,
                       log_path=out / "spf_losses.jsonl")
    print(result.checkpoint)
    return 0


def cmd_encode(args) -> int:
    codec = checkpoints.load_codec(_codec_path(args))
    cfg = codec.config
    wave = dsp.read_wav(args.input)
    codes = codec.encode_indices(wave.samples).numpy()
    header = bitstream.BitstreamHeader(wave.sample_rate, cfg.hop, cfg.fft_size, cfg.n_stages,
                                       cfg.n_stages, cfg.codebook_bits, len(codes), len(wave))
    bitstream.write_file(args.output, codes, header)
    return 0


def cmd_decode(args) -> int:
    codec = checkpoints.load_codec(_codec_path(args))
    header, codes = bitstream.read_file(args.input)
    spec = codec.decode_indices(torch.from_numpy(codes))
    if args.spf:
        spf = checkpoints.load_spf(args.spf)
        spec = enhance(spec, spf, cfg=spf.sde, seed=args.seed)
    cfg = codec.config
    wave = dsp.istft(spec, header.n_samples, cfg.hop, cfg.fft_size, cfg.window)
    dsp.write_wav(args.output, wave.double().numpy(), header.sample_rate, bits=args.bits)
    return 0


def cmd_eval(args) -> int:
    codec = checkpoints.load_codec(_codec_path(args))
    spf = checkpoints.load_spf(args.spf) if args.spf else None
    manifest = DatasetManifest.load(args.manifest)
    if args.split:
        manifest = manifest.split(args.split)
    report = evaluate(load_waves(manifest), codec, spf, seed=args.seed)
    text = report.to_jsonl()
    if args.output:
        Path(args.output).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_spectrogram(args) -> int:
    wave = dsp.read_wav(args.input)
    export_spectrogram_image(wave, args.output, args.hop, args.fft_size)
    return 0


def cmd_info(args) -> int:
    header, codes = bitstream.read_file(args.input)
    info = {k: v for k, v in header.__dict__.items()}
    info["frame_rate"] = header.sample_rate / header.hop
    info["bitrate"] = bitstream.bitrate(info["frame_rate"], header.n_stages, header.bits_per_index)
    info["payload_bytes"] = header.payload_bytes
    print(json.dumps(info))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="complexdec", description="Complex-spectral neural audio codec")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def training_flags(sp):
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--split", default="train")
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--preset", choices=["full", "default", "tiny"])
        sp.add_argument("--out", help="checkpoint directory (default: $COMPLEXDEC_CHECKPOINT_DIR)")
        sp.add_argument("--max-steps", dest="max_steps", type=int)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--segment-length", dest="segment_length", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
        sp.add_argument("--lr-schedule", dest="lr_schedule", choices=["constant", "cosine"])

    sp = sub.add_parser("train-codec", help="train the codec")
    training_flags(sp)
    sp.set_defaults(func=cmd_train_codec)

    sp = sub.add_parser("train-spf", help="train the score post-filter")
    training_flags(sp)
    sp.add_argument("--codec", help="codec checkpoint")
    sp.set_defaults(func=cmd_train_spf)

    sp = sub.add_parser("encode", help="WAV -> .cpxd")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--codec")
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("decode", help=".cpxd -> WAV")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--codec")
    sp.add_argument("--spf", help="post-filter checkpoint")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--bits", type=int, choices=[16, 24], default=16)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("eval", help="objective metrics over a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split")
    sp.add_argument("--codec")
    sp.add_argument("--spf")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--output", help="write the JSON-lines report here too")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("spectrogram", help="WAV -> log-magnitude PNG")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--hop", type=int, default=320)
    sp.add_argument("--fft-size", dest="fft_size", type=int, default=510)
    sp.set_defaults(func=cmd_spectrogram)

    sp = sub.add_parser("info", help="dump a .cpxd header")
    sp.add_argument("input")
    sp.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

