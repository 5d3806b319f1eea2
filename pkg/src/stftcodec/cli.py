"""Command-line entry point: train, encode, decode, eval, ablate, inspect.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(unreadable or inconsistent inputs), 3 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .audio import AudioFormatError, read_wav, write_wav
from .bitstream import (
    BitstreamError,
    bitrate,
    decode_file,
    encode_file,
    read_bitstream,
    write_bitstream,
)
from .config import ConfigError, config_hash, dump_config, load_config
from .metrics import EvalReport, FileMetrics, external_metric, lsd, vuv_f1
from .quantizer import CodebookSpec
from .train import (
    ABLATION_VARIANTS,
    TrainError,
    Trainer,
    build_dataset,
    format_ablation_table,
    load_codec_model,
    run_ablation,
)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="stftcodec", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add_config_args(p):
        p.add_argument("--config", help="TOML config file (or $STFTCODEC_CONFIG)")
        p.add_argument(
            "--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
            help="override one config value; repeatable",
        )

    p = sub.add_parser("train", help="train a codec on a directory of WAVs")
    add_config_args(p)
    p.add_argument("--data", required=True, help="directory of training WAVs")
    p.add_argument("--out", required=True, help="run directory for logs and checkpoints")

    p = sub.add_parser("encode", help="compress a WAV file to a .stfc stream")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--in", dest="input", required=True, help="input WAV")
    p.add_argument("--out", required=True, help="output .stfc path")
    p.add_argument(
        "--codebooks", type=int, default=None, metavar="N",
        help="use only the first N RVQ stages (lower bitrate)",
    )

    p = sub.add_parser("decode", help="reconstruct a WAV from a .stfc stream")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--in", dest="input", required=True, help="input .stfc")
    p.add_argument("--out", required=True, help="output WAV")
    p.add_argument(
        "--ignore-hash", action="store_true",
        help="decode even if the stream was produced by a different checkpoint",
    )

    p = sub.add_parser("eval", help="round-trip a corpus and report metrics")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="directory of WAVs to evaluate")
    p.add_argument("--report", required=True, help="output CSV path")
    p.add_argument(
        "--tool", action="append", default=[], metavar="NAME=PATH",
        help="external metric executable invoked as PATH ref.wav deg.wav; repeatable",
    )

    p = sub.add_parser("ablate", help="train and compare ablation variants")
    add_config_args(p)
    p.add_argument("--data", required=True, help="directory of training WAVs")
    p.add_argument(
        "--variants", default=",".join(ABLATION_VARIANTS),
        help="comma-separated subset of: " + ", ".join(ABLATION_VARIANTS),
    )
    p.add_argument("--steps", type=int, default=100, help="training steps per variant")
    p.add_argument("--out", default=None, help="optional directory for per-variant logs")

    p = sub.add_parser("inspect", help="print the header and bitrate of a stream")
    p.add_argument("--in", dest="input", required=True, help=".stfc file")

    return parser


def _format_bps(value: float) -> str:
    return f"{value:g}"


def _load_checkpoint_model(path):
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        return load_codec_model(path)
    except Exception as exc:
        raise DataError(f"unreadable checkpoint {path}: {exc}") from exc


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        dataset = build_dataset(args.data, cfg.train)
    except (TrainError, AudioFormatError) as exc:
        raise DataError(str(exc)) from exc
    trainer = Trainer(
        cfg.train, dataset,
        stft_config=cfg.stft, generator_config=cfg.generator,
        codebook_spec=cfg.codebooks, loss_weights=cfg.losses, out_dir=out,
    )
    dump_config(cfg, out / "config.toml")
    print(f"effective config hash: {config_hash(cfg)}")
    print(f"training on {dataset.num_files} file(s) for {cfg.train.max_steps} steps")
    reports = trainer.train()
    trainer.save_checkpoint(out / "final.pt")
    last = reports[-1] if reports else None
    if last:
        print(f"step {trainer.step}: total_g={last.total_g:.4f} mel={last.mel:.4f}")
    print(f"checkpoint written to {out / 'final.pt'}")
    return 0


def cmd_encode(args) -> int:
    model = _load_checkpoint_model(args.model)
    spec = None
    if args.codebooks is not None:
        full = model.quantizer.spec
        if not 1 <= args.codebooks <= full.num_codebooks:
            raise UsageError(
                f"--codebooks must be in 1..{full.num_codebooks}, got {args.codebooks}"
            )
        spec = CodebookSpec(
            sizes=full.sizes[:args.codebooks],
            code_dim=full.code_dim, input_dim=full.input_dim,
        )
    stream = encode_file(args.input, model, spec=spec)
    write_bitstream(stream, args.out)
    h = stream.header
    bps = h.sample_rate / (h.hop_length * h.downsample_ratio) * h.bits_per_frame
    print(
        f"encoded {h.original_num_samples} samples into {h.num_latent_frames} "
        f"frames at {_format_bps(bps)} bps -> {args.out}"
    )
    return 0


def cmd_decode(args) -> int:
    model = _load_checkpoint_model(args.model)
    if not Path(args.input).is_file():
        raise DataError(f"stream not found: {args.input}")
    stream = read_bitstream(args.input)
    audio = decode_file(stream, model, ignore_hash=args.ignore_hash)
    write_wav(args.out, audio, stream.header.sample_rate, subtype="float32")
    print(f"decoded {len(audio)} samples -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = _load_checkpoint_model(args.model)
    sr = model.stft_config.sample_rate
    paths = sorted(Path(args.data).glob("*.wav"))
    if not paths:
        raise DataError(f"no WAV files found in {args.data}")
    tools = []
    for item in args.tool:
        name, sep, tool_path = item.partition("=")
        if not sep or not name:
            raise UsageError(f"--tool {item!r} is not of the form NAME=PATH")
        tools.append((name, tool_path))
    rows = []
    for path in paths:
        reference, _ = read_wav(path, expected_sample_rate=sr)
        stream = encode_file(path, model)
        estimate = decode_file(stream, model)
        externals = {
            name: external_metric(name, reference, estimate, tool_path, sr)
            for name, tool_path in tools
        }
        rows.append(FileMetrics(
            path=path.name,
            lsd=lsd(reference, estimate, sr),
            vuv_f1=vuv_f1(reference, estimate, sr),
            externals=externals,
        ))
    spec = model.quantizer.spec
    report = EvalReport(
        files=rows,
        bitrate=bitrate(
            spec, sr, model.stft_config.hop_length, model.config.downsample_factor
        ),
    )
    report.write_csv(args.report)
    print(report.summary())
    print(f"report written to {args.report}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set)
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if not variants or unknown:
        raise UsageError(
            f"--variants must name a subset of {', '.join(ABLATION_VARIANTS)}"
        )
    if not Path(args.data).is_dir():
        raise DataError(f"no such data directory: {args.data}")
    rows = run_ablation(
        variants, cfg.train,
        wav_dir=args.data, steps=args.steps,
        stft_config=cfg.stft, generator_config=cfg.generator,
        codebook_spec=cfg.codebooks, loss_weights=cfg.losses, out_dir=args.out,
    )
    print(format_ablation_table(rows))
    return 0


def cmd_inspect(args) -> int:
    if not Path(args.input).is_file():
        raise DataError(f"stream not found: {args.input}")
    stream = read_bitstream(args.input)
    h = stream.header
    print(f"magic/version: STFC v{h.version}")
    print(f"sample_rate: {h.sample_rate} Hz")
    print(f"hop_length: {h.hop_length}")
    print(f"fft_size: {h.fft_size}")
    print(f"win_length: {h.win_length}")
    print(f"downsample_ratio: {h.downsample_ratio}")
    print(f"codebooks: {len(h.codebook_sizes)} {list(h.codebook_sizes)}")
    print(f"latent_frames: {h.num_latent_frames}")
    print(f"original_samples: {h.original_num_samples}")
    print(f"model_hash: {h.model_hash.hex()}")
    print(f"payload_bytes: {len(stream.payload)}")
    bps = h.sample_rate / (h.hop_length * h.downsample_ratio) * h.bits_per_frame
    print(f"bitrate: {_format_bps(bps)} bps")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"stftcodec: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"stftcodec: config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, AudioFormatError, BitstreamError, FileNotFoundError) as exc:
        print(f"stftcodec: data error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to a distinct code
        print(f"stftcodec: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
