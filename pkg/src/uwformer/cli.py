"""Command-line entry point: ``uwformer {init,train,enhance,eval,metrics}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .blocks import ConfigError
from .io import CheckpointError, DecodeError, list_images, load_image, save_image
from .metrics import MetricReport, report
from .model import ModelConfig, build, count_params, enhance
from .trainer import (
    DataError,
    NumericError,
    TrainConfig,
    TrainConfigError,
    load_model,
    save_model,
    train_loop,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CSV_COLUMNS = ("path", "psnr", "ssim", "spl", "uciqe", "uiqm")

logger = logging.getLogger("uwformer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_config(path) -> TrainConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})")
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    try:
        return TrainConfig.from_dict(doc)
    except (TrainConfigError, ConfigError, TypeError) as exc:
        raise UsageError(f"{path}: {exc}")


def _fmt(v) -> str:
    return "" if v is None else "%.6f" % v


def _write_csv(rows: list[tuple[str, MetricReport]], out) -> None:
    stream = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for path, rep in rows:
            w.writerow([path, _fmt(rep.psnr), _fmt(rep.ssim), _fmt(rep.spl),
                        _fmt(rep.uciqe), _fmt(rep.uiqm)])
    finally:
        if out:
            stream.close()


def _images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"{d}: not a directory")
    paths = list_images(d)
    if not paths:
        raise DataError(f"{d}: no .ppm images found")
    return paths


def _crop(t, size) -> np.ndarray:
    h, w = size
    return t.data[:, :h, :w]


def cmd_init(args) -> int:
    config = _read_config(args.config)
    params = build(config.model, config.seed)
    save_model(args.out, params, config.model)
    print(f"{args.out}: {count_params(config.model)} parameters")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _read_config(args.config)
    train_loop(args.labeled, args.unlabeled, config, args.out, args.log)
    return EXIT_OK


def cmd_enhance(args) -> int:
    params, config = load_model(args.ckpt)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in _images(args.inp):
        img, size = load_image(path)
        result = enhance(img.data[None], params, config)[0]
        if not np.all(np.isfinite(result)):
            raise NumericError(f"{path}: non-finite output")
        save_image(result, out_dir / path.name, size)
    return EXIT_OK


def _reference(target_dir: Path, path: Path) -> np.ndarray:
    ref = target_dir / path.name
    if not ref.exists():
        raise DataError(f"missing reference for {path}: {ref}")
    img, size = load_image(ref)
    return _crop(img, size)


def cmd_eval(args) -> int:
    params, config = load_model(args.ckpt)
    target = Path(args.target)
    rows = []
    for path in _images(args.inp):
        img, size = load_image(path)
        out = enhance(img.data[None], params, config)[0][:, :size[0], :size[1]]
        rows.append((path.name, report(out, _reference(target, path))))
    _write_csv(rows, args.csv)
    return EXIT_OK


def cmd_metrics(args) -> int:
    target = Path(args.target) if args.target else None
    rows = []
    for path in _images(args.inp):
        img, size = load_image(path)
        ref = _reference(target, path) if target else None
        rows.append((path.name, report(_crop(img, size), ref)))
    _write_csv(rows, args.csv)
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uwformer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("init", help="write a freshly initialised checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("train", help="semi-supervised training")
    s.add_argument("--config", required=True)
    s.add_argument("--labeled", required=True)
    s.add_argument("--unlabeled")
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="per-epoch CSV log (default: <out>.log.csv)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("enhance", help="run a checkpoint over a directory")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("eval", help="full-reference evaluation of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--csv", help="write CSV here instead of stdout")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("metrics", help="image quality report without a model")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--target")
    s.add_argument("--csv", help="write CSV here instead of stdout")
    s.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DecodeError, CheckpointError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
