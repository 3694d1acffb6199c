"""``lcanet`` command line.

Exit codes: 0 success, 1 self-test failure, 2 usage/config/input error,
3 numeric failure during training.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import data, evaluation, pnm, selftest, serialize, training
from .config import ConfigError, RunConfig
from .tensor import Tensor, no_grad

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"lcanet: {msg}", file=sys.stderr)


def _load_config(path) -> RunConfig:
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    return config_mod.load(path)


def _config_for_model(model_path, config_path=None) -> RunConfig:
    """The run config given explicitly, else the ``run.cfg`` beside the checkpoint."""
    path = Path(config_path) if config_path else Path(model_path).parent / training.RUN_CONFIG
    if not path.is_file():
        raise UsageError(f"no run config at {path}; pass --config")
    return _load_config(path)


def _load_model(model_path, cfg: RunConfig):
    try:
        return training.load_model(model_path, cfg)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"checkpoint {model_path} does not fit the run config: {exc}") from None


def _require_file(path, what: str) -> None:
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def cmd_gen_data(args) -> int:
    if args.size < 32 or args.size % 32:
        raise UsageError(f"--size must be a positive multiple of 32, got {args.size}")
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    out = data.gen_synthetic(args.out, args.count, args.size, args.seed)
    print(f"wrote {args.count} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.out_dir:
        cfg.out_dir = args.out_dir
    if args.max_iter:
        cfg.optim.max_iter = args.max_iter
    if not Path(cfg.data_dir, "manifest.txt").is_file():
        raise UsageError(f"no dataset at {cfg.data_dir} (missing manifest.txt)")
    try:
        result = training.train(cfg, log=print)
    except training.NumericFailure as exc:
        _err(f"{exc}; last good checkpoint kept in {cfg.out_dir}")
        return EXIT_NUMERIC
    print(f"done: {len(result.rows)} steps in {result.seconds:.1f}s, checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _require_file(Path(args.data, "manifest.txt"), "dataset manifest")
    samples = data.load_dataset(args.data)
    if args.oracle_gt:
        # score the masks against themselves: a check of the metric path only
        report = evaluation.aggregate([s.mask[0] for s in samples], [s.mask[0] for s in samples])
    else:
        if not args.model:
            raise UsageError("--model is required unless --oracle-gt is given")
        _require_file(args.model, "checkpoint")
        cfg = _config_for_model(args.model, args.config)
        model = _load_model(args.model, cfg)
        mean = cfg.augment.mean or data.read_stats(args.data)
        report = evaluation.evaluate_dataset(model, samples, mean, cfg.optim.batch_size,
                                             per_image_f=args.per_image_f)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_json() + "\n")
    print(report.summary())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    names = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [n for n in names if n not in training.VARIANTS]
    if unknown or not names:
        raise UsageError(f"unknown variant(s) {unknown}; valid names: {', '.join(training.VARIANTS)}")
    names = list(dict.fromkeys(names))
    if args.out_dir:
        cfg.out_dir = args.out_dir
    try:
        rows = training.ablate(cfg, names, log=print)
    except training.NumericFailure as exc:
        _err(str(exc))
        return EXIT_NUMERIC
    table = training.format_table(rows)
    print(table, end="")
    if args.out:
        Path(args.out).write_text(table)
    return EXIT_OK


def _to_unit(a: np.ndarray) -> np.ndarray:
    return np.clip(a, 0.0, 1.0)


def cmd_dump_attention(args) -> int:
    _require_file(args.model, "checkpoint")
    _require_file(args.image, "image")
    cfg = _config_for_model(args.model, args.config)
    model = _load_model(args.model, cfg)
    image = pnm.read(args.image)
    if image.ndim != 3:
        raise UsageError(f"{args.image} is not a colour (P6) image")
    if tuple(image.shape[1:]) != tuple(cfg.model.input_size):
        image = data.resize_array(image, *cfg.model.input_size)
    mean = cfg.augment.mean or (0.0, 0.0, 0.0)
    with no_grad():
        out = model(Tensor(data.subtract_mean(image, mean)[None]))
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    written = [dest / "coarse.pgm"]
    pnm.write(written[-1], _to_unit(out.coarse.data[0, 0]))
    if out.refined is not None:
        written.append(dest / "refined.pgm")
        pnm.write(written[-1], _to_unit(out.refined.data[0, 0]))
    if out.attention:
        level = min(lvl for lvl, _ in out.attention)
        for (lvl, scale), amap in sorted(out.attention.items()):
            if lvl == level:
                written.append(dest / f"acf_scale_{scale:g}.pgm")
                pnm.write(written[-1], _to_unit(amap[0, 0]))
    else:
        print("model has no correlation-filter attention; only the prediction maps were written")
    for p in written:
        print(p)
    return EXIT_OK


def cmd_self_test(args) -> int:
    results = selftest.run(seed=args.seed, inject_fault=args.inject_fault)
    print(selftest.format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lcanet", description="Local context attention network, desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=512)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a key=value config")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", help="override out_dir from the config")
    t.add_argument("--max-iter", type=int, help="override optim.max_iter")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint and write a JSON report")
    e.add_argument("--model")
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.add_argument("--config", help="run config (default: run.cfg beside the checkpoint)")
    e.add_argument("--per-image-f", action="store_true", help="average F per image instead of P/R")
    e.add_argument("--oracle-gt", action="store_true", help="score ground truth as the prediction")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare module variants")
    a.add_argument("--config", required=True)
    a.add_argument("--variants", default="coarse,grb,srb,acf")
    a.add_argument("--out-dir")
    a.add_argument("--out", help="also write the table as CSV")
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("dump-attention", help="write prediction and attention maps as PGM")
    d.add_argument("--model", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--config")
    d.set_defaults(func=cmd_dump_attention)

    s = sub.add_parser("self-test", help="run the built-in oracle checks")
    s.add_argument("--inject-fault", action="store_true", help="double every sigmoid gradient")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_self_test)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors already
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError, pnm.PnmError, serialize.FormatError) as exc:
        _err(str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
