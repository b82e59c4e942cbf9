"""``despeckle`` command line: synthesize, train, finetune, despeckle, evaluate, certify."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .certify import certify_independence, gradient_field_map, variance_report, window_minus_center
from .metrics import enl, psnr, read_regions, ssim
from .model import DopamineModel, load_checkpoint, save_checkpoint
from .noise import GammaNoiseModel, extract_patches_many, load_image, sample_noise, save_image
from .train import FinetuneConfig, TrainConfig, finetune, he_init, train_blind, train_supervised

IMAGE_SUFFIXES = (".pgm", ".f32")


class UsageError(Exception):
    """Bad user input; reported without a traceback and exit code 2."""


# ---------------------------------------------------------------- run config

_FT_PREFIX = "finetune_"


def _config_fields() -> dict[str, type]:
    fields = {"num_layers": int, "channels": int, "clean": str, "out": str, "max_patches": int}
    for f in dataclasses.fields(TrainConfig):
        fields[f.name] = type(getattr(TrainConfig(), f.name))
    for f in dataclasses.fields(FinetuneConfig):
        fields[_FT_PREFIX + f.name] = type(getattr(FinetuneConfig(), f.name))
    return fields


FIELDS = _config_fields()
DEFAULTS = {
    "num_layers": 21,
    "channels": 64,
    "clean": "",
    "out": "run",
    "max_patches": 0,
    **dataclasses.asdict(TrainConfig()),
    **{_FT_PREFIX + k: v for k, v in dataclasses.asdict(FinetuneConfig()).items()},
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines with ``#`` comments; returns raw strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve_config(path: str | None, overrides: list[str]) -> dict:
    raw = {}
    if path:
        try:
            raw.update(parse_config_text(Path(path).read_text(), path))
        except OSError as e:
            raise UsageError(f"cannot read config {path}: {e}") from e
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        raw[key] = value
    unknown = sorted(set(raw) - set(FIELDS))
    if unknown:
        raise UsageError("unknown config key(s): " + ", ".join(unknown))
    cfg = dict(DEFAULTS)
    for key, value in raw.items():
        try:
            cfg[key] = FIELDS[key](value)
        except ValueError as e:
            raise UsageError(f"config key {key}: cannot parse {value!r} as {FIELDS[key].__name__}") from e
    return cfg


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**{f.name: cfg[f.name] for f in dataclasses.fields(TrainConfig)})
    except ValueError as e:
        raise UsageError(str(e)) from e


def finetune_config(cfg: dict) -> FinetuneConfig:
    try:
        return FinetuneConfig(**{f.name: cfg[_FT_PREFIX + f.name] for f in dataclasses.fields(FinetuneConfig)})
    except ValueError as e:
        raise UsageError(str(e)) from e


# ---------------------------------------------------------------- helpers


def threads() -> int:
    value = os.environ.get("DESPECKLE_THREADS", "1")
    try:
        n = int(value)
    except ValueError as e:
        raise UsageError(f"DESPECKLE_THREADS must be an integer, got {value!r}") from e
    if n < 1:
        raise UsageError("DESPECKLE_THREADS must be >= 1")
    return n


def _load(path) -> np.ndarray:
    try:
        return load_image(path)
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot read image {path}: {e}") from e


def _load_model(path) -> DopamineModel:
    try:
        return load_checkpoint(path)
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot read checkpoint {path}: {e}") from e


def _image_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"not a directory: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise UsageError(f"no .pgm or .f32 images in {d}")
    return files


def _positive_looks(looks: float) -> float:
    if not looks > 0:
        raise UsageError(f"looks must be positive, got {looks}")
    return looks


def write_csv(target, header, rows) -> None:
    if isinstance(target, (str, Path)):
        with open(target, "w", newline="") as fh:
            write_csv(fh, header, rows)
        return
    w = csv.writer(target, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


def _trace_rows(trace):
    return [(e, repr(float(v)), repr(float(lr))) for e, v, lr in trace]


# ---------------------------------------------------------------- commands


def cmd_synthesize(args) -> int:
    looks = _positive_looks(args.looks)
    files = _image_files(args.input)
    images = [_load(p) for p in files]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def work(item):
        index, (path, image) = item
        seed = args.seed + index
        noisy = image * sample_noise(GammaNoiseModel(looks, seed), image.shape)
        target = out / (path.stem + ".f32")
        save_image(target, noisy)
        return (str(path), str(target), repr(looks), seed)

    with ThreadPoolExecutor(max_workers=threads()) as pool:
        rows = list(pool.map(work, enumerate(zip(files, images))))
    write_csv(out / "manifest.csv", ("clean", "noisy", "looks", "seed"), rows)
    return 0


def _train(args, blind: bool) -> int:
    cfg = resolve_config(args.config, args.set)
    if args.out:
        cfg["out"] = args.out
    tc = train_config(cfg)
    if cfg["num_layers"] < 1 or cfg["channels"] < 1:
        raise UsageError("num_layers and channels must be >= 1")
    if not cfg["clean"]:
        raise UsageError("config key 'clean' (directory of clean images) is required")
    images = [_load(p) for p in _image_files(cfg["clean"])]
    if any(min(im.shape) < tc.patch_size for im in images):
        raise UsageError(f"every clean image must be at least {tc.patch_size}x{tc.patch_size}")
    patches = extract_patches_many(images, tc.patch_size, tc.stride).patches
    if cfg["max_patches"] > 0:
        patches = patches[: cfg["max_patches"]]
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    model = he_init(DopamineModel(cfg["num_layers"], cfg["channels"]), tc.seed)
    result = (train_blind if blind else train_supervised)(model, patches, tc)
    save_checkpoint(out / "model.dpmn", result.model)
    write_csv(out / "loss.csv", ("epoch", "loss", "lr"), _trace_rows(result.trace))
    return 0


def cmd_train(args) -> int:
    return _train(args, blind=False)


def cmd_train_blind(args) -> int:
    return _train(args, blind=True)


def cmd_finetune(args) -> int:
    looks = _positive_looks(args.looks)
    cfg = resolve_config(args.config, args.set)
    if args.mode:
        cfg[_FT_PREFIX + "mode"] = args.mode
    fc = finetune_config(cfg)
    model = _load_model(args.model)
    z = _load(args.image)
    if min(z.shape) < 3:
        raise UsageError("image must be at least 3x3")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config({**cfg, "looks": looks}))
    tuned, trace = finetune(model, z, 1.0 / looks, fc)
    f = tuned.forward(z)
    xhat = f.a * z + f.b
    save_checkpoint(out / "model.dpmn", tuned)
    save_image(out / "despeckled.f32", xhat)
    save_image(out / "despeckled.pgm", xhat, clip=True)
    save_image(out / "a.f32", f.a)
    save_image(out / "b.f32", f.b)
    write_csv(out / "loss.csv", ("epoch", "loss", "lr"), _trace_rows(trace))
    return 0


def cmd_despeckle(args) -> int:
    model = _load_model(args.model)
    z = _load(args.image)
    if min(z.shape) < 3:
        raise UsageError(f"image must be at least 3x3, got {z.shape[0]}x{z.shape[1]}")
    target = Path(args.out)
    if target.suffix.lower() == ".pgm" and not args.clip:
        raise UsageError("8-bit .pgm output needs --clip")
    f = model.forward(z)
    xhat = f.a * z + f.b
    if args.clip:
        xhat = np.clip(xhat, 0.0, 1.0)
    target.parent.mkdir(parents=True, exist_ok=True)
    save_image(target, xhat, clip=args.clip)
    if args.fields:
        d = Path(args.fields)
        d.mkdir(parents=True, exist_ok=True)
        save_image(d / "a.f32", f.a)
        save_image(d / "b.f32", f.b)
    return 0


def cmd_evaluate(args) -> int:
    metrics = [m.strip().lower() for m in args.metrics.split(",") if m.strip()]
    bad = sorted(set(metrics) - {"psnr", "ssim", "enl"})
    if bad or not metrics:
        raise UsageError("unknown metric(s): " + ", ".join(bad or ["<none>"]))
    if {"psnr", "ssim"} & set(metrics) and not args.clean:
        raise UsageError("psnr/ssim need --clean")
    if "enl" in metrics and not args.regions:
        raise UsageError("enl needs --regions")
    clean = _load(args.clean) if args.clean else None
    try:
        regions = read_regions(args.regions) if args.regions else None
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot read regions: {e}") from e
    tests = [(p, _load(p)) for p in args.test]
    for p, img in tests:
        if clean is not None and img.shape != clean.shape:
            raise UsageError(f"{p}: shape {img.shape} differs from clean {clean.shape}")
    if args.clip:
        tests = [(p, np.clip(img, 0.0, 1.0)) for p, img in tests]

    def work(item):
        path, img = item
        rows = []
        for m in metrics:
            if m == "psnr":
                rows.append((str(path), "psnr", "", repr(psnr(clean, img))))
            elif m == "ssim":
                rows.append((str(path), "ssim", "", repr(ssim(clean, img))))
            else:
                values, avg = enl(img, regions)
                rows.extend((str(path), "enl", str(i), repr(v)) for i, v in enumerate(values))
                rows.append((str(path), "enl", "mean", repr(avg)))
        return rows

    try:
        with ThreadPoolExecutor(max_workers=threads()) as pool:
            rows = [r for chunk in pool.map(work, tests) for r in chunk]
    except ValueError as e:
        raise UsageError(str(e)) from e
    buf = io.StringIO()
    write_csv(buf, ("image", "metric", "region", "value"), rows)
    sys.stdout.write(buf.getvalue())
    return 0


def cmd_certify(args) -> int:
    model = _load_model(args.model)
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    report = certify_independence(
        model, args.size, args.size, args.trials, args.seed,
        probe_layers=True, use_model_weights=args.model_weights,
    )
    rf = gradient_field_map(model, seed=args.seed, draws=8, reinit=not args.model_weights)
    side = rf.shape[0]
    rf_ok = bool(np.array_equal(rf, window_minus_center(rf.shape, (side // 2, side // 2), model.num_layers)))
    rows = [("independence", f"{report.passed}/{report.trials}", "PASS" if report.ok else "FAIL")]
    rows += [("violation", f"trial={v.trial} pixel={v.pixel} delta={v.delta}", v.stage) for v in report.violations]
    w = 2 * model.num_layers + 1
    rows.append(("receptive_field", f"{w}x{w} minus center", "PASS" if rf_ok else "FAIL"))
    write_csv(sys.stdout, ("check", "detail", "result"), rows)
    return 0 if report.ok and rf_ok else 1


def cmd_variance_report(args) -> int:
    if args.layers < 1 or args.channels < 1 or args.repeats < 1:
        raise UsageError("--layers, --channels and --repeats must be >= 1")
    modes = ["sa", "add"] if args.mode == "both" else [args.mode]
    columns = {m: variance_report(args.layers, args.channels, m, args.size, args.seed, args.repeats) for m in modes}
    rows = [(l + 1, *(repr(columns[m][l]) for m in modes)) for l in range(args.layers)]
    write_csv(sys.stdout, ("layer", *modes), rows)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="despeckle", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthesize", help="add Gamma speckle to every image in a directory")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--looks", type=float, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synthesize)

    for name, func in (("train", cmd_train), ("train-blind", cmd_train_blind)):
        s = sub.add_parser(name, help="train from clean images (see config keys in README)")
        s.add_argument("--config")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        s.add_argument("--out")
        s.set_defaults(func=func)

    s = sub.add_parser("finetune", help="adapt a model to one noisy image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--looks", type=float, required=True)
    s.add_argument("--mode", choices=("ft", "aft"))
    s.add_argument("--config")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("despeckle", help="apply a model to one noisy image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--clip", action="store_true")
    s.add_argument("--fields", help="directory for a.f32 and b.f32 dumps")
    s.set_defaults(func=cmd_despeckle)

    s = sub.add_parser("evaluate", help="PSNR/SSIM against a reference or ENL over regions")
    s.add_argument("--clean")
    s.add_argument("--test", required=True, nargs="+")
    s.add_argument("--regions")
    s.add_argument("--metrics", default="psnr,ssim")
    s.add_argument("--clip", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("certify", help="check pixel independence and the receptive field")
    s.add_argument("--model", required=True)
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--model-weights", action="store_true", help="probe the checkpoint weights instead of random He draws")
    s.set_defaults(func=cmd_certify)

    s = sub.add_parser("variance-report", help="per-layer activation variance at initialization")
    s.add_argument("--layers", type=int, default=21)
    s.add_argument("--channels", type=int, default=64)
    s.add_argument("--mode", choices=("sa", "add", "both"), default="both")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--repeats", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_variance_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        threads()
        return args.func(args)
    except UsageError as e:
        print(f"despeckle {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
