"""Command-line interface.

Subcommands: synth, train, derain, eval, gradcheck, params, histcheck.
Every command is deterministic given its flags and seed, writes a resolved
config plus provenance record into its output directory, and exits non-zero
when its contract is not met.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import ops
from .checkpoint import config_from_meta, load_checkpoint, load_model_params
from .config import load_run_config, serialize_run_config, write_run_info
from .data import (
    RainParams,
    SamplePair,
    add_rain,
    hist_correlation,
    hwc_to_nchw,
    load_dataset,
    load_png,
    nchw_to_hwc,
    save_png,
    synth_clean,
    write_dataset,
    y_histogram,
)
from .gradcheck import gradcheck
from .model import DerainModel, param_breakdown, variant_config
from .tensor import EngineError, Tensor
from .train import evaluate, train

# kinds used for generated datasets: content with structured, natural-image
# like luminance statistics. Pure ramps (flat histogram) and checkerboards
# (two-spike histogram that aliases under downsampling) remain available
# through synth_clean but are degenerate for distribution analyses.
SYNTH_KIND_CYCLE = ("blobs", "mixed")


def _parse_rain(items, seed: int) -> RainParams:
    kwargs = {"rng_seed": seed}
    key_map = {
        "streaks": "streak_density",
        "angle": "angle_deg",
        "length": "length_px",
        "width": "width_px",
        "intensity": "intensity",
    }
    for item in items or []:
        if "=" not in item:
            raise EngineError(f"--rain expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        if key not in key_map:
            raise EngineError(f"--rain: unknown key {key!r} (expected {', '.join(key_map)})")
        field = key_map[key]
        if field == "streak_density":
            kwargs[field] = float(raw)
        else:
            parts = [float(p) for p in raw.split(",")]
            kwargs[field] = (parts[0], parts[-1]) if len(parts) > 1 else (parts[0], parts[0])
    return RainParams(**kwargs)


def make_pairs(count: int, size: int, seed: int, rain: RainParams) -> list[SamplePair]:
    pairs = []
    for i in range(count):
        kind = SYNTH_KIND_CYCLE[i % len(SYNTH_KIND_CYCLE)]
        clean = synth_clean(kind, size, seed + i)
        rp = dataclasses.replace(rain, rng_seed=rain.rng_seed + 1000 + i)
        pairs.append(add_rain(clean, rp, sample_id=f"{kind}_{seed + i:04d}"))
    return pairs


def cmd_synth(args) -> int:
    rain = _parse_rain(args.rain, args.seed)
    pairs = make_pairs(args.count, args.size, args.seed, rain)
    write_dataset(pairs, args.out)
    write_run_info(args.out, "synth", args.seed)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def cmd_train(args) -> int:
    rc = load_run_config(args.config, args.set or [])
    pairs = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(serialize_run_config(rc), encoding="utf-8")
    write_run_info(out, "train", rc.train.seed)
    model = DerainModel(rc.model, seed=rc.train.seed)
    result = train(model, pairs, rc.train, rc.optim, out_dir=out)
    print(f"trained {result.steps_run} steps; "
          f"final loss {result.curve[-1].loss_total:.6f}; "
          f"checkpoint {result.checkpoint_path}")
    return 0


def _load_model(ckpt_path) -> DerainModel:
    state = load_checkpoint(ckpt_path)
    cfg = config_from_meta(state)
    model = DerainModel(cfg, seed=0)
    load_model_params(model, state)
    return model


def cmd_derain(args) -> int:
    model = _load_model(args.ckpt)
    in_path = Path(args.input)
    if in_path.is_dir():
        files = sorted(in_path.glob("*.png"))
        if not files:
            raise EngineError(f"no PNG files in {in_path}")
    else:
        files = [in_path]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_run_info(out, "derain", 0)
    for f in files:
        img = load_png(f)
        x = Tensor(hwc_to_nchw(img))
        outputs = model(x)
        exported = outputs.export_images()
        save_png(nchw_to_hwc(exported["derained"]), out / f"{f.stem}_derained.png")
        if args.dump_intermediates:
            rain, derained_sub = outputs.export_decomposition()
            np.save(out / f"{f.stem}_rain_sub.npy", rain)
            np.save(out / f"{f.stem}_derained_sub.npy", derained_sub)
            np.save(out / f"{f.stem}_rainy_sub.npy", outputs.rainy_sub.data)
            save_png(_viz(rain), out / f"{f.stem}_rain_sub.png")
            save_png(_viz(derained_sub), out / f"{f.stem}_derained_sub.png")
    print(f"derained {len(files)} image(s) into {out}")
    return 0


def _viz(nchw: np.ndarray) -> np.ndarray:
    """Per-channel min-max rescale to the displayable range for inspection dumps."""
    img = nchw_to_hwc(nchw).astype(np.float64)
    lo = img.min(axis=(0, 1), keepdims=True)
    hi = img.max(axis=(0, 1), keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (img - lo) / span


def cmd_eval(args) -> int:
    model = _load_model(args.ckpt)
    pairs = load_dataset(args.data)
    report = evaluate(model, pairs)
    sys.stdout.write(report.to_csv())
    sys.stdout.write(f"# mean_psnr={report.mean_psnr:.4f} mean_ssim={report.mean_ssim:.6f}\n")
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck(scope=args.scope)
    for line in report.lines():
        print(line)
    print(f"max rel err {report.max_rel_err:.3e}; {'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else 1


def cmd_params(args) -> int:
    cfg = variant_config(args.variant)
    breakdown = param_breakdown(cfg)
    total = sum(breakdown.values())
    print(f"variant {args.variant}: {total:,} parameters ({total / 1e6:.3f}M)")
    for name, n in sorted(breakdown.items(), key=lambda kv: -kv[1]):
        print(f"  {name:<12} {n:>10,}  ({100.0 * n / total:.1f}%)")
    return 0


def cmd_histcheck(args) -> int:
    pairs = load_dataset(args.data)
    s = args.factor
    corrs = []
    for pair in pairs:
        x = Tensor(hwc_to_nchw(pair.rainy))
        down = ops.bilinear_resize(x, scale=1.0 / s)
        recon = ops.bilinear_resize(down, scale=float(s))
        h_orig = y_histogram(pair.rainy)
        h_recon = y_histogram(nchw_to_hwc(recon.data))
        corr = hist_correlation(h_orig, h_recon)
        corrs.append(corr)
        print(f"{pair.sample_id}\t{corr:.4f}")
    mean = float(np.mean(corrs))
    lo = float(np.min(corrs))
    ok = mean >= 0.9 and lo >= 0.85
    print(f"# mean={mean:.4f} min={lo:.4f} n={len(corrs)} -> {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elf-derain",
                                description="Two-stage rain streak removal toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic rainy/clean dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--rain", action="append", metavar="KEY=VAL",
                    help="rain overrides: streaks, angle, length, width, intensity")
    sp.set_defaults(fn=cmd_synth)

    tp = sub.add_parser("train", help="train a model on a dataset directory")
    tp.add_argument("--config", default=None)
    tp.add_argument("--data", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--set", action="append", metavar="SECTION.KEY=VAL",
                    help="override a config value")
    tp.set_defaults(fn=cmd_train)

    dp = sub.add_parser("derain", help="run inference on an image or directory")
    dp.add_argument("--ckpt", required=True)
    dp.add_argument("--in", dest="input", required=True)
    dp.add_argument("--out", required=True)
    dp.add_argument("--dump-intermediates", action="store_true")
    dp.set_defaults(fn=cmd_derain)

    ep = sub.add_parser("eval", help="PSNR/SSIM metrics over a dataset")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--data", required=True)
    ep.set_defaults(fn=cmd_eval)

    gp = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gp.add_argument("--scope", default="all")
    gp.set_defaults(fn=cmd_gradcheck)

    pp = sub.add_parser("params", help="parameter count and per-module breakdown")
    pp.add_argument("--variant", choices=["ELF", "ELF-LW", "desk"], required=True)
    pp.set_defaults(fn=cmd_params)

    hp = sub.add_parser("histcheck", help="luma histogram consistency of down-up resampling")
    hp.add_argument("--data", required=True)
    hp.add_argument("--factor", type=int, default=2)
    hp.set_defaults(fn=cmd_histcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
