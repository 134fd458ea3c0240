"""Command-line pipeline: gen | train | synth | metrics | toa | composite.

Every subcommand logs its resolved configuration, writes the same
configuration next to its primary output as a `.config.json` sidecar,
and routes all randomness through a single --seed, so identical
invocations reproduce identical artifacts byte for byte (use --threads 1
for strict determinism of the BLAS reductions).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics as qm
from . import mosaic, raster_io, scenegen, trainer
from .model import ModelConfig, build_model, load_parameters

log = logging.getLogger("swirsynth")


def _limit_threads(n: int) -> None:
    if n < 1:
        raise ValueError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=n)


def _write_sidecar(out_prefix: str, command: str, resolved: dict) -> None:
    path = Path(str(out_prefix) + ".config.json")
    payload = {"command": command, **resolved}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("resolved config: %s", json.dumps(payload, sort_keys=True))


def _parse_size(text: str):
    try:
        m, n = text.lower().split("x")
        return int(m), int(n)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"size must look like 512x512, got {text!r}") from exc


def _parse_triplet(text: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"--bands needs three comma-separated indices, got {text!r}")
    return tuple(int(p) for p in parts)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _merged(file_cfg: dict, **flag_values) -> dict:
    """Config-file values overridden by explicitly supplied flags."""
    merged = dict(file_cfg)
    for key, value in flag_values.items():
        if value is not None:
            merged[key] = value
    return merged


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen(args) -> int:
    defaults = {
        "size": (512, 512),
        "materials": 5,
        "scale": 4,
        "noise": 2.0,
        "smoothness": 8.0,
    }
    cfg_file = _load_config_file(args.config)
    merged = {**defaults, **_merged(
        cfg_file,
        size=args.size,
        materials=args.materials,
        scale=args.scale,
        noise=args.noise,
        smoothness=args.smoothness,
    )}
    size = tuple(merged["size"])
    cfg = scenegen.SceneConfig(
        hr_size=size,
        num_materials=int(merged["materials"]),
        abundance_smoothness=float(merged["smoothness"]),
        noise_sigma=float(merged["noise"]),
        scale_factor=int(merged["scale"]),
        seed=args.seed,
    )
    pair = scenegen.generate_scene(cfg)
    raster_io.write_raster(pair.hr, f"{args.out}_hr")
    raster_io.write_raster(pair.lr, f"{args.out}_lr")
    _write_sidecar(args.out, "gen", {
        "out": args.out,
        "seed": args.seed,
        "size": list(size),
        "materials": cfg.num_materials,
        "scale": cfg.scale_factor,
        "noise": cfg.noise_sigma,
        "smoothness": cfg.abundance_smoothness,
    })
    log.info("wrote %s_hr and %s_lr (%dx%d / %dx%d)", args.out, args.out,
             size[0], size[1], size[0] // cfg.scale_factor, size[1] // cfg.scale_factor)
    return 0


def _cmd_train(args) -> int:
    _limit_threads(args.threads)
    cfg_file = _load_config_file(args.config)
    merged = _merged(
        cfg_file,
        blocks=args.blocks,
        features=args.features,
        epochs=args.epochs,
        patience=args.patience,
        patch=args.patch,
        batch=args.batch,
        crops=args.crops,
        lr=args.lr,
        val_fraction=args.val_fraction,
    )
    blocks = int(merged.get("blocks", 4))
    features = int(merged.get("features", 32))

    tiles = [raster_io.read_raster(p) for p in args.data]
    tcfg = trainer.TrainConfig(
        lr0=float(merged.get("lr", 1e-4)),
        patience=int(merged.get("patience", 5)),
        max_epochs=int(merged.get("epochs", 10000)),
        patch_size=int(merged.get("patch", 32)),
        batch_size=int(merged.get("batch", 128)),
        val_fraction=float(merged.get("val_fraction", 0.2)),
        seed=args.seed,
    )
    dataset = trainer.sample_patch_dataset(
        tiles, int(merged.get("crops", 10000)), tcfg.patch_size,
        seed=args.seed + 1, val_fraction=tcfg.val_fraction,
    )
    mcfg = ModelConfig(num_res_blocks=blocks, feature_size=features, init_seed=args.seed)
    model = build_model(mcfg)

    log_path = Path(str(args.out) + ".log")
    with open(log_path, "w", encoding="utf-8") as stream:
        report, best = trainer.train(model, dataset, tcfg, log_stream=stream)

    ckpt = raster_io.Checkpoint(config=mcfg, params=best)
    raster_io.save_checkpoint(ckpt, args.out)
    _write_sidecar(args.out, "train", {
        "data": list(args.data),
        "out": args.out,
        "seed": args.seed,
        "blocks": blocks,
        "features": features,
        "epochs": tcfg.max_epochs,
        "patience": tcfg.patience,
        "patch": tcfg.patch_size,
        "batch": tcfg.batch_size,
        "crops": int(merged.get("crops", 10000)),
        "lr": tcfg.lr0,
        "val_fraction": tcfg.val_fraction,
        "threads": args.threads,
    })
    log.info("stopped at epoch %d; best val RMSE %.4f (epoch %d)%s",
             report.stopped_epoch, report.best_val_rmse, report.best_epoch,
             " [diverged]" if report.diverged else "")
    return 0


def _cmd_synth(args) -> int:
    _limit_threads(args.threads)
    ckpt = raster_io.load_checkpoint(args.model)
    model = build_model(ckpt.config)
    load_parameters(model, ckpt.params)

    tile = raster_io.read_raster(args.input)
    if tile.meta.bands > 3:
        log.info("input has %d bands; using the first three as (G, R, NIR)", tile.meta.bands)
        meta = tile.meta.replace(
            bands=3,
            band_names=tile.meta.band_names[:3],
            wavelengths_um=tile.meta.wavelengths_um[:3],
            toa=None,
        )
        tile = raster_io.Raster(data=tile.data[:3], meta=meta)

    out = mosaic.synthesize_tile(model, tile, d=args.patch, profile=args.stitch)
    raster_io.write_raster(out, args.out)
    _write_sidecar(args.out, "synth", {
        "model": args.model,
        "in": args.input,
        "out": args.out,
        "patch": args.patch,
        "stitch": args.stitch,
        "threads": args.threads,
    })
    log.info("wrote %s (%dx%d, 1 band)", args.out, out.meta.height, out.meta.width)
    return 0


def _resolve_band(raster, requested, role: str) -> int:
    if requested is not None:
        if not 0 <= requested < raster.meta.bands:
            raise ValueError(f"--{role}-band {requested} out of range")
        return requested
    if raster.meta.bands == 1:
        return 0
    for i, name in enumerate(raster.meta.band_names):
        if name.upper().startswith("SWIR"):
            return i
    return raster.meta.bands - 1


def _cmd_metrics(args) -> int:
    ref = raster_io.read_raster(args.ref)
    test = raster_io.read_raster(args.test)
    ref_band = _resolve_band(ref, args.ref_band, "ref")
    test_band = _resolve_band(test, args.test_band, "test")
    report = qm.metrics_report(
        ref.band(ref_band), test.band(test_band), tol=args.tol, patch=args.patch
    )
    Path(args.out + ".txt").write_text(qm.report_to_text(report), encoding="utf-8")
    Path(args.out + ".json").write_text(qm.report_to_json(report), encoding="utf-8")
    Path(args.out + ".csv").write_text(qm.histogram_to_csv(report), encoding="utf-8")
    _write_sidecar(args.out, "metrics", {
        "ref": args.ref,
        "test": args.test,
        "out": args.out,
        "tol": args.tol,
        "patch": args.patch,
        "ref_band": ref_band,
        "test_band": test_band,
    })
    log.info("metrics: %s", qm.report_to_text(report).replace("\n", " ").strip())
    return 0


def _cmd_toa(args) -> int:
    r = raster_io.read_raster(args.input)
    if r.meta.toa is None:
        raise ValueError(f"{args.input}: manifest has no toa block; cannot convert")
    t = r.meta.toa
    planes = []
    for b in range(r.meta.bands):
        consts = qm.ToaConstants(
            l_sat=t.l_sat[b], esun=t.esun[b],
            sun_elevation_deg=t.sun_elevation_deg, doy=t.doy,
        )
        planes.append(qm.toa_reflectance(r.band(b), consts, bit_depth=r.meta.bit_depth))
    raster_io.write_reflectance(np.stack(planes), r.meta.band_names, args.out)
    _write_sidecar(args.out, "toa", {"in": args.input, "out": args.out})
    log.info("wrote reflectance product %s (%d bands)", args.out, r.meta.bands)
    return 0


def _cmd_composite(args) -> int:
    r = raster_io.read_raster(args.input)
    raster_io.write_composite(r, args.bands, args.out)
    _write_sidecar(args.out, "composite", {
        "in": args.input,
        "bands": list(args.bands),
        "out": args.out,
    })
    log.info("wrote %s", args.out)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swirsynth",
        description="Synthesize a high-resolution SWIR band from G/R/NIR bands.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a paired HR/LR synthetic scene")
    p.add_argument("--out", required=True, help="output path prefix (writes <out>_hr, <out>_lr)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=_parse_size, default=None, help="HR size, e.g. 512x512")
    p.add_argument("--materials", type=int, default=None)
    p.add_argument("--scale", type=int, default=None, help="HR/LR resolution factor")
    p.add_argument("--noise", type=float, default=None, help="DN noise sigma")
    p.add_argument("--smoothness", type=float, default=None, help="abundance blur radius")
    p.add_argument("--config", default=None, help="JSON scene config; flags override")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train the synthesis network on 4-band tiles")
    p.add_argument("--data", nargs="+", required=True, help="raster prefixes with (G,R,NIR,SWIR)")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--blocks", type=int, default=None, help="residual blocks (default 4)")
    p.add_argument("--features", type=int, default=None, help="feature channels (default 32)")
    p.add_argument("--epochs", type=int, default=None, help="max epochs (default 10000)")
    p.add_argument("--patience", type=int, default=None, help="early-stop patience (default 5)")
    p.add_argument("--patch", type=int, default=None, help="patch size (default 32)")
    p.add_argument("--batch", type=int, default=None, help="batch size (default 128)")
    p.add_argument("--crops", type=int, default=None, help="total sampled crops (default 10000)")
    p.add_argument("--lr", type=float, default=None, help="initial learning rate (default 1e-4)")
    p.add_argument("--val-fraction", type=float, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--config", default=None, help="JSON training config; flags override")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("synth", help="synthesize a SWIR tile from a trained model")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--in", dest="input", required=True, help="input raster prefix (G,R,NIR[,...])")
    p.add_argument("--out", required=True, help="output raster prefix")
    p.add_argument("--patch", type=int, default=32)
    p.add_argument("--stitch", choices=("gaussian", "linear", "sigmoid", "naive"),
                   default="gaussian")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("metrics", help="quality metrics between two rasters")
    p.add_argument("--ref", required=True, help="reference raster prefix")
    p.add_argument("--test", required=True, help="test raster prefix")
    p.add_argument("--out", required=True, help="report prefix (writes .txt/.json/.csv)")
    p.add_argument("--tol", type=float, default=5.0)
    p.add_argument("--patch", type=int, default=32, help="variance-histogram patch size")
    p.add_argument("--ref-band", type=int, default=None, help="default: SWIR band if named, else last")
    p.add_argument("--test-band", type=int, default=None)
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("toa", help="convert DN to top-of-atmosphere reflectance")
    p.add_argument("--in", dest="input", required=True, help="input raster prefix")
    p.add_argument("--out", required=True, help="reflectance product prefix")
    p.set_defaults(func=_cmd_toa)

    p = sub.add_parser("composite", help="write an 8-bit P6 composite of three bands")
    p.add_argument("--in", dest="input", required=True, help="input raster prefix")
    p.add_argument("--bands", type=_parse_triplet, required=True, help="e.g. 3,2,1 for FCC")
    p.add_argument("--out", required=True, help="output .ppm path")
    p.set_defaults(func=_cmd_composite)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, raster_io.RasterFormatError,
            raster_io.CheckpointFormatError, trainer.DivergenceError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
