"""fieldgen command line: gen-data, train, sample and eval.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .boundary import BoundarySample, SourceGeometrySpec, boundary_inputs, condition_tensor
from .checkpoint import load_checkpoint
from .config import RunConfig, SampleConfig, build_config, load_config
from .dataset import generate_dataset, load_dataset, read_sample
from .diffusion import build_schedule, sample
from .errors import (
    ConfigError,
    CorruptionError,
    DimensionError,
    FormatError,
    GeometryError,
    NumericError,
    ParameterError,
    SplitError,
)
from .training import evaluate, model_from_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _override(cfg: RunConfig, section: str, **values) -> RunConfig:
    """Rebuild ``cfg`` with fields of one section replaced (None values are skipped)."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    data = cfg.model_dump(mode="json")
    data[section].update(values)
    return build_config(data)


def _source(text: str) -> tuple[int, int, int, int]:
    try:
        x, y, w, h = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("expected x,y,w,h integers") from exc
    return x, y, w, h


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def write_ppm(image: np.ndarray, path: str | Path) -> None:
    """Binary PPM of a (3, H, W) image in [0, 1]."""
    rgb = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def _sample_config(cfg: RunConfig, args) -> SampleConfig:
    return _override(cfg, "sample", steps=args.steps, guidance=args.guidance, seed=args.seed).sample


def cmd_gen_data(args) -> int:
    cfg = _override(load_config(args.config), "dataset", seed=args.seed, n_samples=args.n)
    manifest = generate_dataset(cfg.dataset, args.out)
    _log(f"wrote {manifest.count} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _override(load_config(args.config), "train", seed=args.seed)
    result = train(cfg, args.data, args.out, resume=args.resume, log=_log)
    _log(f"final checkpoint {result.final_checkpoint}")
    return EXIT_OK


def cmd_sample(args) -> int:
    model, cfg = model_from_checkpoint(load_checkpoint(args.checkpoint))
    scfg = _sample_config(cfg, args)
    ds = cfg.dataset
    if args.sample is not None:
        rec: BoundarySample = read_sample(args.sample)
        cond = condition_tensor(rec.sketch, rec.edge, rec.spatial_ref)
        source = rec.geometry.to_dict()
    elif args.source is not None:
        x, y, w, h = args.source
        geom = SourceGeometrySpec(x, y, w, h)
        geom.check_inside(ds.height, ds.width)
        sketch, edge, ref = boundary_inputs(geom, ds.height, ds.width, (ds.canny_sigma, ds.canny_lo, ds.canny_hi))
        cond = condition_tensor(sketch, edge, ref)
        source = geom.to_dict()
    else:
        raise ConfigError("sample needs --sample <record> or --source x,y,w,h")
    if cond.shape[1:] != (ds.height, ds.width):
        raise DimensionError(f"condition is {cond.shape[1:]}, checkpoint expects {(ds.height, ds.width)}")
    field = sample(cond, scfg, model, build_schedule(cfg.train.timesteps))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.save(out.with_suffix(".npy"), field)
    write_ppm(field, out.with_suffix(".ppm"))
    sidecar = {
        "checkpoint": str(args.checkpoint),
        "steps": scfg.steps,
        "guidance": scfg.guidance,
        "seed": scfg.seed,
        "source": source,
        "sha256": hashlib.sha256(np.ascontiguousarray(field).tobytes()).hexdigest(),
    }
    out.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    _log(f"wrote {out.with_suffix('.ppm')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg = model_from_checkpoint(load_checkpoint(args.checkpoint))
    scfg = _sample_config(cfg, args)
    _, held = load_dataset(args.data, "heldout")
    n = cfg.train.n_eval if args.n is None else args.n
    held = held[:n]
    if not held:
        raise ConfigError("the held-out split is empty")
    report = evaluate(
        model, held, scfg, build_schedule(cfg.train.timesteps), cfg.train.eval_batch_size, args.ground_truth
    )
    report.write_csv(args.out)
    _log(f"wrote {len(held)} rows to {args.out}: ssim {report.mean('ssim'):.4f} mse {report.mean('mse'):.5f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fieldgen", description="Boundary-conditioned field generation.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="simulate a dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=_u64)
    g.add_argument("--n", type=int, help="number of samples")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a dataset")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--seed", type=_u64)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("sample", cmd_sample, "generate one field"), ("eval", cmd_eval, "score held-out cases")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", help="unused; settings come from the checkpoint")
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--seed", type=_u64)
        s.add_argument("--steps", type=int)
        s.add_argument("--guidance", type=float)
        s.set_defaults(func=func)
        if name == "sample":
            s.add_argument("--sample", help="dataset record to take the boundary inputs from")
            s.add_argument("--source", type=_source, help="source rectangle x,y,w,h")
        else:
            s.add_argument("--data", required=True)
            s.add_argument("--n", type=int)
            s.add_argument("--ground-truth", action="store_true", help="score targets against themselves")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except (CorruptionError, FormatError, SplitError, GeometryError, DimensionError, OSError) as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA
    except NumericError as exc:
        _log(f"numeric failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
