"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 configuration/compatibility/container
error, 3 numeric failure (divergence, gradient-check breach).
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import store
from .adapters import (
    ResAdapterBundle,
    attach_resadapter,
    effective_param_map,
    merge,
    trainable_param_count,
)
from .diffusion import SamplerConfig, ddim_sample
from .errors import ConfigError, ContainerError, NumericError, ShapeError
from .evalbench import ablation_grid, bench_latency, multires_eval, tiled_generate
from .gradcheck import DEFAULT_TOLERANCE, run_suite
from .pgm import write as write_pgm
from .runconfig import RunConfig, load_runconfig
from .trainer import TrainPlan, train_adapter, train_base
from .unet import build_unet, model_fingerprint

__all__ = ["main", "app"]

USAGE_EXIT = 1
CONFIG_EXIT = 2
NUMERIC_EXIT = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _add_parser(subparsers, name: str, **kwargs):
    return subparsers.add_parser(
        name, formatter_class=argparse.ArgumentDefaultsHelpFormatter, **kwargs
    )


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        size = (int(h), int(w))
    except ValueError:
        raise ConfigError(f"size must look like HxW (e.g. 32x32), got {text!r}") from None
    if size[0] < 1 or size[1] < 1:
        raise ConfigError(f"size components must be >= 1, got {text!r}")
    return size


def _load_model_for(args, rc: RunConfig):
    model = store.load_model(args.model)
    if model.config != rc.model:
        raise ConfigError(
            f"checkpoint {args.model} was built with a different model configuration "
            f"than the run configuration supplies; re-point --config or --model"
        )
    return model


def _load_bundle_for(model, path: str, alpha: float | None):
    bundle = store.load_bundle(path)
    if alpha is not None:
        bundle = bundle.with_alpha(alpha)
    fp = model_fingerprint(model)
    if bundle.base_fingerprint and bundle.base_fingerprint != fp:
        raise ConfigError(
            f"adapter bundle {path} records base fingerprint {bundle.base_fingerprint} "
            f"but the model fingerprint is {fp}"
        )
    return bundle


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_train_base(args) -> int:
    rc = load_runconfig(args.config)
    model = build_unet(rc.model, seed=rc.train.seed)
    s = rc.train.standard_resolution
    plan = TrainPlan(
        resolutions=((s, s),),
        standard_resolution=s,
        steps=args.steps if args.steps is not None else rc.train.steps_base,
        phase="base",
        batch_size=rc.train.batch_size,
        lr=rc.train.lr_base,
        adam_beta1=rc.train.adam_beta1,
        adam_beta2=rc.train.adam_beta2,
        seed=rc.train.seed,
        p_uncond=rc.train.p_uncond,
    )
    trace = train_base(model, plan, rc.data.build(), rc.schedule.build())
    store.save_model(model, args.out)
    if args.trace:
        trace.write(args.trace)
    final = trace.records[-1].loss if trace.records else float("nan")
    print(f"trained base model: {plan.steps} steps, final loss {final:.6g}")
    print(f"fingerprint: {model_fingerprint(model)}")
    print(f"saved: {args.out}")
    return 0


def _cmd_train_adapter(args) -> int:
    rc = load_runconfig(args.config)
    model = _load_model_for(args, rc)
    bundle = attach_resadapter(model, rank=rc.train.rank, seed=rc.train.seed)
    plan = TrainPlan(
        resolutions=rc.train.resolutions,
        standard_resolution=rc.train.standard_resolution,
        steps=args.steps if args.steps is not None else rc.train.steps_adapter,
        phase="adapter",
        batch_size=rc.train.batch_size,
        lr=rc.train.lr,
        adam_beta1=rc.train.adam_beta1,
        adam_beta2=rc.train.adam_beta2,
        weight_decay=rc.train.weight_decay,
        seed=rc.train.seed,
        p_uncond=rc.train.p_uncond,
    )
    trace = train_adapter(model, bundle, plan, rc.data.build(), rc.schedule.build())
    bundle = bundle.with_alpha(rc.train.alpha_r)
    store.save_bundle(bundle, args.out)
    if args.trace:
        trace.write(args.trace)
    for note in trace.notes:
        print(f"note: {note}", file=sys.stderr)
    final = trace.records[-1].loss if trace.records else float("nan")
    print(f"trained adapter: {plan.steps} steps, final loss {final:.6g}")
    print(f"trainable parameters: {trainable_param_count(bundle)}")
    print(f"bundle alpha_r: {bundle.alpha_r:g}")
    print(f"saved: {args.out}")
    return 0


def _cmd_sample(args) -> int:
    model = store.load_model(args.model)
    params = None
    if args.adapter:
        bundle = _load_bundle_for(model, args.adapter, args.alpha)
        params = effective_param_map(model, bundle)
    cfg = SamplerConfig(steps=args.steps, guidance_scale=args.guidance,
                        eta=args.eta, seed=args.seed)
    cfg.validate()
    h, w = _parse_size(args.size)
    shape = (1, model.config.in_channels, h, w)
    schedule = load_runconfig(args.config).schedule.build()
    x = ddim_sample(model, shape, cfg, np.array([args.class_id]), schedule, params=params)
    write_pgm(args.out, x.data[0])
    print(f"wrote {args.out} ({h}x{w}, class {args.class_id}, seed {cfg.seed})")
    return 0


def _cmd_merge(args) -> int:
    model = store.load_model(args.model)
    bundle = _load_bundle_for(model, args.adapter, args.alpha)
    merged = merge(model, bundle)
    store.save_model(merged, args.out)
    print(f"merged {len(bundle.conv_loras)} low-rank pairs and "
          f"{len(bundle.norm_deltas)} norm deltas at alpha={bundle.alpha_r:g}")
    print(f"saved: {args.out}")
    return 0


def _cmd_inspect(args) -> int:
    path = args.path or args.file
    if not path:
        raise ConfigError("inspect: give a container path (positional or --file)")
    print(store.inspect(path))
    return 0


def _cmd_gradcheck(args) -> int:
    worst_overall = 0.0
    failures = []
    for i in range(args.seeds):
        seed = args.seed + i
        for name, err in run_suite(seed=seed, step=args.step):
            status = "ok" if err <= args.tolerance else "FAIL"
            print(f"seed {seed}  {name:<28s} {err:.3e}  {status}")
            worst_overall = max(worst_overall, err)
            if err > args.tolerance:
                failures.append((seed, name, err))
    print(f"worst relative error: {worst_overall:.3e} (tolerance {args.tolerance:g})")
    if failures:
        raise NumericError(
            f"gradient check failed for {len(failures)} case(s); "
            f"worst {max(f[2] for f in failures):.3e} > {args.tolerance:g}"
        )
    return 0


def _cmd_eval(args) -> int:
    rc = load_runconfig(args.config)
    model = _load_model_for(args, rc)
    bundle = _load_bundle_for(model, args.adapter, args.alpha) if args.adapter else None
    schedule, dataset = rc.schedule.build(), rc.data.build()
    reports = [multires_eval(
        model, bundle, schedule, dataset, rc.eval.buckets,
        n_batches=rc.eval.n_batches, seed=rc.eval.seed, batch_size=rc.eval.batch_size,
    )]
    if isinstance(bundle, ResAdapterBundle):
        modes = [{"conv_lora"}, {"norm_delta"}, {"conv_lora", "norm_delta"}]
        reports.append(ablation_grid(
            model, bundle, modes, rc.eval.alphas, schedule, dataset, rc.eval.buckets,
            n_batches=rc.eval.n_batches, seed=rc.eval.seed, batch_size=rc.eval.batch_size,
        ))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(r.jsonl() for r in reports) + "\n")
        print(f"wrote {args.out}", file=sys.stderr)
    print("\n\n".join(r.table() for r in reports))
    return 0


def _cmd_bench_tiled(args) -> int:
    model = store.load_model(args.model)
    bundle = _load_bundle_for(model, args.adapter, args.alpha) if args.adapter else None
    rc = load_runconfig(args.config)
    cfg = SamplerConfig(steps=args.steps, guidance_scale=args.guidance,
                        eta=0.0, seed=args.seed)
    cfg.validate()
    result = bench_latency(
        model, bundle, _parse_size(args.target), _parse_size(args.tile), args.overlap,
        cfg, np.array([args.class_id]), rc.schedule.build(), repeats=args.repeats,
    )
    print(f"direct @ {args.target}: {result['direct_ms']:.1f} ms (median of {args.repeats})")
    print(f"tiled  {args.tile} overlap {args.overlap}: {result['tiled_ms']:.1f} ms")
    print(f"ratio (tiled/direct): {result['ratio']:.2f}")
    if args.out:
        h, w = _parse_size(args.tile)
        x = tiled_generate(model, rc.schedule.build(), _parse_size(args.target),
                           (h, w), args.overlap, cfg, np.array([args.class_id]),
                           params=effective_param_map(model, bundle) if bundle else None)
        write_pgm(args.out, x.data[0])
        print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="resolab",
                     description="Desk-scale diffusion lab with resolution adapters.",
                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = _add_parser(sub, "train-base", help="train a base denoiser at the standard resolution")
    p.add_argument("--config", default=None, help="run configuration JSON (defaults if omitted)")
    p.add_argument("--out", required=True, help="output model checkpoint (.rsbm)")
    p.add_argument("--steps", type=int, default=None, help="override train.steps_base")
    p.add_argument("--trace", default=None, help="write per-step loss trace to this path")
    p.set_defaults(fn=_cmd_train_base)

    p = _add_parser(sub, "train-adapter",
                    help="attach and train resolution adapters on a frozen base model")
    p.add_argument("--config", default=None, help="run configuration JSON")
    p.add_argument("--model", required=True, help="base model checkpoint")
    p.add_argument("--out", required=True, help="output adapter bundle (.rsad)")
    p.add_argument("--steps", type=int, default=None, help="override train.steps_adapter")
    p.add_argument("--trace", default=None, help="write per-step loss trace to this path")
    p.set_defaults(fn=_cmd_train_adapter)

    p = _add_parser(sub, "sample", help="draw one image with the deterministic sampler")
    p.add_argument("--config", default=None, help="run configuration JSON")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--adapter", default=None, help="optional adapter bundle")
    p.add_argument("--alpha", type=float, default=None, help="override bundle blend strength")
    p.add_argument("--size", default="16x16", help="output size HxW")
    p.add_argument("--steps", type=int, default=25, help="sampler steps")
    p.add_argument("--guidance", type=float, default=1.0, help="guidance weight")
    p.add_argument("--eta", type=float, default=0.0, help="stochasticity (0 = deterministic)")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--class-id", type=int, default=0, help="class label to condition on")
    p.add_argument("--out", required=True, help="output image (.pgm)")
    p.set_defaults(fn=_cmd_sample)

    p = _add_parser(sub, "merge", help="fold an adapter bundle into a standalone checkpoint")
    p.add_argument("--model", required=True, help="base model checkpoint")
    p.add_argument("--adapter", required=True, help="adapter bundle")
    p.add_argument("--alpha", type=float, default=None, help="override bundle blend strength")
    p.add_argument("--out", required=True, help="output merged checkpoint")
    p.set_defaults(fn=_cmd_merge)

    p = _add_parser(sub, "inspect", help="describe a checkpoint or bundle container")
    p.add_argument("path", nargs="?", default=None, help="container file")
    p.add_argument("--file", default=None, help="container file (alias for the positional)")
    p.set_defaults(fn=_cmd_inspect)

    p = _add_parser(sub, "gradcheck", help="finite-difference audit of every primitive")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds to run")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--step", type=float, default=1e-4, help="finite-difference step")
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE,
                   help="max allowed relative error")
    p.set_defaults(fn=_cmd_gradcheck)

    p = _add_parser(sub, "eval", help="held-out loss per resolution bucket, base vs adapted")
    p.add_argument("--config", default=None, help="run configuration JSON")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--adapter", default=None, help="optional adapter bundle")
    p.add_argument("--alpha", type=float, default=None, help="override bundle blend strength")
    p.add_argument("--out", default=None, help="also write JSONL report here")
    p.set_defaults(fn=_cmd_eval)

    p = _add_parser(sub, "bench-tiled", help="compare direct vs tile-and-blend sampling latency")
    p.add_argument("--config", default=None, help="run configuration JSON")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--adapter", default=None, help="optional adapter bundle")
    p.add_argument("--alpha", type=float, default=None, help="override bundle blend strength")
    p.add_argument("--target", default="32x32", help="full output size HxW")
    p.add_argument("--tile", default="16x16", help="tile size HxW")
    p.add_argument("--overlap", type=int, default=8, help="tile overlap in pixels")
    p.add_argument("--steps", type=int, default=25, help="sampler steps")
    p.add_argument("--guidance", type=float, default=1.0, help="guidance weight")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--repeats", type=int, default=3, help="timing repeats per variant")
    p.add_argument("--class-id", type=int, default=0, help="class label to condition on")
    p.add_argument("--out", default=None, help="optionally write the tiled sample (.pgm)")
    p.set_defaults(fn=_cmd_bench_tiled)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "fn", None):
        parser.print_help(sys.stderr)
        return USAGE_EXIT
    try:
        return args.fn(args)
    except (ConfigError, ContainerError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CONFIG_EXIT
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return NUMERIC_EXIT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CONFIG_EXIT


def app() -> None:
    raise SystemExit(main())
