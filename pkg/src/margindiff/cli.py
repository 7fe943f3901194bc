"""Command-line interface.

Every subcommand accepts ``--config file.json`` whose keys are option names
(``steps``, ``hidden_width``, ...); explicit flags override the file. Each run
writes ``run.json`` into ``--out`` with the fully resolved options, which can
be passed back through ``--config`` to repeat the run.

Exit codes: 0 success, 1 training failure, 2 configuration error,
3 data or file-format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import harness
from .classifier import EvalPlan, classify_batch, metrics_from_predictions
from .dataset import (BLUR_KERNEL_DESK, BLUR_SIGMAS_DESK, NOISE_SIGMAS, CorruptionSpec, gen_synthetic,
                      load_dataset, save_dataset)
from .denoiser import Architecture, Condition, init_network, load_checkpoint
from .errors import ArgumentError, ConfigError, DataError, MarginDiffError, TrainingError
from .objectives import DEFAULT_ALPHA, DEFAULT_LAMBDA1, DEFAULT_MARGIN, LossConfig, Objective
from .sampler import SamplerConfig, ddpm_sample
from .schedule import DEFAULT_BETA_END, DEFAULT_BETA_START, DESK_T, build_linear_schedule
from .trainer import TrainConfig, train

EXIT_OK, EXIT_TRAINING, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3
PER_SAMPLE_FIXED = ("sample_id", "true_label", "predicted")

log = logging.getLogger("margindiff")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _int_list(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _shared(p):
    p.add_argument("--config", help="JSON file of option defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory")
    p.add_argument("--checkpoint", help=".dcp checkpoint")
    p.add_argument("--dataset", help=".dds dataset")


def _objective_flags(p):
    p.add_argument("--objective", choices=[o.value for o in Objective], default="base")
    p.add_argument("--lambda1", type=float, default=DEFAULT_LAMBDA1)
    p.add_argument("--margin", type=float, default=DEFAULT_MARGIN)
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p.add_argument("--nn-prompt", choices=["positive", "nonclass", "null"], default="positive")
    p.add_argument("--add-base-weight", type=float, default=0.0)
    p.add_argument("--stop-grad-nn", action="store_true")


def _train_flags(p):
    defaults = TrainConfig()
    arch = Architecture(8, 8, 1, 2)
    p.add_argument("--steps", type=int, default=defaults.steps)
    p.add_argument("--batch-size", type=int, default=defaults.batch_size)
    p.add_argument("--lr", type=float, default=defaults.learning_rate)
    p.add_argument("--weight-decay", type=float, default=defaults.weight_decay)
    p.add_argument("--grad-clip", type=float, default=defaults.grad_clip_norm)
    p.add_argument("--uncond-prob", type=float, default=defaults.uncond_prob)
    p.add_argument("--hflip", action="store_true")
    p.add_argument("--hidden-width", type=int, default=arch.hidden_width)
    p.add_argument("--time-dim", type=int, default=arch.time_dim)
    p.add_argument("--cond-dim", type=int, default=arch.cond_dim)
    p.add_argument("--T", type=int, default=DESK_T, dest="T")
    p.add_argument("--beta-start", type=float, default=DEFAULT_BETA_START)
    p.add_argument("--beta-end", type=float, default=DEFAULT_BETA_END)
    p.add_argument("--init-seed", type=int, help="network initialization seed (default: --seed)")


def _plan_flags(p, size=10):
    p.add_argument("--plan-size", type=int, default=size, help="number of evaluation timesteps")
    p.add_argument("--landmark", type=int, help="timestep for 1-step plans")
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--no-share-noise", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="margindiff", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic glyph dataset")
    _shared(p)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--jitter", type=float, default=0.2)
    p.add_argument("--split", default="train")

    p = sub.add_parser("train", help="train a denoiser")
    _shared(p)
    _objective_flags(p)
    _train_flags(p)
    p.add_argument("--checkpoint-every", type=int, default=0)

    for name, text in (("classify", "per-sample predictions"), ("eval", "accuracy summary")):
        p = sub.add_parser(name, help=text)
        _shared(p)
        _plan_flags(p)
        if name == "classify":
            p.add_argument("--indices", type=_int_list, help="comma-separated sample indices")

    p = sub.add_parser("sweep", help="accuracy per evaluation plan size")
    _shared(p)
    _plan_flags(p)
    p.add_argument("--sizes", type=_int_list, default=[1, 10, 100])

    p = sub.add_parser("robustness", help="accuracy under a corruption sweep")
    _shared(p)
    _plan_flags(p)
    p.add_argument("--kind", choices=["noise", "blur"], default="noise")
    p.add_argument("--sigmas", type=_float_list, help="corruption strengths (default: desk grid)")
    p.add_argument("--kernel-size", type=int, default=BLUR_KERNEL_DESK)
    p.add_argument("--corruption-seed", type=int, default=0)

    p = sub.add_parser("correlate", help="error correlation between prompt types")
    _shared(p)
    _plan_flags(p)
    p.add_argument("--n-samples", type=int, default=harness.DEFAULT_CORRELATION_SAMPLES)
    p.add_argument("--subset-seed", type=int, default=0)

    p = sub.add_parser("compare", help="train and compare objectives over seeds")
    _shared(p)
    _objective_flags(p)
    _train_flags(p)
    p.add_argument("--eval-dataset")
    p.add_argument("--objectives", type=_str_list, default=["base", "amdit"])
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--sizes", type=_int_list, default=[1, 10])
    p.add_argument("--noise-seed", type=int, default=0)

    p = sub.add_parser("sample", help="generate images with classifier-free guidance")
    _shared(p)
    p.add_argument("--cond", default="0", help="class index, 'nonclass' or 'null'")
    p.add_argument("--cfg-scale", type=float, default=3.0)
    p.add_argument("--n", type=int, default=1)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    """Parse ``argv``, applying ``--config`` defaults beneath explicit flags."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
        values.pop("command", None)
        values.pop("config", None)
        unknown = sorted(set(values) - set(vars(args)))
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def _snapshot(args, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    doc = {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _need(args, *names):
    for name in names:
        if not getattr(args, name):
            raise ConfigError(f"--{name.replace('_', '-')} is required for {args.command}")


def _load_data(path):
    try:
        return load_dataset(path)
    except (FileNotFoundError, IsADirectoryError):
        raise DataError(f"dataset not found: {path}") from None


def _load_model(path):
    try:
        return load_checkpoint(path)
    except (FileNotFoundError, IsADirectoryError):
        raise DataError(f"checkpoint not found: {path}") from None


def _check_fit(ck, ds):
    if ds.image_shape != ck.net.arch.image_shape:
        raise DataError(f"dataset images {ds.image_shape} do not match checkpoint {ck.net.arch.image_shape}")
    if ds.K != ck.net.K:
        raise DataError(f"dataset has K={ds.K} classes, checkpoint has K={ck.net.K}")


def _model_and_data(args):
    _need(args, "checkpoint", "dataset")
    ck = _load_model(args.checkpoint)
    ds = _load_data(args.dataset)
    _check_fit(ck, ds)
    return ck, ds


def _loss(args) -> LossConfig:
    return LossConfig(args.objective, lambda1=args.lambda1, margin_fixed=args.margin, alpha=args.alpha,
                      nn_variant=args.nn_prompt, add_base_weight=args.add_base_weight,
                      stop_grad_nn=args.stop_grad_nn)


def _train_config(args) -> TrainConfig:
    return TrainConfig(steps=args.steps, batch_size=args.batch_size, learning_rate=args.lr,
                       weight_decay=args.weight_decay, grad_clip_norm=args.grad_clip, seed=args.seed,
                       loss=_loss(args), uncond_prob=args.uncond_prob, hflip=args.hflip)


def _arch(args, ds) -> Architecture:
    H, W, C = ds.image_shape
    return Architecture(H=H, W=W, C=C, K=ds.K, hidden_width=args.hidden_width, time_dim=args.time_dim,
                        cond_dim=args.cond_dim, T=args.T)


def _plan(args, ck) -> EvalPlan:
    loss = ck.header.get("loss") or {}
    return EvalPlan.uniform(args.plan_size, ck.schedule.T, loss.get("objective", "base"),
                            landmark=args.landmark, noise_seed=args.noise_seed,
                            share_noise=not args.no_share_noise, repeats=args.repeats)


def _print(doc):
    print(json.dumps(harness._jsonable(doc), indent=2, sort_keys=True))


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args):
    _need(args, "out")
    ds = gen_synthetic(K=args.classes, per_class=args.per_class, H=args.height, W=args.width,
                       jitter=args.jitter, seed=args.seed, C=args.channels, split=args.split)
    out = Path(args.out)
    _snapshot(args, out)
    path = save_dataset(ds, out / f"{args.split}.dds")
    _print({"dataset": str(path), "N": len(ds), "K": ds.K, "shape": list(ds.image_shape)})


def cmd_train(args):
    _need(args, "dataset", "out")
    ds = _load_data(args.dataset)
    cfg = _train_config(args)
    if args.checkpoint:
        ck = _load_model(args.checkpoint)
        _check_fit(ck, ds)
        net, schedule = ck.net, ck.schedule
    else:
        schedule = build_linear_schedule(args.T, args.beta_start, args.beta_end)
        seed = args.seed if args.init_seed is None else args.init_seed
        net = init_network(_arch(args, ds), seed)
    out = Path(args.out)
    _snapshot(args, out)
    _, history = train(net, ds, schedule, cfg, out_dir=out, checkpoint_every=args.checkpoint_every,
                       log_every=100 if args.verbose else 0)
    tail = history[-1] if history else {}
    _print({"checkpoint": str(out / "final.dcp"), "steps": cfg.steps, "final": tail})


def _per_sample_rows(results, labels, indices):
    for i, res in zip(indices, results):
        yield [int(i), int(labels[i]), res.predicted] + [repr(float(e)) for e in res.per_class_error]


def _write_per_sample(path, K, rows):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(PER_SAMPLE_FIXED) + [f"error_{k}" for k in range(K)])
        writer.writerows(rows)


def _classify(args, indices):
    ck, ds = _model_and_data(args)
    plan = _plan(args, ck)
    if indices is None:
        indices = np.arange(len(ds))
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= len(ds)):
        raise ArgumentError(f"sample indices must lie in 0..{len(ds) - 1}")
    # Noise streams are keyed on the dataset index, so subsets agree with full runs.
    results = classify_batch(ck.net, ds.images[indices], ck.schedule, plan, sample_keys=indices)
    return ck, ds, plan, indices, results


def cmd_classify(args):
    ck, ds, plan, indices, results = _classify(args, args.indices)
    rows = list(_per_sample_rows(results, ds.labels, indices))
    if args.out:
        out = Path(args.out)
        _snapshot(args, out)
        _write_per_sample(out / "per_sample.csv", ck.net.K, rows)
    _print({"timesteps": list(plan.timesteps),
            "predictions": [{"sample_id": r[0], "true_label": r[1], "predicted": r[2]} for r in rows]})


def cmd_eval(args):
    ck, ds, plan, indices, results = _classify(args, None)
    preds = np.array([r.predicted for r in results])
    acc, mca, confusion = metrics_from_predictions(ds.labels, preds, ck.net.K)
    summary = {"accuracy": acc, "mean_class_accuracy": mca, "n": int(len(ds)), "timesteps": list(plan.timesteps),
               "noise_seed": plan.noise_seed, "confusion": confusion.tolist(),
               "objective": (ck.header.get("loss") or {}).get("objective", "base")}
    if args.out:
        out = Path(args.out)
        _snapshot(args, out)
        _write_per_sample(out / "per_sample.csv", ck.net.K, _per_sample_rows(results, ds.labels, indices))
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    _print(summary)


def _harness_out(args):
    if not args.out:
        return None
    out = Path(args.out)
    _snapshot(args, out)
    return out


def cmd_sweep(args):
    ck, ds = _model_and_data(args)
    rep = harness.run_timestep_sweep(ck, ds, args.sizes, noise_seed=args.noise_seed, landmark=args.landmark,
                                     out_dir=_harness_out(args))
    _print({"sweep": rep.tables["sweep"]})


def cmd_robustness(args):
    ck, ds = _model_and_data(args)
    if args.kind == "noise":
        sigmas = args.sigmas if args.sigmas is not None else NOISE_SIGMAS
        specs = [CorruptionSpec.noise(s, seed=args.corruption_seed) for s in sigmas]
    else:
        sigmas = args.sigmas if args.sigmas is not None else BLUR_SIGMAS_DESK
        specs = [CorruptionSpec.blur(s, args.kernel_size) for s in sigmas]
    rep = harness.run_robustness(ck, ds, specs, plan_size=args.plan_size, noise_seed=args.noise_seed,
                                 out_dir=_harness_out(args))
    _print({"robustness": rep.tables["robustness"], **rep.stats})


def cmd_correlate(args):
    ck, ds = _model_and_data(args)
    rep = harness.run_correlation(ck, ds, n_samples=args.n_samples, plan_size=args.plan_size,
                                  noise_seed=args.noise_seed, subset_seed=args.subset_seed,
                                  out_dir=_harness_out(args))
    _print(rep.stats)


def cmd_compare(args):
    _need(args, "dataset", "eval_dataset", "out")
    train_set = _load_data(args.dataset)
    eval_set = _load_data(args.eval_dataset)
    if eval_set.image_shape != train_set.image_shape or eval_set.K != train_set.K:
        raise DataError("evaluation dataset does not match the training dataset's shape or classes")
    out = Path(args.out)
    _snapshot(args, out)
    result = harness.compare_objectives(
        train_set, eval_set, _train_config(args), args.objectives, args.seeds, arch=_arch(args, train_set),
        schedule=build_linear_schedule(args.T, args.beta_start, args.beta_end), sizes=args.sizes,
        noise_seed=args.noise_seed, out_dir=out)
    _print({"summary": result.report.tables["summary"], **result.report.stats})


def cmd_sample(args):
    _need(args, "checkpoint", "out")
    ck = _load_model(args.checkpoint)
    try:
        cond = Condition.parse(args.cond)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg = SamplerConfig(cfg_scale=args.cfg_scale, seed=args.seed)
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    images = ddpm_sample(ck.net, ck.schedule, cond, cfg, n=args.n)
    out = Path(args.out)
    _snapshot(args, out)
    written = []
    for i, img in enumerate(images):
        pixels = np.round(img * 255.0).astype(np.uint8)
        pil = Image.fromarray(pixels[:, :, 0], mode="L") if pixels.shape[2] == 1 else \
            Image.fromarray(pixels[:, :, :3], mode="RGB")
        path = out / f"sample_{i:03d}.png"
        pil.save(path)
        sidecar = {"seed": args.seed, "index": i, "condition": str(cond), "cfg_scale": args.cfg_scale,
                   "checkpoint": str(args.checkpoint), "variance_mode": cfg.variance_mode}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        written.append(str(path))
    _print({"images": written})


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "classify": cmd_classify, "eval": cmd_eval,
    "sweep": cmd_sweep, "robustness": cmd_robustness, "correlate": cmd_correlate, "compare": cmd_compare,
    "sample": cmd_sample,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        COMMANDS[args.command](args)
    except (ConfigError, ArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training failed: {exc}; diagnostics: {exc.diagnostics}", file=sys.stderr)
        return EXIT_TRAINING
    except MarginDiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
