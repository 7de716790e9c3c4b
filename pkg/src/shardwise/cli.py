"""Command line: plan, audit, train, predict.

Exit codes: 0 success, 1 tolerance or validation failure, 2 usage error.
Every output file goes under ``--workdir``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from shardwise import models
from shardwise.audit import run_audit
from shardwise.examples import EXAMPLES, maml
from shardwise.modelspec import ModelSpec, SpecError, load_model_spec
from shardwise.partition import Split
from shardwise.pipeline import Deployer, RunConfig, Trainer
from shardwise.pipeline.trainer import TrainingError
from shardwise.shardplan import PlanError, ShardingPlan, element_counts, plan_for, validate_plan

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

DEFAULT_SPEC = ModelSpec(models.TransformerConfig(vocab_size=32, n_layers=2, d_model=32, n_heads=4,
                                                  d_ff=64, max_len=16))

# per-example defaults: steps, learning rate, warmup, dtype, per-device batch at dp=1
EXAMPLE_DEFAULTS = {
    "char-lm": dict(steps=300, learning_rate=3e-3, warmup_rate=0.05, dtype="f32", batch=16),
    "seq2seq-copy": dict(steps=400, learning_rate=3e-3, warmup_rate=0.05, dtype="f32", batch=32),
    "maml-sinusoid": dict(steps=1000, learning_rate=1e-2, warmup_rate=0.0, dtype="f64", batch=8),
}
DTYPES = {"f32": np.float32, "f64": np.float64}


class UsageError(Exception):
    pass


def _workdir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _spec(args) -> ModelSpec:
    if args.spec is None:
        return DEFAULT_SPEC
    if not os.path.exists(args.spec):
        raise UsageError(f"model spec not found: {args.spec}")
    return load_model_spec(args.spec)


def _local_shape(shape, part, n) -> tuple:
    if isinstance(part, Split):
        return tuple(s // n if i == part.dim else s for i, s in enumerate(shape))
    return tuple(shape)


# plan ---------------------------------------------------------------------------------

def cmd_plan(args) -> int:
    spec = _spec(args)
    params = models.init_transformer(spec.config)
    shapes = {k: v.shape for k, v in params.items()}
    n = args.n_shards
    plan = plan_for(shapes, n, spec.overrides)
    problems = validate_plan(plan, shapes)
    wd = _workdir(args.workdir)
    plan.save(os.path.join(wd, "plan.txt"))
    with open(os.path.join(wd, "shard_sizes.csv"), "w") as f:
        f.write("name,global_shape,partition,local_shape,local_elements\n")
        for name, part in plan.items():
            local = _local_shape(shapes[name], part, n)
            f.write(f"{name},{'x'.join(map(str, shapes[name]))},{part},"
                    f"{'x'.join(map(str, local))},{int(np.prod(local))}\n")
    rep, split = element_counts(plan, shapes)
    per_device = rep + split // n
    summary = [
        f"n_shards={n}",
        f"total_elements={rep + split}",
        f"replicated_elements={rep}",
        f"split_elements={split}",
        f"per_device_param_elements={per_device}",
        f"per_device_param_and_adam_elements={3 * per_device}",
    ]
    with open(os.path.join(wd, "memory.txt"), "w") as f:
        f.write("\n".join(summary) + "\n")
    print(plan.to_text(), end="")
    print("\n".join(summary))
    for p in problems:
        print(f"invalid: {p}", file=sys.stderr)
    return EXIT_FAIL if problems else EXIT_OK


# audit --------------------------------------------------------------------------------

def cmd_audit(args) -> int:
    spec = _spec(args)
    plan = None
    if args.plan is not None:
        if not os.path.exists(args.plan):
            raise UsageError(f"plan file not found: {args.plan}")
        plan = ShardingPlan.load(args.plan)
    result = run_audit(spec.config, mp=args.mp, dp=args.dp, dtype=args.dtype, steps=args.steps, plan=plan,
                       overrides=spec.overrides, baseline=args.baseline, seed=args.seed)
    wd = _workdir(args.workdir)
    csv = result.report.to_csv()
    with open(os.path.join(wd, "comm_report.csv"), "w") as f:
        f.write(csv)
    if result.baseline_report is not None:
        with open(os.path.join(wd, "comm_report_baseline.csv"), "w") as f:
            f.write(result.baseline_report.to_csv())
    lines = result.summary_lines()
    if not result.passed:
        offenders = sorted(((d, f"grad {k}") for k, d in result.grad_devs.items() if d > result.tolerance),
                           reverse=True)
        offenders += sorted(((d, f"param {k}") for k, d in result.param_devs.items() if d > result.tolerance),
                            reverse=True)
        lines += [f"over tolerance: {what} rel_dev={d:.3e}" for d, what in offenders]
    with open(os.path.join(wd, "audit.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(csv, end="")
    return EXIT_OK if result.passed else EXIT_FAIL


# train / predict ---------------------------------------------------------------------------

def _build_example(name: str, dtype: str, seed: int):
    mod = EXAMPLES[name]
    return mod.build(dtype=DTYPES[dtype], seed=seed)


def _run_config(args, dp: int) -> RunConfig:
    d = EXAMPLE_DEFAULTS[args.example]
    if args.global_batch_size is not None:
        if args.per_device_batch_size is not None:
            raise UsageError("give --per-device-batch-size or --global-batch-size, not both")
        if args.global_batch_size % dp:
            raise UsageError(f"--global-batch-size {args.global_batch_size} not divisible by --dp {dp}")
        per_device = args.global_batch_size // dp
    elif args.per_device_batch_size is not None:
        per_device = args.per_device_batch_size
    else:
        if d["batch"] % dp:
            raise UsageError(f"default global batch {d['batch']} not divisible by --dp {dp}")
        per_device = d["batch"] // dp
    metrics = ["exact_match"] if args.example == "seq2seq-copy" else []
    return RunConfig(
        n_epochs=args.n_epochs or 1,
        per_device_batch_size=per_device,
        eval_per_device_batch_size=per_device,
        accumulate_grad_batches=args.accumulate_grad_batches,
        learning_rate=args.learning_rate if args.learning_rate is not None else d["learning_rate"],
        warmup_rate=args.warmup_rate if args.warmup_rate is not None else d["warmup_rate"],
        weight_decay=args.weight_decay,
        seed=args.seed,
        workdir=args.workdir,
        total_steps=None if args.n_epochs and args.steps is None else (args.steps or d["steps"]),
        save_argmax_ckpt_by_metrics=metrics,
        eval_loss=args.example != "maml-sinusoid",
    )


def _trainer(args, ex, config: RunConfig) -> Trainer:
    n_devices = args.dp * args.n_model_shards
    dep = Deployer(n_model_shards=args.n_model_shards, n_devices=n_devices, seed=args.seed,
                   workdir=args.workdir)
    return Trainer(dep, ex["spec"], ex["params"], config)


def _maml_quadratic(args) -> int:
    wd = _workdir(args.workdir)
    theta, alpha = 1.0, 0.1
    adapted = maml.quadratic_adaptation(theta, alpha)
    line = f"quadratic inner_loss=theta**2 theta={theta!r} alpha={alpha!r} theta_adapted={adapted!r}"
    with open(os.path.join(wd, "debug.log"), "w") as f:
        f.write(line + "\n")
    print(line)
    return EXIT_OK


def cmd_train(args) -> int:
    if args.example == "maml-sinusoid" and args.task == "quadratic":
        return _maml_quadratic(args)
    dtype = args.dtype or EXAMPLE_DEFAULTS[args.example]["dtype"]
    ex = _build_example(args.example, dtype, args.seed)
    config = _run_config(args, args.dp)
    tr = _trainer(args, ex, config)
    log = tr.fit(ex["train"], ex["eval"])
    metrics: dict = {"example": args.example, "steps": tr.state.step, "dp": args.dp,
                     "n_model_shards": args.n_model_shards, "dtype": dtype,
                     "initial_loss": log.losses[0], "final_loss": log.losses[-1]}
    if log.evals:
        metrics["final_eval"] = log.evals[-1]
    if args.example == "maml-sinusoid":
        pairs = maml.adaptation_losses({k: v.numpy() for k, v in tr.state.gathered().items()},
                                       ex["eval"], ex["alpha"])
        metrics["pre_adapt_loss"] = float(np.mean([a for a, _ in pairs]))
        metrics["post_adapt_loss"] = float(np.mean([b for _, b in pairs]))
        metrics["improved_fraction"] = float(np.mean([b < a for a, b in pairs]))
    metrics["best_checkpoints"] = {k: path for k, (_, path) in log.best.items()}
    with open(os.path.join(args.workdir, "metrics.json"), "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
        f.write("\n")
    for k in ("initial_loss", "final_loss", "improved_fraction"):
        if k in metrics:
            print(f"{k}={metrics[k]!r}")
    if "final_eval" in metrics:
        print(" ".join(f"{k}={v!r}" for k, v in metrics["final_eval"].items()))
    return EXIT_OK


def cmd_predict(args) -> int:
    dtype = args.dtype or EXAMPLE_DEFAULTS[args.example]["dtype"]
    ex = _build_example(args.example, dtype, args.seed)
    config = _run_config(args, args.dp)
    tr = _trainer(args, ex, config)
    if args.checkpoint is not None:
        if not os.path.exists(args.checkpoint):
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        tr.load_checkpoint(args.checkpoint)
    examples = ex["eval"]
    if args.inputs is not None:
        if args.example != "char-lm":
            raise UsageError("--inputs is only supported for char-lm prompts")
        with open(args.inputs) as f:
            examples = [line.rstrip("\n") for line in f if line.strip()]
        width = len(ex["train"][0]) - 1
        vocab = ex["vocab"]
        bad = [p for p in examples if len(p) != width or any(c not in vocab.index for c in p)]
        if bad:
            raise UsageError(f"char-lm prompts must be {width} known characters: {bad[0]!r}")
        # collate drops the last character as the next-token target
        examples = [p + " " for p in examples]
    preds = tr.predict(examples)
    out = os.path.join(_workdir(args.workdir), "predictions.txt")
    with open(out, "w") as f:
        for p in preds:
            f.write((p if isinstance(p, str) else json.dumps(np.asarray(p).tolist())) + "\n")
    if ex["spec"].metric_fn is not None and args.inputs is None:
        scores = ex["spec"].metric_fn(examples, preds)
        print(" ".join(f"{k}={float(v)!r}" for k, v in scores.items()))
    print(f"wrote {len(preds)} predictions to {out}")
    return EXIT_OK


# parser -------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shardwise", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    pl = sub.add_parser("plan", help="derive a sharding plan for a model spec")
    pl.add_argument("--spec", help="model spec file (key = value); default: toy transformer")
    pl.add_argument("--n-shards", type=int, required=True)
    pl.add_argument("--workdir", default="./workdir")
    pl.set_defaults(fn=cmd_plan)

    au = sub.add_parser("audit", help="sharded vs single-device equivalence audit")
    au.add_argument("--spec")
    au.add_argument("--mp", type=int, default=2)
    au.add_argument("--dp", type=int, default=1)
    au.add_argument("--dtype", choices=sorted(DTYPES), default="f64")
    au.add_argument("--steps", type=int, default=10)
    au.add_argument("--plan", help="plan file from the plan command")
    au.add_argument("--baseline", choices=["same-dim"])
    au.add_argument("--seed", type=int, default=0)
    au.add_argument("--workdir", default="./workdir")
    au.set_defaults(fn=cmd_audit)

    for name, fn in (("train", cmd_train), ("predict", cmd_predict)):
        t = sub.add_parser(name, help=f"{name} a shipped example pipeline")
        t.add_argument("example", choices=sorted(EXAMPLES))
        t.add_argument("--n-model-shards", "--mp", dest="n_model_shards", type=int, default=1)
        t.add_argument("--dp", type=int, default=1)
        t.add_argument("--per-device-batch-size", type=int)
        t.add_argument("--global-batch-size", type=int)
        t.add_argument("--accumulate-grad-batches", type=int, default=1)
        t.add_argument("--learning-rate", type=float)
        t.add_argument("--warmup-rate", type=float)
        t.add_argument("--weight-decay", type=float, default=0.0)
        t.add_argument("--n-epochs", type=int)
        t.add_argument("--steps", type=int)
        t.add_argument("--seed", type=int, default=42)
        t.add_argument("--dtype", choices=sorted(DTYPES))
        t.add_argument("--workdir", default="./workdir")
        if name == "train":
            t.add_argument("--task", choices=["sinusoid", "quadratic"], default="sinusoid",
                           help="maml-sinusoid only: 'quadratic' runs the one-step toy check")
        else:
            t.add_argument("--checkpoint")
            t.add_argument("--inputs", help="char-lm: file with one prompt per line")
        t.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    for k in ("n_shards", "mp", "dp", "n_model_shards", "steps", "accumulate_grad_batches"):
        v = getattr(args, k, None)
        if v is not None and v < 1:
            print(f"error: --{k.replace('_', '-')} must be >= 1", file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SpecError, PlanError, TrainingError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
