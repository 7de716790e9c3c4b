"""Train the char-LM example through the library API and print a few samples.

Shows the whole user surface: build the three functions, hand them to a
Trainer, predict.
"""
import argparse
import sys

import numpy as np

from shardwise.examples import char_lm
from shardwise.pipeline import Deployer, RunConfig, Trainer


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dp", type=int, default=2)
    ap.add_argument("--mp", type=int, default=2)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--workdir", default="./workdir/train_demo")
    args = ap.parse_args(argv)

    ex = char_lm.build(dtype=np.float32, seed=args.seed)
    deployer = Deployer(n_model_shards=args.mp, n_devices=args.dp * args.mp, seed=args.seed,
                        workdir=args.workdir)
    config = RunConfig(per_device_batch_size=16 // args.dp, learning_rate=3e-3, warmup_rate=0.05,
                       total_steps=args.steps, seed=args.seed, workdir=args.workdir)
    trainer = Trainer(deployer, ex["spec"], ex["params"], config)
    log = trainer.fit(ex["train"], ex["eval"])
    print(f"loss {np.mean(log.losses[:10]):.3f} -> {np.mean(log.losses[-10:]):.3f} over {len(log.losses)} steps")
    for prompt, out in zip(ex["eval"][:5], trainer.predict(ex["eval"][:5])):
        print(f"{prompt[:-1]!r} -> {out!r}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
