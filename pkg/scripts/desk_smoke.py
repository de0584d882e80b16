"""Loss drop of the default config over its first 2000 training steps.

Trains each named variant with ``ExperimentConfig()`` defaults and prints the
mean loss of the first 10 and the last 100 steps, their relative drop and a
100-step-mean curve. About 30 minutes per variant on one CPU core.

    python scripts/desk_smoke.py [--steps 2000] [vanilla registering ...]
"""

import argparse
import json
import time

import numpy as np
from threadpoolctl import threadpool_limits

from regformer import experiment as ex
from regformer.config import ExperimentConfig
from regformer.model import init_params
from regformer.training import train


def smoke(variant: str, steps: int) -> dict:
    cfg = ExperimentConfig(variant=variant, max_steps=steps, valid_interval=steps)
    corpus = ex.corpus_from_config(cfg)
    params = init_params(cfg.model_config(corpus.vocab_size), cfg.seed)
    losses: list[float] = []
    t0 = time.time()
    train(params, corpus, cfg.train_config(), progress=lambda step, loss: losses.append(loss))
    first, last = float(np.mean(losses[:10])), float(np.mean(losses[-100:]))
    return {
        "variant": variant,
        "steps": steps,
        "seconds": round(time.time() - t0),
        "first10": first,
        "last100": last,
        "drop": 1 - last / first,
        "curve": [round(float(np.mean(losses[i : i + 100])), 3) for i in range(0, steps, 100)],
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("variants", nargs="*", default=["vanilla", "registering"])
    parser.add_argument("--steps", type=int, default=2000)
    args = parser.parse_args()
    with threadpool_limits(1):
        for variant in args.variants:
            print(json.dumps(smoke(variant, args.steps)), flush=True)


if __name__ == "__main__":
    main()
