"""Build the cached trend runs read by tests/test_acceptance.py.

Runs the variant decomposition, the register-ratio sweep and the LoRA
fine-tune over all seeds, then prints the summary numbers. Already cached
runs are skipped, so the script can be interrupted and restarted.

    python scripts/run_trends.py [--cache results/trends] [--only decomposition|ratio|lora]
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from regformer import trends

DEFAULT_CACHE = Path(__file__).resolve().parent.parent / "results" / "trends"


def summarize(cache: Path) -> dict:
    out = {}
    dec = trends.decomposition_runs(cache)
    out["zero_shot_off_target"] = {v: trends.mean_over_seeds(r, "zero_shot", "off_target") for v, r in dec.items()}
    out["zero_shot_bleu"] = {v: trends.mean_over_seeds(r, "zero_shot", "bleu") for v, r in dec.items()}
    sweep = trends.ratio_runs(cache)
    out["ratio_zero_shot_bleu"] = {str(k): trends.mean_over_seeds(r, "zero_shot", "bleu") for k, r in sweep.items()}
    out["ratio_entropy"] = {str(k): float(np.mean([x["attention"]["entropy"] for x in r])) for k, r in sweep.items()}
    curves = [r["layer_similarity"] for r in dec["registering"]]
    for name, idx in (("layer_first", 0), ("layer_last", -1)):
        out[name] = {k: float(np.mean([c[idx][k] for c in curves])) for k in ("src_reg", "reg_tgt", "src_tgt")}
    out["lora"] = trends.run_lora(trends.trend_config("registering", 0), cache)
    return out


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--cache", type=Path, default=DEFAULT_CACHE)
    parser.add_argument("--only", choices=["decomposition", "ratio", "lora"])
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    with threadpool_limits(args.threads):
        if args.only == "decomposition":
            trends.decomposition_runs(args.cache)
        elif args.only == "ratio":
            trends.ratio_runs(args.cache)
        elif args.only == "lora":
            trends.run_lora(trends.trend_config("registering", 0), args.cache)
        else:
            summary = summarize(args.cache)
            print(json.dumps(summary, indent=2))
            (args.cache / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
