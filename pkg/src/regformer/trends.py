"""Seeded desk-scale runs behind the trend checks, cached on disk.

Each run trains one variant on the pivot-only corpus, evaluates the averaged
checkpoint and stores a ``result.json`` next to it. Epoch and resume
checkpoints are deleted once the result is written. A run whose
result file exists for the same config is not repeated.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import experiment as ex
from . import metrics
from . import tensor as T
from .batching import pack_instances
from .config import ExperimentConfig
from .model import attach_lora, forward

log = logging.getLogger(__name__)

# Smaller than the library defaults so that the 15 runs fit a CPU afternoon;
# a smaller vocabulary, shorter sentences and a higher peak lr let content
# (not just the output language) be learned within 5000 steps.
TREND_BASE = dict(
    n_languages=6,
    n_concepts=20,
    max_len=8,
    graph="pivot",
    max_steps=5000,
    d_model=64,
    n_heads=4,
    n_layers=2,
    d_ff=256,
    dropout=0.0,
    attention_dropout=0.0,
    lr_peak=2e-3,
    batch_tokens=600,
    train_per_edge=2000,
    n_test=30,
    valid_interval=200,  # averaging spans the last 1000 steps, after the loss has settled
    precision="float32",
)
SEEDS = (0, 1, 2)
DECOMPOSITION = ("vanilla", "registering", "registers_no_mask")
RATIOS = (0.75, 1.0, 1.25, 1.5)
ANALYZE_SAMPLES = 100


def trend_config(variant: str, seed: int, ratio: float = 1.0, **overrides) -> ExperimentConfig:
    """Config of one trend run; ``ratio`` only matters for ``variant='ratio'``."""
    if variant == "ratio" and ratio == 1.0:
        variant = "registering"  # same layout and same run
    raw = {**TREND_BASE, "variant": variant, "ratio": ratio if variant == "ratio" else 1.0, "seed": seed, **overrides}
    return ExperimentConfig(**raw)


def config_key(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(cfg.to_json().encode()).hexdigest()[:16]


def run_dir(cfg: ExperimentConfig, cache_dir) -> Path:
    name = cfg.variant if cfg.variant != "ratio" else f"ratio{cfg.ratio}"
    return Path(cache_dir) / f"{name}_s{cfg.seed}_{config_key(cfg)}"


def run_trend(cfg: ExperimentConfig, cache_dir, force: bool = False) -> dict:
    """Train, evaluate and analyze one config, or return its cached result."""
    out = run_dir(cfg, cache_dir)
    result_path = out / "result.json"
    if result_path.exists() and not force:
        return json.loads(result_path.read_text(encoding="utf-8"))
    corpus = ex.corpus_from_config(cfg)
    t0 = time.time()
    trained = ex.run_training(cfg, corpus, out)
    train_s = time.time() - t0
    params = trained.averaged if trained.averaged is not None else trained.params
    with T.precision(np.dtype(cfg.precision).type):
        report = metrics.evaluate(params, corpus.langs, corpus.test, set(corpus.graph.edges), beam=cfg.beam)
        result = {
            "config": cfg.to_dict(),
            "train_seconds": round(train_s, 1),
            "valid_log": trained.state.log.valid,
            "aggregates": report.aggregates,
            "directions": [d.__dict__ for d in report.directions],
        }
        if params.config.layout_variant.has_registers:
            sample = ex.sample_instances(corpus.test, ANALYZE_SAMPLES, cfg.analyze_seed)
            result["attention"] = metrics.register_attention_stats(params, corpus.langs, sample).__dict__
            result["layer_similarity"] = metrics.layer_similarity(params, corpus.langs, sample)
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    ckpt_io.atomic_write(result_path, text)
    # only the averaged model is needed later; epoch checkpoints would fill the cache
    for path in [*out.glob("epoch_*.ckpt"), out / ex.LAST]:
        path.unlink(missing_ok=True)
    log.info("%s seed %d: %.0fs", cfg.variant, cfg.seed, train_s)
    return json.loads(text)


def mean_over_seeds(results: list[dict], group: str, key: str) -> float:
    return float(np.mean([r["aggregates"][group][key] for r in results]))


# ---------------------------------------------------------------- LoRA fine-tuning


def finetune_directions(n_languages: int, k: int = 5, seed: int = 0) -> list[tuple[int, int]]:
    """``k`` directions drawn with ``random.sample`` under a fixed seed."""
    directions = [(s, t) for s in range(n_languages) for t in range(n_languages) if s != t]
    return random.Random(seed).sample(directions, k)


LORA_OVERRIDES = dict(
    mode="lora",
    lora_rank=8,
    lr_peak=2e-3,
    warmup_steps=100,
    max_steps=500,
    valid_interval=100,
    finetune_per_direction=200,
)


def run_lora(base_cfg: ExperimentConfig, cache_dir, force: bool = False) -> dict:
    """LoRA fine-tuning of a trained trend run on five sampled directions.

    Reports BLEU on the test instances of those directions before and after,
    whether fresh adapters reproduce the base logits exactly, and whether the
    base tensors are bit-identical after fine-tuning.
    """
    base_dir = run_dir(base_cfg, cache_dir)
    run_trend(base_cfg, cache_dir)
    dirs = finetune_directions(base_cfg.n_languages)
    cfg = replace(base_cfg, **LORA_OVERRIDES, lora_directions=[f"{s}-{t}" for s, t in dirs])
    out = base_dir / f"lora_{config_key(cfg)}"
    result_path = out / "result.json"
    if result_path.exists() and not force:
        return json.loads(result_path.read_text(encoding="utf-8"))
    base_path = base_dir / ex.AVERAGED
    base_bytes = base_path.read_bytes()
    base = ckpt_io.load(base_path)
    corpus = ex.corpus_from_config(cfg)
    test = [i for i in corpus.test if i.direction in set(dirs)]
    dtype = np.dtype(cfg.precision).type
    with T.precision(dtype):
        before_model = ckpt_io.to_model(base)
        before = metrics.evaluate(before_model, corpus.langs, test, set(corpus.graph.edges), beam=cfg.beam)
        # fresh adapters must not change a single logit
        probe = ex.sample_instances(test, 8, 0)
        batch = pack_instances(corpus.langs, probe, before_model.config.layout_variant)
        with T.no_grad():
            plain = forward(before_model, batch.token_ids, batch.positions, batch.visible).data
            attach_lora(before_model, rank=cfg.lora_rank, seed=cfg.seed)
            adapted = forward(before_model, batch.token_ids, batch.positions, batch.visible).data
    trained = ex.run_training(cfg, corpus, out, base=base)
    with T.precision(dtype):
        after = metrics.evaluate(trained.params, corpus.langs, test, set(corpus.graph.edges), beam=cfg.beam)
    base_after = ckpt_io.load(base_path)
    frozen = base_path.read_bytes() == base_bytes and all(
        np.array_equal(trained.params.tensors[k].data, before_model.tensors[k].data) for k in before_model.tensors
    )
    result = {
        "directions": [list(d) for d in dirs],
        "bleu_before": before.aggregates["overall"]["bleu"],
        "bleu_after": after.aggregates["overall"]["bleu"],
        "fresh_adapter_noop": bool(np.array_equal(plain, adapted)),
        "base_unchanged": bool(frozen and ckpt_io.params_hash(base_after.config, base_after.params) == ckpt_io.params_hash(base.config, base.params)),
    }
    ckpt_io.atomic_write(result_path, json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


# ---------------------------------------------------------------- the full suite


def decomposition_runs(cache_dir) -> dict[str, list[dict]]:
    return {v: [run_trend(trend_config(v, s), cache_dir) for s in SEEDS] for v in DECOMPOSITION}


def ratio_runs(cache_dir) -> dict[float, list[dict]]:
    return {r: [run_trend(trend_config("ratio", s, r), cache_dir) for s in SEEDS] for r in RATIOS}
