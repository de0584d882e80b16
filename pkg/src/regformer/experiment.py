"""Run-level plumbing shared by the CLI and the experiment scripts.

Corpus directories, resumable training with on-disk checkpoints, and model
loading for evaluation.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .config import ExperimentConfig
from .corpus import LanguageSet, SyntheticCorpus, build_corpus, finetune_corpus, make_instance, read_instances, write_instances
from .errors import CheckpointError, ConfigurationError
from .model import ModelParams, attach_lora, init_params
from .training import TrainerState, TrainLog, train

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
LAST = "last.ckpt"
AVERAGED = "averaged.ckpt"


# ---------------------------------------------------------------- corpus directories


def config_vocab_size(cfg: ExperimentConfig) -> int:
    return 3 + cfg.n_languages * (1 + cfg.n_concepts)


def corpus_from_config(cfg: ExperimentConfig) -> SyntheticCorpus:
    langs = LanguageSet.build(cfg.n_languages, cfg.n_concepts, cfg.corpus_seed)
    graph = cfg.connectivity()
    sizes = {e: cfg.train_per_edge for e in graph.supervised}
    return build_corpus(langs, graph, sizes, (cfg.min_len, cfg.max_len), cfg.corpus_seed, cfg.n_valid, cfg.n_test)


def corpus_manifest(cfg: ExperimentConfig, corpus: SyntheticCorpus) -> dict:
    g = corpus.graph
    return {
        "n_languages": cfg.n_languages,
        "n_concepts": cfg.n_concepts,
        "corpus_seed": cfg.corpus_seed,
        "length_range": [cfg.min_len, cfg.max_len],
        "vocab_size": corpus.vocab_size,
        "pivot": g.pivot,
        "groups": [list(x) for x in g.groups],
        "bridges": [list(x) for x in g.bridges],
        "supervised": [f"{s}-{t}" for s, t in g.supervised],
        "zero_shot": [f"{s}-{t}" for s, t in g.zero_shot],
        "train_sizes": {f"{s}-{t}": n for (s, t), n in sorted(corpus.sizes.items())},
        "reorder_rules": [lang.reorder_rule for lang in corpus.langs.languages],
        "split_sizes": {s: len(getattr(corpus, s)) for s in SPLITS},
    }


def write_corpus_dir(cfg: ExperimentConfig, out_dir, force: bool = False) -> SyntheticCorpus:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} is not empty (pass --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    corpus = corpus_from_config(cfg)
    manifest = corpus_manifest(cfg, corpus)
    for split in SPLITS:
        path = out / f"{split}.tsv"
        write_instances(path, getattr(corpus, split))
        manifest.setdefault("sha256", {})[f"{split}.tsv"] = hashlib.sha256(path.read_bytes()).hexdigest()
    ckpt_io.atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return corpus


def read_corpus_dir(corpus_dir) -> SyntheticCorpus:
    from .corpus import ConnectivityGraph

    root = Path(corpus_dir)
    try:
        m = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"{root} has no manifest.json; run gen-data first") from None
    langs = LanguageSet.build(m["n_languages"], m["n_concepts"], m["corpus_seed"])
    edges = frozenset(tuple(int(v) for v in e.split("-")) for e in m["supervised"])
    graph = ConnectivityGraph(
        m["n_languages"], m["pivot"], tuple(map(tuple, m["groups"])), tuple(map(tuple, m["bridges"])), edges
    )
    splits = {s: read_instances(root / f"{s}.tsv", langs) for s in SPLITS}
    sizes = {tuple(int(v) for v in k.split("-")): n for k, n in m["train_sizes"].items()}
    return SyntheticCorpus(langs, graph, splits["train"], splits["valid"], splits["test"], sizes)


def lora_corpus(cfg: ExperimentConfig, corpus: SyntheticCorpus) -> SyntheticCorpus:
    """Fine-tuning data for ``cfg.lora_directions``, generated fresh per direction."""
    return finetune_corpus(
        corpus,
        cfg.lora_edges(),
        cfg.finetune_per_direction,
        cfg.n_valid,
        (cfg.min_len, cfg.max_len),
        cfg.corpus_seed,
    )


# ---------------------------------------------------------------- trainer state <-> checkpoint


def _encode_queue(queue) -> list:
    return [[[i.src_lang, i.tgt_lang, list(i.concepts)] for i in batch] for batch in queue]


def _decode_queue(raw, langs: LanguageSet) -> list:
    return [[make_instance(langs, s, t, c) for s, t, c in batch] for batch in raw]


def state_to_checkpoint(params: ModelParams, state: TrainerState) -> ckpt_io.Checkpoint:
    ck = ckpt_io.from_model(params, step=state.step)
    trainable = params.trainable()
    ck.adam = state.adam
    ck.master = {k: t.data for k, t in trainable.items()}
    ck.rng_state = state.rng.bit_generator.state
    ck.extra = {
        "train_log": [list(r) for r in state.log.steps],
        "valid_log": [list(r) for r in state.log.valid],
        "sampler_queue": _encode_queue(state.sampler_queue),
    }
    return ck


def state_from_checkpoint(ck: ckpt_io.Checkpoint, langs: LanguageSet) -> TrainerState:
    if ck.adam is None or ck.rng_state is None:
        raise CheckpointError("checkpoint carries no optimizer/RNG state; cannot resume from it")
    rng = np.random.default_rng()
    rng.bit_generator.state = ck.rng_state
    tlog = TrainLog(
        steps=[(int(s), float(lr), float(loss)) for s, lr, loss in ck.extra["train_log"]],
        valid=[(int(e), float(v)) for e, v in ck.extra["valid_log"]],
    )
    return TrainerState(ck.step, ck.adam, rng, _decode_queue(ck.extra["sampler_queue"], langs), tlog, [])


# ---------------------------------------------------------------- training runs


@dataclass
class TrainResult:
    params: ModelParams
    state: TrainerState
    averaged: ModelParams | None


def _epoch_path(out: Path, epoch: int) -> Path:
    return out / f"epoch_{epoch:04d}.ckpt"


def run_training(*args, **kwargs) -> "TrainResult":
    cfg = args[0] if args else kwargs["cfg"]
    with T.precision(np.dtype(cfg.precision).type):
        return _run_training(*args, **kwargs)


def _run_training(
    cfg: ExperimentConfig,
    corpus: SyntheticCorpus,
    out_dir,
    resume: bool = False,
    until_step: int | None = None,
    base: ckpt_io.Checkpoint | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train with per-epoch checkpoints in ``out_dir``; resumable from ``last.ckpt``.

    At ``max_steps`` the last ``average_last`` epoch checkpoints are averaged
    into ``averaged.ckpt``. In LoRA mode ``base`` is the frozen model and only
    adapters are written; with ``lora_directions`` set, training uses fresh
    data for just those directions (zero-shot ones included).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train_config()
    expected = config_vocab_size(cfg)
    if expected != corpus.vocab_size:
        raise ConfigurationError(
            f"config implies vocab size {expected} but the corpus has {corpus.vocab_size}; "
            "n_languages/n_concepts disagree with the corpus manifest"
        )
    mcfg = cfg.model_config(corpus.vocab_size)
    if cfg.mode == "lora":
        if base is None:
            raise ConfigurationError("LoRA mode needs a base checkpoint")
        if base.config.vocab_size != corpus.vocab_size:
            raise ConfigurationError(f"base model vocab {base.config.vocab_size} != corpus vocab {corpus.vocab_size}")
        if cfg.lora_directions:
            corpus = lora_corpus(cfg, corpus)
    last = out / LAST
    if resume and last.exists():
        ck = ckpt_io.load(last)
        if ck.config.vocab_size != corpus.vocab_size:
            raise ConfigurationError(f"checkpoint vocab {ck.config.vocab_size} != corpus vocab {corpus.vocab_size}")
        params = ckpt_io.to_model(ck, base)
        state = state_from_checkpoint(ck, corpus.langs)
        log.info("resumed at step %d", state.step)
    else:
        if cfg.mode == "lora":
            params = ckpt_io.to_model(base)
            attach_lora(params, rank=cfg.lora_rank, seed=cfg.seed)
        else:
            params = init_params(mcfg, cfg.seed)
        state = None
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")

    def on_epoch(st: TrainerState) -> None:
        epoch = len(st.log.valid)
        ckpt_io.save(ckpt_io.from_model(params, step=st.step), _epoch_path(out, epoch))
        ckpt_io.save(state_to_checkpoint(params, st), last)
        _write_logs(out, st.log)

    state = train(params, corpus, tcfg, state=state, until_step=until_step, on_epoch=on_epoch, progress=progress)
    ckpt_io.save(state_to_checkpoint(params, state), last)
    _write_logs(out, state.log)
    averaged = None
    if state.step >= tcfg.max_steps and state.log.valid:
        n_epochs = len(state.log.valid)
        first = max(1, n_epochs - tcfg.average_last + 1)
        avg = ckpt_io.average_checkpoints([ckpt_io.load(_epoch_path(out, e)) for e in range(first, n_epochs + 1)])
        ckpt_io.save(avg, out / AVERAGED)
        averaged = ckpt_io.to_model(avg, base)
    return TrainResult(params, state, averaged)


def _write_logs(out: Path, tlog: TrainLog) -> None:
    ckpt_io.atomic_write(out / "train_log.csv", tlog.train_csv())
    ckpt_io.atomic_write(out / "valid_log.csv", tlog.valid_csv())


def load_model(path, base_path=None) -> ModelParams:
    """Load a checkpoint for inference; LoRA adapters need ``base_path``."""
    ck = ckpt_io.load(path)
    base = ckpt_io.load(base_path) if base_path is not None else None
    if ck.kind == "lora" and base is None:
        raise CheckpointError(f"{path} holds LoRA adapters only; pass the base checkpoint")
    # inference uses the stored float32 weights even if a master copy exists
    ck.master = None
    return ckpt_io.to_model(ck, base)


def sample_instances(instances, n: int, seed: int):
    """``n`` instances drawn without replacement (all of them if fewer), in a seed-fixed order."""
    if n >= len(instances):
        return list(instances)
    idx = np.random.default_rng(seed).choice(len(instances), size=n, replace=False)
    return [instances[i] for i in sorted(idx)]
