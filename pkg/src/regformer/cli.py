"""Command-line entry point: ``regformer {gen-data,train,evaluate,analyze,translate}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from . import checkpoint as ckpt_io
from . import experiment as ex
from . import metrics
from .config import ExperimentConfig
from .corpus import encode, read_instances
from .errors import RegformerError
from .inference import translate

log = logging.getLogger("regformer")


def thread_limit():
    """Cap BLAS threads to ``REGFORMER_THREADS`` when it is set."""
    value = os.environ.get("REGFORMER_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(value))


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(args.set or [])


def _check_vocab(params, corpus) -> None:
    if params.config.vocab_size != corpus.vocab_size:
        raise RegformerError(f"model vocab {params.config.vocab_size} != corpus vocab {corpus.vocab_size}")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    corpus = ex.write_corpus_dir(cfg, args.out, force=args.force)
    print(f"wrote {len(corpus.train)} train / {len(corpus.valid)} valid / {len(corpus.test)} test instances to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    corpus = ex.read_corpus_dir(args.corpus)
    base = ckpt_io.load(args.base) if args.base else None

    def progress(step, loss):
        if args.log_every and step % args.log_every == 0:
            log.info("step %d loss %.4f", step, loss)

    result = ex.run_training(cfg, corpus, args.out, resume=args.resume, until_step=args.until_step, base=base, progress=progress)
    print(f"stopped at step {result.state.step}; checkpoints in {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    params = ex.load_model(args.checkpoint, args.base)
    corpus = ex.read_corpus_dir(args.corpus)
    _check_vocab(params, corpus)
    failures: list = []
    hyps: list = []
    report = metrics.evaluate(
        params,
        corpus.langs,
        getattr(corpus, args.split),
        set(corpus.graph.edges),
        beam=args.beam,
        batch_size=args.batch_size,
        hypotheses_out=hyps,
        failures=failures,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_io.atomic_write(out / "report.json", report.to_json() + "\n")
    ckpt_io.atomic_write(out / "report.csv", report.to_csv())
    ckpt_io.atomic_write(out / "hypotheses.tsv", "".join(_hyp_line(i, h) for i, h in hyps))
    for k in ("supervised", "zero_shot", "overall"):
        a = report.aggregates[k]
        print(f"{k:10s} bleu={a['bleu']:.2f} acc={a['accuracy']:.2f} off_target={a['off_target']:.2f}")
    for (s, t), msg in failures:
        print(f"direction {s}-{t} failed to decode: {msg}", file=sys.stderr)
    return 1 if failures else 0


def _hyp_line(inst, hyp) -> str:
    return f"{inst.src_lang}\t{inst.tgt_lang}\t{' '.join(map(str, hyp))}\n"


def cmd_analyze(args) -> int:
    params = ex.load_model(args.checkpoint, args.base)
    corpus = ex.read_corpus_dir(args.corpus)
    _check_vocab(params, corpus)
    sample = ex.sample_instances(corpus.test, args.samples, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.which == "attention":
        layer = "mean" if args.layer in (None, "mean") else int(args.layer)
        stats = metrics.register_attention_stats(params, corpus.langs, sample, layer=layer)
        text = json.dumps(stats.__dict__, indent=2, sort_keys=True) + "\n"
        ckpt_io.atomic_write(out / "attention_stats.json", text)
        print(text, end="")
    elif args.which == "layersim":
        rows = metrics.layer_similarity(params, corpus.langs, sample)
        text = metrics.layer_similarity_csv(rows)
        ckpt_io.atomic_write(out / "layer_similarity.csv", text)
        print(text, end="")
    else:
        layer = params.config.n_layers if args.layer in (None, "mean") else int(args.layer)
        n = metrics.export_hidden(params, corpus.langs, sample, layer, out / f"hidden_layer{layer}.csv")
        print(f"wrote {n} rows to {out / f'hidden_layer{layer}.csv'}")
    return 0


def cmd_translate(args) -> int:
    params = ex.load_model(args.checkpoint, args.base)
    corpus = ex.read_corpus_dir(args.corpus)
    _check_vocab(params, corpus)
    insts = read_instances(args.input, corpus.langs)
    hyps = translate(params, [encode(corpus.langs, i)[0] for i in insts], beam=args.beam, batch_size=args.batch_size)
    text = "".join(_hyp_line(i, h) for i, h in zip(insts, hyps))
    if args.output == "-":
        sys.stdout.write(text)
    else:
        ckpt_io.atomic_write(args.output, text)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regformer", description="Register-token translation experiments on synthetic languages.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="flat JSON experiment config (defaults used when omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key; repeatable")

    def with_model(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--base", help="base checkpoint for LoRA adapter checkpoints")
        sp.add_argument("--corpus", required=True, help="corpus directory written by gen-data")

    sp = sub.add_parser("gen-data", help="generate a synthetic corpus directory")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train (or resume) a model")
    with_config(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt if present")
    sp.add_argument("--until-step", type=int, help="stop early at this step (still resumable)")
    sp.add_argument("--base", help="frozen base checkpoint (LoRA mode)")
    sp.add_argument("--log-every", type=int, default=100)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="decode a split and write BLEU / accuracy / off-target reports")
    with_model(sp)
    sp.add_argument("--beam", type=int, default=5)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--split", choices=("test", "valid"), default="test")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("analyze", help="register attention statistics, layer similarity or hidden-state export")
    with_model(sp)
    sp.add_argument("--which", choices=("attention", "layersim", "hidden"), required=True)
    sp.add_argument("--samples", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--layer", default=None, help="layer index, or 'mean' (attention only)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("translate", help="translate a corpus-format file")
    with_model(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", default="-")
    sp.add_argument("--beam", type=int, default=5)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.set_defaults(func=cmd_translate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with thread_limit():
            return args.func(args)
    except (RegformerError, FileExistsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
