"""Evaluation metrics and register-mechanism analyses."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .batching import pack_instances
from .corpus import EOS, LanguageSet, TranslationInstance, encode
from .errors import ConfigurationError, UnsupportedVariantError
from .inference import translate
from .model import ModelParams, forward


# ---------------------------------------------------------------- BLEU


def _ngrams(tokens: Sequence[int], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]], max_ngram: int = 4, smoothing: str = "add1") -> float:
    """Corpus BLEU over token ids, in [0, 100].

    Clipped n-gram matches and totals are pooled over the corpus. With
    ``smoothing='add1'`` the precisions for n > 1 become (m + 1) / (t + 1);
    ``'none'`` leaves them raw. The brevity penalty compares total
    hypothesis length with total reference length.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not references:
        raise ValueError("empty corpus")
    if smoothing not in ("add1", "none"):
        raise ValueError(f"unknown smoothing {smoothing!r}")
    matches = [0] * max_ngram
    totals = [0] * max_ngram
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_ngram + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(0, len(hyp) - n + 1)
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_ngram):
        m, t = matches[n], totals[n]
        if n > 0 and smoothing == "add1":
            m, t = m + 1, t + 1
        if m == 0:
            return 0.0
        log_p += math.log(m / t)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / max_ngram)


# ---------------------------------------------------------------- off-target


def is_off_target(langs: LanguageSet, hypothesis: Sequence[int], intended: int) -> bool:
    """Off-target unless the intended language strictly outnumbers every other one.

    Only surface tokens vote; reserved and tag ids are skipped. An empty
    hypothesis is off-target.
    """
    votes = Counter(l for l in (langs.language_of(t) for t in hypothesis) if l is not None)
    if not votes:
        return True
    mine = votes.get(intended, 0)
    return any(c >= mine for l, c in votes.items() if l != intended) or mine == 0


def off_target_ratio(langs: LanguageSet, hypotheses: Sequence[Sequence[int]], intended: Sequence[int]) -> float:
    """Percentage of hypotheses that are off-target."""
    if len(hypotheses) != len(intended):
        raise ValueError("need one intended language per hypothesis")
    if not hypotheses:
        return 0.0
    off = sum(is_off_target(langs, h, l) for h, l in zip(hypotheses, intended))
    return 100.0 * off / len(hypotheses)


# ---------------------------------------------------------------- reports


@dataclass
class DirectionScore:
    src_lang: int
    tgt_lang: int
    supervised: bool
    n: int
    bleu: float
    accuracy: float
    off_target: float


@dataclass
class MetricReport:
    directions: list[DirectionScore]
    aggregates: dict[str, dict[str, float]] = field(default_factory=dict)

    @classmethod
    def from_directions(cls, directions: list[DirectionScore]) -> "MetricReport":
        def agg(rows):
            n = sum(r.n for r in rows)
            if n == 0:
                return {"bleu": float("nan"), "accuracy": float("nan"), "off_target": float("nan"), "n_directions": 0}
            out = {k: sum(getattr(r, k) * r.n for r in rows) / n for k in ("bleu", "accuracy", "off_target")}
            out["n_directions"] = len(rows)
            return out

        return cls(
            directions,
            {
                "supervised": agg([d for d in directions if d.supervised]),
                "zero_shot": agg([d for d in directions if not d.supervised]),
                "overall": agg(directions),
            },
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        raw = json.loads(text)
        return cls([DirectionScore(**d) for d in raw["directions"]], raw["aggregates"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["src_lang", "tgt_lang", "supervised", "n", "bleu", "accuracy", "off_target"])
        for d in self.directions:
            w.writerow([d.src_lang, d.tgt_lang, int(d.supervised), d.n, f"{d.bleu:.6f}", f"{d.accuracy:.6f}", f"{d.off_target:.6f}"])
        return buf.getvalue()


def score_direction(langs, src, tgt, supervised, hyps, refs) -> DirectionScore:
    return DirectionScore(
        src_lang=src,
        tgt_lang=tgt,
        supervised=supervised,
        n=len(refs),
        bleu=bleu(hyps, refs),
        accuracy=100.0 * sum(list(h) == list(r) for h, r in zip(hyps, refs)) / len(refs),
        off_target=off_target_ratio(langs, hyps, [tgt] * len(hyps)),
    )


def evaluate(
    params: ModelParams,
    langs: LanguageSet,
    test: Sequence[TranslationInstance],
    supervised: set[tuple[int, int]],
    beam: int = 5,
    batch_size: int = 32,
    hypotheses_out: list | None = None,
    failures: list | None = None,
) -> MetricReport:
    """Decode every instance of ``test`` and score each direction separately.

    With ``failures`` given, a direction whose decoding raises is recorded
    there as ``(direction, message)`` and left out of the report instead of
    aborting the whole evaluation.
    """
    by_dir: dict[tuple[int, int], list[TranslationInstance]] = {}
    for inst in test:
        by_dir.setdefault(inst.direction, []).append(inst)
    rows = []
    for (src, tgt), insts in sorted(by_dir.items()):
        try:
            hyps = translate(params, [encode(langs, i)[0] for i in insts], beam=beam, batch_size=batch_size)
        except Exception as exc:
            if failures is None:
                raise
            failures.append(((src, tgt), f"{type(exc).__name__}: {exc}"))
            continue
        if hypotheses_out is not None:
            hypotheses_out.extend(zip(insts, hyps))
        rows.append(score_direction(langs, src, tgt, (src, tgt) in supervised, hyps, [list(i.y) for i in insts]))
    return MetricReport.from_directions(rows)


# ---------------------------------------------------------------- attention statistics


@dataclass
class AttentionStats:
    top1_score: float
    top2_score: float
    dist: float
    entropy: float
    n_instances: int


def _require_registers(params: ModelParams) -> None:
    if not params.config.layout_variant.has_registers:
        raise UnsupportedVariantError("register analyses need a model with registers")


def _attention_maps(params: ModelParams, langs: LanguageSet, instances, layer) -> tuple[list[np.ndarray], list]:
    batch = pack_instances(langs, instances, params.config.layout_variant)
    capture: dict = {}
    with T.no_grad():
        forward(params, batch.token_ids, batch.positions, batch.visible, capture=capture)
    per_layer = [a.mean(axis=1) for a in capture["attn"]]  # head mean -> [B, L, L]
    if layer in (None, "mean"):
        maps = np.mean(per_layer, axis=0)
    else:
        if not 1 <= int(layer) <= params.config.n_layers:
            raise IndexError(f"layer {layer} outside 1..{params.config.n_layers}")
        maps = per_layer[int(layer) - 1]
    return [maps[i] for i in range(len(instances))], batch.layouts


def register_attention_stats(
    params: ModelParams,
    langs: LanguageSet,
    instances: Sequence[TranslationInstance],
    layer: "int | str | None" = "mean",
) -> AttentionStats:
    """How registers spread their attention over source slots.

    For every register row the raw head-averaged attention over source columns
    (not renormalized) gives a top-1 and top-2 source slot. Scores are the
    mean masses of those picks, ``dist`` the mean slot distance between them,
    and ``entropy`` (natural log) the per-sentence entropy of which source slot
    wins top-1, averaged over sentences.
    """
    _require_registers(params)
    if not instances:
        raise ConfigurationError("no instances to analyze")
    maps, layouts = _attention_maps(params, langs, instances, layer)
    top1, top2, dists, entropies = [], [], [], []
    for attn, lay in zip(maps, layouts):
        src = attn[lay.reg_slice, lay.src_slice]
        order = np.argsort(-src, axis=1, kind="stable")
        rows = np.arange(src.shape[0])
        top1.extend(src[rows, order[:, 0]])
        if lay.src_len >= 2:
            top2.extend(src[rows, order[:, 1]])
            dists.extend(np.abs(order[:, 0] - order[:, 1]))
        counts = np.bincount(order[:, 0], minlength=lay.src_len).astype(float)
        p = counts[counts > 0] / counts.sum()
        entropies.append(float(-(p * np.log(p)).sum()))
    return AttentionStats(
        top1_score=float(np.mean(top1)),
        top2_score=float(np.mean(top2)) if top2 else 0.0,
        dist=float(np.mean(dists)) if dists else 0.0,
        entropy=float(np.mean(entropies)),
        n_instances=len(instances),
    )


# ---------------------------------------------------------------- representations


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _hidden_states(params: ModelParams, langs: LanguageSet, instances) -> tuple[list[np.ndarray], list]:
    batch = pack_instances(langs, instances, params.config.layout_variant)
    capture: dict = {}
    with T.no_grad():
        forward(params, batch.token_ids, batch.positions, batch.visible, capture=capture)
    return capture["hidden"], batch.layouts


def layer_similarity(params: ModelParams, langs: LanguageSet, instances: Sequence[TranslationInstance]) -> list[dict[str, float]]:
    """Per-layer cosine between mean-pooled source, register and target blocks.

    Row ``l`` covers the residual stream after ``l`` layers (row 0 is the
    embedding output); values are averaged over instances. Targets are the
    teacher-forced gold stream.
    """
    _require_registers(params)
    hidden, layouts = _hidden_states(params, langs, instances)
    rows = []
    for layer, states in enumerate(hidden):
        acc = {"src_reg": [], "reg_tgt": [], "src_tgt": []}
        for i, lay in enumerate(layouts):
            src = states[i, lay.src_slice].mean(axis=0)
            reg = states[i, lay.reg_slice].mean(axis=0)
            tgt = states[i, lay.tgt_slice].mean(axis=0)
            acc["src_reg"].append(cosine(src, reg))
            acc["reg_tgt"].append(cosine(reg, tgt))
            acc["src_tgt"].append(cosine(src, tgt))
        rows.append({"layer": layer, **{k: float(np.mean(v)) for k, v in acc.items()}})
    return rows


def layer_similarity_csv(rows: list[dict[str, float]]) -> str:
    lines = ["layer,src_reg,reg_tgt,src_tgt"]
    lines += [f"{r['layer']},{r['src_reg']!r},{r['reg_tgt']!r},{r['src_tgt']!r}" for r in rows]
    return "\n".join(lines) + "\n"


def export_hidden(params: ModelParams, langs: LanguageSet, instances: Sequence[TranslationInstance], layer: int, path) -> int:
    """Write one labeled row per token of ``layer``'s states; returns the row count.

    Columns are ``h0..h{d-1}`` followed by ``block`` (src/reg/tgt), ``lang``
    and ``direction``. Surface tokens carry their own language; tags,
    registers and reserved ids count as the target language, except the
    source-side eos, which counts as the source language.
    """
    if not 0 <= layer <= params.config.n_layers:
        raise IndexError(f"layer {layer} outside 0..{params.config.n_layers}")
    hidden, layouts = _hidden_states(params, langs, instances)
    states = hidden[layer]
    d = params.config.d_model
    batch = pack_instances(langs, instances, params.config.layout_variant)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"h{j}" for j in range(d)] + ["block", "lang", "direction"])
    n_rows = 0
    for i, (inst, lay) in enumerate(zip(instances, layouts)):
        direction = f"{inst.src_lang}-{inst.tgt_lang}"
        for pos in range(lay.length):
            block = lay.block_of(pos)
            tok = int(batch.token_ids[i, pos])
            owner = langs.language_of(tok)
            if owner is None:
                owner = inst.tgt_lang if block != "src" or langs.is_tag(tok) else inst.src_lang
            w.writerow([repr(float(v)) for v in states[i, pos]] + [block, owner, direction])
            n_rows += 1
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
    return n_rows


def strip_eos(tokens: Sequence[int]) -> list[int]:
    return [t for t in tokens if t != EOS]
