"""Synthetic multilingual translation corpus.

Each artificial language renders the same concept inventory with its own
disjoint block of surface tokens, and applies a fixed word-order rule when it
is the target side. Because no surface token is shared between languages,
the language of any generated token is known exactly.

Vocabulary layout::

    0 <pad>   1 <bos>   2 <eos>
    3 .. 3+K-1           language tags  <2L0> .. <2L{K-1}>
    3+K + k*C + j        surface tokens of language k (C per language)
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError

PAD, BOS, EOS = 0, 1, 2
N_RESERVED = 3
REORDER_CYCLE = ("identity", "reverse", "rotate_1")


@dataclass(frozen=True)
class LanguageSpec:
    lang_id: int
    tag_token: int
    surface_tokens: tuple[int, ...]
    reorder_rule: str

    def reorder(self, concepts: Sequence[int]) -> list[int]:
        return apply_reorder(self.reorder_rule, concepts)

    def render(self, concepts: Sequence[int]) -> list[int]:
        return [self.surface_tokens[c] for c in concepts]


def apply_reorder(rule: str, concepts: Sequence[int]) -> list[int]:
    seq = list(concepts)
    if rule == "identity":
        return seq
    if rule == "reverse":
        return seq[::-1]
    if rule.startswith("rotate_"):
        k = int(rule.split("_", 1)[1])
        if not seq:
            return seq
        k %= len(seq)
        return seq[k:] + seq[:k]
    raise ConfigurationError(f"unknown reorder rule {rule!r}")


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigurationError("vocabulary strings must be unique")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._index[token]

    def token(self, idx: int) -> str:
        return self.tokens[idx]


@dataclass(frozen=True)
class TranslationInstance:
    src_lang: int
    tgt_lang: int
    concepts: tuple[int, ...]
    x: tuple[int, ...]
    y: tuple[int, ...]

    @property
    def direction(self) -> tuple[int, int]:
        return (self.src_lang, self.tgt_lang)


@dataclass(frozen=True)
class ConnectivityGraph:
    """Which ordered language pairs carry supervision."""

    n_languages: int
    pivot: int
    groups: tuple[tuple[int, ...], ...] = ()
    bridges: tuple[tuple[int, ...], ...] = ()
    edges: frozenset[tuple[int, int]] = field(default_factory=frozenset)

    @property
    def directions(self) -> list[tuple[int, int]]:
        k = self.n_languages
        return [(s, t) for s in range(k) for t in range(k) if s != t]

    @property
    def supervised(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    @property
    def zero_shot(self) -> list[tuple[int, int]]:
        return [d for d in self.directions if d not in self.edges]

    def is_supervised(self, src: int, tgt: int) -> bool:
        return (src, tgt) in self.edges


def pivot_graph(n_languages: int, pivot: int = 0) -> ConnectivityGraph:
    """Star topology: only directions into or out of the pivot are supervised."""
    if not 0 <= pivot < n_languages:
        raise ConfigurationError(f"pivot {pivot} outside [0, {n_languages})")
    edges = set()
    for k in range(n_languages):
        if k != pivot:
            edges.add((pivot, k))
            edges.add((k, pivot))
    return ConnectivityGraph(n_languages, pivot, edges=frozenset(edges))


def bridge_graph(
    n_languages: int,
    pivot: int,
    groups: Sequence[Sequence[int]],
    bridges: Sequence[Sequence[int]],
) -> ConnectivityGraph:
    """Bridge-language topology.

    The pivot connects with every language, all bridges connect with each
    other, and each bridge connects with the other members of its group.
    """
    if len(groups) != len(bridges):
        raise ConfigurationError("need one bridge list per group")
    members = [k for g in groups for k in g]
    if sorted(members + [pivot]) != list(range(n_languages)):
        raise ConfigurationError("groups plus pivot must partition the languages")
    for g, b in zip(groups, bridges):
        if not set(b) <= set(g):
            raise ConfigurationError(f"bridges {list(b)} not inside group {list(g)}")
    edges = set(pivot_graph(n_languages, pivot).edges)
    all_bridges = [k for b in bridges for k in b]
    for a, b in itertools.permutations(all_bridges, 2):
        edges.add((a, b))
    for g, b in zip(groups, bridges):
        for hub in b:
            for other in g:
                if other != hub:
                    edges.add((hub, other))
                    edges.add((other, hub))
    return ConnectivityGraph(
        n_languages,
        pivot,
        groups=tuple(tuple(g) for g in groups),
        bridges=tuple(tuple(b) for b in bridges),
        edges=frozenset(edges),
    )


def build_languages(n_languages: int, n_concepts: int, seed: int) -> tuple[list[LanguageSpec], Vocabulary]:
    if n_languages < 2:
        raise ConfigurationError(f"need at least 2 languages, got {n_languages}")
    if n_concepts < 2:
        raise ConfigurationError(f"need at least 2 concepts, got {n_concepts}")
    rng = np.random.default_rng(seed)
    tokens = ["<pad>", "<bos>", "<eos>"] + [f"<2L{k}>" for k in range(n_languages)]
    languages = []
    base = N_RESERVED + n_languages
    for k in range(n_languages):
        block = base + k * n_concepts + rng.permutation(n_concepts)
        languages.append(
            LanguageSpec(
                lang_id=k,
                tag_token=N_RESERVED + k,
                surface_tokens=tuple(int(t) for t in block),
                reorder_rule=REORDER_CYCLE[k % len(REORDER_CYCLE)],
            )
        )
        tokens.extend(f"L{k}_w{j}" for j in range(n_concepts))
    return languages, Vocabulary(tuple(tokens))


@dataclass
class LanguageSet:
    """Languages plus the reverse token lookup needed for language ID."""

    languages: list[LanguageSpec]
    vocab: Vocabulary

    def __post_init__(self):
        self._owner = {}
        self._concept = {}
        for lang in self.languages:
            for concept, tok in enumerate(lang.surface_tokens):
                self._owner[tok] = lang.lang_id
                self._concept[tok] = concept

    @classmethod
    def build(cls, n_languages: int, n_concepts: int, seed: int) -> "LanguageSet":
        return cls(*build_languages(n_languages, n_concepts, seed))

    @property
    def n_languages(self) -> int:
        return len(self.languages)

    @property
    def n_concepts(self) -> int:
        return len(self.languages[0].surface_tokens)

    def language_of(self, token: int) -> int | None:
        """Owning language of a surface token, None for reserved and tag ids."""
        return self._owner.get(int(token))

    def concept_of(self, token: int) -> int:
        return self._concept[int(token)]

    def tag(self, lang: int) -> int:
        return self.lang(lang).tag_token

    def lang(self, lang: int) -> LanguageSpec:
        if not 0 <= lang < len(self.languages):
            raise KeyError(f"unknown language {lang}")
        return self.languages[lang]

    def is_tag(self, token: int) -> bool:
        return N_RESERVED <= token < N_RESERVED + len(self.languages)


def generate_instance(
    langs: LanguageSet,
    src_lang: int,
    tgt_lang: int,
    length_range: tuple[int, int],
    seed,
) -> TranslationInstance:
    lmin, lmax = length_range
    if lmin < 1 or lmax < lmin:
        raise ConfigurationError(f"bad length range {length_range}")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(lmin, lmax + 1))
    concepts = tuple(int(c) for c in rng.integers(0, langs.n_concepts, size=n))
    return make_instance(langs, src_lang, tgt_lang, concepts)


def make_instance(langs: LanguageSet, src_lang: int, tgt_lang: int, concepts: Sequence[int]) -> TranslationInstance:
    src, tgt = langs.lang(src_lang), langs.lang(tgt_lang)
    return TranslationInstance(
        src_lang=src_lang,
        tgt_lang=tgt_lang,
        concepts=tuple(concepts),
        x=tuple(src.render(concepts)),
        y=tuple(tgt.render(tgt.reorder(concepts))),
    )


def encode(langs: LanguageSet, inst: TranslationInstance, tgt_tag: int | None = None):
    """Pack an instance for the model.

    Returns ``(x_prime, tgt_in, tgt_out)``: the tagged source ``tag ++ x ++ eos``,
    the teacher-forcing input ``bos ++ y`` and the prediction target ``y ++ eos``.
    """
    tag = langs.tag(inst.tgt_lang) if tgt_tag is None else tgt_tag
    if not langs.is_tag(tag):
        raise KeyError(f"{tag} is not a language tag id")
    x_prime = [tag, *inst.x, EOS]
    return x_prime, [BOS, *inst.y], [*inst.y, EOS]


def decode_source(x_prime: Sequence[int]) -> list[int]:
    """Inverse of the source half of :func:`encode`."""
    body = list(x_prime[1:])
    if body and body[-1] == EOS:
        body = body[:-1]
    return body


@dataclass
class SyntheticCorpus:
    langs: LanguageSet
    graph: ConnectivityGraph
    train: list[TranslationInstance]
    valid: list[TranslationInstance]
    test: list[TranslationInstance]
    sizes: dict[tuple[int, int], int]

    @property
    def vocab_size(self) -> int:
        return len(self.langs.vocab)

    def by_direction(self, split: str) -> dict[tuple[int, int], list[TranslationInstance]]:
        out: dict[tuple[int, int], list[TranslationInstance]] = {}
        for inst in getattr(self, split):
            out.setdefault(inst.direction, []).append(inst)
        return out


_SPLIT_IDS = {"train": 0, "valid": 1, "test": 2, "finetune": 3, "finetune_valid": 4}


def _instance_seed(seed: int, split: str, src: int, tgt: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, _SPLIT_IDS[split], src, tgt, index])


def build_corpus(
    langs: LanguageSet,
    graph: ConnectivityGraph,
    sizes: dict[tuple[int, int], int],
    length_range: tuple[int, int],
    seed: int,
    n_valid: int = 50,
    n_test: int = 50,
) -> SyntheticCorpus:
    """Generate train/valid over supervised edges and test over every direction.

    Each instance draws from its own seed stream keyed by
    (seed, split, src, tgt, index), so the splits never share a stream.
    """
    for edge, n in sizes.items():
        if edge not in graph.edges:
            raise ConfigurationError(f"direction {edge} is zero-shot and cannot be trained on")
        if n <= 0:
            raise ConfigurationError(f"direction {edge} needs at least one training instance, got {n}")
    missing = [e for e in graph.supervised if e not in sizes]
    if missing:
        raise ConfigurationError(f"no training size given for supervised directions {missing}")

    def gen(split, edges, count_of):
        out = []
        for src, tgt in edges:
            for i in range(count_of(src, tgt)):
                out.append(generate_instance(langs, src, tgt, length_range, _instance_seed(seed, split, src, tgt, i)))
        return out

    edges = graph.supervised
    return SyntheticCorpus(
        langs=langs,
        graph=graph,
        train=gen("train", edges, lambda s, t: sizes[(s, t)]),
        valid=gen("valid", edges, lambda s, t: n_valid),
        test=gen("test", graph.directions, lambda s, t: n_test),
        sizes=dict(sizes),
    )


def finetune_corpus(
    corpus: SyntheticCorpus,
    directions: Sequence[tuple[int, int]],
    n_train: int,
    n_valid: int,
    length_range: tuple[int, int],
    seed: int,
) -> SyntheticCorpus:
    """Fresh train/valid data for ``directions`` (zero-shot ones included); test kept.

    The instances come from their own seed streams, so they never repeat the
    pre-training or test data.
    """
    directions = sorted(set(directions))
    if not directions:
        raise ConfigurationError("no fine-tuning directions given")
    if n_train <= 0 or n_valid <= 0:
        raise ConfigurationError("fine-tuning needs at least one train and one valid instance per direction")
    for src, tgt in directions:
        if src == tgt or not (0 <= src < corpus.langs.n_languages and 0 <= tgt < corpus.langs.n_languages):
            raise ConfigurationError(f"bad fine-tuning direction {(src, tgt)}")
    langs = corpus.langs

    def gen(split, n):
        return [
            generate_instance(langs, s, t, length_range, _instance_seed(seed, split, s, t, i))
            for s, t in directions
            for i in range(n)
        ]

    graph = replace(corpus.graph, edges=frozenset(directions))
    return SyntheticCorpus(langs, graph, gen("finetune", n_train), gen("finetune_valid", n_valid), corpus.test, {d: n_train for d in directions})


# ---------------------------------------------------------------- text format


def format_instance(inst: TranslationInstance) -> str:
    return "\t".join(
        [str(inst.src_lang), str(inst.tgt_lang), " ".join(map(str, inst.x)), " ".join(map(str, inst.y))]
    )


def write_instances(path: Path | str, instances: Iterable[TranslationInstance]) -> None:
    lines = [format_instance(inst) + "\n" for inst in instances]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)


def parse_line(langs: LanguageSet, line: str) -> TranslationInstance:
    """Parse one corpus line; the target column may be missing or empty."""
    parts = line.rstrip("\n").split("\t")
    if len(parts) < 3:
        raise ValueError(f"expected at least 3 tab-separated fields, got {len(parts)}")
    src, tgt = int(parts[0]), int(parts[1])
    x = tuple(int(t) for t in parts[2].split())
    y = tuple(int(t) for t in parts[3].split()) if len(parts) > 3 and parts[3] else ()
    for tok in x:
        if langs.language_of(tok) != src:
            raise ValueError(f"source token {tok} does not belong to language {src}")
    concepts = tuple(langs.concept_of(t) for t in x)
    return TranslationInstance(src, tgt, concepts, x, y)


def read_instances(path: Path | str, langs: LanguageSet) -> list[TranslationInstance]:
    with open(path, encoding="utf-8") as fh:
        return [parse_line(langs, line) for line in fh if line.strip()]
