"""Cached autoregressive decoding.

Decoding runs in two phases. The prefix phase runs source and register slots
through the model once; their rows never look at targets, so their keys and
values are final. Only the prefix columns a target row can see are kept:
the register block under registering, the source block for the vanilla model.
The generation phase then appends one key/value per layer per token.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import BOS, EOS, PAD
from .errors import ConfigurationError
from .layout import SequenceLayout, build_layout, prefix_mask, retained_prefix_columns
from .model import ModelParams, decode_step, forward


def default_max_len(src_len: int) -> int:
    return 2 * src_len + 8


@dataclass
class DecodeState:
    """Per-row decoding cache for ``N`` rows (sentences or beams).

    ``cache[i]`` holds layer ``i``'s keys and values ``[N, H, C, dh]``;
    ``key_visible[n, c]`` says whether row ``n`` may read cached column ``c``.
    ``real_columns`` separates cached entries from padding, and
    ``source_columns`` marks entries that came from the source block (only
    present when the prefix was computed with ``retain_source=True``).
    """

    params: ModelParams
    layouts: list[SequenceLayout]
    cache: list[tuple[np.ndarray, np.ndarray]]
    key_visible: np.ndarray
    real_columns: np.ndarray
    source_columns: np.ndarray
    next_position: np.ndarray
    max_len: np.ndarray
    attended_keys: list[np.ndarray] = field(default_factory=list)
    bos: int = BOS
    eos: int = EOS

    @property
    def n_rows(self) -> int:
        return self.key_visible.shape[0]

    @property
    def cache_length(self) -> np.ndarray:
        """Number of cached (non-padding) columns per row."""
        return self.real_columns.sum(axis=1)

    def step(self, tokens: Sequence[int]) -> np.ndarray:
        """Feed one token per row; returns log-probabilities ``[N, V]``."""
        tokens = np.asarray(tokens, dtype=np.int64)
        visible = np.concatenate([self.key_visible, np.ones((self.n_rows, 1), bool)], axis=1)
        logits, self.cache = decode_step(self.params, tokens, self.next_position, self.cache, visible)
        self.attended_keys.append(visible.sum(axis=1))
        self.key_visible = visible
        self.real_columns = np.concatenate([self.real_columns, np.ones((self.n_rows, 1), bool)], axis=1)
        self.source_columns = np.concatenate([self.source_columns, np.zeros((self.n_rows, 1), bool)], axis=1)
        self.next_position = self.next_position + 1
        return T.log_softmax_np(logits)

    def select(self, rows: Sequence[int]) -> "DecodeState":
        rows = np.asarray(rows, dtype=np.int64)
        return DecodeState(
            params=self.params,
            layouts=[self.layouts[r] for r in rows],
            cache=[(k[rows], v[rows]) for k, v in self.cache],
            key_visible=self.key_visible[rows],
            real_columns=self.real_columns[rows],
            source_columns=self.source_columns[rows],
            next_position=self.next_position[rows],
            max_len=self.max_len[rows],
            attended_keys=[a[rows] for a in self.attended_keys],
            bos=self.bos,
            eos=self.eos,
        )


def precompute_prefix(
    params: ModelParams,
    x_primes: Sequence[Sequence[int]],
    retain_source: bool = False,
    max_len: int | Sequence[int] | None = None,
) -> DecodeState:
    """Run the source and register blocks once and build the generation cache.

    ``x_primes`` are tagged sources (``tag ++ x ++ eos``); the first token of
    each is the target-language tag and seeds every register slot. Unless
    ``retain_source`` is set, prefix columns that no target row can see are
    dropped from the cache.
    """
    if x_primes and isinstance(x_primes[0], (int, np.integer)):
        x_primes = [x_primes]
    if not x_primes:
        raise ConfigurationError("nothing to decode")
    cfg = params.config
    variant = cfg.layout_variant
    layouts, rows = [], []
    for xp in x_primes:
        xp = [int(t) for t in xp]
        layout = build_layout(len(xp), 0, variant)
        layouts.append(layout)
        rows.append(xp + [xp[0]] * layout.reg_len)
    b = len(rows)
    width = max(len(r) for r in rows)
    ids = np.full((b, width), PAD, dtype=np.int64)
    pos = np.zeros((b, width), dtype=np.int64)
    vis = np.zeros((b, width, width), dtype=bool)
    vis[:, np.arange(width), np.arange(width)] = True
    keep = np.zeros((b, width), dtype=bool)
    seen = np.zeros((b, width), dtype=bool)
    is_src = np.zeros((b, width), dtype=bool)
    for i, (row, layout) in enumerate(zip(rows, layouts)):
        n = len(row)
        ids[i, :n] = row
        pos[i, :n] = np.arange(n)
        vis[i, :n, :n] = prefix_mask(layout)
        seen[i, :n] = retained_prefix_columns(layout)
        keep[i, :n] = True if retain_source else seen[i, :n]
        is_src[i, : layout.src_len] = True
    capture: dict = {}
    with T.no_grad():
        forward(params, ids, pos, vis, capture=capture)

    counts = keep.sum(axis=1)
    c = int(counts.max())
    h, dh = cfg.n_heads, cfg.d_head
    cache = []
    for k, v in capture["kv"]:
        kc = np.zeros((b, h, c, dh))
        vc = np.zeros((b, h, c, dh))
        for i in range(b):
            cols = np.flatnonzero(keep[i])
            kc[i, :, : len(cols)] = k[i][:, cols]
            vc[i, :, : len(cols)] = v[i][:, cols]
        cache.append((kc, vc))
    key_visible = np.zeros((b, c), dtype=bool)
    real_columns = np.arange(c)[None, :] < counts[:, None]
    source_columns = np.zeros((b, c), dtype=bool)
    for i in range(b):
        cols = np.flatnonzero(keep[i])
        key_visible[i, : len(cols)] = seen[i, cols]
        source_columns[i, : len(cols)] = is_src[i, cols]
    if max_len is None:
        limits = np.array([default_max_len(lay.src_len) for lay in layouts])
    else:
        limits = np.broadcast_to(np.asarray(max_len, dtype=np.int64), (b,)).copy()
    if np.any(limits < 1):
        raise ConfigurationError("max_len must be >= 1")
    return DecodeState(
        params=params,
        layouts=layouts,
        cache=cache,
        key_visible=key_visible,
        real_columns=real_columns,
        source_columns=source_columns,
        next_position=np.array([lay.prefix_len for lay in layouts], dtype=np.int64),
        max_len=limits,
    )


def decode_greedy(state, max_len: int | None = None) -> list[list[int]]:
    """Argmax decoding (ties go to the lowest token id); eos is not included in the output."""
    n = state.n_rows
    limits = state.max_len if max_len is None else np.full(n, max_len)
    if np.any(np.asarray(limits) < 1):
        raise ConfigurationError("max_len must be >= 1")
    out: list[list[int]] = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    last = np.full(n, state.bos, dtype=np.int64)
    for t in range(1, int(np.max(limits)) + 1):
        logp = state.step(last)
        nxt = np.argmax(logp, axis=-1)
        for i in range(n):
            if done[i]:
                continue
            if nxt[i] == state.eos:
                done[i] = True
            else:
                out[i].append(int(nxt[i]))
                if t >= limits[i]:
                    done[i] = True
        if done.all():
            break
        last = np.where(done, state.eos, nxt)
    return out


@dataclass
class BeamHypothesis:
    tokens: list[int]
    score: float
    finished: bool

    def rank_key(self, length_norm: bool) -> float:
        return self.score / max(1, len(self.tokens)) if length_norm else self.score


def decode_beam(state, beam: int = 5, max_len: int | None = None, length_norm: bool = True) -> list[list[int]]:
    """Beam search over every row of ``state``; returns the best sequence per row (eos stripped)."""
    return [best.tokens[:-1] if best.finished else best.tokens for best in beam_search(state, beam, max_len, length_norm)]


def beam_search(state, beam: int = 5, max_len: int | None = None, length_norm: bool = True) -> list[BeamHypothesis]:
    """Standard beam search with ``2 * beam`` candidates per step.

    An eos candidate closes a hypothesis only if it ranks inside the top
    ``beam``; a sentence stops once it has ``beam`` closed hypotheses or hits
    its length limit, at which point the open beams join the pool. The winner
    maximizes log-probability, divided by length when ``length_norm``.
    """
    if beam < 1:
        raise ConfigurationError(f"beam must be >= 1, got {beam}")
    b = state.n_rows
    limits = np.asarray(state.max_len if max_len is None else np.full(b, max_len))
    if np.any(limits < 1):
        raise ConfigurationError("max_len must be >= 1")
    state = state.select(np.repeat(np.arange(b), beam))
    scores = np.full((b, beam), -np.inf)
    scores[:, 0] = 0.0
    seqs: list[list[list[int]]] = [[[] for _ in range(beam)] for _ in range(b)]
    finished: list[list[BeamHypothesis]] = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    last = np.full(b * beam, state.bos, dtype=np.int64)
    eos = state.eos
    for t in range(1, int(limits.max()) + 1):
        logp = state.step(last)
        vocab = logp.shape[-1]
        cand = (scores[:, :, None] + logp.reshape(b, beam, vocab)).reshape(b, beam * vocab)
        rows = np.arange(b * beam)
        new_last = np.full(b * beam, eos, dtype=np.int64)
        new_scores = np.full((b, beam), -np.inf)
        new_seqs: list[list[list[int]]] = [[[] for _ in range(beam)] for _ in range(b)]
        for i in range(b):
            if done[i]:
                continue
            order = np.argsort(-cand[i], kind="stable")[: 2 * beam]
            live = []
            for rank, flat in enumerate(order):
                score = cand[i, flat]
                if not np.isfinite(score):
                    break
                r, tok = divmod(int(flat), vocab)
                if tok == eos:
                    if rank < beam:
                        finished[i].append(BeamHypothesis(seqs[i][r] + [eos], float(score), True))
                    continue
                live.append((r, tok, float(score)))
                if len(live) == beam:
                    break
            if len(finished[i]) >= beam or t >= limits[i] or not live:
                if len(finished[i]) < beam:
                    finished[i].extend(BeamHypothesis(seqs[i][r] + [tok], s, False) for r, tok, s in live)
                done[i] = True
                continue
            for j, (r, tok, s) in enumerate(live):
                rows[i * beam + j] = i * beam + r
                new_last[i * beam + j] = tok
                new_scores[i, j] = s
                new_seqs[i][j] = seqs[i][r] + [tok]
        if done.all():
            break
        state = state.select(rows)
        last, scores, seqs = new_last, new_scores, new_seqs
    results = []
    for i in range(b):
        pool = finished[i]
        best = pool[0]
        for hyp in pool[1:]:
            if hyp.rank_key(length_norm) > best.rank_key(length_norm):
                best = hyp
        results.append(best)
    return results


def translate(
    params: ModelParams,
    x_primes: Sequence[Sequence[int]],
    beam: int = 5,
    batch_size: int = 32,
    length_norm: bool = True,
) -> list[list[int]]:
    """Decode many tagged sources in fixed-size chunks."""
    out: list[list[int]] = []
    for i in range(0, len(x_primes), batch_size):
        state = precompute_prefix(params, list(x_primes[i : i + batch_size]))
        if beam == 1:
            out.extend(decode_greedy(state))
        else:
            out.extend(decode_beam(state, beam=beam, length_norm=length_norm))
    return out
