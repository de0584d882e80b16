"""Turn translation instances into padded model inputs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import PAD, LanguageSet, TranslationInstance, encode
from .layout import SequenceLayout, Variant, build_layout, build_mask


@dataclass
class PackedBatch:
    token_ids: np.ndarray  # [B, L] int
    positions: np.ndarray  # [B, L] int
    visible: np.ndarray  # [B, L, L] bool
    targets: np.ndarray  # [B, L] int, next-token ids at target slots
    ignore: np.ndarray  # [B, L] bool, True everywhere except target slots
    layouts: list[SequenceLayout]

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def n_target_tokens(self) -> int:
        return int((~self.ignore).sum())

    @property
    def n_source_tokens(self) -> int:
        return sum(lay.src_len for lay in self.layouts)


def pack_sequence(x_prime: Sequence[int], tgt_tag: int, tgt_in: Sequence[int], variant: Variant):
    """Lay out one example as ``x' ++ r ++ tgt_in`` with every register holding the target tag."""
    layout = build_layout(len(x_prime), len(tgt_in), variant)
    ids = [*x_prime, *([tgt_tag] * layout.reg_len), *tgt_in]
    return np.asarray(ids, dtype=np.int64), layout


def pack_instances(
    langs: LanguageSet,
    instances: Sequence[TranslationInstance],
    variant: "Variant | str",
    with_targets: bool = True,
) -> PackedBatch:
    """Pad a list of instances into one batch.

    Padding slots see only themselves and are invisible to real slots, so they
    never influence real activations. With ``with_targets=False`` only the
    prefix (source and registers) is packed.
    """
    variant = Variant.parse(variant)
    rows = []
    for inst in instances:
        x_prime, tgt_in, tgt_out = encode(langs, inst)
        if not with_targets:
            tgt_in, tgt_out = [], []
        ids, layout = pack_sequence(x_prime, langs.tag(inst.tgt_lang), tgt_in, variant)
        rows.append((ids, layout, tgt_out))
    width = max(len(ids) for ids, _, _ in rows)
    b = len(rows)
    token_ids = np.full((b, width), PAD, dtype=np.int64)
    positions = np.zeros((b, width), dtype=np.int64)
    visible = np.zeros((b, width, width), dtype=bool)
    targets = np.full((b, width), PAD, dtype=np.int64)
    ignore = np.ones((b, width), dtype=bool)
    idx = np.arange(width)
    visible[:, idx, idx] = True
    layouts = []
    for i, (ids, layout, tgt_out) in enumerate(rows):
        n = len(ids)
        token_ids[i, :n] = ids
        positions[i, :n] = layout.positions
        visible[i, :n, :n] = build_mask(layout).visible
        if tgt_out:
            targets[i, layout.tgt_slice] = tgt_out
            ignore[i, layout.tgt_slice] = False
        layouts.append(layout)
    return PackedBatch(token_ids, positions, visible, targets, ignore, layouts)
