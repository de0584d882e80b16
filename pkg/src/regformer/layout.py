"""Packed-sequence layouts and attention visibility.

A packed sequence is ``[source | registers | target]``. The source block is
the tagged source ``x'``, the register block holds copies of the target
language tag, and the target block is the teacher-forced target stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

VARIANTS = ("vanilla", "registering", "registers_no_mask", "ratio")


@dataclass(frozen=True)
class Variant:
    """Model variant; ``ratio`` is len(x') / len(r) and only used by ``ratio``."""

    name: str
    ratio: float = 1.0

    def __post_init__(self):
        if self.name not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.name!r}; expected one of {VARIANTS}")
        if self.name == "ratio" and not self.ratio > 0:
            raise ConfigurationError(f"register ratio must be positive, got {self.ratio}")

    @classmethod
    def parse(cls, spec: "str | Variant") -> "Variant":
        """Accept ``vanilla``, ``registering``, ``registers_no_mask`` or ``ratio(1.25)``."""
        if isinstance(spec, Variant):
            return spec
        spec = spec.strip()
        if spec.startswith("ratio(") and spec.endswith(")"):
            return cls("ratio", float(spec[6:-1]))
        return cls(spec)

    @property
    def has_registers(self) -> bool:
        return self.name != "vanilla"

    @property
    def register_masked(self) -> bool:
        """True when targets see registers but never the source."""
        return self.name in ("registering", "ratio")

    def __str__(self) -> str:
        return f"ratio({self.ratio:g})" if self.name == "ratio" else self.name


def register_length(src_len: int, variant: Variant) -> int:
    if variant.name == "vanilla":
        return 0
    if variant.name == "ratio":
        # round half up
        return max(1, math.floor(src_len / variant.ratio + 0.5))
    return src_len


@dataclass(frozen=True)
class SequenceLayout:
    src_len: int
    reg_len: int
    tgt_len: int
    variant: Variant

    @property
    def length(self) -> int:
        return self.src_len + self.reg_len + self.tgt_len

    @property
    def prefix_len(self) -> int:
        return self.src_len + self.reg_len

    @property
    def positions(self) -> np.ndarray:
        return np.arange(self.length)

    @property
    def src_slice(self) -> slice:
        return slice(0, self.src_len)

    @property
    def reg_slice(self) -> slice:
        return slice(self.src_len, self.prefix_len)

    @property
    def tgt_slice(self) -> slice:
        return slice(self.prefix_len, self.length)

    def block_of(self, index: int) -> str:
        if index < self.src_len:
            return "src"
        if index < self.prefix_len:
            return "reg"
        return "tgt"

    def with_target(self, tgt_len: int) -> "SequenceLayout":
        return SequenceLayout(self.src_len, self.reg_len, tgt_len, self.variant)


def build_layout(src_len: int, tgt_len: int, variant: "Variant | str") -> SequenceLayout:
    variant = Variant.parse(variant)
    if src_len < 2:
        raise ConfigurationError(f"source block needs at least tag and eos, got length {src_len}")
    if tgt_len < 0:
        raise ConfigurationError(f"negative target length {tgt_len}")
    return SequenceLayout(src_len, register_length(src_len, variant), tgt_len, variant)


@dataclass(frozen=True)
class AttentionMask:
    """``visible[i, j]`` is True when row i may attend to column j."""

    visible: np.ndarray
    layout: SequenceLayout

    @property
    def shape(self) -> tuple[int, int]:
        return self.visible.shape

    def dump(self) -> str:
        lay = self.layout
        lines = [f"src={lay.src_len} reg={lay.reg_len} tgt={lay.tgt_len} variant={lay.variant}"]
        lines += ["".join("1" if v else "." for v in row) for row in self.visible]
        return "\n".join(lines) + "\n"


def build_mask(layout: SequenceLayout) -> AttentionMask:
    r, t = layout.reg_len, layout.tgt_len
    n = layout.length
    src, reg, tgt = layout.src_slice, layout.reg_slice, layout.tgt_slice
    vis = np.zeros((n, n), dtype=bool)
    vis[src, src] = True
    causal_tgt = np.tril(np.ones((t, t), dtype=bool))
    name = layout.variant.name
    if name == "vanilla":
        vis[tgt, src] = True
        vis[tgt, tgt] = causal_tgt
    elif name in ("registering", "ratio"):
        vis[reg, src] = True
        vis[reg, reg] = True
        vis[tgt, reg] = True
        vis[tgt, tgt] = causal_tgt
    elif name == "registers_no_mask":
        vis[reg, src] = True
        vis[reg, reg] = np.tril(np.ones((r, r), dtype=bool))
        vis[tgt, src] = True
        vis[tgt, reg] = True
        vis[tgt, tgt] = causal_tgt
    else:  # pragma: no cover - Variant validates names
        raise ConfigurationError(name)
    return AttentionMask(vis, layout)


def mask_oracle(layout: SequenceLayout) -> AttentionMask:
    """Cell-by-cell restatement of the visibility rules, for testing only."""
    n = layout.length
    name = layout.variant.name
    vis = np.zeros((n, n), dtype=bool)
    for i in range(n):
        row_block = layout.block_of(i)
        for j in range(n):
            col_block = layout.block_of(j)
            if row_block == "src":
                ok = col_block == "src"
            elif row_block == "reg":
                if col_block == "src":
                    ok = True
                elif col_block == "reg":
                    ok = True if name != "registers_no_mask" else j <= i
                else:
                    ok = False
            else:
                if col_block == "src":
                    ok = name in ("vanilla", "registers_no_mask")
                elif col_block == "reg":
                    ok = True
                else:
                    ok = j <= i
            vis[i, j] = ok
    return AttentionMask(vis, layout)


def incremental_mask_row(layout: SequenceLayout, step: int) -> np.ndarray:
    """Visibility of the ``step``-th target slot (1-based) over the first prefix_len + step columns."""
    if step < 1:
        raise ConfigurationError(f"decode steps are 1-based, got {step}")
    row = np.zeros(layout.prefix_len + step, dtype=bool)
    name = layout.variant.name
    if name in ("vanilla", "registers_no_mask"):
        row[: layout.src_len] = True
    row[layout.src_len : layout.prefix_len] = True
    row[layout.prefix_len :] = True
    return row


def prefix_mask(layout: SequenceLayout) -> np.ndarray:
    """Visibility among source and register slots only (rows never look ahead into targets)."""
    return build_mask(layout.with_target(0)).visible


def retained_prefix_columns(layout: SequenceLayout) -> np.ndarray:
    """Prefix columns that any target row can see: the part of the cache worth keeping."""
    return incremental_mask_row(layout, 1)[: layout.prefix_len]
