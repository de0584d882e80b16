"""Pre-norm decoder-only transformer over packed ``[source | registers | target]`` sequences.

Parameters live in a flat, ordered ``name -> Tensor`` dict. The output
projection is the token embedding itself (weight tying). Optional LoRA
adapters add low-rank updates to the query and value projections only.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, LengthError
from .layout import Variant
from .tensor import Tensor


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int = 512
    dropout: float = 0.1
    attention_dropout: float = 0.1
    max_positions: int = 128
    variant: str = "registering"
    ratio: float = 1.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_ff < self.d_model:
            raise ConfigurationError(f"d_ff={self.d_ff} must be at least d_model={self.d_model}")
        if self.d_model % 2:
            raise ConfigurationError("d_model must be even for sinusoidal positions")
        Variant.parse(self.layout_variant_spec)

    @property
    def layout_variant_spec(self) -> str:
        return f"ratio({self.ratio})" if self.variant == "ratio" else self.variant

    @property
    def layout_variant(self) -> Variant:
        return Variant.parse(self.layout_variant_spec)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LoraAdapter:
    rank: int
    scale: float
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def n_trainable(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]
    lora: LoraAdapter | None = None

    @property
    def embedding(self) -> Tensor:
        return self.tensors["embed"]

    @property
    def output_projection(self) -> Tensor:
        # tied: the very same Tensor object as the input embedding
        return self.tensors["embed"]

    def trainable(self) -> dict[str, Tensor]:
        if self.lora is not None:
            return dict(self.lora.tensors)
        return {k: t for k, t in self.tensors.items() if t.requires_grad}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()
        if self.lora is not None:
            for t in self.lora.tensors.values():
                t.zero_grad()

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


LAYER_PARAM_SHAPES = (
    ("ln1.gain", "d"),
    ("ln1.bias", "d"),
    ("attn.q.weight", "dd"),
    ("attn.q.bias", "d"),
    ("attn.k.weight", "dd"),
    ("attn.k.bias", "d"),
    ("attn.v.weight", "dd"),
    ("attn.v.bias", "d"),
    ("attn.o.weight", "dd"),
    ("attn.o.bias", "d"),
    ("ln2.gain", "d"),
    ("ln2.bias", "d"),
    ("ff1.weight", "df"),
    ("ff1.bias", "f"),
    ("ff2.weight", "fd"),
    ("ff2.bias", "d"),
)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d_model, config.d_ff
    dims = {"d": (d,), "f": (f,), "dd": (d, d), "df": (d, f), "fd": (f, d)}
    shapes = {"embed": (config.vocab_size, d)}
    for i in range(config.n_layers):
        for name, kind in LAYER_PARAM_SHAPES:
            shapes[f"layers.{i}.{name}"] = dims[kind]
    shapes["final_ln.gain"] = (d,)
    shapes["final_ln.bias"] = (d,)
    return shapes


def init_params(config: ModelConfig, seed: int, std: float = 0.02) -> ModelParams:
    """Normal(0, std) for embeddings and projections, zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape, dtype=T.current_dtype())
        elif name.endswith(".bias"):
            data = np.zeros(shape, dtype=T.current_dtype())
        else:
            data = rng.normal(0.0, std, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(config, tensors)


def attach_lora(params: ModelParams, rank: int = 8, seed: int = 0, alpha: float | None = None) -> LoraAdapter:
    """Freeze the base model and add rank-``rank`` adapters on Q and V.

    ``A`` is Gaussian, ``B`` starts at zero, so the adapted model is exactly the
    base model until the first update.
    """
    if rank < 1:
        raise ConfigurationError(f"LoRA rank must be >= 1, got {rank}")
    cfg = params.config
    rng = np.random.default_rng(seed)
    scale = 1.0 if alpha is None else alpha / rank
    tensors = {}
    for i in range(cfg.n_layers):
        for proj in ("q", "v"):
            a = rng.normal(0.0, 1.0 / math.sqrt(cfg.d_model), size=(cfg.d_model, rank))
            tensors[f"layers.{i}.attn.{proj}.lora_a"] = Tensor(a, requires_grad=True)
            tensors[f"layers.{i}.attn.{proj}.lora_b"] = Tensor(np.zeros((rank, cfg.d_model)), requires_grad=True)
    for name, t in tensors.items():
        t.name = name
    for t in params.tensors.values():
        t.requires_grad = False
        t.grad = None
    params.lora = LoraAdapter(rank, scale, tensors)
    return params.lora


class _PositionTable:
    _cache: dict[tuple, np.ndarray] = {}

    @classmethod
    def get(cls, n: int, d: int) -> np.ndarray:
        key = (n, d, T.current_dtype())
        if key not in cls._cache:
            cls._cache[key] = T.sinusoidal_positions(0, n, d)
        return cls._cache[key]


def _check_lengths(config: ModelConfig, positions: np.ndarray) -> None:
    if positions.size and int(positions.max()) >= config.max_positions:
        raise LengthError(f"sequence needs position {int(positions.max())}, model allows < {config.max_positions}")


def _proj(params: ModelParams, h: Tensor, prefix: str, name: str) -> Tensor:
    w = params.tensors[f"{prefix}.{name}.weight"]
    out = T.matmul(h, w) + params.tensors[f"{prefix}.{name}.bias"]
    lora = params.lora
    if lora is not None and f"{prefix}.{name}.lora_a" in lora.tensors:
        a = lora.tensors[f"{prefix}.{name}.lora_a"]
        b = lora.tensors[f"{prefix}.{name}.lora_b"]
        out = out + T.matmul(T.matmul(h, a), b) * lora.scale
    return out


def forward(
    params: ModelParams,
    token_ids,
    positions,
    visible,
    train: bool = False,
    rng: np.random.Generator | None = None,
    capture: dict | None = None,
    input_offset: Tensor | None = None,
    output_rows: np.ndarray | None = None,
) -> Tensor:
    """Logits at every slot of a packed batch.

    ``token_ids`` and ``positions`` are ``[B, L]`` (or ``[L]`` for a single
    sequence, in which case the logits come back as ``[L, V]``); ``visible``
    is the matching ``[B, L, L]`` boolean mask or an :class:`AttentionMask`.
    ``capture``, when given, receives per-layer hidden states, attention
    probabilities and keys/values as plain arrays. ``output_rows`` (flat
    indices into ``B * L``) restricts the vocabulary projection to those slots
    and returns ``[len(output_rows), V]``.
    """
    cfg = params.config
    token_ids = np.asarray(token_ids, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    visible = np.asarray(getattr(visible, "visible", visible), dtype=bool)
    single = token_ids.ndim == 1
    if single:
        token_ids, positions, visible = token_ids[None], positions[None], visible[None]
    _check_lengths(cfg, positions)
    b, n = token_ids.shape
    d, h, dh = cfg.d_model, cfg.n_heads, cfg.d_head
    p_drop = cfg.dropout if train else 0.0
    a_drop = cfg.attention_dropout if train else 0.0

    x = T.embedding(params.embedding, token_ids) * math.sqrt(d)
    x = x + _PositionTable.get(cfg.max_positions, d)[positions]
    if input_offset is not None:
        x = x + input_offset
    x = T.dropout(x, p_drop, rng, train)
    if capture is not None:
        capture.setdefault("hidden", []).append(x.data)
    head_mask = visible[:, None, :, :]
    scale = 1.0 / math.sqrt(dh)
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        tp = params.tensors
        hn = T.layer_norm(x, tp[f"{pre}.ln1.gain"], tp[f"{pre}.ln1.bias"])
        q = _split_heads(_proj(params, hn, pre, "attn.q"), b, n, h, dh)
        k = _split_heads(_proj(params, hn, pre, "attn.k"), b, n, h, dh)
        v = _split_heads(_proj(params, hn, pre, "attn.v"), b, n, h, dh)
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale
        probs = T.masked_softmax(scores, head_mask)
        if capture is not None:
            capture.setdefault("attn", []).append(probs.data)
            capture.setdefault("kv", []).append((k.data, v.data))
        ctx = T.matmul(T.dropout(probs, a_drop, rng, train), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
        x = x + T.dropout(_proj(params, ctx, pre, "attn.o"), p_drop, rng, train)
        hn = T.layer_norm(x, tp[f"{pre}.ln2.gain"], tp[f"{pre}.ln2.bias"])
        ff = T.relu(_proj(params, hn, pre, "ff1"))
        x = x + T.dropout(_proj(params, ff, pre, "ff2"), p_drop, rng, train)
        if capture is not None:
            capture["hidden"].append(x.data)
    if output_rows is not None:
        x = T.take_rows(x, output_rows)
    x = T.layer_norm(x, params.tensors["final_ln.gain"], params.tensors["final_ln.bias"])
    logits = T.matmul(x, T.transpose(params.output_projection, (1, 0)))
    if single and output_rows is None:
        logits = T.reshape(logits, logits.shape[1:])
    return logits


def _split_heads(t: Tensor, b: int, n: int, h: int, dh: int) -> Tensor:
    return T.transpose(T.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))


# ---------------------------------------------------------------- analysis hooks


def _as_inputs(inputs):
    token_ids, positions, visible = inputs
    return token_ids, positions, getattr(visible, "visible", visible)


def extract_attention(params: ModelParams, inputs, layer: int, head: "int | str" = "all") -> np.ndarray:
    """Post-softmax attention of decoder layer ``layer`` (1-based) for one sequence.

    ``head='all'`` averages the per-head matrices.
    """
    cfg = params.config
    if not 1 <= layer <= cfg.n_layers:
        raise IndexError(f"layer {layer} outside 1..{cfg.n_layers}")
    if head != "all" and not (isinstance(head, (int, np.integer)) and 0 <= head < cfg.n_heads):
        raise IndexError(f"head {head!r} outside 0..{cfg.n_heads - 1}")
    capture: dict = {}
    with T.no_grad():
        forward(params, *_as_inputs(inputs), capture=capture)
    probs = capture["attn"][layer - 1][0]
    return probs.mean(axis=0) if head == "all" else probs[head]


def extract_hidden(params: ModelParams, inputs, layer: int) -> np.ndarray:
    """Residual-stream states after ``layer`` decoder layers (0 = embedding output)."""
    if not 0 <= layer <= params.config.n_layers:
        raise IndexError(f"layer {layer} outside 0..{params.config.n_layers}")
    capture: dict = {}
    with T.no_grad():
        forward(params, *_as_inputs(inputs), capture=capture)
    return capture["hidden"][layer][0]


# ---------------------------------------------------------------- incremental path


def _proj_np(params: ModelParams, h: np.ndarray, prefix: str, name: str) -> np.ndarray:
    lead = h.shape[:-1]
    h2 = h.reshape(-1, h.shape[-1])
    out = h2 @ params.tensors[f"{prefix}.{name}.weight"].data + params.tensors[f"{prefix}.{name}.bias"].data
    lora = params.lora
    if lora is not None and f"{prefix}.{name}.lora_a" in lora.tensors:
        a = lora.tensors[f"{prefix}.{name}.lora_a"].data
        b = lora.tensors[f"{prefix}.{name}.lora_b"].data
        out = out + ((h2 @ a) @ b) * lora.scale
    return out.reshape(*lead, out.shape[-1])


def decode_step(
    params: ModelParams,
    token_ids: np.ndarray,
    positions: np.ndarray,
    cache: Sequence[tuple[np.ndarray, np.ndarray]],
    key_visible: np.ndarray,
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Advance ``N`` sequences by one token each against cached keys/values.

    ``cache[i]`` holds layer ``i``'s ``(K, V)``, shaped ``[N, H, C, dh]``;
    ``key_visible`` is ``[N, C + 1]`` and covers the cached keys plus the new
    token's own key. Returns logits ``[N, V]`` and the extended cache.
    """
    cfg = params.config
    token_ids = np.asarray(token_ids, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    _check_lengths(cfg, positions)
    n = token_ids.shape[0]
    d, h, dh = cfg.d_model, cfg.n_heads, cfg.d_head
    tp = params.tensors
    x = params.embedding.data[token_ids][:, None, :] * math.sqrt(d)
    x = x + _PositionTable.get(cfg.max_positions, d)[positions][:, None, :]
    vis = np.asarray(key_visible, bool)[:, None, None, :]
    vis_v = np.asarray(key_visible, bool)[:, None, :, None]
    scale = 1.0 / math.sqrt(dh)
    new_cache = []
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        hn, _, _ = T.layer_norm_np(x, tp[f"{pre}.ln1.gain"].data, tp[f"{pre}.ln1.bias"].data)
        q = _proj_np(params, hn, pre, "attn.q").reshape(n, 1, h, dh).transpose(0, 2, 1, 3)
        k = _proj_np(params, hn, pre, "attn.k").reshape(n, 1, h, dh).transpose(0, 2, 1, 3)
        v = _proj_np(params, hn, pre, "attn.v").reshape(n, 1, h, dh).transpose(0, 2, 1, 3)
        k_all = np.concatenate([cache[i][0], k], axis=2)
        v_all = np.concatenate([cache[i][1], v], axis=2)
        new_cache.append((k_all, v_all))
        # hidden cache entries must not leak in, whatever they contain
        k_use = np.where(vis_v, k_all, 0.0)
        v_use = np.where(vis_v, v_all, 0.0)
        probs = T.masked_softmax_np((q @ k_use.transpose(0, 1, 3, 2)) * scale, vis)
        ctx = (probs @ v_use).transpose(0, 2, 1, 3).reshape(n, 1, d)
        x = x + _proj_np(params, ctx, pre, "attn.o")
        hn, _, _ = T.layer_norm_np(x, tp[f"{pre}.ln2.gain"].data, tp[f"{pre}.ln2.bias"].data)
        ff = np.maximum(_proj_np(params, hn, pre, "ff1"), 0.0)
        x = x + _proj_np(params, ff, pre, "ff2")
    x, _, _ = T.layer_norm_np(x, tp["final_ln.gain"].data, tp["final_ln.bias"].data)
    logits = x @ params.embedding.data.T
    return logits[:, 0, :], new_cache
