"""Checkpoint container: magic, manifest JSON, one binary blob.

Layout on disk::

    b"RGFCKPT\\0" | uint64 LE manifest length | manifest (UTF-8 JSON) | blob

The manifest lists every array with its section, shape, dtype and byte range
in the blob. Model parameters are stored as little-endian float32. The
optional optimizer section keeps Adam moments plus a full-precision master
copy of the trained tensors so that resuming continues bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CheckpointError
from .model import LoraAdapter, ModelConfig, ModelParams
from .tensor import AdamState, Tensor

MAGIC = b"RGFCKPT\0"
FORMAT_VERSION = 1
PARAM_DTYPE = "<f4"


def _state_dtype(array) -> str:
    # optimizer state keeps the training precision so resumes stay bit-exact
    return "<f4" if np.asarray(array).dtype == np.float32 else "<f8"


@dataclass
class Checkpoint:
    """In-memory image of a checkpoint file.

    ``kind`` is ``"full"`` (all model tensors) or ``"lora"`` (adapter tensors
    only, tied to a base model through ``base_hash``).
    """

    config: ModelConfig
    params: dict[str, np.ndarray]
    kind: str = "full"
    step: int = 0
    lora_rank: int | None = None
    lora_scale: float | None = None
    base_hash: str | None = None
    adam: AdamState | None = None
    master: dict[str, np.ndarray] | None = None
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def params_hash(config: ModelConfig, params: dict[str, np.ndarray]) -> str:
    """sha256 over the config and the float32 bytes of ``params`` in name order."""
    h = hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode())
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype=PARAM_DTYPE).tobytes())
    return h.hexdigest()


def from_model(params: ModelParams, step: int = 0, base_only: bool = False) -> Checkpoint:
    """Checkpoint of a model; with LoRA attached, only the adapters are kept."""
    if params.lora is not None and not base_only:
        base = {k: t.data for k, t in params.tensors.items()}
        return Checkpoint(
            config=params.config,
            params={k: t.data for k, t in params.lora.tensors.items()},
            kind="lora",
            step=step,
            lora_rank=params.lora.rank,
            lora_scale=params.lora.scale,
            base_hash=params_hash(params.config, base),
        )
    return Checkpoint(config=params.config, params={k: t.data for k, t in params.tensors.items()}, step=step)


def to_model(ckpt: Checkpoint, base: Checkpoint | None = None) -> ModelParams:
    """Rebuild trainable model parameters from a checkpoint.

    Tensors take the current precision (see :func:`tensor.precision`).

    A LoRA checkpoint needs its base; the base hash must match. When a
    master copy is present it is used instead of the float32 tensors.
    """

    def tensors(arrays, master, trainable):
        out = {}
        for k, a in arrays.items():
            data = master[k] if master is not None and k in master else a
            out[k] = Tensor(np.array(data), requires_grad=trainable, name=k)
        return out

    if ckpt.kind == "full":
        return ModelParams(ckpt.config, tensors(ckpt.params, ckpt.master, True))
    if base is None:
        raise CheckpointError("a LoRA checkpoint needs its base checkpoint")
    if base.kind != "full":
        raise CheckpointError("the base of a LoRA checkpoint must be a full checkpoint")
    if params_hash(base.config, base.params) != ckpt.base_hash:
        raise CheckpointError("base checkpoint does not match the hash recorded by the adapter")
    model = ModelParams(base.config, tensors(base.params, None, False))
    for t in model.tensors.values():
        t.grad = None
    model.lora = LoraAdapter(int(ckpt.lora_rank), float(ckpt.lora_scale), tensors(ckpt.params, ckpt.master, True))
    return model


def _adam_header(adam: AdamState) -> dict:
    return {"step": adam.step, "beta1": adam.beta1, "beta2": adam.beta2, "epsilon": adam.epsilon}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    entries = []
    chunks = []
    offset = 0

    def put(section, name, array, dtype):
        nonlocal offset
        raw = np.ascontiguousarray(array, dtype=dtype).tobytes()
        entries.append(
            {"section": section, "name": name, "shape": list(np.shape(array)), "dtype": dtype, "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)

    for name in ckpt.params:
        put("params", name, ckpt.params[name], PARAM_DTYPE)
    if ckpt.adam is not None:
        for name in sorted(ckpt.adam.m):
            put("adam.m", name, ckpt.adam.m[name], _state_dtype(ckpt.adam.m[name]))
            put("adam.v", name, ckpt.adam.v[name], _state_dtype(ckpt.adam.v[name]))
    if ckpt.master is not None:
        for name in ckpt.master:
            put("master", name, ckpt.master[name], _state_dtype(ckpt.master[name]))
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "model_config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "lora_rank": ckpt.lora_rank,
        "lora_scale": ckpt.lora_scale,
        "base_hash": ckpt.base_hash,
        "adam": None if ckpt.adam is None else _adam_header(ckpt.adam),
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "arrays": entries,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    start = len(MAGIC) + 8
    if len(raw) < start:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack("<Q", raw[len(MAGIC) : start])
    try:
        manifest = json.loads(raw[start : start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version!r}")
    blob = raw[start + n :]
    sections: dict[str, dict[str, np.ndarray]] = {}
    for e in manifest["arrays"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"array {e['name']!r} runs past the end of the file")
        arr = np.frombuffer(blob[e["offset"] : end], dtype=e["dtype"]).reshape(e["shape"]).copy()
        sections.setdefault(e["section"], {})[e["name"]] = arr
    adam = None
    if manifest["adam"] is not None:
        adam = AdamState(m=sections.get("adam.m", {}), v=sections.get("adam.v", {}), **manifest["adam"])
    return Checkpoint(
        config=ModelConfig(**manifest["model_config"]),
        params=sections.get("params", {}),
        kind=manifest["kind"],
        step=manifest["step"],
        lora_rank=manifest["lora_rank"],
        lora_scale=manifest["lora_scale"],
        base_hash=manifest["base_hash"],
        adam=adam,
        master=sections.get("master"),
        rng_state=manifest["rng_state"],
        extra=manifest["extra"],
    )


def atomic_write(path, data: bytes | str) -> None:
    """Write to a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(ckpt: Checkpoint, path) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def load(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"no checkpoint at {path}") from exc
    return decode_checkpoint(raw)


def average_checkpoints(ckpts: Sequence[Checkpoint]) -> Checkpoint:
    """Element-wise mean of the parameter tensors; optimizer state is dropped."""
    if not ckpts:
        raise CheckpointError("nothing to average")
    first = ckpts[0]
    for c in ckpts[1:]:
        if c.kind != first.kind or c.config != first.config or set(c.params) != set(first.params):
            raise CheckpointError("checkpoints to average must share kind, config and tensor names")
        if c.base_hash != first.base_hash:
            raise CheckpointError("LoRA checkpoints to average must share a base")
    params = {}
    for name in first.params:
        acc = np.zeros(first.params[name].shape, dtype=np.float64)
        for c in ckpts:
            acc += c.params[name]
        params[name] = (acc / len(ckpts)).astype(np.float32)
    return Checkpoint(
        config=first.config,
        params=params,
        kind=first.kind,
        step=max(c.step for c in ckpts),
        lora_rank=first.lora_rank,
        lora_scale=first.lora_scale,
        base_hash=first.base_hash,
        extra={"averaged_steps": [c.step for c in ckpts]},
    )
