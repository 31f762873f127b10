"""BERT-style post-LayerNorm transformer encoder on :mod:`synmodal.numcore`.

Parameters live in a flat ``dict[str, Tensor]``; the same dict also carries
the pre-training heads so a checkpoint is one self-describing file.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numcore as nc
from .assembly import Batch, PackedInput, collate
from .numcore import Tensor

CHECKPOINT_FORMAT = "synmodal-checkpoint"
CHECKPOINT_VERSION = 1
_MASK_VALUE = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    layers: int = 2
    hidden_size: int = 64
    heads: int = 4
    ffn_size: int = 256
    max_positions: int = 148
    dropout_rate: float = 0.1
    init_std: float = 0.02
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        for name in ("vocab_size", "layers", "hidden_size", "heads", "ffn_size", "max_positions"):
            if getattr(self, name) <= 0:
                raise ValueError(f"EncoderConfig.{name} must be positive")
        if self.hidden_size % self.heads:
            raise ValueError(f"hidden_size {self.hidden_size} is not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("EncoderConfig.dropout_rate must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> EncoderConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown EncoderConfig field(s): {sorted(unknown)}")
        return cls(**data)


@dataclass
class EncoderOutput:
    hidden: Tensor
    cls: Tensor
    attentions: list[np.ndarray] = field(default_factory=list)


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled outside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def init_params(config: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    h, f, std = config.hidden_size, config.ffn_size, config.init_std
    p: dict[str, np.ndarray] = {
        "embeddings.token": truncated_normal(rng, (config.vocab_size, h), std),
        "embeddings.position": truncated_normal(rng, (config.max_positions, h), std),
        "embeddings.ln.gamma": np.ones(h),
        "embeddings.ln.beta": np.zeros(h),
    }
    for i in range(config.layers):
        pre = f"layer{i}."
        for proj in ("query", "key", "value", "output"):
            p[pre + f"attn.{proj}.weight"] = truncated_normal(rng, (h, h), std)
            p[pre + f"attn.{proj}.bias"] = np.zeros(h)
        p[pre + "attn.ln.gamma"] = np.ones(h)
        p[pre + "attn.ln.beta"] = np.zeros(h)
        p[pre + "ffn.in.weight"] = truncated_normal(rng, (h, f), std)
        p[pre + "ffn.in.bias"] = np.zeros(f)
        p[pre + "ffn.out.weight"] = truncated_normal(rng, (f, h), std)
        p[pre + "ffn.out.bias"] = np.zeros(h)
        p[pre + "ffn.ln.gamma"] = np.ones(h)
        p[pre + "ffn.ln.beta"] = np.zeros(h)
    return {name: _param(value, name) for name, value in p.items()}


def embed(params: Mapping[str, Tensor], ids, positions) -> Tensor:
    """Token embedding plus learned absolute position embedding."""
    return nc.embedding(params["embeddings.token"], ids) + nc.embedding(params["embeddings.position"], positions)


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)


def _linear(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    return x @ params[prefix + ".weight"] + params[prefix + ".bias"]


def forward(
    params: Mapping[str, Tensor],
    config: EncoderConfig,
    inputs: Batch | PackedInput,
    *,
    rng: np.random.Generator | None = None,
    keep_attention: bool = False,
) -> EncoderOutput:
    """Encode a batch (hidden ``(B, L, H)``) or one packed input (hidden ``(L, H)``).

    Dropout is applied only when ``rng`` is given. PAD keys receive an additive
    ``-1e9`` before the softmax, so their attention weight underflows to zero.
    """
    single = isinstance(inputs, PackedInput)
    batch = collate([inputs]) if single else inputs
    bsz, length = batch.ids.shape
    if length > config.max_positions:
        raise nc.ShapeError(f"input length {length} exceeds max_positions {config.max_positions}")
    h, nh, hd = config.hidden_size, config.heads, config.head_dim
    eps = config.layer_norm_eps

    positions = np.broadcast_to(np.arange(length), (bsz, length))
    x = embed(params, batch.ids, positions)
    x = nc.layer_norm(x, params["embeddings.ln.gamma"], params["embeddings.ln.beta"], eps)
    x = _dropout(x, config.dropout_rate, rng)
    additive = Tensor(np.where(batch.attention_mask, 0.0, _MASK_VALUE)[:, None, None, :])
    scale = 1.0 / math.sqrt(hd)
    attentions = []

    def heads(t: Tensor) -> Tensor:
        return t.reshape(bsz, length, nh, hd).transpose(0, 2, 1, 3)

    for i in range(config.layers):
        pre = f"layer{i}."
        q = heads(_linear(x, params, pre + "attn.query"))
        k = heads(_linear(x, params, pre + "attn.key"))
        v = heads(_linear(x, params, pre + "attn.value"))
        probs = nc.softmax((q @ k.transpose(0, 1, 3, 2)) * scale + additive)
        if keep_attention:
            attentions.append(probs.data)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(bsz, length, h)
        attn_out = _dropout(_linear(ctx, params, pre + "attn.output"), config.dropout_rate, rng)
        x = nc.layer_norm(x + attn_out, params[pre + "attn.ln.gamma"], params[pre + "attn.ln.beta"], eps)
        ff = _linear(nc.gelu(_linear(x, params, pre + "ffn.in")), params, pre + "ffn.out")
        ff = _dropout(ff, config.dropout_rate, rng)
        x = nc.layer_norm(x + ff, params[pre + "ffn.ln.gamma"], params[pre + "ffn.ln.beta"], eps)

    if single:
        x = x.reshape(length, h)
        return EncoderOutput(x, x[0], attentions)
    return EncoderOutput(x, x[:, 0, :], attentions)


# -- checkpoints ------------------------------------------------------------


class CheckpointError(ValueError):
    """Checkpoint unreadable, of the wrong version, or incompatible with a config."""


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _tensor_entries(arrays: Mapping[str, np.ndarray]) -> list[dict]:
    return [{"name": n, "shape": list(a.shape), "data": a.reshape(-1).tolist()} for n, a in arrays.items()]


def _tensor_arrays(entries: list[dict]) -> dict[str, np.ndarray]:
    out = {}
    for e in entries:
        data = np.asarray(e["data"], dtype=np.float64)
        shape = tuple(e["shape"])
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"tensor {e['name']!r}: {data.size} values for shape {shape}")
        out[e["name"]] = data.reshape(shape)
    return out


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor], config: EncoderConfig, **extra) -> None:
    """Write a JSON manifest of every parameter (name, shape, row-major data).

    ``extra`` entries (optimizer state, vocabulary, train config, step) are
    stored verbatim; numpy-array dicts under ``adam_m``/``adam_v`` are encoded
    like parameters. The write is atomic.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "encoder_config": config.to_dict(),
        "params": _tensor_entries({n: p.data for n, p in params.items()}),
    }
    for key, value in extra.items():
        doc[key] = _tensor_entries(value) if key in ("adam_m", "adam_v") else value
    atomic_write_text(path, json.dumps(doc, ensure_ascii=False))


def load_checkpoint(path: str | Path) -> dict:
    """Read a checkpoint; ``params`` come back as trainable tensors."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {doc.get('version')} != supported {CHECKPOINT_VERSION}")
    doc["encoder_config"] = EncoderConfig.from_dict(doc["encoder_config"])
    doc["params"] = {n: _param(a, n) for n, a in _tensor_arrays(doc["params"]).items()}
    for key in ("adam_m", "adam_v"):
        if key in doc:
            doc[key] = _tensor_arrays(doc[key])
    return doc


def check_compatible(params: Mapping[str, Tensor], expected: Mapping[str, Tensor]) -> None:
    """Raise :class:`CheckpointError` unless names and shapes match exactly."""
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter sets differ: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, p in expected.items():
        if params[name].shape != p.shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {params[name].shape} in the checkpoint, "
                f"{p.shape} under the current config"
            )
