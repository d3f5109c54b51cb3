"""Shared fixture builders for the test suite.

Checkpoint values live on a dyadic grid (multiples of 2**-10, magnitude
below 1/2) so that float32 sums and differences of a handful of tensors
are exact.  That lets oracle tests compare against float64 references
with honest tolerances and makes sign elections deterministic.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from modelmerge.tensorio import default_reader, write_sharded

GRID_STEP = 2.0**-10


def grid_values(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Random float32 values on the dyadic grid, in (-1/2, 1/2)."""
    ints = rng.integers(-511, 512, size=shape)
    return (ints * GRID_STEP).astype(np.float32)


def grid_delta(rng: np.random.Generator, base: np.ndarray) -> np.ndarray:
    """A fine-tuned variant of `base`: base plus a sparse grid perturbation."""
    ints = rng.integers(-63, 64, size=base.shape)
    keep = rng.random(size=base.shape) < 0.5
    delta = (ints * keep * GRID_STEP).astype(np.float32)
    return base + delta


def llama_tensor_names(
    num_layers: int, *, lm_head: bool = False, rotary: bool = False
) -> list[str]:
    names = ["model.embed_tokens.weight"]
    per_layer = [
        "input_layernorm.weight",
        "self_attn.q_proj.weight",
        "self_attn.k_proj.weight",
        "self_attn.v_proj.weight",
        "self_attn.o_proj.weight",
        "post_attention_layernorm.weight",
        "mlp.gate_proj.weight",
        "mlp.up_proj.weight",
        "mlp.down_proj.weight",
    ]
    if rotary:
        per_layer.insert(5, "self_attn.rotary_emb.inv_freq")
    for i in range(num_layers):
        names.extend(f"model.layers.{i}.{part}" for part in per_layer)
    names.append("model.norm.weight")
    if lm_head:
        names.append("lm_head.weight")
    return names


def llama_shapes(
    num_layers: int,
    *,
    hidden: int = 8,
    ffn: int = 16,
    vocab: int = 32,
    lm_head: bool = False,
    rotary: bool = False,
) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"model.embed_tokens.weight": (vocab, hidden)}
    for i in range(num_layers):
        p = f"model.layers.{i}."
        shapes[p + "input_layernorm.weight"] = (hidden,)
        for proj in ("q_proj", "k_proj", "v_proj", "o_proj"):
            shapes[p + f"self_attn.{proj}.weight"] = (hidden, hidden)
        if rotary:
            shapes[p + "self_attn.rotary_emb.inv_freq"] = (hidden // 2,)
        shapes[p + "post_attention_layernorm.weight"] = (hidden,)
        shapes[p + "mlp.gate_proj.weight"] = (ffn, hidden)
        shapes[p + "mlp.up_proj.weight"] = (ffn, hidden)
        shapes[p + "mlp.down_proj.weight"] = (hidden, ffn)
    shapes["model.norm.weight"] = (hidden,)
    if lm_head:
        shapes["lm_head.weight"] = (vocab, hidden)
    return shapes


def make_llama_tensors(
    rng: np.random.Generator, num_layers: int, **kwargs
) -> dict[str, np.ndarray]:
    return {
        name: grid_values(rng, shape)
        for name, shape in llama_shapes(num_layers, **kwargs).items()
    }


def write_checkpoint(
    root: Path,
    tensors: dict[str, np.ndarray],
    *,
    model_config: dict | None = None,
    dtype: str = "F32",
    max_shard_bytes: int = 1 << 30,
    file_metadata: dict[str, str] | None = None,
    tokenizer: bool = False,
) -> None:
    root.mkdir(parents=True, exist_ok=True)
    write_sharded(
        tensors.items(),
        root,
        max_shard_bytes=max_shard_bytes,
        dtype=dtype,
        metadata=file_metadata,
    )
    if model_config is not None:
        (root / "config.json").write_text(json.dumps(model_config, indent=2) + "\n")
    if tokenizer:
        (root / "tokenizer.json").write_text('{"version": "test"}\n')
        (root / "tokenizer_config.json").write_text("{}\n")


def llama_config(num_layers: int, *, hidden: int = 8, vocab: int = 32) -> dict:
    return {
        "model_type": "llama",
        "num_hidden_layers": num_layers,
        "hidden_size": hidden,
        "vocab_size": vocab,
    }


def make_llama_checkpoint(
    root: Path,
    rng: np.random.Generator,
    num_layers: int = 2,
    *,
    hidden: int = 8,
    ffn: int = 16,
    vocab: int = 32,
    lm_head: bool = False,
    rotary: bool = False,
    base: dict[str, np.ndarray] | None = None,
    dtype: str = "F32",
    max_shard_bytes: int = 1 << 30,
    tokenizer: bool = False,
) -> dict[str, np.ndarray]:
    """Write a tiny llama-flavoured checkpoint and return its tensors.

    When `base` is given, values are grid perturbations of the base
    tensors instead of fresh draws (a toy fine-tune).
    """
    if base is None:
        tensors = make_llama_tensors(
            rng, num_layers, hidden=hidden, ffn=ffn, vocab=vocab,
            lm_head=lm_head, rotary=rotary,
        )
    else:
        tensors = {name: grid_delta(rng, arr) for name, arr in base.items()}
    write_checkpoint(
        root,
        tensors,
        model_config=llama_config(num_layers, hidden=hidden, vocab=vocab),
        dtype=dtype,
        max_shard_bytes=max_shard_bytes,
        tokenizer=tokenizer,
    )
    return tensors


class RecordingReader:
    """Wraps the default reader and logs every (path, offset, length) request."""

    def __init__(self):
        self.calls: list[tuple[Path, int, int]] = []

    def __call__(self, path: Path, offset: int, length: int) -> bytes:
        self.calls.append((Path(path), offset, length))
        return default_reader(path, offset, length)

    def data_reads(self, data_starts: dict[Path, int]) -> list[tuple[Path, int, int]]:
        """Calls that touch bytes past a shard's header region."""
        out = []
        for path, offset, length in self.calls:
            start = data_starts.get(Path(path))
            if start is not None and offset + length > start:
                out.append((path, offset, length))
        return out


def hash_directory(root: Path) -> dict[str, str]:
    """Relative path -> sha256 of contents, for byte-level determinism checks."""
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            rel = str(path.relative_to(root))
            out[rel] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out
