"""Transformer weight layouts, described by data files rather than code.

An architecture definition lists the tensor names a family of checkpoints
uses: weights that come before the layer stack (embeddings), a set of
per-layer templates with an ``{idx}`` placeholder, and weights that come
after (final norm, output head). Definitions live in JSON files so new
families can be added without touching the engine.

Checkpoints that declare no known family fall back to a flat layout: the
exact intersection of tensor names across all inputs, every tensor
treated as depth zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import FormatError, UnknownArchitecture

PRE = "pre"
LAYER = "layer"
POST = "post"

_BUILTIN_DIR = Path(__file__).parent / "architectures"


@dataclass(frozen=True)
class WeightInfo:
    """One concrete tensor in a model: its name and position in the stack."""

    name: str
    kind: str  # PRE, LAYER, or POST
    layer_index: int | None = None
    optional: bool = False


@dataclass(frozen=True)
class TemplateEntry:
    name: str
    optional: bool = False


@dataclass(frozen=True)
class ArchitectureDef:
    family: str
    num_layers_key: str
    pre_weights: tuple[TemplateEntry, ...]
    layer_templates: tuple[TemplateEntry, ...]
    post_weights: tuple[TemplateEntry, ...]


def load_architecture_defs(directory: str | Path) -> dict[str, ArchitectureDef]:
    """Load every ``*.json`` definition in a directory, keyed by family."""
    defs: dict[str, ArchitectureDef] = {}
    for path in sorted(Path(directory).glob("*.json")):
        adef = _parse_def(path)
        if adef.family in defs:
            raise FormatError(f"{path}: duplicate architecture family {adef.family!r}")
        defs[adef.family] = adef
    return defs


@lru_cache(maxsize=1)
def builtin_defs() -> dict[str, ArchitectureDef]:
    """Definitions shipped with the package."""
    return load_architecture_defs(_BUILTIN_DIR)


def _parse_def(path: Path) -> ArchitectureDef:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: invalid architecture definition: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: architecture definition must be a JSON object")
    for key in doc:
        if key not in ("family", "num_layers_key", "pre_weights", "layer_templates", "post_weights"):
            raise FormatError(f"{path}: unknown key {key!r}")

    family = doc.get("family")
    if not isinstance(family, str) or not family:
        raise FormatError(f"{path}: family must be a non-empty string")
    num_layers_key = doc.get("num_layers_key")
    if not isinstance(num_layers_key, str) or not num_layers_key:
        raise FormatError(f"{path}: num_layers_key must be a non-empty string")
    if "layer_templates" not in doc:
        raise FormatError(f"{path}: layer_templates is required")

    pre = _parse_entries(path, doc.get("pre_weights", []), "pre_weights", placeholder=False)
    layers = _parse_entries(path, doc["layer_templates"], "layer_templates", placeholder=True)
    post = _parse_entries(path, doc.get("post_weights", []), "post_weights", placeholder=False)
    if not layers:
        raise FormatError(f"{path}: layer_templates must not be empty")

    names = [e.name for e in pre + layers + post]
    if len(names) != len(set(names)):
        raise FormatError(f"{path}: duplicate template names")
    return ArchitectureDef(
        family=family,
        num_layers_key=num_layers_key,
        pre_weights=pre,
        layer_templates=layers,
        post_weights=post,
    )


def _parse_entries(path: Path, node: Any, key: str, *, placeholder: bool) -> tuple[TemplateEntry, ...]:
    if not isinstance(node, list):
        raise FormatError(f"{path}: {key} must be a list")
    out = []
    for i, item in enumerate(node):
        if isinstance(item, str):
            entry = TemplateEntry(name=item)
        elif isinstance(item, dict):
            for k in item:
                if k not in ("name", "optional"):
                    raise FormatError(f"{path}: {key}[{i}]: unknown key {k!r}")
            name = item.get("name")
            optional = item.get("optional", False)
            if not isinstance(name, str) or not name:
                raise FormatError(f"{path}: {key}[{i}]: name must be a non-empty string")
            if not isinstance(optional, bool):
                raise FormatError(f"{path}: {key}[{i}]: optional must be a boolean")
            entry = TemplateEntry(name=name, optional=optional)
        else:
            raise FormatError(f"{path}: {key}[{i}]: expected a string or mapping")
        has_idx = "{idx}" in entry.name
        if placeholder and not has_idx:
            raise FormatError(f"{path}: {key}[{i}]: layer template must contain {{idx}}")
        if not placeholder and has_idx:
            raise FormatError(f"{path}: {key}[{i}]: {{idx}} is only valid in layer templates")
        out.append(entry)
    return tuple(out)


def layer_count(adef: ArchitectureDef, metadata: Mapping[str, Any]) -> int:
    """Read the layer count out of a model config document."""
    value = metadata.get(adef.num_layers_key)
    if value is None:
        raise FormatError(f"model config lacks {adef.num_layers_key!r}")
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise FormatError(f"{adef.num_layers_key!r} must be a positive integer, got {value!r}")
    return value


def enumerate_weights(adef: ArchitectureDef, num_layers: int) -> list[WeightInfo]:
    """All tensor names of a model with ``num_layers`` layers, in stack order."""
    if num_layers < 1:
        raise ValueError(f"num_layers must be >= 1, got {num_layers}")
    out: list[WeightInfo] = []
    for e in adef.pre_weights:
        out.append(WeightInfo(name=e.name, kind=PRE, optional=e.optional))
    for i in range(num_layers):
        for e in adef.layer_templates:
            out.append(
                WeightInfo(
                    name=e.name.replace("{idx}", str(i)),
                    kind=LAYER,
                    layer_index=i,
                    optional=e.optional,
                )
            )
    for e in adef.post_weights:
        out.append(WeightInfo(name=e.name, kind=POST, layer_index=num_layers - 1, optional=e.optional))
    names = [w.name for w in out]
    if len(names) != len(set(names)):
        raise FormatError(f"architecture {adef.family!r}: expanded names collide")
    return out


def infer_architecture(
    metadata: Mapping[str, Any], defs: Mapping[str, ArchitectureDef]
) -> tuple[ArchitectureDef, int]:
    """Match a checkpoint's declared model_type and read its layer count."""
    family = metadata.get("model_type")
    if not isinstance(family, str) or not family:
        raise UnknownArchitecture("checkpoint declares no model_type")
    adef = defs.get(family)
    if adef is None:
        raise UnknownArchitecture(f"no architecture definition for family {family!r}")
    return adef, layer_count(adef, metadata)


def flat_weights(name_lists: Sequence[Iterable[str]]) -> tuple[list[WeightInfo], list[str]]:
    """Fallback layout: tensors common to every input, in the first input's order.

    Returns the common weights (all treated as outside the layer stack)
    plus the names that were dropped for being absent somewhere.
    """
    if not name_lists:
        return [], []
    ordered = [list(names) for names in name_lists]
    common = set(ordered[0])
    for names in ordered[1:]:
        common &= set(names)
    kept = [WeightInfo(name=n, kind=PRE) for n in ordered[0] if n in common]
    skipped: list[str] = []
    seen: set[str] = set()
    for names in ordered:
        for n in names:
            if n not in common and n not in seen:
                skipped.append(n)
                seen.add(n)
    return kept, skipped
