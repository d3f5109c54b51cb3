"""YAML merge recipes: parsing, validation, rendering, parameter resolution.

A recipe names a merge method, its input models (or layer slices for
passthrough), and parameters. A parameter value can be:

* a scalar, applying everywhere;
* a gradient ``[a, b, ...]`` of at least two anchors, interpolated
  piecewise-linearly over layer depth;
* a list of ``{filter, value}`` entries, resolved per tensor by substring
  match on the tensor name, first match wins. At most one entry may omit
  the filter; it acts as the catch-all.

Parameter names are fixed per method (for example ``weight`` and
``density`` for ties); unknown names are rejected so typos fail loudly.
Per-model parameters shadow global ones for weight, density, beta, and
gamma only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable

import yaml

from .errors import ConfigError
from .tensorio import normalize_dtype

MERGE_METHODS = (
    "linear",
    "slerp",
    "task_arithmetic",
    "ties",
    "dare_ties",
    "dare_linear",
    "breadcrumbs",
    "passthrough",
)

# Methods that interpret inputs as deltas against base_model.
BASE_METHODS = frozenset({"task_arithmetic", "ties", "dare_ties", "dare_linear", "breadcrumbs"})

METHOD_PARAMS: dict[str, frozenset[str]] = {
    "linear": frozenset({"weight", "normalize"}),
    "slerp": frozenset({"t"}),
    "task_arithmetic": frozenset({"weight"}),
    "ties": frozenset({"weight", "density"}),
    "dare_ties": frozenset({"weight", "density", "rescale"}),
    "dare_linear": frozenset({"weight", "density", "rescale"}),
    "breadcrumbs": frozenset({"weight", "beta", "gamma"}),
    "passthrough": frozenset(),
}

_BOOL_PARAMS = frozenset({"normalize", "rescale"})
_PER_MODEL_PARAMS = frozenset({"weight", "density", "beta", "gamma"})

PARAM_DEFAULTS: dict[str, Any] = {
    "weight": 1.0,
    "t": 0.5,
    "density": 1.0,
    "beta": 0.0,
    "gamma": 0.0,
    "normalize": True,
    "rescale": True,
}

Scalar = float | bool
Value = float | bool | tuple[float, ...]


@dataclass(frozen=True)
class ParameterEntry:
    filter: str | None
    value: Value


@dataclass(frozen=True)
class ParameterSpec:
    """An ordered list of (filter, value) entries for one parameter."""

    entries: tuple[ParameterEntry, ...]


@dataclass(frozen=True)
class ModelInput:
    model: str
    parameters: dict[str, ParameterSpec] = field(default_factory=dict)


@dataclass(frozen=True)
class SliceSource:
    model: str
    layer_range: tuple[int, int]


@dataclass(frozen=True)
class SliceSpec:
    sources: tuple[SliceSource, ...]


@dataclass(frozen=True)
class MergeConfig:
    merge_method: str
    models: tuple[ModelInput, ...] = ()
    base_model: str | None = None
    slices: tuple[SliceSpec, ...] | None = None
    parameters: dict[str, ParameterSpec] = field(default_factory=dict)
    dtype: str | None = None
    seed: int | None = None
    tokenizer_source: str | None = None


def parse_config(text: str) -> MergeConfig:
    """Parse and validate a YAML recipe. Raises ConfigError with a key path."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"recipe is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("recipe must be a YAML mapping")

    known = {"merge_method", "models", "base_model", "slices", "parameters", "dtype", "seed", "tokenizer_source"}
    for key in doc:
        if key not in known:
            raise ConfigError(f"{key}: unknown recipe key")

    method = doc.get("merge_method")
    if method not in MERGE_METHODS:
        raise ConfigError(
            f"merge_method: expected one of {', '.join(MERGE_METHODS)}, got {method!r}"
        )

    models = _parse_models(doc.get("models"), method)
    slices = _parse_slices(doc.get("slices"), method)
    base_model = doc.get("base_model")
    if base_model is not None and not (isinstance(base_model, str) and base_model):
        raise ConfigError("base_model: must be a non-empty string")
    if method in BASE_METHODS and base_model is None:
        raise ConfigError(f"base_model: required by merge_method {method}")
    if method not in BASE_METHODS and base_model is not None:
        raise ConfigError(f"base_model: not used by merge_method {method}")

    parameters = _parse_param_table(doc.get("parameters"), method, "parameters", per_model=False)
    _check_breadcrumb_budget(parameters, "parameters")

    dtype = doc.get("dtype")
    if dtype is not None:
        try:
            dtype = normalize_dtype(dtype)
        except ValueError as exc:
            raise ConfigError(f"dtype: {exc}") from exc

    seed = doc.get("seed")
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
        raise ConfigError("seed: must be an integer")
    if seed is not None and not -(2**63) <= seed < 2**64:
        raise ConfigError("seed: out of range")

    tokenizer_source = doc.get("tokenizer_source")
    if tokenizer_source is not None and not (isinstance(tokenizer_source, str) and tokenizer_source):
        raise ConfigError("tokenizer_source: must be a non-empty string")

    return MergeConfig(
        merge_method=method,
        models=models,
        base_model=base_model,
        slices=slices,
        parameters=parameters,
        dtype=dtype,
        seed=seed,
        tokenizer_source=tokenizer_source,
    )


def _parse_models(node: Any, method: str) -> tuple[ModelInput, ...]:
    if method == "passthrough":
        if node is not None:
            raise ConfigError("models: passthrough merges take slices, not models")
        return ()
    if not isinstance(node, list) or not node:
        raise ConfigError("models: a non-empty list is required")
    out = []
    for i, item in enumerate(node):
        path = f"models[{i}]"
        if isinstance(item, str):
            if not item:
                raise ConfigError(f"{path}: model path must be non-empty")
            out.append(ModelInput(model=item))
            continue
        if not isinstance(item, dict):
            raise ConfigError(f"{path}: expected a model path or mapping")
        for key in item:
            if key not in ("model", "parameters"):
                raise ConfigError(f"{path}.{key}: unknown key")
        ref = item.get("model")
        if not isinstance(ref, str) or not ref:
            raise ConfigError(f"{path}.model: must be a non-empty string")
        params = _parse_param_table(item.get("parameters"), method, f"{path}.parameters", per_model=True)
        out.append(ModelInput(model=ref, parameters=params))
    if method == "slerp" and len(out) != 2:
        raise ConfigError(f"models: slerp requires exactly two models, got {len(out)}")
    return tuple(out)


def _parse_slices(node: Any, method: str) -> tuple[SliceSpec, ...] | None:
    if method != "passthrough":
        if node is not None:
            raise ConfigError("slices: only valid with merge_method passthrough")
        return None
    if not isinstance(node, list) or not node:
        raise ConfigError("slices: passthrough requires a non-empty list of slices")
    out = []
    for i, item in enumerate(node):
        path = f"slices[{i}]"
        if not isinstance(item, dict) or set(item) != {"sources"}:
            raise ConfigError(f"{path}: expected a mapping with a single 'sources' key")
        sources = item["sources"]
        if not isinstance(sources, list) or not sources:
            raise ConfigError(f"{path}.sources: must be a non-empty list")
        if len(sources) != 1:
            raise ConfigError(f"{path}.sources: passthrough slices take exactly one source")
        parsed = []
        for j, src in enumerate(sources):
            spath = f"{path}.sources[{j}]"
            if not isinstance(src, dict) or set(src) != {"model", "layer_range"}:
                raise ConfigError(f"{spath}: expected keys model and layer_range")
            ref = src["model"]
            if not isinstance(ref, str) or not ref:
                raise ConfigError(f"{spath}.model: must be a non-empty string")
            rng = src["layer_range"]
            if (
                not isinstance(rng, list)
                or len(rng) != 2
                or not all(isinstance(v, int) and not isinstance(v, bool) for v in rng)
            ):
                raise ConfigError(f"{spath}.layer_range: expected [start, end]")
            lo, hi = rng
            if lo < 0 or hi <= lo:
                raise ConfigError(f"{spath}.layer_range: need 0 <= start < end, got [{lo}, {hi}]")
            parsed.append(SliceSource(model=ref, layer_range=(lo, hi)))
        out.append(SliceSpec(sources=tuple(parsed)))
    return tuple(out)


def _parse_param_table(node: Any, method: str, path: str, *, per_model: bool) -> dict[str, ParameterSpec]:
    if node is None:
        return {}
    if not isinstance(node, dict):
        raise ConfigError(f"{path}: expected a mapping of parameter names")
    allowed = METHOD_PARAMS[method]
    if per_model:
        allowed = allowed & _PER_MODEL_PARAMS
    out = {}
    for name, value in node.items():
        npath = f"{path}.{name}"
        if name not in METHOD_PARAMS[method]:
            raise ConfigError(
                f"{npath}: merge_method {method} does not take parameter {name!r}"
                f" (valid: {', '.join(sorted(METHOD_PARAMS[method])) or 'none'})"
            )
        if name not in allowed:
            raise ConfigError(f"{npath}: parameter {name!r} may only be set globally")
        out[name] = _parse_param_spec(name, value, npath)
    return out


def _parse_param_spec(name: str, node: Any, path: str) -> ParameterSpec:
    if name in _BOOL_PARAMS:
        if not isinstance(node, bool):
            raise ConfigError(f"{path}: must be true or false")
        return ParameterSpec((ParameterEntry(None, node),))

    if _is_number(node):
        return ParameterSpec((ParameterEntry(None, _checked(name, node, path)),))

    if isinstance(node, list) and node:
        if all(_is_number(v) for v in node):
            return ParameterSpec((ParameterEntry(None, _parse_gradient(name, node, path)),))
        if all(isinstance(v, dict) for v in node):
            entries = []
            catch_all = 0
            for i, ent in enumerate(node):
                epath = f"{path}[{i}]"
                for key in ent:
                    if key not in ("filter", "value"):
                        raise ConfigError(f"{epath}.{key}: unknown key")
                if "value" not in ent:
                    raise ConfigError(f"{epath}: entry needs a value")
                filt = ent.get("filter")
                if filt is None:
                    catch_all += 1
                elif not isinstance(filt, str) or not filt:
                    raise ConfigError(f"{epath}.filter: must be a non-empty string")
                val = ent["value"]
                if _is_number(val):
                    value: Value = _checked(name, val, epath)
                elif isinstance(val, list):
                    value = _parse_gradient(name, val, f"{epath}.value")
                else:
                    raise ConfigError(f"{epath}.value: expected a number or gradient list")
                entries.append(ParameterEntry(filt, value))
            if catch_all > 1:
                raise ConfigError(f"{path}: at most one entry may omit the filter")
            return ParameterSpec(tuple(entries))
        raise ConfigError(f"{path}: mixed list of numbers and mappings")

    raise ConfigError(f"{path}: expected a number, gradient list, or list of filter entries")


def _parse_gradient(name: str, node: list, path: str) -> tuple[float, ...]:
    if len(node) < 2:
        raise ConfigError(f"{path}: a gradient needs at least two anchor values")
    anchors = []
    for i, v in enumerate(node):
        if not _is_number(v):
            raise ConfigError(f"{path}[{i}]: gradient anchors must be numbers")
        anchors.append(_checked(name, v, f"{path}[{i}]"))
    return tuple(anchors)


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _checked(name: str, v: Any, path: str) -> float:
    x = float(v)
    if not math.isfinite(x):
        raise ConfigError(f"{path}: value must be finite")
    if name == "t" and not 0.0 <= x <= 1.0:
        raise ConfigError(f"{path}: t must be in [0, 1]")
    if name == "density" and not 0.0 < x <= 1.0:
        raise ConfigError(f"{path}: density must be in (0, 1]")
    if name in ("beta", "gamma") and not 0.0 <= x < 1.0:
        raise ConfigError(f"{path}: {name} must be in [0, 1)")
    return x


def _check_breadcrumb_budget(params: dict[str, ParameterSpec], path: str) -> None:
    # beta + gamma < 1 can only be checked statically for plain scalars;
    # filtered or gradient specs are re-checked per tensor at plan time.
    beta = _plain_scalar(params.get("beta"))
    gamma = _plain_scalar(params.get("gamma"))
    if beta is not None and gamma is not None and beta + gamma >= 1.0:
        raise ConfigError(f"{path}: beta + gamma must be less than 1, got {beta + gamma}")


def _plain_scalar(spec: ParameterSpec | None) -> float | None:
    if spec is None or len(spec.entries) != 1:
        return None
    ent = spec.entries[0]
    if ent.filter is None and isinstance(ent.value, float):
        return ent.value
    return None


def resolve_parameter(
    spec: ParameterSpec | None,
    tensor_name: str,
    *,
    layer_index: int | None = None,
    num_layers: int = 1,
    default: Scalar | None = None,
) -> Scalar | None:
    """Resolve one parameter for one tensor.

    Entries are tried in order; the first whose filter is a substring of
    ``tensor_name`` (or has no filter) wins. Gradients are evaluated at the
    tensor's normalized depth ``layer_index / (num_layers - 1)``; tensors
    outside the layer stack (``layer_index=None``) and single-layer models
    evaluate at depth 0.
    """
    if spec is None:
        return default
    for ent in spec.entries:
        if ent.filter is None or ent.filter in tensor_name:
            if isinstance(ent.value, tuple):
                return _eval_gradient(ent.value, layer_index, num_layers)
            return ent.value
    return default


def _eval_gradient(anchors: tuple[float, ...], layer_index: int | None, num_layers: int) -> float:
    if layer_index is None or num_layers <= 1:
        p = 0.0
    else:
        p = layer_index / (num_layers - 1)
    m = len(anchors)
    x = p * (m - 1)
    i = min(int(math.floor(x)), m - 2)
    frac = x - i
    if frac <= 0.0:
        return float(anchors[i])
    if frac >= 1.0:
        return float(anchors[i + 1])
    return float(anchors[i] + (anchors[i + 1] - anchors[i]) * frac)


def render_config(config: MergeConfig) -> str:
    """Render a config back to canonical YAML. parse_config inverts this."""
    doc: dict[str, Any] = {"merge_method": config.merge_method}
    if config.models:
        rendered = []
        for m in config.models:
            item: dict[str, Any] = {"model": m.model}
            if m.parameters:
                item["parameters"] = {k: _render_spec(v) for k, v in m.parameters.items()}
            rendered.append(item)
        doc["models"] = rendered
    if config.base_model is not None:
        doc["base_model"] = config.base_model
    if config.slices is not None:
        doc["slices"] = [
            {
                "sources": [
                    {"model": s.model, "layer_range": list(s.layer_range)} for s in sl.sources
                ]
            }
            for sl in config.slices
        ]
    if config.parameters:
        doc["parameters"] = {k: _render_spec(v) for k, v in config.parameters.items()}
    if config.dtype is not None:
        doc["dtype"] = {"F32": "float32", "F16": "float16", "BF16": "bfloat16"}[config.dtype]
    if config.seed is not None:
        doc["seed"] = config.seed
    if config.tokenizer_source is not None:
        doc["tokenizer_source"] = config.tokenizer_source
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)


def _render_spec(spec: ParameterSpec) -> Any:
    if len(spec.entries) == 1 and spec.entries[0].filter is None:
        return _render_value(spec.entries[0].value)
    out = []
    for ent in spec.entries:
        item: dict[str, Any] = {}
        if ent.filter is not None:
            item["filter"] = ent.filter
        item["value"] = _render_value(ent.value)
        out.append(item)
    return out


def _render_value(value: Value) -> Any:
    if isinstance(value, tuple):
        return list(value)
    return value


def referenced_models(config: MergeConfig) -> list[str]:
    """Every model path the recipe mentions, in first-appearance order."""
    refs: list[str] = []

    def add(ref: str | None) -> None:
        if ref is not None and ref not in refs:
            refs.append(ref)

    add(config.base_model)
    for m in config.models:
        add(m.model)
    for sl in config.slices or ():
        for src in sl.sources:
            add(src.model)
    add(config.tokenizer_source)
    return refs
