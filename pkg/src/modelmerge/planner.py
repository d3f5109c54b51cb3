"""Compile a parsed recipe plus opened checkpoints into a task graph.

Each output tensor becomes a small cone of tasks: one load per input
model, one method application, one emit. Passthrough recipes skip the
arithmetic and plan pure load-emit renames that restack layers. Planning
is pure and touches no tensor data; shapes and presence are validated
from the checkpoint records alone.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from ._version import __version__
from .architecture import (
    POST,
    PRE,
    ArchitectureDef,
    WeightInfo,
    builtin_defs,
    enumerate_weights,
    flat_weights,
    infer_architecture,
)
from .config import BASE_METHODS, MergeConfig, ModelInput, render_config, resolve_parameter
from .errors import ConfigError, ShapeMismatch, UnknownArchitecture
from .graph import Task, TaskGraph, TaskKind
from .methods import MethodContext
from .rng import derive_seed
from .tensorio import LazyCheckpoint

logger = logging.getLogger(__name__)

# Computation is always F32; estimates size the in-memory working set.
_F32_BYTES = 4


@dataclass
class MergePlan:
    """A compiled merge: the graph plus everything the writer needs."""

    graph: TaskGraph
    outputs: list[str]
    out_dtype: str
    effective_seed: int
    num_layers: int
    model_config: dict[str, Any] | None
    file_metadata: dict[str, str]
    tokenizer_files: list[Path]
    skipped: list[str] = field(default_factory=list)


def plan(
    config: MergeConfig,
    checkpoints: Mapping[str, LazyCheckpoint],
    defs: Mapping[str, ArchitectureDef] | None = None,
    *,
    seed: int | None = None,
    recipe_text: str | None = None,
    truncate_vocab: bool = False,
) -> MergePlan:
    """Compile any recipe. ``checkpoints`` maps model references to opened inputs.

    ``seed`` overrides the recipe's seed; the effective seed lands in the
    output metadata either way. ``recipe_text`` is recorded verbatim when
    given, otherwise the canonical rendering of ``config`` is used.
    """
    if config.merge_method == "passthrough":
        return plan_passthrough(
            config, checkpoints, defs, seed=seed, recipe_text=recipe_text
        )
    return plan_merge(
        config,
        checkpoints,
        defs,
        seed=seed,
        recipe_text=recipe_text,
        truncate_vocab=truncate_vocab,
    )


class _Ids:
    def __init__(self) -> None:
        self.next = 0

    def __call__(self) -> int:
        tid = self.next
        self.next += 1
        return tid


def _get_checkpoint(checkpoints: Mapping[str, LazyCheckpoint], ref: str) -> LazyCheckpoint:
    ckpt = checkpoints.get(ref)
    if ckpt is None:
        raise ConfigError(f"recipe references model {ref!r} but no such checkpoint was opened")
    return ckpt


def _effective_seed(config: MergeConfig, override: int | None) -> int:
    if override is not None:
        return override
    if config.seed is not None:
        return config.seed
    return 0


def _provenance(
    config: MergeConfig,
    donor: LazyCheckpoint,
    recipe_text: str | None,
    effective_seed: int,
) -> dict[str, str]:
    meta = dict(donor.file_metadata)
    meta["merge_recipe"] = recipe_text if recipe_text is not None else render_config(config)
    meta["merge_seed"] = str(effective_seed)
    meta["merge_tool"] = f"modelmerge {__version__}"
    return meta


def _default_dtype(ckpt: LazyCheckpoint) -> str:
    for rec in ckpt.records.values():
        return rec.dtype
    return "F32"


def _resolve_architecture(
    refs: list[str],
    checkpoints: Mapping[str, LazyCheckpoint],
    defs: Mapping[str, ArchitectureDef],
) -> tuple[ArchitectureDef, int] | None:
    """Common architecture of all inputs, or None when the flat fallback applies."""
    found: dict[str, tuple[ArchitectureDef, int] | None] = {}
    for ref in refs:
        try:
            found[ref] = infer_architecture(checkpoints[ref].metadata, defs)
        except UnknownArchitecture:
            found[ref] = None
    known = [ref for ref, hit in found.items() if hit is not None]
    unknown = [ref for ref, hit in found.items() if hit is None]
    if not known:
        return None
    if unknown:
        raise UnknownArchitecture(
            f"models {known} declare a known architecture but {unknown} do not;"
            " cannot align them"
        )
    families = {found[ref][0].family for ref in refs}  # type: ignore[index]
    if len(families) > 1:
        raise UnknownArchitecture(f"models span different families: {sorted(families)}")
    counts = {ref: found[ref][1] for ref in refs}  # type: ignore[index]
    if len(set(counts.values())) > 1:
        raise ShapeMismatch(f"models disagree on layer count: {counts}")
    first = refs[0]
    return found[first]  # type: ignore[return-value]


def plan_merge(
    config: MergeConfig,
    checkpoints: Mapping[str, LazyCheckpoint],
    defs: Mapping[str, ArchitectureDef] | None = None,
    *,
    seed: int | None = None,
    recipe_text: str | None = None,
    truncate_vocab: bool = False,
) -> MergePlan:
    """Plan a parameter-space merge (every method except passthrough)."""
    method = config.merge_method
    if method == "passthrough":
        raise ValueError("passthrough recipes go through plan_passthrough")
    if defs is None:
        defs = builtin_defs()
    effective_seed = _effective_seed(config, seed)

    base_ref = config.base_model
    model_refs = [m.model for m in config.models]
    participant_refs = ([base_ref] if base_ref is not None else []) + model_refs
    uses_base = method in BASE_METHODS

    unique_refs: list[str] = []
    for ref in participant_refs:
        if ref not in unique_refs:
            unique_refs.append(ref)
    ckpts = {ref: _get_checkpoint(checkpoints, ref) for ref in unique_refs}
    if config.tokenizer_source is not None:
        _get_checkpoint(checkpoints, config.tokenizer_source)

    arch = _resolve_architecture(unique_refs, ckpts, defs)
    skipped: list[str] = []
    if arch is not None:
        adef, num_layers = arch
        weights = enumerate_weights(adef, num_layers)
    else:
        adef, num_layers = None, 1
        weights, dropped = flat_weights([ckpts[ref].names() for ref in unique_refs])
        if dropped:
            logger.warning(
                "no common architecture; flat merge of %d shared tensors,"
                " skipping %d not present everywhere (e.g. %s)",
                len(weights),
                len(dropped),
                ", ".join(dropped[:3]),
            )
            skipped.extend(dropped)
        if not weights:
            raise ShapeMismatch("inputs share no tensor names; nothing to merge")

    ids = _Ids()
    tasks: list[Task] = []
    emit_ids: list[int] = []
    outputs: list[str] = []
    truncation_targets: set[int] = set()

    for w in weights:
        cone = _plan_cone(
            w,
            config,
            ckpts,
            participant_refs,
            uses_base,
            num_layers,
            effective_seed,
            truncate_vocab,
            ids,
            truncation_targets,
        )
        if cone is None:
            skipped.append(w.name)
            continue
        tasks.extend(cone)
        emit_ids.append(cone[-1].id)
        outputs.append(w.name)

    graph = TaskGraph(tasks, emit_ids)

    donor_ref = base_ref if base_ref is not None else model_refs[0]
    donor = ckpts[donor_ref]
    model_config = copy.deepcopy(donor.metadata) if donor.metadata else None
    if model_config is not None and len(truncation_targets) == 1 and "vocab_size" in model_config:
        model_config["vocab_size"] = next(iter(truncation_targets))

    tok_ref = config.tokenizer_source if config.tokenizer_source is not None else donor_ref
    return MergePlan(
        graph=graph,
        outputs=outputs,
        out_dtype=config.dtype or _default_dtype(donor),
        effective_seed=effective_seed,
        num_layers=num_layers,
        model_config=model_config,
        file_metadata=_provenance(config, donor, recipe_text, effective_seed),
        tokenizer_files=list(_get_checkpoint(checkpoints, tok_ref).tokenizer_files),
        skipped=skipped,
    )


def _plan_cone(
    w: WeightInfo,
    config: MergeConfig,
    ckpts: Mapping[str, LazyCheckpoint],
    participant_refs: list[str],
    uses_base: bool,
    num_layers: int,
    effective_seed: int,
    truncate_vocab: bool,
    ids: _Ids,
    truncation_targets: set[int],
) -> list[Task] | None:
    """Tasks for one output tensor, or None when it is skipped (with warning)."""
    missing = [ref for ref in dict.fromkeys(participant_refs) if w.name not in ckpts[ref]]
    if missing:
        if not w.optional:
            raise KeyError(f"tensor {w.name!r} missing from model {missing[0]!r}")
        if uses_base:
            base_ref = participant_refs[0]
            if w.name in ckpts[base_ref]:
                logger.warning(
                    "optional tensor %s absent from %s; copying the base model's value",
                    w.name,
                    ", ".join(missing),
                )
                return _copy_cone(w.name, ckpts[base_ref], ids)
        logger.warning("optional tensor %s absent from %s; skipped", w.name, ", ".join(missing))
        return None

    recs = {ref: ckpts[ref].records[w.name] for ref in dict.fromkeys(participant_refs)}
    shape, truncate_rows = _common_shape(w, recs, truncate_vocab)
    if truncate_rows is not None:
        truncation_targets.add(truncate_rows)
    est = _nbytes(shape)

    ctx = _build_context(w, config, num_layers, effective_seed)

    load_ids = []
    tasks: list[Task] = []
    for ref in participant_refs:
        payload: dict[str, Any] = {"checkpoint": ckpts[ref], "name": w.name}
        if truncate_rows is not None and recs[ref].shape[0] > truncate_rows:
            payload["truncate_rows"] = truncate_rows
        load = Task(ids(), TaskKind.LOAD_TENSOR, (), payload, est)
        tasks.append(load)
        load_ids.append(load.id)
    apply = Task(
        ids(), TaskKind.METHOD_APPLY, tuple(load_ids), {"context": ctx, "name": w.name}, est
    )
    emit = Task(ids(), TaskKind.EMIT_OUTPUT, (apply.id,), {"name": w.name}, 0)
    tasks.extend([apply, emit])
    return tasks


def _copy_cone(name: str, ckpt: LazyCheckpoint, ids: _Ids) -> list[Task]:
    rec = ckpt.records[name]
    load = Task(ids(), TaskKind.LOAD_TENSOR, (), {"checkpoint": ckpt, "name": name}, _nbytes(rec.shape))
    emit = Task(ids(), TaskKind.EMIT_OUTPUT, (load.id,), {"name": name}, 0)
    return [load, emit]


def _nbytes(shape: tuple[int, ...]) -> int:
    n = 1
    for d in shape:
        n *= d
    return n * _F32_BYTES


def _common_shape(
    w: WeightInfo, recs: Mapping[str, Any], truncate_vocab: bool
) -> tuple[tuple[int, ...], int | None]:
    """Validate aligned shapes; returns (effective shape, truncated row count or None)."""
    shapes = {ref: rec.shape for ref, rec in recs.items()}
    distinct = set(shapes.values())
    if len(distinct) == 1:
        return next(iter(distinct)), None

    ranks = {len(s) for s in distinct}
    rows_only = (
        w.kind in (PRE, POST)
        and len(ranks) == 1
        and next(iter(ranks)) >= 2
        and len({s[1:] for s in distinct}) == 1
    )
    detail = ", ".join(f"{ref}: {list(s)}" for ref, s in shapes.items())
    if not rows_only:
        raise ShapeMismatch(f"tensor {w.name!r} has mismatched shapes ({detail})")
    if not truncate_vocab:
        raise ShapeMismatch(
            f"tensor {w.name!r} has mismatched row counts ({detail});"
            " pass --truncate-vocab to truncate to the smallest"
        )
    target = min(s[0] for s in distinct)
    tail = next(iter(distinct))[1:]
    logger.warning("tensor %s: truncating all models to %d rows", w.name, target)
    return (target, *tail), target


def _build_context(
    w: WeightInfo, config: MergeConfig, num_layers: int, effective_seed: int
) -> MethodContext:
    method = config.merge_method

    def up(name: str, mi: ModelInput | None, default):
        spec = None
        if mi is not None:
            spec = mi.parameters.get(name)
        if spec is None:
            spec = config.parameters.get(name)
        return resolve_parameter(
            spec, w.name, layer_index=w.layer_index, num_layers=num_layers, default=default
        )

    weights = tuple(float(up("weight", mi, 1.0)) for mi in config.models)
    kwargs: dict[str, Any] = {"method": method, "weights": weights}

    if method == "linear":
        kwargs["normalize"] = bool(up("normalize", None, True))
    elif method == "slerp":
        kwargs["t"] = float(up("t", None, 0.5))
    elif method in ("ties", "dare_ties", "dare_linear"):
        kwargs["densities"] = tuple(float(up("density", mi, 1.0)) for mi in config.models)
        if method.startswith("dare"):
            kwargs["rescale"] = bool(up("rescale", None, True))
            kwargs["seeds"] = tuple(
                derive_seed(effective_seed, w.name, i) for i in range(len(config.models))
            )
    elif method == "breadcrumbs":
        betas = tuple(float(up("beta", mi, 0.0)) for mi in config.models)
        gammas = tuple(float(up("gamma", mi, 0.0)) for mi in config.models)
        for b, g, mi in zip(betas, gammas, config.models):
            if b + g >= 1.0:
                raise ConfigError(
                    f"beta + gamma resolve to {b + g} for tensor {w.name!r}"
                    f" of model {mi.model!r}; the sum must stay below 1"
                )
        kwargs["betas"] = betas
        kwargs["gammas"] = gammas
    return MethodContext(**kwargs)


def plan_passthrough(
    config: MergeConfig,
    checkpoints: Mapping[str, LazyCheckpoint],
    defs: Mapping[str, ArchitectureDef] | None = None,
    *,
    seed: int | None = None,
    recipe_text: str | None = None,
) -> MergePlan:
    """Plan a layer-stacking merge: loads and emits only, no arithmetic.

    Output layer j is a rename of a source layer found by walking the
    slices in order; pre weights come from the first slice's model and
    post weights from the last slice's model.
    """
    if config.merge_method != "passthrough" or not config.slices:
        raise ValueError("plan_passthrough needs a passthrough recipe with slices")
    if defs is None:
        defs = builtin_defs()
    effective_seed = _effective_seed(config, seed)

    sources = [sl.sources[0] for sl in config.slices]
    ckpts = {src.model: _get_checkpoint(checkpoints, src.model) for src in sources}
    if config.tokenizer_source is not None:
        _get_checkpoint(checkpoints, config.tokenizer_source)

    inferred: dict[str, tuple[ArchitectureDef, int]] = {}
    for i, src in enumerate(sources):
        try:
            inferred[src.model] = infer_architecture(ckpts[src.model].metadata, defs)
        except UnknownArchitecture as exc:
            raise UnknownArchitecture(f"slices[{i}]: {exc}") from exc
    families = {adef.family for adef, _ in inferred.values()}
    if len(families) > 1:
        raise UnknownArchitecture(f"slices span different families: {sorted(families)}")
    adef = inferred[sources[0].model][0]

    for i, src in enumerate(sources):
        lo, hi = src.layer_range
        n = inferred[src.model][1]
        if hi > n:
            raise ConfigError(
                f"slices[{i}]: layer_range [{lo}, {hi}) exceeds the"
                f" {n} layers of {src.model!r}"
            )

    _check_slice_shapes(adef, sources, ckpts)

    ids = _Ids()
    tasks: list[Task] = []
    emit_ids: list[int] = []
    outputs: list[str] = []
    skipped: list[str] = []

    def rename(src_ckpt: LazyCheckpoint, src_name: str, out_name: str) -> None:
        rec = src_ckpt.records[src_name]
        load = Task(
            ids(), TaskKind.LOAD_TENSOR, (), {"checkpoint": src_ckpt, "name": src_name}, _nbytes(rec.shape)
        )
        emit = Task(ids(), TaskKind.EMIT_OUTPUT, (load.id,), {"name": out_name}, 0)
        tasks.extend([load, emit])
        emit_ids.append(emit.id)
        outputs.append(out_name)

    first_ckpt = ckpts[sources[0].model]
    last_ckpt = ckpts[sources[-1].model]

    for e in adef.pre_weights:
        if e.name not in first_ckpt:
            if e.optional:
                logger.warning("optional tensor %s absent from the first slice's model; skipped", e.name)
                skipped.append(e.name)
                continue
            raise KeyError(f"tensor {e.name!r} missing from model {sources[0].model!r}")
        rename(first_ckpt, e.name, e.name)

    out_layer = 0
    for src in sources:
        src_ckpt = ckpts[src.model]
        for src_layer in range(*src.layer_range):
            for e in adef.layer_templates:
                src_name = e.name.replace("{idx}", str(src_layer))
                out_name = e.name.replace("{idx}", str(out_layer))
                if src_name not in src_ckpt:
                    if e.optional:
                        skipped.append(out_name)
                        continue
                    raise KeyError(f"tensor {src_name!r} missing from model {src.model!r}")
                rename(src_ckpt, src_name, out_name)
            out_layer += 1
    total_layers = out_layer

    for e in adef.post_weights:
        if e.name not in last_ckpt:
            if e.optional:
                logger.warning("optional tensor %s absent from the last slice's model; skipped", e.name)
                skipped.append(e.name)
                continue
            raise KeyError(f"tensor {e.name!r} missing from model {sources[-1].model!r}")
        rename(last_ckpt, e.name, e.name)

    if len(set(outputs)) != len(outputs):
        raise ConfigError("passthrough output names collide; check the slice ranges")

    graph = TaskGraph(tasks, emit_ids)
    model_config = copy.deepcopy(first_ckpt.metadata) if first_ckpt.metadata else None
    if model_config is not None:
        model_config[adef.num_layers_key] = total_layers

    donor_ref = sources[0].model
    tok_ref = config.tokenizer_source if config.tokenizer_source is not None else donor_ref
    return MergePlan(
        graph=graph,
        outputs=outputs,
        out_dtype=config.dtype or _default_dtype(first_ckpt),
        effective_seed=effective_seed,
        num_layers=total_layers,
        model_config=model_config,
        file_metadata=_provenance(config, first_ckpt, recipe_text, effective_seed),
        tokenizer_files=list(_get_checkpoint(checkpoints, tok_ref).tokenizer_files),
        skipped=skipped,
    )


def _check_slice_shapes(
    adef: ArchitectureDef,
    sources: list,
    ckpts: Mapping[str, LazyCheckpoint],
) -> None:
    """Aligned layer tensors must agree in shape across every used source layer."""
    for e in adef.layer_templates:
        seen: tuple[tuple[int, ...], str] | None = None
        for src in sources:
            ckpt = ckpts[src.model]
            for layer in range(*src.layer_range):
                name = e.name.replace("{idx}", str(layer))
                rec = ckpt.records.get(name)
                if rec is None:
                    continue  # presence is enforced during planning
                if seen is None:
                    seen = (rec.shape, f"{src.model}:{name}")
                elif rec.shape != seen[0]:
                    raise ShapeMismatch(
                        f"tensor {name!r} of {src.model!r} has shape {list(rec.shape)}"
                        f" but {seen[1]} has {list(seen[0])}"
                    )
