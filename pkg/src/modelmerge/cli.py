"""Command-line front end: recipe in, merged checkpoint out.

Exit codes: 0 success, 1 internal error, 2 configuration or usage error,
3 malformed or inconsistent input data. Every failure prints a single
``ERROR <Kind>: <detail>`` line to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import shutil
import sys
from collections import Counter
from pathlib import Path

from ._version import __version__
from .config import parse_config, referenced_models
from .errors import (
    CapacityError,
    ConfigError,
    DegenerateWeights,
    FormatError,
    MergeError,
    ShapeMismatch,
    UnknownArchitecture,
)
from .graph import ExecutionStats, execute, predict_peak_bytes, schedule
from .planner import plan
from .tensorio import open_checkpoint, write_sharded

logger = logging.getLogger(__name__)

RECIPE_COPY_NAME = "merge_recipe.yaml"

_SIZE_RE = re.compile(r"(\d+)\s*(B|KB|MB|GB|TB)?", re.IGNORECASE)


def parse_size(text: str) -> int:
    """Parse a byte count with optional KB/MB/GB/TB suffix (powers of 1024)."""
    m = _SIZE_RE.fullmatch(text.strip())
    if not m:
        raise ConfigError(f"--max-shard-size: cannot parse {text!r}")
    multiplier = {
        "B": 1,
        "KB": 1024,
        "MB": 1024**2,
        "GB": 1024**3,
        "TB": 1024**4,
    }[(m.group(2) or "B").upper()]
    size = int(m.group(1)) * multiplier
    if size <= 0:
        raise ConfigError("--max-shard-size: must be positive")
    return size


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modelmerge",
        description="Merge transformer checkpoints according to a YAML recipe.",
    )
    parser.add_argument("--version", action="version", version=f"modelmerge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    merge = sub.add_parser("merge", help="run a merge recipe")
    merge.add_argument("recipe", help="path to the YAML recipe")
    merge.add_argument("out_dir", help="directory for the merged checkpoint")
    merge.add_argument("--seed", type=int, default=None, help="override the recipe's seed")
    merge.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    merge.add_argument(
        "--max-shard-size",
        default="5GB",
        help='shard size cap, e.g. "5GB", "512MB", or a byte count (default 5GB)',
    )
    merge.add_argument(
        "--dry-run", action="store_true", help="print the plan and write nothing"
    )
    merge.add_argument(
        "--truncate-vocab",
        action="store_true",
        help="truncate embedding/head rows to the smallest vocabulary on mismatch",
    )
    merge.add_argument("--verbose", action="store_true", help="log per-task scheduling events")
    return parser


def run_merge(argv: list[str]) -> int:
    """Entry point used by both ``main`` and tests: argv in, exit code out."""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)

    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(message)s")
    logging.getLogger("modelmerge").setLevel(logging.DEBUG if args.verbose else logging.INFO)

    try:
        return _do_merge(args)
    except (ConfigError, CapacityError, DegenerateWeights) as exc:
        return _fail(exc, 2)
    except (FormatError, ShapeMismatch, UnknownArchitecture, KeyError) as exc:
        return _fail(exc, 3)
    except MergeError as exc:
        return _fail(exc, 1)
    except Exception as exc:  # noqa: BLE001 - last-resort guard for exit code 1
        return _fail(exc, 1)


def _fail(exc: BaseException, code: int) -> int:
    detail = " ".join(str(exc).split()) or exc.__class__.__name__
    print(f"ERROR {type(exc).__name__}: {detail}", file=sys.stderr)
    return code


def _do_merge(args: argparse.Namespace) -> int:
    recipe_path = Path(args.recipe)
    if not recipe_path.is_file():
        raise ConfigError(f"recipe file not found: {recipe_path}")
    recipe_text = recipe_path.read_text(encoding="utf-8")
    cfg = parse_config(recipe_text)
    max_shard_bytes = parse_size(args.max_shard_size)
    if args.threads < 1:
        raise ConfigError("--threads: must be at least 1")

    checkpoints = {}
    for ref in referenced_models(cfg):
        root = Path(ref)
        if not root.is_dir():
            raise ConfigError(f"model directory not found: {ref}")
        checkpoints[ref] = open_checkpoint(root)

    merge_plan = plan(
        cfg,
        checkpoints,
        seed=args.seed,
        recipe_text=recipe_text,
        truncate_vocab=args.truncate_vocab,
    )
    order = schedule(merge_plan.graph)

    if args.dry_run:
        _print_dry_run(cfg.merge_method, merge_plan, order)
        return 0

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = ExecutionStats()
    stream = execute(merge_plan.graph, order, workers=args.threads, stats=stats)
    total = len(merge_plan.outputs)

    def with_progress():
        for i, (name, arr) in enumerate(stream, 1):
            logger.info("[%d/%d] %s", i, total, name)
            yield name, arr

    index_doc = write_sharded(
        with_progress(),
        out_dir,
        max_shard_bytes=max_shard_bytes,
        dtype=merge_plan.out_dtype,
        metadata=merge_plan.file_metadata,
    )

    if merge_plan.model_config is not None:
        (out_dir / "config.json").write_text(
            json.dumps(merge_plan.model_config, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    for src in merge_plan.tokenizer_files:
        shutil.copyfile(src, out_dir / src.name)
    (out_dir / RECIPE_COPY_NAME).write_text(recipe_text, encoding="utf-8")

    shard_count = len(set(index_doc["weight_map"].values())) if index_doc["weight_map"] else 1
    logger.info(
        "done: %d tensors in %d shard(s), dtype %s, peak working set %d bytes, %d evictions",
        total,
        shard_count,
        merge_plan.out_dtype,
        stats.peak_live_bytes,
        stats.evictions,
    )
    return 0


def _print_dry_run(method: str, merge_plan, order) -> int:
    kind_counts = Counter(t.kind.value for t in merge_plan.graph.tasks.values())
    kinds = ", ".join(f"{n} {k}" for k, n in sorted(kind_counts.items()))
    print(f"merge method: {method}")
    print(f"outputs: {len(merge_plan.outputs)} tensors across {merge_plan.num_layers} layer(s)")
    print(f"tasks: {len(merge_plan.graph)} ({kinds})")
    print(f"schedule: {len(order)} steps, output-major")
    print(f"predicted peak working set: {predict_peak_bytes(merge_plan.graph, order)} bytes")
    print(f"output dtype: {merge_plan.out_dtype}; effective seed: {merge_plan.effective_seed}")
    print("dry run: nothing written")
    return 0


def main() -> None:
    sys.exit(run_merge(sys.argv[1:]))


if __name__ == "__main__":
    main()
