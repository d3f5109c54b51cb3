"""Out-of-core merging of transformer checkpoints driven by YAML recipes.

The pieces compose as: parse a recipe (`config`), open the referenced
checkpoints lazily (`tensorio`), align their weights (`architecture`),
compile per-tensor merge cones (`planner`), schedule and run them under a
bounded working set (`graph`, `methods`), and stream the results into
sharded safetensors files (`tensorio` again). The `cli` module ties the
chain together behind the ``modelmerge`` command.
"""

from ._version import __version__
from .architecture import (
    ArchitectureDef,
    WeightInfo,
    builtin_defs,
    enumerate_weights,
    infer_architecture,
    load_architecture_defs,
)
from .config import (
    MergeConfig,
    ModelInput,
    ParameterEntry,
    ParameterSpec,
    SliceSource,
    SliceSpec,
    parse_config,
    render_config,
    resolve_parameter,
)
from .errors import (
    CapacityError,
    ConfigError,
    CycleError,
    DegenerateWeights,
    FormatError,
    MergeError,
    ShapeMismatch,
    UnknownArchitecture,
)
from .graph import ExecutionStats, Task, TaskGraph, TaskKind, execute, predict_peak_bytes, schedule
from .methods import MethodContext, apply_method
from .planner import MergePlan, plan, plan_merge, plan_passthrough
from .tensorio import (
    LazyCheckpoint,
    TensorRecord,
    open_checkpoint,
    write_sharded,
)

__all__ = [
    "__version__",
    "ArchitectureDef",
    "WeightInfo",
    "builtin_defs",
    "enumerate_weights",
    "infer_architecture",
    "load_architecture_defs",
    "MergeConfig",
    "ModelInput",
    "ParameterEntry",
    "ParameterSpec",
    "SliceSource",
    "SliceSpec",
    "parse_config",
    "render_config",
    "resolve_parameter",
    "CapacityError",
    "ConfigError",
    "CycleError",
    "DegenerateWeights",
    "FormatError",
    "MergeError",
    "ShapeMismatch",
    "UnknownArchitecture",
    "ExecutionStats",
    "Task",
    "TaskGraph",
    "TaskKind",
    "execute",
    "predict_peak_bytes",
    "schedule",
    "MethodContext",
    "apply_method",
    "MergePlan",
    "plan",
    "plan_merge",
    "plan_passthrough",
    "LazyCheckpoint",
    "TensorRecord",
    "open_checkpoint",
    "write_sharded",
]
