"""Task graphs: the unit of work between loading and writing tensors.

A merge compiles to a DAG of small tasks (load a tensor, apply a method,
cast, emit). The scheduler orders tasks output by output, and within each
output's cone greedily prefers the ready task that releases the most
input bytes, so the working set stays near the size of one output's
inputs rather than one model. The executor frees each intermediate value
as soon as its last consumer has run.
"""

from __future__ import annotations

import logging
from collections import Counter, deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import CycleError
from .methods import apply_method
from .tensorio import quantize

logger = logging.getLogger(__name__)


class TaskKind(Enum):
    LOAD_TENSOR = "load_tensor"
    METHOD_APPLY = "method_apply"
    CAST_DTYPE = "cast_dtype"
    EMIT_OUTPUT = "emit_output"


@dataclass(frozen=True)
class Task:
    """One node in the graph.

    ``inputs`` are producer task ids, in the order the consumer expects
    them. ``payload`` is kind-specific (checkpoint and tensor name for
    loads, a resolved MethodContext for applies, the output name for
    emits). ``est_bytes`` estimates the produced value's size; emits alias
    their input and estimate zero.
    """

    id: int
    kind: TaskKind
    inputs: tuple[int, ...] = ()
    payload: dict = field(default_factory=dict)
    est_bytes: int = 0


class TaskGraph:
    """A validated DAG of tasks plus the ordered list of output task ids."""

    def __init__(self, tasks: Iterable[Task], outputs: Sequence[int]):
        self.tasks: dict[int, Task] = {}
        for t in tasks:
            if t.id in self.tasks:
                raise ValueError(f"duplicate task id {t.id}")
            if t.est_bytes < 0:
                raise ValueError(f"task {t.id}: negative est_bytes")
            self.tasks[t.id] = t
        for t in self.tasks.values():
            for i in t.inputs:
                if i not in self.tasks:
                    raise ValueError(f"task {t.id} consumes unknown task {i}")
        self.outputs: list[int] = list(outputs)
        if len(set(self.outputs)) != len(self.outputs):
            raise ValueError("duplicate output task ids")
        for o in self.outputs:
            if o not in self.tasks:
                raise ValueError(f"unknown output task {o}")
        self._prune()

    def _prune(self) -> None:
        """Drop tasks that no output depends on."""
        keep: set[int] = set()
        stack = list(self.outputs)
        while stack:
            tid = stack.pop()
            if tid in keep:
                continue
            keep.add(tid)
            stack.extend(self.tasks[tid].inputs)
        dropped = len(self.tasks) - len(keep)
        if dropped:
            logger.debug("pruned %d task(s) unreachable from outputs", dropped)
            self.tasks = {tid: t for tid, t in self.tasks.items() if tid in keep}

    def consumer_counts(self) -> Counter[int]:
        """How many input edges reference each task."""
        counts: Counter[int] = Counter()
        for t in self.tasks.values():
            counts.update(t.inputs)
        return counts

    def __len__(self) -> int:
        return len(self.tasks)


def schedule(graph: TaskGraph) -> list[int]:
    """Topologically order the graph, output-major, minimizing live bytes.

    Outputs are completed one at a time, in their listed order. Within one
    output's unscheduled dependency cone, the ready task that releases the
    most input bytes runs first; ties fall to smaller est_bytes, then to
    the lower task id, so the order is fully deterministic.

    Raises CycleError if the graph is not a DAG.
    """
    _check_acyclic(graph)

    consumers_left = graph.consumer_counts()
    scheduled: set[int] = set()
    order: list[int] = []

    for out_id in graph.outputs:
        cone = _unscheduled_cone(graph, out_id, scheduled)
        if not cone:
            continue
        cone_set = set(cone)
        consumers_in_cone: dict[int, list[int]] = {tid: [] for tid in cone}
        pending: dict[int, int] = {}
        for tid in cone:
            n = 0
            for i in graph.tasks[tid].inputs:
                if i in cone_set:
                    consumers_in_cone[i].append(tid)
                    n += 1
            pending[tid] = n
        ready = [tid for tid in cone if pending[tid] == 0]

        while ready:
            best = min(ready, key=lambda tid: _pick_key(graph, tid, consumers_left))
            ready.remove(best)
            order.append(best)
            scheduled.add(best)
            for i in graph.tasks[best].inputs:
                consumers_left[i] -= 1
            for c in consumers_in_cone[best]:
                pending[c] -= 1
                if pending[c] == 0:
                    ready.append(c)
        if len(scheduled & cone_set) != len(cone):
            raise AssertionError("cone walk left tasks unscheduled")
    return order


def _pick_key(graph: TaskGraph, tid: int, consumers_left: Counter[int]) -> tuple[int, int, int]:
    task = graph.tasks[tid]
    multiplicity = Counter(task.inputs)
    released = sum(
        graph.tasks[i].est_bytes for i, m in multiplicity.items() if consumers_left[i] == m
    )
    return (-released, task.est_bytes, tid)


def _unscheduled_cone(graph: TaskGraph, out_id: int, scheduled: set[int]) -> list[int]:
    cone: list[int] = []
    seen: set[int] = set()
    stack = [out_id]
    while stack:
        tid = stack.pop()
        if tid in seen or tid in scheduled:
            continue
        seen.add(tid)
        cone.append(tid)
        stack.extend(graph.tasks[tid].inputs)
    return cone


def _check_acyclic(graph: TaskGraph) -> None:
    indegree = {tid: len(t.inputs) for tid, t in graph.tasks.items()}
    consumers: dict[int, list[int]] = {tid: [] for tid in graph.tasks}
    for t in graph.tasks.values():
        for i in t.inputs:
            consumers[i].append(t.id)
    queue = deque(tid for tid, d in indegree.items() if d == 0)
    done = 0
    while queue:
        tid = queue.popleft()
        done += 1
        for c in consumers[tid]:
            indegree[c] -= 1
            if indegree[c] == 0:
                queue.append(c)
    if done != len(graph.tasks):
        stuck = sorted(tid for tid, d in indegree.items() if d > 0)
        raise CycleError(f"task graph contains a cycle through tasks {stuck[:8]}")


def predict_peak_bytes(graph: TaskGraph, order: Sequence[int]) -> int:
    """Simulate the executor's memory high-water mark from est_bytes alone."""
    consumers_left = graph.consumer_counts()
    live: dict[int, int] = {}
    peak = 0
    for tid in order:
        task = graph.tasks[tid]
        live[tid] = task.est_bytes
        peak = max(peak, sum(live.values()))
        for i in task.inputs:
            consumers_left[i] -= 1
            if consumers_left[i] == 0:
                live.pop(i, None)
        if consumers_left[tid] == 0:
            live.pop(tid, None)
    return peak


@dataclass
class ExecutionStats:
    """Observed execution counters.

    peak_live_bytes counts distinct array objects held at any commit
    point, so values that alias each other (an emit and its input) are
    counted once. An eviction is an intermediate value freed because its
    last consumer ran; handing a value to an emit does not count, that is
    the value leaving the graph, not being dropped.
    """

    peak_live_bytes: int = 0
    tasks_executed: int = 0
    evictions: int = 0


class _Poison:
    """Marks an evicted slot in debug mode so stale reads fail loudly."""

    __slots__ = ("task_id",)

    def __init__(self, task_id: int):
        self.task_id = task_id


ValueProvider = Callable[[Task, Sequence[Any]], Any]


def default_value_provider(task: Task, inputs: Sequence[Any]) -> Any:
    if task.kind is TaskKind.LOAD_TENSOR:
        arr = task.payload["checkpoint"].load_tensor(task.payload["name"])
        rows = task.payload.get("truncate_rows")
        if rows is not None and arr.ndim >= 1 and arr.shape[0] > rows:
            # Slicing keeps the whole buffer alive; copy to actually shrink.
            arr = np.ascontiguousarray(arr[:rows])
        return arr
    if task.kind is TaskKind.METHOD_APPLY:
        return apply_method(task.payload["context"], inputs)
    if task.kind is TaskKind.CAST_DTYPE:
        return quantize(inputs[0], task.payload["dtype"])
    if task.kind is TaskKind.EMIT_OUTPUT:
        return inputs[0]
    raise ValueError(f"no default provider for task kind {task.kind}")


def execute(
    graph: TaskGraph,
    order: Sequence[int],
    value_provider: ValueProvider | None = None,
    *,
    workers: int = 1,
    stats: ExecutionStats | None = None,
    debug: bool = False,
) -> Iterator[tuple[str, Any]]:
    """Run the graph, yielding (name, value) for each output task in order.

    Values are committed strictly in schedule order regardless of worker
    count, so downstream consumers see a deterministic stream. With
    ``workers`` above one, up to that many tasks run concurrently; results
    still commit in order. ``debug`` poisons evicted slots instead of
    deleting them, so a scheduling bug that touches freed data raises.
    """
    vp = value_provider or default_value_provider
    _check_order(graph, order)
    if stats is None:
        stats = ExecutionStats()

    consumers_left = graph.consumer_counts()
    output_ids = set(graph.outputs)
    store: dict[int, Any] = {}

    def fetch_inputs(task: Task) -> list[Any]:
        vals = []
        for i in task.inputs:
            v = store[i]
            if isinstance(v, _Poison):
                raise RuntimeError(f"task {task.id} read the evicted value of task {i}")
            vals.append(v)
        return vals

    def commit(task: Task, value: Any, extra_live: Iterable[Any]) -> Iterator[tuple[str, Any]]:
        store[task.id] = value
        stats.tasks_executed += 1
        live = _live_bytes(list(store.values()) + list(extra_live))
        if live > stats.peak_live_bytes:
            stats.peak_live_bytes = live
        logger.debug("task %d (%s) done, %d bytes live", task.id, task.kind.value, live)
        for i in set(task.inputs):
            if consumers_left[i] == 0:
                _drop(store, i, debug)
                if task.kind is not TaskKind.EMIT_OUTPUT:
                    stats.evictions += 1
        if task.id in output_ids:
            yield task.payload.get("name", str(task.id)), value
        if consumers_left.get(task.id, 0) == 0:
            # Terminal value: it was just yielded (or nothing wants it).
            _drop(store, task.id, debug)

    if workers <= 1:
        for tid in order:
            task = graph.tasks[tid]
            inputs = fetch_inputs(task)
            for i in task.inputs:
                consumers_left[i] -= 1
            value = _run_task(vp, task, inputs)
            yield from commit(task, value, ())
        return

    futures: dict[int, Future] = {}
    window = max(2, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pos = 0

        def input_value(i: int) -> Any:
            if i in store:
                v = store[i]
                if isinstance(v, _Poison):
                    raise RuntimeError(f"read of evicted task {i} while submitting")
                return v
            return futures[i].result()

        def can_submit(idx: int, commit_idx: int) -> bool:
            if idx <= commit_idx:
                return True
            task = graph.tasks[order[idx]]
            for i in task.inputs:
                if i not in store and not (i in futures and futures[i].done()):
                    return False
            return True

        for commit_idx, tid in enumerate(order):
            while pos < len(order) and (pos - commit_idx) < window and can_submit(pos, commit_idx):
                t = graph.tasks[order[pos]]
                vals = [input_value(i) for i in t.inputs]
                futures[order[pos]] = pool.submit(_run_task, vp, t, vals)
                pos += 1
            task = graph.tasks[tid]
            value = futures.pop(tid).result()
            for i in task.inputs:
                consumers_left[i] -= 1
            done_extras = [f.result() for f in futures.values() if f.done() and not f.exception()]
            yield from commit(task, value, done_extras)


def _run_task(vp: ValueProvider, task: Task, inputs: Sequence[Any]) -> Any:
    try:
        return vp(task, inputs)
    except Exception as exc:
        name = task.payload.get("name") or task.payload.get("output")
        where = f"task {task.id} ({task.kind.value}{', ' + repr(name) if name else ''})"
        try:
            wrapped = type(exc)(f"{where}: {exc}")
        except Exception:
            raise exc
        raise wrapped from exc


def _drop(store: dict[int, Any], tid: int, debug: bool) -> None:
    if tid not in store:
        return
    if debug:
        store[tid] = _Poison(tid)
    else:
        del store[tid]


def _live_bytes(values: Iterable[Any]) -> int:
    seen: set[int] = set()
    total = 0
    for v in values:
        if isinstance(v, np.ndarray) and id(v) not in seen:
            seen.add(id(v))
            total += v.nbytes
    return total


def _check_order(graph: TaskGraph, order: Sequence[int]) -> None:
    if len(order) != len(graph.tasks) or set(order) != set(graph.tasks):
        raise ValueError("order must be a permutation of the graph's tasks")
    position = {tid: i for i, tid in enumerate(order)}
    for t in graph.tasks.values():
        for i in t.inputs:
            if position[i] >= position[t.id]:
                raise ValueError(f"order runs task {t.id} before its input {i}")
