"""Semantic aggregation: hierarchical reduce (default) and fold, plus
best-effort row partitioning that feeds it.

Context budgeting is in characters with a fixed reserve for the prompt
template, so packing is deterministic and backend-independent.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import langex as lx
from .errors import SemQueryError
from .index import sem_cluster_by
from .runtime import CallMeter, LmRequest, complete_batch
from .table import Table, partition_by_equality

AGG_LEAF_INSTRUCTION = (
    "The user will provide a set of documents, each carrying the same "
    "instruction. Produce a single combined answer over all of them."
)
AGG_MERGE_INSTRUCTION = (
    "The user will provide partial answers produced over disjoint subsets of a "
    "document collection. Combine them into a single consistent answer."
)
MERGE_HEADER = "Partial answers to combine:\n\n"
FOLD_HEADER = "Answer so far:\n%s\n\nAdditional documents:\n\n"
DOC_SEPARATOR = "\n\n"
TEMPLATE_OVERHEAD = 512


class CapacityError(SemQueryError):
    """A single rendered document exceeds the context budget."""

    def __init__(self, message: str, row_id: int | None = None):
        super().__init__(message)
        self.row_id = row_id


@dataclass(frozen=True)
class AggConfig:
    pattern: str = "hierarchical"
    max_context_chars: int = 32768
    group_by: tuple[str, ...] | None = None
    partition_column: str | None = None

    def __post_init__(self):
        if self.pattern not in ("hierarchical", "fold"):
            raise ValueError("unknown aggregation pattern %r" % self.pattern)
        if self.max_context_chars <= TEMPLATE_OVERHEAD:
            raise ValueError("max_context_chars must exceed the %d-char template reserve"
                             % TEMPLATE_OVERHEAD)


@dataclass(frozen=True)
class ClusterPartition:
    """Partition rows by kmeans over a column's similarity index."""
    n_clusters: int
    column: str
    seed: int = 0


def cluster(n_clusters: int, column: str, seed: int = 0) -> ClusterPartition:
    return ClusterPartition(n_clusters, column, seed)


def sem_partition_by(t: Table, partition, id_column: str = "partition_id") -> Table:
    """Append a per-row group id, from a function or a cluster spec."""
    if isinstance(partition, ClusterPartition):
        clustered = sem_cluster_by(t, partition.column, partition.n_clusters,
                                   seed=partition.seed, id_column=id_column)
        return clustered
    ids = [int(partition(i, t.row_dict(i))) for i in range(t.row_count)]
    return t.with_column(id_column, "int", ids)


def pack_documents(docs: list[tuple[int, str]], capacity: int) -> list[list[tuple[int, str]]]:
    """Greedy packing in the given order; separators count against capacity."""
    packs: list[list[tuple[int, str]]] = []
    current: list[tuple[int, str]] = []
    used = 0
    for rid, doc in docs:
        if len(doc) > capacity:
            raise CapacityError(
                "document of %d chars exceeds context budget %d" % (len(doc), capacity), rid
            )
        extra = len(doc) + (len(DOC_SEPARATOR) if current else 0)
        if current and used + extra > capacity:
            packs.append(current)
            current, used = [(rid, doc)], len(doc)
        else:
            current.append((rid, doc))
            used += extra
    if current:
        packs.append(current)
    return packs


def _call_level(packs: list[list[tuple[int, str]]], header: str, instruction: str,
                backend, meter, op, parallelism) -> list[str]:
    requests = [
        LmRequest(instruction, header + DOC_SEPARATOR.join(doc for _, doc in pack))
        for pack in packs
    ]
    results = complete_batch(backend, requests, parallelism, meter, op)
    return [r.text for r in results]


def hierarchical_reduce(docs: list[tuple[int, str]], capacity: int, backend,
                        meter=None, op="sem_agg", parallelism=64) -> str:
    """Recursively aggregate packs until a single answer remains."""
    if not docs:
        return ""
    packs = pack_documents(docs, capacity)
    answers = _call_level(packs, "", AGG_LEAF_INSTRUCTION, backend, meter, op, parallelism)
    return _merge_partials(answers, capacity, backend, meter, op, parallelism)


def _merge_partials(answers: list[str], capacity: int, backend,
                    meter, op, parallelism) -> str:
    while len(answers) > 1:
        packs = pack_documents(list(enumerate(answers)), capacity)
        answers = _call_level(packs, MERGE_HEADER, AGG_MERGE_INSTRUCTION,
                              backend, meter, op, parallelism)
    return answers[0]


def fold_reduce(docs: list[tuple[int, str]], capacity: int, backend,
                meter=None, op="sem_agg", parallelism=64) -> str:
    """Sequential accumulation; every call is its own single-item batch."""
    accumulator = None
    pos = 0
    while pos < len(docs):
        header = "" if accumulator is None else FOLD_HEADER % accumulator
        room = capacity - len(header)
        batch: list[tuple[int, str]] = []
        used = 0
        while pos < len(docs):
            rid, doc = docs[pos]
            if len(doc) > capacity:
                raise CapacityError(
                    "document of %d chars exceeds context budget %d" % (len(doc), capacity), rid
                )
            extra = len(doc) + (len(DOC_SEPARATOR) if batch else 0)
            if batch and used + extra > room:
                break
            if not batch and len(doc) > room:
                # accumulator leaves no room: flush with this doc alone next round
                break
            batch.append((rid, doc))
            used += extra
            pos += 1
        if not batch:
            # the accumulator header leaves no room for the next document;
            # merge the two as plain partials instead so progress is made
            rid, doc = docs[pos]
            needed = len(MERGE_HEADER) + len(accumulator or "") + len(DOC_SEPARATOR) + len(doc)
            if needed > capacity:
                raise CapacityError(
                    "accumulator plus document need %d chars, context budget is %d"
                    % (needed, capacity), rid
                )
            header = MERGE_HEADER + (accumulator or "") + DOC_SEPARATOR
            batch = [(rid, doc)]
            pos += 1
        instruction = AGG_LEAF_INSTRUCTION if accumulator is None else AGG_MERGE_INSTRUCTION
        prompt = header + DOC_SEPARATOR.join(doc for _, doc in batch)
        results = complete_batch(backend, [LmRequest(instruction, prompt)],
                                 1, meter, op)
        accumulator = results[0].text
    return accumulator if accumulator is not None else ""


def _render_docs(t: Table, aggregation: lx.Langex, row_ids: list[int]) -> list[tuple[int, str]]:
    return [(i, lx.render(aggregation, t.row_dict(i), row_id=i)) for i in row_ids]


def _reduce_group(t: Table, aggregation: lx.Langex, row_ids: list[int], cfg: AggConfig,
                  backend, meter, op, parallelism) -> str:
    capacity = cfg.max_context_chars - TEMPLATE_OVERHEAD
    if cfg.partition_column is not None:
        sub = t.select_rows(row_ids)
        partitions = partition_by_equality(sub, [cfg.partition_column])
        partials = []
        for _, local_ids in partitions:
            docs = _render_docs(t, aggregation, [row_ids[i] for i in local_ids])
            # each partition collapses to one partial before any cross-partition merge
            partials.append(hierarchical_reduce(docs, capacity, backend, meter, op, parallelism))
        return _merge_partials(partials, capacity, backend, meter, op, parallelism)
    docs = _render_docs(t, aggregation, row_ids)
    if cfg.pattern == "fold":
        return fold_reduce(docs, capacity, backend, meter, op, parallelism)
    return hierarchical_reduce(docs, capacity, backend, meter, op, parallelism)


def sem_agg(t: Table, aggregation: lx.Langex, cfg: AggConfig, backend=None,
            meter: CallMeter | None = None, parallelism: int = 64,
            name: str = "aggregation", op_name: str = "sem_agg") -> Table:
    """One answer row per group_by group (one row total without group_by)."""
    lx.validate(aggregation, t.schema, "single")
    if cfg.group_by:
        groups = partition_by_equality(t, list(cfg.group_by))
        key_cols = list(cfg.group_by)
    else:
        groups = [((), list(range(t.row_count)))]
        key_cols = []
    answers = []
    keys = []
    for key, row_ids in groups:
        answers.append(_reduce_group(t, aggregation, row_ids, cfg, backend,
                                     meter, op_name, parallelism))
        keys.append(key)
    schema = [(c, t.kind_of(c)) for c in key_cols] + [(name, "text")]
    cols = {c: [k[idx] for k in keys] for idx, c in enumerate(key_cols)}
    cols[name] = answers
    return Table.from_columns(schema, cols)
