"""Semantic joins: exact nested-loop plus two budgeted approximations.

The approximate patterns shortlist candidate pairs through the right-key
similarity index (optionally after an LM projection of the left key) and
then filter the candidates exactly, so their output is always a subset of
the nested-loop output under the same deterministic predicate.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import langex as lx
from .errors import BudgetError, IndexPersistenceError
from .index import merge_rows, merged_join_schema
from .rowops import MAP_INSTRUCTION, CascadeConfig, evaluate_predicate_batch
from .runtime import CallMeter, LmRequest, complete_batch
from .table import Table, render_cell

PATTERNS = ("nested-loop", "search-filter", "map-search-filter")
JOIN_TYPES = ("inner", "left", "right", "outer")


@dataclass(frozen=True)
class JoinConfig:
    pattern: str = "nested-loop"
    call_budget: int | None = None
    map_demos: tuple[tuple[str, str], ...] | None = None
    join_type: str = "inner"
    cascade: CascadeConfig | None = None

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError("unknown join pattern %r" % self.pattern)
        if self.join_type not in JOIN_TYPES:
            raise ValueError("unknown join type %r" % self.join_type)
        if self.pattern != "nested-loop" and (self.call_budget is None or self.call_budget < 1):
            raise BudgetError("pattern %r requires a positive call_budget" % self.pattern)


class _AllPairs:
    """Marker for a constant-True nested loop; lets the cross product be
    materialized by repetition instead of a per-pair python loop."""

    def __init__(self, n1: int, n2: int):
        self.n1 = n1
        self.n2 = n2


def _join_keys(predicate: lx.Langex) -> tuple[str, str]:
    left_key = next(ph.column for ph in predicate.placeholders if ph.side == "left")
    right_key = next(ph.column for ph in predicate.placeholders if ph.side == "right")
    return left_key, right_key


def _pair_prompt(predicate: lx.Langex, left: Table, right: Table, li: int, ri: int) -> str:
    return "Claim: " + lx.render(predicate, left.row_dict(li), right.row_dict(ri), row_id=li)


def _filter_pairs(pairs, predicate, left, right, backend, cascade, meter, op, parallelism):
    prompts = [_pair_prompt(predicate, left, right, li, ri) for li, ri in pairs]
    decisions = evaluate_predicate_batch(prompts, backend, cascade, None, meter, op, parallelism)
    return [pair for pair, keep in zip(pairs, decisions) if keep]


def nested_loop_join(left: Table, right: Table, predicate: lx.Langex, backend=None,
                     cascade: CascadeConfig | None = None, meter: CallMeter | None = None,
                     op: str = "sem_join", parallelism: int = 64):
    """Evaluate the predicate on every pair; exactly N1*N2 calls."""
    n1, n2 = left.row_count, right.row_count
    if n1 == 0 or n2 == 0:
        return []
    constant = getattr(backend, "constant_text", None)
    if cascade is None and constant in ("True", "False"):
        # The answer is input-independent, so prompts are unobservable; spend
        # the calls on the meter without building N1*N2 prompt strings.
        if meter is not None:
            meter.record_batch(op, n1 * n2)
        return _AllPairs(n1, n2) if constant == "True" else []
    pairs = [(li, ri) for li in range(n1) for ri in range(n2)]
    return _filter_pairs(pairs, predicate, left, right, backend, cascade, meter, op, parallelism)


def _candidate_pairs(left: Table, right: Table, left_key: str, right_key: str,
                     k: int, query_texts: list[str] | None = None) -> list[tuple[int, int]]:
    """Per-left-row top-k similar right rows, deduplicated, in retrieval order."""
    if right_key not in right.indexes:
        raise IndexPersistenceError(
            "approximate join patterns require an index on right column %r" % right_key
        )
    index = right.indexes[right_key]
    if query_texts is None:
        if left_key in left.indexes:
            queries = left.indexes[left_key].vectors
        else:
            cells = [render_cell(left.cell(i, left_key)) for i in range(left.row_count)]
            queries = index.embedder.embed(cells)
    else:
        queries = index.embedder.embed(query_texts)
    seen = set()
    pairs = []
    for li in range(left.row_count):
        for ri, _ in index.search(queries[li], k):
            if (li, ri) not in seen:
                seen.add((li, ri))
                pairs.append((li, ri))
    return pairs


def search_filter_join(left: Table, right: Table, predicate: lx.Langex, budget: int,
                       backend=None, cascade: CascadeConfig | None = None,
                       meter: CallMeter | None = None, op: str = "sem_join",
                       parallelism: int = 64) -> list[tuple[int, int]]:
    """Retrieve K = floor(budget / N1) candidates per left row, then filter."""
    n1 = left.row_count
    if n1 == 0 or right.row_count == 0:
        return []
    k = budget // n1
    if k < 1:
        raise BudgetError("budget %d below left row count %d" % (budget, n1))
    left_key, right_key = _join_keys(predicate)
    pairs = _candidate_pairs(left, right, left_key, right_key, k)
    return _filter_pairs(pairs, predicate, left, right, backend, cascade, meter, op, parallelism)


def map_search_filter_join(left: Table, right: Table, predicate: lx.Langex, budget: int,
                           backend=None, cascade: CascadeConfig | None = None,
                           map_demos=None, meter: CallMeter | None = None,
                           op: str = "sem_join", parallelism: int = 64) -> list[tuple[int, int]]:
    """Project each left key into the right-key domain, retrieve, then filter.

    Spends exactly N1 map calls, then K = floor((budget - N1) / N1) retrieval
    candidates per row for the filter phase; total calls stay within budget.
    """
    n1 = left.row_count
    if n1 == 0 or right.row_count == 0:
        return []
    if budget < 2 * n1:
        raise BudgetError(
            "map-search-filter needs budget >= 2*N1 (%d), got %d" % (2 * n1, budget)
        )
    left_key, right_key = _join_keys(predicate)
    demos = tuple(map_demos) if map_demos else None
    requests = [
        LmRequest(
            MAP_INSTRUCTION,
            'Given the %s "%s", produce the likely matching %s. Answer with the %s only.'
            % (left_key, render_cell(left.cell(i, left_key)), right_key, right_key),
            demonstrations=demos,
        )
        for i in range(n1)
    ]
    mapped = complete_batch(backend if cascade is None else cascade.oracle,
                            requests, parallelism, meter, op)
    k = (budget - n1) // n1
    pairs = _candidate_pairs(left, right, left_key, right_key, k,
                             query_texts=[r.text for r in mapped])
    return _filter_pairs(pairs, predicate, left, right, backend, cascade, meter, op, parallelism)


def _cross_product(left: Table, right: Table) -> Table:
    schema, left_map, right_map = merged_join_schema(left, right)
    n1, n2 = left.row_count, right.row_count
    cols = {}
    for n in left.column_names:
        src = left.columns[n]
        cols[left_map[n]] = [v for v in src for _ in range(n2)]
    for n in right.column_names:
        cols[right_map[n]] = right.columns[n] * n1
    return Table.from_columns(schema, cols)


def sem_join(left: Table, right: Table, predicate: lx.Langex, cfg: JoinConfig,
             backend=None, meter: CallMeter | None = None, parallelism: int = 64,
             op_name: str = "sem_join") -> Table:
    """Join two tables on a natural-language predicate.

    Approximate patterns never exceed cfg.call_budget; non-inner join types
    emit unmatched rows with nulls on the absent side.
    """
    lx.validate(predicate, left.schema, "join", schema_right=right.schema)
    kwargs = dict(backend=backend, cascade=cfg.cascade, meter=meter,
                  op=op_name, parallelism=parallelism)
    if cfg.pattern == "nested-loop":
        matched = nested_loop_join(left, right, predicate, **kwargs)
    elif cfg.pattern == "search-filter":
        matched = search_filter_join(left, right, predicate, cfg.call_budget, **kwargs)
    else:
        matched = map_search_filter_join(left, right, predicate, cfg.call_budget,
                                         map_demos=cfg.map_demos, **kwargs)
    if isinstance(matched, _AllPairs):
        # every pair matched, so all join types coincide with the cross product
        return _cross_product(left, right)
    pairs = list(matched)
    if cfg.join_type in ("left", "outer"):
        matched_left = {li for li, _ in pairs}
        pairs += [(li, None) for li in range(left.row_count) if li not in matched_left]
    if cfg.join_type in ("right", "outer"):
        matched_right = {ri for _, ri in pairs if ri is not None}
        pairs += [(None, ri) for ri in range(right.row_count) if ri not in matched_right]
    return merge_rows(left, right, pairs)
